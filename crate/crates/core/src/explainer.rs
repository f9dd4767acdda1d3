//! Hierarchical mixture-of-experts explainer student.
//!
//! The backbone is split stage-wise into expert sub-blocks. Stage 1 is always
//! a single undivided block; each expert of a later stage reads a trainable
//! convex mixture (softmax attention) of the previous stage's outputs. K
//! binary heads sit on top, one per class, each with its own attention gate
//! over the last stage. Hardening the gates turns the mixture into one-hot
//! routing, from which a decision tree can be read off.

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionRecord, AttentionSnapshot};
use crate::backbone::{BackboneSpec, BodyStyle, ConvBnRelu, ConvOp, PostActBlock, PreActBlock};
use crate::error::{Error, Result};
use crate::losses::softmax_slice;
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, init, BatchNorm2d, Conv2d, Linear, MaxPool2, Param,
    ParamKind, Relu, Tensor4,
};
use crate::types::argmax;

/// How to split a backbone into experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerConfig {
    /// Experts per stage, one entry per stage including the leading
    /// undivided stage (which must be 1).
    pub experts_per_stage: Vec<usize>,
    /// Attention temperature shared by every gate.
    pub t: f64,
    pub seed: u64,
}

impl ExplainerConfig {
    pub fn new(experts_per_stage: Vec<usize>, t: f64, seed: u64) -> Self {
        Self { experts_per_stage, t, seed }
    }

    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        let n_stages = spec.n_explainer_stages();
        if self.experts_per_stage.len() != n_stages {
            return Err(Error::config(format!(
                "experts_per_stage has {} entries but {} has {} stages",
                self.experts_per_stage.len(),
                spec.family,
                n_stages
            )));
        }
        if self.experts_per_stage[0] != 1 {
            return Err(Error::config(format!(
                "stage 1 must stay undivided (got {} experts)",
                self.experts_per_stage[0]
            )));
        }
        if self.experts_per_stage.iter().any(|&n| n == 0) {
            return Err(Error::config("experts_per_stage entries must be >= 1"));
        }
        if !(self.t.is_finite() && self.t > 0.0) {
            return Err(Error::invalid_argument(format!(
                "attention temperature must be positive and finite, got {}",
                self.t
            )));
        }
        for (i, (&w, &n)) in stage_widths(spec).iter().zip(&self.experts_per_stage).enumerate() {
            if w % n != 0 {
                return Err(Error::config(format!(
                    "stage {} width {} is not divisible by {} experts",
                    i + 1,
                    w,
                    n
                )));
            }
        }
        Ok(())
    }
}

/// Full width of each explainer stage (before division by expert count).
fn stage_widths(spec: &BackboneSpec) -> Vec<usize> {
    match spec.style() {
        BodyStyle::ConvStages => spec.widths.clone(),
        _ => {
            let mut v = vec![spec.stem_width];
            v.extend(&spec.widths);
            v
        }
    }
}

/// One attention gate: trainable logits, softmax at temperature `t`, or
/// one-hot argmax when hardened.
#[derive(Debug, Clone)]
pub struct Gate {
    pub logits: Param,
    pub t: f64,
    pub hardened: bool,
}

impl Gate {
    fn init(name: &str, arity: usize, t: f64, rng: &mut ChaCha20Rng) -> Self {
        let v = init::attention_logits(rng, arity);
        let logits = Param::new(name, ParamKind::Attention, ndarray::ArrayD::from_shape_vec(
            ndarray::IxDyn(&[arity]),
            v,
        )
        .expect("1-d logits"));
        Self { logits, t, hardened: false }
    }

    pub fn arity(&self) -> usize {
        self.logits.value.len()
    }

    fn logit_slice(&self) -> Vec<f64> {
        self.logits.value.iter().copied().collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        let v = self.logit_slice();
        if self.hardened {
            crate::attention::harden(&softmax_slice(&v, self.t))
        } else {
            softmax_slice(&v, self.t)
        }
    }

    /// Accumulates logit gradients from mixing-weight gradients. Hardened
    /// gates are frozen.
    fn backward(&mut self, d_weights: &[f64]) {
        if self.hardened {
            return;
        }
        let a = softmax_slice(&self.logit_slice(), self.t);
        let dot: f64 = a.iter().zip(d_weights).map(|(ai, di)| ai * di).sum();
        for (gi, (ai, di)) in self.logits.grad.iter_mut().zip(a.iter().zip(d_weights)) {
            *gi += ai * (di - dot) / self.t;
        }
    }

    pub fn selected(&self) -> usize {
        argmax(&self.weights())
    }
}

/// Family-styled expert body.
#[derive(Debug, Clone)]
pub enum ExpertBlocks {
    /// Bare stem convolution (pre-act stage 1).
    BareConv(Conv2d),
    /// Conv-bn-relu units with an optional trailing 2x2 max pool.
    Units(Vec<ConvBnRelu>, Option<MaxPool2>),
    /// Pre-activation blocks, with the final bn-relu on last-stage experts.
    Pre(Vec<PreActBlock>, Option<(BatchNorm2d, Relu)>),
    /// Post-activation blocks.
    Post(Vec<PostActBlock>),
}

#[derive(Debug, Clone)]
pub struct Expert {
    pub blocks: ExpertBlocks,
    /// Output channel width.
    pub width: usize,
}

impl Expert {
    fn forward(&mut self, x: &Tensor4, train: bool) -> Result<Tensor4> {
        match &mut self.blocks {
            ExpertBlocks::BareConv(c) => c.forward(x, train),
            ExpertBlocks::Units(units, pool) => {
                let mut cur = x.clone();
                for u in units.iter_mut() {
                    cur = u.forward(&cur, train)?;
                }
                match pool {
                    Some(p) => p.forward(&cur, train),
                    None => Ok(cur),
                }
            }
            ExpertBlocks::Pre(blocks, fin) => {
                let mut cur = x.clone();
                for b in blocks.iter_mut() {
                    cur = b.forward(&cur, train)?;
                }
                match fin {
                    Some((bn, relu)) => {
                        let cur = bn.forward(&cur, train)?;
                        Ok(relu.forward(&cur, train))
                    }
                    None => Ok(cur),
                }
            }
            ExpertBlocks::Post(blocks) => {
                let mut cur = x.clone();
                for b in blocks.iter_mut() {
                    cur = b.forward(&cur, train)?;
                }
                Ok(cur)
            }
        }
    }

    fn backward(&mut self, gy: &Tensor4) -> Result<Tensor4> {
        match &mut self.blocks {
            ExpertBlocks::BareConv(c) => c.backward(gy),
            ExpertBlocks::Units(units, pool) => {
                let mut g = match pool {
                    Some(p) => p.backward(gy)?,
                    None => gy.clone(),
                };
                for u in units.iter_mut().rev() {
                    g = u.backward(&g)?;
                }
                Ok(g)
            }
            ExpertBlocks::Pre(blocks, fin) => {
                let mut g = match fin {
                    Some((bn, relu)) => {
                        let g = relu.backward(gy)?;
                        bn.backward(&g)?
                    }
                    None => gy.clone(),
                };
                for b in blocks.iter_mut().rev() {
                    g = b.backward(&g)?;
                }
                Ok(g)
            }
            ExpertBlocks::Post(blocks) => {
                let mut g = gy.clone();
                for b in blocks.iter_mut().rev() {
                    g = b.backward(&g)?;
                }
                Ok(g)
            }
        }
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match &mut self.blocks {
            ExpertBlocks::BareConv(c) => c.visit_params(f),
            ExpertBlocks::Units(units, _) => {
                for u in units.iter_mut() {
                    u.visit_params(f);
                }
            }
            ExpertBlocks::Pre(blocks, fin) => {
                for b in blocks.iter_mut() {
                    b.visit_params(f);
                }
                if let Some((bn, _)) = fin {
                    bn.visit_params(f);
                }
            }
            ExpertBlocks::Post(blocks) => {
                for b in blocks.iter_mut() {
                    b.visit_params(f);
                }
            }
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::Array1<f64>)) {
        match &mut self.blocks {
            ExpertBlocks::BareConv(_) => {}
            ExpertBlocks::Units(units, _) => {
                for u in units.iter_mut() {
                    u.visit_buffers(f);
                }
            }
            ExpertBlocks::Pre(blocks, fin) => {
                for b in blocks.iter_mut() {
                    b.visit_buffers(f);
                }
                if let Some((bn, _)) = fin {
                    bn.visit_buffers(f);
                }
            }
            ExpertBlocks::Post(blocks) => {
                for b in blocks.iter_mut() {
                    b.visit_buffers(f);
                }
            }
        }
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }
}

/// A gated stage: `experts[j]` reads the mixture given by `gates[j]`.
#[derive(Debug, Clone)]
pub struct ExpertStage {
    pub experts: Vec<Expert>,
    pub gates: Vec<Gate>,
}

/// One binary class head: gate over the last stage, global average pooling,
/// and a 2-way linear classifier.
#[derive(Debug, Clone)]
pub struct Head {
    pub gate: Gate,
    pub fc: Linear,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    /// Inputs to each gated stage (outputs of the previous stage).
    stage_inputs: Vec<Vec<Tensor4>>,
    /// Outputs of the last stage (inputs to the heads).
    head_inputs: Vec<Tensor4>,
    /// Spatial size of the head inputs.
    head_hw: (usize, usize),
}

/// Output of one explainer forward pass.
#[derive(Debug, Clone)]
pub struct ExplainerOutput {
    /// Binary head logits, shape (batch, K, 2); index 1 is "is the class".
    pub head_logits: Array3<f64>,
    /// Gate state of every expert and head.
    pub snapshot: AttentionSnapshot,
}

/// The explainer student network.
#[derive(Debug, Clone)]
pub struct ExplainerModel {
    pub spec: BackboneSpec,
    pub config: ExplainerConfig,
    pub stage1: Expert,
    /// Gated stages 2..=L in order.
    pub stages: Vec<ExpertStage>,
    pub heads: Vec<Head>,
    cache: Option<ForwardCache>,
}

/// Splits `spec` into an explainer per `config`. Fails with a config error
/// naming the offending stage when a width is not divisible by its expert
/// count.
pub fn build_explainer(spec: &BackboneSpec, config: &ExplainerConfig) -> Result<ExplainerModel> {
    spec.validate()?;
    config.validate(spec)?;
    use rand::SeedableRng;
    let mut wrng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut grng = init::substream(config.seed, 0xE47);

    let widths = stage_widths(spec);
    let n = &config.experts_per_stage;
    let n_stages = widths.len();
    // Per-stage expert output widths.
    let out_w: Vec<usize> = widths.iter().zip(n).map(|(&w, &e)| w / e).collect();

    let build_stage = |si: usize, wrng: &mut ChaCha20Rng| -> Result<Vec<Expert>> {
        let experts_n = n[si];
        let c_in = if si == 0 { spec.input.0 } else { out_w[si - 1] };
        let c_out = out_w[si];
        let mut experts = Vec::with_capacity(experts_n);
        for e in 0..experts_n {
            let prefix = format!("s{}e{}", si + 1, e);
            let blocks = match spec.style() {
                BodyStyle::ConvStages => {
                    let mut units = Vec::new();
                    let mut cin = c_in;
                    for u in 0..spec.depths[si] {
                        let w = init::conv_weight(wrng, c_out, cin, 3);
                        units.push(ConvBnRelu {
                            conv: ConvOp::Plain(Conv2d::new(
                                &format!("{prefix}.c{}", u + 1),
                                w,
                                None,
                                1,
                                1,
                            )),
                            bn: BatchNorm2d::new(&format!("{prefix}.bn{}", u + 1), c_out),
                            relu: Relu::new(),
                        });
                        cin = c_out;
                    }
                    let pool = if si + 1 < n_stages { Some(MaxPool2::new()) } else { None };
                    ExpertBlocks::Units(units, pool)
                }
                BodyStyle::PreAct if si == 0 => {
                    let w = init::conv_weight(wrng, c_out, c_in, 3);
                    ExpertBlocks::BareConv(Conv2d::new(&format!("{prefix}.stem"), w, None, 1, 1))
                }
                BodyStyle::PostAct if si == 0 => {
                    let w = init::conv_weight(wrng, c_out, c_in, 3);
                    ExpertBlocks::Units(
                        vec![ConvBnRelu {
                            conv: ConvOp::Plain(Conv2d::new(&format!("{prefix}.stem"), w, None, 1, 1)),
                            bn: BatchNorm2d::new(&format!("{prefix}.stembn"), c_out),
                            relu: Relu::new(),
                        }],
                        None,
                    )
                }
                style => {
                    // Residual group: the group index is si - 1.
                    let gi = si - 1;
                    let depth = spec.depths[gi];
                    let group_stride = if gi == 0 { 1 } else { 2 };
                    let mut cin = c_in;
                    if style == BodyStyle::PreAct {
                        let mut blocks = Vec::new();
                        for bi in 0..depth {
                            let stride = if bi == 0 { group_stride } else { 1 };
                            let w1 = init::conv_weight(wrng, c_out, cin, 3);
                            let w2 = init::conv_weight(wrng, c_out, c_out, 3);
                            let shortcut = if cin != c_out || stride != 1 {
                                let ws = init::conv_weight(wrng, c_out, cin, 1);
                                Some(Conv2d::new(&format!("{prefix}.b{}.sc", bi + 1), ws, None, stride, 0))
                            } else {
                                None
                            };
                            blocks.push(PreActBlock {
                                bn1: BatchNorm2d::new(&format!("{prefix}.b{}.bn1", bi + 1), cin),
                                relu1: Relu::new(),
                                conv1: ConvOp::Plain(Conv2d::new(
                                    &format!("{prefix}.b{}.c1", bi + 1),
                                    w1,
                                    None,
                                    stride,
                                    1,
                                )),
                                bn2: BatchNorm2d::new(&format!("{prefix}.b{}.bn2", bi + 1), c_out),
                                relu2: Relu::new(),
                                conv2: ConvOp::Plain(Conv2d::new(
                                    &format!("{prefix}.b{}.c2", bi + 1),
                                    w2,
                                    None,
                                    1,
                                    1,
                                )),
                                shortcut,
                            });
                            cin = c_out;
                        }
                        let fin = if si + 1 == n_stages {
                            Some((BatchNorm2d::new(&format!("{prefix}.finbn"), c_out), Relu::new()))
                        } else {
                            None
                        };
                        ExpertBlocks::Pre(blocks, fin)
                    } else {
                        let mut blocks = Vec::new();
                        for bi in 0..depth {
                            let stride = if bi == 0 { group_stride } else { 1 };
                            let w1 = init::conv_weight(wrng, c_out, cin, 3);
                            let w2 = init::conv_weight(wrng, c_out, c_out, 3);
                            let shortcut = if cin != c_out || stride != 1 {
                                let ws = init::conv_weight(wrng, c_out, cin, 1);
                                Some((
                                    Conv2d::new(&format!("{prefix}.b{}.sc", bi + 1), ws, None, stride, 0),
                                    BatchNorm2d::new(&format!("{prefix}.b{}.scbn", bi + 1), c_out),
                                ))
                            } else {
                                None
                            };
                            blocks.push(PostActBlock {
                                conv1: ConvOp::Plain(Conv2d::new(
                                    &format!("{prefix}.b{}.c1", bi + 1),
                                    w1,
                                    None,
                                    stride,
                                    1,
                                )),
                                bn1: BatchNorm2d::new(&format!("{prefix}.b{}.bn1", bi + 1), c_out),
                                relu1: Relu::new(),
                                conv2: ConvOp::Plain(Conv2d::new(
                                    &format!("{prefix}.b{}.c2", bi + 1),
                                    w2,
                                    None,
                                    1,
                                    1,
                                )),
                                bn2: BatchNorm2d::new(&format!("{prefix}.b{}.bn2", bi + 1), c_out),
                                shortcut,
                                relu_out: Relu::new(),
                            });
                            cin = c_out;
                        }
                        ExpertBlocks::Post(blocks)
                    }
                }
            };
            experts.push(Expert { blocks, width: c_out });
        }
        Ok(experts)
    };

    let stage1 = build_stage(0, &mut wrng)?.pop().expect("one undivided expert");
    let mut stages = Vec::new();
    for si in 1..n_stages {
        let experts = build_stage(si, &mut wrng)?;
        let gates = (0..n[si])
            .map(|e| Gate::init(&format!("s{}e{}.gate", si + 1, e), n[si - 1], config.t, &mut grng))
            .collect();
        stages.push(ExpertStage { experts, gates });
    }

    let last_w = out_w[n_stages - 1];
    let heads = (0..spec.k)
        .map(|k| {
            let gate = Gate::init(&format!("head{k}.gate"), n[n_stages - 1], config.t, &mut grng);
            let w = init::linear_weight(&mut wrng, 2, last_w);
            Head { gate, fc: Linear::new(&format!("head{k}.fc"), w, vec![0.0; 2]) }
        })
        .collect();

    Ok(ExplainerModel {
        spec: spec.clone(),
        config: config.clone(),
        stage1,
        stages,
        heads,
        cache: None,
    })
}

impl ExplainerModel {
    pub fn n_stages(&self) -> usize {
        self.stages.len() + 1
    }

    /// Gate state of every expert and head. Heads sit at stage L+1, one
    /// record per class.
    pub fn snapshot(&self) -> AttentionSnapshot {
        let mut records = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            let si = i + 2; // gated stages start at 2
            for (j, gate) in stage.gates.iter().enumerate() {
                records.push(AttentionRecord {
                    stage: si,
                    block: j,
                    sources: (0..gate.arity()).map(|l| format!("s{}b{}", si - 1, l)).collect(),
                    logits: gate.logit_slice(),
                    weights: gate.weights(),
                });
            }
        }
        let head_stage = self.n_stages() + 1;
        for (k, head) in self.heads.iter().enumerate() {
            records.push(AttentionRecord {
                stage: head_stage,
                block: k,
                sources: (0..head.gate.arity())
                    .map(|l| format!("s{}b{}", head_stage - 1, l))
                    .collect(),
                logits: head.gate.logit_slice(),
                weights: head.gate.weights(),
            });
        }
        AttentionSnapshot::new(records)
    }

    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Result<ExplainerOutput> {
        let (b, c, h, w) = x.dim();
        if (c, h, w) != self.spec.input {
            return Err(Error::shape(format!(
                "input shape ({c}, {h}, {w}) does not match spec {:?}",
                self.spec.input
            )));
        }
        let mut cur = vec![self.stage1.forward(x, train)?];
        let mut stage_inputs = Vec::new();
        for stage in self.stages.iter_mut() {
            let mut outs = Vec::with_capacity(stage.experts.len());
            for (expert, gate) in stage.experts.iter_mut().zip(&stage.gates) {
                let weights = gate.weights();
                let mixed = mix_batch(&weights, &cur)?;
                outs.push(expert.forward(&mixed, train)?);
            }
            if train {
                stage_inputs.push(cur);
            }
            cur = outs;
        }

        let (_, _, fh, fw) = cur[0].dim();
        let mut head_logits = Array3::zeros((b, self.heads.len(), 2));
        for (k, head) in self.heads.iter_mut().enumerate() {
            let weights = head.gate.weights();
            let mixed = mix_batch(&weights, &cur)?;
            let pooled = global_avg_pool(&mixed);
            let logits = head.fc.forward(&pooled, train)?;
            for bi in 0..b {
                head_logits[(bi, k, 0)] = logits[(bi, 0)];
                head_logits[(bi, k, 1)] = logits[(bi, 1)];
            }
        }
        if train {
            self.cache = Some(ForwardCache { stage_inputs, head_inputs: cur, head_hw: (fh, fw) });
        }
        Ok(ExplainerOutput { head_logits, snapshot: self.snapshot() })
    }

    /// Backward from per-head logit gradients (batch, K, 2). Parameter
    /// gradients accumulate; requires a preceding train-mode forward.
    pub fn backward(&mut self, g_head_logits: &Array3<f64>) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::invariant("explainer backward without train-mode forward"))?;
        let (b, k, two) = g_head_logits.dim();
        if k != self.heads.len() || two != 2 {
            return Err(Error::shape(format!(
                "head gradient shape ({b}, {k}, {two}) does not match {} heads",
                self.heads.len()
            )));
        }
        let (fh, fw) = cache.head_hw;
        let mut g_last: Vec<Tensor4> =
            cache.head_inputs.iter().map(|t| Tensor4::zeros(t.dim())).collect();
        for (ki, head) in self.heads.iter_mut().enumerate() {
            let mut g_logits = Array2::zeros((b, 2));
            for bi in 0..b {
                g_logits[(bi, 0)] = g_head_logits[(bi, ki, 0)];
                g_logits[(bi, 1)] = g_head_logits[(bi, ki, 1)];
            }
            let g_pooled = head.fc.backward(&g_logits)?;
            let g_mixed = global_avg_pool_backward(&g_pooled, fh, fw);
            let weights = head.gate.weights();
            let d_w: Vec<f64> = cache
                .head_inputs
                .iter()
                .map(|src| (&g_mixed * src).sum())
                .collect();
            head.gate.backward(&d_w);
            for (gl, &wl) in g_last.iter_mut().zip(&weights) {
                gl.scaled_add(wl, &g_mixed);
            }
        }

        let mut g_cur = g_last;
        for (stage, inputs) in self.stages.iter_mut().zip(cache.stage_inputs.iter()).rev() {
            let mut g_inputs: Vec<Tensor4> =
                inputs.iter().map(|t| Tensor4::zeros(t.dim())).collect();
            for ((expert, gate), g_out) in
                stage.experts.iter_mut().zip(stage.gates.iter_mut()).zip(&g_cur)
            {
                let g_mixed = expert.backward(g_out)?;
                let weights = gate.weights();
                let d_w: Vec<f64> = inputs.iter().map(|src| (&g_mixed * src).sum()).collect();
                gate.backward(&d_w);
                for (gi, &wl) in g_inputs.iter_mut().zip(&weights) {
                    gi.scaled_add(wl, &g_mixed);
                }
            }
            g_cur = g_inputs;
        }
        let _ = self.stage1.backward(&g_cur[0])?;
        Ok(())
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stage1.visit_params(f);
        for stage in self.stages.iter_mut() {
            for e in stage.experts.iter_mut() {
                e.visit_params(f);
            }
            for g in stage.gates.iter_mut() {
                f(&mut g.logits);
            }
        }
        for head in self.heads.iter_mut() {
            f(&mut head.gate.logits);
            head.fc.visit_params(f);
        }
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::Array1<f64>)) {
        self.stage1.visit_buffers(f);
        for stage in self.stages.iter_mut() {
            for e in stage.experts.iter_mut() {
                e.visit_buffers(f);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    /// Adds `gamma * dH/dv` to every gate's logit gradient and returns the
    /// total gate entropy (hardened gates contribute nothing).
    pub fn add_entropy_grad(&mut self, gamma: f64) -> Result<f64> {
        let mut total = 0.0;
        let mut gates: Vec<&mut Gate> = Vec::new();
        for stage in self.stages.iter_mut() {
            gates.extend(stage.gates.iter_mut());
        }
        for head in self.heads.iter_mut() {
            gates.push(&mut head.gate);
        }
        for gate in gates {
            if gate.hardened {
                continue;
            }
            let v = gate.logit_slice();
            let a = softmax_slice(&v, gate.t);
            total += crate::losses::entropy_slice(&a);
            let g = crate::losses::entropy_grad_from_logits(&v, gate.t)?;
            for (gi, gv) in gate.logits.grad.iter_mut().zip(g) {
                *gi += gamma * gv;
            }
        }
        Ok(total)
    }

    pub fn is_hardened(&self) -> bool {
        self.stages.iter().all(|s| s.gates.iter().all(|g| g.hardened))
            && self.heads.iter().all(|h| h.gate.hardened)
    }

    /// Expert blocks reachable from the heads once hardened, as
    /// (stage index 1-based, block index) pairs. Stage 1 is always retained.
    pub fn retained_blocks(&self) -> Vec<(usize, usize)> {
        let n_stages = self.n_stages();
        let mut retained: Vec<Vec<bool>> = Vec::new();
        retained.push(vec![true]); // stage 1
        for stage in &self.stages {
            retained.push(vec![false; stage.experts.len()]);
        }
        let mut frontier: Vec<usize> = self.heads.iter().map(|h| h.gate.selected()).collect();
        for si in (1..n_stages).rev() {
            let mut next = Vec::new();
            for &j in &frontier {
                if !retained[si][j] {
                    retained[si][j] = true;
                    next.push(self.stages[si - 1].gates[j].selected());
                }
            }
            frontier = next;
        }
        let mut out = Vec::new();
        for (si, row) in retained.iter().enumerate() {
            for (j, &r) in row.iter().enumerate() {
                if r {
                    out.push((si + 1, j));
                }
            }
        }
        out
    }

    /// Parameters that survive pruning: stage 1, retained experts, their
    /// gates, and all heads.
    pub fn pruned_param_count(&mut self) -> usize {
        let retained = self.retained_blocks();
        let mut n = self.stage1.param_count();
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (j, e) in stage.experts.iter_mut().enumerate() {
                if retained.contains(&(si + 2, j)) {
                    n += e.param_count() + stage.gates[j].arity();
                }
            }
        }
        for head in self.heads.iter_mut() {
            n += head.gate.arity();
            let mut fc = 0;
            head.fc.visit_params(&mut |p| fc += p.len());
            n += fc;
        }
        n
    }

    /// Forward computing only the retained experts; requires a hardened
    /// model. Equals [`ExplainerModel::forward`] output exactly.
    pub fn forward_pruned(&mut self, x: &Tensor4) -> Result<Array3<f64>> {
        if !self.is_hardened() {
            return Err(Error::invariant("forward_pruned requires a hardened model"));
        }
        let retained = self.retained_blocks();
        let b = x.dim().0;
        let mut cur: Vec<Option<Tensor4>> = vec![Some(self.stage1.forward(x, false)?)];
        for (si, stage) in self.stages.iter_mut().enumerate() {
            let mut outs: Vec<Option<Tensor4>> = Vec::with_capacity(stage.experts.len());
            for (j, (expert, gate)) in stage.experts.iter_mut().zip(&stage.gates).enumerate() {
                if retained.contains(&(si + 2, j)) {
                    let src = cur[gate.selected()]
                        .as_ref()
                        .ok_or_else(|| Error::invariant("pruned source was not computed"))?;
                    outs.push(Some(expert.forward(src, false)?));
                } else {
                    outs.push(None);
                }
            }
            cur = outs;
        }
        let mut head_logits = Array3::zeros((b, self.heads.len(), 2));
        for (k, head) in self.heads.iter_mut().enumerate() {
            let src = cur[head.gate.selected()]
                .as_ref()
                .ok_or_else(|| Error::invariant("pruned head source was not computed"))?;
            let pooled = global_avg_pool(src);
            let logits = head.fc.forward(&pooled, false)?;
            for bi in 0..b {
                head_logits[(bi, k, 0)] = logits[(bi, 0)];
                head_logits[(bi, k, 1)] = logits[(bi, 1)];
            }
        }
        Ok(head_logits)
    }

    /// Class predictions: per head, the tempered (tau = 1) positive
    /// probability; the class is the head with the largest one, ties going to
    /// the lowest index.
    pub fn predict(&mut self, x: &Tensor4) -> Result<Vec<usize>> {
        let out = self.forward(x, false)?;
        Ok(predict_class(&out.head_logits))
    }
}

/// Mixes batched feature maps: `sum_l weights[l] * features[l]`.
fn mix_batch(weights: &[f64], features: &[Tensor4]) -> Result<Tensor4> {
    if weights.len() != features.len() {
        return Err(Error::shape(format!(
            "{} mixing weights vs {} feature maps",
            weights.len(),
            features.len()
        )));
    }
    let mut out = Tensor4::zeros(features[0].dim());
    for (w, fm) in weights.iter().zip(features) {
        if fm.dim() != out.dim() {
            return Err(Error::shape("mixed feature maps must share a shape".to_string()));
        }
        out.scaled_add(*w, fm);
    }
    Ok(out)
}

/// Per-sample class decisions from binary head logits (batch, K, 2): argmax
/// over heads of the positive-class probability, ties to the lowest index.
pub fn predict_class(head_logits: &Array3<f64>) -> Vec<usize> {
    let (b, k, _) = head_logits.dim();
    (0..b)
        .map(|bi| {
            let pos: Vec<f64> = (0..k)
                .map(|ki| {
                    let z = [head_logits[(bi, ki, 0)], head_logits[(bi, ki, 1)]];
                    let p = softmax_slice(&z, 1.0);
                    p[1]
                })
                .collect();
            argmax(&pos)
        })
        .collect()
}

/// Hardens every gate: attention becomes one-hot argmax routing and the gate
/// logits stop receiving gradients.
pub fn harden_model(mut model: ExplainerModel) -> ExplainerModel {
    model.harden_in_place();
    model
}

impl ExplainerModel {
    /// In-place version of [`harden_model`].
    pub fn harden_in_place(&mut self) {
        for stage in self.stages.iter_mut() {
            for g in stage.gates.iter_mut() {
                g.hardened = true;
            }
        }
        for head in self.heads.iter_mut() {
            head.gate.hardened = true;
        }
    }
}
