//! Backbone families and runnable networks.
//!
//! Five CIFAR-scale families are provided. Each can be built as a plain
//! network or with its eligible convolutions replaced by virtual attention
//! layers ([`crate::vam::VamLayer`]); the stem convolution, 1x1 shortcut
//! convolutions, and the classifier are never wrapped.

use ndarray::Array2;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionRecord, AttentionSnapshot};
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, init, BatchNorm2d, Conv2d, Linear, MaxPool2, Param,
    Relu, Tensor4,
};
use crate::vam::{VamLayer, VamLayerSpec};

/// Supported architecture families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    TinyCnn,
    Vgg8Like,
    Wrn16x2Like,
    Wrn40x1Like,
    Resnet18Like,
}

impl Family {
    pub fn as_str(&self) -> &'static str {
        match self {
            Family::TinyCnn => "tiny-cnn",
            Family::Vgg8Like => "vgg8-like",
            Family::Wrn16x2Like => "wrn-16-2-like",
            Family::Wrn40x1Like => "wrn-40-1-like",
            Family::Resnet18Like => "resnet18-like",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "tiny-cnn" => Ok(Family::TinyCnn),
            "vgg8-like" => Ok(Family::Vgg8Like),
            "wrn-16-2-like" => Ok(Family::Wrn16x2Like),
            "wrn-40-1-like" => Ok(Family::Wrn40x1Like),
            "resnet18-like" => Ok(Family::Resnet18Like),
            other => Err(Error::config(format!(
                "unknown family '{other}' (expected tiny-cnn, vgg8-like, wrn-16-2-like, wrn-40-1-like, resnet18-like)"
            ))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Layer arrangement of a family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BodyStyle {
    /// Stages of conv-bn-relu units with max pooling between stages
    /// (tiny-cnn, vgg8-like). The very first convolution acts as the stem.
    ConvStages,
    /// Pre-activation residual groups behind a bare stem convolution, with a
    /// final bn-relu (wrn families).
    PreAct,
    /// Post-activation residual groups behind a conv-bn-relu stem
    /// (resnet18-like).
    PostAct,
}

/// Structural description of a backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub family: Family,
    /// Stem width for residual styles; ignored (0) for ConvStages.
    pub stem_width: usize,
    /// Per-stage (ConvStages) or per-group (residual) channel widths.
    pub widths: Vec<usize>,
    /// Convs per stage (ConvStages) or blocks per group (residual).
    pub depths: Vec<usize>,
    /// Input (channels, height, width).
    pub input: (usize, usize, usize),
    /// Class count.
    pub k: usize,
}

impl BackboneSpec {
    /// Family defaults at a given class count and input size.
    pub fn family_default(family: Family, k: usize, input_hw: (usize, usize)) -> Self {
        let (h, w) = input_hw;
        let (stem_width, widths, depths): (usize, Vec<usize>, Vec<usize>) = match family {
            Family::TinyCnn => (0, vec![16, 32, 64], vec![1, 1, 1]),
            Family::Vgg8Like => (0, vec![64, 128, 256, 512], vec![1, 1, 2, 2]),
            Family::Wrn16x2Like => (16, vec![32, 64, 128], vec![2, 2, 2]),
            Family::Wrn40x1Like => (16, vec![16, 32, 64], vec![6, 6, 6]),
            Family::Resnet18Like => (64, vec![64, 128, 256, 512], vec![2, 2, 2, 2]),
        };
        Self {
            family,
            stem_width,
            widths,
            depths,
            input: (3, h, w),
            k,
        }
    }

    pub fn style(&self) -> BodyStyle {
        match self.family {
            Family::TinyCnn | Family::Vgg8Like => BodyStyle::ConvStages,
            Family::Wrn16x2Like | Family::Wrn40x1Like => BodyStyle::PreAct,
            Family::Resnet18Like => BodyStyle::PostAct,
        }
    }

    /// Number of explainer stages: the undivided first block plus one stage
    /// per width entry (ConvStages treats its first stage as the undivided
    /// block).
    pub fn n_explainer_stages(&self) -> usize {
        match self.style() {
            BodyStyle::ConvStages => self.widths.len(),
            _ => self.widths.len() + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config(format!("K = {} must be >= 2", self.k)));
        }
        if self.widths.is_empty() || self.widths.len() != self.depths.len() {
            return Err(Error::config(format!(
                "widths ({}) and depths ({}) must be non-empty and equal-length",
                self.widths.len(),
                self.depths.len()
            )));
        }
        if self.style() != BodyStyle::ConvStages && self.stem_width == 0 {
            return Err(Error::config("residual families need a stem width"));
        }
        Ok(())
    }

    /// Per-group strides for residual styles.
    fn group_strides(&self) -> Vec<usize> {
        (0..self.widths.len()).map(|g| if g == 0 { 1 } else { 2 }).collect()
    }
}

/// One convolution slot in the structural inventory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvDesc {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub s: usize,
    pub stride: usize,
    pub pad: usize,
    /// Eligible for virtual attention wrapping (not a stem / 1x1 shortcut).
    pub eligible: bool,
}

/// Enumerates every convolution of the family in forward order.
pub fn conv_inventory(spec: &BackboneSpec) -> Vec<ConvDesc> {
    let mut out = Vec::new();
    match spec.style() {
        BodyStyle::ConvStages => {
            let mut c_in = spec.input.0;
            for (si, (&w, &d)) in spec.widths.iter().zip(&spec.depths).enumerate() {
                for bi in 0..d {
                    let stem = si == 0 && bi == 0;
                    out.push(ConvDesc {
                        name: format!("s{}.c{}", si + 1, bi + 1),
                        c_in,
                        c_out: w,
                        s: 3,
                        stride: 1,
                        pad: 1,
                        eligible: !stem,
                    });
                    c_in = w;
                }
            }
        }
        BodyStyle::PreAct | BodyStyle::PostAct => {
            out.push(ConvDesc {
                name: "stem".into(),
                c_in: spec.input.0,
                c_out: spec.stem_width,
                s: 3,
                stride: 1,
                pad: 1,
                eligible: false,
            });
            let mut c_in = spec.stem_width;
            let strides = spec.group_strides();
            for (gi, (&w, &d)) in spec.widths.iter().zip(&spec.depths).enumerate() {
                for bi in 0..d {
                    let stride = if bi == 0 { strides[gi] } else { 1 };
                    let prefix = format!("g{}.b{}", gi + 1, bi + 1);
                    out.push(ConvDesc {
                        name: format!("{prefix}.conv1"),
                        c_in,
                        c_out: w,
                        s: 3,
                        stride,
                        pad: 1,
                        eligible: true,
                    });
                    out.push(ConvDesc {
                        name: format!("{prefix}.conv2"),
                        c_in: w,
                        c_out: w,
                        s: 3,
                        stride: 1,
                        pad: 1,
                        eligible: true,
                    });
                    if c_in != w || stride != 1 {
                        out.push(ConvDesc {
                            name: format!("{prefix}.shortcut"),
                            c_in,
                            c_out: w,
                            s: 1,
                            stride,
                            pad: 0,
                            eligible: false,
                        });
                    }
                    c_in = w;
                }
            }
        }
    }
    out
}

/// Total trainable parameters of the plain network, computed from the
/// structure (convs bias-free where followed by BN, batch-norm pairs, final
/// classifier with bias).
pub fn plain_param_count(spec: &BackboneSpec) -> usize {
    let mut count = 0usize;
    for c in conv_inventory(spec) {
        count += c.c_out * c.c_in * c.s * c.s;
    }
    // Batch-norm gamma/beta pairs.
    match spec.style() {
        BodyStyle::ConvStages => {
            for (&w, &d) in spec.widths.iter().zip(&spec.depths) {
                count += 2 * w * d;
            }
        }
        BodyStyle::PreAct => {
            // bn1 (block input width) + bn2 (block output width) per block,
            // plus the final bn.
            let mut c_in = spec.stem_width;
            for (&w, &d) in spec.widths.iter().zip(&spec.depths) {
                for _ in 0..d {
                    count += 2 * c_in + 2 * w;
                    c_in = w;
                }
            }
            count += 2 * spec.widths[spec.widths.len() - 1];
        }
        BodyStyle::PostAct => {
            count += 2 * spec.stem_width;
            let mut c_in = spec.stem_width;
            let strides = spec.group_strides();
            for (gi, (&w, &d)) in spec.widths.iter().zip(&spec.depths).enumerate() {
                for bi in 0..d {
                    count += 4 * w; // bn1 + bn2
                    let stride = if bi == 0 { strides[gi] } else { 1 };
                    if c_in != w || stride != 1 {
                        count += 2 * w; // shortcut bn
                    }
                    c_in = w;
                }
            }
        }
    }
    let last = *spec.widths.last().expect("non-empty widths");
    count += (last + 1) * spec.k;
    count
}

/// Attention-logit count added by wrapping at a given channels-per-block:
/// sum over eligible, divisible convolutions of N*M.
pub fn attention_logit_count(spec: &BackboneSpec, channels_per_block: usize) -> usize {
    conv_inventory(spec)
        .iter()
        .filter(|c| c.eligible && c.c_in % channels_per_block == 0 && c.c_out % channels_per_block == 0)
        .map(|c| (c.c_in / channels_per_block) * (c.c_out / channels_per_block))
        .sum()
}

// ---------------------------------------------------------------------------
// Runtime network
// ---------------------------------------------------------------------------

/// Wrapping policy used when building a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WrapMode {
    /// No virtual attention anywhere.
    Plain,
    /// Wrap every eligible, divisible convolution at this channels-per-block.
    ChannelsPerBlock(usize),
    /// Wrap every eligible convolution with M = N = 1 (channels-per-block
    /// equal to each layer's own width); the degenerate identity case.
    FullWidth,
}

/// Report of which convolutions were wrapped or skipped.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct WrapReport {
    /// (layer name, M, N) per wrapped convolution.
    pub wrapped: Vec<(String, usize, usize)>,
    /// (layer name, reason) per skipped convolution.
    pub skipped: Vec<(String, String)>,
    /// Total attention logits added.
    pub attention_logits: usize,
}

/// A convolution slot: plain or wrapped.
#[derive(Debug, Clone)]
pub enum ConvOp {
    Plain(Conv2d),
    Vam(VamLayer),
}

impl ConvOp {
    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Result<Tensor4> {
        match self {
            ConvOp::Plain(c) => c.forward(x, train),
            ConvOp::Vam(v) => v.forward(x, train),
        }
    }

    pub fn backward(&mut self, gy: &Tensor4) -> Result<Tensor4> {
        match self {
            ConvOp::Plain(c) => c.backward(gy),
            ConvOp::Vam(v) => v.backward(gy),
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            ConvOp::Plain(c) => c.visit_params(f),
            ConvOp::Vam(v) => v.visit_params(f),
        }
    }

    pub fn vam(&self) -> Option<&VamLayer> {
        match self {
            ConvOp::Plain(_) => None,
            ConvOp::Vam(v) => Some(v),
        }
    }

    pub fn set_hardened(&mut self, hardened: bool) {
        if let ConvOp::Vam(v) = self {
            v.hardened = hardened;
        }
    }
}

/// conv -> bn -> relu unit.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: ConvOp,
    pub bn: BatchNorm2d,
    pub relu: Relu,
}

impl ConvBnRelu {
    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Result<Tensor4> {
        let y = self.conv.forward(x, train)?;
        let y = self.bn.forward(&y, train)?;
        Ok(self.relu.forward(&y, train))
    }

    pub fn backward(&mut self, gy: &Tensor4) -> Result<Tensor4> {
        let g = self.relu.backward(gy)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::Array1<f64>)) {
        self.bn.visit_buffers(f);
    }
}

/// Pre-activation residual block (wrn style):
/// `o = relu(bn1(x)); y = conv2(relu(bn2(conv1(o)))) + (x or shortcut(o))`.
#[derive(Debug, Clone)]
pub struct PreActBlock {
    pub bn1: BatchNorm2d,
    pub relu1: Relu,
    pub conv1: ConvOp,
    pub bn2: BatchNorm2d,
    pub relu2: Relu,
    pub conv2: ConvOp,
    /// 1x1 projection used when input/output shapes differ; applied to `o`.
    pub shortcut: Option<Conv2d>,
}

impl PreActBlock {
    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Result<Tensor4> {
        let o = self.bn1.forward(x, train)?;
        let o = self.relu1.forward(&o, train);
        let h = self.conv1.forward(&o, train)?;
        let h = self.bn2.forward(&h, train)?;
        let h = self.relu2.forward(&h, train);
        let y = self.conv2.forward(&h, train)?;
        let s = match &mut self.shortcut {
            Some(sc) => sc.forward(&o, train)?,
            None => x.clone(),
        };
        Ok(y + s)
    }

    pub fn backward(&mut self, gy: &Tensor4) -> Result<Tensor4> {
        let g = self.conv2.backward(gy)?;
        let g = self.relu2.backward(&g)?;
        let g = self.bn2.backward(&g)?;
        let mut go = self.conv1.backward(&g)?;
        match &mut self.shortcut {
            Some(sc) => {
                go = go + sc.backward(gy)?;
                let g = self.relu1.backward(&go)?;
                self.bn1.backward(&g)
            }
            None => {
                let g = self.relu1.backward(&go)?;
                Ok(self.bn1.backward(&g)? + gy)
            }
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.bn1.visit_params(f);
        self.conv1.visit_params(f);
        self.bn2.visit_params(f);
        self.conv2.visit_params(f);
        if let Some(sc) = &mut self.shortcut {
            sc.visit_params(f);
        }
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::Array1<f64>)) {
        self.bn1.visit_buffers(f);
        self.bn2.visit_buffers(f);
    }
}

/// Post-activation residual block (resnet style):
/// `relu(bn2(conv2(relu(bn1(conv1(x))))) + sc(x))`.
#[derive(Debug, Clone)]
pub struct PostActBlock {
    pub conv1: ConvOp,
    pub bn1: BatchNorm2d,
    pub relu1: Relu,
    pub conv2: ConvOp,
    pub bn2: BatchNorm2d,
    pub shortcut: Option<(Conv2d, BatchNorm2d)>,
    pub relu_out: Relu,
}

impl PostActBlock {
    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Result<Tensor4> {
        let h = self.conv1.forward(x, train)?;
        let h = self.bn1.forward(&h, train)?;
        let h = self.relu1.forward(&h, train);
        let h = self.conv2.forward(&h, train)?;
        let h = self.bn2.forward(&h, train)?;
        let s = match &mut self.shortcut {
            Some((sc, sbn)) => {
                let s = sc.forward(x, train)?;
                sbn.forward(&s, train)?
            }
            None => x.clone(),
        };
        Ok(self.relu_out.forward(&(h + s), train))
    }

    pub fn backward(&mut self, gy: &Tensor4) -> Result<Tensor4> {
        let g = self.relu_out.backward(gy)?;
        let gm = self.bn2.backward(&g)?;
        let gm = self.conv2.backward(&gm)?;
        let gm = self.relu1.backward(&gm)?;
        let gm = self.bn1.backward(&gm)?;
        let gx_main = self.conv1.backward(&gm)?;
        let gx_side = match &mut self.shortcut {
            Some((sc, sbn)) => {
                let gs = sbn.backward(&g)?;
                sc.backward(&gs)?
            }
            None => g,
        };
        Ok(gx_main + gx_side)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some((sc, sbn)) = &mut self.shortcut {
            sc.visit_params(f);
            sbn.visit_params(f);
        }
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::Array1<f64>)) {
        self.bn1.visit_buffers(f);
        self.bn2.visit_buffers(f);
        if let Some((_, sbn)) = &mut self.shortcut {
            sbn.visit_buffers(f);
        }
    }
}

#[derive(Debug, Clone)]
pub enum NetBody {
    ConvStages {
        stages: Vec<Vec<ConvBnRelu>>,
        /// Pool after stage i when `pools[i]` is set (all but the last stage).
        pools: Vec<Option<MaxPool2>>,
    },
    PreAct {
        stem: Conv2d,
        groups: Vec<Vec<PreActBlock>>,
        final_bn: BatchNorm2d,
        final_relu: Relu,
    },
    PostAct {
        stem: ConvBnRelu,
        groups: Vec<Vec<PostActBlock>>,
    },
}

/// A runnable plain or VAM-wrapped classifier.
#[derive(Debug, Clone)]
pub struct BackboneNet {
    pub spec: BackboneSpec,
    pub body: NetBody,
    pub fc: Linear,
    pub wrap_report: WrapReport,
    gap_hw: Option<(usize, usize)>,
}

/// Builds a conv slot respecting the wrap mode. Weight draws always come from
/// `weight_rng`, attention logits from `att_rng`, so plain and wrapped builds
/// of the same seed share identical weights.
fn build_conv_op(
    desc: &ConvDesc,
    mode: WrapMode,
    weight_rng: &mut ChaCha20Rng,
    att_rng: &mut ChaCha20Rng,
    report: &mut WrapReport,
) -> Result<ConvOp> {
    let cpb = match mode {
        WrapMode::Plain => None,
        WrapMode::ChannelsPerBlock(cpb) => {
            if !desc.eligible {
                let reason = if desc.s == 1 { "shortcut" } else { "stem" };
                report.skipped.push((desc.name.clone(), reason.into()));
                None
            } else if desc.c_in % cpb != 0 || desc.c_out % cpb != 0 {
                report
                    .skipped
                    .push((desc.name.clone(), format!("channels not divisible by {cpb}")));
                None
            } else {
                Some(cpb)
            }
        }
        WrapMode::FullWidth => {
            if desc.eligible {
                Some(0) // marker: per-layer full width
            } else {
                let reason = if desc.s == 1 { "shortcut" } else { "stem" };
                report.skipped.push((desc.name.clone(), reason.into()));
                None
            }
        }
    };
    match cpb {
        None => {
            let w = init::conv_weight(weight_rng, desc.c_out, desc.c_in, desc.s);
            Ok(ConvOp::Plain(Conv2d::new(&desc.name, w, None, desc.stride, desc.pad)))
        }
        Some(cpb) => {
            let (m, n) = if cpb == 0 {
                (1, 1)
            } else {
                (desc.c_in / cpb, desc.c_out / cpb)
            };
            let spec = VamLayerSpec {
                c_in: desc.c_in,
                c_out: desc.c_out,
                s: desc.s,
                m,
                n,
                stride: desc.stride,
                pad: desc.pad,
            };
            let layer = VamLayer::init(&desc.name, spec, weight_rng, att_rng)?;
            report.wrapped.push((desc.name.clone(), m, n));
            report.attention_logits += n * m;
            Ok(ConvOp::Vam(layer))
        }
    }
}

impl BackboneNet {
    pub fn build(spec: &BackboneSpec, mode: WrapMode, seed: u64) -> Result<Self> {
        spec.validate()?;
        use rand::SeedableRng;
        let mut weight_rng = ChaCha20Rng::seed_from_u64(seed);
        let mut att_rng = init::substream(seed, 0xA77);
        let mut report = WrapReport::default();
        let inventory = conv_inventory(spec);
        let mut inv = inventory.iter();
        let mut next = |weight_rng: &mut ChaCha20Rng, att_rng: &mut ChaCha20Rng, report: &mut WrapReport| {
            let desc = inv.next().expect("inventory exhausted");
            build_conv_op(desc, mode, weight_rng, att_rng, report)
        };

        let body = match spec.style() {
            BodyStyle::ConvStages => {
                let mut stages = Vec::new();
                let mut pools = Vec::new();
                let n_stages = spec.widths.len();
                for (si, (&w, &d)) in spec.widths.iter().zip(&spec.depths).enumerate() {
                    let mut units = Vec::new();
                    for bi in 0..d {
                        let conv = next(&mut weight_rng, &mut att_rng, &mut report)?;
                        units.push(ConvBnRelu {
                            conv,
                            bn: BatchNorm2d::new(&format!("s{}.bn{}", si + 1, bi + 1), w),
                            relu: Relu::new(),
                        });
                    }
                    stages.push(units);
                    pools.push(if si + 1 < n_stages { Some(MaxPool2::new()) } else { None });
                }
                NetBody::ConvStages { stages, pools }
            }
            BodyStyle::PreAct => {
                let stem_op = next(&mut weight_rng, &mut att_rng, &mut report)?;
                let stem = match stem_op {
                    ConvOp::Plain(c) => c,
                    ConvOp::Vam(_) => unreachable!("stem is never wrapped"),
                };
                let mut groups = Vec::new();
                let mut c_in = spec.stem_width;
                let strides = spec.group_strides();
                for (gi, (&w, &d)) in spec.widths.iter().zip(&spec.depths).enumerate() {
                    let mut blocks = Vec::new();
                    for bi in 0..d {
                        let stride = if bi == 0 { strides[gi] } else { 1 };
                        let conv1 = next(&mut weight_rng, &mut att_rng, &mut report)?;
                        let conv2 = next(&mut weight_rng, &mut att_rng, &mut report)?;
                        let shortcut = if c_in != w || stride != 1 {
                            let sc_op = next(&mut weight_rng, &mut att_rng, &mut report)?;
                            match sc_op {
                                ConvOp::Plain(c) => Some(c),
                                ConvOp::Vam(_) => unreachable!("shortcut is never wrapped"),
                            }
                        } else {
                            None
                        };
                        blocks.push(PreActBlock {
                            bn1: BatchNorm2d::new(&format!("g{}.b{}.bn1", gi + 1, bi + 1), c_in),
                            relu1: Relu::new(),
                            conv1,
                            bn2: BatchNorm2d::new(&format!("g{}.b{}.bn2", gi + 1, bi + 1), w),
                            relu2: Relu::new(),
                            conv2,
                            shortcut,
                        });
                        c_in = w;
                    }
                    groups.push(blocks);
                }
                NetBody::PreAct {
                    stem,
                    groups,
                    final_bn: BatchNorm2d::new("final.bn", *spec.widths.last().unwrap()),
                    final_relu: Relu::new(),
                }
            }
            BodyStyle::PostAct => {
                let stem_op = next(&mut weight_rng, &mut att_rng, &mut report)?;
                let stem_conv = match stem_op {
                    ConvOp::Plain(c) => c,
                    ConvOp::Vam(_) => unreachable!("stem is never wrapped"),
                };
                let stem = ConvBnRelu {
                    conv: ConvOp::Plain(stem_conv),
                    bn: BatchNorm2d::new("stem.bn", spec.stem_width),
                    relu: Relu::new(),
                };
                let mut groups = Vec::new();
                let mut c_in = spec.stem_width;
                let strides = spec.group_strides();
                for (gi, (&w, &d)) in spec.widths.iter().zip(&spec.depths).enumerate() {
                    let mut blocks = Vec::new();
                    for bi in 0..d {
                        let stride = if bi == 0 { strides[gi] } else { 1 };
                        let conv1 = next(&mut weight_rng, &mut att_rng, &mut report)?;
                        let conv2 = next(&mut weight_rng, &mut att_rng, &mut report)?;
                        let shortcut = if c_in != w || stride != 1 {
                            let sc_op = next(&mut weight_rng, &mut att_rng, &mut report)?;
                            let sc = match sc_op {
                                ConvOp::Plain(c) => c,
                                ConvOp::Vam(_) => unreachable!("shortcut is never wrapped"),
                            };
                            Some((sc, BatchNorm2d::new(&format!("g{}.b{}.scbn", gi + 1, bi + 1), w)))
                        } else {
                            None
                        };
                        blocks.push(PostActBlock {
                            conv1,
                            bn1: BatchNorm2d::new(&format!("g{}.b{}.bn1", gi + 1, bi + 1), w),
                            relu1: Relu::new(),
                            conv2,
                            bn2: BatchNorm2d::new(&format!("g{}.b{}.bn2", gi + 1, bi + 1), w),
                            shortcut,
                            relu_out: Relu::new(),
                        });
                        c_in = w;
                    }
                    groups.push(blocks);
                }
                NetBody::PostAct { stem, groups }
            }
        };
        assert!(inv.next().is_none(), "inventory fully consumed");

        let last = *spec.widths.last().unwrap();
        let fc_w = init::linear_weight(&mut weight_rng, spec.k, last);
        let fc = Linear::new("fc", fc_w, vec![0.0; spec.k]);
        Ok(Self {
            spec: spec.clone(),
            body,
            fc,
            wrap_report: report,
            gap_hw: None,
        })
    }

    pub fn build_plain(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        Self::build(spec, WrapMode::Plain, seed)
    }

    /// Wraps every eligible convolution at the given channels-per-block.
    pub fn build_vam(spec: &BackboneSpec, channels_per_block: usize, seed: u64) -> Result<Self> {
        if channels_per_block == 0 {
            return Err(Error::config("channels_per_block must be >= 1"));
        }
        Self::build(spec, WrapMode::ChannelsPerBlock(channels_per_block), seed)
    }

    /// Forward to class logits (batch, K).
    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Result<Array2<f64>> {
        let (_, c, h, w) = x.dim();
        if (c, h, w) != self.spec.input {
            return Err(Error::shape(format!(
                "input shape ({c}, {h}, {w}) does not match spec {:?}",
                self.spec.input
            )));
        }
        let feat = match &mut self.body {
            NetBody::ConvStages { stages, pools } => {
                let mut cur = x.clone();
                for (si, units) in stages.iter_mut().enumerate() {
                    for u in units.iter_mut() {
                        cur = u.forward(&cur, train)?;
                    }
                    if let Some(pool) = &mut pools[si] {
                        cur = pool.forward(&cur, train)?;
                    }
                }
                cur
            }
            NetBody::PreAct { stem, groups, final_bn, final_relu } => {
                let mut cur = stem.forward(x, train)?;
                for blocks in groups.iter_mut() {
                    for b in blocks.iter_mut() {
                        cur = b.forward(&cur, train)?;
                    }
                }
                let cur = final_bn.forward(&cur, train)?;
                final_relu.forward(&cur, train)
            }
            NetBody::PostAct { stem, groups } => {
                let mut cur = stem.forward(x, train)?;
                for blocks in groups.iter_mut() {
                    for b in blocks.iter_mut() {
                        cur = b.forward(&cur, train)?;
                    }
                }
                cur
            }
        };
        let (_, _, fh, fw) = feat.dim();
        self.gap_hw = Some((fh, fw));
        let pooled = global_avg_pool(&feat);
        self.fc.forward(&pooled, train)
    }

    /// Backward from class-logit gradients; parameter gradients accumulate.
    pub fn backward(&mut self, g_logits: &Array2<f64>) -> Result<()> {
        let (fh, fw) = self
            .gap_hw
            .ok_or_else(|| Error::invariant("backbone backward without forward"))?;
        let g_pooled = self.fc.backward(g_logits)?;
        let mut g = global_avg_pool_backward(&g_pooled, fh, fw);
        match &mut self.body {
            NetBody::ConvStages { stages, pools } => {
                for si in (0..stages.len()).rev() {
                    if let Some(pool) = &mut pools[si] {
                        g = pool.backward(&g)?;
                    }
                    for u in stages[si].iter_mut().rev() {
                        g = u.backward(&g)?;
                    }
                }
            }
            NetBody::PreAct { stem, groups, final_bn, final_relu } => {
                g = final_relu.backward(&g)?;
                g = final_bn.backward(&g)?;
                for blocks in groups.iter_mut().rev() {
                    for b in blocks.iter_mut().rev() {
                        g = b.backward(&g)?;
                    }
                }
                let _ = stem.backward(&g)?;
            }
            NetBody::PostAct { stem, groups } => {
                for blocks in groups.iter_mut().rev() {
                    for b in blocks.iter_mut().rev() {
                        g = b.backward(&g)?;
                    }
                }
                let _ = stem.backward(&g)?;
            }
        }
        Ok(())
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match &mut self.body {
            NetBody::ConvStages { stages, .. } => {
                for units in stages.iter_mut() {
                    for u in units.iter_mut() {
                        u.visit_params(f);
                    }
                }
            }
            NetBody::PreAct { stem, groups, final_bn, .. } => {
                stem.visit_params(f);
                for blocks in groups.iter_mut() {
                    for b in blocks.iter_mut() {
                        b.visit_params(f);
                    }
                }
                final_bn.visit_params(f);
            }
            NetBody::PostAct { stem, groups } => {
                stem.visit_params(f);
                for blocks in groups.iter_mut() {
                    for b in blocks.iter_mut() {
                        b.visit_params(f);
                    }
                }
            }
        }
        self.fc.visit_params(f);
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::Array1<f64>)) {
        match &mut self.body {
            NetBody::ConvStages { stages, .. } => {
                for units in stages.iter_mut() {
                    for u in units.iter_mut() {
                        u.visit_buffers(f);
                    }
                }
            }
            NetBody::PreAct { groups, final_bn, .. } => {
                for blocks in groups.iter_mut() {
                    for b in blocks.iter_mut() {
                        b.visit_buffers(f);
                    }
                }
                final_bn.visit_buffers(f);
            }
            NetBody::PostAct { stem, groups } => {
                stem.visit_buffers(f);
                for blocks in groups.iter_mut() {
                    for b in blocks.iter_mut() {
                        b.visit_buffers(f);
                    }
                }
            }
        }
    }

    /// Applies `f` to every conv slot in forward order.
    fn visit_conv_ops(&mut self, f: &mut dyn FnMut(&mut ConvOp)) {
        match &mut self.body {
            NetBody::ConvStages { stages, .. } => {
                for units in stages.iter_mut() {
                    for u in units.iter_mut() {
                        f(&mut u.conv);
                    }
                }
            }
            NetBody::PreAct { groups, .. } => {
                for blocks in groups.iter_mut() {
                    for b in blocks.iter_mut() {
                        f(&mut b.conv1);
                        f(&mut b.conv2);
                    }
                }
            }
            NetBody::PostAct { stem, groups } => {
                f(&mut stem.conv);
                for blocks in groups.iter_mut() {
                    for b in blocks.iter_mut() {
                        f(&mut b.conv1);
                        f(&mut b.conv2);
                    }
                }
            }
        }
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    /// Attention state of all wrapped convolutions, in forward order. Stage
    /// `i` is the i-th wrapped convolution (1-based); its sources are the
    /// previous stage's output blocks (stage 0 denotes the input groups).
    pub fn snapshot(&mut self) -> AttentionSnapshot {
        let mut records: Vec<AttentionRecord> = Vec::new();
        let mut stage = 0usize;
        self.visit_conv_ops(&mut |op| {
            if let Some(v) = op.vam() {
                stage += 1;
                let sources: Vec<String> =
                    (0..v.spec.m).map(|l| format!("s{}b{}", stage - 1, l)).collect();
                records.extend(v.records(stage, &sources));
            }
        });
        AttentionSnapshot::new(records)
    }

    /// Hardens every attention gate (one-hot argmax routing).
    pub fn harden(&mut self) {
        self.visit_conv_ops(&mut |op| op.set_hardened(true));
    }

    /// True when any wrapped convolution routes one-hot. Plain builds (no
    /// wrapped convs) report false.
    pub fn is_hardened(&mut self) -> bool {
        let mut hardened = false;
        self.visit_conv_ops(&mut |op| {
            if let ConvOp::Vam(v) = op {
                hardened |= v.hardened;
            }
        });
        hardened
    }

    /// Channels per virtual output block of the wrapped convolutions; `None`
    /// for plain builds.
    pub fn channels_per_block(&mut self) -> Option<usize> {
        let mut cpb = None;
        self.visit_conv_ops(&mut |op| {
            if let ConvOp::Vam(v) = op {
                cpb.get_or_insert(v.spec.c_out / v.spec.n);
            }
        });
        cpb
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    /// Entropy regularizer gradient: adds `gamma * dH/dv` to every attention
    /// logit gradient and returns the current total attention entropy.
    pub fn add_entropy_grad(&mut self, gamma: f64) -> Result<f64> {
        let mut total = 0.0;
        let mut err = None;
        self.visit_conv_ops(&mut |op| {
            if err.is_some() {
                return;
            }
            if let ConvOp::Vam(v) = op {
                if v.hardened {
                    return;
                }
                let n = v.spec.n;
                let m = v.spec.m;
                for j in 0..n {
                    let row: Vec<f64> = (0..m).map(|l| v.att.value[[j, l]]).collect();
                    let a = crate::losses::softmax_slice(&row, 1.0);
                    total += crate::losses::entropy_slice(&a);
                    match crate::losses::entropy_grad_from_logits(&row, 1.0) {
                        Ok(g) => {
                            for l in 0..m {
                                v.att.grad[[j, l]] += gamma * g[l];
                            }
                        }
                        Err(e) => err = Some(e),
                    }
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(total),
        }
    }
}
