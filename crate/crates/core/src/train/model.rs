//! Student/teacher model wrapper and the binary checkpoint format.
//!
//! Checkpoint layout:
//! - 9 magic bytes `KDXCKPT1\n`
//! - u64 little-endian JSON length, then that many bytes of metadata JSON
//!   (mode, family, class count, input size, wrap/expert settings, hardened
//!   flag, and the name + element count of every parameter and buffer)
//! - raw little-endian f64 data: all parameters in visit order, then all
//!   batch-norm running statistics in visit order.
//!
//! Loading rebuilds the architecture from the metadata and overwrites its
//! tensors, so a checkpoint is self-contained.

use std::io::Read;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneNet, BackboneSpec, Family};
use crate::error::{Error, Result};
use crate::explainer::{build_explainer, ExplainerConfig, ExplainerModel};
use crate::nn::{Param, Tensor4};
use crate::train::config::{Mode, RunConfig};
use crate::types::argmax;
use crate::AttentionSnapshot;

const MAGIC: &[u8] = b"KDXCKPT1\n";

/// A trainable model in any of the three modes. Plain and VAM students share
/// the backbone type; the explainer has its own gated structure.
#[derive(Debug)]
pub enum StudentModel {
    Plain(Box<BackboneNet>),
    Vam(Box<BackboneNet>),
    Explainer(Box<ExplainerModel>),
}

/// Forward output: multi-class logits for plain/VAM models, per-class binary
/// head logits for the explainer.
#[derive(Debug)]
pub enum StudentForward {
    Logits(Array2<f64>),
    HeadLogits(Array3<f64>),
}

impl StudentModel {
    /// Builds the student described by a run config. The backbone spec is the
    /// family default for the configured class count and image size.
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let spec = BackboneSpec::family_default(
            cfg.family,
            cfg.data.k,
            (cfg.data.image, cfg.data.image),
        );
        match cfg.mode {
            Mode::Plain => Ok(StudentModel::Plain(Box::new(BackboneNet::build_plain(
                &spec, cfg.seed,
            )?))),
            Mode::Vam => Ok(StudentModel::Vam(Box::new(BackboneNet::build_vam(
                &spec,
                cfg.channels_per_block,
                cfg.seed,
            )?))),
            Mode::Explainer => {
                let ecfg = ExplainerConfig::new(cfg.experts.clone(), cfg.attention_t, cfg.seed);
                Ok(StudentModel::Explainer(Box::new(build_explainer(
                    &spec, &ecfg,
                )?)))
            }
        }
    }

    pub fn mode(&self) -> Mode {
        match self {
            StudentModel::Plain(_) => Mode::Plain,
            StudentModel::Vam(_) => Mode::Vam,
            StudentModel::Explainer(_) => Mode::Explainer,
        }
    }

    pub fn k(&self) -> usize {
        match self {
            StudentModel::Plain(n) | StudentModel::Vam(n) => n.spec.k,
            StudentModel::Explainer(m) => m.spec.k,
        }
    }

    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Result<StudentForward> {
        match self {
            StudentModel::Plain(n) | StudentModel::Vam(n) => {
                Ok(StudentForward::Logits(n.forward(x, train)?))
            }
            StudentModel::Explainer(m) => {
                Ok(StudentForward::HeadLogits(m.forward(x, train)?.head_logits))
            }
        }
    }

    /// Top-1 class prediction per batch row (binary heads are routed through
    /// the positive-probability rule).
    pub fn predict(&mut self, x: &Tensor4) -> Result<Vec<usize>> {
        match self {
            StudentModel::Plain(n) | StudentModel::Vam(n) => {
                let logits = n.forward(x, false)?;
                Ok(logits
                    .rows()
                    .into_iter()
                    .map(|row| argmax(row.as_slice().expect("contiguous row")))
                    .collect())
            }
            StudentModel::Explainer(m) => m.predict(x),
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            StudentModel::Plain(n) | StudentModel::Vam(n) => n.visit_params(f),
            StudentModel::Explainer(m) => m.visit_params(f),
        }
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::Array1<f64>)) {
        match self {
            StudentModel::Plain(n) | StudentModel::Vam(n) => n.visit_buffers(f),
            StudentModel::Explainer(m) => m.visit_buffers(f),
        }
    }

    pub fn zero_grad(&mut self) {
        match self {
            StudentModel::Plain(n) | StudentModel::Vam(n) => n.zero_grad(),
            StudentModel::Explainer(m) => m.zero_grad(),
        }
    }

    pub fn param_count(&mut self) -> usize {
        match self {
            StudentModel::Plain(n) | StudentModel::Vam(n) => n.param_count(),
            StudentModel::Explainer(m) => m.param_count(),
        }
    }

    /// Attention snapshot; `None` for plain models, which have no gates.
    pub fn snapshot(&mut self) -> Option<AttentionSnapshot> {
        match self {
            StudentModel::Plain(_) => None,
            StudentModel::Vam(n) => Some(n.snapshot()),
            StudentModel::Explainer(m) => Some(m.snapshot()),
        }
    }

    /// Adds gamma-scaled entropy gradients to every gate and returns the raw
    /// total entropy. Plain models contribute nothing.
    pub fn add_entropy_grad(&mut self, gamma: f64) -> Result<f64> {
        match self {
            StudentModel::Plain(_) => Ok(0.0),
            StudentModel::Vam(n) => n.add_entropy_grad(gamma),
            StudentModel::Explainer(m) => m.add_entropy_grad(gamma),
        }
    }

    /// Replaces every gate by its one-hot argmax.
    pub fn harden(&mut self) {
        match self {
            StudentModel::Plain(_) => {}
            StudentModel::Vam(n) => n.harden(),
            StudentModel::Explainer(m) => m.harden_in_place(),
        }
    }

    /// True when the attention gates route one-hot.
    pub fn is_hardened(&mut self) -> bool {
        match self {
            StudentModel::Plain(_) => false,
            StudentModel::Vam(n) => n.is_hardened(),
            StudentModel::Explainer(m) => m.is_hardened(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    mode: String,
    family: String,
    k: usize,
    image: usize,
    channels_per_block: Option<usize>,
    experts: Option<Vec<usize>>,
    attention_t: Option<f64>,
    hardened: bool,
    /// (name, element count) per parameter, in visit order.
    params: Vec<(String, usize)>,
    /// (name, element count) per batch-norm buffer, in visit order.
    buffers: Vec<(String, usize)>,
}

fn collect_meta(model: &mut StudentModel, image: usize) -> CheckpointMeta {
    let mut params = Vec::new();
    model.visit_params(&mut |p: &mut Param| {
        params.push((p.name.clone(), p.value.len()));
    });
    let mut buffers = Vec::new();
    model.visit_buffers(&mut |name, buf| {
        buffers.push((name.to_string(), buf.len()));
    });
    let (family, channels_per_block, experts, attention_t) = match model {
        StudentModel::Plain(n) => (n.spec.family, None, None, None),
        StudentModel::Vam(n) => {
            let cpb = n.channels_per_block();
            (n.spec.family, cpb, None, None)
        }
        StudentModel::Explainer(m) => (
            m.spec.family,
            None,
            Some(m.config.experts_per_stage.clone()),
            Some(m.config.t),
        ),
    };
    let hardened = model.is_hardened();
    CheckpointMeta {
        mode: model.mode().as_str().to_string(),
        family: family.as_str().to_string(),
        k: model.k(),
        image,
        channels_per_block,
        experts,
        attention_t,
        hardened,
        params,
        buffers,
    }
}

/// Writes a self-contained checkpoint. `image` is the input height/width the
/// model was built for (needed to rebuild the architecture on load).
pub fn save_model(path: &Path, model: &mut StudentModel, image: usize) -> Result<()> {
    let meta = collect_meta(model, image);
    let meta_json = serde_json::to_vec(&meta)?;
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    model.visit_params(&mut |p: &mut Param| {
        for v in p.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    model.visit_buffers(&mut |_, buf| {
        for v in buf.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_model`] and rebuilds the model.
pub fn load_model(path: &Path) -> Result<StudentModel> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    load_model_bytes(&bytes)
}

fn load_model_bytes(bytes: &[u8]) -> Result<StudentModel> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Ingestion {
            offset: 0,
            message: "not a model checkpoint (bad magic)".into(),
        });
    }
    let mut off = MAGIC.len();
    let meta_len = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes")) as usize;
    off += 8;
    if bytes.len() < off + meta_len {
        return Err(Error::Ingestion {
            offset: bytes.len() as u64,
            message: "checkpoint truncated inside metadata".into(),
        });
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[off..off + meta_len])?;
    off += meta_len;

    let family = Family::parse(&meta.family)?;
    let spec = BackboneSpec::family_default(family, meta.k, (meta.image, meta.image));
    let mut model = match meta.mode.as_str() {
        "plain" => StudentModel::Plain(Box::new(BackboneNet::build_plain(&spec, 0)?)),
        "vam" => {
            let cpb = meta.channels_per_block.ok_or_else(|| {
                Error::validation("vam checkpoint is missing channels_per_block")
            })?;
            StudentModel::Vam(Box::new(BackboneNet::build_vam(&spec, cpb, 0)?))
        }
        "explainer" => {
            let experts = meta
                .experts
                .clone()
                .ok_or_else(|| Error::validation("explainer checkpoint is missing experts"))?;
            let t = meta.attention_t.unwrap_or(1.0);
            let ecfg = ExplainerConfig::new(experts, t, 0);
            StudentModel::Explainer(Box::new(build_explainer(&spec, &ecfg)?))
        }
        other => {
            return Err(Error::validation(format!(
                "unknown checkpoint mode '{other}'"
            )));
        }
    };

    let total_len: usize = meta.params.iter().map(|(_, n)| n).sum::<usize>()
        + meta.buffers.iter().map(|(_, n)| n).sum::<usize>();
    if bytes.len() != off + total_len * 8 {
        return Err(Error::Ingestion {
            offset: bytes.len() as u64,
            message: format!(
                "checkpoint data length mismatch: expected {} f64 values",
                total_len
            ),
        });
    }

    let mut cursor = off;
    let mut take = |n: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(f64::from_le_bytes(
                bytes[cursor..cursor + 8].try_into().expect("8 bytes"),
            ));
            cursor += 8;
        }
        out
    };

    let mut idx = 0usize;
    let mut err: Option<Error> = None;
    model.visit_params(&mut |p: &mut Param| {
        if err.is_some() {
            return;
        }
        let Some((name, len)) = meta.params.get(idx) else {
            err = Some(Error::validation("checkpoint lists too few parameters"));
            return;
        };
        if name != &p.name || *len != p.value.len() {
            err = Some(Error::validation(format!(
                "checkpoint parameter mismatch at #{idx}: file has '{name}' ({len}), model has '{}' ({})",
                p.name,
                p.value.len()
            )));
            return;
        }
        let data = take(*len);
        for (slot, v) in p.value.iter_mut().zip(data) {
            *slot = v;
        }
        idx += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != meta.params.len() {
        return Err(Error::validation(
            "checkpoint lists more parameters than the model has",
        ));
    }

    let mut bidx = 0usize;
    let mut berr: Option<Error> = None;
    model.visit_buffers(&mut |name, buf| {
        if berr.is_some() {
            return;
        }
        let Some((fname, len)) = meta.buffers.get(bidx) else {
            berr = Some(Error::validation("checkpoint lists too few buffers"));
            return;
        };
        if fname != name || *len != buf.len() {
            berr = Some(Error::validation(format!(
                "checkpoint buffer mismatch at #{bidx}: file has '{fname}' ({len}), model has '{name}' ({})",
                buf.len()
            )));
            return;
        }
        let data = take(*len);
        for (slot, v) in buf.iter_mut().zip(data) {
            *slot = v;
        }
        bidx += 1;
    });
    if let Some(e) = berr {
        return Err(e);
    }
    if bidx != meta.buffers.len() {
        return Err(Error::validation(
            "checkpoint lists more buffers than the model has",
        ));
    }

    if meta.hardened {
        model.harden();
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, DatasetSpec, Split};
    use crate::train::config::Variant;
    use tempfile::tempdir;

    fn tiny_cfg(mode: Mode) -> RunConfig {
        let mut cfg = RunConfig::default_for(mode);
        cfg.data = DatasetSpec::synthetic(3, 8, 24, 12, 5);
        cfg.seed = 11;
        if mode == Mode::Explainer {
            cfg.experts = vec![1, 2, 2];
        }
        if mode == Mode::Vam {
            cfg.variant = Variant::M2;
            cfg.channels_per_block = 4;
        }
        cfg
    }

    fn checkpoint_round_trip(mode: Mode) {
        let cfg = tiny_cfg(mode);
        let mut model = StudentModel::build(&cfg).unwrap();
        let data = load_dataset(&cfg.data, Split::Test).unwrap();
        let (x, _) = data.batch(&[0, 1, 2, 3]);
        // Run one training-mode forward so batch-norm running stats move off
        // their init values and the buffer round-trip is actually exercised.
        model.forward(&x, true).unwrap();
        let before = model.predict(&x).unwrap();

        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&path, &mut model, cfg.data.image).unwrap();
        let mut loaded = load_model(&path).unwrap();
        assert_eq!(loaded.mode(), mode);
        assert_eq!(loaded.k(), 3);
        let after = loaded.predict(&x).unwrap();
        assert_eq!(before, after);

        // Logit-level equality, not just argmax.
        let a = model.forward(&x, false).unwrap();
        let b = loaded.forward(&x, false).unwrap();
        match (a, b) {
            (StudentForward::Logits(a), StudentForward::Logits(b)) => {
                assert!(a.iter().zip(b.iter()).all(|(x, y)| x == y));
            }
            (StudentForward::HeadLogits(a), StudentForward::HeadLogits(b)) => {
                assert!(a.iter().zip(b.iter()).all(|(x, y)| x == y));
            }
            _ => panic!("mode changed across round trip"),
        }
    }

    #[test]
    fn plain_checkpoint_round_trips() {
        checkpoint_round_trip(Mode::Plain);
    }

    #[test]
    fn vam_checkpoint_round_trips() {
        checkpoint_round_trip(Mode::Vam);
    }

    #[test]
    fn explainer_checkpoint_round_trips() {
        checkpoint_round_trip(Mode::Explainer);
    }

    #[test]
    fn hardened_flag_survives_round_trip() {
        let cfg = tiny_cfg(Mode::Explainer);
        let mut model = StudentModel::build(&cfg).unwrap();
        model.harden();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&path, &mut model, cfg.data.image).unwrap();
        let loaded = load_model(&path).unwrap();
        match &loaded {
            StudentModel::Explainer(m) => assert!(m.is_hardened()),
            _ => panic!("wrong mode"),
        }
    }

    #[test]
    fn corrupt_magic_is_an_ingestion_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"NOTACKPT\n").unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, Error::Ingestion { offset: 0, .. }), "{err}");
    }

    #[test]
    fn truncated_data_is_an_ingestion_error() {
        let cfg = tiny_cfg(Mode::Plain);
        let mut model = StudentModel::build(&cfg).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&path, &mut model, cfg.data.image).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, Error::Ingestion { .. }), "{err}");
    }

    #[test]
    fn predictions_are_row_argmax_for_plain_models() {
        let cfg = tiny_cfg(Mode::Plain);
        let mut model = StudentModel::build(&cfg).unwrap();
        let data = load_dataset(&cfg.data, Split::Test).unwrap();
        let (x, _) = data.batch(&[0, 1]);
        let preds = model.predict(&x).unwrap();
        match model.forward(&x, false).unwrap() {
            StudentForward::Logits(logits) => {
                for (i, p) in preds.iter().enumerate() {
                    let row: Vec<f64> = logits.row(i).to_vec();
                    assert_eq!(*p, argmax(&row));
                }
            }
            _ => unreachable!(),
        }
    }
}
