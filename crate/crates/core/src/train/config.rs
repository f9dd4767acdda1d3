//! Run configuration: student mode, objective variant, schedule, and the flat
//! key-value serialization used by config files and the CLI.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backbone::Family;
use crate::data::{DataSource, DatasetSpec};
use crate::error::{Error, Result};
use crate::nn::SgdConfig;
use crate::types::KDHyperParams;

/// Which student architecture a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Unmodified backbone, cross-entropy head.
    Plain,
    /// Backbone split into gated expert stages with K binary heads.
    Explainer,
    /// Backbone with eligible convolutions wrapped in virtual attention.
    Vam,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Plain => "plain",
            Mode::Explainer => "explainer",
            Mode::Vam => "vam",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text.trim().to_ascii_lowercase().as_str() {
            "plain" => Ok(Mode::Plain),
            "explainer" => Ok(Mode::Explainer),
            "vam" => Ok(Mode::Vam),
            other => Err(Error::config(format!(
                "unknown mode '{other}' (expected plain | explainer | vam)"
            ))),
        }
    }

    /// Whether this mode carries trainable attention gates.
    pub fn has_attention(&self) -> bool {
        !matches!(self, Mode::Plain)
    }
}

/// Objective variants of the ablation grid.
///
/// | variant | architecture | objective                  |
/// |---------|--------------|----------------------------|
/// | M1      | plain        | CE                         |
/// | M2      | VAM          | CE                         |
/// | M3      | VAM          | CE + gamma * entropy       |
/// | M4      | plain        | alpha*CE + (1-alpha)*KL    |
/// | M5      | VAM          | alpha*CE + (1-alpha)*KL    |
/// | M6      | VAM          | KD + gamma * entropy       |
///
/// Explainer runs reuse M1 (weighted-BCE only) and M4 (the full explainer KD
/// objective); "plain" in the table means "not VAM-wrapped".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::M1,
        Variant::M2,
        Variant::M3,
        Variant::M4,
        Variant::M5,
        Variant::M6,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::M1 => "M1",
            Variant::M2 => "M2",
            Variant::M3 => "M3",
            Variant::M4 => "M4",
            Variant::M5 => "M5",
            Variant::M6 => "M6",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text.trim().to_ascii_uppercase().as_str() {
            "M1" => Ok(Variant::M1),
            "M2" => Ok(Variant::M2),
            "M3" => Ok(Variant::M3),
            "M4" => Ok(Variant::M4),
            "M5" => Ok(Variant::M5),
            "M6" => Ok(Variant::M6),
            other => Err(Error::config(format!(
                "unknown variant '{other}' (expected M1..M6)"
            ))),
        }
    }

    /// Variants that require the VAM architecture.
    pub fn uses_vam(&self) -> bool {
        matches!(self, Variant::M2 | Variant::M3 | Variant::M5 | Variant::M6)
    }

    /// Variants whose objective includes the teacher KL term.
    pub fn uses_kl(&self) -> bool {
        matches!(self, Variant::M4 | Variant::M5 | Variant::M6)
    }

    /// Variants whose objective includes the attention-entropy term.
    pub fn uses_entropy(&self) -> bool {
        matches!(self, Variant::M3 | Variant::M6)
    }
}

/// Full description of one training run.
///
/// Serializes to a flat `key = value` file (one pair per line, keys sorted,
/// `#` comments ignored on parse). `serialize -> parse -> serialize` is a
/// fixed point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub variant: Variant,
    pub family: Family,
    pub data: DatasetSpec,
    /// alpha, tau, gamma (gamma only enters M3/M6).
    pub hp: KDHyperParams,
    /// Label-smoothing epsilon for the CE-only variants; 0 disables smoothing.
    pub smoothing: f64,
    /// Gate temperature for explainer runs (VAM attention is fixed at T=1).
    pub attention_t: f64,
    /// VAM granularity: channels per virtual output block.
    pub channels_per_block: usize,
    /// Experts per explainer stage (leading stage must be 1).
    pub experts: Vec<usize>,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: SgdConfig,
    /// Epochs at which both learning rates decay by 10x.
    pub lr_milestones: Vec<usize>,
    pub teacher_checkpoint: Option<PathBuf>,
    pub teacher_cache: Option<PathBuf>,
    /// Artifact directory; empty means "keep everything in memory".
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// Mode-specific defaults: the VAM/plain schedule decays at 150/180/210
    /// and stops at 240; the explainer schedule starts at lr 0.1, decays
    /// every 30 epochs, and stops at 300.
    pub fn default_for(mode: Mode) -> Self {
        let (optim, lr_milestones, epochs) = match mode {
            Mode::Explainer => (
                SgdConfig {
                    lr_weights: 0.1,
                    lr_attention: 0.1,
                    momentum: 0.9,
                    weight_decay: 5e-4,
                },
                (1..10).map(|i| i * 30).collect(),
                300,
            ),
            _ => (SgdConfig::default(), vec![150, 180, 210], 240),
        };
        let variant = if mode == Mode::Vam {
            Variant::M2
        } else {
            Variant::M1
        };
        RunConfig {
            mode,
            variant,
            family: Family::TinyCnn,
            data: DatasetSpec::synthetic(10, 32, 5000, 1000, 1),
            hp: KDHyperParams::default(),
            smoothing: 0.0,
            attention_t: 1.0,
            channels_per_block: 8,
            experts: Vec::new(),
            seed: 0,
            epochs,
            batch_size: 128,
            optim,
            lr_milestones,
            teacher_checkpoint: None,
            teacher_cache: None,
            out_dir: PathBuf::new(),
        }
    }

    /// Serializes to the flat key-value format, keys sorted.
    pub fn to_kv(&self) -> String {
        let mut pairs: Vec<(String, String)> = vec![
            ("alpha".into(), fmt_f64(self.hp.alpha)),
            ("attention_t".into(), fmt_f64(self.attention_t)),
            ("batch_size".into(), self.batch_size.to_string()),
            (
                "channels_per_block".into(),
                self.channels_per_block.to_string(),
            ),
            ("data.augment".into(), self.data.augment.to_string()),
            ("data.image".into(), self.data.image.to_string()),
            ("data.k".into(), self.data.k.to_string()),
            ("data.mean".into(), fmt_f64_list(&self.data.normalize_mean)),
            ("data.root".into(), self.data.root.display().to_string()),
            ("data.seed".into(), self.data.seed.to_string()),
            ("data.source".into(), self.data.source.as_str().into()),
            ("data.std".into(), fmt_f64_list(&self.data.normalize_std)),
            (
                "data.test_subset".into(),
                self.data.test_subset.to_string(),
            ),
            (
                "data.train_subset".into(),
                self.data.train_subset.to_string(),
            ),
            ("epochs".into(), self.epochs.to_string()),
            ("experts".into(), fmt_usize_list(&self.experts)),
            ("family".into(), self.family.as_str().into()),
            ("gamma".into(), fmt_f64(self.hp.gamma)),
            ("lr_attention".into(), fmt_f64(self.optim.lr_attention)),
            ("lr_milestones".into(), fmt_usize_list(&self.lr_milestones)),
            ("lr_weights".into(), fmt_f64(self.optim.lr_weights)),
            ("mode".into(), self.mode.as_str().into()),
            ("momentum".into(), fmt_f64(self.optim.momentum)),
            ("out_dir".into(), self.out_dir.display().to_string()),
            ("seed".into(), self.seed.to_string()),
            ("smoothing".into(), fmt_f64(self.smoothing)),
            ("tau".into(), fmt_f64(self.hp.tau)),
            ("variant".into(), self.variant.as_str().into()),
            ("weight_decay".into(), fmt_f64(self.optim.weight_decay)),
        ];
        if let Some(p) = &self.teacher_cache {
            pairs.push(("teacher_cache".into(), p.display().to_string()));
        }
        if let Some(p) = &self.teacher_checkpoint {
            pairs.push(("teacher_checkpoint".into(), p.display().to_string()));
        }
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Parses the flat key-value format produced by [`RunConfig::to_kv`].
    pub fn parse_kv(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        Self::from_pairs(&pairs)
    }

    /// Builds a config from key-value pairs: the `mode` pair (if present)
    /// selects the defaults, then every pair is applied in order.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mode = match pairs.iter().find(|(k, _)| k == "mode") {
            Some((_, v)) => Mode::parse(v)?,
            None => Mode::Plain,
        };
        let mut seen = BTreeSet::new();
        let mut cfg = RunConfig::default_for(mode);
        for (k, v) in pairs {
            if !seen.insert(k.clone()) {
                return Err(Error::config(format!("duplicate config key '{k}'")));
            }
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "mode" => self.mode = Mode::parse(v)?,
            "variant" => self.variant = Variant::parse(v)?,
            "family" => self.family = Family::parse(v)?,
            "alpha" => self.hp.alpha = parse_f64(key, v)?,
            "tau" => self.hp.tau = parse_f64(key, v)?,
            "gamma" => self.hp.gamma = parse_f64(key, v)?,
            "smoothing" => self.smoothing = parse_f64(key, v)?,
            "attention_t" => self.attention_t = parse_f64(key, v)?,
            "channels_per_block" => self.channels_per_block = parse_usize(key, v)?,
            "experts" => self.experts = parse_usize_list(key, v)?,
            "seed" => self.seed = parse_u64(key, v)?,
            "epochs" => self.epochs = parse_usize(key, v)?,
            "batch_size" => self.batch_size = parse_usize(key, v)?,
            "lr_weights" => self.optim.lr_weights = parse_f64(key, v)?,
            "lr_attention" => self.optim.lr_attention = parse_f64(key, v)?,
            "momentum" => self.optim.momentum = parse_f64(key, v)?,
            "weight_decay" => self.optim.weight_decay = parse_f64(key, v)?,
            "lr_milestones" => self.lr_milestones = parse_usize_list(key, v)?,
            "teacher_checkpoint" => {
                self.teacher_checkpoint = if v.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(v))
                }
            }
            "teacher_cache" => {
                self.teacher_cache = if v.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(v))
                }
            }
            "out_dir" => self.out_dir = PathBuf::from(v),
            "data.source" => self.data.source = DataSource::parse(v)?,
            "data.root" => self.data.root = PathBuf::from(v),
            "data.k" => self.data.k = parse_usize(key, v)?,
            "data.image" => self.data.image = parse_usize(key, v)?,
            "data.train_subset" => self.data.train_subset = parse_usize(key, v)?,
            "data.test_subset" => self.data.test_subset = parse_usize(key, v)?,
            "data.seed" => self.data.seed = parse_u64(key, v)?,
            "data.augment" => {
                self.data.augment = match v {
                    "true" => true,
                    "false" => false,
                    _ => {
                        return Err(Error::config(format!(
                            "data.augment must be true or false, got '{v}'"
                        )))
                    }
                }
            }
            "data.mean" => self.data.normalize_mean = parse_f64_triple(key, v)?,
            "data.std" => self.data.normalize_std = parse_f64_triple(key, v)?,
            other => {
                return Err(Error::config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Checks cross-field consistency. Returns non-fatal warnings (currently
    /// only the vanishing-entropy-term case).
    pub fn validate(&self) -> Result<Vec<String>> {
        self.data.validate()?;
        self.hp.validate()?;
        if self.attention_t <= 0.0 || !self.attention_t.is_finite() {
            return Err(Error::config(format!(
                "attention_t must be positive and finite, got {}",
                self.attention_t
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::config(format!(
                "smoothing must lie in [0, 1), got {}",
                self.smoothing
            )));
        }
        match (self.mode, self.variant.uses_vam()) {
            (Mode::Vam, false) => {
                return Err(Error::config(format!(
                    "mode vam requires a VAM variant (M2/M3/M5/M6), got {}",
                    self.variant.as_str()
                )));
            }
            (Mode::Plain | Mode::Explainer, true) => {
                return Err(Error::config(format!(
                    "variant {} requires mode vam, got mode {}",
                    self.variant.as_str(),
                    self.mode.as_str()
                )));
            }
            _ => {}
        }
        if self.mode == Mode::Vam && self.channels_per_block == 0 {
            return Err(Error::config("channels_per_block must be at least 1"));
        }
        if self.mode == Mode::Explainer && self.experts.is_empty() {
            return Err(Error::config(
                "explainer mode needs an experts list (e.g. experts = 1,2,2)",
            ));
        }
        if self.variant.uses_kl()
            && self.teacher_checkpoint.is_none()
            && self.teacher_cache.is_none()
        {
            return Err(Error::config(format!(
                "variant {} includes the KL term and needs teacher_checkpoint or teacher_cache",
                self.variant.as_str()
            )));
        }
        if self.smoothing > 0.0 && self.variant.uses_kl() {
            return Err(Error::config(
                "label smoothing only applies to the CE-only variants (M1/M2/M3)",
            ));
        }
        for w in self.lr_milestones.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::config(
                    "lr_milestones must be strictly increasing",
                ));
            }
        }
        let mut warnings = Vec::new();
        if self.variant.uses_entropy() && self.hp.gamma == 0.0 {
            warnings.push(format!(
                "variant {} has an entropy term but gamma = 0; the term vanishes",
                self.variant.as_str()
            ));
        }
        Ok(warnings)
    }

    /// Learning-rate multiplier for the given 1-based epoch: 0.1 per passed
    /// milestone.
    pub fn lr_scale_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch > m).count();
        0.1f64.powi(passed as i32)
    }
}

/// Splits config-file text into (key, value) pairs. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(format!(
                "line {}: expected 'key = value', got '{line}'",
                lineno + 1
            )));
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn fmt_f64_list(vs: &[f64]) -> String {
    vs.iter()
        .map(|v| fmt_f64(*v))
        .collect::<Vec<_>>()
        .join(",")
}

fn fmt_usize_list(vs: &[usize]) -> String {
    vs.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| Error::config(format!("{key}: expected a number, got '{v}'")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| Error::config(format!("{key}: expected a non-negative integer, got '{v}'")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse::<u64>()
        .map_err(|_| Error::config(format!("{key}: expected a non-negative integer, got '{v}'")))
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|part| parse_usize(key, part.trim()))
        .collect()
}

fn parse_f64_triple(key: &str, v: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = v
        .split(',')
        .map(|part| parse_f64(key, part.trim()))
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(Error::config(format!(
            "{key}: expected three comma-separated numbers, got '{v}'"
        )));
    }
    Ok([parts[0], parts[1], parts[2]])
}
