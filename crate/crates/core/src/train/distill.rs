//! The training loop: plain CE teachers, the M1-M6 objective grid, and the
//! explainer objective, with per-epoch metrics and attention snapshots.
//!
//! Loss components are logged after their objective weights are applied
//! (`alpha * CE`, `(1 - alpha) * KL`, `gamma * H`), so the logged total is
//! the sum of the logged components by construction.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::backbone::BackboneNet;
use crate::data::{augment_batch, load_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::explainer::{predict_class, ExplainerModel};
use crate::losses::{
    attention_entropy, ce_loss, ce_tempered_grad, kl_div, kl_tempered_grad, label_smoothing_grad,
    label_smoothing_loss, smoothed_target, tempered_softmax, to_binary_targets,
};
use crate::nn::{init, Sgd, Tensor4};
use crate::train::cache::{cache_teacher_logits, LogitCache};
use crate::train::config::{Mode, RunConfig, Variant};
use crate::train::evaluate::evaluate;
use crate::train::metrics::{MetricsLog, MetricsRow};
use crate::train::model::{load_model, save_model, StudentModel};
use crate::types::{argmax, BinaryTaskWeights, KDHyperParams, LogitVector, ProbVector};
use crate::AttentionSnapshot;

/// Everything a finished run produces. When the config names an `out_dir`,
/// the same artifacts are also on disk (`config.kv`, `metrics.csv`,
/// `model.ckpt`, and for gated models `snapshot.json` plus per-epoch
/// `snapshots/epoch_NNN.json`).
#[derive(Debug)]
pub struct RunArtifacts {
    pub metrics: MetricsLog,
    pub model: StudentModel,
    /// Final attention snapshot; `None` for plain models.
    pub snapshot: Option<AttentionSnapshot>,
}

/// Trains a teacher with plain cross-entropy. The config must be a plain M1
/// run without teacher inputs of its own.
pub fn train_teacher(cfg: &RunConfig) -> Result<RunArtifacts> {
    if cfg.mode != Mode::Plain || cfg.variant != Variant::M1 {
        return Err(Error::config(format!(
            "teachers train with plain CE: expected mode plain / variant M1, got {} / {}",
            cfg.mode.as_str(),
            cfg.variant.as_str()
        )));
    }
    if cfg.teacher_checkpoint.is_some() || cfg.teacher_cache.is_some() {
        return Err(Error::config(
            "a teacher run must not reference another teacher",
        ));
    }
    distill(cfg)
}

/// Runs one training job described by `cfg` and returns its artifacts.
pub fn distill(cfg: &RunConfig) -> Result<RunArtifacts> {
    let warnings = cfg.validate()?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let train = load_dataset(&cfg.data, Split::Train)?;
    let test = load_dataset(&cfg.data, Split::Test)?;
    let teacher_logits = if cfg.variant.uses_kl() {
        Some(teacher_logit_table(cfg, &train)?)
    } else {
        None
    };
    let mut model = StudentModel::build(cfg)?;
    let out_dir = prepare_out_dir(cfg, model.mode().has_attention())?;
    let mut sgd = Sgd::new(cfg.optim);
    let mut metrics = MetricsLog::for_run(cfg);
    let weights = BinaryTaskWeights::balanced_for(cfg.data.k);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        sgd.lr_scale = cfg.lr_scale_at(epoch);
        let mut order_rng = init::substream(cfg.seed, 0x0E90_0000 ^ epoch as u64);
        let mut aug_rng = init::substream(cfg.seed, 0x00A6_0000 ^ epoch as u64);
        let order = init::shuffled_indices(&mut order_rng, train.len());

        let mut ce_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut ent_sum = 0.0;
        let mut steps = 0usize;
        let mut correct = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let (mut x, labels) = train.batch(chunk);
            if cfg.data.augment {
                augment_batch(&mut x, &mut aug_rng);
            }
            let teacher_rows: Option<Vec<&[f64]>> = teacher_logits
                .as_ref()
                .map(|table| chunk.iter().map(|&i| table[i].as_slice()).collect());

            model.zero_grad();
            let stats = match &mut model {
                StudentModel::Plain(net) | StudentModel::Vam(net) => {
                    step_logits(net, &x, &labels, teacher_rows.as_deref(), cfg)?
                }
                StudentModel::Explainer(m) => {
                    step_explainer(m, &x, &labels, teacher_rows.as_deref(), cfg, &weights)?
                }
            };
            let mut step_total = stats.ce + stats.kl;
            if cfg.variant.uses_entropy() {
                let h = model.add_entropy_grad(cfg.hp.gamma)?;
                ent_sum += cfg.hp.gamma * h;
                step_total += cfg.hp.gamma * h;
            }
            if !step_total.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}, step {steps}"
                )));
            }
            model.visit_params(&mut |p| sgd.update(p));

            ce_sum += stats.ce;
            kl_sum += stats.kl;
            correct += stats.correct;
            steps += 1;
        }

        let denom = steps.max(1) as f64;
        let loss_ce = ce_sum / denom;
        let loss_kl = cfg.variant.uses_kl().then_some(kl_sum / denom);
        let loss_entropy = cfg.variant.uses_entropy().then_some(ent_sum / denom);
        let loss_total =
            loss_ce + loss_kl.unwrap_or(0.0) + loss_entropy.unwrap_or(0.0);
        let snapshot = model.snapshot();
        let attention = match &snapshot {
            Some(s) => Some(attention_entropy(s)?),
            None => None,
        };
        let report = evaluate(&mut model, &test, cfg.batch_size)?;
        metrics.push(MetricsRow {
            epoch,
            train_acc: correct as f64 / train.len() as f64,
            test_acc: report.accuracy,
            loss_total,
            loss_ce,
            loss_kl,
            loss_entropy,
            attention_entropy: attention,
            wall_time_s: started.elapsed().as_secs_f64(),
        })?;
        if let (Some(dir), Some(snap)) = (&out_dir, &snapshot) {
            let path = dir.join("snapshots").join(format!("epoch_{epoch:03}.json"));
            std::fs::write(path, snap.to_json()?)?;
        }
    }

    let snapshot = model.snapshot();
    if let Some(dir) = &out_dir {
        std::fs::write(dir.join("config.kv"), cfg.to_kv())?;
        std::fs::write(dir.join("metrics.csv"), metrics.to_csv())?;
        save_model(&dir.join("model.ckpt"), &mut model, cfg.data.image)?;
        if let Some(snap) = &snapshot {
            std::fs::write(dir.join("snapshot.json"), snap.to_json()?)?;
        }
    }
    Ok(RunArtifacts {
        metrics,
        model,
        snapshot,
    })
}

/// Resolves per-example teacher logits for the training split, either from a
/// cache file (fingerprint-checked) or by running a teacher checkpoint.
fn teacher_logit_table(cfg: &RunConfig, train: &Dataset) -> Result<Vec<Vec<f64>>> {
    let cache = if let Some(path) = &cfg.teacher_cache {
        let cache = LogitCache::load(path)?;
        cache.validate_for(train)?;
        cache
    } else if let Some(path) = &cfg.teacher_checkpoint {
        let mut teacher = load_model(path)?;
        cache_teacher_logits(&mut teacher, train, cfg.batch_size)?
    } else {
        return Err(Error::config(
            "KL variant without teacher_checkpoint or teacher_cache",
        ));
    };
    Ok(cache.logits)
}

fn prepare_out_dir(cfg: &RunConfig, gated: bool) -> Result<Option<PathBuf>> {
    if cfg.out_dir.as_os_str().is_empty() {
        return Ok(None);
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    if gated {
        std::fs::create_dir_all(cfg.out_dir.join("snapshots"))?;
    }
    Ok(Some(cfg.out_dir.clone()))
}

/// Per-batch loss components, logged post-weighting, plus the top-1 hit
/// count from the training-mode forward pass.
struct BatchStats {
    ce: f64,
    kl: f64,
    correct: usize,
}

/// One optimization step for plain/VAM students (multi-class logits).
/// Leaves parameter gradients populated; the caller applies the update.
fn step_logits(
    net: &mut BackboneNet,
    x: &Tensor4,
    labels: &[usize],
    teacher_rows: Option<&[&[f64]]>,
    cfg: &RunConfig,
) -> Result<BatchStats> {
    let logits = net.forward(x, true)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged("non-finite logits".into()));
    }
    let b = labels.len();
    let k = cfg.data.k;
    let hp = &cfg.hp;
    let mut g = ndarray::Array2::<f64>::zeros((b, k));
    let mut ce = 0.0;
    let mut kl = 0.0;
    let mut correct = 0usize;
    for i in 0..b {
        let row: Vec<f64> = logits.row(i).to_vec();
        if argmax(&row) == labels[i] {
            correct += 1;
        }
        let z = LogitVector::new(row)?;
        let y = ProbVector::one_hot(k, labels[i])?;
        let (ce_i, gce) = if cfg.smoothing > 0.0 {
            (
                label_smoothing_loss(&z, &y, cfg.smoothing)?,
                label_smoothing_grad(&z, &y, cfg.smoothing)?,
            )
        } else {
            let p = tempered_softmax(&z, 1.0)?;
            (ce_loss(&p, &y)?, ce_tempered_grad(&z, 1.0, &y)?)
        };
        if let Some(rows) = teacher_rows {
            let zt = LogitVector::new(rows[i].to_vec())?;
            let q = tempered_softmax(&zt, hp.tau)?;
            let p_hat = tempered_softmax(&z, hp.tau)?;
            let kl_i = kl_div(&q, &p_hat)?;
            let gkl = kl_tempered_grad(&q, &z, hp.tau)?;
            ce += hp.alpha * ce_i / b as f64;
            kl += (1.0 - hp.alpha) * kl_i / b as f64;
            for j in 0..k {
                g[[i, j]] = (hp.alpha * gce[j] + (1.0 - hp.alpha) * gkl[j]) / b as f64;
            }
        } else {
            ce += ce_i / b as f64;
            for j in 0..k {
                g[[i, j]] = gce[j] / b as f64;
            }
        }
    }
    net.backward(&g)?;
    Ok(BatchStats { ce, kl, correct })
}

/// One optimization step for the explainer student (K binary heads).
fn step_explainer(
    model: &mut ExplainerModel,
    x: &Tensor4,
    labels: &[usize],
    teacher_rows: Option<&[&[f64]]>,
    cfg: &RunConfig,
    w: &BinaryTaskWeights,
) -> Result<BatchStats> {
    let out = model.forward(x, true)?;
    let head_logits = out.head_logits;
    if head_logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged("non-finite head logits".into()));
    }
    let b = labels.len();
    let k = cfg.data.k;
    let hp = &cfg.hp;
    let mut g = ndarray::Array3::<f64>::zeros((b, k, 2));
    let mut ce = 0.0;
    let mut kl = 0.0;
    let preds = predict_class(&head_logits);
    let correct = preds
        .iter()
        .zip(labels.iter())
        .filter(|(p, l)| p == l)
        .count();
    for i in 0..b {
        let heads: Vec<LogitVector> = (0..k)
            .map(|c| LogitVector::new(vec![head_logits[[i, c, 0]], head_logits[[i, c, 1]]]))
            .collect::<Result<_>>()?;
        if let Some(rows) = teacher_rows {
            // Full explainer KD objective: per-head weighted BCE + tempered
            // KL against the teacher's binarised distribution.
            let zt = LogitVector::new(rows[i].to_vec())?;
            let p_t = tempered_softmax(&zt, hp.tau)?;
            let (wce_i, kl_i) = explainer_components(&heads, &p_t, labels[i], hp, w)?;
            let grads = crate::losses::explainer_kd_grad(&heads, &p_t, labels[i], hp, w)?;
            ce += hp.alpha * wce_i / b as f64;
            kl += (1.0 - hp.alpha) * kl_i / b as f64;
            for c in 0..k {
                g[[i, c, 0]] = grads[c][0] / b as f64;
                g[[i, c, 1]] = grads[c][1] / b as f64;
            }
        } else if cfg.smoothing > 0.0 {
            // CE-only variant with label smoothing: weighted soft binary CE.
            for (c, h) in heads.iter().enumerate() {
                let y = ProbVector::one_hot(2, usize::from(c == labels[i]))?;
                let (l, gh) = weighted_soft_ce(h, &y, cfg.smoothing, w)?;
                ce += l / b as f64;
                g[[i, c, 0]] += gh[0] / b as f64;
                g[[i, c, 1]] += gh[1] / b as f64;
            }
        } else {
            // Hard-label CE-only variant: exactly the KD objective at
            // alpha = 1, where the teacher term's weight is 0. Routing
            // through the same code keeps alpha = 1 KD runs and CE runs
            // bit-for-bit identical.
            let hp1 = KDHyperParams { alpha: 1.0, ..*hp };
            let p_u = ProbVector::uniform(k)?;
            let loss_i =
                crate::losses::explainer_kd_objective(&heads, &p_u, labels[i], &hp1, w)?;
            let grads = crate::losses::explainer_kd_grad(&heads, &p_u, labels[i], &hp1, w)?;
            ce += loss_i / b as f64;
            for c in 0..k {
                g[[i, c, 0]] = grads[c][0] / b as f64;
                g[[i, c, 1]] = grads[c][1] / b as f64;
            }
        }
    }
    model.backward(&g)?;
    Ok(BatchStats { ce, kl, correct })
}

/// Unweighted-total split of the explainer objective: (sum of per-head
/// weighted BCEs, sum of per-head KLs). The full objective is
/// `alpha * wce + (1 - alpha) * kl`.
fn explainer_components(
    heads: &[LogitVector],
    p_t: &ProbVector,
    label: usize,
    hp: &KDHyperParams,
    w: &BinaryTaskWeights,
) -> Result<(f64, f64)> {
    let q_hats = to_binary_targets(p_t);
    let mut wce = 0.0;
    let mut kl = 0.0;
    for (c, h) in heads.iter().enumerate() {
        let y = ProbVector::one_hot(2, usize::from(c == label))?;
        let p = tempered_softmax(h, 1.0)?;
        wce += crate::losses::weighted_bce(&p, &y, w)?;
        let p_hat = tempered_softmax(h, hp.tau)?;
        kl += kl_div(&q_hats[c], &p_hat)?;
    }
    Ok((wce, kl))
}

/// Weighted binary cross-entropy against an (optionally smoothed) target:
/// `L = -sum_c w_c yhat_c ln p_c` with `p = softmax(h)`. With `eps = 0` this
/// is exactly the hard weighted BCE. Returns (loss, dL/dh).
fn weighted_soft_ce(
    h: &LogitVector,
    y: &ProbVector,
    eps: f64,
    w: &BinaryTaskWeights,
) -> Result<(f64, [f64; 2])> {
    let y_hat = if eps > 0.0 {
        smoothed_target(y, eps)?
    } else {
        y.as_slice().to_vec()
    };
    let p = tempered_softmax(h, 1.0)?;
    let ws = [w.w0, w.w1];
    let mut loss = 0.0;
    let mut pull = 0.0; // sum_c w_c * yhat_c
    for c in 0..2 {
        loss -= ws[c] * y_hat[c] * p.as_slice()[c].ln();
        pull += ws[c] * y_hat[c];
    }
    let mut g = [0.0; 2];
    for c in 0..2 {
        g[c] = pull * p.as_slice()[c] - ws[c] * y_hat[c];
    }
    Ok((loss, g))
}

/// Convenience for tests and pilots: trains a teacher, writes its checkpoint
/// and train-split logit cache into `dir`, and returns the paths.
pub fn teacher_into_dir(cfg: &RunConfig, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let mut run_cfg = cfg.clone();
    run_cfg.out_dir = dir.to_path_buf();
    let mut artifacts = train_teacher(&run_cfg)?;
    let train = load_dataset(&run_cfg.data, Split::Train)?;
    let cache = cache_teacher_logits(&mut artifacts.model, &train, run_cfg.batch_size)?;
    let cache_path = dir.join("teacher_logits.json");
    cache.save(&cache_path)?;
    Ok((dir.join("model.ckpt"), cache_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;
    use crate::losses::vanilla_kd_loss;
    use crate::train::config::Mode;
    use tempfile::tempdir;

    fn base_cfg(mode: Mode, variant: Variant) -> RunConfig {
        let mut cfg = RunConfig::default_for(mode);
        cfg.variant = variant;
        cfg.data = DatasetSpec::synthetic(3, 8, 24, 12, 5);
        cfg.epochs = 2;
        cfg.batch_size = 8;
        cfg.seed = 3;
        cfg.channels_per_block = 4;
        cfg.optim.lr_weights = 0.02;
        cfg.optim.lr_attention = 0.01;
        if mode == Mode::Explainer {
            cfg.experts = vec![1, 2, 2];
            cfg.epochs = 2;
        }
        cfg
    }

    fn teacher_paths(dir: &Path) -> (PathBuf, PathBuf) {
        let mut tcfg = base_cfg(Mode::Plain, Variant::M1);
        tcfg.epochs = 2;
        teacher_into_dir(&tcfg, dir).unwrap()
    }

    #[test]
    fn m1_plain_log_has_no_optional_columns() {
        let cfg = base_cfg(Mode::Plain, Variant::M1);
        let artifacts = distill(&cfg).unwrap();
        assert!(!artifacts.metrics.has_kl);
        assert!(!artifacts.metrics.has_entropy_loss);
        assert!(!artifacts.metrics.has_attention);
        assert!(artifacts.snapshot.is_none());
        assert_eq!(artifacts.metrics.rows.len(), 2);
        for row in &artifacts.metrics.rows {
            assert_eq!(row.loss_total, row.loss_ce);
        }
    }

    #[test]
    fn logged_total_is_the_sum_of_logged_components() {
        let dir = tempdir().unwrap();
        let (_, cache) = teacher_paths(dir.path());
        let mut cfg = base_cfg(Mode::Vam, Variant::M6);
        cfg.teacher_cache = Some(cache);
        cfg.hp.gamma = 0.05;
        let artifacts = distill(&cfg).unwrap();
        for row in &artifacts.metrics.rows {
            let sum = row.loss_ce + row.loss_kl.unwrap() + row.loss_entropy.unwrap();
            assert!((row.loss_total - sum).abs() <= 1e-5, "{row:?}");
            assert!(row.attention_entropy.unwrap() >= 0.0);
        }
    }

    #[test]
    fn step_components_match_the_closed_form_objective() {
        // Cross-check the logged step decomposition against the losses-module
        // objective on a frozen model and batch.
        let dir = tempdir().unwrap();
        let (_, cache_path) = teacher_paths(dir.path());
        let cache = LogitCache::load(&cache_path).unwrap();
        let mut cfg = base_cfg(Mode::Plain, Variant::M4);
        cfg.teacher_cache = Some(cache_path.clone());
        let train = load_dataset(&cfg.data, Split::Train).unwrap();
        let mut model = StudentModel::build(&cfg).unwrap();
        let chunk: Vec<usize> = (0..6).collect();
        let (x, labels) = train.batch(&chunk);
        let rows: Vec<&[f64]> = chunk.iter().map(|&i| cache.logits[i].as_slice()).collect();
        let StudentModel::Plain(net) = &mut model else {
            unreachable!()
        };
        // Capture the logits the step will see before it mutates state.
        let logits = net.forward(&x, true).unwrap();
        let mut expected = 0.0;
        for i in 0..6 {
            let z = LogitVector::new(logits.row(i).to_vec()).unwrap();
            let zt = LogitVector::new(rows[i].to_vec()).unwrap();
            let y = ProbVector::one_hot(3, labels[i]).unwrap();
            expected += vanilla_kd_loss(&z, &zt, &y, &cfg.hp).unwrap() / 6.0;
        }
        let stats = step_logits(net, &x, &labels, Some(&rows), &cfg).unwrap();
        assert!(
            (stats.ce + stats.kl - expected).abs() <= 1e-9,
            "{} vs {expected}",
            stats.ce + stats.kl
        );
    }

    #[test]
    fn explainer_step_components_match_the_closed_form_objective() {
        let dir = tempdir().unwrap();
        let (_, cache_path) = teacher_paths(dir.path());
        let cache = LogitCache::load(&cache_path).unwrap();
        let mut cfg = base_cfg(Mode::Explainer, Variant::M4);
        cfg.teacher_cache = Some(cache_path.clone());
        let train = load_dataset(&cfg.data, Split::Train).unwrap();
        let mut model = StudentModel::build(&cfg).unwrap();
        let chunk: Vec<usize> = (0..5).collect();
        let (x, labels) = train.batch(&chunk);
        let rows: Vec<&[f64]> = chunk.iter().map(|&i| cache.logits[i].as_slice()).collect();
        let StudentModel::Explainer(m) = &mut model else {
            unreachable!()
        };
        let out = m.forward(&x, true).unwrap();
        let w = BinaryTaskWeights::balanced_for(3);
        let mut expected = 0.0;
        for i in 0..5 {
            let heads: Vec<LogitVector> = (0..3)
                .map(|c| {
                    LogitVector::new(vec![
                        out.head_logits[[i, c, 0]],
                        out.head_logits[[i, c, 1]],
                    ])
                    .unwrap()
                })
                .collect();
            let zt = LogitVector::new(rows[i].to_vec()).unwrap();
            let p_t = tempered_softmax(&zt, cfg.hp.tau).unwrap();
            expected +=
                crate::losses::explainer_kd_objective(&heads, &p_t, labels[i], &cfg.hp, &w)
                    .unwrap()
                    / 5.0;
        }
        let stats = step_explainer(m, &x, &labels, Some(&rows), &cfg, &w).unwrap();
        assert!(
            (stats.ce + stats.kl - expected).abs() <= 1e-9,
            "{} vs {expected}",
            stats.ce + stats.kl
        );
    }

    #[test]
    fn m6_with_zero_gamma_matches_m5_exactly() {
        let dir = tempdir().unwrap();
        let (_, cache) = teacher_paths(dir.path());
        let mut m5 = base_cfg(Mode::Vam, Variant::M5);
        m5.teacher_cache = Some(cache.clone());
        let mut m6 = base_cfg(Mode::Vam, Variant::M6);
        m6.teacher_cache = Some(cache);
        m6.hp.gamma = 0.0;
        let a5 = distill(&m5).unwrap();
        let a6 = distill(&m6).unwrap();
        assert_eq!(a5.metrics.rows.len(), a6.metrics.rows.len());
        for (r5, r6) in a5.metrics.rows.iter().zip(a6.metrics.rows.iter()) {
            assert_eq!(r5.loss_ce, r6.loss_ce);
            assert_eq!(r5.loss_kl, r6.loss_kl);
            assert_eq!(r6.loss_entropy, Some(0.0));
            assert_eq!(r5.loss_total, r6.loss_total);
            assert_eq!(r5.train_acc, r6.train_acc);
            assert_eq!(r5.test_acc, r6.test_acc);
        }
    }

    #[test]
    fn explainer_kd_with_alpha_one_matches_the_ce_only_variant() {
        let dir = tempdir().unwrap();
        let (_, cache) = teacher_paths(dir.path());
        let m1 = base_cfg(Mode::Explainer, Variant::M1);
        let mut m4 = base_cfg(Mode::Explainer, Variant::M4);
        m4.teacher_cache = Some(cache);
        m4.hp.alpha = 1.0;
        let a1 = distill(&m1).unwrap();
        let a4 = distill(&m4).unwrap();
        for (r1, r4) in a1.metrics.rows.iter().zip(a4.metrics.rows.iter()) {
            // KL is logged for M4 but weighted to exactly zero.
            assert_eq!(r4.loss_kl, Some(0.0));
            assert_eq!(r1.loss_ce, r4.loss_ce);
            assert_eq!(r1.loss_total, r4.loss_total);
            assert_eq!(r1.train_acc, r4.train_acc);
            assert_eq!(r1.test_acc, r4.test_acc);
        }
    }

    #[test]
    fn reruns_are_bit_for_bit_identical() {
        let cfg = base_cfg(Mode::Vam, Variant::M2);
        let a = distill(&cfg).unwrap();
        let b = distill(&cfg).unwrap();
        assert!(a.metrics.same_trajectory(&b.metrics));
        let mut pa = Vec::new();
        let mut model_a = a.model;
        model_a.visit_params(&mut |p| pa.extend(p.value.iter().copied()));
        let mut pb = Vec::new();
        let mut model_b = b.model;
        model_b.visit_params(&mut |p| pb.extend(p.value.iter().copied()));
        assert_eq!(pa, pb);
    }

    #[test]
    fn cached_and_live_teachers_give_identical_trajectories() {
        let dir = tempdir().unwrap();
        let (ckpt, cache) = teacher_paths(dir.path());
        let mut live = base_cfg(Mode::Plain, Variant::M4);
        live.teacher_checkpoint = Some(ckpt);
        let mut cached = base_cfg(Mode::Plain, Variant::M4);
        cached.teacher_cache = Some(cache);
        let a = distill(&live).unwrap();
        let b = distill(&cached).unwrap();
        assert!(a.metrics.same_trajectory(&b.metrics));
    }

    #[test]
    fn stale_cache_aborts_the_run() {
        let dir = tempdir().unwrap();
        let (_, cache) = teacher_paths(dir.path());
        let mut cfg = base_cfg(Mode::Plain, Variant::M4);
        cfg.teacher_cache = Some(cache);
        cfg.data.train_subset = 21; // different subset => different fingerprint
        let err = distill(&cfg).unwrap_err();
        assert!(matches!(err, Error::StaleCache(_)), "{err}");
    }

    #[test]
    fn artifacts_land_in_the_out_dir() {
        let dir = tempdir().unwrap();
        let mut cfg = base_cfg(Mode::Vam, Variant::M2);
        cfg.out_dir = dir.path().join("run");
        cfg.epochs = 1;
        distill(&cfg).unwrap();
        let run = dir.path().join("run");
        assert!(run.join("config.kv").is_file());
        assert!(run.join("metrics.csv").is_file());
        assert!(run.join("model.ckpt").is_file());
        assert!(run.join("snapshot.json").is_file());
        assert!(run.join("snapshots").join("epoch_001.json").is_file());
        let text = std::fs::read_to_string(run.join("config.kv")).unwrap();
        assert_eq!(RunConfig::parse_kv(&text).unwrap(), cfg);
        let metrics = MetricsLog::from_csv(
            &std::fs::read_to_string(run.join("metrics.csv")).unwrap(),
        )
        .unwrap();
        assert_eq!(metrics.rows.len(), 1);
        let snap = AttentionSnapshot::from_json(
            &std::fs::read_to_string(run.join("snapshot.json")).unwrap(),
        )
        .unwrap();
        assert!(!snap.records.is_empty());
    }

    #[test]
    fn checkpoint_evaluation_matches_at_train_accuracy() {
        let dir = tempdir().unwrap();
        let mut cfg = base_cfg(Mode::Plain, Variant::M1);
        cfg.out_dir = dir.path().join("teacher");
        let artifacts = train_teacher(&cfg).unwrap();
        let test = load_dataset(&cfg.data, Split::Test).unwrap();
        let mut loaded = load_model(&cfg.out_dir.join("model.ckpt")).unwrap();
        let report = evaluate(&mut loaded, &test, cfg.batch_size).unwrap();
        assert_eq!(
            report.accuracy,
            artifacts.metrics.last().unwrap().test_acc
        );
    }

    #[test]
    fn exploding_learning_rate_reports_divergence() {
        let mut cfg = base_cfg(Mode::Plain, Variant::M1);
        cfg.optim.lr_weights = 1e14;
        cfg.epochs = 6;
        let err = distill(&cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)), "{err}");
    }

    #[test]
    fn weighted_soft_ce_matches_hard_weighted_bce_at_eps_zero() {
        let w = BinaryTaskWeights::balanced_for(4);
        let h = LogitVector::new(vec![0.3, -1.2]).unwrap();
        for label in 0..2 {
            let y = ProbVector::one_hot(2, label).unwrap();
            let (soft, _) = weighted_soft_ce(&h, &y, 0.0, &w).unwrap();
            let p = tempered_softmax(&h, 1.0).unwrap();
            let hard = crate::losses::weighted_bce(&p, &y, &w).unwrap();
            assert!((soft - hard).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_soft_ce_gradient_is_finite_difference_accurate() {
        let w = BinaryTaskWeights::balanced_for(5);
        let y = ProbVector::one_hot(2, 1).unwrap();
        let h0 = [0.4, -0.9];
        let eps = 0.1;
        let (_, g) = weighted_soft_ce(&LogitVector::new(h0.to_vec()).unwrap(), &y, eps, &w)
            .unwrap();
        let fd_h = 1e-4;
        for j in 0..2 {
            let mut plus = h0;
            plus[j] += fd_h;
            let mut minus = h0;
            minus[j] -= fd_h;
            let (lp, _) =
                weighted_soft_ce(&LogitVector::new(plus.to_vec()).unwrap(), &y, eps, &w).unwrap();
            let (lm, _) =
                weighted_soft_ce(&LogitVector::new(minus.to_vec()).unwrap(), &y, eps, &w)
                    .unwrap();
            let fd = (lp - lm) / (2.0 * fd_h);
            let rel = (g[j] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel <= 1e-3, "head grad {j}: {} vs {fd}", g[j]);
        }
    }

    #[test]
    fn label_smoothing_changes_the_ce_only_loss_but_keeps_columns() {
        let mut plain = base_cfg(Mode::Plain, Variant::M1);
        plain.epochs = 1;
        let mut smoothed = plain.clone();
        smoothed.smoothing = 0.1;
        let a = distill(&plain).unwrap();
        let b = distill(&smoothed).unwrap();
        assert!(!b.metrics.has_kl);
        assert_ne!(
            a.metrics.rows[0].loss_ce,
            b.metrics.rows[0].loss_ce
        );
    }
}
