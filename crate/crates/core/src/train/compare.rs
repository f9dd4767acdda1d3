//! Side-by-side comparison of finished runs: accuracy, attention entropy,
//! retained blocks after hardening, and a routing-tree DOT per gated run.

use std::path::Path;

use crate::error::{Error, Result};
use crate::train::config::RunConfig;
use crate::train::metrics::{MetricsLog, MetricsRow};
use crate::tree::{entropy_report, extract_tree, snapshot_leaf_count, to_dot};
use crate::AttentionSnapshot;

/// One finished run, as reloaded from its artifact directory.
#[derive(Debug, Clone)]
pub struct RunRecord {
    /// Directory basename; used as the row label.
    pub label: String,
    pub config: RunConfig,
    /// Last epoch row of the metrics log.
    pub final_row: MetricsRow,
    /// Final attention snapshot, when the run had gates.
    pub snapshot: Option<AttentionSnapshot>,
}

/// Loads `config.kv`, `metrics.csv`, and (if present) `snapshot.json` from a
/// run directory written by `distill`.
pub fn load_run(dir: &Path) -> Result<RunRecord> {
    let label = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let config = RunConfig::parse_kv(&std::fs::read_to_string(dir.join("config.kv"))?)?;
    let metrics = MetricsLog::from_csv(&std::fs::read_to_string(dir.join("metrics.csv"))?)?;
    let final_row = metrics
        .last()
        .cloned()
        .ok_or_else(|| Error::validation(format!("{label}: metrics.csv has no epoch rows")))?;
    let snap_path = dir.join("snapshot.json");
    let snapshot = if snap_path.is_file() {
        Some(AttentionSnapshot::from_json(&std::fs::read_to_string(
            snap_path,
        )?)?)
    } else {
        None
    };
    Ok(RunRecord {
        label,
        config,
        final_row,
        snapshot,
    })
}

/// One line of the comparison table.
#[derive(Debug, Clone)]
pub struct CompareRow {
    pub label: String,
    pub variant: String,
    pub mode: String,
    pub smoothing: f64,
    pub accuracy: f64,
    /// Accuracy minus the first run's accuracy (percentage points / 100).
    pub delta_accuracy: f64,
    /// Total attention entropy (nats); `None` for plain runs.
    pub total_entropy: Option<f64>,
    /// Blocks kept after hardening + pruning; `None` for plain runs.
    pub retained_blocks: Option<usize>,
    /// Routing tree in DOT form; `None` for plain runs.
    pub tree_dot: Option<String>,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
}

/// Builds the comparison table. All runs must share the dataset and student
/// family; the first run is the delta baseline.
pub fn compare_objectives(runs: &[RunRecord]) -> Result<CompareReport> {
    if runs.len() < 2 {
        return Err(Error::validation(format!(
            "comparison needs at least 2 runs, got {}",
            runs.len()
        )));
    }
    let base = &runs[0];
    for run in &runs[1..] {
        let a = &base.config.data;
        let b = &run.config.data;
        let same = a.source == b.source
            && a.root == b.root
            && a.k == b.k
            && a.image == b.image
            && a.train_subset == b.train_subset
            && a.test_subset == b.test_subset
            && a.seed == b.seed;
        if !same {
            return Err(Error::validation(format!(
                "runs '{}' and '{}' use different datasets and cannot be compared",
                base.label, run.label
            )));
        }
        if base.config.family != run.config.family {
            return Err(Error::validation(format!(
                "runs '{}' and '{}' use different student families ({} vs {})",
                base.label,
                run.label,
                base.config.family.as_str(),
                run.config.family.as_str()
            )));
        }
    }

    let base_acc = base.final_row.test_acc;
    let mut rows = Vec::with_capacity(runs.len());
    for run in runs {
        let (total_entropy, retained_blocks, tree_dot) = match &run.snapshot {
            Some(snap) => {
                let report = entropy_report(snap)?;
                let k = snapshot_leaf_count(snap);
                let tree = extract_tree(snap, k)?;
                (
                    Some(report.total_entropy),
                    Some(report.retained_blocks),
                    Some(to_dot(&tree)),
                )
            }
            None => (None, None, None),
        };
        rows.push(CompareRow {
            label: run.label.clone(),
            variant: run.config.variant.as_str().to_string(),
            mode: run.config.mode.as_str().to_string(),
            smoothing: run.config.smoothing,
            accuracy: run.final_row.test_acc,
            delta_accuracy: run.final_row.test_acc - base_acc,
            total_entropy,
            retained_blocks,
            tree_dot,
        });
    }
    Ok(CompareReport { rows })
}

impl CompareReport {
    /// Fixed-width text table; accuracy in percent, entropy in nats.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<20} {:>7} {:>10} {:>9} {:>9} {:>9} {:>9} {:>8}\n",
            "run", "variant", "mode", "smooth", "acc%", "dacc%", "entropy", "blocks"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<20} {:>7} {:>10} {:>9} {:>9.2} {:>+9.2} {:>9} {:>8}\n",
                r.label,
                r.variant,
                r.mode,
                format_smoothing(r.smoothing),
                r.accuracy * 100.0,
                r.delta_accuracy * 100.0,
                r.total_entropy
                    .map(|h| format!("{h:.4}"))
                    .unwrap_or_else(|| "-".into()),
                r.retained_blocks
                    .map(|n| n.to_string())
                    .unwrap_or_else(|| "-".into()),
            ));
        }
        out
    }
}

fn format_smoothing(eps: f64) -> String {
    if eps == 0.0 {
        "-".into()
    } else {
        format!("{eps}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;
    use crate::train::config::{Mode, Variant};
    use crate::train::distill::distill;
    use tempfile::tempdir;

    fn run_dir(root: &Path, name: &str, mode: Mode, smoothing: f64) -> RunRecord {
        let mut cfg = RunConfig::default_for(mode);
        cfg.variant = if mode == Mode::Vam {
            Variant::M2
        } else {
            Variant::M1
        };
        cfg.data = DatasetSpec::synthetic(3, 8, 18, 9, 5);
        cfg.epochs = 1;
        cfg.batch_size = 6;
        cfg.seed = 2;
        cfg.smoothing = smoothing;
        cfg.channels_per_block = 4;
        if mode == Mode::Explainer {
            cfg.experts = vec![1, 2, 2];
        }
        cfg.out_dir = root.join(name);
        distill(&cfg).unwrap();
        load_run(&cfg.out_dir).unwrap()
    }

    #[test]
    fn self_comparison_has_zero_deltas() {
        let dir = tempdir().unwrap();
        let run = run_dir(dir.path(), "a", Mode::Vam, 0.0);
        let report = compare_objectives(&[run.clone(), run]).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].delta_accuracy, 0.0);
        assert_eq!(report.rows[1].delta_accuracy, 0.0);
        assert_eq!(
            report.rows[0].total_entropy,
            report.rows[1].total_entropy
        );
        assert_eq!(report.rows[0].tree_dot, report.rows[1].tree_dot);
    }

    #[test]
    fn smoothing_column_appears_in_three_run_comparisons() {
        let dir = tempdir().unwrap();
        let a = run_dir(dir.path(), "ce", Mode::Explainer, 0.0);
        let b = run_dir(dir.path(), "ls", Mode::Explainer, 0.1);
        let c = run_dir(dir.path(), "vam", Mode::Vam, 0.0);
        let report = compare_objectives(&[a, b, c]).unwrap();
        let text = report.to_text();
        assert!(text.contains("smooth"), "{text}");
        assert!(text.contains("0.1"), "{text}");
        assert_eq!(report.rows[1].smoothing, 0.1);
        // Gated runs carry entropy, retained counts, and a DOT tree.
        for row in &report.rows {
            assert!(row.total_entropy.is_some());
            assert!(row.retained_blocks.is_some());
            assert!(row.tree_dot.as_deref().unwrap().starts_with("digraph"));
        }
    }

    #[test]
    fn different_datasets_are_incomparable() {
        let dir = tempdir().unwrap();
        let a = run_dir(dir.path(), "a", Mode::Vam, 0.0);
        let mut b = run_dir(dir.path(), "b", Mode::Vam, 0.0);
        b.config.data.train_subset = 12;
        let err = compare_objectives(&[a, b]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn fewer_than_two_runs_is_an_error() {
        let dir = tempdir().unwrap();
        let a = run_dir(dir.path(), "a", Mode::Vam, 0.0);
        let err = compare_objectives(&[a]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn plain_runs_compare_with_dash_columns() {
        let dir = tempdir().unwrap();
        let mut cfg = RunConfig::default_for(Mode::Plain);
        cfg.data = DatasetSpec::synthetic(3, 8, 18, 9, 5);
        cfg.epochs = 1;
        cfg.batch_size = 6;
        cfg.out_dir = dir.path().join("plain");
        distill(&cfg).unwrap();
        let a = load_run(&cfg.out_dir).unwrap();
        let b = run_dir(dir.path(), "vam", Mode::Vam, 0.0);
        let report = compare_objectives(&[a, b]).unwrap();
        assert!(report.rows[0].total_entropy.is_none());
        assert!(report.rows[0].tree_dot.is_none());
        assert!(report.rows[1].total_entropy.is_some());
        let text = report.to_text();
        assert!(text.contains(" - "), "{text}");
    }
}
