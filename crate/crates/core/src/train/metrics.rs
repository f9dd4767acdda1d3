//! Per-epoch training metrics and their CSV form.
//!
//! CSV layout: a header row, one row per epoch, and a trailing summary row
//! whose first column is the literal `final`. Optional columns (`loss_kl`,
//! `loss_entropy`, `attention_entropy`) appear only when the run's variant /
//! mode produces them, so an M1 log has no KL column at all. The summary row
//! repeats the last epoch's values with the total wall time; it is derived,
//! and parsing ignores it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::config::RunConfig;

/// One epoch of measurements. Loss components are logged after their
/// objective weights are applied, so `loss_total` equals the sum of the
/// present components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// 1-based epoch index.
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub loss_total: f64,
    /// CE component (already scaled by alpha when a KL term is present).
    pub loss_ce: f64,
    /// (1-alpha)-scaled KL component; present iff the variant uses KD.
    pub loss_kl: Option<f64>,
    /// gamma-scaled entropy component; present iff the variant regularizes.
    pub loss_entropy: Option<f64>,
    /// Raw total attention entropy (nats); present iff the model has gates.
    pub attention_entropy: Option<f64>,
    /// Wall-clock seconds spent in this epoch.
    pub wall_time_s: f64,
}

/// Metrics for one run, with fixed column presence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub has_kl: bool,
    pub has_entropy_loss: bool,
    pub has_attention: bool,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new(has_kl: bool, has_entropy_loss: bool, has_attention: bool) -> Self {
        MetricsLog {
            has_kl,
            has_entropy_loss,
            has_attention,
            rows: Vec::new(),
        }
    }

    /// Column presence implied by a run config: KL column for KD variants,
    /// entropy-loss column for regularized variants, attention column for
    /// any gated mode.
    pub fn for_run(cfg: &RunConfig) -> Self {
        MetricsLog::new(
            cfg.variant.uses_kl(),
            cfg.variant.uses_entropy(),
            cfg.mode.has_attention(),
        )
    }

    /// Appends a row after checking the log invariants: strictly increasing
    /// epochs, column presence matching the log, non-negative entropies.
    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.epoch <= last.epoch {
                return Err(Error::invariant(format!(
                    "metrics epochs must increase: {} after {}",
                    row.epoch, last.epoch
                )));
            }
        }
        if row.loss_kl.is_some() != self.has_kl {
            return Err(Error::invariant("loss_kl presence does not match the log"));
        }
        if row.loss_entropy.is_some() != self.has_entropy_loss {
            return Err(Error::invariant(
                "loss_entropy presence does not match the log",
            ));
        }
        if row.attention_entropy.is_some() != self.has_attention {
            return Err(Error::invariant(
                "attention_entropy presence does not match the log",
            ));
        }
        if let Some(h) = row.attention_entropy {
            if h < 0.0 {
                return Err(Error::invariant(format!(
                    "attention entropy must be non-negative, got {h}"
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    /// Per-epoch wall times summed.
    pub fn total_wall_time(&self) -> f64 {
        self.rows.iter().map(|r| r.wall_time_s).sum()
    }

    fn header(&self) -> Vec<&'static str> {
        let mut h = vec!["epoch", "train_acc", "test_acc", "loss_total", "loss_ce"];
        if self.has_kl {
            h.push("loss_kl");
        }
        if self.has_entropy_loss {
            h.push("loss_entropy");
        }
        if self.has_attention {
            h.push("attention_entropy");
        }
        h.push("wall_time_s");
        h
    }

    fn record(&self, epoch_field: &str, row: &MetricsRow, wall: f64) -> Vec<String> {
        let mut rec = vec![
            epoch_field.to_string(),
            format!("{}", row.train_acc),
            format!("{}", row.test_acc),
            format!("{}", row.loss_total),
            format!("{}", row.loss_ce),
        ];
        if self.has_kl {
            rec.push(format!("{}", row.loss_kl.unwrap_or(f64::NAN)));
        }
        if self.has_entropy_loss {
            rec.push(format!("{}", row.loss_entropy.unwrap_or(f64::NAN)));
        }
        if self.has_attention {
            rec.push(format!("{}", row.attention_entropy.unwrap_or(f64::NAN)));
        }
        rec.push(format!("{wall}"));
        rec
    }

    /// Renders the log as CSV (header, epoch rows, derived `final` row).
    pub fn to_csv(&self) -> String {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(self.header()).expect("csv write");
        for row in &self.rows {
            wtr.write_record(self.record(&row.epoch.to_string(), row, row.wall_time_s))
                .expect("csv write");
        }
        if let Some(last) = self.rows.last() {
            wtr.write_record(self.record("final", last, self.total_wall_time()))
                .expect("csv write");
        }
        let bytes = wtr.into_inner().expect("csv flush");
        String::from_utf8(bytes).expect("csv utf8")
    }

    /// Parses CSV produced by [`MetricsLog::to_csv`]. Column presence is
    /// recovered from the header; the derived `final` row is skipped.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::validation(format!("metrics csv: {e}")))?
            .iter()
            .map(|s| s.to_string())
            .collect();
        let has_kl = headers.iter().any(|h| h == "loss_kl");
        let has_entropy_loss = headers.iter().any(|h| h == "loss_entropy");
        let has_attention = headers.iter().any(|h| h == "attention_entropy");
        let mut log = MetricsLog::new(has_kl, has_entropy_loss, has_attention);
        let expected = log.header();
        if headers != expected {
            return Err(Error::validation(format!(
                "metrics csv header mismatch: got {headers:?}, expected {expected:?}"
            )));
        }
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::validation(format!("metrics csv: {e}")))?;
            if rec.len() != expected.len() {
                return Err(Error::validation(format!(
                    "metrics csv row has {} fields, expected {}",
                    rec.len(),
                    expected.len()
                )));
            }
            if &rec[0] == "final" {
                continue;
            }
            let mut i = 0usize;
            let mut next = || {
                let v = rec[i].to_string();
                i += 1;
                v
            };
            let epoch: usize = next()
                .parse()
                .map_err(|_| Error::validation("metrics csv: bad epoch"))?;
            let train_acc = parse_field(&next())?;
            let test_acc = parse_field(&next())?;
            let loss_total = parse_field(&next())?;
            let loss_ce = parse_field(&next())?;
            let loss_kl = if has_kl { Some(parse_field(&next())?) } else { None };
            let loss_entropy = if has_entropy_loss {
                Some(parse_field(&next())?)
            } else {
                None
            };
            let attention_entropy = if has_attention {
                Some(parse_field(&next())?)
            } else {
                None
            };
            let wall_time_s = parse_field(&next())?;
            log.push(MetricsRow {
                epoch,
                train_acc,
                test_acc,
                loss_total,
                loss_ce,
                loss_kl,
                loss_entropy,
                attention_entropy,
                wall_time_s,
            })?;
        }
        Ok(log)
    }

    /// True when both logs recorded the same numbers, ignoring wall time.
    pub fn same_trajectory(&self, other: &MetricsLog) -> bool {
        if self.rows.len() != other.rows.len() {
            return false;
        }
        self.rows.iter().zip(other.rows.iter()).all(|(a, b)| {
            a.epoch == b.epoch
                && a.train_acc == b.train_acc
                && a.test_acc == b.test_acc
                && a.loss_total == b.loss_total
                && a.loss_ce == b.loss_ce
                && a.loss_kl == b.loss_kl
                && a.loss_entropy == b.loss_entropy
                && a.attention_entropy == b.attention_entropy
        })
    }
}

fn parse_field(v: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| Error::validation(format!("metrics csv: bad number '{v}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, kl: Option<f64>, ent: Option<f64>, att: Option<f64>) -> MetricsRow {
        MetricsRow {
            epoch,
            train_acc: 0.5 + epoch as f64 * 0.01,
            test_acc: 0.4 + epoch as f64 * 0.01,
            loss_total: 1.0 / epoch as f64,
            loss_ce: 0.8 / epoch as f64,
            loss_kl: kl,
            loss_entropy: ent,
            attention_entropy: att,
            wall_time_s: 0.25,
        }
    }

    #[test]
    fn csv_round_trip_preserves_rows_and_flags() {
        let mut log = MetricsLog::new(true, true, true);
        log.push(row(1, Some(0.1), Some(0.02), Some(1.5))).unwrap();
        log.push(row(2, Some(0.09), Some(0.019), Some(1.2))).unwrap();
        let text = log.to_csv();
        let parsed = MetricsLog::from_csv(&text).unwrap();
        assert_eq!(parsed, log);
        assert_eq!(parsed.to_csv(), text);
    }

    #[test]
    fn optional_columns_are_absent_for_plain_ce() {
        let mut log = MetricsLog::new(false, false, false);
        log.push(row(1, None, None, None)).unwrap();
        let text = log.to_csv();
        assert!(!text.contains("loss_kl"));
        assert!(!text.contains("loss_entropy"));
        assert!(!text.contains("attention_entropy"));
        assert_eq!(
            text.lines().next().unwrap(),
            "epoch,train_acc,test_acc,loss_total,loss_ce,wall_time_s"
        );
    }

    #[test]
    fn final_row_repeats_last_epoch_with_total_wall_time() {
        let mut log = MetricsLog::new(false, false, false);
        log.push(row(1, None, None, None)).unwrap();
        log.push(row(2, None, None, None)).unwrap();
        let text = log.to_csv();
        let last_line = text.lines().last().unwrap();
        assert!(last_line.starts_with("final,"), "{last_line}");
        assert!(last_line.ends_with(",0.5"), "{last_line}");
    }

    #[test]
    fn push_rejects_non_monotone_epochs_and_column_mismatch() {
        let mut log = MetricsLog::new(false, false, false);
        log.push(row(2, None, None, None)).unwrap();
        assert!(log.push(row(2, None, None, None)).is_err());
        assert!(log.push(row(1, None, None, None)).is_err());
        assert!(log.push(row(3, Some(0.1), None, None)).is_err());
        let mut gated = MetricsLog::new(false, false, true);
        assert!(gated.push(row(1, None, None, Some(-0.1))).is_err());
        assert!(gated.push(row(1, None, None, Some(0.1))).is_ok());
    }

    #[test]
    fn same_trajectory_ignores_wall_time() {
        let mut a = MetricsLog::new(false, false, false);
        let mut b = MetricsLog::new(false, false, false);
        a.push(row(1, None, None, None)).unwrap();
        let mut slow = row(1, None, None, None);
        slow.wall_time_s = 99.0;
        b.push(slow).unwrap();
        assert!(a.same_trajectory(&b));
        let mut c = MetricsLog::new(false, false, false);
        let mut diff = row(1, None, None, None);
        diff.loss_ce += 1e-9;
        diff.loss_total += 1e-9;
        c.push(diff).unwrap();
        assert!(!a.same_trajectory(&c));
    }
}
