//! Accuracy and communication metrics: per-round user-model accuracy
//! records, the running maximum of the across-client average, bytes-to-reach
//! accounting, and speed-up ratios between experiment arms.

use std::io::{BufRead, Write};

use crate::{Error, Result};

/// One completed round: per-client test accuracies and the cumulative
/// communication (including initialization traffic) at round end.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub client_ua: Vec<f64>,
    pub avg_ua: f64,
    pub cumulative_up: u64,
    pub cumulative_down: u64,
}

impl RoundRecord {
    pub fn total_bytes(&self) -> u64 {
        self.cumulative_up + self.cumulative_down
    }
}

/// Bytes needed to first reach a target average accuracy, when reached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CommCost {
    Reached(f64),
    Unreached,
}

impl std::fmt::Display for CommCost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CommCost::Reached(bytes) => write!(f, "{bytes}"),
            CommCost::Unreached => write!(f, "unreached"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub algorithm: String,
    pub records: Vec<RoundRecord>,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    /// Records sorted by round number; metric definitions are order
    /// independent.
    fn sorted_records(&self) -> Vec<&RoundRecord> {
        let mut sorted: Vec<&RoundRecord> = self.records.iter().collect();
        sorted.sort_by_key(|r| r.round);
        sorted
    }

    /// Maximum over rounds of the across-client average accuracy.
    pub fn maua(&self) -> Result<f64> {
        if self.records.is_empty() {
            return Err(Error::invalid_argument("metrics report has no rounds"));
        }
        Ok(self
            .sorted_records()
            .iter()
            .map(|r| r.avg_ua)
            .fold(f64::NEG_INFINITY, f64::max))
    }

    /// Cumulative bytes (both directions, initialization included) at the
    /// first round whose average accuracy reaches `target`.
    pub fn comm_to_reach(&self, target: f64) -> CommCost {
        for record in self.sorted_records() {
            if record.avg_ua >= target {
                return CommCost::Reached(record.total_bytes() as f64);
            }
        }
        CommCost::Unreached
    }

    /// `(target, bytes-or-unreached)` for each requested target accuracy.
    pub fn acc_at(&self, targets: &[f64]) -> Vec<(f64, CommCost)> {
        targets
            .iter()
            .map(|&t| (t, self.comm_to_reach(t)))
            .collect()
    }

    /// Emit the per-round CSV (`round,avg_ua,maua,bytes_up,bytes_down`) plus
    /// a final comment-style summary line.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "round,avg_ua,maua,bytes_up,bytes_down")?;
        let mut running_max = f64::NEG_INFINITY;
        let sorted = self.sorted_records();
        for record in &sorted {
            running_max = running_max.max(record.avg_ua);
            writeln!(
                w,
                "{},{},{},{},{}",
                record.round,
                record.avg_ua,
                running_max,
                record.cumulative_up,
                record.cumulative_down
            )?;
        }
        let (up, down) = sorted
            .last()
            .map(|r| (r.cumulative_up, r.cumulative_down))
            .unwrap_or((0, 0));
        writeln!(
            w,
            "# summary algorithm={} rounds={} maua={} bytes_up={up} bytes_down={down}",
            self.algorithm,
            sorted.len(),
            if running_max.is_finite() {
                running_max
            } else {
                0.0
            }
        )?;
        Ok(())
    }

    /// Parse a CSV written by [`MetricsReport::write_csv`]. Per-client
    /// accuracy vectors are not stored in the CSV and come back empty.
    pub fn parse_csv(reader: impl BufRead) -> Result<MetricsReport> {
        let mut report = MetricsReport::default();
        for (line_no, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with("round,") {
                continue;
            }
            if let Some(summary) = trimmed.strip_prefix('#') {
                for field in summary.split_whitespace() {
                    if let Some(alg) = field.strip_prefix("algorithm=") {
                        report.algorithm = alg.to_string();
                    }
                }
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Format(format!(
                    "line {}: expected 5 CSV fields, got {}",
                    line_no + 1,
                    fields.len()
                )));
            }
            let parse = |s: &str, what: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::Format(format!("line {}: bad {what}: {e}", line_no + 1)))
            };
            report.records.push(RoundRecord {
                round: parse(fields[0], "round")? as usize,
                client_ua: Vec::new(),
                avg_ua: parse(fields[1], "avg_ua")?,
                cumulative_up: parse(fields[3], "bytes_up")? as u64,
                cumulative_down: parse(fields[4], "bytes_down")? as u64,
            });
        }
        Ok(report)
    }
}

/// Communication speed-up of `this` relative to `base`; undefined when
/// either side never reached the target or `this` spent nothing.
pub fn speedup(base: CommCost, this: CommCost) -> Option<f64> {
    match (base, this) {
        (CommCost::Reached(base_bytes), CommCost::Reached(this_bytes)) if this_bytes > 0.0 => {
            Some(base_bytes / this_bytes)
        }
        _ => None,
    }
}

/// Round to one decimal for display, half away from zero.
pub fn round_to_tenth(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Render the comparison table (`Method | MAUA (%) | Comm | Speed-up`). The
/// speed-up baseline is the reached arm with the highest communication cost.
pub fn write_comparison_table(
    rows: &[(String, f64, CommCost)],
    w: &mut impl Write,
) -> Result<()> {
    let base = rows
        .iter()
        .filter_map(|(_, _, cost)| match cost {
            CommCost::Reached(b) => Some(*b),
            CommCost::Unreached => None,
        })
        .fold(None, |acc: Option<f64>, b| {
            Some(acc.map_or(b, |a| a.max(b)))
        });
    writeln!(w, "{:<16} {:>9} {:>16} {:>10}", "Method", "MAUA (%)", "Comm (bytes)", "Speed-up")?;
    for (method, maua, cost) in rows {
        let comm = match cost {
            CommCost::Reached(b) => format!("{b:.0}"),
            CommCost::Unreached => "-".to_string(),
        };
        let ratio = base
            .and_then(|b| speedup(CommCost::Reached(b), *cost))
            .map_or("-".to_string(), |r| format!("x{:.1}", round_to_tenth(r)));
        writeln!(
            w,
            "{:<16} {:>9.2} {:>16} {:>10}",
            method,
            maua * 100.0,
            comm,
            ratio
        )?;
    }
    Ok(())
}
