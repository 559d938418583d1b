//! Per-epoch training records, serialized as JSON lines.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the state before the first update.
    pub epoch: usize,
    pub fsl: Option<f64>,
    pub kd: Option<f64>,
    pub ce: Option<f64>,
    /// Weighted sum of the present terms.
    pub total: f64,
    pub val_f1: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    /// A non-finite loss or activation; the best earlier epoch is kept.
    Diverged,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::EarlyStop => "early-stop",
            StopReason::MaxEpochs => "max-epochs",
            StopReason::Diverged => "diverged",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// "teacher", or the adaptation method name.
    pub kind: String,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub stop_reason: StopReason,
    /// Source-domain samples that reached the training loop.
    pub source_samples_read: usize,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
enum Line<'a> {
    Epoch(&'a EpochRecord),
    Summary { kind: &'a str, best_epoch: usize, best_val_f1: f64, stop_reason: StopReason, source_samples_read: usize },
}

impl TrainingTrace {
    /// One JSON object per epoch followed by a summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(&Line::Epoch(r)).expect("epoch record serializes"));
            out.push('\n');
        }
        let summary = Line::Summary {
            kind: &self.kind,
            best_epoch: self.best_epoch,
            best_val_f1: self.best_val_f1,
            stop_reason: self.stop_reason,
            source_samples_read: self.source_samples_read,
        };
        out.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
        out.push('\n');
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    /// Copy with wall-clock times zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut t = self.clone();
        for r in &mut t.records {
            r.wall_seconds = 0.0;
        }
        t
    }

    pub fn val_history(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.val_f1).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_has_one_line_per_epoch_plus_summary() {
        let rec = |epoch| EpochRecord { epoch, fsl: None, kd: Some(0.1), ce: None, total: 0.1, val_f1: 0.5, wall_seconds: 1.0 };
        let t = TrainingTrace {
            kind: "kd".into(),
            records: vec![rec(0), rec(1)],
            best_epoch: 0,
            best_val_f1: 0.5,
            stop_reason: StopReason::MaxEpochs,
            source_samples_read: 0,
        };
        let text = t.to_jsonl();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["type"], "epoch");
        assert_eq!(lines[1]["epoch"], 1);
        assert!(lines[1]["fsl"].is_null());
        assert_eq!(lines[2]["type"], "summary");
        assert_eq!(lines[2]["stop_reason"], "max-epochs");
        assert_eq!(t.without_timing().records[0].wall_seconds, 0.0);
    }
}
