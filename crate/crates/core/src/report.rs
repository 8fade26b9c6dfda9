//! JSON and CSV artifacts: run report, mask file, training logs and the
//! importance heat map.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::FieldSchema;
use crate::error::{Error, Result};
use crate::metrics::{EvalResult, PhaseTimings};
use crate::pipeline::{EpochLog, PruneMask, StepLog};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldRecovery {
    pub precision: f64,
    pub recall: f64,
    pub hits: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTimes {
    /// Mean seconds per continued-training step.
    pub continued_s: f64,
    /// Mean seconds per step of the unpruned baseline.
    pub baseline_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub test: EvalResult,
    pub timings: PhaseTimings,
    /// Pruned-pipeline total training time over baseline training time.
    pub tt_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub m: usize,
    pub m_prime: usize,
    pub tau: f64,
    pub retained_fields: Vec<String>,
    pub test: EvalResult,
    pub recovery: Option<FieldRecovery>,
    pub timings: PhaseTimings,
    pub step_times: StepTimes,
    pub baseline: Option<BaselineReport>,
}

impl RunReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::artifact(path, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| Error::artifact(path, e.to_string()))
    }

    /// The report with every wall-clock field zeroed, for reproducibility
    /// comparisons.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.timings = PhaseTimings::default();
        r.step_times = StepTimes {
            continued_s: 0.0,
            baseline_s: r.step_times.baseline_s.map(|_| 0.0),
        };
        if let Some(b) = r.baseline.as_mut() {
            b.timings = PhaseTimings::default();
            b.tt_ratio = 0.0;
        }
        r
    }
}

/// On-disk form of a [`PruneMask`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub m: usize,
    pub m_prime: usize,
    pub tau: f64,
    pub fields: Vec<String>,
    pub keep: Vec<bool>,
    pub importance: Vec<f64>,
    pub schema_hash: String,
}

impl MaskFile {
    pub fn new(mask: &PruneMask, schema: &FieldSchema) -> Self {
        Self {
            m: mask.len(),
            m_prime: mask.retained_count,
            tau: mask.tau,
            fields: schema.names(),
            keep: mask.keep.clone(),
            importance: mask.importance.clone(),
            schema_hash: format!("{:016x}", schema.hash()),
        }
    }

    pub fn to_mask(&self) -> Result<PruneMask> {
        let kept = self.keep.iter().filter(|&&k| k).count();
        if self.keep.len() != self.m || self.importance.len() != self.m || kept != self.m_prime {
            return Err(Error::Shape("mask file is internally inconsistent".into()));
        }
        Ok(PruneMask {
            keep: self.keep.clone(),
            importance: self.importance.clone(),
            retained_count: self.m_prime,
            tau: self.tau,
        })
    }

    pub fn check_schema(&self, schema: &FieldSchema) -> Result<()> {
        if self.schema_hash != format!("{:016x}", schema.hash()) {
            return Err(Error::Schema("mask was produced under a different schema".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::artifact(path, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| Error::artifact(path, e.to_string()))
    }
}

/// Step-level pretraining log.
pub fn training_log_csv(rows: &[StepLog]) -> String {
    let mut out = String::from("step,task_loss,constraint_loss,total,mean_z,lambda,phi\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.loss.task_loss, r.loss.constraint_loss, r.loss.total, r.loss.mean_z, r.lambda, r.phi
        );
    }
    out
}

/// Epoch-level continued-training log.
pub fn epoch_log_csv(rows: &[EpochLog]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("epoch,train_logloss,val_auc,val_logloss\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_logloss, opt(r.val_auc), opt(r.val_logloss));
    }
    out
}

/// Min-max normalization; a constant vector maps to 0.5 everywhere.
pub fn normalize_importance(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Heat-map CSV: one `importance` row and one `keep` row per mask, one
/// column per field. Rows are ordered by tau, then by input order.
pub fn heatmap_csv(masks: &[MaskFile]) -> Result<String> {
    let first = masks.first().ok_or_else(|| Error::Config("heatmap needs at least one mask".into()))?;
    if masks.iter().any(|mf| mf.schema_hash != first.schema_hash || mf.fields != first.fields) {
        return Err(Error::Schema("masks come from different schemas".into()));
    }
    let mut ordered: Vec<&MaskFile> = masks.iter().collect();
    ordered.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    let mut out = format!("kind,tau,{}\n", first.fields.join(","));
    for kind in ["importance", "keep"] {
        for mf in &ordered {
            let cells: Vec<String> = if kind == "importance" {
                normalize_importance(&mf.importance).iter().map(|v| v.to_string()).collect()
            } else {
                mf.keep.iter().map(|&k| u8::from(k).to_string()).collect()
            };
            let _ = writeln!(out, "{kind},{},{}", mf.tau, cells.join(","));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FieldSpec;

    fn schema() -> FieldSchema {
        FieldSchema::new((0..3).map(|j| FieldSpec::categorical(format!("f{j}"), 2)).collect()).unwrap()
    }

    fn mask(tau: f64, importance: Vec<f64>, keep: Vec<bool>) -> MaskFile {
        let n = keep.iter().filter(|&&k| k).count();
        MaskFile::new(
            &PruneMask {
                keep,
                importance,
                retained_count: n,
                tau,
            },
            &schema(),
        )
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_importance(&[0.0, 0.5, 2.0]), vec![0.0, 0.25, 1.0]);
        assert_eq!(normalize_importance(&[0.3, 0.3]), vec![0.5, 0.5]);
    }

    #[test]
    fn heatmap_layout() {
        let a = mask(0.5, vec![0.0, 1.0, 0.5], vec![false, true, true]);
        let b = mask(0.0, vec![0.7, 0.7, 0.7], vec![true, true, true]);
        let csv = heatmap_csv(&[a, b]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "kind,tau,f0,f1,f2");
        assert_eq!(lines[1], "importance,0,0.5,0.5,0.5");
        assert_eq!(lines[2], "importance,0.5,0,1,0.5");
        assert_eq!(lines[3], "keep,0,1,1,1");
        assert_eq!(lines[4], "keep,0.5,0,1,1");
    }

    #[test]
    fn heatmap_schema_mismatch() {
        let a = mask(0.5, vec![0.0, 1.0, 0.5], vec![false, true, true]);
        let mut b = a.clone();
        b.schema_hash = "0".into();
        assert!(matches!(heatmap_csv(&[a, b]), Err(Error::Schema(_))));
    }

    #[test]
    fn mask_file_consistency() {
        let mf = mask(0.5, vec![0.0, 1.0, 0.5], vec![false, true, true]);
        assert_eq!(mf.to_mask().unwrap().kept_fields(), vec![1, 2]);
        mf.check_schema(&schema()).unwrap();
        let mut bad = mf.clone();
        bad.m_prime = 3;
        assert!(bad.to_mask().is_err());
    }
}
