//! AUC, logloss and phase timing.

use std::cell::{Cell, RefCell};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auc: f64,
    pub logloss: f64,
    pub n: usize,
    pub positives: usize,
}

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::AucUndefined(format!("{pos} positives and {neg} negatives")));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC from average ranks; ties count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start..end (0-based) share the average 1-based rank
        let avg_rank = (start + end + 1) as f64 / 2.0;
        let tied_pos = order[start..end].iter().filter(|&&i| labels[i] == 1).count();
        rank_sum_pos += avg_rank * tied_pos as f64;
        start = end;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Quadratic reference: wins plus half-ties over all positive/negative pairs.
pub fn auc_bruteforce(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut credit = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] == 1 {
                continue;
            }
            if si > sj {
                credit += 1.0;
            } else if si == sj {
                credit += 0.5;
            }
        }
    }
    Ok(credit / (pos as f64 * neg as f64))
}

pub const PROB_CLIP: f64 = 1e-7;

/// Mean binary cross-entropy with probabilities clipped to
/// `[1e-7, 1 - 1e-7]`.
pub fn mean_logloss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Shape(format!("{} probabilities for {} labels", probs.len(), labels.len())));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Wall-clock seconds per training phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub pretrain_s: f64,
    pub continued_s: f64,
    pub total_s: f64,
    pub inference_s: f64,
}

impl PhaseTimings {
    pub fn new(pretrain_s: f64, continued_s: f64, inference_s: f64) -> Self {
        let (pretrain_s, continued_s) = (round_ms(pretrain_s), round_ms(continued_s));
        Self {
            pretrain_s,
            continued_s,
            total_s: pretrain_s + continued_s,
            inference_s: round_ms(inference_s),
        }
    }
}

pub fn round_ms(secs: f64) -> f64 {
    (secs * 1000.0).round() / 1000.0
}

/// Single-level phase timer on a monotonic clock.
#[derive(Debug, Default)]
pub struct PhaseTimer {
    active: Cell<bool>,
    records: RefCell<Vec<(String, f64)>>,
}

impl PhaseTimer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Runs `body` and records its elapsed seconds under `label`. Phases do
    /// not nest.
    pub fn time<R>(&self, label: &str, body: impl FnOnce() -> R) -> Result<(R, f64)> {
        if self.active.replace(true) {
            return Err(Error::Timing(format!("phase {label:?} started inside another phase")));
        }
        let start = Instant::now();
        let out = body();
        let secs = start.elapsed().as_secs_f64();
        self.active.set(false);
        self.records.borrow_mut().push((label.to_string(), secs));
        Ok((out, secs))
    }

    pub fn records(&self) -> Vec<(String, f64)> {
        self.records.borrow().clone()
    }

    /// Sum of all recorded phases with this label.
    pub fn seconds(&self, label: &str) -> f64 {
        self.records.borrow().iter().filter(|(l, _)| l == label).map(|(_, s)| s).sum()
    }

    pub fn total(&self) -> f64 {
        self.records.borrow().iter().map(|(_, s)| s).sum()
    }
}

/// Times one body on a fresh timer.
pub fn time_phase<R>(label: &str, body: impl FnOnce() -> R) -> (R, f64) {
    PhaseTimer::new().time(label, body).expect("fresh timer has no open phase")
}
