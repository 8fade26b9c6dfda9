//! The three phases: gate pretraining, pruning with weight transfer, and
//! continued training, plus compact inference and the end-to-end driver.

use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, adam_step_gate, AdamConfig, AdamState};
use crate::config::RunConfig;
use crate::data::{batch_iter, stratified_split, Batch, Dataset, DatasetView, SplitSet};
use crate::error::{Error, Result};
use crate::gate::{draw_noise, expected_active_fraction, GateParams};
use crate::metrics::{auc, mean_logloss, EvalResult, PhaseTimer, PhaseTimings};
use crate::model::BackboneModel;
use crate::objective::{constraint_loss, logloss_batch, update_multipliers, ConstraintState, LossReport};
use crate::real::Real;
use crate::report::{BaselineReport, FieldRecovery, RunReport, StepTimes};

const EVAL_BATCH: usize = 4096;
const PLATEAU_EVALS: usize = 5;

/// Final per-field retention decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub keep: Vec<bool>,
    /// Noise-free gate value per field.
    pub importance: Vec<f64>,
    pub retained_count: usize,
    pub tau: f64,
}

impl PruneMask {
    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    /// Schema indices of the retained fields, ascending.
    pub fn kept_fields(&self) -> Vec<usize> {
        self.keep.iter().enumerate().filter(|(_, &k)| k).map(|(j, _)| j).collect()
    }

    /// Precision and recall of the kept set against known informative fields.
    pub fn recovery(&self, informative: &[usize]) -> FieldRecovery {
        let kept = self.kept_fields();
        let hits = kept.iter().filter(|j| informative.contains(j)).count();
        FieldRecovery {
            precision: if kept.is_empty() { 0.0 } else { hits as f64 / kept.len() as f64 },
            recall: if informative.is_empty() { 0.0 } else { hits as f64 / informative.len() as f64 },
            hits,
        }
    }
}

/// Number of fields that survive pruning ratio `tau`.
pub fn retained_count(m: usize, tau: f64) -> usize {
    (m as f64 * (1.0 - tau)).round() as usize
}

/// One pretraining step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossReport,
    pub lambda: f64,
    pub phi: f64,
}

/// One epoch of supervised training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_logloss: f64,
    pub val_auc: Option<f64>,
    pub val_logloss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput<T: Real> {
    pub model: BackboneModel<T>,
    pub gate: GateParams<T>,
    pub constraint: ConstraintState,
    pub log: Vec<StepLog>,
    pub evals: Vec<(usize, EvalResult)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput<T: Real> {
    pub model: BackboneModel<T>,
    pub log: Vec<EpochLog>,
    /// Wall time of every optimization step, seconds.
    pub step_seconds: Vec<f64>,
}

impl<T: Real> TrainOutput<T> {
    pub fn mean_step_seconds(&self) -> f64 {
        if self.step_seconds.is_empty() {
            0.0
        } else {
            self.step_seconds.iter().sum::<f64>() / self.step_seconds.len() as f64
        }
    }
}

/// Evaluates click probabilities over a whole view.
pub fn evaluate<T: Real>(
    model: &BackboneModel<T>,
    view: DatasetView<'_>,
    mask: Option<&[T]>,
) -> Result<EvalResult> {
    let mut probs = Vec::with_capacity(view.len());
    let mut labels = Vec::with_capacity(view.len());
    for batch in batch_iter(view, EVAL_BATCH, None)? {
        let logits = model.logits(&batch, mask)?;
        probs.extend(logits.iter().map(|&x| crate::real::sigmoid(x).f64()));
        labels.extend_from_slice(&batch.labels);
    }
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numerical("non-finite prediction during evaluation".into()));
    }
    Ok(EvalResult {
        auc: auc(&probs, &labels)?,
        logloss: mean_logloss(&probs, &labels)?,
        n: labels.len(),
        positives: labels.iter().filter(|&&y| y == 1).count(),
    })
}

fn gate_seed(cfg: &RunConfig) -> u64 {
    cfg.seeds.weights ^ 0x9e37_79b9_7f4a_7c15
}

/// Joint training of the backbone and the field gate on the pretraining
/// subset. Every step draws one noise vector for the batch, samples the
/// mask, takes the masked task loss plus the constraint penalty, updates
/// weights and gates with Adam, then moves the multipliers by dual ascent.
pub fn pretrain<T: Real>(
    base: &BackboneModel<T>,
    data: DatasetView<'_>,
    val: Option<DatasetView<'_>>,
    cfg: &RunConfig,
) -> Result<PretrainOutput<T>> {
    if data.is_empty() {
        return Err(Error::EmptySplit);
    }
    let phase = &cfg.pretrain;
    phase.validate("pretrain")?;
    let m = base.fields().len();
    let mut gate = GateParams::<T>::init(m, gate_seed(cfg), cfg.gate)?;
    let mut model = base.clone();
    let mut opt = AdamState::<T>::new(AdamConfig {
        weight_decay: cfg.model.weight_decay,
        ..AdamConfig::with_lr(phase.learning_rate)
    });
    let mut gate_opt = AdamState::<T>::new(AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::with_lr(phase.gate_learning_rate)
    });
    let mut constraint = ConstraintState::new(cfg.tau, phase.multiplier_lr)?;
    constraint.literal_target = cfg.compat_eq4;

    let mut noise = ChaCha8Rng::seed_from_u64(cfg.seeds.noise);
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seeds.shuffle);
    let mut log = Vec::new();
    let mut evals = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut stale = 0;
    let mut step = 0u64;

    for epoch in 0..phase.epochs {
        for batch in batch_iter(data, phase.batch_size, Some(shuffle.next_u64()))? {
            step += 1;
            let u = draw_noise::<T, _>(&mut noise, m);
            let sample = gate.sample(&u)?;
            let (logits, tape) = model.forward(&batch, Some(&sample.z))?;
            let (task, dlogits) = logloss_batch(logits.as_slice().unwrap(), &batch.labels)?;
            let (penalty, dz_penalty) = constraint_loss(&sample.z, &constraint)?;
            let mean_z = expected_active_fraction(&sample.z)?;
            let report = LossReport::new(task, penalty, mean_z);
            if !report.total.is_finite() {
                return Err(Error::Numerical(format!("non-finite pretraining loss at step {step}")));
            }
            let grads = model.backward(tape, &dlogits)?;
            let dz: Vec<T> = grads
                .mask
                .as_ref()
                .expect("masked forward yields a mask gradient")
                .iter()
                .zip(&dz_penalty)
                .map(|(&a, &b)| a + b)
                .collect();
            let dlog_alpha = gate.mask_grad(&sample, &dz)?;
            adam_step(&mut model, &grads, &mut opt)
                .map_err(|e| Error::Numerical(format!("step {step}: {e}")))?;
            adam_step_gate(&mut gate, &dlog_alpha, &mut gate_opt)
                .map_err(|e| Error::Numerical(format!("step {step}: {e}")))?;
            constraint = update_multipliers(&constraint, mean_z);
            log.push(StepLog {
                step,
                epoch,
                loss: report,
                lambda: constraint.lambda,
                phi: constraint.phi,
            });
        }

        if let Some(val) = val.filter(|_| phase.eval_every > 0 && (epoch + 1) % phase.eval_every == 0) {
            let z_det = gate.deterministic_mask();
            let res = evaluate(&model, val, Some(&z_det))?;
            evals.push((epoch, res));
            if res.logloss < best_val - 1e-6 {
                best_val = res.logloss;
                stale = 0;
            } else {
                stale += 1;
            }
            let gap = constraint.gap(expected_active_fraction(&z_det)?);
            if phase.early_stop && gap.abs() < 0.01 && stale >= PLATEAU_EVALS {
                log::info!("pretraining stopped early after epoch {epoch}");
                break;
            }
        }
    }
    model.check_finite()?;
    Ok(PretrainOutput {
        model,
        gate,
        constraint,
        log,
        evals,
    })
}

/// Keeps the `round(m (1 - tau))` fields with the largest noise-free gate
/// values (ties to the lower index) and copies their tables and first-layer
/// columns from the pretrained model. Thresholding at 0.5 followed by count
/// enforcement selects exactly this set.
pub fn prune<T: Real>(
    pretrained: &BackboneModel<T>,
    gate: &GateParams<T>,
    tau: f64,
) -> Result<(BackboneModel<T>, PruneMask)> {
    let m = pretrained.fields().len();
    if gate.len() != m {
        return Err(Error::Shape(format!("gate has {} entries for {m} model fields", gate.len())));
    }
    if m != pretrained.schema().len() {
        return Err(Error::Shape("only a model over every schema field can be pruned".into()));
    }
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::Config(format!("tau must be in [0, 1), got {tau}")));
    }
    let importance: Vec<f64> = gate.deterministic_mask().iter().map(|v| v.f64()).collect();
    let keep_n = retained_count(m, tau);
    if keep_n == 0 {
        return Err(Error::Config("all fields pruned".into()));
    }
    let above = importance.iter().filter(|&&z| z >= 0.5).count();
    if above != keep_n {
        log::debug!("threshold keeps {above} fields, enforcing {keep_n}");
    }
    if keep_n == m && tau > 0.0 {
        log::warn!("tau {tau} retains all {m} fields");
    }
    let mut ranked: Vec<usize> = (0..m).collect();
    ranked.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    let mut keep = vec![false; m];
    for &j in &ranked[..keep_n] {
        keep[j] = true;
    }
    let positions: Vec<usize> = (0..m).filter(|&j| keep[j]).collect();
    let pruned = pretrained.select_fields(&positions)?;
    Ok((
        pruned,
        PruneMask {
            keep,
            importance,
            retained_count: keep_n,
            tau,
        },
    ))
}

fn check_mask<T: Real>(model: &BackboneModel<T>, mask: &PruneMask) -> Result<()> {
    if mask.len() != model.schema().len() || mask.kept_fields() != model.fields() {
        return Err(Error::Shape("prune mask does not match the model's fields".into()));
    }
    Ok(())
}

/// Plain supervised training with a fresh optimizer.
pub fn fit<T: Real>(
    mut model: BackboneModel<T>,
    data: DatasetView<'_>,
    val: Option<DatasetView<'_>>,
    cfg: &RunConfig,
) -> Result<TrainOutput<T>> {
    if data.is_empty() {
        return Err(Error::EmptySplit);
    }
    let phase = &cfg.continued;
    phase.validate("continue")?;
    let mut opt = AdamState::<T>::new(AdamConfig {
        weight_decay: cfg.model.weight_decay,
        ..AdamConfig::with_lr(phase.learning_rate)
    });
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seeds.shuffle.wrapping_add(1));
    let mut log = Vec::with_capacity(phase.epochs);
    let mut step_seconds = Vec::new();
    for epoch in 0..phase.epochs {
        let mut loss_sum = 0.0;
        for batch in batch_iter(data, phase.batch_size, Some(shuffle.next_u64()))? {
            let start = Instant::now();
            let loss = train_step(&mut model, &batch, &mut opt)?;
            step_seconds.push(start.elapsed().as_secs_f64());
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite training loss in epoch {epoch}")));
            }
            loss_sum += loss;
        }
        let (val_auc, val_logloss) = match val.filter(|_| phase.eval_every > 0 && (epoch + 1) % phase.eval_every == 0) {
            Some(v) => {
                let r = evaluate(&model, v, None)?;
                (Some(r.auc), Some(r.logloss))
            }
            None => (None, None),
        };
        log.push(EpochLog {
            epoch,
            train_logloss: loss_sum / data.len() as f64,
            val_auc,
            val_logloss,
        });
    }
    model.check_finite()?;
    Ok(TrainOutput {
        model,
        log,
        step_seconds,
    })
}

fn train_step<T: Real>(model: &mut BackboneModel<T>, batch: &Batch, opt: &mut AdamState<T>) -> Result<f64> {
    let (logits, tape) = model.forward(batch, None)?;
    let (loss, dlogits) = logloss_batch(logits.as_slice().unwrap(), &batch.labels)?;
    let grads = model.backward(tape, &dlogits)?;
    adam_step(model, &grads, opt)?;
    Ok(loss)
}

/// Continued training of the pruned model on the data left after removing
/// the pretraining subset. With `cfg.from_scratch` the pruned architecture
/// is reinitialized instead of keeping the transferred weights.
pub fn continue_train<T: Real>(
    pruned: &BackboneModel<T>,
    mask: &PruneMask,
    remaining: DatasetView<'_>,
    val: Option<DatasetView<'_>>,
    cfg: &RunConfig,
) -> Result<TrainOutput<T>> {
    check_mask(pruned, mask)?;
    let start = if cfg.from_scratch {
        BackboneModel::init_fields(
            pruned.schema_arc(),
            pruned.fields().to_vec(),
            pruned.embed_dim(),
            pruned.hidden(),
            cfg.seeds.weights,
        )?
    } else {
        pruned.clone()
    };
    fit(start, remaining, val, cfg)
}

/// Click probabilities of the compact model for full-schema inputs; pruned
/// fields are never read.
pub fn infer<T: Real>(model: &BackboneModel<T>, mask: &PruneMask, batch: &Batch) -> Result<Vec<T>> {
    check_mask(model, mask)?;
    model.predict(batch)
}

/// Every artifact of an end-to-end run.
#[derive(Debug, Clone)]
pub struct RunArtifacts<T: Real> {
    pub split: SplitSet,
    pub base: BackboneModel<T>,
    pub pretrained: PretrainOutput<T>,
    pub pruned: BackboneModel<T>,
    pub mask: PruneMask,
    pub continued: TrainOutput<T>,
    pub baseline: Option<TrainOutput<T>>,
    pub report: RunReport,
}

pub fn base_model<T: Real>(data: &Dataset, cfg: &RunConfig) -> Result<BackboneModel<T>> {
    BackboneModel::init(data.schema_arc(), cfg.model.embed_dim, &cfg.model.hidden, cfg.seeds.weights)
}

/// Split, pretrain, prune, continue and evaluate on the test split; with
/// `cfg.with_baseline` also trains an unpruned model on the full training
/// portion for comparison.
pub fn run_all<T: Real>(data: &Dataset, cfg: &RunConfig) -> Result<RunArtifacts<T>> {
    cfg.validate()?;
    let split = stratified_split(data, cfg.split.ratios(), cfg.split.pretrain_size, cfg.seeds.split)?;
    let base = base_model::<T>(data, cfg)?;
    let timer = PhaseTimer::new();
    let val = data.view_rows(&split.val);
    let (pretrained, _) = timer.time("pretrain", || pretrain(&base, data.view_rows(&split.pretrain), Some(val), cfg))?;
    let pretrained = pretrained?;
    let (pruned, mask) = prune(&pretrained.model, &pretrained.gate, cfg.tau)?;
    let (continued, _) =
        timer.time("continue", || continue_train(&pruned, &mask, data.view_rows(&split.train), Some(val), cfg))?;
    let continued = continued?;
    let (test, inference_s) = timer.time("inference", || evaluate(&continued.model, data.view_rows(&split.test), None))?;
    let test = test?;
    let timings = PhaseTimings::new(timer.seconds("pretrain"), timer.seconds("continue"), inference_s);

    let baseline = if cfg.with_baseline {
        let full = split.full_train();
        let b_timer = PhaseTimer::new();
        let (out, _) = b_timer.time("train", || fit(base.clone(), data.view_rows(&full), Some(val), cfg))?;
        let out = out?;
        let (eval, inf) = b_timer.time("inference", || evaluate(&out.model, data.view_rows(&split.test), None))?;
        Some((out, eval?, PhaseTimings::new(0.0, b_timer.seconds("train"), inf)))
    } else {
        None
    };

    let report = RunReport {
        m: mask.len(),
        m_prime: mask.retained_count,
        tau: cfg.tau,
        retained_fields: mask.kept_fields().iter().map(|&j| data.schema().field(j).name.clone()).collect(),
        test,
        recovery: cfg.synthetic.as_ref().map(|s| mask.recovery(&s.informative)),
        timings,
        step_times: StepTimes {
            continued_s: continued.mean_step_seconds(),
            baseline_s: baseline.as_ref().map(|b| b.0.mean_step_seconds()),
        },
        baseline: baseline.as_ref().map(|(_, eval, t)| BaselineReport {
            test: *eval,
            timings: *t,
            tt_ratio: if t.total_s > 0.0 { timings.total_s / t.total_s } else { f64::NAN },
        }),
    };
    Ok(RunArtifacts {
        split,
        base,
        pretrained,
        pruned,
        mask,
        continued,
        baseline: baseline.map(|b| b.0),
        report,
    })
}
