//! Independent oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use std::sync::Arc;

use lightfmp_core::data::{Batch, Cell, Dataset, FieldSchema, FieldSpec};
use lightfmp_core::gate::{GateConstants, GateParams};
use lightfmp_core::metrics::auc;
use lightfmp_core::model::BackboneModel;
use lightfmp_core::objective::{constraint_loss, logloss_batch, ConstraintState};
use lightfmp_core::pipeline::prune;
use lightfmp_core::real::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Below this magnitude differences are compared absolutely; f64 roundoff in
/// a central difference is around `1e-16 * |L| / h`.
pub const FD_FLOOR: f64 = 1e-6;

/// Random schema with a mix of categorical and continuous fields.
pub fn random_schema(rng: &mut ChaCha8Rng, m: usize) -> Arc<FieldSchema> {
    let fields = (0..m)
        .map(|j| {
            if rng.random_bool(0.3) {
                FieldSpec::continuous(format!("c{j}"))
            } else {
                FieldSpec::categorical(format!("f{j}"), rng.random_range(2..6))
            }
        })
        .collect();
    Arc::new(FieldSchema::new(fields).unwrap())
}

pub fn random_dataset(rng: &mut ChaCha8Rng, schema: Arc<FieldSchema>, rows: usize) -> Dataset {
    let mut cells = Vec::with_capacity(rows * schema.len());
    let mut labels = Vec::with_capacity(rows);
    for i in 0..rows {
        for f in schema.fields() {
            cells.push(if f.cardinality > 1 {
                Cell::Index(rng.random_range(0..f.cardinality))
            } else {
                Cell::Value(rng.random_range(-2.0..2.0))
            });
        }
        // keep both classes present
        labels.push(if i < 2 { i as u8 } else { rng.random_range(0..2) });
    }
    Dataset::new("random", schema, cells, labels).unwrap()
}

pub fn whole_batch(data: &Dataset) -> Batch {
    let positions: Vec<usize> = (0..data.len()).collect();
    Batch::from_view(&data.view(), &positions)
}

/// Overwrites every parameter with `U(-1, 1)` so that pre-activations sit
/// well away from the ReLU kink.
pub fn scramble<T: Real>(model: &mut BackboneModel<T>, rng: &mut ChaCha8Rng) {
    let (tables, layers) = model.params_mut();
    for t in tables {
        t.mapv_inplace(|_| T::of(rng.random_range(-1.0..1.0)));
    }
    for l in layers {
        l.weight.mapv_inplace(|_| T::of(rng.random_range(-1.0..1.0)));
        l.bias.mapv_inplace(|_| T::of(rng.random_range(-0.5..0.5)));
    }
}

pub struct GradCase {
    pub model: BackboneModel<f64>,
    pub gate: GateParams<f64>,
    pub u: Vec<f64>,
    pub batch: Batch,
    pub constraint: ConstraintState,
}

impl GradCase {
    /// Small random configuration: m <= 4, D <= 3, widths <= 8, batch <= 16.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.random_range(2..=4);
        let d = rng.random_range(1..=3);
        let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(1..=8)).collect();
        let schema = random_schema(&mut rng, m);
        let rows = rng.random_range(2..=16);
        let data = random_dataset(&mut rng, schema.clone(), rows);
        let mut model = BackboneModel::init(schema, d, &hidden, seed).unwrap();
        scramble(&mut model, &mut rng);

        // keep every stretched gate value away from the clamp boundaries
        let c = GateConstants::default();
        let (mut log_alpha, mut u) = (Vec::new(), Vec::new());
        while log_alpha.len() < m {
            let la: f64 = rng.random_range(-2.0..2.0);
            let uj: f64 = rng.random_range(0.05..0.95);
            let s = 1.0 / (1.0 + (-((uj / (1.0 - uj)).ln() + la) / c.beta).exp());
            let sb = s * (c.zeta - c.gamma) + c.gamma;
            if sb.abs() > 1e-2 && (sb - 1.0).abs() > 1e-2 {
                log_alpha.push(la);
                u.push(uj);
            }
        }
        let mut constraint = ConstraintState::new(rng.random_range(0.1..0.9), 0.01).unwrap();
        constraint.lambda = rng.random_range(-2.0..2.0);
        constraint.phi = rng.random_range(0.0..2.0);
        Self {
            model,
            gate: GateParams::from_log_alpha(log_alpha, c).unwrap(),
            u,
            batch: whole_batch(&data),
            constraint,
        }
    }

    /// Total objective recomputed from scratch at the current parameters.
    pub fn objective(&self) -> f64 {
        let smp = self.gate.sample(&self.u).unwrap();
        let logits = self.model.logits(&self.batch, Some(&smp.z)).unwrap();
        let (task, _) = logloss_batch(logits.as_slice().unwrap(), &self.batch.labels).unwrap();
        let (penalty, _) = constraint_loss(&smp.z, &self.constraint).unwrap();
        task + penalty
    }

    /// Largest relative disagreement between the library's analytic
    /// gradients and central differences, over every parameter and gate.
    pub fn max_relative_error(&mut self) -> f64 {
        let smp = self.gate.sample(&self.u).unwrap();
        let (logits, tape) = self.model.forward(&self.batch, Some(&smp.z)).unwrap();
        let (_, dlogits) = logloss_batch(logits.as_slice().unwrap(), &self.batch.labels).unwrap();
        let (_, dz_penalty) = constraint_loss(&smp.z, &self.constraint).unwrap();
        let grads = self.model.backward(tape, &dlogits).unwrap();
        let dz: Vec<f64> = grads.mask.as_ref().unwrap().iter().zip(&dz_penalty).map(|(a, b)| a + b).collect();
        let dlog_alpha = self.gate.mask_grad(&smp, &dz).unwrap();

        let mut worst = 0.0f64;
        let mut check = |analytic: f64, numeric: f64| {
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(err);
        };

        let n_tables = self.model.embeddings().len();
        for t in 0..n_tables {
            let (rows, cols) = self.model.embeddings()[t].dim();
            for r in 0..rows {
                for c in 0..cols {
                    let fd = self.central(|m, delta| m.params_mut().0[t][[r, c]] += delta);
                    check(grads.embeddings[t].get(r as u32, c), fd);
                }
            }
        }
        for l in 0..self.model.layers().len() {
            let (rows, cols) = self.model.layers()[l].weight.dim();
            for r in 0..rows {
                for c in 0..cols {
                    let fd = self.central(|m, delta| m.params_mut().1[l].weight[[r, c]] += delta);
                    check(grads.layers[l].weight[[r, c]], fd);
                }
                let fd = self.central(|m, delta| m.params_mut().1[l].bias[r] += delta);
                check(grads.layers[l].bias[r], fd);
            }
        }
        for j in 0..self.gate.len() {
            let base = self.gate.log_alpha[j];
            self.gate.log_alpha[j] = base + FD_STEP;
            let up = self.objective();
            self.gate.log_alpha[j] = base - FD_STEP;
            let down = self.objective();
            self.gate.log_alpha[j] = base;
            check(dlog_alpha[j], (up - down) / (2.0 * FD_STEP));
        }
        worst
    }

    fn central(&mut self, poke: impl Fn(&mut BackboneModel<f64>, f64)) -> f64 {
        poke(&mut self.model, FD_STEP);
        let up = self.objective();
        poke(&mut self.model, -2.0 * FD_STEP);
        let down = self.objective();
        poke(&mut self.model, FD_STEP);
        (up - down) / (2.0 * FD_STEP)
    }
}

/// Compares masked full-model predictions against pruned-model predictions
/// under a forced binary gate. Returns the largest absolute difference in
/// probability over `rows` random inputs.
pub fn prune_equivalence_gap(seed: u64, rows: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(2..=8);
    let d = rng.random_range(1..=6);
    let hidden: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=32)).collect();
    let schema = random_schema(&mut rng, m);
    let mut model = BackboneModel::<f32>::init(schema.clone(), d, &hidden, seed).unwrap();
    scramble(&mut model, &mut rng);

    let kept = rng.random_range(1..=m);
    let mut on = vec![false; m];
    let mut order: Vec<usize> = (0..m).collect();
    for i in 0..kept {
        let k = rng.random_range(i..m);
        order.swap(i, k);
        on[order[i]] = true;
    }
    let log_alpha = on.iter().map(|&b| if b { 20.0f32 } else { -20.0 }).collect();
    let gate = GateParams::from_log_alpha(log_alpha, GateConstants::default()).unwrap();
    let z = gate.deterministic_mask();
    assert!(z.iter().all(|&v| v == 0.0 || v == 1.0), "forced gates must be binary");

    let tau = 1.0 - kept as f64 / m as f64;
    let (pruned, mask) = prune(&model, &gate, tau).unwrap();
    assert_eq!(mask.keep, on);

    let data = random_dataset(&mut rng, schema, rows);
    let batch = whole_batch(&data);
    let full = model.logits(&batch, Some(&z)).unwrap();
    let small = pruned.logits(&batch, None).unwrap();
    full.iter()
        .zip(small.iter())
        .map(|(&a, &b)| (sigmoid64(a as f64) - sigmoid64(b as f64)).abs())
        .fold(0.0, f64::max)
}

fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Reference one-hot logistic regression restricted to `fields`, fit by
/// full-batch gradient descent on `train`; returns AUC on `test`.
pub fn logistic_auc(train: &Dataset, test: &Dataset, fields: &[usize]) -> f64 {
    let schema = train.schema();
    let offsets: Vec<usize> = fields
        .iter()
        .scan(0, |acc, &j| {
            let o = *acc;
            *acc += schema.field(j).cardinality as usize;
            Some(o)
        })
        .collect();
    let width: usize = fields.iter().map(|&j| schema.field(j).cardinality as usize).sum();
    let features = |data: &Dataset, i: usize| -> Vec<usize> {
        fields
            .iter()
            .zip(&offsets)
            .map(|(&j, &o)| match data.row(i)[j] {
                Cell::Index(x) => o + x as usize,
                Cell::Value(_) => panic!("logistic oracle expects categorical fields"),
            })
            .collect()
    };
    let train_x: Vec<Vec<usize>> = (0..train.len()).map(|i| features(train, i)).collect();
    let mut w = vec![0.0f64; width];
    let mut b = 0.0f64;
    let n = train.len() as f64;
    for _ in 0..300 {
        let mut gw = vec![0.0f64; width];
        let mut gb = 0.0;
        for (x, &y) in train_x.iter().zip(train.labels()) {
            let logit = b + x.iter().map(|&k| w[k]).sum::<f64>();
            let r = sigmoid64(logit) - y as f64;
            gb += r;
            for &k in x {
                gw[k] += r;
            }
        }
        b -= 2.0 * gb / n;
        for (wk, g) in w.iter_mut().zip(&gw) {
            *wk -= 2.0 * fields.len() as f64 * g / n;
        }
    }
    let scores: Vec<f64> = (0..test.len())
        .map(|i| b + features(test, i).iter().map(|&k| w[k]).sum::<f64>())
        .collect();
    auc(&scores, test.labels()).unwrap()
}

/// Pairwise AUC counted with integer wins and ties.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut twice_credit, mut pairs) = (0u64, 0u64);
    for (&si, _) in scores.iter().zip(labels).filter(|&(_, &y)| y == 1) {
        for (&sj, _) in scores.iter().zip(labels).filter(|&(_, &y)| y == 0) {
            pairs += 1;
            twice_credit += match si.partial_cmp(&sj).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    twice_credit as f64 / (2 * pairs) as f64
}
