//! Adam with bias correction and classic (coupled) L2 decay.
//!
//! Embedding tables are updated lazily: only rows present in the batch get
//! their moments, decay and parameters touched. The step counter is shared
//! by all tensors of one optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::GateParams;
use crate::model::{BackboneModel, Gradients};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 coefficient added to weight gradients (not biases, not gates).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    slots: Vec<Option<Moments<T>>>,
}

struct StepScalars<T> {
    lr: T,
    b1: T,
    b2: T,
    c1: T,
    c2: T,
    eps: T,
    decay: T,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn scalars(&self, decay: bool) -> StepScalars<T> {
        let t = self.step as i32;
        let c = &self.config;
        StepScalars {
            lr: T::of(c.learning_rate),
            b1: T::of(c.beta1),
            b2: T::of(c.beta2),
            c1: T::of(1.0 - c.beta1.powi(t)),
            c2: T::of(1.0 - c.beta2.powi(t)),
            eps: T::of(c.epsilon),
            decay: if decay { T::of(c.weight_decay) } else { T::zero() },
        }
    }

    fn slot(&mut self, slot: usize, len: usize) -> &mut Moments<T> {
        if self.slots.len() <= slot {
            self.slots.resize(slot + 1, None);
        }
        let entry = self.slots[slot].get_or_insert_with(|| Moments {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        });
        debug_assert_eq!(entry.m.len(), len, "moment slot {slot} changed shape");
        entry
    }

    /// Starts a new optimization step. Call once before the tensor updates
    /// belonging to that step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Dense update of one tensor.
    pub fn update_dense(&mut self, slot: usize, param: &mut [T], grad: &[T], decay: bool) {
        assert_eq!(param.len(), grad.len(), "parameter and gradient shapes differ");
        let k = self.scalars(decay);
        let mom = self.slot(slot, param.len());
        for i in 0..param.len() {
            adam_update(&k, &mut param[i], grad[i], &mut mom.m[i], &mut mom.v[i]);
        }
    }

    /// Updates only the listed rows of a row-major `rows x width` table;
    /// `grads` holds one gradient row per listed row.
    pub fn update_rows(
        &mut self,
        slot: usize,
        param: &mut [T],
        width: usize,
        rows: &[u32],
        grads: &[T],
        decay: bool,
    ) {
        assert_eq!(rows.len() * width, grads.len(), "row gradient shape mismatch");
        let k = self.scalars(decay);
        let mom = self.slot(slot, param.len());
        for (r, g) in rows.iter().zip(grads.chunks(width)) {
            let base = *r as usize * width;
            for d in 0..width {
                let i = base + d;
                adam_update(&k, &mut param[i], g[d], &mut mom.m[i], &mut mom.v[i]);
            }
        }
    }
}

#[inline]
fn adam_update<T: Real>(k: &StepScalars<T>, w: &mut T, g: T, m: &mut T, v: &mut T) {
    let g = g + k.decay * *w;
    *m = k.b1 * *m + (T::one() - k.b1) * g;
    *v = k.b2 * *v + (T::one() - k.b2) * g * g;
    let m_hat = *m / k.c1;
    let v_hat = *v / k.c2;
    *w -= k.lr * m_hat / (v_hat.sqrt() + k.eps);
}

fn check_finite<T: Real>(path: &str, values: impl IntoIterator<Item = T>) -> Result<()> {
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient in {path}")));
    }
    Ok(())
}

/// One Adam step over every model parameter. Fails before touching any
/// parameter if a gradient is not finite.
pub fn adam_step<T: Real>(
    model: &mut BackboneModel<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    if grads.embeddings.len() != model.embeddings().len() || grads.layers.len() != model.layers().len() {
        return Err(Error::Shape("gradients do not match model structure".into()));
    }
    for (p, g) in grads.embeddings.iter().enumerate() {
        check_finite(&format!("embed.{}", model.fields()[p]), g.values.iter().copied())?;
    }
    for (l, g) in grads.layers.iter().enumerate() {
        check_finite(&format!("mlp.{l}.weight"), g.weight.iter().copied())?;
        check_finite(&format!("mlp.{l}.bias"), g.bias.iter().copied())?;
    }

    state.begin_step();
    let n_tables = model.embeddings().len();
    let dim = model.embed_dim();
    let (tables, layers) = model.params_mut();
    for (p, (table, g)) in tables.iter_mut().zip(&grads.embeddings).enumerate() {
        let grad_rows = g.values.as_standard_layout();
        state.update_rows(
            p,
            table.as_slice_mut().expect("standard layout"),
            dim,
            &g.rows,
            grad_rows.as_slice().unwrap(),
            true,
        );
    }
    for (l, (layer, g)) in layers.iter_mut().zip(&grads.layers).enumerate() {
        let slot = n_tables + 2 * l;
        let gw = g.weight.as_standard_layout();
        state.update_dense(slot, layer.weight.as_slice_mut().unwrap(), gw.as_slice().unwrap(), true);
        state.update_dense(
            slot + 1,
            layer.bias.as_slice_mut().unwrap(),
            g.bias.as_slice().unwrap(),
            false,
        );
    }
    Ok(())
}

/// One Adam step on the gate's log-alpha vector; never decayed.
pub fn adam_step_gate<T: Real>(gate: &mut GateParams<T>, grad: &[T], state: &mut AdamState<T>) -> Result<()> {
    if grad.len() != gate.log_alpha.len() {
        return Err(Error::Shape("gate gradient length mismatch".into()));
    }
    check_finite("gate.log_alpha", grad.iter().copied())?;
    state.begin_step();
    state.update_dense(0, &mut gate.log_alpha, grad, false);
    Ok(())
}
