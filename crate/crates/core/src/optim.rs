//! SGD and Adam with in-gradient L2 regularization, a sparse Adam step for
//! embedding tables, and learning-rate warmup.
//!
//! L2 enters through the gradient (`g' = g + λ·w`), so under Adam it passes
//! through both moment estimates rather than acting as decoupled decay.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingTable, SparseGradient};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments for one tensor plus its step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }
}

/// `w ← w − η·(g + λ·w)`
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64, l2: f64) {
    debug_assert_eq!(params.len(), grads.len());
    for (w, g) in params.iter_mut().zip(grads) {
        *w -= lr * (g + l2 * *w);
    }
}

#[derive(Clone, Copy)]
struct Corrections {
    lr: f64,
    bc1: f64,
    bc2: f64,
}

impl Corrections {
    fn at(cfg: &AdamConfig, t: u64, lr: f64) -> Self {
        Corrections {
            lr,
            bc1: 1.0 - cfg.beta1.powf(t as f64),
            bc2: 1.0 - cfg.beta2.powf(t as f64),
        }
    }
}

#[inline]
fn adam_update(cfg: &AdamConfig, c: Corrections, w: &mut f64, m: &mut f64, v: &mut f64, g: f64) {
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    let m_hat = *m / c.bc1;
    let v_hat = *v / c.bc2;
    *w -= c.lr * m_hat / (v_hat.sqrt() + cfg.eps);
}

/// One bias-corrected Adam step on a dense tensor with `g' = g + λ·w`.
pub fn adam_step(cfg: &AdamConfig, state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64, l2: f64) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let c = Corrections::at(cfg, state.t, lr);
    for (((w, m), v), g) in params.iter_mut().zip(&mut state.m).zip(&mut state.v).zip(grads) {
        let g = g + l2 * *w;
        adam_update(cfg, c, w, m, v, g);
    }
}

/// Adam moments for every column of an embedding table. The step counter is
/// shared by the whole table and advances once per optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdamState {
    fields: Vec<AdamState>,
    t: u64,
}

impl SparseAdamState {
    pub fn for_table(table: &EmbeddingTable) -> Self {
        SparseAdamState {
            fields: (0..table.n_fields()).map(|j| AdamState::new(table.field(j).len())).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn field(&self, j: usize) -> &AdamState {
        &self.fields[j]
    }
}

/// Adam step for an embedding table from a sparse gradient.
///
/// Touched columns use `g + λ·w`. With `dense_l2` every other column takes a
/// step on the pure penalty gradient `λ·w`; without it, untouched columns and
/// their moments are left alone.
pub fn adam_sparse_step(
    cfg: &AdamConfig,
    state: &mut SparseAdamState,
    table: &mut EmbeddingTable,
    grad: &SparseGradient,
    lr: f64,
    l2: f64,
    dense_l2: bool,
) {
    let d = table.dim();
    debug_assert_eq!(grad.dim(), d);
    state.t += 1;
    let c = Corrections::at(cfg, state.t, lr);
    for j in 0..table.n_fields() {
        let fg = grad.field(j);
        let st = &mut state.fields[j];
        st.t = state.t;
        let w = table.field_mut(j);
        if dense_l2 {
            let mut next = 0;
            for col in 0..w.len() / d {
                let touched = next < fg.ids.len() && fg.ids[next] as usize == col;
                let range = col * d..(col + 1) * d;
                for (e, k) in range.enumerate() {
                    let data = if touched { fg.grads[next * d + e] } else { 0.0 };
                    let g = data + l2 * w[k];
                    adam_update(cfg, c, &mut w[k], &mut st.m[k], &mut st.v[k], g);
                }
                if touched {
                    next += 1;
                }
            }
        } else {
            for (n, &id) in fg.ids.iter().enumerate() {
                for e in 0..d {
                    let k = id as usize * d + e;
                    let g = fg.grads[n * d + e] + l2 * w[k];
                    adam_update(cfg, c, &mut w[k], &mut st.m[k], &mut st.v[k], g);
                }
            }
        }
    }
}

/// SGD counterpart of [`adam_sparse_step`].
pub fn sgd_sparse_step(table: &mut EmbeddingTable, grad: &SparseGradient, lr: f64, l2: f64, dense_l2: bool) {
    let d = table.dim();
    for j in 0..table.n_fields() {
        let fg = grad.field(j);
        let w = table.field_mut(j);
        if dense_l2 && l2 != 0.0 {
            for x in w.iter_mut() {
                *x -= lr * l2 * *x;
            }
            for (n, &id) in fg.ids.iter().enumerate() {
                let col = &mut w[id as usize * d..(id as usize + 1) * d];
                for (x, g) in col.iter_mut().zip(&fg.grads[n * d..(n + 1) * d]) {
                    *x -= lr * g;
                }
            }
        } else {
            for (n, &id) in fg.ids.iter().enumerate() {
                let col = &mut w[id as usize * d..(id as usize + 1) * d];
                sgd_step(col, &fg.grads[n * d..(n + 1) * d], lr, l2);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WarmupScope {
    DenseOnly,
    All,
}

/// Linear ramp from 0 to `target_lr` over the first `warmup_steps` updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupSchedule {
    pub target_lr: f64,
    pub warmup_steps: u64,
}

impl WarmupSchedule {
    /// Learning rate for the `step`-th update (1-based).
    pub fn lr(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.target_lr
        } else {
            self.target_lr * step as f64 / self.warmup_steps as f64
        }
    }
}

const EQUIV_LR: f64 = 1e-4;
const EQUIV_W0: f64 = 1.0;

fn gradient_stream(steps: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    (0..steps)
        .map(|_| {
            let mag = r.random_range(0.5..1.5);
            if r.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Runs two scalar Adam trajectories on the same gradient stream: one fed
/// `c·g` with weight `λ`, one fed `g` with weight `λ/c`, both with ε = 1e-12.
/// Returns the largest parameter gap along the way.
pub fn verify_adam_scaling_equivalence(c: f64, lambda: f64, steps: usize, seed: u64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::invalid(format!("scale c must be positive, got {c}")));
    }
    let cfg = AdamConfig {
        eps: 1e-12,
        ..AdamConfig::default()
    };
    let stream = gradient_stream(steps, seed);
    let (mut sa, mut sb) = (AdamState::new(1), AdamState::new(1));
    let (mut wa, mut wb) = ([EQUIV_W0], [EQUIV_W0]);
    let mut gap: f64 = 0.0;
    for g in stream {
        adam_step(&cfg, &mut sa, &mut wa, &[c * g], EQUIV_LR, lambda);
        adam_step(&cfg, &mut sb, &mut wb, &[g], EQUIV_LR, lambda / c);
        gap = gap.max((wa[0] - wb[0]).abs());
    }
    Ok(gap)
}

/// SGD version: gradients `c·g` with `(η, λ)` against gradients `g` with
/// `(c·η, λ/c)`.
pub fn verify_sgd_scaling_equivalence(c: f64, lambda: f64, steps: usize, seed: u64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::invalid(format!("scale c must be positive, got {c}")));
    }
    let stream = gradient_stream(steps, seed);
    let (mut wa, mut wb) = ([EQUIV_W0], [EQUIV_W0]);
    let mut gap: f64 = 0.0;
    for g in stream {
        sgd_step(&mut wa, &[c * g], EQUIV_LR, lambda);
        sgd_step(&mut wb, &[g], c * EQUIV_LR, lambda / c);
        gap = gap.max((wa[0] - wb[0]).abs());
    }
    Ok(gap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_examples() {
        let mut w = [1.0, -2.0];
        sgd_step(&mut w, &[0.0, 0.0], 0.1, 0.0);
        assert_eq!(w, [1.0, -2.0]);
        let mut w = [1.0];
        sgd_step(&mut w, &[0.0], 0.1, 0.1);
        assert!((w[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let cfg = AdamConfig {
            eps: 0.0,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(3);
        let mut w = [0.0, 1.0, -1.0];
        adam_step(&cfg, &mut st, &mut w, &[2.0, -0.5, 1e-3], 0.01, 0.0);
        assert!((w[0] + 0.01).abs() < 1e-15);
        assert!((w[1] - 1.01).abs() < 1e-15);
        assert!((w[2] + 1.01).abs() < 1e-15);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(2);
        let mut w = [0.3, -0.7];
        for _ in 0..50 {
            adam_step(&cfg, &mut st, &mut w, &[0.0, 0.0], 0.1, 0.0);
        }
        assert_eq!(w, [0.3, -0.7]);
        assert!(st.second_moment().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn warmup_reaches_target_exactly() {
        let s = WarmupSchedule {
            target_lr: 3e-4,
            warmup_steps: 7,
        };
        assert_eq!(s.lr(7), 3e-4);
        assert_eq!(s.lr(100), 3e-4);
        assert!(s.lr(1) < s.lr(2));
        assert!((s.lr(3) - 3e-4 * 3.0 / 7.0).abs() < 1e-20);
        let none = WarmupSchedule {
            target_lr: 1.0,
            warmup_steps: 0,
        };
        assert_eq!(none.lr(1), 1.0);
    }

    #[test]
    fn equivalence_rejects_nonpositive_scale() {
        assert!(verify_adam_scaling_equivalence(0.0, 1e-4, 10, 1).is_err());
        assert!(verify_sgd_scaling_equivalence(-1.0, 1e-4, 10, 1).is_err());
    }

    #[test]
    fn unit_scale_is_exactly_equivalent() {
        assert_eq!(verify_adam_scaling_equivalence(1.0, 1e-4, 200, 3).unwrap(), 0.0);
        assert_eq!(verify_sgd_scaling_equivalence(1.0, 1e-4, 200, 3).unwrap(), 0.0);
    }

    fn table_with(vocab: usize) -> EmbeddingTable {
        EmbeddingTable::init(&[vocab], 2, 0.5, 4).unwrap()
    }

    #[test]
    fn sparse_step_without_dense_l2() {
        let cfg = AdamConfig::default();
        let mut t = table_with(5);
        let before = t.clone();
        let mut st = SparseAdamState::for_table(&t);
        adam_sparse_step(&cfg, &mut st, &mut t, &SparseGradient::empty(2, 1), 0.1, 1e-2, false);
        assert_eq!(t, before);

        let g = SparseGradient::new(
            2,
            vec![crate::embedding::FieldGradient {
                ids: vec![3],
                counts: vec![1],
                grads: vec![0.5, -0.5],
            }],
        );
        adam_sparse_step(&cfg, &mut st, &mut t, &g, 0.1, 1e-2, false);
        for id in 0..5 {
            if id == 3 {
                assert_ne!(t.column(0, id), before.column(0, id));
            } else {
                assert_eq!(t.column(0, id), before.column(0, id));
            }
        }
        let m = st.field(0).first_moment();
        assert!(m[6] != 0.0 && m[7] != 0.0);
        assert!(m.iter().enumerate().all(|(k, &x)| k / 2 == 3 || x == 0.0));
    }

    #[test]
    fn dense_l2_shrinks_every_column() {
        let cfg = AdamConfig::default();
        let mut t = table_with(6);
        let mut st = SparseAdamState::for_table(&t);
        let mut prev = t.column_norms(0);
        for _ in 0..20 {
            adam_sparse_step(&cfg, &mut st, &mut t, &SparseGradient::empty(2, 1), 1e-3, 1e-2, true);
            let now = t.column_norms(0);
            assert!(now.iter().zip(&prev).all(|(a, b)| a < b));
            prev = now;
        }
    }

    #[test]
    fn sparse_dense_l2_matches_dense_adam() {
        let cfg = AdamConfig::default();
        let mut t = table_with(4);
        let mut flat = t.field(0).to_vec();
        let mut st = SparseAdamState::for_table(&t);
        let mut dst = AdamState::new(8);
        let g = SparseGradient::new(
            2,
            vec![crate::embedding::FieldGradient {
                ids: vec![0, 2],
                counts: vec![2, 1],
                grads: vec![0.1, 0.2, -0.3, 0.4],
            }],
        );
        let dense_g = g.to_dense(0, 4);
        for _ in 0..5 {
            adam_sparse_step(&cfg, &mut st, &mut t, &g, 1e-2, 1e-3, true);
            adam_step(&cfg, &mut dst, &mut flat, &dense_g, 1e-2, 1e-3);
        }
        assert_eq!(t.field(0), flat.as_slice());
    }
}
