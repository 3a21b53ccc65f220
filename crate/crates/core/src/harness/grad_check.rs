//! Central finite-difference check of every model's backward pass.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Schema;
use crate::error::Result;
use crate::models::{forward_raw, loss_and_backward, L2Scope, Model, ModelConfig, ModelKind};
use crate::rng::{self, Rng};

/// Denominator floor of [`relative_error`].
/// A central difference with `h = 1e-6` carries roundoff near `1e-16·L/h`, so
/// partials smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-4;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorError {
    pub name: String,
    pub max_rel_error: f64,
    pub n_checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub model: ModelKind,
    pub trials: usize,
    /// Random configurations discarded because a perturbation crossed a ReLU
    /// kink or saturated the probability clamp.
    pub resampled: usize,
    pub tensors: Vec<TensorError>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_CHECK_TOLERANCE
    }
}

/// One fixed input for a model.
#[derive(Debug, Clone)]
pub struct CheckInput {
    pub ids: Vec<u32>,
    pub dense: Vec<f64>,
    pub labels: Vec<u8>,
    pub batch: usize,
    pub l2: f64,
    pub scope: L2Scope,
}

const MAX_RESAMPLES: usize = 100_000;

/// Runs `n_trials` random small configurations of `kind`.
pub fn grad_check(kind: ModelKind, seed: u64, n_trials: usize) -> Result<GradCheckReport> {
    let mut per_tensor: Vec<TensorError> = Vec::new();
    let mut resampled = 0;
    let mut done = 0;
    let mut attempt = 0u64;
    while done < n_trials {
        let mut r = rng::seeded(rng::derive_seed(seed, attempt));
        attempt += 1;
        let (model, input) = random_instance(kind, &mut r)?;
        match check_instance(&model, &input)? {
            None => {
                resampled += 1;
                if resampled > MAX_RESAMPLES {
                    return Err(crate::Error::invalid("gradient check kept hitting ReLU kinks"));
                }
            }
            Some(errors) => {
                for e in errors {
                    match per_tensor.iter_mut().find(|t| t.name == e.name) {
                        Some(t) => {
                            t.max_rel_error = t.max_rel_error.max(e.max_rel_error);
                            t.n_checked += e.n_checked;
                        }
                        None => per_tensor.push(e),
                    }
                }
                done += 1;
            }
        }
    }
    let max_rel_error = per_tensor.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        model: kind,
        trials: n_trials,
        resampled,
        tensors: per_tensor,
        max_rel_error,
    })
}

fn random_instance(kind: ModelKind, r: &mut Rng) -> Result<(Model, CheckInput)> {
    let nf = r.random_range(1..=4);
    let vocab: Vec<usize> = (0..nf).map(|_| r.random_range(2..=5)).collect();
    let n_dense = r.random_range(0..=2);
    let schema = Schema::standard(n_dense, &vocab)?;
    let n_hidden = r.random_range(1..=2);
    let cfg = ModelConfig {
        kind,
        embed_dim: r.random_range(1..=3),
        hidden: (0..n_hidden).map(|_| r.random_range(2..=6)).collect(),
        cross_layers: r.random_range(1..=3),
        embed_sigma: 0.5,
    };
    let mut model = Model::new(cfg, &schema, r.random())?;
    for v in &mut model.dense.values {
        *v += 0.1 * r.sample::<f64, _>(StandardNormal);
    }
    if let Some(w) = model.wide.as_mut() {
        for j in 0..w.n_fields() {
            for x in w.field_mut(j) {
                *x = 0.5 * r.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let batch = r.random_range(1..=4);
    let ids = (0..batch).flat_map(|_| vocab.iter().map(|&v| r.random_range(0..v as u32)).collect::<Vec<_>>()).collect();
    let dense = (0..batch * n_dense).map(|_| r.random_range(0.0..2.0)).collect();
    let labels = (0..batch).map(|_| u8::from(r.random_bool(0.5))).collect();
    let l2 = if r.random_bool(0.5) { 0.0 } else { r.random_range(0.0..0.1) };
    let scope = if r.random_bool(0.5) { L2Scope::Embeddings } else { L2Scope::All };
    Ok((
        model,
        CheckInput {
            ids,
            dense,
            labels,
            batch,
            l2,
            scope,
        },
    ))
}

enum Slot {
    Dense(usize),
    Embed(usize, usize),
    Wide(usize, usize),
}

fn get(model: &Model, s: &Slot) -> f64 {
    match *s {
        Slot::Dense(k) => model.dense.values[k],
        Slot::Embed(j, k) => model.embed.field(j)[k],
        Slot::Wide(j, k) => model.wide.as_ref().expect("wide table").field(j)[k],
    }
}

fn set(model: &mut Model, s: &Slot, v: f64) {
    match *s {
        Slot::Dense(k) => model.dense.values[k] = v,
        Slot::Embed(j, k) => model.embed.field_mut(j)[k] = v,
        Slot::Wide(j, k) => model.wide.as_mut().expect("wide table").field_mut(j)[k] = v,
    }
}

/// Compares every analytic partial derivative with a central difference.
/// Returns `None` when the instance sits too close to a ReLU kink or the
/// probability clamp for the check to be meaningful.
pub fn check_instance(model: &Model, input: &CheckInput) -> Result<Option<Vec<TensorError>>> {
    let base = forward_raw(model, &input.ids, &input.dense, input.batch)?;
    let eps = crate::metrics::DEFAULT_PROB_EPS;
    if base.min_kink_distance() < 1e-6 || base.probs.iter().any(|&p| p < 1e3 * eps || p > 1.0 - 1e3 * eps) {
        return Ok(None);
    }
    let pattern = base.relu_pattern();
    let (_, grads) = loss_and_backward(model, &input.labels, &base, input.l2, input.scope)?;

    let mut groups: Vec<(String, Vec<(Slot, f64)>)> = Vec::new();
    for (name, range) in model.dense.layout.tensors() {
        let items = range.map(|k| (Slot::Dense(k), grads.dense.values[k])).collect();
        groups.push((name, items));
    }
    for j in 0..model.embed.n_fields() {
        let dense = grads.embed.to_dense(j, model.embed.vocab_sizes()[j]);
        groups.push((
            format!("embed.f{j}"),
            dense.into_iter().enumerate().map(|(k, g)| (Slot::Embed(j, k), g)).collect(),
        ));
    }
    if let (Some(w), Some(g)) = (&model.wide, &grads.wide) {
        for j in 0..w.n_fields() {
            let dense = g.to_dense(j, w.vocab_sizes()[j]);
            groups.push((
                format!("wide.f{j}"),
                dense.into_iter().enumerate().map(|(k, g)| (Slot::Wide(j, k), g)).collect(),
            ));
        }
    }

    let mut probe = model.clone();
    let mut out = Vec::new();
    for (name, items) in groups {
        let mut worst: f64 = 0.0;
        let n = items.len();
        for (slot, analytic) in items {
            let theta = get(model, &slot);
            let h = 1e-6 * theta.abs().max(1.0);
            let mut eval = |v: f64| -> Result<Option<f64>> {
                set(&mut probe, &slot, v);
                let c = forward_raw(&probe, &input.ids, &input.dense, input.batch)?;
                if c.relu_pattern() != pattern {
                    return Ok(None);
                }
                Ok(Some(loss_and_backward(&probe, &input.labels, &c, input.l2, input.scope)?.0))
            };
            let plus = eval(theta + h)?;
            let minus = eval(theta - h)?;
            set(&mut probe, &slot, theta);
            let (Some(lp), Some(lm)) = (plus, minus) else {
                return Ok(None);
            };
            let numeric = (lp - lm) / (2.0 * h);
            worst = worst.max(relative_error(analytic, numeric));
        }
        out.push(TensorError {
            name,
            max_rel_error: worst,
            n_checked: n,
        });
    }
    Ok(Some(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn every_head_passes_a_few_trials() {
        for kind in ModelKind::ALL {
            let r = grad_check(kind, 5, 10).unwrap();
            assert!(r.passed(), "{kind}: {:?}", r.tensors);
        }
    }

    #[test]
    fn reproducible_per_seed() {
        let a = grad_check(ModelKind::Dcn, 9, 5).unwrap();
        let b = grad_check(ModelKind::Dcn, 9, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        let mut r = rng::seeded(1);
        let (model, input) = random_instance(ModelKind::WideDeep, &mut r).unwrap();
        let mut shifted = input.clone();
        shifted.l2 = 0.0;
        // analytic gradients at λ=0 against a loss computed with λ>0 must disagree
        let base = forward_raw(&model, &input.ids, &input.dense, input.batch).unwrap();
        let (_, g0) = loss_and_backward(&model, &input.labels, &base, 0.0, L2Scope::All).unwrap();
        let (_, g1) = loss_and_backward(&model, &input.labels, &base, 0.05, L2Scope::All).unwrap();
        assert_ne!(g0.dense.values, g1.dense.values);
    }
}
