//! Named verification suites with fixed tolerances.

use std::time::Instant;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::grad_check::{grad_check, GRAD_CHECK_TOLERANCE};
use crate::clip::{clip_by_threshold, cowclip, cowclip_threshold};
use crate::data::{self, BatchMode, Dataset, PresenceMode, Schema};
use crate::embedding::{EmbeddingTable, FieldGradient, SparseGradient};
use crate::error::{Error, Result};
use crate::linalg::{dot, l2_norm};
use crate::models::ModelKind;
use crate::optim;
use crate::rng;
use crate::scaling::{self, CovarianceProblem};

pub const SUITES: [&str; 7] = [
    "grad-check",
    "adam-equivalence",
    "sgd-equivalence",
    "cowclip-contract",
    "presence-prob",
    "covariance",
    "update-frequency",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub suite: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Runs the named suites, or all of them for an empty selector.
pub fn verify(selector: &[String], seed: u64) -> Result<Vec<SuiteOutcome>> {
    let names: Vec<String> = if selector.is_empty() {
        SUITES.iter().map(|s| s.to_string()).collect()
    } else {
        selector.to_vec()
    };
    if let Some(bad) = names.iter().find(|n| !SUITES.contains(&n.as_str())) {
        return Err(Error::invalid(format!(
            "unknown suite '{bad}' (known: {})",
            SUITES.join(", ")
        )));
    }
    names.iter().map(|n| run_suite(n, seed)).collect()
}

fn run_suite(name: &str, seed: u64) -> Result<SuiteOutcome> {
    let start = Instant::now();
    let (passed, detail) = match name {
        "grad-check" => suite_grad_check(seed)?,
        "adam-equivalence" => suite_adam(seed)?,
        "sgd-equivalence" => suite_sgd(seed)?,
        "cowclip-contract" => suite_cowclip(seed),
        "presence-prob" => suite_presence(seed)?,
        "covariance" => suite_covariance(seed)?,
        "update-frequency" => suite_update_frequency(seed)?,
        _ => unreachable!("suite names validated by caller"),
    };
    Ok(SuiteOutcome {
        suite: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn suite_grad_check(seed: u64) -> Result<(bool, String)> {
    let mut ok = true;
    let mut parts = Vec::new();
    for kind in ModelKind::ALL {
        let r = grad_check(kind, seed, 100)?;
        ok &= r.passed();
        parts.push(format!("{kind} {:.2e}", r.max_rel_error));
    }
    Ok((ok, format!("max rel error < {GRAD_CHECK_TOLERANCE:e}: {}", parts.join(", "))))
}

pub const ADAM_EQUIV_TOLERANCE: f64 = 1e-6;
pub const SGD_EQUIV_TOLERANCE: f64 = 1e-15;

fn suite_adam(seed: u64) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for c in [2.0, 10.0, 100.0] {
        worst = worst.max(optim::verify_adam_scaling_equivalence(c, 1e-4, 200, seed)?);
    }
    Ok((worst < ADAM_EQUIV_TOLERANCE, format!("max divergence {worst:.3e} (< {ADAM_EQUIV_TOLERANCE:e})")))
}

fn suite_sgd(seed: u64) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for c in [2.0, 10.0, 100.0] {
        worst = worst.max(optim::verify_sgd_scaling_equivalence(c, 1e-4, 200, seed)?);
    }
    Ok((worst <= SGD_EQUIV_TOLERANCE, format!("max divergence {worst:.3e} (<= {SGD_EQUIV_TOLERANCE:e})")))
}

fn suite_cowclip(seed: u64) -> (bool, String) {
    let mut r = rng::seeded(seed);
    let mut failures = 0;
    let n = 10_000;
    for _ in 0..n {
        let d = r.random_range(1..=8);
        let scale_w = 10f64.powf(r.random_range(-7.0..1.0));
        let scale_g = 10f64.powf(r.random_range(-4.0..2.0));
        let w: Vec<f64> = (0..d).map(|_| scale_w * r.sample::<f64, _>(StandardNormal)).collect();
        let g: Vec<f64> = (0..d).map(|_| scale_g * r.sample::<f64, _>(StandardNormal)).collect();
        let cnt = r.random_range(1..=64);
        let (rr, zeta) = (r.random_range(0.1..10.0), 10f64.powf(r.random_range(-6.0..-2.0)));
        let mut table = EmbeddingTable::zeros(&[1], d);
        table.column_mut(0, 0).copy_from_slice(&w);
        let mut grad = SparseGradient::new(
            d,
            vec![FieldGradient {
                ids: vec![0],
                counts: vec![cnt],
                grads: g.clone(),
            }],
        );
        cowclip(&table, &mut grad, rr, zeta);
        let out = grad.column(0, 0).to_vec();
        let t = cowclip_threshold(cnt, l2_norm(&w), rr, zeta);
        let bound = l2_norm(&out) <= t + 1e-12;
        let gn = l2_norm(&g);
        let direction = gn == 0.0 || (dot(&out, &g) / (l2_norm(&out) * gn) - 1.0).abs() < 1e-12;
        let identical = gn > t || out == g;
        let mut again = out.clone();
        clip_by_threshold(&mut again, t);
        let idempotent = again == out || (l2_norm(&again) - l2_norm(&out)).abs() <= 1e-15 * t;
        if !(bound && direction && identical && idempotent) {
            failures += 1;
        }
    }
    (failures == 0, format!("{failures} of {n} random columns violated the contract"))
}

/// Monte Carlo presence rate of one id in batches drawn with replacement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PresenceEstimate {
    pub p: f64,
    pub batch_size: u64,
    pub rate: f64,
    pub std_error: f64,
    pub exact: f64,
    pub approx: f64,
}

impl PresenceEstimate {
    /// Within three standard errors, or exactly equal when the standard error is zero.
    pub fn consistent(&self) -> bool {
        if self.std_error == 0.0 {
            self.rate == self.exact
        } else {
            (self.rate - self.exact).abs() <= 3.0 * self.std_error
        }
    }
}

/// Builds a one-field dataset of `n_rows` where exactly `round(p·n_rows)` rows
/// carry id 1, then counts batches containing it.
pub fn presence_monte_carlo(p: f64, batch_size: usize, n_rows: usize, n_trials: usize, seed: u64) -> Result<PresenceEstimate> {
    let carriers = (p * n_rows as f64).round() as usize;
    if carriers == 0 || carriers > n_rows || (carriers as f64 - p * n_rows as f64).abs() > 1e-9 {
        return Err(Error::invalid("p·n_rows must be a positive integer no larger than n_rows"));
    }
    let schema = Schema::standard(0, &[2])?;
    let ids = (0..n_rows).map(|i| u32::from(i < carriers)).collect();
    let ds = Dataset::from_parts(schema, vec![0; n_rows], Vec::new(), ids, None)?;
    let mut batches = data::make_batches(&ds, batch_size, BatchMode::WithReplacement, seed)?;
    let mut hits = 0usize;
    for _ in 0..n_trials {
        let b = batches.next().expect("endless");
        if (0..b.size()).any(|i| b.ids(i)[0] == 1) {
            hits += 1;
        }
    }
    let rate = hits as f64 / n_trials as f64;
    Ok(PresenceEstimate {
        p,
        batch_size: batch_size as u64,
        rate,
        std_error: (rate * (1.0 - rate) / n_trials as f64).sqrt(),
        exact: data::batch_presence_probability(p, batch_size as u64, PresenceMode::Exact),
        approx: data::batch_presence_probability(p, batch_size as u64, PresenceMode::Approx),
    })
}

fn suite_presence(seed: u64) -> Result<(bool, String)> {
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, &p) in [1e-4, 1e-2, 0.5].iter().enumerate() {
        for (m, &b) in [64usize, 4096].iter().enumerate() {
            let e = presence_monte_carlo(p, b, 20_000, 20_000, rng::derive_seed(seed, (k * 2 + m) as u64))?;
            ok &= e.consistent();
            if b as f64 * p <= 0.1 {
                let rel = (e.approx - e.exact).abs() / e.exact;
                ok &= rel < 0.06;
            }
            parts.push(format!("p={p:e} b={b}: {:.4} vs {:.4}", e.rate, e.exact));
        }
    }
    Ok((ok, parts.join("; ")))
}

pub const COVARIANCE_TRIALS: usize = 20_000;

fn suite_covariance(seed: u64) -> Result<(bool, String)> {
    let prob = CovarianceProblem::quadratic(5, 1000, rng::derive_seed(seed, 0))?;
    let small = scaling::estimate_update_covariance(&prob, 16, 0.1, COVARIANCE_TRIALS, rng::derive_seed(seed, 1))?;
    let big = scaling::estimate_update_covariance(&prob, 64, 0.2, COVARIANCE_TRIALS, rng::derive_seed(seed, 2))?;
    let ratio = scaling::trace(&big) / scaling::trace(&small);
    Ok(((0.9..=1.1).contains(&ratio), format!("trace ratio {ratio:.4} (in [0.9, 1.1])")))
}

fn suite_update_frequency(seed: u64) -> Result<(bool, String)> {
    let s = 16u64;
    let e = scaling::expected_update_frequency_check(1e-4, 64, s, 1.0, 200_000, seed)?;
    let (f, l) = (e.fixed_ratio(), e.linear_ratio());
    let sf = s as f64;
    let ok = (0.9..=1.1).contains(&f) && (sf * 0.85..=sf * 1.15).contains(&l);
    Ok((ok, format!("fixed-lr ratio {f:.4}, linear ratio {l:.3}")))
}
