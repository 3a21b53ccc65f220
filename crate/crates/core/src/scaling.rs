//! Batch-size scaling rules for learning rates and L2 weight.
//!
//! Scaling the batch by `s = target / base` maps the base hyperparameters as
//! follows (`η_d` dense LR, `η_e` embedding LR, `λ` embedding L2):
//!
//! | rule        | η_d    | η_e    | λ      |
//! |-------------|--------|--------|--------|
//! | `none`      | 1      | 1      | 1      |
//! | `sqrt`      | √s     | √s     | √s     |
//! | `sqrt_star` | √s     | √s     | 1      |
//! | `linear`    | s      | s      | 1      |
//! | `n2_lambda` | s      | 1      | s²     |
//! | `cowclip`   | √s     | 1      | s      |
//!
//! Hand-tuned values that depart from a rule live in [`Preset`] tables and
//! are reported as overrides. The Monte Carlo estimators at the bottom check
//! the two arguments behind these rules: the covariance of plain SGD updates,
//! and the expected update of a rarely seen id.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    None,
    Sqrt,
    SqrtStar,
    Linear,
    N2Lambda,
    #[serde(rename = "cowclip")]
    CowClip,
}

impl Rule {
    pub const ALL: [Rule; 6] = [
        Rule::None,
        Rule::Sqrt,
        Rule::SqrtStar,
        Rule::Linear,
        Rule::N2Lambda,
        Rule::CowClip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rule::None => "none",
            Rule::Sqrt => "sqrt",
            Rule::SqrtStar => "sqrt_star",
            Rule::Linear => "linear",
            Rule::N2Lambda => "n2_lambda",
            Rule::CowClip => "cowclip",
        }
    }

    /// Exponents of `s` applied to (dense LR, embedding LR, λ), in halves.
    fn half_powers(self) -> (i32, i32, i32) {
        match self {
            Rule::None => (0, 0, 0),
            Rule::Sqrt => (1, 1, 1),
            Rule::SqrtStar => (1, 1, 0),
            Rule::Linear => (2, 2, 0),
            Rule::N2Lambda => (2, 0, 4),
            Rule::CowClip => (1, 0, 2),
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Rule::ALL
            .into_iter()
            .find(|r| r.name() == key)
            .or(match key.as_str() {
                "sqrt*" => Some(Rule::SqrtStar),
                "n2" | "empirical" => Some(Rule::N2Lambda),
                _ => None,
            })
            .ok_or_else(|| Error::invalid(format!("unknown scaling rule '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseHyperparams {
    pub base_batch: u64,
    pub lr_dense: f64,
    pub lr_embed: f64,
    pub l2: f64,
}

impl Default for BaseHyperparams {
    fn default() -> Self {
        BaseHyperparams {
            base_batch: 1024,
            lr_dense: 1e-4,
            lr_embed: 1e-4,
            l2: 1e-4,
        }
    }
}

impl BaseHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.base_batch == 0 {
            return Err(Error::invalid("base batch must be positive"));
        }
        for (name, v) in [("lr_dense", self.lr_dense), ("lr_embed", self.lr_embed), ("l2", self.l2)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPlan {
    pub rule: Rule,
    pub factor: f64,
    pub base_batch: u64,
    pub target_batch: f64,
    pub lr_dense: f64,
    pub lr_embed: f64,
    pub l2: f64,
    /// Multiplier for constant clip thresholds (global, field-wise, column-wise).
    /// Adaptive thresholds need no adjustment.
    pub clip_value_factor: f64,
}

impl ScalingPlan {
    /// The plan's values as the base of a further scaling step.
    pub fn as_base(&self) -> BaseHyperparams {
        BaseHyperparams {
            base_batch: self.target_batch.round() as u64,
            lr_dense: self.lr_dense,
            lr_embed: self.lr_embed,
            l2: self.l2,
        }
    }
}

fn pow_half(s: f64, half: i32) -> f64 {
    match half {
        0 => 1.0,
        1 => s.sqrt(),
        2 => s,
        4 => s * s,
        h => s.powf(h as f64 / 2.0),
    }
}

pub fn scale(rule: Rule, base: &BaseHyperparams, s: f64) -> Result<ScalingPlan> {
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::invalid(format!("scale factor must be positive, got {s}")));
    }
    base.validate()?;
    let (hd, he, hl) = rule.half_powers();
    Ok(ScalingPlan {
        rule,
        factor: s,
        base_batch: base.base_batch,
        target_batch: base.base_batch as f64 * s,
        lr_dense: base.lr_dense * pow_half(s, hd),
        lr_embed: base.lr_embed * pow_half(s, he),
        l2: base.l2 * pow_half(s, hl),
        clip_value_factor: if rule == Rule::None {
            1.0
        } else {
            clip_value_scale(1.0, s, ClipScaleMode::Sqrt)
        },
    })
}

pub fn scale_to_batch(rule: Rule, base: &BaseHyperparams, target_batch: u64) -> Result<ScalingPlan> {
    if target_batch == 0 {
        return Err(Error::invalid("target batch must be positive"));
    }
    base.validate()?;
    scale(rule, base, target_batch as f64 / base.base_batch as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipScaleMode {
    Linear,
    Sqrt,
}

pub fn clip_value_scale(base_clip: f64, s: f64, mode: ClipScaleMode) -> f64 {
    match mode {
        ClipScaleMode::Linear => base_clip * s,
        ClipScaleMode::Sqrt => base_clip * s.sqrt(),
    }
}

/// Hand-tuned departure from a rule at one batch size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PresetOverride {
    pub target_batch: u64,
    pub lr_dense: Option<f64>,
    pub lr_embed: Option<f64>,
    pub l2: Option<f64>,
    pub clip_r_zeta: Option<(f64, f64)>,
}

impl PresetOverride {
    fn at(target_batch: u64) -> Self {
        PresetOverride {
            target_batch,
            lr_dense: None,
            lr_embed: None,
            l2: None,
            clip_r_zeta: None,
        }
    }
}

/// A rule plus the base values and tuned overrides of one published setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub rule: Rule,
    pub base: BaseHyperparams,
    pub clip_r_zeta: (f64, f64),
    pub overrides: Vec<PresetOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetPlan {
    pub plan: ScalingPlan,
    pub r: f64,
    pub zeta: f64,
    /// Names of the values taken from the override table instead of the rule.
    pub overridden: Vec<String>,
}

impl Preset {
    pub fn criteo_cowclip() -> Self {
        Preset {
            name: "criteo-cowclip".into(),
            rule: Rule::CowClip,
            base: BaseHyperparams {
                lr_dense: 8e-4,
                ..BaseHyperparams::default()
            },
            clip_r_zeta: (1.0, 1e-5),
            overrides: Vec::new(),
        }
    }

    pub fn avazu_cowclip() -> Self {
        let mut overrides: Vec<PresetOverride> = [4096u64, 8192, 16384, 32768, 65536]
            .into_iter()
            .map(|b| PresetOverride {
                clip_r_zeta: Some((1.0, 1e-4)),
                ..PresetOverride::at(b)
            })
            .collect();
        overrides.push(PresetOverride {
            l2: Some(9.6e-3),
            lr_dense: Some(16e-4),
            clip_r_zeta: Some((1.0, 1e-4)),
            ..PresetOverride::at(131072)
        });
        Preset {
            name: "avazu-cowclip".into(),
            rule: Rule::CowClip,
            base: BaseHyperparams::default(),
            clip_r_zeta: (10.0, 1e-3),
            overrides,
        }
    }

    pub fn empirical_n2_lambda() -> Self {
        Preset {
            name: "empirical-n2-lambda".into(),
            rule: Rule::N2Lambda,
            base: BaseHyperparams::default(),
            clip_r_zeta: (1.0, 1e-4),
            overrides: vec![PresetOverride {
                l2: Some(1.28e-2),
                ..PresetOverride::at(8192)
            }],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "criteo-cowclip" => Ok(Self::criteo_cowclip()),
            "avazu-cowclip" => Ok(Self::avazu_cowclip()),
            "empirical-n2-lambda" => Ok(Self::empirical_n2_lambda()),
            _ => Err(Error::invalid(format!("unknown preset '{name}'"))),
        }
    }

    pub fn plan(&self, target_batch: u64) -> Result<PresetPlan> {
        let mut plan = scale_to_batch(self.rule, &self.base, target_batch)?;
        let (mut r, mut zeta) = self.clip_r_zeta;
        let mut overridden = Vec::new();
        if let Some(o) = self.overrides.iter().find(|o| o.target_batch == target_batch) {
            let mut set = |slot: &mut f64, v: Option<f64>, name: &str| {
                if let Some(v) = v {
                    *slot = v;
                    overridden.push(name.to_string());
                }
            };
            set(&mut plan.lr_dense, o.lr_dense, "lr_dense");
            set(&mut plan.lr_embed, o.lr_embed, "lr_embed");
            set(&mut plan.l2, o.l2, "l2");
            if let Some((or, oz)) = o.clip_r_zeta {
                r = or;
                zeta = oz;
            }
        }
        Ok(PresetPlan { plan, r, zeta, overridden })
    }
}

/// A fixed set of per-sample gradients `ĝ_i` at the current weights. One SGD
/// step on a batch drawn with replacement moves the weights by
/// `Δw = -η/b · Σ_{i∈B} ĝ_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceProblem {
    dim: usize,
    grads: Vec<f64>,
}

impl CovarianceProblem {
    /// Loss `½‖w − x_i‖²` at `w = 0` with `x_i` drawn from an anisotropic Gaussian.
    pub fn quadratic(dim: usize, n_samples: usize, seed: u64) -> Result<Self> {
        Self::check(dim, n_samples)?;
        let mut rng = rng::seeded(seed);
        let mut grads = Vec::with_capacity(dim * n_samples);
        for _ in 0..n_samples {
            for k in 0..dim {
                let z: f64 = rng.sample(StandardNormal);
                let x = 0.5 + (k + 1) as f64 * z;
                grads.push(-x);
            }
        }
        Ok(CovarianceProblem { dim, grads })
    }

    /// Logistic loss at a random weight vector with Gaussian features.
    pub fn logistic(dim: usize, n_samples: usize, seed: u64) -> Result<Self> {
        Self::check(dim, n_samples)?;
        let mut rng = rng::seeded(seed);
        let w: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5).collect();
        let mut grads = Vec::with_capacity(dim * n_samples);
        for _ in 0..n_samples {
            let x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let p = 1.0 / (1.0 + (-crate::linalg::dot(&w, &x)).exp());
            let y = if rng.random_bool(p) { 1.0 } else { 0.0 };
            grads.extend(x.iter().map(|xi| (p - y) * xi));
        }
        Ok(CovarianceProblem { dim, grads })
    }

    fn check(dim: usize, n_samples: usize) -> Result<()> {
        if dim == 0 || n_samples < 2 {
            return Err(Error::invalid("covariance problem needs dim >= 1 and at least 2 samples"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_samples(&self) -> usize {
        self.grads.len() / self.dim
    }

    pub fn gradient(&self, i: usize) -> &[f64] {
        &self.grads[i * self.dim..(i + 1) * self.dim]
    }

    /// Population covariance of the per-sample gradients (divisor N).
    pub fn gradient_covariance(&self) -> Vec<Vec<f64>> {
        let n = self.n_samples();
        let d = self.dim;
        let mut mean = vec![0.0; d];
        for i in 0..n {
            crate::linalg::axpy(1.0 / n as f64, self.gradient(i), &mut mean);
        }
        let mut cov = vec![vec![0.0; d]; d];
        for i in 0..n {
            let g = self.gradient(i);
            for a in 0..d {
                for c in 0..d {
                    cov[a][c] += (g[a] - mean[a]) * (g[c] - mean[c]) / n as f64;
                }
            }
        }
        cov
    }

    /// Exact covariance of Δw for batches drawn with replacement: `η²/b · Σ`.
    pub fn update_covariance(&self, batch_size: usize, eta: f64) -> Vec<Vec<f64>> {
        let k = eta * eta / batch_size as f64;
        self.gradient_covariance()
            .into_iter()
            .map(|row| row.into_iter().map(|v| v * k).collect())
            .collect()
    }
}

pub fn trace(m: &[Vec<f64>]) -> f64 {
    m.iter().enumerate().map(|(i, row)| row[i]).sum()
}

/// Monte Carlo sample covariance of single-step SGD updates.
pub fn estimate_update_covariance(
    problem: &CovarianceProblem,
    batch_size: usize,
    eta: f64,
    n_trials: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if batch_size == 0 || n_trials < 2 {
        return Err(Error::invalid("need a positive batch size and at least 2 trials"));
    }
    let d = problem.dim();
    let n = problem.n_samples();
    let mut rng = rng::seeded(seed);
    let mut sum = vec![0.0; d];
    let mut outer = vec![vec![0.0; d]; d];
    let mut dw = vec![0.0; d];
    for _ in 0..n_trials {
        dw.iter_mut().for_each(|x| *x = 0.0);
        for _ in 0..batch_size {
            let i = rng.random_range(0..n);
            crate::linalg::axpy(-eta / batch_size as f64, problem.gradient(i), &mut dw);
        }
        for a in 0..d {
            sum[a] += dw[a];
            for c in 0..d {
                outer[a][c] += dw[a] * dw[c];
            }
        }
    }
    let t = n_trials as f64;
    Ok((0..d)
        .map(|a| (0..d).map(|c| (outer[a][c] - sum[a] * sum[c] / t) / (t - 1.0)).collect())
        .collect())
}

/// Expected per-trial update of one id under a fixed unit gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateFrequencyEstimate {
    /// One step of batch `s·b` with the embedding LR held at `η`.
    pub big_batch_fixed: f64,
    /// One step of batch `s·b` with the embedding LR scaled to `s·η`.
    pub big_batch_linear: f64,
    /// `s` consecutive steps of batch `b` at `η`.
    pub small_batches: f64,
}

impl UpdateFrequencyEstimate {
    pub fn fixed_ratio(&self) -> f64 {
        self.big_batch_fixed / self.small_batches
    }

    pub fn linear_ratio(&self) -> f64 {
        self.big_batch_linear / self.small_batches
    }
}

/// Closed form of [`expected_update_frequency_check`].
pub fn expected_update_frequency(p: f64, b: u64, s: u64, eta: f64) -> UpdateFrequencyEstimate {
    let small = 1.0 - (1.0 - p).powi(b as i32);
    let big = 1.0 - (1.0 - p).powi((b * s) as i32);
    UpdateFrequencyEstimate {
        big_batch_fixed: eta * big,
        big_batch_linear: s as f64 * eta * big,
        small_batches: s as f64 * eta * small,
    }
}

/// Simulates an id that each sample carries with probability `p`. The update
/// is `η·g` (with `g = 1`) in every step whose batch contains the id. The
/// big batch is the union of the `s` small batches of the same trial.
pub fn expected_update_frequency_check(
    p: f64,
    b: u64,
    s: u64,
    eta: f64,
    n_trials: usize,
    seed: u64,
) -> Result<UpdateFrequencyEstimate> {
    if !(0.0..=1.0).contains(&p) || b == 0 || s == 0 || n_trials == 0 {
        return Err(Error::invalid("need p in [0, 1] and positive b, s, n_trials"));
    }
    let occurrences = Binomial::new(b, p).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng::seeded(seed);
    let mut small_hits = 0u64;
    let mut big_hits = 0u64;
    for _ in 0..n_trials {
        let mut present = 0u64;
        for _ in 0..s {
            if occurrences.sample(&mut rng) > 0 {
                present += 1;
            }
        }
        small_hits += present;
        big_hits += u64::from(present > 0);
    }
    let t = n_trials as f64;
    Ok(UpdateFrequencyEstimate {
        big_batch_fixed: eta * big_hits as f64 / t,
        big_batch_linear: s as f64 * eta * big_hits as f64 / t,
        small_batches: eta * small_hits as f64 / t,
    })
}


#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::*;

    fn rule() -> impl Strategy<Value = Rule> {
        prop::sample::select(Rule::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn scaling_composes(r in rule(), s1 in 0.1..64.0f64, s2 in 0.1..64.0f64) {
            let base = BaseHyperparams::default();
            let two = scale(r, &scale(r, &base, s1).unwrap().as_base(), s2).unwrap();
            let one = scale(r, &base, s1 * s2).unwrap();
            for (a, b) in [(two.lr_dense, one.lr_dense), (two.lr_embed, one.lr_embed), (two.l2, one.l2)] {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs());
            }
        }

        #[test]
        fn unit_factor_is_identity(r in rule(), lr in 1e-6..1.0f64, l2 in 1e-8..1.0f64) {
            let base = BaseHyperparams { base_batch: 512, lr_dense: lr, lr_embed: lr * 2.0, l2 };
            let p = scale(r, &base, 1.0).unwrap();
            prop_assert_eq!(p.as_base(), base);
            prop_assert_eq!(p.clip_value_factor, 1.0);
        }

        #[test]
        fn update_frequency_ratios_are_bounded(p in 1e-6..0.5f64, b in 1u64..512, s in 1u64..32) {
            let e = expected_update_frequency(p, b, s, 1.0);
            prop_assert!(e.fixed_ratio() <= 1.0 + 1e-12);
            prop_assert!(e.fixed_ratio() >= 1.0 / s as f64 - 1e-12);
            prop_assert!((e.linear_ratio() - s as f64 * e.fixed_ratio()).abs() < 1e-9);
        }
    }
}
