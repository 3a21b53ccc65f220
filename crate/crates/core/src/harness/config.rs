//! Experiment configuration and its flat `key = value` file format.
//!
//! ```text
//! # comments start with '#'
//! model.kind = deepfm
//! train.batch_size = 4096
//! train.rule = cowclip
//! clip.variant = cowclip
//! ```
//!
//! Unknown keys are rejected. Lists are comma separated.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clip::ClipConfig;
use crate::data::{BatchMode, IdDistribution};
use crate::error::{Error, Result};
use crate::models::{ModelConfig, ModelKind};
use crate::optim::AdamConfig;
use crate::scaling::{BaseHyperparams, Rule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic,
    /// Dataset container written by `gen-data`.
    Container(PathBuf),
    /// Criteo-layout TSV (label, 13 integer, 26 categorical columns).
    CriteoTsv(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub n_samples: usize,
    pub n_dense: usize,
    pub vocab_sizes: Vec<usize>,
    pub ids: IdDistribution,
    /// Logit offset of the synthetic click model.
    pub click_bias: f64,
    /// Per-field weight of the synthetic click model.
    pub click_weight: f64,
    pub click_pair_weight: f64,
    /// Seed of the synthetic generator; the run seed when absent.
    pub seed: Option<u64>,
    pub top_k: Option<usize>,
    pub test_fraction: f64,
    pub max_rows: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            n_samples: 200_000,
            n_dense: 2,
            vocab_sizes: vec![10_000; 6],
            ids: IdDistribution::Zipf { exponent: 1.1 },
            click_bias: -1.0,
            click_weight: 1.0,
            click_pair_weight: 0.0,
            seed: None,
            top_k: None,
            test_fraction: 0.1,
            max_rows: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub adam: AdamConfig,
    pub warmup_epochs: f64,
    pub dense_l2: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::Adam,
            adam: AdamConfig::default(),
            warmup_epochs: 1.0,
            dense_l2: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub base: BaseHyperparams,
    pub rule: Rule,
    pub batch_mode: BatchMode,
    pub eval_batch: usize,
    pub optim: OptimConfig,
    pub clip: ClipConfig,
    pub seed: u64,
    pub sweep_batch_sizes: Vec<usize>,
    pub sweep_rules: Vec<Rule>,
    /// Apply `clip` under every swept rule instead of the cowclip rule only.
    pub sweep_clip_all: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            model: ModelConfig::new(ModelKind::DeepFm),
            epochs: 10,
            batch_size: 1024,
            base: BaseHyperparams::default(),
            rule: Rule::None,
            batch_mode: BatchMode::ShuffleEpoch,
            eval_batch: 8192,
            optim: OptimConfig::default(),
            clip: ClipConfig::cowclip(ClipConfig::DEFAULT_R, ClipConfig::DEFAULT_ZETA),
            seed: 1234,
            sweep_batch_sizes: vec![256, 1024, 4096],
            sweep_rules: vec![Rule::None, Rule::Sqrt, Rule::Linear, Rule::N2Lambda, Rule::CowClip],
            sweep_clip_all: false,
            output_dir: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean '{v}' for {key}"))),
    }
}

fn parse_opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v.eq_ignore_ascii_case("none") || v.is_empty() {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

/// Reads `key = value` lines, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Default)]
struct ClipKeys {
    variant: Option<String>,
    value: Option<f64>,
    r: Option<f64>,
    zeta: Option<f64>,
    occurrence_count: Option<bool>,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str_pairs(&text)
    }

    pub fn from_str_pairs(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&parse_pairs(text)?)?;
        Ok(cfg)
    }

    /// Applies `key = value` overrides in order.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut clip = ClipKeys::default();
        for (k, v) in pairs {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "seed" => self.seed = parse(k, v)?,
                "output.dir" => self.output_dir = Some(PathBuf::from(v)),

                "data.source" => {
                    self.data.source = match v {
                        "synthetic" => DataSource::Synthetic,
                        _ => match v.split_once(':') {
                            Some(("criteo", p)) => DataSource::CriteoTsv(PathBuf::from(p)),
                            Some(("container", p)) => DataSource::Container(PathBuf::from(p)),
                            _ => DataSource::Container(PathBuf::from(v)),
                        },
                    }
                }
                "data.n_samples" => self.data.n_samples = parse(k, v)?,
                "data.n_dense" => self.data.n_dense = parse(k, v)?,
                "data.vocab" => self.data.vocab_sizes = parse_list(k, v)?,
                "data.n_categorical" => {
                    let n: usize = parse(k, v)?;
                    let first = self.data.vocab_sizes.first().copied().unwrap_or(10_000);
                    self.data.vocab_sizes = vec![first; n];
                }
                "data.zipf" => {
                    self.data.ids = if v.eq_ignore_ascii_case("uniform") {
                        IdDistribution::Uniform
                    } else {
                        IdDistribution::Zipf { exponent: parse(k, v)? }
                    }
                }
                "data.click_bias" => self.data.click_bias = parse(k, v)?,
                "data.click_weight" => self.data.click_weight = parse(k, v)?,
                "data.click_pair_weight" => self.data.click_pair_weight = parse(k, v)?,
                "data.seed" => self.data.seed = parse_opt(k, v)?,
                "data.top_k" => self.data.top_k = parse_opt(k, v)?,
                "data.test_fraction" => self.data.test_fraction = parse(k, v)?,
                "data.max_rows" => self.data.max_rows = parse_opt(k, v)?,

                "model.kind" => self.model.kind = v.parse()?,
                "model.embed_dim" => self.model.embed_dim = parse(k, v)?,
                "model.hidden" => self.model.hidden = parse_list(k, v)?,
                "model.cross_layers" => self.model.cross_layers = parse(k, v)?,
                "model.embed_sigma" => self.model.embed_sigma = parse(k, v)?,

                "train.epochs" => self.epochs = parse(k, v)?,
                "train.batch_size" => self.batch_size = parse(k, v)?,
                "train.base_batch" => self.base.base_batch = parse(k, v)?,
                "train.rule" => self.rule = v.parse()?,
                "train.eval_batch" => self.eval_batch = parse(k, v)?,
                "train.batch_mode" => {
                    self.batch_mode = match v {
                        "shuffle" => BatchMode::ShuffleEpoch,
                        "replacement" => BatchMode::WithReplacement,
                        _ => return Err(Error::Config(format!("bad batch mode '{v}'"))),
                    }
                }

                "opt.kind" => {
                    self.optim.kind = match v {
                        "adam" => OptimizerKind::Adam,
                        "sgd" => OptimizerKind::Sgd,
                        _ => return Err(Error::Config(format!("bad optimizer '{v}'"))),
                    }
                }
                "opt.beta1" => self.optim.adam.beta1 = parse(k, v)?,
                "opt.beta2" => self.optim.adam.beta2 = parse(k, v)?,
                "opt.eps" => self.optim.adam.eps = parse(k, v)?,
                "opt.lr_dense" => self.base.lr_dense = parse(k, v)?,
                "opt.lr_embed" => self.base.lr_embed = parse(k, v)?,
                "opt.l2" => self.base.l2 = parse(k, v)?,
                "opt.warmup_epochs" => self.optim.warmup_epochs = parse(k, v)?,
                "opt.dense_l2" => self.optim.dense_l2 = parse_bool(k, v)?,

                "clip.variant" => clip.variant = Some(v.to_string()),
                "clip.value" => clip.value = Some(parse(k, v)?),
                "clip.r" => clip.r = Some(parse(k, v)?),
                "clip.zeta" => clip.zeta = Some(parse(k, v)?),
                "clip.occurrence_count" => clip.occurrence_count = Some(parse_bool(k, v)?),

                "sweep.batch_sizes" => self.sweep_batch_sizes = parse_list(k, v)?,
                "sweep.rules" => {
                    self.sweep_rules = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(str::parse)
                        .collect::<Result<_>>()?
                }
                "sweep.clip_all" => self.sweep_clip_all = parse_bool(k, v)?,
                _ => return Err(Error::Config(format!("unknown key '{k}'"))),
            }
        }
        self.clip = resolve_clip(self.clip, clip)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch == 0 || self.sweep_batch_sizes.contains(&0) {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::Config("data.test_fraction must be in [0, 1)".into()));
        }
        if self.model.embed_dim == 0 {
            return Err(Error::Config("model.embed_dim must be positive".into()));
        }
        self.base.validate()
    }

    /// Flat `key = value` text that [`ExperimentConfig::from_str_pairs`] reads back.
    pub fn to_pairs_text(&self) -> String {
        let mut lines = vec![format!("seed = {}", self.seed)];
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        lines.push(format!(
            "data.source = {}",
            match &self.data.source {
                DataSource::Synthetic => "synthetic".to_string(),
                DataSource::Container(p) => format!("container:{}", p.display()),
                DataSource::CriteoTsv(p) => format!("criteo:{}", p.display()),
            }
        ));
        lines.push(format!("data.n_samples = {}", self.data.n_samples));
        lines.push(format!("data.n_dense = {}", self.data.n_dense));
        lines.push(format!("data.vocab = {}", join(&self.data.vocab_sizes)));
        lines.push(format!(
            "data.zipf = {}",
            match self.data.ids {
                IdDistribution::Zipf { exponent } => exponent.to_string(),
                IdDistribution::Uniform => "uniform".into(),
            }
        ));
        let opt = |o: Option<String>| o.unwrap_or_else(|| "none".into());
        lines.push(format!("data.click_bias = {}", self.data.click_bias));
        lines.push(format!("data.click_weight = {}", self.data.click_weight));
        lines.push(format!("data.click_pair_weight = {}", self.data.click_pair_weight));
        lines.push(format!("data.seed = {}", opt(self.data.seed.map(|s| s.to_string()))));
        lines.push(format!("data.top_k = {}", opt(self.data.top_k.map(|s| s.to_string()))));
        lines.push(format!("data.test_fraction = {}", self.data.test_fraction));
        lines.push(format!("data.max_rows = {}", opt(self.data.max_rows.map(|s| s.to_string()))));
        lines.push(format!("model.kind = {}", self.model.kind));
        lines.push(format!("model.embed_dim = {}", self.model.embed_dim));
        lines.push(format!("model.hidden = {}", join(&self.model.hidden)));
        lines.push(format!("model.cross_layers = {}", self.model.cross_layers));
        lines.push(format!("model.embed_sigma = {}", self.model.embed_sigma));
        lines.push(format!("train.epochs = {}", self.epochs));
        lines.push(format!("train.batch_size = {}", self.batch_size));
        lines.push(format!("train.base_batch = {}", self.base.base_batch));
        lines.push(format!("train.rule = {}", self.rule));
        lines.push(format!("train.eval_batch = {}", self.eval_batch));
        lines.push(format!(
            "train.batch_mode = {}",
            match self.batch_mode {
                BatchMode::ShuffleEpoch => "shuffle",
                BatchMode::WithReplacement => "replacement",
            }
        ));
        lines.push(format!(
            "opt.kind = {}",
            match self.optim.kind {
                OptimizerKind::Adam => "adam",
                OptimizerKind::Sgd => "sgd",
            }
        ));
        lines.push(format!("opt.beta1 = {}", self.optim.adam.beta1));
        lines.push(format!("opt.beta2 = {}", self.optim.adam.beta2));
        lines.push(format!("opt.eps = {}", self.optim.adam.eps));
        lines.push(format!("opt.lr_dense = {}", self.base.lr_dense));
        lines.push(format!("opt.lr_embed = {}", self.base.lr_embed));
        lines.push(format!("opt.l2 = {}", self.base.l2));
        lines.push(format!("opt.warmup_epochs = {}", self.optim.warmup_epochs));
        lines.push(format!("opt.dense_l2 = {}", self.optim.dense_l2));
        lines.push(format!("clip.variant = {}", self.clip.name()));
        match self.clip {
            ClipConfig::None => {}
            ClipConfig::Global { value } | ClipConfig::Fieldwise { value } | ClipConfig::Columnwise { value } => {
                lines.push(format!("clip.value = {value}"))
            }
            ClipConfig::AdaptiveFieldwise { r, zeta } => {
                lines.push(format!("clip.r = {r}"));
                lines.push(format!("clip.zeta = {zeta}"));
            }
            ClipConfig::CowClip {
                r,
                zeta,
                occurrence_count,
            } => {
                lines.push(format!("clip.r = {r}"));
                lines.push(format!("clip.zeta = {zeta}"));
                lines.push(format!("clip.occurrence_count = {occurrence_count}"));
            }
        }
        lines.push(format!("sweep.batch_sizes = {}", join(&self.sweep_batch_sizes)));
        lines.push(format!(
            "sweep.rules = {}",
            self.sweep_rules.iter().map(|r| r.name()).collect::<Vec<_>>().join(",")
        ));
        lines.push(format!("sweep.clip_all = {}", self.sweep_clip_all));
        if let Some(d) = &self.output_dir {
            lines.push(format!("output.dir = {}", d.display()));
        }
        lines.join("\n") + "\n"
    }
}

fn resolve_clip(current: ClipConfig, keys: ClipKeys) -> Result<ClipConfig> {
    let variant = keys.variant.unwrap_or_else(|| current.name().to_string());
    let (cur_value, cur_r, cur_zeta, cur_occ) = match current {
        ClipConfig::Global { value } | ClipConfig::Fieldwise { value } | ClipConfig::Columnwise { value } => {
            (Some(value), None, None, None)
        }
        ClipConfig::AdaptiveFieldwise { r, zeta } => (None, Some(r), Some(zeta), None),
        ClipConfig::CowClip {
            r,
            zeta,
            occurrence_count,
        } => (None, Some(r), Some(zeta), Some(occurrence_count)),
        ClipConfig::None => (None, None, None, None),
    };
    let value = keys.value.or(cur_value).unwrap_or(ClipConfig::DEFAULT_GLOBAL_VALUE);
    let r = keys.r.or(cur_r).unwrap_or(ClipConfig::DEFAULT_R);
    let zeta = keys.zeta.or(cur_zeta).unwrap_or(ClipConfig::DEFAULT_ZETA);
    let occurrence_count = keys.occurrence_count.or(cur_occ).unwrap_or(true);
    if !(value > 0.0 && r > 0.0 && zeta > 0.0) {
        return Err(Error::Config("clip.value, clip.r and clip.zeta must be positive".into()));
    }
    Ok(match variant.as_str() {
        "none" => ClipConfig::None,
        "global" => ClipConfig::Global { value },
        "fieldwise" => ClipConfig::Fieldwise { value },
        "columnwise" => ClipConfig::Columnwise { value },
        "adaptive_fieldwise" => ClipConfig::AdaptiveFieldwise { r, zeta },
        "cowclip" => ClipConfig::CowClip {
            r,
            zeta,
            occurrence_count,
        },
        _ => return Err(Error::Config(format!("unknown clip variant '{variant}'"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_desk_scale() {
        let c = ExperimentConfig::default();
        assert_eq!(c.data.n_samples, 200_000);
        assert_eq!(c.data.vocab_sizes, vec![10_000; 6]);
        assert_eq!(c.data.n_dense, 2);
        assert_eq!(c.model.embed_dim, 10);
        assert_eq!(c.epochs, 10);
        assert_eq!(c.clip, ClipConfig::cowclip(1.0, 1e-4));
    }

    #[test]
    fn parses_keys_and_comments() {
        let c = ExperimentConfig::from_str_pairs(
            "# a comment\nmodel.kind = dcnv2\nopt.lr_dense = 2e-3 # trailing\n\nclip.variant = global\nclip.value = 5\nsweep.rules = none, cowclip\n",
        )
        .unwrap();
        assert_eq!(c.model.kind, ModelKind::DcnV2);
        assert_eq!(c.base.lr_dense, 2e-3);
        assert_eq!(c.clip, ClipConfig::Global { value: 5.0 });
        assert_eq!(c.sweep_rules, vec![Rule::None, Rule::CowClip]);
    }

    #[test]
    fn rejects_unknown_and_bad() {
        assert!(matches!(ExperimentConfig::from_str_pairs("nope = 1"), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_str_pairs("train.batch_size = 0").is_err());
        assert!(ExperimentConfig::from_str_pairs("clip.variant = wild").is_err());
        assert!(ExperimentConfig::from_str_pairs("novalue").is_err());
    }

    #[test]
    fn pairs_text_round_trips() {
        let mut c = ExperimentConfig::default();
        c.clip = ClipConfig::Columnwise { value: 0.5 };
        c.data.top_k = Some(3);
        c.model.hidden = vec![32, 16];
        let back = ExperimentConfig::from_str_pairs(&c.to_pairs_text()).unwrap();
        assert_eq!(back, c);
    }
}
