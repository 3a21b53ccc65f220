//! Training runs and batch-size sweeps.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig, OptimizerKind};
use crate::clip::{self, ClipConfig};
use crate::data::{self, Batch, ClickModel, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics;
use crate::models::{self, L2Scope, Model};
use crate::optim::{self, AdamState, SparseAdamState, WarmupSchedule};
use crate::rng;
use crate::scaling::{self, Rule, ScalingPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken during this epoch.
    pub steps: u64,
    /// Mean training loss over the epoch's batches; for epoch 0, the loss of
    /// the initial model on the training split.
    pub train_loss: Option<f64>,
    pub test_auc: Option<f64>,
    pub test_logloss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub model: String,
    pub rule: Rule,
    pub batch_size: usize,
    pub seed: u64,
    pub plan: ScalingPlan,
    pub clip: ClipConfig,
    pub config: ExperimentConfig,
    pub epochs: Vec<EpochRecord>,
    pub diverged: bool,
    pub divergence_reason: Option<String>,
}

impl RunRecord {
    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn final_auc(&self) -> Option<f64> {
        if self.diverged {
            return None;
        }
        self.final_epoch().and_then(|e| e.test_auc)
    }

    pub fn final_logloss(&self) -> Option<f64> {
        if self.diverged {
            return None;
        }
        self.final_epoch().and_then(|e| e.test_logloss)
    }

    /// Copy with every wall-clock field zeroed.
    pub fn without_timing(&self) -> RunRecord {
        let mut r = self.clone();
        r.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        r
    }
}

/// Train and held-out splits.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dc = &cfg.data;
    let ds = match &dc.source {
        DataSource::Synthetic => {
            let spec = SyntheticSpec {
                n_dense: dc.n_dense,
                vocab_sizes: dc.vocab_sizes.clone(),
                ids: dc.ids,
            };
            let click = ClickModel {
                bias: dc.click_bias,
                field_weights: vec![dc.click_weight; dc.vocab_sizes.len()],
                dense_weights: vec![0.3; dc.n_dense],
                pair_weight: dc.click_pair_weight,
            };
            data::generate_synthetic(&spec, dc.n_samples, dc.seed.unwrap_or(cfg.seed), &click)?
        }
        DataSource::Container(p) => Dataset::load(p)?,
        DataSource::CriteoTsv(p) => data::load_criteo_tsv(p, dc.max_rows)?,
    };
    match dc.top_k {
        Some(k) => data::top_k_collapse(&ds, k),
        None => Ok(ds),
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let ds = load_dataset(cfg)?;
    let split_seed = rng::derive_seed(cfg.data.seed.unwrap_or(cfg.seed), 3);
    let (train, test) = ds.split(cfg.data.test_fraction, split_seed)?;
    Ok(PreparedData { train, test })
}

/// Click probabilities for every row, computed in chunks of `chunk`.
pub fn predict_dataset(model: &Model, ds: &Dataset, chunk: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ds.len());
    let mut start = 0;
    while start < ds.len() {
        let end = (start + chunk).min(ds.len());
        let batch = Batch::new(ds, (start..end).collect());
        out.extend(model.predict(&batch)?);
        start = end;
    }
    Ok(out)
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn evaluate_split(model: &Model, ds: &Dataset, chunk: usize) -> Result<(Option<f64>, Option<f64>)> {
    if ds.is_empty() {
        return Ok((None, None));
    }
    let probs = predict_dataset(model, ds, chunk)?;
    if probs.iter().any(|p| !p.is_finite()) {
        return Ok((None, None));
    }
    let auc = match metrics::auc(&probs, ds.labels()) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let ll = metrics::logloss(&probs, ds.labels(), metrics::DEFAULT_PROB_EPS)?;
    Ok((auc, finite(ll)))
}

/// Resolved hyperparameters for `cfg.batch_size` under `cfg.rule`.
pub fn resolve_plan(cfg: &ExperimentConfig) -> Result<(ScalingPlan, ClipConfig)> {
    let plan = scaling::scale_to_batch(cfg.rule, &cfg.base, cfg.batch_size as u64)?;
    Ok((plan, cfg.clip.with_value_scaled(plan.clip_value_factor)))
}

pub fn run_id(cfg: &ExperimentConfig) -> String {
    format!("{}-{}-b{}-s{}", cfg.model.kind, cfg.rule, cfg.batch_size, cfg.seed)
}

/// Generates or loads the configured data, then trains on it.
pub fn train(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let data = prepare_data(cfg)?;
    train_on(cfg, &data)
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_EPOCHS: usize = 3;

/// One full run on prepared splits. Each step: lookup, forward, backward,
/// clip the embedding gradient, dense step with warmup, sparse steps for
/// the embedding and wide tables. Evaluates after every epoch.
pub fn train_on(cfg: &ExperimentConfig, data: &PreparedData) -> Result<RunRecord> {
    cfg.validate()?;
    let (plan, clip_cfg) = resolve_plan(cfg)?;
    let mut model = Model::new(cfg.model.clone(), data.train.schema(), rng::derive_seed(cfg.seed, 4))?;
    let mut record = RunRecord {
        run_id: run_id(cfg),
        model: cfg.model.kind.to_string(),
        rule: cfg.rule,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        plan,
        clip: clip_cfg,
        config: cfg.clone(),
        epochs: Vec::new(),
        diverged: false,
        divergence_reason: None,
    };

    let t0 = Instant::now();
    let init_loss = if data.train.is_empty() {
        None
    } else {
        let probs = predict_dataset(&model, &data.train, cfg.eval_batch)?;
        finite(metrics::logloss(&probs, data.train.labels(), metrics::DEFAULT_PROB_EPS)?)
    };
    let (auc, ll) = evaluate_split(&model, &data.test, cfg.eval_batch)?;
    record.epochs.push(EpochRecord {
        epoch: 0,
        steps: 0,
        train_loss: init_loss,
        test_auc: auc,
        test_logloss: ll,
        seconds: t0.elapsed().as_secs_f64(),
    });
    if cfg.epochs == 0 {
        return Ok(record);
    }

    let mut batches = data::make_batches(&data.train, cfg.batch_size, cfg.batch_mode, rng::derive_seed(cfg.seed, 5))?;
    let steps_per_epoch = batches.steps_per_epoch() as u64;
    let warmup = WarmupSchedule {
        target_lr: plan.lr_dense,
        warmup_steps: (cfg.optim.warmup_epochs * steps_per_epoch as f64).round() as u64,
    };
    let adam = cfg.optim.adam;
    let mut dense_state = AdamState::new(model.dense.values.len());
    let mut embed_state = SparseAdamState::for_table(&model.embed);
    let mut wide_state = model.wide.as_ref().map(SparseAdamState::for_table);
    let mut step: u64 = 0;
    let mut above = 0;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        let mut n_steps = 0u64;
        let mut bad_step = None;
        for _ in 0..steps_per_epoch {
            let batch = batches.next().expect("batch stream is endless");
            let (_, cache) = models::model_forward(&model, &batch)?;
            let labels: Vec<u8> = (0..batch.size()).map(|i| batch.label(i)).collect();
            let (loss, mut grads) = models::loss_and_backward(&model, &labels, &cache, 0.0, L2Scope::None)?;
            step += 1;
            n_steps += 1;
            if !loss.is_finite() {
                bad_step = Some(step);
                break;
            }
            loss_sum += loss;
            clip::apply(&clip_cfg, &model.embed, &mut grads.embed);
            let lr_dense = warmup.lr(step);
            match cfg.optim.kind {
                OptimizerKind::Adam => {
                    optim::adam_step(&adam, &mut dense_state, &mut model.dense.values, &grads.dense.values, lr_dense, 0.0);
                    optim::adam_sparse_step(
                        &adam,
                        &mut embed_state,
                        &mut model.embed,
                        &grads.embed,
                        plan.lr_embed,
                        plan.l2,
                        cfg.optim.dense_l2,
                    );
                    if let (Some(w), Some(g), Some(st)) = (model.wide.as_mut(), grads.wide.as_ref(), wide_state.as_mut()) {
                        optim::adam_sparse_step(&adam, st, w, g, plan.lr_embed, plan.l2, cfg.optim.dense_l2);
                    }
                }
                OptimizerKind::Sgd => {
                    optim::sgd_step(&mut model.dense.values, &grads.dense.values, lr_dense, 0.0);
                    optim::sgd_sparse_step(&mut model.embed, &grads.embed, plan.lr_embed, plan.l2, cfg.optim.dense_l2);
                    if let (Some(w), Some(g)) = (model.wide.as_mut(), grads.wide.as_ref()) {
                        optim::sgd_sparse_step(w, g, plan.lr_embed, plan.l2, cfg.optim.dense_l2);
                    }
                }
            }
        }

        if let Some(s) = bad_step {
            record.epochs.push(EpochRecord {
                epoch,
                steps: n_steps,
                train_loss: None,
                test_auc: None,
                test_logloss: None,
                seconds: start.elapsed().as_secs_f64(),
            });
            record.diverged = true;
            record.divergence_reason = Some(format!("non-finite training loss at step {s}"));
            break;
        }

        let train_loss = if n_steps > 0 { loss_sum / n_steps as f64 } else { f64::NAN };
        let (auc, ll) = if model.is_finite() {
            evaluate_split(&model, &data.test, cfg.eval_batch)?
        } else {
            (None, None)
        };
        record.epochs.push(EpochRecord {
            epoch,
            steps: n_steps,
            train_loss: finite(train_loss),
            test_auc: auc,
            test_logloss: ll,
            seconds: start.elapsed().as_secs_f64(),
        });
        if !model.is_finite() {
            record.diverged = true;
            record.divergence_reason = Some(format!("non-finite parameters after epoch {epoch}"));
            break;
        }
        match init_loss {
            Some(l0) if train_loss > DIVERGENCE_FACTOR * l0 => above += 1,
            _ => above = 0,
        }
        if above >= DIVERGENCE_EPOCHS {
            record.diverged = true;
            record.divergence_reason = Some(format!(
                "training loss above {DIVERGENCE_FACTOR}x its initial value for {DIVERGENCE_EPOCHS} epochs"
            ));
            break;
        }
    }
    Ok(record)
}

/// One cell of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub rule: Rule,
    pub batch_size: usize,
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub records: Vec<RunRecord>,
    pub cells: Vec<SweepCell>,
}

/// Trains every (rule, batch size) pair on the same data, with
/// hyperparameters scaled from `cfg.base`. Rules other than cowclip train
/// unclipped unless `cfg.sweep_clip_all` is set.
pub fn sweep(cfg: &ExperimentConfig, batch_sizes: &[usize], rules: &[Rule]) -> Result<SweepResult> {
    let data = prepare_data(cfg)?;
    sweep_on(cfg, &data, batch_sizes, rules)
}

pub fn sweep_on(cfg: &ExperimentConfig, data: &PreparedData, batch_sizes: &[usize], rules: &[Rule]) -> Result<SweepResult> {
    if batch_sizes.is_empty() || rules.is_empty() {
        return Err(Error::invalid("sweep needs at least one batch size and one rule"));
    }
    let mut records = Vec::new();
    let mut cells = Vec::new();
    for &rule in rules {
        for &b in batch_sizes {
            let mut c = cfg.clone();
            c.rule = rule;
            c.batch_size = b;
            if rule != Rule::CowClip && !cfg.sweep_clip_all {
                c.clip = ClipConfig::None;
            }
            let r = train_on(&c, data)?;
            cells.push(SweepCell {
                rule,
                batch_size: b,
                auc: r.final_auc(),
                logloss: r.final_logloss(),
                diverged: r.diverged,
            });
            records.push(r);
        }
    }
    Ok(SweepResult { records, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.data.n_samples = 2000;
        c.data.vocab_sizes = vec![50; 3];
        c.model.hidden = vec![8];
        c.model.embed_dim = 4;
        c.batch_size = 64;
        c.epochs = 2;
        c.base.lr_dense = 1e-2;
        c.base.lr_embed = 1e-2;
        c.seed = 7;
        c
    }

    #[test]
    fn zero_epochs_only_initial_eval() {
        let mut c = tiny();
        c.epochs = 0;
        let r = train(&c).unwrap();
        assert_eq!(r.epochs.len(), 1);
        assert_eq!(r.epochs[0].epoch, 0);
    }

    #[test]
    fn tiny_run_learns_and_counts_steps() {
        let c = tiny();
        let r = train(&c).unwrap();
        assert!(!r.diverged);
        assert_eq!(r.epochs.len(), 3);
        for e in &r.epochs[1..] {
            assert_eq!(e.steps, 1800 / 64);
        }
        assert!(r.epochs[2].train_loss.unwrap() < r.epochs[0].train_loss.unwrap());
    }

    #[test]
    fn runs_are_deterministic() {
        let c = tiny();
        let a = train(&c).unwrap().without_timing();
        let b = train(&c).unwrap().without_timing();
        assert_eq!(a, b);
    }

    #[test]
    fn huge_lr_is_reported_not_fatal() {
        let mut c = tiny();
        c.optim.kind = OptimizerKind::Sgd;
        c.clip = ClipConfig::None;
        c.base.lr_dense = 1e6;
        c.base.lr_embed = 1e6;
        c.epochs = 5;
        let r = train(&c).unwrap();
        assert!(r.diverged, "{:?}", r.epochs);
        assert!(r.final_auc().is_none());
    }

    #[test]
    fn degenerate_sweep_equals_train() {
        let mut c = tiny();
        c.rule = Rule::CowClip;
        let s = sweep(&c, &[c.batch_size], &[c.rule]).unwrap();
        assert_eq!(s.records.len(), 1);
        assert_eq!(s.records[0].without_timing(), train(&c).unwrap().without_timing());
    }

    #[test]
    fn sweep_clips_only_the_cowclip_rule() {
        let c = tiny();
        let s = sweep(&c, &[c.batch_size], &[Rule::None, Rule::CowClip]).unwrap();
        assert_eq!(s.records[0].clip, ClipConfig::None);
        assert_eq!(s.records[1].clip.name(), "cowclip");
        let mut plain = c.clone();
        plain.clip = ClipConfig::None;
        let mut all = c.clone();
        all.sweep_clip_all = true;
        let s_all = sweep(&all, &[c.batch_size], &[Rule::None]).unwrap();
        assert_eq!(s.records[0].without_timing().epochs, train(&plain).unwrap().without_timing().epochs);
        assert_eq!(s_all.records[0].clip.name(), "cowclip");
    }
}
