use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cowclip::data::{self, Dataset, PresenceMode};
use cowclip::harness::report::{self, ReportFormat};
use cowclip::harness::{self, grad_check::GRAD_CHECK_TOLERANCE, ExperimentConfig, RunRecord};
use cowclip::models::ModelKind;
use cowclip::scaling::{self, BaseHyperparams, Preset, Rule};
use cowclip::{Error, Result};

const EXIT_VERIFY_FAILED: u8 = 1;
const EXIT_DIVERGED: u8 = 2;

#[derive(Parser)]
#[command(name = "cowclip", version, about = "Large-batch CTR training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        let pairs = self
            .set
            .iter()
            .map(|s| {
                s.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        cfg.apply(&pairs)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or ingest) the configured dataset and write it as a container file.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-field id frequency and batch-presence summary.
    AnalyzeFreq {
        #[command(flatten)]
        common: Common,
        /// Dataset container; the configured source when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
        batch_sizes: Vec<u64>,
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long)]
        json: bool,
    },
    /// Print the hyperparameter plan of a scaling rule.
    Scale {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rule: Option<String>,
        #[arg(long, default_value_t = 1024)]
        base_batch: u64,
        #[arg(long)]
        target_batch: u64,
        /// Base learning rate for both dense and embedding weights.
        #[arg(long, default_value_t = 1e-4)]
        eta: f64,
        #[arg(long)]
        eta_dense: Option<f64>,
        #[arg(long)]
        eta_embed: Option<f64>,
        #[arg(long = "lambda", default_value_t = 1e-4)]
        lambda: f64,
        /// criteo-cowclip, avazu-cowclip or empirical-n2-lambda.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "text")]
        format: String,
    },
    /// Train every (rule, batch size) combination.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        batch_sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        rules: Vec<String>,
        #[arg(long, default_value = "text")]
        format: String,
    },
    /// Finite-difference check of the backward passes.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// wd, deepfm, dcn, dcnv2 or all.
        #[arg(long, default_value = "all")]
        model: String,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Run verification suites (all when none are named).
    Verify {
        #[command(flatten)]
        common: Common,
        suites: Vec<String>,
    },
}

fn write_outputs(cfg: &ExperimentConfig, records: &[RunRecord], stem: &str) -> Result<()> {
    let Some(dir) = &cfg.output_dir else {
        return Ok(());
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (fmt, ext) in [(ReportFormat::Csv, "csv"), (ReportFormat::Json, "json"), (ReportFormat::Text, "txt")] {
        report::emit_report(records, fmt, &dir.join(format!("{stem}.{ext}")))?;
    }
    Ok(())
}

fn print_records(records: &[RunRecord], format: &str) -> Result<()> {
    let fmt: ReportFormat = format.parse()?;
    match fmt {
        ReportFormat::Text => {
            for r in records {
                print!("{}", report::epoch_table(r));
            }
            print!("{}", report::to_text_table(records));
        }
        other => print!("{}", report::render(records, other)?),
    }
    Ok(())
}

fn diverged_exit(records: &[RunRecord]) -> u8 {
    if records.iter().any(|r| r.diverged) {
        EXIT_DIVERGED
    } else {
        0
    }
}

fn analyze(ds: &Dataset, sizes: &[u64], top: usize, json: bool) -> Result<()> {
    let freq = data::count_frequencies(ds)?;
    let mut fields = Vec::new();
    for (j, f) in ds.schema().categorical().enumerate() {
        let counts = freq.field_counts(j);
        let seen = counts.iter().filter(|&&c| c > 0).count();
        let ranked = freq.ranked_ids(j);
        let top_ids: Vec<(usize, f64)> = ranked.iter().take(top).map(|&id| (id, freq.probability(j, id))).collect();
        let rare: Vec<(u64, usize)> = sizes
            .iter()
            .map(|&b| {
                let n = (0..counts.len())
                    .filter(|&id| counts[id] > 0 && data::batch_presence_probability(freq.probability(j, id), b, PresenceMode::Exact) < 0.5)
                    .count();
                (b, n)
            })
            .collect();
        fields.push(serde_json::json!({
            "field": f.name,
            "vocab": f.vocab_size,
            "ids_seen": seen,
            "top": top_ids,
            "ids_with_presence_below_half": rare,
        }));
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&serde_json::json!({ "samples": freq.total_samples(), "fields": fields }))?);
        return Ok(());
    }
    println!("samples: {}", freq.total_samples());
    for f in &fields {
        println!(
            "{:<6} vocab {:>8}  seen {:>8}  top {}",
            f["field"].as_str().unwrap_or(""),
            f["vocab"],
            f["ids_seen"],
            f["top"]
                .as_array()
                .map(|v| v
                    .iter()
                    .map(|p| format!("{}:{:.4}", p[0], p[1].as_f64().unwrap_or(0.0)))
                    .collect::<Vec<_>>()
                    .join(" "))
                .unwrap_or_default()
        );
        for r in f["ids_with_presence_below_half"].as_array().into_iter().flatten() {
            println!("       b={:<7} ids present in fewer than half of batches: {}", r[0], r[1]);
        }
    }
    Ok(())
}

fn print_plan(plan: &scaling::ScalingPlan, extra: Option<&scaling::PresetPlan>) -> Result<()> {
    println!("rule          {}", plan.rule);
    println!("factor s      {}", plan.factor);
    println!("batch         {} -> {}", plan.base_batch, plan.target_batch);
    println!("lr_dense      {:.6e}", plan.lr_dense);
    println!("lr_embed      {:.6e}", plan.lr_embed);
    println!("l2            {:.6e}", plan.l2);
    println!("clip factor   {:.6}", plan.clip_value_factor);
    if let Some(pp) = extra {
        println!("(r, zeta)     ({}, {:e})", pp.r, pp.zeta);
        if !pp.overridden.is_empty() {
            println!("tuned         {}", pp.overridden.join(", "));
        }
        println!("{}", serde_json::to_string(pp)?);
    } else {
        println!("{}", serde_json::to_string(plan)?);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = common.load()?;
            let ds = harness::train::load_dataset(&cfg)?;
            ds.save(&out)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
            Ok(0)
        }
        Command::AnalyzeFreq {
            common,
            data,
            batch_sizes,
            top,
            json,
        } => {
            let ds = match data {
                Some(p) => Dataset::load(&p)?,
                None => harness::train::load_dataset(&common.load()?)?,
            };
            analyze(&ds, &batch_sizes, top, json)?;
            Ok(0)
        }
        Command::Scale {
            common: _,
            rule,
            base_batch,
            target_batch,
            eta,
            eta_dense,
            eta_embed,
            lambda,
            preset,
        } => {
            if let Some(name) = preset {
                let pp = Preset::by_name(&name)?.plan(target_batch)?;
                print_plan(&pp.plan, Some(&pp))?;
                return Ok(0);
            }
            let rule: Rule = rule.as_deref().unwrap_or("cowclip").parse()?;
            let base = BaseHyperparams {
                base_batch,
                lr_dense: eta_dense.unwrap_or(eta),
                lr_embed: eta_embed.unwrap_or(eta),
                l2: lambda,
            };
            let plan = scaling::scale_to_batch(rule, &base, target_batch)?;
            print_plan(&plan, None)?;
            Ok(0)
        }
        Command::Train { common, format } => {
            let cfg = common.load()?;
            let rec = harness::train(&cfg)?;
            let records = vec![rec];
            print_records(&records, &format)?;
            write_outputs(&cfg, &records, &records[0].run_id)?;
            Ok(diverged_exit(&records))
        }
        Command::Sweep {
            common,
            batch_sizes,
            rules,
            format,
        } => {
            let cfg = common.load()?;
            let sizes = if batch_sizes.is_empty() { cfg.sweep_batch_sizes.clone() } else { batch_sizes };
            let rules: Vec<Rule> = if rules.is_empty() {
                cfg.sweep_rules.clone()
            } else {
                rules.iter().map(|r| r.parse()).collect::<Result<_>>()?
            };
            let res = harness::sweep(&cfg, &sizes, &rules)?;
            let fmt: ReportFormat = format.parse()?;
            match fmt {
                ReportFormat::Text => print!("{}", report::to_text_table(&res.records)),
                other => print!("{}", report::render(&res.records, other)?),
            }
            write_outputs(&cfg, &res.records, "sweep")?;
            Ok(diverged_exit(&res.records))
        }
        Command::GradCheck { common, model, trials } => {
            let seed = common.load()?.seed;
            let kinds: Vec<ModelKind> = if model == "all" {
                ModelKind::ALL.to_vec()
            } else {
                vec![model.parse()?]
            };
            let mut ok = true;
            for kind in kinds {
                let r = harness::grad_check(kind, seed, trials)?;
                println!(
                    "{:<7} trials {:>4}  resampled {:>4}  max rel error {:.3e}  {}",
                    kind.name(),
                    r.trials,
                    r.resampled,
                    r.max_rel_error,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                for t in &r.tensors {
                    println!("        {:<12} {:.3e} over {} entries", t.name, t.max_rel_error, t.n_checked);
                }
                ok &= r.passed();
            }
            println!("tolerance {GRAD_CHECK_TOLERANCE:e}");
            Ok(if ok { 0 } else { EXIT_VERIFY_FAILED })
        }
        Command::Verify { common, suites } => {
            let seed = common.load()?.seed;
            let outcomes = harness::verify(&suites, seed)?;
            let mut ok = true;
            for o in &outcomes {
                println!(
                    "{:<18} {:<4} {:>7.2}s  {}",
                    o.suite,
                    if o.passed { "PASS" } else { "FAIL" },
                    o.seconds,
                    o.detail
                );
                ok &= o.passed;
            }
            Ok(if ok { 0 } else { EXIT_VERIFY_FAILED })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
