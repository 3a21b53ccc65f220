//! CSV, JSON and text-table reports of run records.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use super::train::RunRecord;
use crate::error::{Error, Result};
use crate::scaling::Rule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Text,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "text" | "table" | "text-table" => Ok(ReportFormat::Text),
            _ => Err(Error::invalid(format!("unknown report format '{s}'"))),
        }
    }
}

pub const CSV_COLUMNS: [&str; 9] = [
    "run_id",
    "model",
    "rule",
    "batch_size",
    "epoch",
    "train_loss",
    "test_auc",
    "test_logloss",
    "seconds",
];

#[derive(Serialize)]
struct CsvRow<'a> {
    run_id: &'a str,
    model: &'a str,
    rule: &'a str,
    batch_size: usize,
    epoch: usize,
    train_loss: Option<f64>,
    test_auc: Option<f64>,
    test_logloss: Option<f64>,
    seconds: f64,
}

/// One row per epoch record of every run, under a fixed header.
pub fn to_csv(records: &[RunRecord]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in records {
        for e in &r.epochs {
            w.serialize(CsvRow {
                run_id: &r.run_id,
                model: &r.model,
                rule: r.rule.name(),
                batch_size: r.batch_size,
                epoch: e.epoch,
                train_loss: e.train_loss,
                test_auc: e.test_auc,
                test_logloss: e.test_logloss,
                seconds: e.seconds,
            })
            .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn to_json(records: &[RunRecord]) -> Result<String> {
    Ok(serde_json::to_string_pretty(records)?)
}

pub fn from_json(text: &str) -> Result<Vec<RunRecord>> {
    Ok(serde_json::from_str(text)?)
}

/// Rules as rows, batch sizes as column pairs of AUC (%) and logloss, each
/// cell the mean of the final epoch over seeds. Diverged runs read "diverge".
pub fn to_text_table(records: &[RunRecord]) -> String {
    let mut sizes: Vec<usize> = records.iter().map(|r| r.batch_size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut rules: Vec<Rule> = Vec::new();
    for r in records {
        if !rules.contains(&r.rule) {
            rules.push(r.rule);
        }
    }
    let mut cells: BTreeMap<(usize, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let ri = rules.iter().position(|&x| x == r.rule).expect("collected above");
        cells.entry((ri, r.batch_size)).or_default().push(r);
    }

    const W: usize = 19;
    let mut out = String::new();
    let _ = write!(out, "{:<12}", "");
    for b in &sizes {
        let _ = write!(out, "|{:^W$}", b);
    }
    out.push('\n');
    let _ = write!(out, "{:<12}", "rule");
    for _ in &sizes {
        let _ = write!(out, "|{:>9} {:>9}", "AUC(%)", "LogLoss");
    }
    out.push('\n');
    out.push_str(&"-".repeat(12 + sizes.len() * (W + 1)));
    out.push('\n');
    for (ri, rule) in rules.iter().enumerate() {
        let _ = write!(out, "{:<12}", rule.name());
        for &b in &sizes {
            match cells.get(&(ri, b)) {
                None => {
                    let _ = write!(out, "|{:^W$}", "-");
                }
                Some(runs) if runs.iter().any(|r| r.diverged) => {
                    let _ = write!(out, "|{:^W$}", "diverge");
                }
                Some(runs) => {
                    let mean = |f: fn(&RunRecord) -> Option<f64>| {
                        let v: Vec<f64> = runs.iter().filter_map(|r| f(r)).collect();
                        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                    };
                    let fmt = |v: Option<f64>, k: f64, p: usize| v.map_or("n/a".to_string(), |x| format!("{:.p$}", x * k));
                    let _ = write!(
                        out,
                        "|{:>9} {:>9}",
                        fmt(mean(RunRecord::final_auc), 100.0, 2),
                        fmt(mean(RunRecord::final_logloss), 1.0, 4)
                    );
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Per-epoch listing of a single run.
pub fn epoch_table(record: &RunRecord) -> String {
    let mut out = format!(
        "{}  lr_dense={:.4e} lr_embed={:.4e} l2={:.4e} clip={}\n",
        record.run_id,
        record.plan.lr_dense,
        record.plan.lr_embed,
        record.plan.l2,
        record.clip.name()
    );
    let _ = writeln!(out, "{:>5} {:>7} {:>10} {:>9} {:>10} {:>8}", "epoch", "steps", "train_loss", "AUC(%)", "logloss", "seconds");
    let opt = |v: Option<f64>, k: f64, p: usize| v.map_or("n/a".to_string(), |x| format!("{:.p$}", x * k));
    for e in &record.epochs {
        let _ = writeln!(
            out,
            "{:>5} {:>7} {:>10} {:>9} {:>10} {:>8.2}",
            e.epoch,
            e.steps,
            opt(e.train_loss, 1.0, 5),
            opt(e.test_auc, 100.0, 3),
            opt(e.test_logloss, 1.0, 5),
            e.seconds
        );
    }
    if let Some(reason) = &record.divergence_reason {
        let _ = writeln!(out, "diverged: {reason}");
    }
    out
}

pub fn render(records: &[RunRecord], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => to_csv(records),
        ReportFormat::Json => to_json(records),
        ReportFormat::Text => Ok(to_text_table(records)),
    }
}

/// Renders `records` and writes them to `path`.
pub fn emit_report(records: &[RunRecord], format: ReportFormat, path: &Path) -> Result<()> {
    let text = render(records, format)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
