//! Report artifacts (CSV series and a JSON summary) and run comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::log::{RunLog, RunStatus};
use crate::metrics::{self, ConfusionMatrix, MetricSeries};

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub t: u64,
    pub accuracy: f64,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: String,
    pub seed: u64,
    pub split_fingerprint: String,
    pub label_space_fingerprint: String,
    pub steps: u64,
    /// `completed`, `aborted`, or `truncated` when the log has no end event.
    pub status: String,
    pub truncated: bool,
    pub window_saturated: bool,
    pub final_accuracy: Option<f64>,
    pub final_regret: u64,
    pub final_train_accuracy: Option<f64>,
    pub tokens_prompt: u64,
    pub tokens_processed: u64,
    pub invalid_outputs: u64,
    pub predicted_entropy: f64,
    pub data_entropy: f64,
    pub eval_points: Vec<EvalPoint>,
}

fn labels_fingerprint(labels: &[String]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for l in labels {
        h.update(l.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

/// Recomputes every summary metric from `log`, verifying prompt hashes.
pub fn summarize(log: &RunLog, train_window: usize) -> Result<Summary> {
    let h = log
        .header()
        .ok_or_else(|| Error::integrity("event 0 (line 1)", "log has no header"))?;
    let tokens = metrics::token_account(log)?;
    let confusion = ConfusionMatrix::from_steps(log, &h.label_space)?;
    let end = log.end();
    let status = match end.map(|e| e.status) {
        Some(RunStatus::Completed) => "completed",
        Some(RunStatus::Aborted) => "aborted",
        None => "truncated",
    };
    let steps = match end {
        Some(e) => e.steps,
        None => log
            .steps()
            .last()
            .map(|s| s.t)
            .unwrap_or_else(|| log.evals().last().map_or(0, |e| e.t)),
    };
    Ok(Summary {
        algorithm: h.algorithm.name().to_string(),
        seed: h.seed,
        split_fingerprint: h.split_fingerprint.clone(),
        label_space_fingerprint: labels_fingerprint(h.label_space.labels()),
        steps,
        status: status.to_string(),
        truncated: end.is_none(),
        window_saturated: end.is_some_and(|e| e.window_saturated) || log.steps().any(|s| s.truncated),
        final_accuracy: log.evals().last().map(|e| e.accuracy),
        final_regret: metrics::regret(log).last().unwrap_or(0.0) as u64,
        final_train_accuracy: metrics::running_train_accuracy(log, train_window).last(),
        tokens_prompt: tokens.total_prompt,
        tokens_processed: tokens.total_processed,
        invalid_outputs: log.steps().filter(|s| s.invalid_output).count() as u64,
        predicted_entropy: confusion.predicted_entropy(),
        data_entropy: confusion.true_entropy(),
        eval_points: log
            .evals()
            .map(|e| EvalPoint {
                t: e.t,
                accuracy: e.accuracy,
                complete: e.complete,
            })
            .collect(),
    })
}

fn write_series(path: &Path, series: &MetricSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["t", series.name.as_str()])
        .map_err(|e| csv_err(path, e))?;
    for (t, v) in &series.points {
        w.write_record([t.to_string(), v.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Writes `regret.csv`, `train_accuracy.csv`, `test_accuracy.csv` and
/// `summary.json` into `dir`. Output depends only on `log`.
pub fn write_report(log: &RunLog, dir: &Path, train_window: usize) -> Result<Summary> {
    let summary = summarize(log, train_window)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_series(&dir.join("regret.csv"), &metrics::regret(log))?;
    write_series(
        &dir.join("train_accuracy.csv"),
        &metrics::running_train_accuracy(log, train_window),
    )?;
    write_series(&dir.join("test_accuracy.csv"), &metrics::test_accuracy(log))?;
    write_summary(&summary, &dir.join(SUMMARY_FILE))?;
    Ok(summary)
}

pub fn write_summary(summary: &Summary, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub name: String,
    pub algorithm: String,
    pub final_accuracy: Option<f64>,
    pub final_regret: u64,
    pub tokens_processed: u64,
    /// Tokens processed relative to the cheapest run.
    pub token_ratio: f64,
    pub lowest_regret: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    pub warnings: Vec<String>,
}

pub fn compare(runs: &[(String, Summary)]) -> Result<Comparison> {
    if runs.len() < 2 {
        return Err(Error::config("compare needs at least two runs"));
    }
    let first = &runs[0].1;
    let mut warnings = Vec::new();
    for (name, s) in &runs[1..] {
        if s.label_space_fingerprint != first.label_space_fingerprint {
            return Err(Error::contract(format!(
                "run {name} uses a different label space from {}",
                runs[0].0
            )));
        }
        if s.split_fingerprint != first.split_fingerprint || s.seed != first.seed {
            warnings.push(format!(
                "run {name} does not share the dataset split and seed of {}",
                runs[0].0
            ));
        }
    }
    let cheapest = runs
        .iter()
        .map(|r| r.1.tokens_processed)
        .filter(|&t| t > 0)
        .min()
        .unwrap_or(1);
    let best = runs.iter().map(|r| r.1.final_regret).min().unwrap_or(0);
    let rows = runs
        .iter()
        .map(|(name, s)| CompareRow {
            name: name.clone(),
            algorithm: s.algorithm.clone(),
            final_accuracy: s.final_accuracy,
            final_regret: s.final_regret,
            tokens_processed: s.tokens_processed,
            token_ratio: s.tokens_processed as f64 / cheapest as f64,
            lowest_regret: s.final_regret == best,
        })
        .collect();
    Ok(Comparison { rows, warnings })
}

impl Comparison {
    /// A plain-text table, one run per line.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:<15} {:>9} {:>8} {:>14} {:>9}  lowest_regret",
            "run", "algorithm", "accuracy", "regret", "tokens", "ratio"
        );
        for r in &self.rows {
            let acc = r.final_accuracy.map_or("-".to_string(), |a| format!("{a:.3}"));
            let _ = writeln!(
                out,
                "{:<24} {:<15} {:>9} {:>8} {:>14} {:>9.2}  {}",
                r.name,
                r.algorithm,
                acc,
                r.final_regret,
                r.tokens_processed,
                r.token_ratio,
                if r.lowest_regret { "*" } else { "" }
            );
        }
        out
    }
}
