//! Python bindings: prompt rendering, reward helpers, capacity estimates and
//! whole runs driven by a TOML config.

use std::sync::Arc;

use icrl_core::config::parse_config;
use icrl_core::context::{log_probability_for_counts, Episode};
use icrl_core::data::{estimate_capacity as core_capacity, Example, TokenBudget};
use icrl_core::policy::{render_prompt as core_render, Dialect, PromptMode, PromptTemplate};
use icrl_core::reward::{
    evaluate_reward as core_evaluate, verbalize_reward as core_verbalize, RewardMode, RewardValue,
};
use icrl_core::rng::{stream, streams};
use icrl_core::runner::run_to_log;
use icrl_core::{metrics, report, Error, RunConfig, RunLog};
use pyo3::exceptions::{PyConnectionError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Dataset(_) | Error::Parse { .. } => {
            PyValueError::new_err(e.to_string())
        }
        Error::Transport(_) => PyConnectionError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Reads a snake_case enum name through its serde representation.
fn parse_name<T: serde::de::DeserializeOwned>(what: &str, name: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} {name:?}")))
}

fn json_to_py(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn load(config: &str, overrides: Vec<String>, seed: Option<u64>) -> PyResult<RunConfig> {
    parse_config(config, &overrides, seed, |k| std::env::var(k).ok()).map_err(to_py)
}

/// Feedback sentence for a binary reward.
#[pyfunction]
fn verbalize_reward(prediction: &str, reward: u8) -> PyResult<String> {
    if reward > 1 {
        return Err(PyValueError::new_err("reward must be 0 or 1"));
    }
    core_verbalize(prediction, RewardValue::observed(reward)).map_err(to_py)
}

/// Reward the learner sees, or None when the mode hides it. `noisy` takes
/// the first draw of the reward-noise stream for `seed`.
#[pyfunction]
#[pyo3(signature = (gold, prediction, mode = "standard", p_flip = 0.0, seed = 0))]
fn evaluate_reward(gold: &str, prediction: &str, mode: &str, p_flip: f64, seed: u64) -> PyResult<Option<u8>> {
    let mode = match mode {
        "noisy" => RewardMode::Noisy { p_flip },
        other => {
            let m: RewardMode = serde_json::from_value(serde_json::json!({ "kind": other }))
                .map_err(|_| PyValueError::new_err(format!("unknown reward mode {other:?}")))?;
            m
        }
    };
    mode.validate().map_err(PyValueError::new_err)?;
    let example = Example::new("x", "", gold);
    let mut rng = stream(seed, streams::REWARD_NOISE);
    let r = core_evaluate(&example, prediction, mode, &mut rng);
    Ok(r.observed.then_some(r.value))
}

/// Probability that Bernoulli(`p_keep`) subsampling of a buffer of
/// `buffer_len` episodes keeps exactly the positions in `context`.
#[pyfunction]
fn context_probability(context: Vec<usize>, buffer_len: usize, p_keep: f64) -> PyResult<f64> {
    if !(0.0..=1.0).contains(&p_keep) {
        return Err(PyValueError::new_err("p_keep must be in [0, 1]"));
    }
    if context.windows(2).any(|w| w[0] >= w[1]) || context.last().is_some_and(|&i| i >= buffer_len) {
        return Err(PyValueError::new_err(
            "context must be strictly increasing positions in the buffer",
        ));
    }
    Ok(log_probability_for_counts(context.len(), buffer_len, p_keep).exp())
}

/// Prompt markup for `context`, a list of `(query, prediction, reward)`.
#[pyfunction]
#[pyo3(signature = (context, query, dialect = "llama", mode = "icrl", query_prefix = None))]
fn render_prompt(
    context: Vec<(String, String, u8)>,
    query: &str,
    dialect: &str,
    mode: &str,
    query_prefix: Option<&str>,
) -> PyResult<String> {
    let mut template = PromptTemplate::with_dialect(parse_name::<Dialect>("dialect", dialect)?);
    if let Some(p) = query_prefix {
        template = template.with_query_prefix(p);
    }
    let mode: PromptMode = parse_name("prompt mode", mode)?;
    let episodes = context
        .into_iter()
        .enumerate()
        .map(|(i, (q, pred, r))| {
            if r > 1 {
                return Err(PyValueError::new_err("reward must be 0 or 1"));
            }
            let ex = Example::new(format!("c{i}"), q, pred.clone());
            Ok(Arc::new(Episode::new(i as u64 + 1, ex, pred, RewardValue::observed(r))))
        })
        .collect::<PyResult<Vec<_>>>()?;
    let transcript = core_render(&episodes, &Example::new("q", query, ""), &template, mode).map_err(to_py)?;
    Ok(template.to_markup(&transcript))
}

/// Episodes that always fit in each window, for the configured dataset and template.
#[pyfunction]
#[pyo3(signature = (windows, config = "", overrides = Vec::new()))]
fn estimate_capacity(windows: Vec<usize>, config: &str, overrides: Vec<String>) -> PyResult<Vec<usize>> {
    let cfg = load(config, overrides, None)?;
    let (split, labels) = cfg.data.load(cfg.seed).map_err(to_py)?;
    let tokenizer = cfg.tokenizer.build();
    Ok(windows
        .into_iter()
        .map(|w| {
            let budget = TokenBudget::for_examples(
                w,
                tokenizer.as_ref(),
                &cfg.template,
                cfg.prompt_mode(),
                split.train.iter().chain(split.test.iter()),
            );
            core_capacity(&split, &labels, tokenizer.as_ref(), &cfg.template, budget)
        })
        .collect())
}

/// A finished (or aborted) run held in memory.
#[pyclass(frozen)]
struct Run {
    log: RunLog,
    train_window: usize,
    error: Option<String>,
}

#[pymethods]
impl Run {
    /// None for a completed run, otherwise the abort reason.
    #[getter]
    fn error(&self) -> Option<String> {
        self.error.clone()
    }

    /// The run log as JSONL.
    fn log_jsonl(&self) -> PyResult<String> {
        self.log.to_jsonl().map_err(to_py)
    }

    /// Summary metrics as a dict.
    fn summary(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let s = report::summarize(&self.log, self.train_window).map_err(to_py)?;
        json_to_py(py, &serde_json::to_string(&s).map_err(|e| to_py(e.into()))?)
    }

    /// Cumulative regret after each step as `(t, regret)`.
    fn regret(&self) -> Vec<(u64, f64)> {
        metrics::regret(&self.log).points
    }

    fn test_accuracy(&self) -> Vec<(u64, f64)> {
        metrics::test_accuracy(&self.log).points
    }

    fn train_accuracy(&self) -> Vec<(u64, f64)> {
        metrics::running_train_accuracy(&self.log, self.train_window).points
    }

    /// Training-step predictions in order.
    fn predictions(&self) -> Vec<String> {
        self.log.steps().map(|s| s.prediction.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.log.steps().count()
    }
}

/// Runs a config given as TOML text with optional dotted-key overrides.
#[pyfunction]
#[pyo3(signature = (config = "", overrides = Vec::new(), seed = None))]
fn run(py: Python<'_>, config: &str, overrides: Vec<String>, seed: Option<u64>) -> PyResult<Run> {
    let cfg = load(config, overrides, seed)?;
    let (split, labels) = cfg.data.load(cfg.seed).map_err(to_py)?;
    let errs = cfg.validate(Some(&labels));
    if !errs.is_empty() {
        return Err(to_py(Error::Config(errs)));
    }
    let policy = cfg.backend.build_default();
    let (log, result) = py.detach(|| run_to_log(&cfg, &split, &labels, policy.as_ref()));
    if let Err(e @ Error::Config(_)) = result {
        return Err(to_py(e));
    }
    Ok(Run {
        log,
        train_window: cfg.train_window,
        error: result.err().map(|e| e.to_string()),
    })
}

/// Summary of a JSONL run log, verifying every prompt hash.
#[pyfunction]
#[pyo3(signature = (log_jsonl, train_window = 256))]
fn summarize(py: Python<'_>, log_jsonl: &str, train_window: usize) -> PyResult<Py<PyAny>> {
    let log = RunLog::from_jsonl(log_jsonl).map_err(to_py)?;
    let s = report::summarize(&log, train_window).map_err(to_py)?;
    json_to_py(py, &serde_json::to_string(&s).map_err(|e| to_py(e.into()))?)
}

#[pymodule]
fn pyicrl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(verbalize_reward, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_reward, m)?)?;
    m.add_function(wrap_pyfunction!(context_probability, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_capacity, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_class::<Run>()?;
    Ok(())
}
