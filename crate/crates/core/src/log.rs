//! Append-only run log, persisted as JSONL.
//!
//! The first line is a header carrying the schema version and everything
//! needed to re-render prompts (template, tokenizer, label space). Step events
//! carry the query text and the timesteps of the context episodes, so every
//! training prompt can be rebuilt and checked against its recorded hash.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabelSpace;
use crate::error::{Error, Result};
use crate::policy::{PromptMode, PromptTemplate};
use crate::runner::Algorithm;
use crate::tokenizer::TokenizerKind;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema_version: u32,
    pub algorithm: Algorithm,
    pub prompt_mode: PromptMode,
    pub template: PromptTemplate,
    pub tokenizer: TokenizerKind,
    pub label_space: LabelSpace,
    pub seed: u64,
    /// SHA-256 over the ordered train and test ids.
    pub split_fingerprint: String,
    pub train_len: usize,
    pub test_len: usize,
    pub eval_every: u64,
    /// Present for approximate runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    pub t: u64,
    pub example_id: String,
    pub query: String,
    pub gold_label: String,
    /// Timesteps of the rendered context episodes, ascending.
    pub context: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_index: Option<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
    pub prompt_hash: String,
    pub prompt_tokens: usize,
    pub prediction: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub invalid_output: bool,
    pub true_reward: u8,
    /// `None` when the reward was withheld from the learner.
    pub observed_reward: Option<u8>,
    pub admitted: bool,
}

impl StepEvent {
    pub fn correct(&self) -> bool {
        self.true_reward > 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPrediction {
    pub id: String,
    pub gold: String,
    pub predicted: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEvent {
    pub t: u64,
    pub accuracy: f64,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing: Vec<String>,
    pub context: Vec<u64>,
    pub predictions: Vec<EvalPrediction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarningEvent {
    pub t: u64,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndEvent {
    pub status: RunStatus,
    pub steps: u64,
    pub window_saturated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Header(Header),
    Step(StepEvent),
    Eval(EvalEvent),
    Warning(WarningEvent),
    End(EndEvent),
}

/// Receives events as the runner produces them.
pub trait EventSink {
    fn emit(&mut self, event: &Event) -> Result<()>;
}

/// Writes each event as one JSON line and flushes, so an aborted run leaves a
/// readable partial log.
pub struct JsonlSink<W: Write> {
    out: W,
    path: String,
}

impl JsonlSink<BufWriter<fs::File>> {
    pub fn create(path: &Path) -> Result<Self> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(f),
            path: path.display().to_string(),
        })
    }
}

impl<W: Write> EventSink for JsonlSink<W> {
    fn emit(&mut self, event: &Event) -> Result<()> {
        let line = serde_json::to_string(event)?;
        let io = |e| Error::io(&self.path, e);
        writeln!(self.out, "{line}").map_err(io)?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub events: Vec<Event>,
}

impl EventSink for RunLog {
    fn emit(&mut self, event: &Event) -> Result<()> {
        self.events.push(event.clone());
        Ok(())
    }
}

impl RunLog {
    pub fn header(&self) -> Option<&Header> {
        match self.events.first() {
            Some(Event::Header(h)) => Some(h),
            _ => None,
        }
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepEvent> {
        self.events.iter().filter_map(|e| match e {
            Event::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn evals(&self) -> impl Iterator<Item = &EvalEvent> {
        self.events.iter().filter_map(|e| match e {
            Event::Eval(s) => Some(s),
            _ => None,
        })
    }

    pub fn warnings(&self) -> impl Iterator<Item = &WarningEvent> {
        self.events.iter().filter_map(|e| match e {
            Event::Warning(s) => Some(s),
            _ => None,
        })
    }

    pub fn end(&self) -> Option<&EndEvent> {
        self.events.iter().rev().find_map(|e| match e {
            Event::End(s) => Some(s),
            _ => None,
        })
    }

    /// No end event: the log was cut short.
    pub fn is_truncated(&self) -> bool {
        self.end().is_none()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses and structurally validates a log. Any problem is reported as an
    /// integrity failure naming the first bad line.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut log = RunLog::default();
        let mut last_t: Option<u64> = None;
        for (i, line) in text.lines().enumerate() {
            let loc = format!("event {} (line {})", i, i + 1);
            if line.trim().is_empty() {
                continue;
            }
            let event: Event = serde_json::from_str(line).map_err(|e| Error::integrity(&loc, e.to_string()))?;
            match (&event, i) {
                (Event::Header(h), 0) => {
                    if h.schema_version != SCHEMA_VERSION {
                        return Err(Error::integrity(
                            &loc,
                            format!("unsupported schema version {}", h.schema_version),
                        ));
                    }
                }
                (Event::Header(_), _) => return Err(Error::integrity(&loc, "header after the first line")),
                (_, 0) => return Err(Error::integrity(&loc, "first line is not a header")),
                (Event::Step(s), _) => {
                    let expected = last_t.map_or(1, |t| t + 1);
                    if s.t != expected {
                        return Err(Error::integrity(
                            &loc,
                            format!("step t={} where t={expected} was expected", s.t),
                        ));
                    }
                    if s.context.windows(2).any(|w| w[0] >= w[1]) || s.context.iter().any(|&c| c >= s.t) {
                        return Err(Error::integrity(&loc, "context timesteps are not ascending past steps"));
                    }
                    last_t = Some(s.t);
                }
                (Event::End(_), _) if log.end().is_some() => {
                    return Err(Error::integrity(&loc, "second end event"));
                }
                _ => {}
            }
            if log.end().is_some() {
                return Err(Error::integrity(&loc, "event after end of run"));
            }
            log.events.push(event);
        }
        if log.events.is_empty() {
            return Err(Error::integrity("event 0 (line 1)", "empty log"));
        }
        Ok(log)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}

/// SHA-256 hex digest of a rendered prompt.
pub fn prompt_hash(markup: &str) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(markup.as_bytes()))
}

/// Fans one event stream out to two sinks.
pub struct Tee<'a, 'b> {
    pub first: &'a mut dyn EventSink,
    pub second: &'b mut dyn EventSink,
}

impl EventSink for Tee<'_, '_> {
    fn emit(&mut self, event: &Event) -> Result<()> {
        self.first.emit(event)?;
        self.second.emit(event)
    }
}
