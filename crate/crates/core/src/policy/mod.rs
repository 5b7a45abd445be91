//! Prompt rendering and label prediction.
//!
//! Every [`Policy`] honours the constrained-output contract: the returned
//! label is always a member of the task's [`LabelSpace`].

mod prompt;
pub mod remote;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::context::Episode;
use crate::data::{Example, LabelSpace};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub use prompt::{
    render_prompt, ChatMessage, ChatTranscript, Dialect, PromptMode, PromptTemplate, Role, SYSTEM_ICL, SYSTEM_ICRL,
};
pub use remote::{HttpResponse, InvalidOutputPolicy, RemoteChat, RemoteConfig, Transport, UreqTransport};

/// Backend configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyBackend {
    RemoteChat(RemoteConfig),
    /// Always the gold label.
    Oracle,
    Constant {
        label: String,
    },
    /// Repeats the most recent positively rewarded label in context; a model of collapse.
    ParrotLastPositive,
    /// Nearest-neighbour by word overlap over positive context episodes,
    /// uniform random with probability `epsilon`.
    FrequencyLearner {
        epsilon: f64,
    },
    /// Fixed answers keyed by example id.
    Scripted {
        labels: BTreeMap<String, String>,
        #[serde(default)]
        default: Option<String>,
    },
}

impl PolicyBackend {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyBackend::RemoteChat(_) => "remote_chat",
            PolicyBackend::Oracle => "oracle",
            PolicyBackend::Constant { .. } => "constant",
            PolicyBackend::ParrotLastPositive => "parrot_last_positive",
            PolicyBackend::FrequencyLearner { .. } => "frequency_learner",
            PolicyBackend::Scripted { .. } => "scripted",
        }
    }

    pub fn is_remote(&self) -> bool {
        matches!(self, PolicyBackend::RemoteChat(_))
    }

    pub fn validate(&self, labels: Option<&LabelSpace>) -> Vec<String> {
        let mut errs = Vec::new();
        let check_label = |errs: &mut Vec<String>, what: &str, l: &str| {
            if let Some(space) = labels {
                if !space.contains(l) {
                    errs.push(format!("{what} {l:?} is not in the label space"));
                }
            }
        };
        match self {
            PolicyBackend::Constant { label } => check_label(&mut errs, "backend.label", label),
            PolicyBackend::FrequencyLearner { epsilon } if !(0.0..=1.0).contains(epsilon) => {
                errs.push(format!("backend.epsilon must be in [0, 1], got {epsilon}"))
            }
            PolicyBackend::Scripted { labels: map, default } => {
                for l in map.values().chain(default.iter()) {
                    check_label(&mut errs, "scripted label", l);
                }
            }
            PolicyBackend::RemoteChat(cfg) => errs.extend(cfg.validate()),
            _ => {}
        }
        errs
    }

    /// Builds the policy. Only `remote_chat` ever touches `transport`.
    pub fn build(&self, transport: Arc<dyn Transport>) -> Box<dyn Policy> {
        match self {
            PolicyBackend::RemoteChat(cfg) => Box::new(RemoteChat::new(cfg.clone(), transport)),
            PolicyBackend::Oracle => Box::new(Oracle),
            PolicyBackend::Constant { label } => Box::new(Constant(label.clone())),
            PolicyBackend::ParrotLastPositive => Box::new(ParrotLastPositive),
            PolicyBackend::FrequencyLearner { epsilon } => Box::new(FrequencyLearner { epsilon: *epsilon }),
            PolicyBackend::Scripted { labels, default } => Box::new(Scripted {
                labels: labels.clone().into_iter().collect(),
                default: default.clone(),
            }),
        }
    }

    pub fn build_default(&self) -> Box<dyn Policy> {
        self.build(Arc::new(UreqTransport::default()))
    }
}

/// Everything a backend may look at for one prediction.
pub struct PredictRequest<'a> {
    pub transcript: &'a ChatTranscript,
    pub context: &'a [Arc<Episode>],
    pub query: &'a Example,
    pub mode: PromptMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub raw_text: String,
    /// Server-reported usage; zero for mocks.
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// The completion matched no label and was mapped by fallback.
    pub invalid_output: bool,
}

impl Prediction {
    fn mock(label: impl Into<String>) -> Self {
        let label = label.into();
        Self {
            raw_text: label.clone(),
            label,
            prompt_tokens: 0,
            completion_tokens: 0,
            invalid_output: false,
        }
    }
}

pub trait Policy: Send + Sync {
    fn predict(&self, request: &PredictRequest<'_>, labels: &LabelSpace, rng: &mut StreamRng) -> Result<Prediction>;

    fn is_remote(&self) -> bool {
        false
    }
}

fn uniform_label(labels: &LabelSpace, rng: &mut StreamRng) -> String {
    labels.labels()[rng.random_range(0..labels.len())].clone()
}

struct Oracle;

impl Policy for Oracle {
    fn predict(&self, req: &PredictRequest<'_>, labels: &LabelSpace, _: &mut StreamRng) -> Result<Prediction> {
        if !labels.contains(&req.query.gold_label) {
            return Err(Error::contract(format!(
                "gold label {:?} is outside the label space",
                req.query.gold_label
            )));
        }
        Ok(Prediction::mock(req.query.gold_label.clone()))
    }
}

struct Constant(String);

impl Policy for Constant {
    fn predict(&self, _: &PredictRequest<'_>, labels: &LabelSpace, _: &mut StreamRng) -> Result<Prediction> {
        if !labels.contains(&self.0) {
            return Err(Error::contract(format!(
                "constant label {:?} is outside the label space",
                self.0
            )));
        }
        Ok(Prediction::mock(self.0.clone()))
    }
}

fn shown_label(e: &Episode, mode: PromptMode) -> &str {
    match mode {
        PromptMode::Icl => &e.example.gold_label,
        _ => &e.prediction,
    }
}

/// Episodes the learner can treat as correct demonstrations.
fn positives<'a>(req: &'a PredictRequest<'_>) -> impl Iterator<Item = &'a Arc<Episode>> + 'a {
    let mode = req.mode;
    req.context
        .iter()
        .filter(move |e| mode == PromptMode::Icl || e.reward.is_positive())
}

struct ParrotLastPositive;

impl Policy for ParrotLastPositive {
    fn predict(&self, req: &PredictRequest<'_>, labels: &LabelSpace, rng: &mut StreamRng) -> Result<Prediction> {
        let last = positives(req)
            .map(|e| shown_label(e, req.mode))
            .filter(|l| labels.contains(l))
            .last();
        Ok(Prediction::mock(match last {
            Some(l) => l.to_string(),
            None => uniform_label(labels, rng),
        }))
    }
}

fn words(text: &str) -> HashSet<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Word-overlap count between two queries.
pub fn word_overlap(a: &str, b: &str) -> usize {
    let a = words(a);
    words(b).iter().filter(|w| a.contains(*w)).count()
}

struct FrequencyLearner {
    epsilon: f64,
}

impl FrequencyLearner {
    /// The deterministic part of the rule; `None` when nothing in context
    /// shares a word with the query.
    fn rule(req: &PredictRequest<'_>, labels: &LabelSpace) -> Option<String> {
        let query = words(&req.query.query);
        let mut freq: HashMap<&str, usize> = HashMap::new();
        let mut best = 0usize;
        let mut tied: Vec<&str> = Vec::new();
        for e in positives(req) {
            let label = shown_label(e, req.mode);
            if !labels.contains(label) {
                continue;
            }
            *freq.entry(label).or_default() += 1;
            let overlap = words(&e.example.query).iter().filter(|w| query.contains(*w)).count();
            if overlap == 0 {
                continue;
            }
            match overlap.cmp(&best) {
                std::cmp::Ordering::Greater => {
                    best = overlap;
                    tied.clear();
                    tied.push(label);
                }
                std::cmp::Ordering::Equal => tied.push(label),
                std::cmp::Ordering::Less => {}
            }
        }
        tied.into_iter()
            .max_by(|a, b| freq[a].cmp(&freq[b]).then_with(|| b.cmp(a)))
            .map(str::to_string)
    }
}

impl Policy for FrequencyLearner {
    fn predict(&self, req: &PredictRequest<'_>, labels: &LabelSpace, rng: &mut StreamRng) -> Result<Prediction> {
        let explore = rng.random_bool(self.epsilon);
        let label = match (explore, Self::rule(req, labels)) {
            (false, Some(l)) => l,
            _ => uniform_label(labels, rng),
        };
        Ok(Prediction::mock(label))
    }
}

/// Replays the frequency learner's greedy rule, for oracles in tests.
pub fn frequency_rule(
    context: &[Arc<Episode>],
    query: &Example,
    mode: PromptMode,
    labels: &LabelSpace,
) -> Option<String> {
    let transcript = ChatTranscript {
        messages: Vec::new(),
        answer_prefix: String::new(),
    };
    FrequencyLearner::rule(
        &PredictRequest {
            transcript: &transcript,
            context,
            query,
            mode,
        },
        labels,
    )
}

struct Scripted {
    labels: HashMap<String, String>,
    default: Option<String>,
}

impl Policy for Scripted {
    fn predict(&self, req: &PredictRequest<'_>, labels: &LabelSpace, _: &mut StreamRng) -> Result<Prediction> {
        let label = self
            .labels
            .get(&req.query.id)
            .or(self.default.as_ref())
            .ok_or_else(|| Error::contract(format!("no scripted answer for example {:?}", req.query.id)))?;
        if !labels.contains(label) {
            return Err(Error::contract(format!(
                "scripted label {label:?} is outside the label space"
            )));
        }
        Ok(Prediction::mock(label.clone()))
    }
}

/// How a raw completion was mapped onto the label space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelMatch {
    Exact(String),
    /// The completion starts with this label (longest such label).
    Prefix(String),
    /// Invalid: the completion is a truncation of this label (lexicographically first).
    Truncated(String),
    Invalid,
}

/// Maps a completion onto the label space: exact match after trimming (and
/// dropping a repeated answer prefix), else the longest label the completion
/// starts with, else the lexicographically first label the completion is a
/// prefix of.
pub fn map_completion(raw: &str, labels: &LabelSpace, answer_prefix: &str) -> LabelMatch {
    let mut s = raw.trim();
    let prefix = answer_prefix.trim();
    if !prefix.is_empty() {
        if let Some(rest) = s.strip_prefix(prefix) {
            s = rest.trim();
        }
    }
    if s.is_empty() {
        return LabelMatch::Invalid;
    }
    if labels.contains(s) {
        return LabelMatch::Exact(s.to_string());
    }
    if let Some(l) = labels
        .labels()
        .iter()
        .filter(|l| s.starts_with(l.as_str()))
        .max_by(|a, b| a.len().cmp(&b.len()).then_with(|| b.cmp(a)))
    {
        return LabelMatch::Prefix(l.clone());
    }
    if let Some(l) = labels.labels().iter().filter(|l| l.starts_with(s)).min() {
        return LabelMatch::Truncated(l.clone());
    }
    LabelMatch::Invalid
}

/// Last-resort total mapping: the label sharing the longest character prefix
/// with the completion, ties to the lexicographically smallest.
pub fn closest_label(raw: &str, labels: &LabelSpace) -> String {
    let s = raw.trim();
    let common = |l: &str| s.chars().zip(l.chars()).take_while(|(a, b)| a == b).count();
    labels
        .labels()
        .iter()
        .max_by(|a, b| common(a).cmp(&common(b)).then_with(|| b.cmp(a)))
        .expect("label space is non-empty")
        .clone()
}
