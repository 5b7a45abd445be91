//! The online learning loops.
//!
//! Training is strictly sequential in `t`. Each concern draws from its own
//! named random stream, and the policy gets a fresh substream per step (and
//! per test item during evaluation), so neither the evaluation fan-out nor a
//! resumed run can shift any other draw.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::context::{
    build_explorative_context, build_naive_context, downsample_context, Context, ContextStore, DownsampleStrategy,
    Episode, EpisodeBuffer, EpisodeCoster, SelectionStrategy,
};
use crate::data::{estimate_capacity, DataConfig, DatasetSplit, Example, LabelSpace, TokenBudget};
use crate::error::{Error, Result};
use crate::log::{
    prompt_hash, EndEvent, EvalEvent, EvalPrediction, Event, EventSink, Header, RunLog, RunStatus, StepEvent,
    WarningEvent, SCHEMA_VERSION,
};
use crate::policy::{render_prompt, Policy, PolicyBackend, PredictRequest, Prediction, PromptMode, PromptTemplate};
use crate::reward::{evaluate_reward, is_correct, RewardMode, RewardValue};
use crate::rng::{self, streams, StreamRng};
use crate::tokenizer::{Tokenizer, TokenizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Naive,
    #[default]
    Explorative,
    Approximate,
    SupervisedIcl,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Naive => "naive",
            Algorithm::Explorative => "explorative",
            Algorithm::Approximate => "approximate",
            Algorithm::SupervisedIcl => "supervised_icl",
        }
    }

    fn default_admission(self) -> Admission {
        match self {
            Algorithm::Naive | Algorithm::SupervisedIcl => Admission::All,
            Algorithm::Explorative | Algorithm::Approximate => Admission::PositiveOnly,
        }
    }
}

/// Which episodes enter the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Admission {
    PositiveOnly,
    All,
    NegativeOnly,
}

impl Admission {
    fn admits(self, r: RewardValue) -> bool {
        match self {
            Admission::All => true,
            Admission::PositiveOnly => r.observed && r.value > 0,
            Admission::NegativeOnly => r.observed && r.value == 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub p_keep: f64,
    pub k: usize,
    pub selection: SelectionStrategy,
    pub downsample: DownsampleStrategy,
    pub reward_mode: RewardMode,
    /// Unset means the algorithm's own rule (or the one the reward mode implies).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buffer_admission: Option<Admission>,
    pub window_tokens: usize,
    pub eval_every: u64,
    pub train_window: usize,
    pub seed: u64,
    /// Stop after this many training steps; the whole train stream otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    pub eval_concurrency: usize,
    pub backend: PolicyBackend,
    pub template: PromptTemplate,
    pub tokenizer: TokenizerKind,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::default(),
            p_keep: 0.1,
            k: 8,
            selection: SelectionStrategy::Uniform,
            downsample: DownsampleStrategy::Unbiased,
            reward_mode: RewardMode::Standard,
            buffer_admission: None,
            window_tokens: 131_072,
            eval_every: 500,
            train_window: 256,
            seed: 0,
            max_steps: None,
            eval_concurrency: 4,
            backend: PolicyBackend::FrequencyLearner { epsilon: 0.05 },
            template: PromptTemplate::default(),
            tokenizer: TokenizerKind::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// The admission rule in force after reward-mode overrides.
    pub fn admission(&self) -> Admission {
        match self.reward_mode {
            RewardMode::PositiveOnlyVisible => Admission::PositiveOnly,
            RewardMode::NegativeOnlyVisible => Admission::NegativeOnly,
            RewardMode::None => Admission::All,
            _ => self.buffer_admission.unwrap_or(self.algorithm.default_admission()),
        }
    }

    pub fn prompt_mode(&self) -> PromptMode {
        match (self.algorithm, self.reward_mode) {
            (Algorithm::SupervisedIcl, _) => PromptMode::Icl,
            (_, RewardMode::None) => PromptMode::Unrewarded,
            _ => PromptMode::Icrl,
        }
    }

    /// Every problem with the configuration, not just the first.
    pub fn validate(&self, labels: Option<&LabelSpace>) -> Vec<String> {
        let mut errs = Vec::new();
        if !(0.0..=1.0).contains(&self.p_keep) {
            errs.push(format!("p_keep must be in [0, 1], got {}", self.p_keep));
        }
        if self.k == 0 {
            errs.push("K must be ≥ 1".to_string());
        }
        if self.eval_every == 0 {
            errs.push("eval_every must be ≥ 1".to_string());
        }
        if self.train_window == 0 {
            errs.push("train_window must be ≥ 1".to_string());
        }
        if self.window_tokens == 0 {
            errs.push("window_tokens must be ≥ 1".to_string());
        }
        if self.eval_concurrency == 0 {
            errs.push("eval_concurrency must be ≥ 1".to_string());
        }
        if self.data.test_n == 0 {
            errs.push("data.test_n must be ≥ 1".to_string());
        }
        if let Err(e) = self.reward_mode.validate() {
            errs.push(e);
        }
        let implied = match self.reward_mode {
            RewardMode::PositiveOnlyVisible => Some(Admission::PositiveOnly),
            RewardMode::NegativeOnlyVisible => Some(Admission::NegativeOnly),
            RewardMode::None => Some(Admission::All),
            _ => None,
        };
        if let (Some(implied), Some(explicit)) = (implied, self.buffer_admission) {
            if implied != explicit {
                errs.push(format!(
                    "reward_mode {} implies buffer_admission {:?}, but {:?} was set",
                    self.reward_mode.name(),
                    implied,
                    explicit
                ));
            }
        }
        if self.algorithm == Algorithm::Approximate && self.admission() != Admission::PositiveOnly {
            errs.push("approximate requires positive_only buffer admission".to_string());
        }
        errs.extend(self.backend.validate(labels));
        errs
    }
}

/// Context chosen for one step.
struct StepContext {
    entries: Vec<Arc<Episode>>,
    index: Option<usize>,
    truncated: bool,
}

/// Logged answers to reuse instead of querying the backend again.
#[derive(Debug, Default, Clone)]
pub struct ReplayCache {
    steps: HashMap<u64, Prediction>,
    evals: HashMap<(u64, String), String>,
}

impl ReplayCache {
    pub fn from_log(log: &RunLog) -> Self {
        let mut cache = Self::default();
        for s in log.steps() {
            cache.steps.insert(
                s.t,
                Prediction {
                    label: s.prediction.clone(),
                    raw_text: s.prediction.clone(),
                    prompt_tokens: 0,
                    completion_tokens: 0,
                    invalid_output: s.invalid_output,
                },
            );
        }
        for e in log.evals() {
            for p in &e.predictions {
                cache.evals.insert((e.t, p.id.clone()), p.predicted.clone());
            }
        }
        cache
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty() && self.evals.is_empty()
    }
}

pub struct Runner<'a> {
    config: &'a RunConfig,
    split: &'a DatasetSplit,
    labels: &'a LabelSpace,
    policy: &'a dyn Policy,
    tokenizer: Box<dyn Tokenizer>,
    replay: ReplayCache,
}

impl<'a> Runner<'a> {
    pub fn new(config: &'a RunConfig, split: &'a DatasetSplit, labels: &'a LabelSpace, policy: &'a dyn Policy) -> Self {
        Self {
            config,
            split,
            labels,
            policy,
            tokenizer: config.tokenizer.build(),
            replay: ReplayCache::default(),
        }
    }

    /// Reuses the predictions of an earlier (possibly aborted) run of the same
    /// configuration, so resuming never re-queries finished steps.
    pub fn with_replay(mut self, replay: ReplayCache) -> Self {
        self.replay = replay;
        self
    }

    pub fn header(&self) -> Header {
        Header {
            schema_version: SCHEMA_VERSION,
            algorithm: self.config.algorithm,
            prompt_mode: self.config.prompt_mode(),
            template: self.config.template.clone(),
            tokenizer: self.config.tokenizer,
            label_space: self.labels.clone(),
            seed: self.config.seed,
            split_fingerprint: self.split.fingerprint(),
            train_len: self.split.train.len(),
            test_len: self.split.test.len(),
            eval_every: self.config.eval_every,
            k: (self.config.algorithm == Algorithm::Approximate).then_some(self.config.k),
        }
    }

    fn steps(&self) -> usize {
        let n = self.split.train.len();
        self.config.max_steps.map_or(n, |m| m.min(n))
    }

    /// Runs to completion, streaming events into `sink`. On a transport
    /// failure an aborted end event is emitted before the error is returned.
    pub fn run(&self, sink: &mut dyn EventSink) -> Result<()> {
        let errs = self.config.validate(Some(self.labels));
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        sink.emit(&Event::Header(self.header()))?;
        let mut state = LoopState::default();
        let outcome = match self.config.algorithm {
            Algorithm::SupervisedIcl => self.supervised_icl(sink, &mut state),
            _ => self.icrl(sink, &mut state),
        };
        let end = EndEvent {
            status: if outcome.is_ok() {
                RunStatus::Completed
            } else {
                RunStatus::Aborted
            },
            steps: state.steps_done,
            window_saturated: state.window_saturated,
            error: outcome.as_ref().err().map(|e| e.to_string()),
        };
        sink.emit(&Event::End(end))?;
        outcome
    }

    fn coster(&self) -> EpisodeCoster<'_> {
        EpisodeCoster::new(
            self.tokenizer.as_ref(),
            &self.config.template,
            self.config.prompt_mode(),
        )
    }

    fn budget(&self) -> TokenBudget {
        TokenBudget::for_examples(
            self.config.window_tokens,
            self.tokenizer.as_ref(),
            &self.config.template,
            self.config.prompt_mode(),
            self.split.train.iter().chain(self.split.test.iter()),
        )
    }

    fn icrl(&self, sink: &mut dyn EventSink, state: &mut LoopState) -> Result<()> {
        let cfg = self.config;
        let mode = cfg.prompt_mode();
        let admission = cfg.admission();
        let coster = self.coster();
        let budget = self.budget();
        let seed = cfg.seed;

        let mut bernoulli = rng::stream(seed, streams::CONTEXT_BERNOULLI);
        let mut selection = rng::stream(seed, streams::CONTEXT_SELECTION);
        let mut down = rng::stream(seed, streams::DOWNSAMPLE);
        let mut noise = rng::stream(seed, streams::REWARD_NOISE);

        let mut buffer = EpisodeBuffer::new();
        let mut store = match cfg.algorithm {
            Algorithm::Approximate => Some(ContextStore::new(cfg.k)?),
            _ => None,
        };
        let mut warned_truncation = false;
        let mut warned_fallback = false;

        self.evaluate(0, &[], sink)?;

        for (i, example) in self.split.train.iter().take(self.steps()).enumerate() {
            let t = i as u64 + 1;
            let ctx = match (cfg.algorithm, store.as_ref()) {
                (Algorithm::Approximate, Some(store)) => {
                    let sel = store.select(cfg.selection, &buffer, cfg.p_keep, &mut selection)?;
                    if sel.fell_back_to_uniform && !warned_fallback {
                        warned_fallback = true;
                        warn(sink, t, "exact selection weights underflowed; selecting uniformly")?;
                    }
                    let stored = store.get(sel.index);
                    let fitted = downsample_context(stored, budget, DownsampleStrategy::EndBiased, &coster, &mut down);
                    let truncated = fitted.len() < stored.len();
                    if truncated {
                        state.window_saturated = true;
                        if !warned_truncation {
                            warned_truncation = true;
                            warn(
                                sink,
                                t,
                                "stored context exceeds the window; rendering its longest fitting suffix",
                            )?;
                        }
                    }
                    StepContext {
                        entries: fitted.entries().to_vec(),
                        index: Some(sel.index),
                        truncated,
                    }
                }
                (Algorithm::Naive, _) => StepContext {
                    entries: build_naive_context(&buffer, budget, &coster).entries().to_vec(),
                    index: None,
                    truncated: false,
                },
                _ => {
                    let drawn = build_explorative_context(&buffer, cfg.p_keep, &mut bernoulli, &coster);
                    let fitted = downsample_context(&drawn, budget, cfg.downsample, &coster, &mut down);
                    StepContext {
                        entries: fitted.entries().to_vec(),
                        index: None,
                        truncated: false,
                    }
                }
            };

            let transcript = render_prompt(&ctx.entries, example, &cfg.template, mode)?;
            let markup = cfg.template.to_markup(&transcript);
            let prediction = match self.replay.steps.get(&t) {
                Some(p) => p.clone(),
                None => {
                    let req = PredictRequest {
                        transcript: &transcript,
                        context: &ctx.entries,
                        query: example,
                        mode,
                    };
                    let mut prng = rng::substream(seed, streams::POLICY_SAMPLING, &[t]);
                    self.policy.predict(&req, self.labels, &mut prng)?
                }
            };
            check_label(self.labels, &prediction.label, t)?;

            let reward = evaluate_reward(example, &prediction.label, cfg.reward_mode, &mut noise);
            let admitted = admission.admits(reward);
            let episode = Arc::new(Episode::new(t, example.clone(), prediction.label.clone(), reward));
            if admitted {
                buffer.push(Arc::clone(&episode))?;
                if let Some(store) = store.as_mut() {
                    store.expand(&episode, cfg.p_keep, &mut bernoulli, &coster)?;
                }
            }

            sink.emit(&Event::Step(StepEvent {
                t,
                example_id: example.id.clone(),
                query: example.query.clone(),
                gold_label: example.gold_label.clone(),
                context: ctx.entries.iter().map(|e| e.t).collect(),
                context_index: ctx.index,
                truncated: ctx.truncated,
                prompt_hash: prompt_hash(&markup),
                prompt_tokens: self.tokenizer.count(&markup),
                prediction: prediction.label.clone(),
                invalid_output: prediction.invalid_output,
                true_reward: u8::from(is_correct(example, &prediction.label)),
                observed_reward: reward.observed.then_some(reward.value),
                admitted,
            }))?;
            state.steps_done = t;

            if t.is_multiple_of(cfg.eval_every) {
                self.evaluate(t, &ctx.entries, sink)?;
            }
        }
        Ok(())
    }

    /// Gold demonstrations in observation order, evaluated at every eval point
    /// until the number of examples would exceed the window's capacity.
    fn supervised_icl(&self, sink: &mut dyn EventSink, state: &mut LoopState) -> Result<()> {
        let budget = self.budget();
        let capacity = estimate_capacity(
            self.split,
            self.labels,
            self.tokenizer.as_ref(),
            &self.config.template,
            budget,
        );
        let limit = capacity.min(self.steps()) as u64;
        let coster = self.coster();
        let mut buffer = EpisodeBuffer::new();
        let mut t = 0u64;
        loop {
            while (buffer.len() as u64) < t {
                let n = buffer.len() as u64 + 1;
                let ex = &self.split.train[n as usize - 1];
                buffer.push(Arc::new(Episode::new(
                    n,
                    ex.clone(),
                    ex.gold_label.clone(),
                    RewardValue::observed(1),
                )))?;
            }
            let ctx: Context = build_naive_context(&buffer, budget, &coster);
            if ctx.len() < buffer.len() {
                state.window_saturated = true;
            }
            self.evaluate(t, ctx.entries(), sink)?;
            state.steps_done = t;
            t += self.config.eval_every;
            if t > limit {
                break;
            }
        }
        Ok(())
    }

    fn evaluate(&self, t: u64, context: &[Arc<Episode>], sink: &mut dyn EventSink) -> Result<()> {
        let cached: Option<Vec<Option<String>>> = if self.replay.evals.is_empty() {
            None
        } else {
            Some(
                self.split
                    .test
                    .iter()
                    .map(|e| self.replay.evals.get(&(t, e.id.clone())).cloned())
                    .collect(),
            )
        };
        let event = evaluate_test(
            self.policy,
            context,
            &self.split.test,
            self.labels,
            &self.config.template,
            self.config.prompt_mode(),
            self.config.seed,
            t,
            self.config.eval_concurrency,
            cached.as_deref(),
        );
        sink.emit(&Event::Eval(event))
    }
}

#[derive(Default)]
struct LoopState {
    steps_done: u64,
    window_saturated: bool,
}

fn warn(sink: &mut dyn EventSink, t: u64, message: &str) -> Result<()> {
    tracing::warn!(t, "{message}");
    sink.emit(&Event::Warning(WarningEvent {
        t,
        message: message.to_string(),
    }))
}

fn check_label(labels: &LabelSpace, label: &str, t: u64) -> Result<()> {
    if labels.contains(label) {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "step t={t}: backend returned {label:?}, which is not in the label space"
        )))
    }
}

/// Predicts every test example against `context`, fanning out over
/// `concurrency` threads. Item `i` always uses the policy substream `(t, i)`.
/// Failed items are listed as missing and the event is marked incomplete.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_test(
    policy: &dyn Policy,
    context: &[Arc<Episode>],
    test: &[Example],
    labels: &LabelSpace,
    template: &PromptTemplate,
    mode: PromptMode,
    seed: u64,
    t: u64,
    concurrency: usize,
    cached: Option<&[Option<String>]>,
) -> EvalEvent {
    let predict_one = |idx: usize| -> Result<String> {
        if let Some(Some(label)) = cached.map(|c| &c[idx]) {
            return Ok(label.clone());
        }
        let example = &test[idx];
        let transcript = render_prompt(context, example, template, mode)?;
        let req = PredictRequest {
            transcript: &transcript,
            context,
            query: example,
            mode,
        };
        let mut prng: StreamRng = rng::substream(seed, streams::POLICY_EVAL, &[t, idx as u64]);
        let p = policy.predict(&req, labels, &mut prng)?;
        if !labels.contains(&p.label) {
            return Err(Error::contract(format!(
                "label {:?} is outside the label space",
                p.label
            )));
        }
        Ok(p.label)
    };

    let workers = concurrency.clamp(1, test.len().max(1));
    let mut results: Vec<Option<Result<String>>> = (0..test.len()).map(|_| None).collect();
    if workers == 1 {
        for (i, slot) in results.iter_mut().enumerate() {
            *slot = Some(predict_one(i));
        }
    } else {
        let chunk = test.len().div_ceil(workers);
        std::thread::scope(|s| {
            for (c, slots) in results.chunks_mut(chunk).enumerate() {
                let predict_one = &predict_one;
                s.spawn(move || {
                    for (j, slot) in slots.iter_mut().enumerate() {
                        *slot = Some(predict_one(c * chunk + j));
                    }
                });
            }
        });
    }

    let mut predictions = Vec::with_capacity(test.len());
    let mut missing = Vec::new();
    let mut correct = 0usize;
    for (example, result) in test.iter().zip(results) {
        match result.expect("every slot is filled") {
            Ok(label) => {
                correct += usize::from(is_correct(example, &label));
                predictions.push(EvalPrediction {
                    id: example.id.clone(),
                    gold: example.gold_label.clone(),
                    predicted: label,
                });
            }
            Err(e) => {
                tracing::warn!(t, id = %example.id, "test prediction failed: {e}");
                missing.push(example.id.clone());
            }
        }
    }
    let accuracy = if predictions.is_empty() {
        0.0
    } else {
        correct as f64 / predictions.len() as f64
    };
    EvalEvent {
        t,
        accuracy,
        complete: missing.is_empty(),
        missing,
        context: context.iter().map(|e| e.t).collect(),
        predictions,
    }
}

/// Runs `config` in memory. The log is returned even when the run aborts.
pub fn run_to_log(
    config: &RunConfig,
    split: &DatasetSplit,
    labels: &LabelSpace,
    policy: &dyn Policy,
) -> (RunLog, Result<()>) {
    let mut log = RunLog::default();
    let result = Runner::new(config, split, labels, policy).run(&mut log);
    (log, result)
}
