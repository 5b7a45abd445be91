//! Episode buffers and context construction.
//!
//! A [`Context`] is always a subsequence of its buffer in ascending timestep
//! order. Its `token_len` is the summed per-episode token cost under one
//! [`EpisodeCoster`] (tokenizer + template + render mode); for the bundled
//! tokenizers this equals the rendered prompt length minus the zero-shot
//! prompt length.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Example, TokenBudget};
use crate::error::{Error, Result};
use crate::policy::{PromptMode, PromptTemplate};
use crate::reward::RewardValue;
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub t: u64,
    pub example: Example,
    pub prediction: String,
    pub reward: RewardValue,
}

impl Episode {
    pub fn new(t: u64, example: Example, prediction: impl Into<String>, reward: RewardValue) -> Self {
        assert!(t >= 1, "episode timesteps start at 1");
        Self {
            t,
            example,
            prediction: prediction.into(),
            reward,
        }
    }
}

/// Ordered store of retained episodes, strictly increasing in `t`.
#[derive(Debug, Clone, Default)]
pub struct EpisodeBuffer {
    episodes: Vec<Arc<Episode>>,
}

impl EpisodeBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, episode: Arc<Episode>) -> Result<()> {
        if let Some(last) = self.episodes.last() {
            if episode.t <= last.t {
                return Err(Error::contract(format!(
                    "buffer timesteps must increase: {} after {}",
                    episode.t, last.t
                )));
            }
        }
        self.episodes.push(episode);
        Ok(())
    }

    pub fn episodes(&self) -> &[Arc<Episode>] {
        &self.episodes
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }
}

impl FromIterator<Episode> for EpisodeBuffer {
    fn from_iter<I: IntoIterator<Item = Episode>>(iter: I) -> Self {
        let mut b = EpisodeBuffer::new();
        for e in iter {
            b.push(Arc::new(e)).expect("increasing timesteps");
        }
        b
    }
}

/// Per-episode token cost under a fixed tokenizer, template and render mode.
///
/// Costs are cached by timestep; a new tokenizer or template means a new coster.
pub struct EpisodeCoster<'a> {
    tokenizer: &'a dyn Tokenizer,
    template: &'a PromptTemplate,
    mode: PromptMode,
    cache: Mutex<HashMap<u64, usize>>,
}

impl<'a> EpisodeCoster<'a> {
    pub fn new(tokenizer: &'a dyn Tokenizer, template: &'a PromptTemplate, mode: PromptMode) -> Self {
        Self {
            tokenizer,
            template,
            mode,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn cost(&self, episode: &Episode) -> usize {
        if let Some(c) = self.cache.lock().unwrap().get(&episode.t) {
            return *c;
        }
        let c = self.template.episode_tokens(self.tokenizer, episode, self.mode);
        self.cache.lock().unwrap().insert(episode.t, c);
        c
    }

    pub fn total(&self, entries: &[Arc<Episode>]) -> usize {
        entries.iter().map(|e| self.cost(e)).sum()
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer
    }

    pub fn template(&self) -> &PromptTemplate {
        self.template
    }

    pub fn mode(&self) -> PromptMode {
        self.mode
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Context {
    entries: Vec<Arc<Episode>>,
    token_len: usize,
}

impl Context {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(entries: Vec<Arc<Episode>>, coster: &EpisodeCoster<'_>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].t < w[1].t));
        let token_len = coster.total(&entries);
        Self { entries, token_len }
    }

    pub fn entries(&self) -> &[Arc<Episode>] {
        &self.entries
    }

    pub fn timesteps(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.t).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn token_len(&self) -> usize {
        self.token_len
    }

    fn push(&mut self, episode: Arc<Episode>, cost: usize) {
        debug_assert!(self.entries.last().is_none_or(|l| l.t < episode.t));
        self.entries.push(episode);
        self.token_len += cost;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleStrategy {
    #[default]
    Unbiased,
    StartBiased,
    EndBiased,
}

/// All episodes if they fit, otherwise the longest fitting suffix.
pub fn build_naive_context(buffer: &EpisodeBuffer, budget: TokenBudget, coster: &EpisodeCoster<'_>) -> Context {
    longest_suffix(buffer.episodes(), budget, coster)
}

fn longest_suffix(entries: &[Arc<Episode>], budget: TokenBudget, coster: &EpisodeCoster<'_>) -> Context {
    let available = budget.available();
    let mut used = 0usize;
    let mut start = entries.len();
    while start > 0 {
        let c = coster.cost(&entries[start - 1]);
        if used + c > available {
            break;
        }
        used += c;
        start -= 1;
    }
    Context {
        entries: entries[start..].to_vec(),
        token_len: used,
    }
}

fn longest_prefix(entries: &[Arc<Episode>], budget: TokenBudget, coster: &EpisodeCoster<'_>) -> Context {
    let available = budget.available();
    let mut used = 0usize;
    let mut end = 0;
    while end < entries.len() {
        let c = coster.cost(&entries[end]);
        if used + c > available {
            break;
        }
        used += c;
        end += 1;
    }
    Context {
        entries: entries[..end].to_vec(),
        token_len: used,
    }
}

/// Each buffered episode kept independently with probability `p_keep`,
/// drawn in ascending `t`. Every call makes fresh draws.
pub fn build_explorative_context<R: Rng + ?Sized>(
    buffer: &EpisodeBuffer,
    p_keep: f64,
    rng: &mut R,
    coster: &EpisodeCoster<'_>,
) -> Context {
    let mut ctx = Context::empty();
    for e in buffer.episodes() {
        if rng.random_bool(p_keep) {
            ctx.push(Arc::clone(e), coster.cost(e));
        }
    }
    ctx
}

/// Shrinks `ctx` until it fits `budget`; a no-op when it already fits.
pub fn downsample_context<R: Rng + ?Sized>(
    ctx: &Context,
    budget: TokenBudget,
    strategy: DownsampleStrategy,
    coster: &EpisodeCoster<'_>,
    rng: &mut R,
) -> Context {
    if budget.fits(ctx.token_len) {
        return ctx.clone();
    }
    match strategy {
        DownsampleStrategy::StartBiased => longest_prefix(&ctx.entries, budget, coster),
        DownsampleStrategy::EndBiased => longest_suffix(&ctx.entries, budget, coster),
        DownsampleStrategy::Unbiased => {
            let mut entries = ctx.entries.clone();
            let mut len = ctx.token_len;
            while !budget.fits(len) && !entries.is_empty() {
                let i = rng.random_range(0..entries.len());
                len -= coster.cost(&entries.remove(i));
            }
            Context {
                entries,
                token_len: len,
            }
        }
    }
}

fn check_subsequence(ctx: &[Arc<Episode>], buffer: &EpisodeBuffer) -> Result<()> {
    let mut it = buffer.episodes().iter();
    for e in ctx {
        if !it.any(|b| b.t == e.t) {
            return Err(Error::contract(format!(
                "context episode t={} is not an in-order member of the buffer",
                e.t
            )));
        }
    }
    Ok(())
}

/// `ln(p^k (1-p)^(n-k))` for a context of `k` episodes drawn from `n`.
/// Returns `-inf` for impossible contexts (e.g. `p = 0` and `k > 0`).
pub fn log_probability_for_counts(kept: usize, buffer_len: usize, p_keep: f64) -> f64 {
    debug_assert!(kept <= buffer_len);
    let term = |count: usize, p: f64| {
        if count == 0 {
            0.0
        } else {
            count as f64 * p.ln()
        }
    };
    term(kept, p_keep) + term(buffer_len - kept, 1.0 - p_keep)
}

/// Log-probability that the Bernoulli(`p_keep`) process over `buffer` yields `ctx`.
pub fn log_context_probability(ctx: &[Arc<Episode>], buffer: &EpisodeBuffer, p_keep: f64) -> Result<f64> {
    check_subsequence(ctx, buffer)?;
    Ok(log_probability_for_counts(ctx.len(), buffer.len(), p_keep))
}

pub fn context_probability(ctx: &[Arc<Episode>], buffer: &EpisodeBuffer, p_keep: f64) -> Result<f64> {
    log_context_probability(ctx, buffer, p_keep).map(f64::exp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    #[default]
    Uniform,
    Exact,
}

/// The `K` cached contexts of Approximate ICRL.
#[derive(Debug, Clone)]
pub struct ContextStore {
    contexts: Vec<Context>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    pub index: usize,
    /// Exact weights all underflowed and a uniform draw was used instead.
    pub fell_back_to_uniform: bool,
}

impl ContextStore {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("K must be ≥ 1"));
        }
        Ok(Self {
            contexts: vec![Context::empty(); k],
        })
    }

    pub fn k(&self) -> usize {
        self.contexts.len()
    }

    pub fn get(&self, index: usize) -> &Context {
        &self.contexts[index]
    }

    pub fn contexts(&self) -> &[Context] {
        &self.contexts
    }

    /// Appends a positive episode to each context independently with
    /// probability `p_keep`, drawing in ascending context index.
    pub fn expand<R: Rng + ?Sized>(
        &mut self,
        episode: &Arc<Episode>,
        p_keep: f64,
        rng: &mut R,
        coster: &EpisodeCoster<'_>,
    ) -> Result<usize> {
        if !episode.reward.is_positive() {
            return Err(Error::contract(format!(
                "expand_contexts called with non-positive episode t={}",
                episode.t
            )));
        }
        let cost = coster.cost(episode);
        let mut grown = 0;
        for ctx in &mut self.contexts {
            if rng.random_bool(p_keep) {
                ctx.push(Arc::clone(episode), cost);
                grown += 1;
            }
        }
        Ok(grown)
    }

    /// Picks the context to use for the next step.
    pub fn select<R: Rng + ?Sized>(
        &self,
        strategy: SelectionStrategy,
        buffer: &EpisodeBuffer,
        p_keep: f64,
        rng: &mut R,
    ) -> Result<Selection> {
        let uniform = |rng: &mut R| Selection {
            index: rng.random_range(0..self.contexts.len()),
            fell_back_to_uniform: false,
        };
        match strategy {
            SelectionStrategy::Uniform => Ok(uniform(rng)),
            SelectionStrategy::Exact => {
                let log_weights = self
                    .contexts
                    .iter()
                    .map(|c| log_context_probability(c.entries(), buffer, p_keep))
                    .collect::<Result<Vec<_>>>()?;
                match select_by_log_weights(&log_weights, rng) {
                    Some(index) => Ok(Selection {
                        index,
                        fell_back_to_uniform: false,
                    }),
                    None => {
                        tracing::warn!("exact context weights all zero; selecting uniformly");
                        Ok(Selection {
                            fell_back_to_uniform: true,
                            ..uniform(rng)
                        })
                    }
                }
            }
        }
    }
}

/// Draws an index with probability proportional to `exp(log_weights[i])`,
/// normalised over the given entries only. `None` if every weight is zero.
pub fn select_by_log_weights<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> Option<usize> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let weights: Vec<f64> = log_weights.iter().map(|w| (w - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return Some(i);
        }
        u -= w;
    }
    // rounding at the top end: last index with non-zero weight
    weights.iter().rposition(|w| *w > 0.0)
}
