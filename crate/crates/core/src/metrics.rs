//! Metrics recomputed from a [`RunLog`]. Every function here is a pure
//! function of the log.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::context::Episode;
use crate::data::{Example, LabelSpace};
use crate::error::{Error, Result};
use crate::log::{prompt_hash, EvalEvent, Header, RunLog};
use crate::policy::render_prompt;
use crate::reward::RewardValue;
use crate::runner::Algorithm;
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub name: String,
    pub points: Vec<(u64, f64)>,
}

impl MetricSeries {
    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }
}

/// Cumulative number of steps whose true reward is zero.
pub fn regret(log: &RunLog) -> MetricSeries {
    let mut total = 0u64;
    let points = log
        .steps()
        .map(|s| {
            total += u64::from(!s.correct());
            (s.t, total as f64)
        })
        .collect();
    MetricSeries {
        name: "regret".into(),
        points,
    }
}

/// Regret as the learner saw it: cumulative observed zero rewards.
pub fn observed_regret(log: &RunLog) -> MetricSeries {
    let mut total = 0u64;
    let points = log
        .steps()
        .map(|s| {
            total += u64::from(s.observed_reward == Some(0));
            (s.t, total as f64)
        })
        .collect();
    MetricSeries {
        name: "observed_regret".into(),
        points,
    }
}

pub fn cumulative_correct(log: &RunLog) -> u64 {
    log.steps().filter(|s| s.correct()).count() as u64
}

/// Mean true correctness over the trailing `window` steps.
pub fn running_train_accuracy(log: &RunLog, window: usize) -> MetricSeries {
    let window = window.max(1);
    let correct: Vec<(u64, bool)> = log.steps().map(|s| (s.t, s.correct())).collect();
    let mut sum = 0usize;
    let mut points = Vec::with_capacity(correct.len());
    for (i, &(t, c)) in correct.iter().enumerate() {
        sum += usize::from(c);
        if i >= window {
            sum -= usize::from(correct[i - window].1);
        }
        let n = (i + 1).min(window);
        points.push((t, sum as f64 / n as f64));
    }
    MetricSeries {
        name: "train_accuracy".into(),
        points,
    }
}

pub fn test_accuracy(log: &RunLog) -> MetricSeries {
    MetricSeries {
        name: "test_accuracy".into(),
        points: log.evals().map(|e| (e.t, e.accuracy)).collect(),
    }
}

/// Counts indexed `[predicted][true]`, axes in label-space order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_pairs<'a>(labels: &LabelSpace, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let n = labels.len();
        let mut counts = vec![vec![0u64; n]; n];
        for (pred, gold) in pairs {
            let index = |l: &str| {
                labels
                    .index_of(l)
                    .ok_or_else(|| Error::contract(format!("label {l:?} is not in the label space")))
            };
            counts[index(pred)?][index(gold)?] += 1;
        }
        Ok(Self {
            labels: labels.labels().to_vec(),
            counts,
        })
    }

    /// Over all training steps of `log`.
    pub fn from_steps(log: &RunLog, labels: &LabelSpace) -> Result<Self> {
        Self::from_pairs(
            labels,
            log.steps().map(|s| (s.prediction.as_str(), s.gold_label.as_str())),
        )
    }

    /// Over the training steps with `t` in `from..=to`.
    pub fn from_step_range(log: &RunLog, labels: &LabelSpace, from: u64, to: u64) -> Result<Self> {
        Self::from_pairs(
            labels,
            log.steps()
                .filter(|s| (from..=to).contains(&s.t))
                .map(|s| (s.prediction.as_str(), s.gold_label.as_str())),
        )
    }

    pub fn from_eval(eval: &EvalEvent, labels: &LabelSpace) -> Result<Self> {
        Self::from_pairs(
            labels,
            eval.predictions.iter().map(|p| (p.predicted.as_str(), p.gold.as_str())),
        )
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Row sums: how often each label was predicted.
    pub fn predicted_counts(&self) -> Vec<u64> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }

    /// Column sums: how often each label was the gold label.
    pub fn true_counts(&self) -> Vec<u64> {
        (0..self.labels.len())
            .map(|j| self.counts.iter().map(|row| row[j]).sum())
            .collect()
    }

    pub fn predicted_distribution(&self) -> Vec<f64> {
        normalize(&self.predicted_counts())
    }

    pub fn true_distribution(&self) -> Vec<f64> {
        normalize(&self.true_counts())
    }

    pub fn predicted_entropy(&self) -> f64 {
        entropy(&self.predicted_counts())
    }

    pub fn true_entropy(&self) -> f64 {
        entropy(&self.true_counts())
    }
}

fn normalize(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

/// Shannon entropy in bits of the empirical distribution given by `counts`.
pub fn entropy(counts: &[u64]) -> f64 {
    normalize(counts)
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.log2())
        .sum::<f64>()
        + 0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTokens {
    pub t: u64,
    pub prompt_tokens: usize,
    pub cached_prefix_tokens: usize,
    pub processed_tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAccount {
    pub steps: Vec<StepTokens>,
    pub total_prompt: u64,
    pub total_cached: u64,
    pub total_processed: u64,
}

/// Every token sequence seen so far, with unbounded memory.
#[derive(Debug, Default)]
pub struct PrefixTrie {
    edges: HashMap<(u32, TokenId), u32>,
    nodes: u32,
}

impl PrefixTrie {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `seq` and returns the length of its longest common prefix with
    /// any previously inserted sequence.
    pub fn insert(&mut self, seq: &[TokenId]) -> usize {
        let mut node = 0u32;
        let mut lcp = 0;
        let mut matching = true;
        for &tok in seq {
            if matching {
                if let Some(&next) = self.edges.get(&(node, tok)) {
                    node = next;
                    lcp += 1;
                    continue;
                }
                matching = false;
            }
            self.nodes += 1;
            self.edges.insert((node, tok), self.nodes);
            node = self.nodes;
        }
        lcp
    }
}

/// Prefix-cache cost of processing `sequences` in order.
pub fn token_account_for_sequences(ts: &[u64], sequences: &[Vec<TokenId>]) -> TokenAccount {
    let mut trie = PrefixTrie::new();
    let mut account = TokenAccount::default();
    for (&t, seq) in ts.iter().zip(sequences) {
        let cached = trie.insert(seq);
        let step = StepTokens {
            t,
            prompt_tokens: seq.len(),
            cached_prefix_tokens: cached,
            processed_tokens: seq.len() - cached,
        };
        account.total_prompt += step.prompt_tokens as u64;
        account.total_cached += cached as u64;
        account.total_processed += step.processed_tokens as u64;
        account.steps.push(step);
    }
    account
}

fn header(log: &RunLog) -> Result<&Header> {
    log.header()
        .ok_or_else(|| Error::integrity("event 0 (line 1)", "log has no header"))
}

/// Re-renders every training prompt from the log, checking each against its
/// recorded hash and token count.
pub fn rendered_prompts(log: &RunLog) -> Result<Vec<(u64, String)>> {
    let h = header(log)?;
    let tokenizer = h.tokenizer.build();
    let mut episodes: HashMap<u64, Arc<Episode>> = HashMap::new();
    let mut out = Vec::new();
    for s in log.steps() {
        let loc = || format!("step t={}", s.t);
        let ctx = s
            .context
            .iter()
            .map(|t| {
                episodes
                    .get(t)
                    .cloned()
                    .ok_or_else(|| Error::integrity(loc(), format!("context references unknown step t={t}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let example = Example::new(&s.example_id, &s.query, &s.gold_label);
        let transcript = render_prompt(&ctx, &example, &h.template, h.prompt_mode)
            .map_err(|e| Error::integrity(loc(), e.to_string()))?;
        let markup = h.template.to_markup(&transcript);
        if prompt_hash(&markup) != s.prompt_hash {
            return Err(Error::integrity(
                loc(),
                "re-rendered prompt does not match the recorded hash",
            ));
        }
        if tokenizer.count(&markup) != s.prompt_tokens {
            return Err(Error::integrity(
                loc(),
                "re-rendered prompt has a different token count",
            ));
        }
        let reward = match s.observed_reward {
            Some(v) => RewardValue::observed(v),
            None => RewardValue::hidden(s.true_reward),
        };
        episodes.insert(s.t, Arc::new(Episode::new(s.t, example, s.prediction.clone(), reward)));
        out.push((s.t, markup));
    }
    Ok(out)
}

/// Tokens a prefix-caching server would process for the training prompts.
pub fn token_account(log: &RunLog) -> Result<TokenAccount> {
    let h = header(log)?;
    let tokenizer = h.tokenizer.build();
    let prompts = rendered_prompts(log)?;
    let ts: Vec<u64> = prompts.iter().map(|p| p.0).collect();
    let seqs: Vec<Vec<TokenId>> = prompts.iter().map(|p| tokenizer.encode(&p.1)).collect();
    Ok(token_account_for_sequences(&ts, &seqs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextStats {
    pub index: usize,
    pub selections: u64,
    /// Fraction of the trailing window of steps that selected this context.
    pub hit_rate: MetricSeries,
    /// Accuracy over this context's trailing window of selections.
    pub accuracy: MetricSeries,
}

pub fn per_context_stats(log: &RunLog, window: usize) -> Result<Vec<ContextStats>> {
    let h = header(log)?;
    if h.algorithm != Algorithm::Approximate {
        return Err(Error::contract(format!(
            "per-context statistics need an approximate run, got {}",
            h.algorithm.name()
        )));
    }
    let k = h.k.unwrap_or(0);
    let window = window.max(1);
    let steps: Vec<(u64, usize, bool)> = log
        .steps()
        .map(|s| {
            s.context_index
                .filter(|&i| i < k)
                .map(|i| (s.t, i, s.correct()))
                .ok_or_else(|| Error::integrity(format!("step t={}", s.t), "missing or invalid context index"))
        })
        .collect::<Result<_>>()?;

    let mut stats: Vec<ContextStats> = (0..k)
        .map(|index| ContextStats {
            index,
            selections: 0,
            hit_rate: MetricSeries {
                name: format!("hit_rate_{index}"),
                points: Vec::new(),
            },
            accuracy: MetricSeries {
                name: format!("accuracy_{index}"),
                points: Vec::new(),
            },
        })
        .collect();
    let mut hits = vec![0usize; k];
    let mut recent: Vec<std::collections::VecDeque<bool>> = vec![Default::default(); k];
    for (i, &(t, idx, correct)) in steps.iter().enumerate() {
        hits[idx] += 1;
        if i >= window {
            hits[steps[i - window].1] -= 1;
        }
        let n = (i + 1).min(window) as f64;
        for (j, s) in stats.iter_mut().enumerate() {
            s.hit_rate.points.push((t, hits[j] as f64 / n));
        }
        let r = &mut recent[idx];
        r.push_back(correct);
        if r.len() > window {
            r.pop_front();
        }
        let acc = r.iter().filter(|&&c| c).count() as f64 / r.len() as f64;
        stats[idx].selections += 1;
        stats[idx].accuracy.points.push((t, acc));
    }
    Ok(stats)
}
