//! Dataset ingestion, deterministic splits and episode-capacity estimation.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::context::Episode;
use crate::error::{Error, Result};
use crate::policy::{PromptMode, PromptTemplate};
use crate::reward::{verbalize_reward, RewardValue};
use crate::rng::{self, streams};
use crate::tokenizer::Tokenizer;

pub const DEFAULT_TRAIN_N: usize = 10_000;
pub const DEFAULT_SMALL_TRAIN_N: usize = 5_000;
pub const DEFAULT_TEST_N: usize = 500;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub query: String,
    pub gold_label: String,
}

impl Example {
    pub fn new(id: impl Into<String>, query: impl Into<String>, gold_label: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            query: query.into(),
            gold_label: gold_label.into(),
        }
    }
}

/// Ordered, duplicate-free set of labels. The order fixes confusion-matrix axes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub task_name: String,
    labels: Vec<String>,
}

impl LabelSpace {
    pub fn new(task_name: impl Into<String>, labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Dataset("label space is empty".into()));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::Dataset(format!("duplicate label {l:?}")));
            }
        }
        Ok(Self {
            task_name: task_name.into(),
            labels,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Longest label by token count; ties go to the lexicographically smallest.
    pub fn longest_label(&self, tokenizer: &dyn Tokenizer) -> &str {
        self.labels
            .iter()
            .max_by(|a, b| tokenizer.count(a).cmp(&tokenizer.count(b)).then_with(|| b.cmp(a)))
            .expect("label space is non-empty")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub window_tokens: usize,
    /// Tokens reserved for the system prompt, the pending query and chat chrome.
    pub overhead_tokens: usize,
}

impl TokenBudget {
    pub fn new(window_tokens: usize, overhead_tokens: usize) -> Result<Self> {
        if overhead_tokens > window_tokens {
            return Err(Error::config(format!(
                "overhead_tokens ({overhead_tokens}) exceeds window_tokens ({window_tokens})"
            )));
        }
        Ok(Self {
            window_tokens,
            overhead_tokens,
        })
    }

    /// Budget whose overhead covers the zero-shot prompt of the longest query
    /// among `examples`. Overhead is clamped to the window.
    pub fn for_examples<'a>(
        window_tokens: usize,
        tokenizer: &dyn Tokenizer,
        template: &PromptTemplate,
        mode: PromptMode,
        examples: impl IntoIterator<Item = &'a Example>,
    ) -> Self {
        let overhead = examples
            .into_iter()
            .map(|e| template.overhead_tokens(tokenizer, &e.query, mode))
            .max()
            .unwrap_or_else(|| template.overhead_tokens(tokenizer, "", mode));
        Self {
            window_tokens,
            overhead_tokens: overhead.min(window_tokens),
        }
    }

    /// Tokens left for context episodes.
    pub fn available(&self) -> usize {
        self.window_tokens.saturating_sub(self.overhead_tokens)
    }

    pub fn fits(&self, context_tokens: usize) -> bool {
        context_tokens <= self.available()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    #[default]
    Jsonl,
    Csv,
}

impl DatasetFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => DatasetFormat::Csv,
            _ => DatasetFormat::Jsonl,
        }
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    id: Option<serde_json::Value>,
    #[serde(alias = "query")]
    text: Option<String>,
    #[serde(alias = "intent")]
    label: Option<String>,
}

fn record_to_example(
    path: &Path,
    line: usize,
    id: Option<String>,
    text: Option<String>,
    label: Option<String>,
) -> Result<Example> {
    let err = |message: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    };
    let text = text
        .filter(|t| !t.trim().is_empty())
        .ok_or_else(|| err("missing or empty text"))?;
    let label = label
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .ok_or_else(|| err("missing or empty label"))?;
    let id = id.unwrap_or_else(|| line.to_string());
    Ok(Example::new(id, text, label))
}

fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let id = rec.id.map(|v| match v {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        });
        out.push(record_to_example(path, line_no, id, rec.text, rec.label)?);
    }
    Ok(out)
}

fn read_csv(path: &Path) -> Result<Vec<Example>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let find = |names: &[&str]| headers.iter().position(|h| names.contains(&h.trim()));
    let text_col = find(&["text", "query", "utterance"]).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: "no text/query column in header".into(),
    })?;
    let label_col = find(&["label", "intent"]).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: "no label/intent column in header".into(),
    })?;
    let id_col = find(&["id"]);

    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line_no = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let get = |c: usize| rec.get(c).map(str::to_string);
        out.push(record_to_example(
            path,
            line_no,
            id_col.and_then(get),
            get(text_col),
            get(label_col),
        )?);
    }
    Ok(out)
}

/// Reads a dataset file. The label space is the sorted set of observed labels
/// plus any labels listed in `labels_path` (one per line).
pub fn load_dataset(
    path: &Path,
    format: DatasetFormat,
    labels_path: Option<&Path>,
) -> Result<(Vec<Example>, LabelSpace)> {
    let examples = match format {
        DatasetFormat::Jsonl => read_jsonl(path)?,
        DatasetFormat::Csv => read_csv(path)?,
    };
    if examples.is_empty() {
        return Err(Error::Dataset(format!("{} contains no examples", path.display())));
    }
    let mut ids = HashSet::new();
    for e in &examples {
        if !ids.insert(e.id.as_str()) {
            return Err(Error::Dataset(format!("duplicate example id {:?}", e.id)));
        }
    }

    let mut labels: BTreeSet<String> = examples.iter().map(|e| e.gold_label.clone()).collect();
    if let Some(lp) = labels_path {
        let text = fs::read_to_string(lp).map_err(|e| Error::io(lp, e))?;
        labels.extend(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string),
        );
    }
    let task = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let space = LabelSpace::new(task, labels.into_iter().collect())?;
    Ok((examples, space))
}

/// Unstratified uniform split: shuffle under the `split` stream of `seed`,
/// the first `test_n` become the test set, the next `train_n` the train stream.
pub fn make_split(examples: &[Example], train_n: usize, test_n: usize, seed: u64) -> Result<DatasetSplit> {
    if train_n + test_n > examples.len() {
        return Err(Error::Dataset(format!(
            "split needs {} examples (train {train_n} + test {test_n}) but only {} are available",
            train_n + test_n,
            examples.len()
        )));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = rng::stream(seed, streams::SPLIT);
    order.shuffle(&mut rng);
    let test = order[..test_n].iter().map(|&i| examples[i].clone()).collect();
    let train = order[test_n..test_n + train_n]
        .iter()
        .map(|&i| examples[i].clone())
        .collect();
    Ok(DatasetSplit { train, test, seed })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    split: String,
    id: String,
}

impl DatasetSplit {
    /// Writes the split as JSONL of `{"split": "train"|"test", "id": ...}` in order.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let lines = self
            .train
            .iter()
            .map(|e| ("train", e))
            .chain(self.test.iter().map(|e| ("test", e)));
        for (split, e) in lines {
            let line = serde_json::to_string(&ManifestLine {
                split: split.into(),
                id: e.id.clone(),
            })?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Rebuilds a split from a manifest of ids (e.g. a published split).
    pub fn from_manifest(examples: &[Example], path: &Path, seed: u64) -> Result<Self> {
        let by_id: std::collections::HashMap<&str, &Example> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut split = DatasetSplit {
            train: Vec::new(),
            test: Vec::new(),
            seed,
        };
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let m: ManifestLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            let ex = by_id.get(m.id.as_str()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("unknown example id {:?}", m.id),
            })?;
            match m.split.as_str() {
                "train" => split.train.push((*ex).clone()),
                "test" => split.test.push((*ex).clone()),
                other => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: format!("unknown split {other:?}"),
                    })
                }
            }
        }
        let train_ids: HashSet<&str> = split.train.iter().map(|e| e.id.as_str()).collect();
        if let Some(e) = split.test.iter().find(|e| train_ids.contains(e.id.as_str())) {
            return Err(Error::Dataset(format!("id {:?} is in both train and test", e.id)));
        }
        Ok(split)
    }
}

/// Balanced synthetic intent task used by the mock experiments.
///
/// Label `i` owns a private vocabulary of `vocab_per_label` words; a query is
/// `words_per_query` distinct words from its label's vocabulary, plus one word
/// from a pool of `fillers` shared across labels when `fillers > 0`.
/// Same-label queries always overlap when `2 * words_per_query > vocab_per_label`;
/// with no fillers, queries of different labels never share a word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTask {
    pub labels: usize,
    pub examples: usize,
    pub vocab_per_label: usize,
    pub words_per_query: usize,
    pub fillers: usize,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            labels: 10,
            examples: 2_000,
            vocab_per_label: 5,
            words_per_query: 3,
            fillers: 0,
            seed: 0,
        }
    }
}

impl SyntheticTask {
    pub fn label_name(i: usize) -> String {
        format!("intent {i:02}")
    }

    /// Examples cycle through labels so every label has the same count
    /// (up to one) and the stream order is then shuffled.
    pub fn generate(&self) -> Result<(Vec<Example>, LabelSpace)> {
        if self.labels == 0 || self.examples == 0 {
            return Err(Error::Dataset(
                "synthetic task needs labels > 0 and examples > 0".into(),
            ));
        }
        if self.words_per_query == 0 || self.words_per_query > self.vocab_per_label {
            return Err(Error::Dataset("words_per_query must be in 1..=vocab_per_label".into()));
        }
        let mut rng = rng::stream(self.seed, streams::SYNTHETIC);
        let mut labels: Vec<usize> = (0..self.examples).map(|i| i % self.labels).collect();
        labels.shuffle(&mut rng);
        let mut out = Vec::with_capacity(self.examples);
        for (i, &label) in labels.iter().enumerate() {
            let mut vocab: Vec<usize> = (0..self.vocab_per_label).collect();
            vocab.shuffle(&mut rng);
            let mut words: Vec<String> = vocab[..self.words_per_query]
                .iter()
                .map(|w| format!("w{label}x{w}"))
                .collect();
            if self.fillers > 0 {
                let f = rng.random_range(0..self.fillers);
                words.insert(rng.random_range(0..=words.len()), format!("filler{f}"));
            }
            out.push(Example::new(
                format!("s{i:05}"),
                words.join(" "),
                Self::label_name(label),
            ));
        }
        let space = LabelSpace::new("synthetic", (0..self.labels).map(Self::label_name).collect())?;
        Ok((out, space))
    }
}

/// Worst-case cost of one ICRL episode built from `example`: the longest label
/// as the answer and the longer of the two feedback messages.
pub fn worst_case_episode_cost(
    example: &Example,
    longest_label: &str,
    tokenizer: &dyn Tokenizer,
    template: &PromptTemplate,
) -> usize {
    let positive = RewardValue::observed(1);
    let negative = RewardValue::observed(0);
    let fb_len = |r: RewardValue| {
        let fb = verbalize_reward(longest_label, r).expect("observed reward");
        tokenizer.count(&template.feedback_segment(&fb))
    };
    let feedback = fb_len(positive).max(fb_len(negative));
    template.turn_tokens(tokenizer, &example.query, longest_label) + feedback
}

/// Maximum number of episodes that always fit in `budget`.
///
/// All observed training examples are taken in descending order of token
/// count, each answered with the longest label and followed by the longest
/// feedback message; the result is the largest prefix of that ordering whose
/// cost fits next to `budget.overhead_tokens`.
pub fn estimate_capacity(
    split: &DatasetSplit,
    labels: &LabelSpace,
    tokenizer: &dyn Tokenizer,
    template: &PromptTemplate,
    budget: TokenBudget,
) -> usize {
    if budget.window_tokens <= budget.overhead_tokens {
        return 0;
    }
    let longest = labels.longest_label(tokenizer);
    let mut costs: Vec<usize> = split
        .train
        .iter()
        .map(|e| worst_case_episode_cost(e, longest, tokenizer, template))
        .collect();
    costs.sort_unstable_by(|a, b| b.cmp(a));
    let available = budget.available();
    let mut used = 0usize;
    let mut n = 0;
    for c in costs {
        if used + c > available {
            break;
        }
        used += c;
        n += 1;
    }
    n
}

/// The adversarial prompt behind [`estimate_capacity`] for `n` episodes,
/// rendered in full. Used to check that a capacity really fits.
pub fn worst_case_prompt(
    split: &DatasetSplit,
    labels: &LabelSpace,
    tokenizer: &dyn Tokenizer,
    template: &PromptTemplate,
    n: usize,
) -> Result<String> {
    let longest = labels.longest_label(tokenizer).to_string();
    let mut sorted: Vec<&Example> = split.train.iter().collect();
    sorted.sort_by_key(|e| std::cmp::Reverse(worst_case_episode_cost(e, &longest, tokenizer, template)));
    // the longer feedback message is what a worst-case episode carries
    let reward = {
        let pos = verbalize_reward(&longest, RewardValue::observed(1))?;
        let neg = verbalize_reward(&longest, RewardValue::observed(0))?;
        if tokenizer.count(&neg) >= tokenizer.count(&pos) {
            RewardValue::observed(0)
        } else {
            RewardValue::observed(1)
        }
    };
    let episodes: Vec<Arc<Episode>> = sorted
        .iter()
        .take(n)
        .enumerate()
        .map(|(i, e)| Arc::new(Episode::new(i as u64 + 1, (*e).clone(), longest.clone(), reward)))
        .collect();
    let query = split
        .train
        .iter()
        .chain(split.test.iter())
        .max_by_key(|e| template.overhead_tokens(tokenizer, &e.query, PromptMode::Icrl))
        .ok_or_else(|| Error::Dataset("empty split".into()))?;
    let transcript = crate::policy::render_prompt(&episodes, query, template, PromptMode::Icrl)?;
    Ok(template.to_markup(&transcript))
}

/// Where a run's examples come from and how they are split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Defaults to 10000, or 5000 for small datasets, or everything left after the test set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_n: Option<usize>,
    pub test_n: usize,
    /// Optional sidecar listing extra labels, one per line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<PathBuf>,
    /// Split seed; falls back to the run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::default(),
            train_n: None,
            test_n: DEFAULT_TEST_N,
            labels_path: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    File {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        format: Option<DatasetFormat>,
    },
    Synthetic(SyntheticTask),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticTask::default())
    }
}

impl DataConfig {
    pub fn load_examples(&self) -> Result<(Vec<Example>, LabelSpace)> {
        match &self.source {
            DataSource::File { path, format } => {
                let format = format.unwrap_or_else(|| DatasetFormat::from_path(path));
                load_dataset(path, format, self.labels_path.as_deref())
            }
            DataSource::Synthetic(task) => task.generate(),
        }
    }

    pub fn resolved_train_n(&self, available: usize) -> usize {
        let left = available.saturating_sub(self.test_n);
        self.train_n.unwrap_or(if left >= DEFAULT_TRAIN_N {
            DEFAULT_TRAIN_N
        } else if left >= DEFAULT_SMALL_TRAIN_N {
            DEFAULT_SMALL_TRAIN_N
        } else {
            left
        })
    }

    pub fn load(&self, run_seed: u64) -> Result<(DatasetSplit, LabelSpace)> {
        let (examples, labels) = self.load_examples()?;
        let train_n = self.resolved_train_n(examples.len());
        let split = make_split(&examples, train_n, self.test_n, self.seed.unwrap_or(run_seed))?;
        Ok((split, labels))
    }
}

impl DatasetSplit {
    /// SHA-256 over the ordered train and test ids.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (tag, set) in [("train", &self.train), ("test", &self.test)] {
            for e in set {
                h.update(tag.as_bytes());
                h.update([0]);
                h.update(e.id.as_bytes());
                h.update([0]);
            }
        }
        hex::encode(h.finalize())
    }
}
