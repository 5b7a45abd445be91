use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::context::Episode;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::reward::verbalize_reward;
use crate::tokenizer::Tokenizer;

pub const SYSTEM_ICL: &str = "You are an useful assistant. Answer the following questions.";
pub const SYSTEM_ICRL: &str = "You are an useful assistant. Answer the following questions. Feedback will indicate if you answered correctly. You must answer correctly, using previous feedback to make better predictions.";

/// Dates the Llama chat template injects into the system turn, frozen so
/// renders are reproducible.
const LLAMA_DATE_PREAMBLE: &str = "Cutting Knowledge Date: December 2023\nToday Date: 26 Jul 2024\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dialect {
    #[default]
    Llama,
    Phi,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Gold-label demonstrations, no feedback.
    Icl,
    /// Own predictions followed by verbalized rewards.
    #[default]
    Icrl,
    /// Own predictions with the reward withheld.
    Unrewarded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

/// System turn, alternating user/assistant turns, and a final user turn
/// carrying the pending query. The answer prefix is what the model completes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTranscript {
    pub messages: Vec<ChatMessage>,
    pub answer_prefix: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub dialect: Dialect,
    #[serde(default = "default_system_icrl")]
    pub system_icrl: String,
    #[serde(default = "default_system_icl")]
    pub system_icl: String,
    #[serde(default = "default_query_prefix")]
    pub query_prefix: String,
    #[serde(default = "default_answer_prefix")]
    pub answer_prefix: String,
}

fn default_system_icrl() -> String {
    SYSTEM_ICRL.into()
}
fn default_system_icl() -> String {
    SYSTEM_ICL.into()
}
fn default_query_prefix() -> String {
    "Query: ".into()
}
fn default_answer_prefix() -> String {
    "Intent: ".into()
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::llama()
    }
}

impl PromptTemplate {
    pub fn with_dialect(dialect: Dialect) -> Self {
        Self {
            dialect,
            system_icrl: default_system_icrl(),
            system_icl: default_system_icl(),
            query_prefix: default_query_prefix(),
            answer_prefix: default_answer_prefix(),
        }
    }

    pub fn llama() -> Self {
        Self::with_dialect(Dialect::Llama)
    }

    pub fn phi() -> Self {
        Self::with_dialect(Dialect::Phi)
    }

    pub fn plain() -> Self {
        Self::with_dialect(Dialect::Plain)
    }

    pub fn with_query_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.query_prefix = prefix.into();
        self
    }

    pub fn system_prompt(&self, mode: PromptMode) -> &str {
        match mode {
            PromptMode::Icl => &self.system_icl,
            PromptMode::Icrl | PromptMode::Unrewarded => &self.system_icrl,
        }
    }

    fn generation_prefix(&self) -> &str {
        self.answer_prefix.trim_end()
    }

    fn begin(&self) -> &'static str {
        match self.dialect {
            Dialect::Llama => "<|begin_of_text|>",
            Dialect::Phi | Dialect::Plain => "",
        }
    }

    fn turn(&self, role: Role, content: &str) -> String {
        match (self.dialect, role) {
            (Dialect::Llama, Role::System) => {
                format!("<|start_header_id|>system<|end_header_id|>\n\n{LLAMA_DATE_PREAMBLE}{content}<|eot_id|>")
            }
            (Dialect::Llama, Role::User) => format!("<|start_header_id|>user<|end_header_id|>\n\n{content}<|eot_id|>"),
            (Dialect::Llama, Role::Assistant) => {
                format!("<|start_header_id|>assistant<|end_header_id|>\n\n{content}<|eot_id|>")
            }
            (Dialect::Phi, Role::System) => format!("<|system|>\n{content}\n<|end|>\n"),
            (Dialect::Phi, Role::User) => format!("<|user|>\n{content}<|end|>\n"),
            (Dialect::Phi, Role::Assistant) => format!("<|assistant|>\n{content}<|end|>\n"),
            (Dialect::Plain, Role::System) => format!("{content}\n\n"),
            (Dialect::Plain, Role::User) => format!("{content}\n"),
            (Dialect::Plain, Role::Assistant) => format!("{content}\n\n"),
        }
    }

    fn generation(&self) -> String {
        let prefix = self.generation_prefix();
        match self.dialect {
            Dialect::Llama => format!("<|start_header_id|>assistant<|end_header_id|>\n\n{prefix}"),
            Dialect::Phi => format!("<|assistant|>\n{prefix}"),
            Dialect::Plain => prefix.to_string(),
        }
    }

    /// Raw prompt text in this template's chat markup, ending at the answer prefix.
    pub fn to_markup(&self, transcript: &ChatTranscript) -> String {
        let mut out = String::from(self.begin());
        for m in &transcript.messages {
            out.push_str(&self.turn(m.role, &m.content));
        }
        out.push_str(&self.generation());
        out
    }

    fn query_text(&self, query: &str) -> String {
        format!("{}{}", self.query_prefix, query)
    }

    fn answer_text(&self, label: &str) -> String {
        format!("{}{}", self.answer_prefix, label)
    }

    /// Feedback as it sits in front of the next query inside a user turn.
    pub fn feedback_segment(&self, feedback: &str) -> String {
        format!("{feedback}\n\n")
    }

    /// Tokens of one query turn plus its answer turn.
    pub fn turn_tokens(&self, tokenizer: &dyn Tokenizer, query: &str, label: &str) -> usize {
        tokenizer.count(&self.turn(Role::User, &self.query_text(query)))
            + tokenizer.count(&self.turn(Role::Assistant, &self.answer_text(label)))
    }

    /// Token cost an episode adds to a prompt rendered in `mode`.
    pub fn episode_tokens(&self, tokenizer: &dyn Tokenizer, episode: &Episode, mode: PromptMode) -> usize {
        match mode {
            PromptMode::Icl => self.turn_tokens(tokenizer, &episode.example.query, &episode.example.gold_label),
            PromptMode::Unrewarded => self.turn_tokens(tokenizer, &episode.example.query, &episode.prediction),
            PromptMode::Icrl => {
                let base = self.turn_tokens(tokenizer, &episode.example.query, &episode.prediction);
                // unobserved rewards cannot be rendered in this mode; they cost nothing here
                // and render_prompt rejects them
                let fb = verbalize_reward(&episode.prediction, episode.reward)
                    .map(|fb| tokenizer.count(&self.feedback_segment(&fb)))
                    .unwrap_or(0);
                base + fb
            }
        }
    }

    /// Tokens of the zero-shot prompt for `query`: system turn, query turn and
    /// generation prefix.
    pub fn overhead_tokens(&self, tokenizer: &dyn Tokenizer, query: &str, mode: PromptMode) -> usize {
        let text = format!(
            "{}{}{}{}",
            self.begin(),
            self.turn(Role::System, self.system_prompt(mode)),
            self.turn(Role::User, &self.query_text(query)),
            self.generation()
        );
        tokenizer.count(&text)
    }
}

/// Renders `context` followed by `query` as a chat transcript.
///
/// In ICRL mode each episode's feedback opens the following user turn, ahead
/// of the next query. ICL mode shows gold labels and no feedback.
pub fn render_prompt(
    context: &[Arc<Episode>],
    query: &Example,
    template: &PromptTemplate,
    mode: PromptMode,
) -> Result<ChatTranscript> {
    let mut messages = Vec::with_capacity(2 + 2 * context.len());
    messages.push(ChatMessage {
        role: Role::System,
        content: template.system_prompt(mode).to_string(),
    });
    let mut pending: Option<String> = None;
    let user_turn = |pending: &mut Option<String>, q: &str| {
        let q = template.query_text(q);
        match pending.take() {
            Some(fb) => format!("{}{q}", template.feedback_segment(&fb)),
            None => q,
        }
    };
    for e in context {
        messages.push(ChatMessage {
            role: Role::User,
            content: user_turn(&mut pending, &e.example.query),
        });
        let label = match mode {
            PromptMode::Icl => &e.example.gold_label,
            PromptMode::Icrl | PromptMode::Unrewarded => &e.prediction,
        };
        messages.push(ChatMessage {
            role: Role::Assistant,
            content: template.answer_text(label),
        });
        if mode == PromptMode::Icrl {
            if !e.reward.observed {
                return Err(Error::contract(format!(
                    "episode t={} has no observed reward and cannot be rendered with feedback",
                    e.t
                )));
            }
            pending = Some(verbalize_reward(&e.prediction, e.reward)?);
        }
    }
    messages.push(ChatMessage {
        role: Role::User,
        content: user_turn(&mut pending, &query.query),
    });
    Ok(ChatTranscript {
        messages,
        answer_prefix: template.generation_prefix().to_string(),
    })
}
