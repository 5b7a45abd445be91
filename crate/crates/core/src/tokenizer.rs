//! Token counting for budgets and KV-cache accounting.
//!
//! Real model tokenizers plug in through [`Tokenizer`]; the bundled ones are
//! deterministic mocks that need no model files.

use serde::{Deserialize, Serialize};

pub type TokenId = u64;

pub trait Tokenizer: Send + Sync {
    fn name(&self) -> &str;

    fn encode(&self, text: &str) -> Vec<TokenId>;

    fn count(&self, text: &str) -> usize {
        self.encode(text).len()
    }
}

/// One token per whitespace-separated word. Chat-markup specials of the form
/// `<|...|>` are split out as tokens of their own, the way real chat
/// tokenizers treat them, so that adjacent turns do not fuse into one word.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

/// One token per UTF-8 byte.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl WhitespaceTokenizer {
    fn pieces(text: &str) -> Vec<&str> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            match rest.find("<|") {
                Some(start) => {
                    match rest[start + 2..].find("|>") {
                        Some(end_rel) => {
                            let end = start + 2 + end_rel + 2;
                            out.extend(rest[..start].split_whitespace());
                            out.push(&rest[start..end]);
                            rest = &rest[end..];
                        }
                        None => {
                            // unterminated marker: plain text
                            out.extend(rest.split_whitespace());
                            rest = "";
                        }
                    }
                }
                None => {
                    out.extend(rest.split_whitespace());
                    rest = "";
                }
            }
        }
        out
    }
}

impl Tokenizer for WhitespaceTokenizer {
    fn name(&self) -> &str {
        "whitespace"
    }

    fn encode(&self, text: &str) -> Vec<TokenId> {
        Self::pieces(text).into_iter().map(|p| fnv1a(p.as_bytes())).collect()
    }

    fn count(&self, text: &str) -> usize {
        Self::pieces(text).len()
    }
}

impl Tokenizer for ByteTokenizer {
    fn name(&self) -> &str {
        "bytes"
    }

    fn encode(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(TokenId::from).collect()
    }

    fn count(&self, text: &str) -> usize {
        text.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    #[default]
    Whitespace,
    Bytes,
}

impl TokenizerKind {
    pub fn build(self) -> Box<dyn Tokenizer> {
        match self {
            TokenizerKind::Whitespace => Box::new(WhitespaceTokenizer),
            TokenizerKind::Bytes => Box::new(ByteTokenizer),
        }
    }
}
