//! Binary rewards from gold labels and their natural-language feedback.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardMode {
    #[default]
    Standard,
    Inverted,
    Noisy {
        p_flip: f64,
    },
    /// Reward is computed but never shown to the learner.
    None,
    /// Standard reward; only positive episodes enter the buffer.
    PositiveOnlyVisible,
    /// Standard reward; only negative episodes enter the buffer.
    NegativeOnlyVisible,
}

impl RewardMode {
    pub fn validate(&self) -> std::result::Result<(), String> {
        match self {
            RewardMode::Noisy { p_flip } if !(0.0..=1.0).contains(p_flip) => {
                Err(format!("reward_mode.p_flip must be in [0, 1], got {p_flip}"))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            RewardMode::Standard => "standard".into(),
            RewardMode::Inverted => "inverted".into(),
            RewardMode::Noisy { p_flip } => format!("noisy({p_flip})"),
            RewardMode::None => "none".into(),
            RewardMode::PositiveOnlyVisible => "positive_only_visible".into(),
            RewardMode::NegativeOnlyVisible => "negative_only_visible".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardValue {
    pub value: u8,
    pub observed: bool,
}

impl RewardValue {
    pub fn observed(value: u8) -> Self {
        debug_assert!(value <= 1);
        Self { value, observed: true }
    }

    pub fn hidden(value: u8) -> Self {
        Self { value, observed: false }
    }

    pub fn is_positive(&self) -> bool {
        self.observed && self.value > 0
    }
}

fn normalize(label: &str) -> &str {
    label.trim()
}

/// 1 iff the prediction matches the gold label after trimming whitespace.
pub fn is_correct(example: &Example, prediction: &str) -> bool {
    normalize(prediction) == normalize(&example.gold_label)
}

/// Reward seen by the learner under `mode`.
///
/// `noisy` always consumes exactly one draw from `rng`, so replaying one
/// transcript through `noisy(0)` and `noisy(1)` gives the standard and
/// inverted values pointwise.
pub fn evaluate_reward<R: Rng + ?Sized>(
    example: &Example,
    prediction: &str,
    mode: RewardMode,
    rng: &mut R,
) -> RewardValue {
    let standard = u8::from(is_correct(example, prediction));
    match mode {
        RewardMode::Standard | RewardMode::PositiveOnlyVisible | RewardMode::NegativeOnlyVisible => {
            RewardValue::observed(standard)
        }
        RewardMode::Inverted => RewardValue::observed(1 - standard),
        RewardMode::Noisy { p_flip } => {
            let flip = rng.random_bool(p_flip);
            RewardValue::observed(if flip { 1 - standard } else { standard })
        }
        RewardMode::None => RewardValue::hidden(standard),
    }
}

pub fn positive_feedback(prediction: &str) -> String {
    format!("'{prediction}' is the correct answer! Good job!")
}

pub fn negative_feedback(prediction: &str) -> String {
    format!("The answer '{prediction}' is wrong! You can do better!")
}

/// Feedback text for an observed reward.
pub fn verbalize_reward(prediction: &str, r: RewardValue) -> Result<String> {
    if !r.observed {
        return Err(Error::contract("cannot verbalize an unobserved reward"));
    }
    Ok(if r.value > 0 {
        positive_feedback(prediction)
    } else {
        negative_feedback(prediction)
    })
}

/// Inverse of [`verbalize_reward`]: the text between the first pair of single quotes.
pub fn prediction_from_feedback(feedback: &str) -> Option<&str> {
    let start = feedback.find('\'')? + 1;
    let end = start + feedback[start..].find('\'')?;
    Some(&feedback[start..end])
}
