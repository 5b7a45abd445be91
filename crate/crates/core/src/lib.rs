//! In-context reinforcement learning (ICRL) over streamed classification tasks.
//!
//! The crate is organised the way a run flows:
//!
//! - [`data`]: dataset ingestion, deterministic splits, episode-capacity estimation.
//! - [`reward`]: binary rewards under the ablation modes and their verbalized feedback.
//! - [`context`]: episode buffers, naive / explorative / approximate context construction.
//! - [`policy`]: byte-exact prompt rendering and prediction backends (remote or mock).
//! - [`runner`]: the Naive, Explorative, Approximate and supervised-ICL loops.
//! - [`metrics`]: regret, accuracy curves, confusion matrices, KV-cache token accounting.
//!
//! Everything random flows through named streams derived from one master seed
//! (see [`rng`]), so a mock-backend run is bit-for-bit reproducible.

pub mod config;
pub mod context;
pub mod data;
pub mod error;
pub mod log;
pub mod metrics;
pub mod policy;
pub mod reference;
pub mod report;
pub mod reward;
pub mod rng;
pub mod runner;
pub mod tokenizer;

pub use context::{Context, ContextStore, DownsampleStrategy, Episode, EpisodeBuffer};
pub use data::{DatasetSplit, Example, LabelSpace, TokenBudget};
pub use error::{Error, Result};
pub use log::{Event, RunLog};
pub use policy::{ChatTranscript, Dialect, PolicyBackend, PromptMode, PromptTemplate};
pub use reward::{RewardMode, RewardValue};
pub use runner::{Algorithm, RunConfig};
pub use tokenizer::Tokenizer;
