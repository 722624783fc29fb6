//! Alchemy-style cubic chemistries and the tooling around them: episode
//! construction for withheld-pair, composition and decomposition tasks, the
//! token layout fed to the model, and event-factorized accuracy metrics.

pub mod chemistry;
pub mod codec;
pub mod metrics;
pub mod seed;
pub mod task;

pub use chemistry::{generate_chemistry, Chemistry, ChemistryError, Potion, Stone, ValidationReport, Vertex};
pub use codec::{decode_prediction, encode_episode, vocab_spec, EncodedEpisode, Vocabulary};
pub use metrics::{classify, factorize, EventRecord, FactorizedMetrics};
pub use task::{Episode, SupportMode, TaskKind, TaskSpec, Transition};
