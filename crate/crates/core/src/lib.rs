//! Constrained-decoding kit.
//!
//! Restricts autoregressive generation to a predefined set of token
//! sequences (keywords). The engine verifies candidate tokens against a
//! lexicographically sorted, length-bucketed keyword matrix via binary
//! search, and removes per-step masking bias with an importance-sampling
//! accept/reject loop over at most `K` candidate draws.
//!
//! Modules:
//! - [`types`]: token, vocabulary, and sequence primitives with the
//!   lexicographic order everything else relies on.
//! - [`dist`]: per-step token distributions and masked renormalization.
//! - [`mask`]: vocabulary-sized validity bitmask.
//! - [`corpus`]: keyword ingestion, the sorted padded index, and its
//!   binary persistence format.
//! - [`verifier`]: prefix verification by binary search, plus the
//!   reference trie used as correctness oracle and baseline.
//! - [`model`]: the autoregressive model abstraction with exact tabular
//!   and seeded-random implementations, plus an external wire client.
//! - [`sampler`]: the importance-sampling decoder and the biased
//!   single-pass baseline.
//! - [`oracle`]: exact enumeration of the target, masked, and
//!   importance-sampled output distributions, with KL utilities and
//!   closed-form bounds.
//! - [`bench`]: latency/load benchmarks and sampling-quality sweeps.

pub mod bench;
pub mod corpus;
pub mod dist;
pub mod mask;
pub mod model;
pub mod oracle;
pub mod sampler;
pub mod types;
pub mod verifier;

pub use corpus::{BucketPolicy, ConstraintSet, SortedIndex};
pub use dist::TokenDistribution;
pub use mask::Mask;
pub use model::{LanguageModel, TabularModel, TerminationMode};
pub use sampler::{DiscConfig, RoundLimit, SampleOutcome};
pub use types::{TokenId, TokenSeq, Vocabulary};
