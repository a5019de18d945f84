//! Decomposition of a language model's predictive uncertainty into three
//! semantic components: input ambiguity, knowledge gaps, and decoding
//! randomness.
//!
//! The pipeline runs three controlled experiments per prompt, each varying
//! exactly one factor while holding the others fixed:
//!
//! - **input**: one greedy response per meaning-preserving paraphrase of the
//!   question (model and decoding fixed),
//! - **knowledge**: one greedy response per ensemble member (prompt and
//!   decoding fixed),
//! - **decoding**: repeated stochastic generations under one decoding policy
//!   (prompt and model fixed).
//!
//! Each experiment yields a [`records::ResponseBundle`]. Responses are grouped
//! into semantic equivalence classes ([`equivalence`]), the class distribution
//! is scored with semantic entropy ([`entropy`]), and the resulting per-axis
//! uncertainty scores are evaluated as failure predictors ([`eval`]).
//!
//! Generation goes through the [`backends`] contract: a live OpenAI-compatible
//! HTTP client, a replay backend over recorded responses, and a deterministic
//! synthetic backend with analytically known ground truth.

pub mod backends;
pub mod collect;
pub mod entropy;
pub mod equivalence;
pub mod eval;
pub mod jsonl;
pub mod records;
pub mod textmetrics;
