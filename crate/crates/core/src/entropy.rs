//! Semantic-entropy kernel and the three per-axis scorers.
//!
//! All three uncertainty components are the same quantity, Shannon entropy in
//! nats over semantic cluster masses; they differ only in which factor the
//! underlying bundle varied (paraphrase, ensemble member, or sampling seed).
//! The axis is provenance carried on the score, not arithmetic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equivalence::{
    assign_masses, cluster_bundle, ClusterError, EquivalenceJudge, SemanticClustering, Weighting,
};
use crate::records::{Axis, ResponseBundle};

/// Clusters whose mass underflows below this are dropped before taking logs.
const MASS_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum EntropyError {
    #[error("a response with no tokens has no probability")]
    EmptyLogprobs,
    #[error("token logprob {0} is positive; log-probabilities are non-positive")]
    PositiveLogprob(f64),
    #[error("clustering has no masses; run mass assignment first")]
    MassesUnset,
    #[error("cluster masses sum to {0}, not 1")]
    UnnormalizedMasses(f64),
    #[error("bundle axis is {actual}, scorer expects {expected}")]
    AxisMismatch { expected: Axis, actual: Axis },
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

/// Probability of a token sequence from its per-token log-probabilities.
///
/// Plain product exp(Σ lp) by default; the length-normalized variant
/// exp(mean lp) compensates for sequence length when comparing responses of
/// very different sizes.
pub fn sequence_probability(
    token_logprobs: &[f64],
    length_normalize: bool,
) -> Result<f64, EntropyError> {
    if token_logprobs.is_empty() {
        return Err(EntropyError::EmptyLogprobs);
    }
    for &lp in token_logprobs {
        if lp > 0.0 || lp.is_nan() {
            return Err(EntropyError::PositiveLogprob(lp));
        }
    }
    let sum: f64 = token_logprobs.iter().sum();
    let exponent = if length_normalize {
        sum / token_logprobs.len() as f64
    } else {
        sum
    };
    Ok(exponent.exp())
}

/// Shannon entropy in nats over the clustering's masses.
///
/// Exactly 0 for a single cluster. Clusters whose mass has underflowed to
/// effectively zero are dropped (with a warning) rather than poisoning the
/// sum with log(0).
pub fn semantic_entropy(clustering: &SemanticClustering) -> Result<f64, EntropyError> {
    let masses = clustering.masses().ok_or(EntropyError::MassesUnset)?;
    let total: f64 = masses.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(EntropyError::UnnormalizedMasses(total));
    }
    if masses.len() == 1 {
        return Ok(0.0);
    }
    let mut entropy = 0.0;
    for &mass in masses {
        if mass < MASS_FLOOR {
            tracing::warn!(mass, "dropping underflowed cluster mass from entropy");
            continue;
        }
        entropy -= mass * mass.ln();
    }
    // Negative zero and tiny negative residue from rounding both clamp.
    Ok(entropy.max(0.0))
}

/// One uncertainty component for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub prompt_id: String,
    pub axis: Axis,
    /// Semantic entropy in nats.
    pub value: f64,
    pub num_clusters: usize,
    pub num_responses: usize,
    pub weighting: Weighting,
    /// Fingerprint of the clustering the value was computed from.
    pub clustering_ref: String,
}

fn score_bundle(
    expected_axis: Axis,
    bundle: &ResponseBundle,
    judge: &dyn EquivalenceJudge,
    weighting: Weighting,
) -> Result<UncertaintyScore, EntropyError> {
    if bundle.axis() != expected_axis {
        return Err(EntropyError::AxisMismatch {
            expected: expected_axis,
            actual: bundle.axis(),
        });
    }
    let clustering = cluster_bundle(bundle, judge)?;
    let clustering = assign_masses(&clustering, bundle, weighting)?;
    let value = semantic_entropy(&clustering)?;
    Ok(UncertaintyScore {
        prompt_id: bundle.prompt_id().to_owned(),
        axis: expected_axis,
        value,
        num_clusters: clustering.num_clusters(),
        num_responses: bundle.len(),
        weighting,
        clustering_ref: clustering.fingerprint(),
    })
}

/// Uncertainty induced by prompt rewording: entropy over clusters of
/// greedy responses to K paraphrases of one question.
pub fn score_input(
    bundle: &ResponseBundle,
    judge: &dyn EquivalenceJudge,
    weighting: Weighting,
) -> Result<UncertaintyScore, EntropyError> {
    score_bundle(Axis::Input, bundle, judge, weighting)
}

/// Uncertainty over what the model knows: entropy over clusters of
/// responses from M ensemble members to the same prompt.
pub fn score_knowledge(
    bundle: &ResponseBundle,
    judge: &dyn EquivalenceJudge,
    weighting: Weighting,
) -> Result<UncertaintyScore, EntropyError> {
    score_bundle(Axis::Knowledge, bundle, judge, weighting)
}

/// Uncertainty introduced by stochastic decoding: entropy over clusters of
/// N seeded samples under one policy.
pub fn score_decoding(
    bundle: &ResponseBundle,
    judge: &dyn EquivalenceJudge,
    weighting: Weighting,
) -> Result<UncertaintyScore, EntropyError> {
    score_bundle(Axis::Decoding, bundle, judge, weighting)
}
