//! Semantic equivalence judging and clustering of response bundles.
//!
//! A judge scores a directed entailment both ways; a pair is equivalent only
//! when both directions clear the threshold. Clusters are the connected
//! components of the pairwise equivalence graph, so equivalence is closed
//! transitively even when the raw judge relation is not transitive. A
//! greedy-sequential alternative that matches each response against cluster
//! representatives is provided for cross-checking; it trades pair coverage
//! for fewer judge calls and is not the default.

mod dsu;
mod nli;

pub use dsu::DisjointSet;
pub use nli::{NliJudge, DEFAULT_GAMMA};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::records::ResponseBundle;
use crate::textmetrics::{normalize_text, rouge_l, RougeVariant};

/// Errors from a judge backend.
#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge transport failure: {0}")]
    Transport(String),
    #[error("judge protocol violation: {0}")]
    Protocol(String),
}

/// Errors from clustering and mass assignment.
#[derive(Debug, Error)]
pub enum ClusterError {
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error("record `{variant_key}` has no token logprobs; sequence weighting needs them")]
    MissingLogprobs { variant_key: String },
    #[error("bundle has no records to cluster")]
    EmptyBundle,
}

/// Both directed scores and the symmetric decision for one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceVerdict {
    pub forward_score: f64,
    pub backward_score: f64,
    pub equivalent: bool,
}

/// Decides whether two response texts mean the same thing.
///
/// `context` carries the question the responses answer; judges that condition
/// on it (the entailment judge) prepend it to each side, lexical judges
/// ignore it.
pub trait EquivalenceJudge: Send + Sync {
    fn name(&self) -> &str;

    fn judge_pair(
        &self,
        a: &str,
        b: &str,
        context: &str,
    ) -> Result<EquivalenceVerdict, JudgeError>;
}

/// Equivalence as equality of normalized token sequences.
#[derive(Debug, Default, Clone)]
pub struct ExactJudge;

impl EquivalenceJudge for ExactJudge {
    fn name(&self) -> &str {
        "exact"
    }

    fn judge_pair(
        &self,
        a: &str,
        b: &str,
        _context: &str,
    ) -> Result<EquivalenceVerdict, JudgeError> {
        let same = normalize_text(a) == normalize_text(b);
        let score = if same { 1.0 } else { 0.0 };
        Ok(EquivalenceVerdict {
            forward_score: score,
            backward_score: score,
            equivalent: same,
        })
    }
}

/// Equivalence as mutual Rouge-L F1 at or above a threshold.
#[derive(Debug, Clone)]
pub struct RougeJudge {
    pub threshold: f64,
}

impl RougeJudge {
    pub fn new(threshold: f64) -> Self {
        RougeJudge { threshold }
    }
}

impl EquivalenceJudge for RougeJudge {
    fn name(&self) -> &str {
        "rouge"
    }

    fn judge_pair(
        &self,
        a: &str,
        b: &str,
        _context: &str,
    ) -> Result<EquivalenceVerdict, JudgeError> {
        let forward = rouge_l(a, b, RougeVariant::F1);
        let backward = rouge_l(b, a, RougeVariant::F1);
        Ok(EquivalenceVerdict {
            forward_score: forward,
            backward_score: backward,
            equivalent: forward >= self.threshold && backward >= self.threshold,
        })
    }
}

/// How much probability each response contributes to its cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// exp of summed token logprobs; requires logprobs on every record.
    SequenceProb,
    /// Every response counts 1/n.
    Uniform,
}

/// A partition of bundle indices into semantic clusters, in canonical order:
/// clusters sorted by smallest member, members ascending. Masses are unset
/// until [`assign_masses`] runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticClustering {
    clusters: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    masses: Option<Vec<f64>>,
    num_items: usize,
}

impl SemanticClustering {
    fn from_groups(mut clusters: Vec<Vec<usize>>, num_items: usize) -> Self {
        for c in &mut clusters {
            c.sort_unstable();
        }
        clusters.sort_unstable_by_key(|c| c[0]);
        SemanticClustering {
            clusters,
            masses: None,
            num_items,
        }
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Per-cluster probability mass, present after [`assign_masses`].
    pub fn masses(&self) -> Option<&[f64]> {
        self.masses.as_deref()
    }

    /// Stable digest of the partition (masses excluded), usable as a
    /// cross-file reference.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for cluster in &self.clusters {
            for idx in cluster {
                hasher.update(idx.to_le_bytes());
                hasher.update([0x1f]);
            }
            hasher.update([0x1e]);
        }
        hex::encode(hasher.finalize())
    }
}

/// Clusters a bundle by judging every unordered pair and taking connected
/// components. Judge call count is exactly n(n-1)/2.
pub fn cluster_bundle(
    bundle: &ResponseBundle,
    judge: &dyn EquivalenceJudge,
) -> Result<SemanticClustering, ClusterError> {
    let records = bundle.records();
    if records.is_empty() {
        return Err(ClusterError::EmptyBundle);
    }
    let context = bundle.fixed_context();
    let n = records.len();
    let mut dsu = DisjointSet::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let verdict = judge.judge_pair(&records[i].text, &records[j].text, context)?;
            if verdict.equivalent {
                dsu.union(i, j);
            }
        }
    }
    Ok(SemanticClustering::from_groups(dsu.groups(), n))
}

/// Clusters greedily: each response is judged against one representative (the
/// first member) of each existing cluster and joins the first match. Costs at
/// most n * num_clusters judge calls but can split chains that pairwise
/// closure would join.
pub fn cluster_bundle_greedy(
    bundle: &ResponseBundle,
    judge: &dyn EquivalenceJudge,
) -> Result<SemanticClustering, ClusterError> {
    let records = bundle.records();
    if records.is_empty() {
        return Err(ClusterError::EmptyBundle);
    }
    let context = bundle.fixed_context();
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for (i, record) in records.iter().enumerate() {
        let mut joined = false;
        for cluster in &mut clusters {
            let rep = cluster[0];
            let verdict = judge.judge_pair(&records[rep].text, &record.text, context)?;
            if verdict.equivalent {
                cluster.push(i);
                joined = true;
                break;
            }
        }
        if !joined {
            clusters.push(vec![i]);
        }
    }
    Ok(SemanticClustering::from_groups(clusters, records.len()))
}

/// Sets per-cluster probability mass on a clustering.
///
/// Under [`Weighting::SequenceProb`] each response weighs
/// exp(sum of its token logprobs); under [`Weighting::Uniform`] each weighs
/// the same. Cluster masses are the member sums renormalized over the whole
/// bundle, so they always total 1.
pub fn assign_masses(
    clustering: &SemanticClustering,
    bundle: &ResponseBundle,
    weighting: Weighting,
) -> Result<SemanticClustering, ClusterError> {
    let records = bundle.records();
    let weights: Vec<f64> = match weighting {
        Weighting::Uniform => vec![1.0; records.len()],
        Weighting::SequenceProb => {
            let mut w = Vec::with_capacity(records.len());
            for record in records {
                let logprobs =
                    record
                        .token_logprobs
                        .as_ref()
                        .ok_or_else(|| ClusterError::MissingLogprobs {
                            variant_key: record.variant_key.clone(),
                        })?;
                if logprobs.is_empty() {
                    return Err(ClusterError::MissingLogprobs {
                        variant_key: record.variant_key.clone(),
                    });
                }
                w.push(logprobs.iter().sum::<f64>().exp());
            }
            w
        }
    };
    let total: f64 = weights.iter().sum();
    let masses = clustering
        .clusters()
        .iter()
        .map(|cluster| cluster.iter().map(|&i| weights[i]).sum::<f64>() / total)
        .collect();
    Ok(SemanticClustering {
        clusters: clustering.clusters.clone(),
        masses: Some(masses),
        num_items: clustering.num_items,
    })
}

/// A deterministic judge backed by a fixed verdict table, for tests and
/// replay. Pairs are looked up unordered; unknown pairs are not equivalent.
#[derive(Debug, Default, Clone)]
pub struct TableJudge {
    verdicts: HashMap<(String, String), bool>,
}

impl TableJudge {
    pub fn new() -> Self {
        TableJudge::default()
    }

    pub fn set(&mut self, a: &str, b: &str, equivalent: bool) {
        self.verdicts.insert(Self::key(a, b), equivalent);
    }

    fn key(a: &str, b: &str) -> (String, String) {
        if a <= b {
            (a.to_owned(), b.to_owned())
        } else {
            (b.to_owned(), a.to_owned())
        }
    }
}

impl EquivalenceJudge for TableJudge {
    fn name(&self) -> &str {
        "table"
    }

    fn judge_pair(
        &self,
        a: &str,
        b: &str,
        _context: &str,
    ) -> Result<EquivalenceVerdict, JudgeError> {
        let equivalent = a == b || *self.verdicts.get(&Self::key(a, b)).unwrap_or(&false);
        let score = if equivalent { 1.0 } else { 0.0 };
        Ok(EquivalenceVerdict {
            forward_score: score,
            backward_score: score,
            equivalent,
        })
    }
}
