//! Lexical overlap scoring: normalization, longest common subsequence, and
//! Rouge-L between a generated answer and a reference.

use serde::{Deserialize, Serialize};

/// Tokens produced by [`normalize_text`], in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Lowercases, maps every non-alphanumeric character to a space, and splits
/// on whitespace. "The cat, the CAT!" and "the cat the cat" tokenize alike.
pub fn normalize_text(text: &str) -> TokenSequence {
    let mut lowered = String::with_capacity(text.len());
    for c in text.chars() {
        if c.is_alphanumeric() {
            lowered.extend(c.to_lowercase());
        } else {
            lowered.push(' ');
        }
    }
    TokenSequence(lowered.split_whitespace().map(str::to_owned).collect())
}

/// Length of the longest common subsequence of two token slices.
///
/// Standard dynamic program over a (m+1) x (n+1) table, rolled to two rows.
pub fn lcs_length(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let n = b.len();
    let mut prev = vec![0usize; n + 1];
    let mut curr = vec![0usize; n + 1];
    for token_a in a {
        for (j, token_b) in b.iter().enumerate() {
            curr[j + 1] = if token_a == token_b {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[n]
}

/// Which Rouge-L aggregate to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RougeVariant {
    /// Harmonic mean of LCS precision and recall.
    F1,
    /// LCS recall against the reference alone.
    Recall,
}

impl Default for RougeVariant {
    fn default() -> Self {
        RougeVariant::F1
    }
}

/// Rouge-L between a candidate and a reference after [`normalize_text`].
///
/// With LCS length L, precision P = L/len(candidate) and recall
/// R = L/len(reference); F1 = 2PR/(P+R). Returns 0 when either side has no
/// tokens or the LCS is empty.
pub fn rouge_l(candidate: &str, reference: &str, variant: RougeVariant) -> f64 {
    let cand = normalize_text(candidate);
    let refr = normalize_text(reference);
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let lcs = lcs_length(cand.tokens(), refr.tokens()) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / cand.len() as f64;
    let recall = lcs / refr.len() as f64;
    match variant {
        RougeVariant::F1 => 2.0 * precision * recall / (precision + recall),
        RougeVariant::Recall => recall,
    }
}
