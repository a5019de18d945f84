//! Entailment judge backed by an HTTP natural-language-inference service.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EquivalenceJudge, EquivalenceVerdict, JudgeError};

pub const DEFAULT_GAMMA: f64 = 0.5;

#[derive(Debug, Serialize)]
struct NliRequest<'a> {
    premise: &'a str,
    hypothesis: &'a str,
}

#[derive(Debug, Deserialize)]
struct NliResponse {
    entailment_probability: f64,
}

/// Judges equivalence as bidirectional entailment: each direction is a
/// separate POST of `{premise, hypothesis}` expecting
/// `{entailment_probability}`, and the pair is equivalent only when both
/// probabilities reach `gamma` (inclusive).
///
/// Directed scores are cached by (premise, hypothesis), so the reverse
/// direction of an already-judged ordered pair costs nothing. The cache lock
/// is held only around lookups and inserts, never across a network call, so
/// concurrent workers can judge in parallel (at the cost of an occasional
/// duplicate request for the same direction).
pub struct NliJudge {
    endpoint: String,
    gamma: f64,
    client: reqwest::blocking::Client,
    cache: Mutex<HashMap<(String, String), f64>>,
}

impl NliJudge {
    pub fn new(endpoint: impl Into<String>, gamma: f64) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .expect("default TLS client construction cannot fail");
        NliJudge {
            endpoint: endpoint.into(),
            gamma,
            client,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Entailment probability premise => hypothesis, via cache or wire.
    fn directed_score(&self, premise: &str, hypothesis: &str) -> Result<f64, JudgeError> {
        let key = (premise.to_owned(), hypothesis.to_owned());
        if let Some(score) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(*score);
        }
        let score = self.query(premise, hypothesis)?;
        self.cache.lock().expect("cache lock").insert(key, score);
        Ok(score)
    }

    fn query(&self, premise: &str, hypothesis: &str) -> Result<f64, JudgeError> {
        let response = self
            .client
            .post(&self.endpoint)
            .json(&NliRequest {
                premise,
                hypothesis,
            })
            .send()
            .map_err(|e| JudgeError::Transport(format!("POST {}: {e}", self.endpoint)))?;
        let status = response.status();
        if !status.is_success() {
            return Err(JudgeError::Transport(format!(
                "POST {}: status {status}",
                self.endpoint
            )));
        }
        let body: NliResponse = response
            .json()
            .map_err(|e| JudgeError::Protocol(format!("undecodable judge response: {e}")))?;
        let p = body.entailment_probability;
        if !(0.0..=1.0).contains(&p) || !p.is_finite() {
            return Err(JudgeError::Protocol(format!(
                "entailment_probability {p} outside [0,1]"
            )));
        }
        Ok(p)
    }

    /// Short answers are often ambiguous without the question, so judged
    /// texts carry it when available.
    fn with_context(context: &str, text: &str) -> String {
        if context.is_empty() {
            text.to_owned()
        } else {
            format!("Q: {context} A: {text}")
        }
    }
}

impl EquivalenceJudge for NliJudge {
    fn name(&self) -> &str {
        "nli"
    }

    fn judge_pair(
        &self,
        a: &str,
        b: &str,
        context: &str,
    ) -> Result<EquivalenceVerdict, JudgeError> {
        let left = Self::with_context(context, a);
        let right = Self::with_context(context, b);
        let forward_score = self.directed_score(&left, &right)?;
        let backward_score = self.directed_score(&right, &left)?;
        Ok(EquivalenceVerdict {
            forward_score,
            backward_score,
            equivalent: forward_score >= self.gamma && backward_score >= self.gamma,
        })
    }
}
