//! Deterministic synthetic backend with analytically known answer
//! distributions, the ground-truth oracle for end-to-end tests.
//!
//! Each question carries a categorical answer distribution. Greedy and beam
//! return the mode; stochastic policies draw from the distribution with an
//! RNG seeded from the request fingerprint, so every request is individually
//! reproducible and distinct seeds give independent draws. The true semantic
//! entropy of a question is just -sum p ln p over its distinct answers.

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::Utc;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{request_fingerprint, BackendError, GenerationBackend, GenerationRequest};
use crate::records::{GenerationRecord, PolicyKind};

/// Marks a paraphrase request; must prefix the paraphrase system prompt.
pub(crate) const PARAPHRASE_MARKER: &str = "For question Q, provide";

type Distribution = Vec<(String, f64)>;

/// Ground truth for one question.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticModelSpec {
    /// Categorical answer distribution; probabilities sum to 1.
    pub answers: Distribution,
    /// Alternative distribution per paraphrase index, for questions whose
    /// answer shifts under rewording. Missing indices fall back to `answers`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub paraphrase_sensitivity: BTreeMap<u32, Distribution>,
    /// Alternative distribution per backend id, for simulating ensemble
    /// members that disagree. Missing ids fall back to `answers`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub member_overrides: BTreeMap<String, Distribution>,
    /// Folded into every draw's RNG seed.
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticModelSpec {
    pub fn uniform(answers: &[&str]) -> Self {
        let p = 1.0 / answers.len() as f64;
        SyntheticModelSpec {
            answers: answers.iter().map(|a| ((*a).to_owned(), p)).collect(),
            paraphrase_sensitivity: BTreeMap::new(),
            member_overrides: BTreeMap::new(),
            seed: 0,
        }
    }

    pub fn certain(answer: &str) -> Self {
        SyntheticModelSpec {
            answers: vec![(answer.to_owned(), 1.0)],
            paraphrase_sensitivity: BTreeMap::new(),
            member_overrides: BTreeMap::new(),
            seed: 0,
        }
    }

    fn validate(&self, question: &str) -> Result<(), BackendError> {
        let check = |name: &str, dist: &Distribution| -> Result<(), BackendError> {
            if dist.is_empty() {
                return Err(BackendError::Config(format!(
                    "question `{question}`: {name} distribution is empty"
                )));
            }
            let mut total = 0.0;
            for (answer, p) in dist {
                if !p.is_finite() || *p < 0.0 {
                    return Err(BackendError::Config(format!(
                        "question `{question}`: probability {p} for `{answer}` is invalid"
                    )));
                }
                total += p;
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(BackendError::Config(format!(
                    "question `{question}`: {name} distribution sums to {total}, not 1"
                )));
            }
            Ok(())
        };
        check("base", &self.answers)?;
        for (idx, dist) in &self.paraphrase_sensitivity {
            check(&format!("paraphrase {idx}"), dist)?;
        }
        for (member, dist) in &self.member_overrides {
            check(&format!("member `{member}`"), dist)?;
        }
        Ok(())
    }

    /// Exact semantic entropy of a distribution, nats, treating each
    /// distinct answer text as its own meaning.
    pub fn entropy_of(dist: &Distribution) -> f64 {
        let mut by_text: BTreeMap<&str, f64> = BTreeMap::new();
        for (answer, p) in dist {
            *by_text.entry(answer.as_str()).or_insert(0.0) += p;
        }
        -by_text
            .values()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// A full synthetic model: question text to ground-truth spec.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SyntheticModel {
    pub prompts: BTreeMap<String, SyntheticModelSpec>,
}

impl SyntheticModel {
    pub fn new(prompts: BTreeMap<String, SyntheticModelSpec>) -> Result<Self, BackendError> {
        for (question, spec) in &prompts {
            spec.validate(question)?;
        }
        Ok(SyntheticModel { prompts })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, BackendError> {
        let body = std::fs::read_to_string(path).map_err(|e| {
            BackendError::Config(format!("cannot read model file {}: {e}", path.display()))
        })?;
        let prompts: BTreeMap<String, SyntheticModelSpec> = serde_json::from_str(&body)
            .map_err(|e| {
                BackendError::Config(format!("cannot parse model file {}: {e}", path.display()))
            })?;
        Self::new(prompts)
    }
}

/// Splits "question (variant N)" produced by the synthetic paraphraser back
/// into the base question and the paraphrase index.
fn split_variant(prompt: &str) -> (&str, Option<u32>) {
    if let Some(pos) = prompt.rfind(" (variant ") {
        if let Some(rest) = prompt[pos + " (variant ".len()..].strip_suffix(')') {
            if let Ok(index) = rest.parse::<u32>() {
                return (&prompt[..pos], Some(index));
            }
        }
    }
    (prompt, None)
}

/// How many paraphrases the system prompt asks for ("provide {k} ...").
fn requested_count(system_text: &str) -> usize {
    system_text
        .split_whitespace()
        .skip_while(|w| *w != "provide")
        .nth(1)
        .and_then(|w| w.parse().ok())
        .unwrap_or(5)
}

pub struct SyntheticBackend {
    id: String,
    model: Arc<SyntheticModel>,
}

impl SyntheticBackend {
    pub fn new(id: impl Into<String>, model: Arc<SyntheticModel>) -> Self {
        SyntheticBackend {
            id: id.into(),
            model,
        }
    }

    fn paraphrase(&self, request: &GenerationRequest) -> GenerationRecord {
        let system = request.system_text.as_deref().unwrap_or_default();
        let k = requested_count(system);
        let original = request
            .prompt_text
            .strip_prefix("Q: ")
            .unwrap_or(&request.prompt_text);
        let entries: Vec<String> = (0..k)
            .map(|i| {
                let text = format!("{original} (variant {i})");
                format!(
                    "{i}: {}",
                    serde_json::to_string(&text).expect("string encodes")
                )
            })
            .collect();
        self.record(request, format!("{{{}}}", entries.join(", ")), None)
    }

    fn record(
        &self,
        request: &GenerationRequest,
        text: String,
        token_logprobs: Option<Vec<f64>>,
    ) -> GenerationRecord {
        GenerationRecord {
            prompt_id: String::new(),
            variant_key: String::new(),
            text,
            token_logprobs,
            backend_id: request.backend_id.clone(),
            policy: request.policy.clone(),
            timestamp: Utc::now(),
        }
    }
}

impl GenerationBackend for SyntheticBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationRecord, BackendError> {
        request
            .policy
            .validate()
            .map_err(|e| BackendError::Config(e.to_string()))?;

        if request
            .system_text
            .as_deref()
            .is_some_and(|s| s.starts_with(PARAPHRASE_MARKER))
        {
            return Ok(self.paraphrase(request));
        }

        let (question, variant) = split_variant(&request.prompt_text);
        let spec = self.model.prompts.get(question).ok_or_else(|| {
            BackendError::Config(format!(
                "synthetic model has no distribution for question `{question}`"
            ))
        })?;
        let distribution = match variant {
            Some(index) => spec
                .paraphrase_sensitivity
                .get(&index)
                .unwrap_or(&spec.answers),
            None => spec
                .member_overrides
                .get(&request.backend_id)
                .unwrap_or(&spec.answers),
        };

        let (answer, probability) = match request.policy.kind() {
            // Mode of the categorical; ties go to the first-listed answer.
            PolicyKind::Greedy | PolicyKind::Beam => {
                let mut best = &distribution[0];
                for entry in &distribution[1..] {
                    if entry.1 > best.1 {
                        best = entry;
                    }
                }
                best.clone()
            }
            PolicyKind::Temperature | PolicyKind::TopK | PolicyKind::TopP => {
                // Seeded from the fingerprint so each request reproduces its
                // own draw and distinct seeds give fresh draws.
                let mut hasher = Sha256::new();
                hasher.update(spec.seed.to_le_bytes());
                hasher.update(request_fingerprint(request).as_bytes());
                let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = &distribution[distribution.len() - 1];
                for entry in distribution {
                    acc += entry.1;
                    if u < acc {
                        chosen = entry;
                        break;
                    }
                }
                chosen.clone()
            }
        };

        let token_logprobs = request
            .want_logprobs
            .then(|| vec![probability.ln().min(0.0)]);
        Ok(self.record(request, answer, token_logprobs))
    }
}
