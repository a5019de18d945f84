//! Persistent data model: prompts, decoding policies, generations, and
//! response bundles, plus dataset validation on ingest.
//!
//! Everything here is an immutable value after construction and safe to share
//! across threads. Storage is JSON Lines, one record per line, UTF-8.
//! Timestamps are informational only and excluded from equality.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by the data model and dataset ingest.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    InvalidLine { line: usize, reason: String },
    #[error("invalid decoding policy: {0}")]
    Policy(String),
    #[error("invalid bundle: {0}")]
    Bundle(String),
}

/// One dataset prompt with its reference answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub question: String,
    pub reference_answer: String,
    pub dataset_tag: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

/// Names the five supported decoding strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Greedy,
    Beam,
    Temperature,
    TopK,
    TopP,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Greedy,
        PolicyKind::Beam,
        PolicyKind::Temperature,
        PolicyKind::TopK,
        PolicyKind::TopP,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::Greedy => "greedy",
            PolicyKind::Beam => "beam",
            PolicyKind::Temperature => "temperature",
            PolicyKind::TopK => "top_k",
            PolicyKind::TopP => "top_p",
        }
    }

    /// The policy with this kind's default parameters and no seed.
    pub fn default_policy(&self) -> DecodingPolicy {
        match self {
            PolicyKind::Greedy => DecodingPolicy::greedy(),
            PolicyKind::Beam => DecodingPolicy::beam_default(),
            PolicyKind::Temperature => DecodingPolicy::temperature(DEFAULT_TEMPERATURE),
            PolicyKind::TopK => DecodingPolicy::top_k(DEFAULT_TOP_K),
            PolicyKind::TopP => DecodingPolicy::top_p(DEFAULT_TOP_P),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(PolicyKind::Greedy),
            "beam" => Ok(PolicyKind::Beam),
            "temperature" => Ok(PolicyKind::Temperature),
            "top_k" => Ok(PolicyKind::TopK),
            "top_p" => Ok(PolicyKind::TopP),
            other => Err(DataError::Policy(format!("unknown policy kind `{other}`"))),
        }
    }
}

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_TOP_K: u32 = 50;
pub const DEFAULT_TOP_P: f64 = 0.9;
pub const DEFAULT_NUM_BEAMS: u32 = 5;
pub const DEFAULT_LENGTH_PENALTY: f64 = 1.0;

/// A decoding strategy with exactly the parameters of its kind.
///
/// The representation makes the "only the declared kind's parameters are set"
/// invariant structural: a beam policy cannot carry a temperature. The seed is
/// orthogonal to the kind and may be attached to any policy; it is semantic
/// (two requests differing only in seed are different requests).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodingPolicy {
    Greedy {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<i64>,
    },
    Beam {
        num_beams: u32,
        length_penalty: f64,
        early_stopping: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<i64>,
    },
    Temperature {
        temperature: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<i64>,
    },
    TopK {
        k: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<i64>,
    },
    TopP {
        p: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<i64>,
    },
}

impl DecodingPolicy {
    pub fn greedy() -> Self {
        DecodingPolicy::Greedy { seed: None }
    }

    /// Beam search with 5 beams, length penalty 1.0, early stopping.
    pub fn beam_default() -> Self {
        DecodingPolicy::Beam {
            num_beams: DEFAULT_NUM_BEAMS,
            length_penalty: DEFAULT_LENGTH_PENALTY,
            early_stopping: true,
            seed: None,
        }
    }

    pub fn temperature(temperature: f64) -> Self {
        DecodingPolicy::Temperature {
            temperature,
            seed: None,
        }
    }

    pub fn top_k(k: u32) -> Self {
        DecodingPolicy::TopK { k, seed: None }
    }

    pub fn top_p(p: f64) -> Self {
        DecodingPolicy::TopP { p, seed: None }
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            DecodingPolicy::Greedy { .. } => PolicyKind::Greedy,
            DecodingPolicy::Beam { .. } => PolicyKind::Beam,
            DecodingPolicy::Temperature { .. } => PolicyKind::Temperature,
            DecodingPolicy::TopK { .. } => PolicyKind::TopK,
            DecodingPolicy::TopP { .. } => PolicyKind::TopP,
        }
    }

    pub fn seed(&self) -> Option<i64> {
        match self {
            DecodingPolicy::Greedy { seed }
            | DecodingPolicy::Beam { seed, .. }
            | DecodingPolicy::Temperature { seed, .. }
            | DecodingPolicy::TopK { seed, .. }
            | DecodingPolicy::TopP { seed, .. } => *seed,
        }
    }

    /// The same policy with the seed replaced.
    pub fn with_seed(&self, new_seed: i64) -> Self {
        let mut policy = self.clone();
        match &mut policy {
            DecodingPolicy::Greedy { seed }
            | DecodingPolicy::Beam { seed, .. }
            | DecodingPolicy::Temperature { seed, .. }
            | DecodingPolicy::TopK { seed, .. }
            | DecodingPolicy::TopP { seed, .. } => *seed = Some(new_seed),
        }
        policy
    }

    /// True when the policies agree on kind and every parameter except the seed.
    pub fn params_match(&self, other: &DecodingPolicy) -> bool {
        let strip = |p: &DecodingPolicy| {
            let mut p = p.clone();
            match &mut p {
                DecodingPolicy::Greedy { seed }
                | DecodingPolicy::Beam { seed, .. }
                | DecodingPolicy::Temperature { seed, .. }
                | DecodingPolicy::TopK { seed, .. }
                | DecodingPolicy::TopP { seed, .. } => *seed = None,
            }
            p
        };
        strip(self) == strip(other)
    }

    /// True for policies that sample (temperature, top-k, top-p).
    pub fn is_stochastic(&self) -> bool {
        matches!(
            self.kind(),
            PolicyKind::Temperature | PolicyKind::TopK | PolicyKind::TopP
        )
    }

    /// Range checks on the kind's parameters.
    pub fn validate(&self) -> Result<(), DataError> {
        match self {
            DecodingPolicy::Greedy { .. } => Ok(()),
            DecodingPolicy::Beam {
                num_beams,
                length_penalty,
                ..
            } => {
                if *num_beams == 0 {
                    return Err(DataError::Policy("num_beams must be positive".into()));
                }
                if !length_penalty.is_finite() {
                    return Err(DataError::Policy("length_penalty must be finite".into()));
                }
                Ok(())
            }
            DecodingPolicy::Temperature { temperature, .. } => {
                if !temperature.is_finite() || *temperature < 0.0 {
                    return Err(DataError::Policy(format!(
                        "temperature must be >= 0, got {temperature}"
                    )));
                }
                Ok(())
            }
            DecodingPolicy::TopK { k, .. } => {
                if *k == 0 {
                    return Err(DataError::Policy("k must be positive".into()));
                }
                Ok(())
            }
            DecodingPolicy::TopP { p, .. } => {
                if !p.is_finite() || *p <= 0.0 || *p > 1.0 {
                    return Err(DataError::Policy(format!("p must be in (0,1], got {p}")));
                }
                Ok(())
            }
        }
    }
}

/// One model response with full provenance.
///
/// `variant_key` identifies which member of a bundle this record is: the
/// paraphrase index on the input axis, the ensemble member id on the knowledge
/// axis, or the sample index on the decoding axis. Kept as a string so all
/// three share one schema.
///
/// Equality ignores `timestamp`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt_id: String,
    pub variant_key: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    pub backend_id: String,
    pub policy: DecodingPolicy,
    pub timestamp: DateTime<Utc>,
}

impl GenerationRecord {
    /// Natural-log token log-probabilities must be non-positive.
    pub fn validate(&self) -> Result<(), DataError> {
        if let Some(logprobs) = &self.token_logprobs {
            for (i, lp) in logprobs.iter().enumerate() {
                if !lp.is_finite() || *lp > 0.0 {
                    return Err(DataError::Bundle(format!(
                        "record `{}`/`{}`: token_logprobs[{i}] = {lp} is not a log-probability",
                        self.prompt_id, self.variant_key
                    )));
                }
            }
        }
        self.policy.validate()
    }
}

impl PartialEq for GenerationRecord {
    fn eq(&self, other: &Self) -> bool {
        self.prompt_id == other.prompt_id
            && self.variant_key == other.variant_key
            && self.text == other.text
            && self.token_logprobs == other.token_logprobs
            && self.backend_id == other.backend_id
            && self.policy == other.policy
    }
}

/// Which single factor a bundle varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Input,
    Knowledge,
    Decoding,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Input, Axis::Knowledge, Axis::Decoding];

    pub fn as_str(&self) -> &'static str {
        match self {
            Axis::Input => "input",
            Axis::Knowledge => "knowledge",
            Axis::Decoding => "decoding",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "input" => Ok(Axis::Input),
            "knowledge" => Ok(Axis::Knowledge),
            "decoding" => Ok(Axis::Decoding),
            other => Err(DataError::Policy(format!("unknown axis `{other}`"))),
        }
    }
}

/// A set of generations that vary exactly one factor.
///
/// Construction enforces the per-axis invariants, so a bundle in hand is
/// always well-formed:
///
/// - `input`: one backend, one policy, distinct paraphrase indices;
/// - `knowledge`: one policy, distinct backends (the prompt text itself is
///   held fixed at collection time and is not re-checkable from records);
/// - `decoding`: one backend, one policy up to the seed, distinct seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseBundle {
    prompt_id: String,
    axis: Axis,
    records: Vec<GenerationRecord>,
    fixed_context: String,
}

impl ResponseBundle {
    pub fn new(
        prompt_id: impl Into<String>,
        axis: Axis,
        records: Vec<GenerationRecord>,
        fixed_context: impl Into<String>,
    ) -> Result<Self, DataError> {
        let prompt_id = prompt_id.into();
        if records.len() < 2 {
            return Err(DataError::Bundle(format!(
                "bundle for `{prompt_id}` has {} records; need at least 2",
                records.len()
            )));
        }
        for record in &records {
            record.validate()?;
            if record.prompt_id != prompt_id {
                return Err(DataError::Bundle(format!(
                    "record prompt_id `{}` does not match bundle prompt_id `{prompt_id}`",
                    record.prompt_id
                )));
            }
        }

        let mut identities = HashSet::new();
        for record in &records {
            let identity = (
                record.variant_key.clone(),
                record.backend_id.clone(),
                serde_json::to_string(&record.policy).expect("policy serializes"),
            );
            if !identities.insert(identity) {
                return Err(DataError::Bundle(format!(
                    "duplicate record identity `{}`/`{}` in bundle for `{prompt_id}`",
                    record.variant_key, record.backend_id
                )));
            }
        }

        let first = &records[0];
        match axis {
            Axis::Input => {
                if records.iter().any(|r| r.backend_id != first.backend_id) {
                    return Err(DataError::Bundle(
                        "input bundle must use a single backend".into(),
                    ));
                }
                if records.iter().any(|r| r.policy != first.policy) {
                    return Err(DataError::Bundle(
                        "input bundle must use a single policy".into(),
                    ));
                }
                Self::require_distinct(&records, |r| r.variant_key.clone(), "paraphrase index")?;
            }
            Axis::Knowledge => {
                if records.iter().any(|r| r.policy != first.policy) {
                    return Err(DataError::Bundle(
                        "knowledge bundle must use a single policy".into(),
                    ));
                }
                Self::require_distinct(&records, |r| r.backend_id.clone(), "backend id")?;
                Self::require_distinct(&records, |r| r.variant_key.clone(), "member key")?;
            }
            Axis::Decoding => {
                if records.iter().any(|r| r.backend_id != first.backend_id) {
                    return Err(DataError::Bundle(
                        "decoding bundle must use a single backend".into(),
                    ));
                }
                if records.iter().any(|r| !r.policy.params_match(&first.policy)) {
                    return Err(DataError::Bundle(
                        "decoding bundle must hold the policy fixed up to the seed".into(),
                    ));
                }
                let mut seeds = HashSet::new();
                for record in &records {
                    let seed = record.policy.seed().ok_or_else(|| {
                        DataError::Bundle(format!(
                            "decoding record `{}` has no seed",
                            record.variant_key
                        ))
                    })?;
                    if !seeds.insert(seed) {
                        return Err(DataError::Bundle(format!(
                            "decoding bundle repeats seed {seed}"
                        )));
                    }
                }
                Self::require_distinct(&records, |r| r.variant_key.clone(), "sample index")?;
            }
        }

        Ok(ResponseBundle {
            prompt_id,
            axis,
            records,
            fixed_context: fixed_context.into(),
        })
    }

    fn require_distinct<K: std::hash::Hash + Eq + fmt::Display>(
        records: &[GenerationRecord],
        key: impl Fn(&GenerationRecord) -> K,
        what: &str,
    ) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for record in records {
            let k = key(record);
            if !seen.insert(k) {
                return Err(DataError::Bundle(format!(
                    "bundle repeats {what} `{}`",
                    key(record)
                )));
            }
        }
        Ok(())
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn records(&self) -> &[GenerationRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn fixed_context(&self) -> &str {
        &self.fixed_context
    }
}

/// Per-line outcome of dataset validation.
#[derive(Debug, Clone, Serialize)]
pub struct LineIssue {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

/// Summary of a dataset scan: every malformed line with its reason.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub path: String,
    pub total: usize,
    pub valid: usize,
    pub invalid: usize,
    pub errors: Vec<LineIssue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.invalid == 0
    }
}

/// Scans a JSONL dataset and reports every malformed line without aborting.
///
/// A line is invalid when it is blank, fails to decode, violates a field
/// invariant (empty `id` or `question`), or repeats an earlier `id` (the
/// duplicate is reported on its second occurrence).
pub fn validate_dataset(path: &Path) -> Result<ValidationReport, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut report = ValidationReport {
        path: path.display().to_string(),
        total: 0,
        valid: 0,
        invalid: 0,
        errors: Vec::new(),
    };
    let mut seen_ids: HashSet<String> = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        report.total += 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;

        let reason = match check_prompt_line(&line, &mut seen_ids) {
            Ok(()) => {
                report.valid += 1;
                continue;
            }
            Err(reason) => reason,
        };
        report.invalid += 1;
        report.errors.push(LineIssue {
            line: line_no,
            reason,
        });
    }

    Ok(report)
}

fn check_prompt_line(line: &str, seen_ids: &mut HashSet<String>) -> Result<(), String> {
    if line.trim().is_empty() {
        return Err("blank line".into());
    }
    let record: PromptRecord =
        serde_json::from_str(line).map_err(|e| format!("undecodable record: {e}"))?;
    if record.id.is_empty() {
        return Err("field `id` is empty".into());
    }
    if record.question.is_empty() {
        return Err("field `question` is empty".into());
    }
    if !seen_ids.insert(record.id.clone()) {
        return Err(format!("duplicate id `{}`", record.id));
    }
    Ok(())
}

/// Loads a dataset strictly: the first malformed line aborts with its number.
pub fn load_dataset(path: &Path) -> Result<Vec<PromptRecord>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen_ids = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        check_prompt_line(&line, &mut seen_ids).map_err(|reason| DataError::InvalidLine {
            line: idx + 1,
            reason,
        })?;
        let record: PromptRecord = serde_json::from_str(&line).expect("checked above");
        records.push(record);
    }
    Ok(records)
}
