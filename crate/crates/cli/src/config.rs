//! TOML run configuration: one file describes the collection plan, the
//! backends that serve it, the equivalence judge, the labeling rule, and the
//! evaluation parameters.
//!
//! The parsed [`RunConfig`] is echoed verbatim into `report.json`, so paths
//! stay exactly as written in the file; they are resolved against the config
//! file's directory only when handed to the core library.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uqd_core::backends::{
    BackendError, BackendRegistry, GenerationBackend, LiveBackend, LiveConfig, RecordingBackend,
    ReplayBackend, ReplayStore, SyntheticBackend, SyntheticModel,
};
use uqd_core::collect::CollectionPlan;
use uqd_core::equivalence::{
    EquivalenceJudge, ExactJudge, NliJudge, RougeJudge, Weighting, DEFAULT_GAMMA,
};
use uqd_core::eval::{
    EvalConfig, NormalizationMethod, DEFAULT_ECE_BINS, DEFAULT_ROUGE_THRESHOLD,
};
use uqd_core::records::{Axis, PolicyKind};
use uqd_core::textmetrics::RougeVariant;

/// Environment fallback for the NLI judge endpoint when the config does not
/// set `[judge].endpoint`.
pub const NLI_ENDPOINT_ENV: &str = "UQD_NLI_ENDPOINT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Everything a run needs, deserialized from one TOML file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub collection: CollectionSection,
    #[serde(default)]
    pub backends: Vec<BackendSection>,
    #[serde(default)]
    pub judge: JudgeSection,
    #[serde(default)]
    pub labeling: LabelingSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Mirror of [`CollectionPlan`] with paths kept as written and the decoding
/// sweep given by policy kind; each kind expands to its standard parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectionSection {
    pub dataset: String,
    pub out_dir: String,
    pub axes: Vec<Axis>,
    #[serde(default = "default_fanout")]
    pub k: usize,
    #[serde(default = "default_fanout")]
    pub m: usize,
    #[serde(default = "default_fanout")]
    pub n: usize,
    #[serde(default)]
    pub policies: Vec<PolicyKind>,
    #[serde(default)]
    pub paraphraser_backend: String,
    pub target_backend: String,
    #[serde(default)]
    pub ensemble_backends: Vec<String>,
    #[serde(default)]
    pub include_original: bool,
    #[serde(default = "default_true")]
    pub collect_answers: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<i64>>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

/// One generation backend. `record_to` wraps the backend so every response
/// is appended to a replay store a later `kind = "replay"` entry can serve.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSection {
    /// Deterministic local model driven by a JSON behavior file.
    Synthetic {
        id: String,
        model_file: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        record_to: Option<String>,
    },
    /// Chat-completions HTTP endpoint.
    Openai {
        id: String,
        base_url: String,
        model: String,
        /// Falls back to the UQD_API_KEY environment variable.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        api_key: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_secs: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        in_flight_cap: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        record_to: Option<String>,
    },
    /// Replays a recorded store; never touches the network.
    Replay { id: String, store: String },
}

impl BackendSection {
    pub fn id(&self) -> &str {
        match self {
            BackendSection::Synthetic { id, .. }
            | BackendSection::Openai { id, .. }
            | BackendSection::Replay { id, .. } => id,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeSection {
    /// `exact`, `rouge`, or `nli`.
    #[serde(default = "default_judge_kind")]
    pub kind: String,
    /// Bidirectional entailment threshold for the NLI judge.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_rouge_threshold")]
    pub rouge_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default = "default_weighting")]
    pub weighting: Weighting,
}

impl Default for JudgeSection {
    fn default() -> Self {
        JudgeSection {
            kind: default_judge_kind(),
            gamma: default_gamma(),
            rouge_threshold: default_rouge_threshold(),
            endpoint: None,
            weighting: default_weighting(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelingSection {
    /// `rouge` or `nli`.
    #[serde(default = "default_label_rule")]
    pub rule: String,
    #[serde(default = "default_rouge_threshold")]
    pub threshold: f64,
    /// `f1` or `recall`.
    #[serde(default = "default_variant")]
    pub variant: String,
}

impl Default for LabelingSection {
    fn default() -> Self {
        LabelingSection {
            rule: default_label_rule(),
            threshold: default_rouge_threshold(),
            variant: default_variant(),
        }
    }
}

impl LabelingSection {
    pub fn rouge_variant(&self) -> Result<RougeVariant, ConfigError> {
        match self.variant.as_str() {
            "f1" => Ok(RougeVariant::F1),
            "recall" => Ok(RougeVariant::Recall),
            other => Err(invalid(format!(
                "unknown labeling variant `{other}` (expected f1 or recall)"
            ))),
        }
    }

    /// Human-readable rule description recorded in every report.
    pub fn describe(&self) -> String {
        match self.rule.as_str() {
            "nli" => "bidirectional nli entailment vs reference".to_owned(),
            _ => format!("rouge_l_{} >= {}", self.variant, self.threshold),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// `min_max` or `max_entropy_ratio`.
    #[serde(default = "default_normalization")]
    pub normalization: String,
    #[serde(default = "default_true")]
    pub grid: bool,
    /// Decoding policy whose scores join the evaluation; defaults to the
    /// first of the configured sweep.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyKind>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            bins: default_bins(),
            normalization: default_normalization(),
            grid: default_true(),
            policy: None,
        }
    }
}

impl RunConfig {
    /// Parses `path` and returns the config together with the directory all
    /// relative paths inside it resolve against.
    pub fn load(path: &Path) -> Result<(RunConfig, PathBuf), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: RunConfig = toml::from_str(&text)?;
        config.check()?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_owned(),
            _ => PathBuf::from("."),
        };
        Ok((config, dir))
    }

    /// Cross-field checks that deserialization alone cannot express.
    fn check(&self) -> Result<(), ConfigError> {
        let c = &self.collection;
        let mut ids = BTreeSet::new();
        for section in &self.backends {
            if !ids.insert(section.id().to_owned()) {
                return Err(invalid(format!(
                    "backend id `{}` declared twice",
                    section.id()
                )));
            }
        }
        let known = |name: &str, role: &str| {
            if ids.contains(name) {
                Ok(())
            } else {
                Err(invalid(format!(
                    "{role} `{name}` does not match any [[backends]] id"
                )))
            }
        };
        known(&c.target_backend, "target_backend")?;
        if c.axes.contains(&Axis::Input) {
            known(&c.paraphraser_backend, "paraphraser_backend")?;
        }
        for member in &c.ensemble_backends {
            known(member, "ensemble backend")?;
        }
        if c.axes.contains(&Axis::Decoding) && c.policies.is_empty() {
            return Err(invalid(
                "decoding axis configured but [collection].policies is empty",
            ));
        }
        if let Some(policy) = self.eval.policy {
            if !c.policies.contains(&policy) {
                return Err(invalid(format!(
                    "[eval].policy `{policy}` is not in the configured sweep"
                )));
            }
        }
        match self.judge.kind.as_str() {
            "exact" | "rouge" | "nli" => {}
            other => {
                return Err(invalid(format!(
                    "unknown judge kind `{other}` (expected exact, rouge, or nli)"
                )))
            }
        }
        match self.labeling.rule.as_str() {
            "rouge" | "nli" => {}
            other => {
                return Err(invalid(format!(
                    "unknown labeling rule `{other}` (expected rouge or nli)"
                )))
            }
        }
        self.labeling.rouge_variant()?;
        match self.eval.normalization.as_str() {
            "min_max" | "max_entropy_ratio" => {}
            other => {
                return Err(invalid(format!(
                    "unknown normalization `{other}` (expected min_max or max_entropy_ratio)"
                )))
            }
        }
        Ok(())
    }

    /// The core collection plan, with paths resolved against `config_dir`.
    pub fn to_plan(&self, config_dir: &Path) -> CollectionPlan {
        let c = &self.collection;
        CollectionPlan {
            dataset: resolve(config_dir, &c.dataset),
            out_dir: resolve(config_dir, &c.out_dir),
            axes: c.axes.clone(),
            k: c.k,
            m: c.m,
            n: c.n,
            policies: c.policies.iter().map(|k| k.default_policy()).collect(),
            paraphraser_backend: c.paraphraser_backend.clone(),
            target_backend: c.target_backend.clone(),
            ensemble_backends: c.ensemble_backends.clone(),
            include_original: c.include_original,
            collect_answers: c.collect_answers,
            seeds: c.seeds.clone(),
            max_tokens: c.max_tokens,
            concurrency: c.concurrency,
        }
    }

    /// Instantiates every declared backend.
    pub fn build_registry(&self, config_dir: &Path) -> Result<BackendRegistry, ConfigError> {
        let mut registry = BackendRegistry::new();
        for section in &self.backends {
            let backend: Arc<dyn GenerationBackend> = match section {
                BackendSection::Synthetic {
                    id,
                    model_file,
                    record_to,
                } => {
                    let model = SyntheticModel::load(&resolve(config_dir, model_file))?;
                    let inner: Arc<dyn GenerationBackend> =
                        Arc::new(SyntheticBackend::new(id.clone(), Arc::new(model)));
                    wrap_recording(inner, record_to.as_deref(), config_dir)?
                }
                BackendSection::Openai {
                    id,
                    base_url,
                    model,
                    api_key,
                    timeout_secs,
                    in_flight_cap,
                    record_to,
                } => {
                    let mut live = LiveConfig::new(base_url.clone(), model.clone());
                    live.api_key = api_key.clone();
                    if let Some(secs) = timeout_secs {
                        live.timeout = Duration::from_secs(*secs);
                    }
                    if let Some(cap) = in_flight_cap {
                        live.in_flight_cap = *cap;
                    }
                    let inner: Arc<dyn GenerationBackend> =
                        Arc::new(LiveBackend::new(id.clone(), live)?);
                    wrap_recording(inner, record_to.as_deref(), config_dir)?
                }
                BackendSection::Replay { id, store } => {
                    let store = ReplayStore::open(&resolve(config_dir, store))?;
                    Arc::new(ReplayBackend::new(id.clone(), Arc::new(store)))
                }
            };
            registry.insert(backend);
        }
        Ok(registry)
    }

    /// The equivalence judge for scoring, honoring a `--judge` override.
    pub fn build_judge(
        &self,
        kind_override: Option<&str>,
    ) -> Result<Arc<dyn EquivalenceJudge>, ConfigError> {
        let kind = kind_override.unwrap_or(&self.judge.kind);
        match kind {
            "exact" => Ok(Arc::new(ExactJudge)),
            "rouge" => Ok(Arc::new(RougeJudge::new(self.judge.rouge_threshold))),
            "nli" => {
                let endpoint = self
                    .judge
                    .endpoint
                    .clone()
                    .or_else(|| std::env::var(NLI_ENDPOINT_ENV).ok())
                    .ok_or_else(|| {
                        invalid(format!(
                            "nli judge needs an endpoint: set [judge].endpoint or {NLI_ENDPOINT_ENV}"
                        ))
                    })?;
                Ok(Arc::new(NliJudge::new(endpoint, self.judge.gamma)))
            }
            other => Err(invalid(format!(
                "unknown judge kind `{other}` (expected exact, rouge, or nli)"
            ))),
        }
    }

    pub fn eval_config(&self) -> Result<EvalConfig, ConfigError> {
        let normalization = match self.eval.normalization.as_str() {
            "min_max" => NormalizationMethod::MinMax,
            "max_entropy_ratio" => NormalizationMethod::MaxEntropyRatio {
                num_responses: self.collection.n,
            },
            other => {
                return Err(invalid(format!(
                    "unknown normalization `{other}` (expected min_max or max_entropy_ratio)"
                )))
            }
        };
        Ok(EvalConfig {
            normalization,
            ece_bins: self.eval.bins,
            labeling: self.labeling.describe(),
            grid: self.eval.grid,
        })
    }

    /// Which decoding experiment joins the evaluation.
    pub fn eval_policy(&self, flag: Option<PolicyKind>) -> Result<PolicyKind, ConfigError> {
        flag.or(self.eval.policy)
            .or_else(|| self.collection.policies.first().copied())
            .ok_or_else(|| invalid("no decoding policy configured".to_owned()))
    }
}

fn wrap_recording(
    inner: Arc<dyn GenerationBackend>,
    record_to: Option<&str>,
    config_dir: &Path,
) -> Result<Arc<dyn GenerationBackend>, ConfigError> {
    match record_to {
        None => Ok(inner),
        Some(store) => {
            let store = ReplayStore::open(&resolve(config_dir, store))?;
            Ok(Arc::new(RecordingBackend::new(inner, Arc::new(store))))
        }
    }
}

/// Resolves a config-file path: absolute paths pass through, relative ones
/// are taken from the config file's directory.
pub fn resolve(config_dir: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_owned()
    } else {
        config_dir.join(p)
    }
}

fn default_fanout() -> usize {
    5
}
fn default_true() -> bool {
    true
}
fn default_max_tokens() -> u32 {
    256
}
fn default_concurrency() -> usize {
    4
}
fn default_judge_kind() -> String {
    "exact".to_owned()
}
fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}
fn default_rouge_threshold() -> f64 {
    DEFAULT_ROUGE_THRESHOLD
}
fn default_weighting() -> Weighting {
    Weighting::SequenceProb
}
fn default_label_rule() -> String {
    "rouge".to_owned()
}
fn default_variant() -> String {
    "f1".to_owned()
}
fn default_bins() -> usize {
    DEFAULT_ECE_BINS
}
fn default_normalization() -> String {
    "min_max".to_owned()
}
