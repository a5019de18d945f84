//! Orchestration of the three controlled experiments per prompt, with
//! per-bundle checkpointing, resume, and bounded concurrency.
//!
//! Layout under the output directory:
//!
//! ```text
//! paraphrases/{prompt_id}.json          reworded questions, index order
//! answers/{prompt_id}.json              canonical greedy answer (for labeling)
//! bundles/{axis}/{policy}/{prompt_id}.jsonl           complete bundle
//! bundles/{axis}/{policy}/{prompt_id}.partial.jsonl   failed attempt's survivors
//! manifest.json                         completion counts + config echo
//! ```
//!
//! A bundle file is written atomically once all members succeed, so presence
//! of `{prompt_id}.jsonl` is the resume criterion and a crash can never leave
//! a truncated complete file.

mod paraphrase;

pub use paraphrase::{
    generate_paraphrases, parse_paraphrase_map, paraphrase_system_prompt, paraphrase_user_prompt,
};

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, BackendRegistry, GenerationBackend, GenerationRequest};
use crate::jsonl::{read_jsonl, write_json_atomic, write_jsonl_atomic, JsonlError};
use crate::records::{
    load_dataset, Axis, DataError, DecodingPolicy, GenerationRecord, PolicyKind, PromptRecord,
    ResponseBundle,
};

#[derive(Debug, Error)]
pub enum CollectError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Storage(#[from] JsonlError),
    #[error("paraphrase output unparsable after retry: {raw}")]
    ParaphraseUnparsable { raw: String },
    #[error("paraphraser returned {got} usable paraphrases, need {want}")]
    InsufficientParaphrases { got: usize, want: usize },
    #[error("invalid collection plan: {0}")]
    Plan(String),
}

fn default_k() -> usize {
    5
}
fn default_max_tokens() -> u32 {
    64
}
fn default_concurrency() -> usize {
    4
}
fn default_collect_answers() -> bool {
    true
}

/// Everything a collection run needs, fully serializable so the manifest can
/// echo it verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionPlan {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    /// Which experiments to run.
    pub axes: Vec<Axis>,
    /// Paraphrase count per prompt.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Ensemble size; must match `ensemble_backends` when the knowledge axis
    /// is collected.
    #[serde(default = "default_k")]
    pub m: usize,
    /// Samples per decoding policy.
    #[serde(default = "default_k")]
    pub n: usize,
    /// Decoding-axis policy sweep; one bundle per prompt per policy.
    #[serde(default)]
    pub policies: Vec<DecodingPolicy>,
    pub paraphraser_backend: String,
    pub target_backend: String,
    #[serde(default)]
    pub ensemble_backends: Vec<String>,
    /// Prepend the original question to the paraphrase bundle (making it
    /// k+1 strong) instead of using rewordings only.
    #[serde(default)]
    pub include_original: bool,
    /// Also collect one canonical greedy answer per prompt for correctness
    /// labeling.
    #[serde(default = "default_collect_answers")]
    pub collect_answers: bool,
    /// Decoding-axis seeds; defaults to 1..=n.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<i64>>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Worker threads over prompts.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

impl CollectionPlan {
    pub fn validate(&self) -> Result<(), CollectError> {
        let fail = |msg: String| Err(CollectError::Plan(msg));
        if self.axes.is_empty() {
            return fail("no axes selected".into());
        }
        for axis in Axis::ALL {
            if self.axes.iter().filter(|a| **a == axis).count() > 1 {
                return fail(format!("axis {axis} listed more than once"));
            }
        }
        if self.k < 2 || self.m < 2 || self.n < 2 {
            return fail(format!(
                "k, m, n must each be at least 2 (got {}, {}, {})",
                self.k, self.m, self.n
            ));
        }
        if self.axes.contains(&Axis::Input) && self.paraphraser_backend.is_empty() {
            return fail("input axis needs a paraphraser backend".into());
        }
        if self.target_backend.is_empty() {
            return fail("target backend is required".into());
        }
        if self.axes.contains(&Axis::Knowledge) {
            if self.ensemble_backends.len() < 2 {
                return fail("knowledge axis needs at least 2 ensemble backends".into());
            }
            if self.ensemble_backends.len() != self.m {
                return fail(format!(
                    "m = {} but {} ensemble backends listed",
                    self.m,
                    self.ensemble_backends.len()
                ));
            }
            let mut ids = self.ensemble_backends.clone();
            ids.sort();
            ids.dedup();
            if ids.len() != self.ensemble_backends.len() {
                return fail("ensemble backend ids must be distinct".into());
            }
        }
        if self.axes.contains(&Axis::Decoding) {
            if self.policies.is_empty() {
                return fail("decoding axis needs at least one policy".into());
            }
            let mut kinds: Vec<PolicyKind> = self.policies.iter().map(|p| p.kind()).collect();
            kinds.sort();
            kinds.dedup();
            if kinds.len() != self.policies.len() {
                return fail("decoding sweep policies must have distinct kinds".into());
            }
            for policy in &self.policies {
                policy.validate().map_err(CollectError::Data)?;
            }
        }
        if let Some(seeds) = &self.seeds {
            if seeds.len() != self.n {
                return fail(format!("{} seeds listed but n = {}", seeds.len(), self.n));
            }
            let mut sorted = seeds.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != seeds.len() {
                return fail("seeds must be distinct".into());
            }
        }
        if self.concurrency == 0 {
            return fail("concurrency must be at least 1".into());
        }
        Ok(())
    }

    /// The decoding-axis seeds, defaulted to 1..=n.
    pub fn effective_seeds(&self) -> Vec<i64> {
        self.seeds
            .clone()
            .unwrap_or_else(|| (1..=self.n as i64).collect())
    }

    /// Members of an input bundle: k paraphrases, plus the original when
    /// prepended.
    pub fn input_bundle_size(&self) -> usize {
        self.k + usize::from(self.include_original)
    }

    /// Backend calls a fresh, uninterrupted run makes: per prompt, one
    /// paraphraser call plus one target call per input-bundle member on the
    /// input axis, one call per ensemble member on the knowledge axis, n
    /// calls per policy on the decoding axis, and one canonical-answer call
    /// when labeling answers are collected.
    pub fn planned_calls(&self, num_prompts: usize) -> usize {
        let mut per_prompt = 0;
        if self.axes.contains(&Axis::Input) {
            per_prompt += 1 + self.input_bundle_size();
        }
        if self.axes.contains(&Axis::Knowledge) {
            per_prompt += self.m;
        }
        if self.axes.contains(&Axis::Decoding) {
            per_prompt += self.policies.len() * self.n;
        }
        if self.collect_answers {
            per_prompt += 1;
        }
        num_prompts * per_prompt
    }

    /// The (axis, policy-kind) experiments this plan runs, in output order.
    ///
    /// Input and knowledge bundles are always greedy; the decoding axis
    /// contributes one experiment per configured policy.
    pub fn experiments(&self) -> Vec<(Axis, PolicyKind)> {
        let mut list = Vec::new();
        for axis in Axis::ALL {
            if !self.axes.contains(&axis) {
                continue;
            }
            match axis {
                Axis::Input | Axis::Knowledge => list.push((axis, PolicyKind::Greedy)),
                Axis::Decoding => {
                    for policy in &self.policies {
                        list.push((axis, policy.kind()));
                    }
                }
            }
        }
        list
    }
}

/// Completion counts for one (axis, policy) experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisCompletion {
    pub complete: usize,
    pub incomplete: usize,
}

/// Deterministic summary of a collection: no timestamps, no volatile call
/// counts, so an interrupted-and-resumed run's manifest equals an
/// uninterrupted one's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionManifest {
    pub version: String,
    pub prompts: usize,
    /// Keyed `{axis}/{policy}`.
    pub experiments: BTreeMap<String, AxisCompletion>,
    pub answers_complete: usize,
    pub config: CollectionPlan,
}

/// What a run did, beyond what the manifest persists.
#[derive(Debug)]
pub struct CollectionOutcome {
    pub manifest: CollectionManifest,
    pub calls_made: usize,
    pub failures: Vec<PromptFailure>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PromptFailure {
    pub prompt_id: String,
    /// `{axis}/{policy}` or a stage name like `paraphrase`.
    pub stage: String,
    pub reason: String,
}

fn bundle_path(out_dir: &Path, axis: Axis, policy: PolicyKind, prompt_id: &str) -> PathBuf {
    out_dir
        .join("bundles")
        .join(axis.as_str())
        .join(policy.as_str())
        .join(format!("{prompt_id}.jsonl"))
}

fn partial_path(out_dir: &Path, axis: Axis, policy: PolicyKind, prompt_id: &str) -> PathBuf {
    out_dir
        .join("bundles")
        .join(axis.as_str())
        .join(policy.as_str())
        .join(format!("{prompt_id}.partial.jsonl"))
}

/// Where a prompt's cached paraphrase list lives under `out_dir`.
pub fn paraphrase_path(out_dir: &Path, prompt_id: &str) -> PathBuf {
    out_dir.join("paraphrases").join(format!("{prompt_id}.json"))
}

pub fn answer_path(out_dir: &Path, prompt_id: &str) -> PathBuf {
    out_dir.join("answers").join(format!("{prompt_id}.json"))
}

pub fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.json")
}

/// Reads a completed bundle back for scoring.
pub fn load_bundle(
    out_dir: &Path,
    axis: Axis,
    policy: PolicyKind,
    prompt: &PromptRecord,
) -> Result<ResponseBundle, CollectError> {
    let path = bundle_path(out_dir, axis, policy, &prompt.id);
    let records: Vec<GenerationRecord> = read_jsonl(&path)?;
    Ok(ResponseBundle::new(
        prompt.id.clone(),
        axis,
        records,
        prompt.question.clone(),
    )?)
}

struct RunContext<'a> {
    plan: &'a CollectionPlan,
    registry: &'a BackendRegistry,
    calls: AtomicUsize,
}

impl RunContext<'_> {
    fn generate(
        &self,
        backend: &dyn GenerationBackend,
        request: &GenerationRequest,
    ) -> Result<GenerationRecord, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        backend.generate(request)
    }
}

fn stamp(mut record: GenerationRecord, prompt_id: &str, variant_key: String) -> GenerationRecord {
    record.prompt_id = prompt_id.to_owned();
    record.variant_key = variant_key;
    record
}

/// Collects every member of one bundle; on any member failure persists the
/// survivors as a partial file and reports the failure.
fn collect_members(
    ctx: &RunContext<'_>,
    prompt: &PromptRecord,
    axis: Axis,
    policy_kind: PolicyKind,
    members: Vec<(String, GenerationRequest)>,
) -> Result<(), CollectError> {
    let out_dir = &ctx.plan.out_dir;
    let complete = bundle_path(out_dir, axis, policy_kind, &prompt.id);
    if complete.exists() {
        return Ok(());
    }
    let partial = partial_path(out_dir, axis, policy_kind, &prompt.id);

    let mut records = Vec::with_capacity(members.len());
    for (variant_key, request) in members {
        let backend = ctx.registry.get(&request.backend_id)?;
        match ctx.generate(backend.as_ref(), &request) {
            Ok(record) => records.push(stamp(record, &prompt.id, variant_key)),
            Err(err) => {
                if !records.is_empty() {
                    write_jsonl_atomic(&partial, &records)?;
                }
                return Err(err.into());
            }
        }
    }

    // Construction re-checks the axis invariants before anything persists.
    let bundle = ResponseBundle::new(
        prompt.id.clone(),
        axis,
        records,
        prompt.question.clone(),
    )?;
    write_jsonl_atomic(&complete, bundle.records())?;
    let _ = std::fs::remove_file(&partial);
    Ok(())
}

fn input_requests(
    plan: &CollectionPlan,
    prompt: &PromptRecord,
    paraphrases: &[String],
) -> Vec<(String, GenerationRequest)> {
    let mut members = Vec::new();
    let mut texts: Vec<(String, String)> = Vec::new();
    if plan.include_original {
        texts.push(("orig".to_owned(), prompt.question.clone()));
    }
    for (i, paraphrase) in paraphrases.iter().enumerate() {
        texts.push((i.to_string(), paraphrase.clone()));
    }
    for (variant_key, text) in texts {
        members.push((
            variant_key,
            GenerationRequest {
                prompt_text: text,
                system_text: None,
                policy: DecodingPolicy::greedy(),
                max_tokens: plan.max_tokens,
                want_logprobs: true,
                backend_id: plan.target_backend.clone(),
            },
        ));
    }
    members
}

fn knowledge_requests(
    plan: &CollectionPlan,
    prompt: &PromptRecord,
) -> Vec<(String, GenerationRequest)> {
    plan.ensemble_backends
        .iter()
        .map(|member| {
            (
                member.clone(),
                GenerationRequest {
                    prompt_text: prompt.question.clone(),
                    system_text: None,
                    policy: DecodingPolicy::greedy(),
                    max_tokens: plan.max_tokens,
                    want_logprobs: true,
                    backend_id: member.clone(),
                },
            )
        })
        .collect()
}

fn decoding_requests(
    plan: &CollectionPlan,
    prompt: &PromptRecord,
    policy: &DecodingPolicy,
) -> Vec<(String, GenerationRequest)> {
    plan.effective_seeds()
        .iter()
        .enumerate()
        .map(|(i, seed)| {
            (
                i.to_string(),
                GenerationRequest {
                    prompt_text: prompt.question.clone(),
                    system_text: None,
                    policy: policy.with_seed(*seed),
                    max_tokens: plan.max_tokens,
                    want_logprobs: true,
                    backend_id: plan.target_backend.clone(),
                },
            )
        })
        .collect()
}

/// All work for one prompt. Failures are reported per stage; later stages
/// still run.
fn process_prompt(ctx: &RunContext<'_>, prompt: &PromptRecord) -> Vec<PromptFailure> {
    let plan = ctx.plan;
    let mut failures = Vec::new();
    let mut fail = |stage: &str, err: CollectError| {
        failures.push(PromptFailure {
            prompt_id: prompt.id.clone(),
            stage: stage.to_owned(),
            reason: err.to_string(),
        });
    };

    if plan.collect_answers {
        let path = answer_path(&plan.out_dir, &prompt.id);
        if !path.exists() {
            let request = GenerationRequest {
                prompt_text: prompt.question.clone(),
                system_text: None,
                policy: DecodingPolicy::greedy(),
                max_tokens: plan.max_tokens,
                want_logprobs: true,
                backend_id: plan.target_backend.clone(),
            };
            let result = ctx
                .registry
                .get(&plan.target_backend)
                .and_then(|backend| ctx.generate(backend.as_ref(), &request))
                .map_err(CollectError::from)
                .and_then(|record| {
                    let record = stamp(record, &prompt.id, "canonical".into());
                    write_json_atomic(&path, &record).map_err(CollectError::from)
                });
            if let Err(err) = result {
                fail("answers", err);
            }
        }
    }

    if plan.axes.contains(&Axis::Input) {
        let result = (|| -> Result<(), CollectError> {
            let path = paraphrase_path(&plan.out_dir, &prompt.id);
            let paraphrases: Vec<String> = if path.exists() {
                let body = std::fs::read_to_string(&path).map_err(|e| {
                    CollectError::Plan(format!("cannot read {}: {e}", path.display()))
                })?;
                serde_json::from_str(&body).map_err(|e| {
                    CollectError::Plan(format!("cannot parse {}: {e}", path.display()))
                })?
            } else {
                let backend = ctx.registry.get(&plan.paraphraser_backend)?;
                let paraphrases = generate_paraphrases(
                    &prompt.question,
                    plan.k,
                    backend.as_ref(),
                    plan.max_tokens.max(256),
                    || {
                        ctx.calls.fetch_add(1, Ordering::SeqCst);
                    },
                )?;
                write_json_atomic(&path, &paraphrases)?;
                paraphrases
            };
            let members = input_requests(plan, prompt, &paraphrases);
            collect_members(ctx, prompt, Axis::Input, PolicyKind::Greedy, members)
        })();
        if let Err(err) = result {
            fail("input/greedy", err);
        }
    }

    if plan.axes.contains(&Axis::Knowledge) {
        let members = knowledge_requests(plan, prompt);
        if let Err(err) = collect_members(ctx, prompt, Axis::Knowledge, PolicyKind::Greedy, members)
        {
            fail("knowledge/greedy", err);
        }
    }

    if plan.axes.contains(&Axis::Decoding) {
        for policy in &plan.policies {
            let members = decoding_requests(plan, prompt, policy);
            if let Err(err) = collect_members(ctx, prompt, Axis::Decoding, policy.kind(), members)
            {
                fail(&format!("decoding/{}", policy.kind()), err);
            }
        }
    }

    failures
}

/// Runs (or resumes) a collection. Prompts whose bundle files already exist
/// are skipped; the manifest is recomputed from the filesystem at the end, so
/// it reflects actual persisted state.
pub fn run_collection(
    plan: &CollectionPlan,
    registry: &BackendRegistry,
) -> Result<CollectionOutcome, CollectError> {
    plan.validate()?;
    let prompts = load_dataset(&plan.dataset)?;
    std::fs::create_dir_all(&plan.out_dir)
        .map_err(|e| CollectError::Plan(format!("cannot create output directory: {e}")))?;

    let ctx = RunContext {
        plan,
        registry,
        calls: AtomicUsize::new(0),
    };
    let queue: Mutex<VecDeque<&PromptRecord>> = Mutex::new(prompts.iter().collect());
    let failures: Mutex<Vec<PromptFailure>> = Mutex::new(Vec::new());

    let workers = plan.concurrency.min(prompts.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let prompt = queue.lock().expect("work queue").pop_front();
                let Some(prompt) = prompt else { break };
                let prompt_failures = process_prompt(&ctx, prompt);
                if !prompt_failures.is_empty() {
                    failures
                        .lock()
                        .expect("failure list")
                        .extend(prompt_failures);
                }
            });
        }
    });

    let mut experiments_done = BTreeMap::new();
    for (axis, policy) in plan.experiments() {
        let complete = prompts
            .iter()
            .filter(|p| bundle_path(&plan.out_dir, axis, policy, &p.id).exists())
            .count();
        experiments_done.insert(
            format!("{axis}/{policy}"),
            AxisCompletion {
                complete,
                incomplete: prompts.len() - complete,
            },
        );
    }
    let answers_complete = if plan.collect_answers {
        prompts
            .iter()
            .filter(|p| answer_path(&plan.out_dir, &p.id).exists())
            .count()
    } else {
        0
    };

    let manifest = CollectionManifest {
        version: env!("CARGO_PKG_VERSION").to_owned(),
        prompts: prompts.len(),
        experiments: experiments_done,
        answers_complete,
        config: plan.clone(),
    };
    write_json_atomic(&manifest_path(&plan.out_dir), &manifest)?;

    let mut failures = failures.into_inner().expect("failure list");
    failures.sort_by(|a, b| (&a.prompt_id, &a.stage).cmp(&(&b.prompt_id, &b.stage)));
    Ok(CollectionOutcome {
        manifest,
        calls_made: ctx.calls.into_inner(),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{SyntheticBackend, SyntheticModel, SyntheticModelSpec};
    use std::sync::Arc;

    fn write_dataset(dir: &Path, prompts: &[(&str, &str, &str)]) -> PathBuf {
        let path = dir.join("dataset.jsonl");
        let rows: Vec<PromptRecord> = prompts
            .iter()
            .map(|(id, q, a)| PromptRecord {
                id: (*id).into(),
                question: (*q).into(),
                reference_answer: (*a).into(),
                dataset_tag: "test".into(),
                metadata: Default::default(),
            })
            .collect();
        write_jsonl_atomic(&path, &rows).unwrap();
        path
    }

    fn simple_model() -> Arc<SyntheticModel> {
        let mut prompts = BTreeMap::new();
        for q in ["Q alpha", "Q beta", "Q gamma"] {
            prompts.insert(q.to_owned(), SyntheticModelSpec::uniform(&["yes", "no"]));
        }
        Arc::new(SyntheticModel::new(prompts).unwrap())
    }

    fn registry_with(model: &Arc<SyntheticModel>, ids: &[&str]) -> BackendRegistry {
        let mut registry = BackendRegistry::new();
        for id in ids {
            registry.insert(Arc::new(SyntheticBackend::new(*id, Arc::clone(model))));
        }
        registry
    }

    fn plan_for(dataset: PathBuf, out_dir: PathBuf, axes: Vec<Axis>) -> CollectionPlan {
        CollectionPlan {
            dataset,
            out_dir,
            axes,
            k: 3,
            m: 2,
            n: 3,
            policies: vec![DecodingPolicy::temperature(0.7)],
            paraphraser_backend: "para".into(),
            target_backend: "target".into(),
            ensemble_backends: vec!["member-1".into(), "member-2".into()],
            include_original: false,
            collect_answers: true,
            seeds: None,
            max_tokens: 64,
            concurrency: 2,
        }
    }

    #[test]
    fn plan_validation_catches_shape_errors() {
        let base = plan_for("d.jsonl".into(), "out".into(), vec![Axis::Decoding]);
        assert!(base.validate().is_ok());

        let mut p = base.clone();
        p.axes = vec![];
        assert!(p.validate().is_err(), "no axes");

        let mut p = base.clone();
        p.n = 1;
        assert!(p.validate().is_err(), "n < 2");

        let mut p = base.clone();
        p.policies = vec![
            DecodingPolicy::temperature(0.7),
            DecodingPolicy::temperature(0.9),
        ];
        assert!(p.validate().is_err(), "duplicate policy kinds");

        let mut p = base.clone();
        p.axes = vec![Axis::Knowledge];
        p.ensemble_backends = vec!["only-one".into()];
        assert!(p.validate().is_err(), "knowledge needs >= 2 members");

        let mut p = base.clone();
        p.seeds = Some(vec![1, 1, 2]);
        assert!(p.validate().is_err(), "repeated seeds");

        let mut p = base;
        p.seeds = Some(vec![1, 2]);
        assert!(p.validate().is_err(), "seed count must equal n");
    }

    #[test]
    fn full_run_collects_every_axis_and_counts_calls() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = write_dataset(
            dir.path(),
            &[("p1", "Q alpha", "yes"), ("p2", "Q beta", "no")],
        );
        let model = simple_model();
        let registry = registry_with(&model, &["para", "target", "member-1", "member-2"]);
        let plan = plan_for(dataset, dir.path().join("out"), Axis::ALL.to_vec());

        let outcome = run_collection(&plan, &registry).unwrap();
        assert!(outcome.failures.is_empty(), "{:?}", outcome.failures);
        assert_eq!(outcome.calls_made, plan.planned_calls(2));
        assert_eq!(outcome.manifest.prompts, 2);
        for (key, completion) in &outcome.manifest.experiments {
            assert_eq!(completion.complete, 2, "experiment {key}");
            assert_eq!(completion.incomplete, 0, "experiment {key}");
        }
        assert_eq!(outcome.manifest.answers_complete, 2);
        assert_eq!(
            outcome.manifest.experiments.keys().collect::<Vec<_>>(),
            vec!["decoding/temperature", "input/greedy", "knowledge/greedy"]
        );

        // Bundles load back as valid per-axis bundles.
        let prompts = load_dataset(&plan.dataset).unwrap();
        for prompt in &prompts {
            let input =
                load_bundle(&plan.out_dir, Axis::Input, PolicyKind::Greedy, prompt).unwrap();
            assert_eq!(input.len(), 3);
            let knowledge =
                load_bundle(&plan.out_dir, Axis::Knowledge, PolicyKind::Greedy, prompt).unwrap();
            assert_eq!(knowledge.len(), 2);
            let decoding =
                load_bundle(&plan.out_dir, Axis::Decoding, PolicyKind::Temperature, prompt)
                    .unwrap();
            assert_eq!(decoding.len(), 3);
        }
    }

    #[test]
    fn rerun_after_completion_makes_zero_calls() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = write_dataset(dir.path(), &[("p1", "Q alpha", "yes")]);
        let model = simple_model();
        let registry = registry_with(&model, &["para", "target", "member-1", "member-2"]);
        let plan = plan_for(dataset, dir.path().join("out"), Axis::ALL.to_vec());

        let first = run_collection(&plan, &registry).unwrap();
        assert!(first.calls_made > 0);
        let second = run_collection(&plan, &registry).unwrap();
        assert_eq!(second.calls_made, 0, "completed run must be idempotent");
        assert_eq!(first.manifest, second.manifest);
    }

    #[test]
    fn decoding_only_plan_never_calls_the_paraphraser() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = write_dataset(dir.path(), &[("p1", "Q alpha", "yes")]);
        let model = simple_model();
        // No paraphraser registered: any paraphrase call would error loudly.
        let registry = registry_with(&model, &["target"]);
        let mut plan = plan_for(dataset, dir.path().join("out"), vec![Axis::Decoding]);
        plan.collect_answers = false;

        let outcome = run_collection(&plan, &registry).unwrap();
        assert!(outcome.failures.is_empty(), "{:?}", outcome.failures);
        assert_eq!(outcome.calls_made, plan.n);
    }

    #[test]
    fn include_original_prepends_and_is_counted() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = write_dataset(dir.path(), &[("p1", "Q alpha", "yes")]);
        let model = simple_model();
        let registry = registry_with(&model, &["para", "target"]);
        let mut plan = plan_for(dataset, dir.path().join("out"), vec![Axis::Input]);
        plan.include_original = true;
        plan.collect_answers = false;

        let outcome = run_collection(&plan, &registry).unwrap();
        assert!(outcome.failures.is_empty(), "{:?}", outcome.failures);
        assert_eq!(outcome.calls_made, plan.planned_calls(1));
        assert_eq!(outcome.calls_made, 1 + 4, "paraphrase + (1 orig + 3 rewords)");

        let prompts = load_dataset(&plan.dataset).unwrap();
        let bundle =
            load_bundle(&plan.out_dir, Axis::Input, PolicyKind::Greedy, &prompts[0]).unwrap();
        assert_eq!(bundle.len(), 4);
        assert_eq!(bundle.records()[0].variant_key, "orig");
        assert_eq!(bundle.records()[0].text, "yes");
    }

    #[test]
    fn member_failure_leaves_partial_not_complete() {
        use crate::backends::{BackendError, GenerationBackend, GenerationRequest};

        // Fails every call for one specific paraphrase variant.
        struct FailOn {
            inner: SyntheticBackend,
            needle: &'static str,
        }
        impl GenerationBackend for FailOn {
            fn id(&self) -> &str {
                self.inner.id()
            }
            fn generate(
                &self,
                request: &GenerationRequest,
            ) -> Result<GenerationRecord, BackendError> {
                if request.prompt_text.contains(self.needle) {
                    return Err(BackendError::Transport("injected outage".into()));
                }
                self.inner.generate(request)
            }
        }

        let dir = tempfile::tempdir().unwrap();
        let dataset = write_dataset(dir.path(), &[("p1", "Q alpha", "yes")]);
        let model = simple_model();
        let mut registry = BackendRegistry::new();
        registry.insert(Arc::new(SyntheticBackend::new("para", Arc::clone(&model))));
        registry.insert(Arc::new(FailOn {
            inner: SyntheticBackend::new("target", Arc::clone(&model)),
            needle: "(variant 2)",
        }));
        let mut plan = plan_for(dataset, dir.path().join("out"), vec![Axis::Input]);
        plan.collect_answers = false;

        let outcome = run_collection(&plan, &registry).unwrap();
        assert_eq!(outcome.failures.len(), 1);
        assert_eq!(outcome.failures[0].stage, "input/greedy");
        let exp = &outcome.manifest.experiments["input/greedy"];
        assert_eq!(exp.complete, 0);
        assert_eq!(exp.incomplete, 1);
        assert!(
            partial_path(&plan.out_dir, Axis::Input, PolicyKind::Greedy, "p1").exists(),
            "survivors persisted as partial"
        );
        assert!(!bundle_path(&plan.out_dir, Axis::Input, PolicyKind::Greedy, "p1").exists());

        // Resume with a healthy target completes and clears the partial.
        let registry = registry_with(&model, &["para", "target"]);
        let outcome = run_collection(&plan, &registry).unwrap();
        assert!(outcome.failures.is_empty());
        assert!(!partial_path(&plan.out_dir, Axis::Input, PolicyKind::Greedy, "p1").exists());
        assert_eq!(outcome.manifest.experiments["input/greedy"].complete, 1);
        assert_eq!(
            outcome.calls_made, 3,
            "paraphrases were checkpointed; only the 3 member calls remain"
        );
    }

    #[test]
    fn planned_calls_formula() {
        let mut plan = plan_for("d.jsonl".into(), "out".into(), Axis::ALL.to_vec());
        plan.policies = vec![
            DecodingPolicy::temperature(0.7),
            DecodingPolicy::top_p(0.9),
        ];
        // per prompt: paraphrase 1 + input 3 + knowledge 2 + decoding 2*3 + answer 1 = 13
        assert_eq!(plan.planned_calls(10), 130);
        plan.collect_answers = false;
        assert_eq!(plan.planned_calls(10), 120);
        plan.axes = vec![Axis::Decoding];
        assert_eq!(plan.planned_calls(10), 60);
    }
}
