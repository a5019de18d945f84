//! Command-line front end over the core library: validate a dataset, collect
//! response bundles, score semantic entropy per axis, and evaluate how well
//! each axis predicts failures.
//!
//! Logs go to stderr (RUST_LOG controls verbosity); machine-readable results
//! go to stdout and to files under the run's output directory. Exit codes:
//! 0 success, 1 usage or configuration error, 2 partial results, 3 backend
//! unreachable.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tracing::{error, info, warn};
use tracing_subscriber::EnvFilter;

use config::{resolve, ConfigError, RunConfig};
use uqd_core::collect::{
    answer_path, generate_paraphrases, load_bundle, paraphrase_path, run_collection, CollectError,
    CollectionPlan,
};
use uqd_core::entropy::{
    score_decoding, score_input, score_knowledge, EntropyError, UncertaintyScore,
};
use uqd_core::equivalence::{ClusterError, JudgeError};
use uqd_core::eval::{
    evaluate_outcomes, label_nli, label_rouge, quantile_grid, write_grid_csv, write_report_csv,
    EvalError, EvalOutcome, EvalReport, GRID_QUANTILES,
};
use uqd_core::jsonl::{read_jsonl, write_json_atomic, write_jsonl_atomic};
use uqd_core::records::{
    load_dataset, validate_dataset, Axis, GenerationRecord, PolicyKind, PromptRecord,
};

/// Decompose a model's predictive uncertainty along input, knowledge, and
/// decoding axes, and test each axis as a failure predictor.
#[derive(Parser)]
#[command(name = "uqd", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset file and report malformed lines.
    Validate(ValidateArgs),
    /// Generate and cache paraphrases for every prompt.
    Paraphrase(ParaphraseArgs),
    /// Collect response bundles for the configured axes.
    Collect(CollectArgs),
    /// Score collected bundles: semantic entropy per axis and policy.
    Score(ScoreArgs),
    /// Label answers, join scores, and compute AUROC and ECE per axis.
    Eval(EvalArgs),
    /// Recompute the input-by-decoding quantile grid from eval outcomes.
    Grid(OutputArgs),
    /// Bundle the config echo, metrics, and grid into report files.
    Report(OutputArgs),
}

#[derive(Args)]
struct ValidateArgs {
    /// Dataset to check; defaults to the configured one.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ParaphraseArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long)]
    config: PathBuf,
    /// Collect one axis: input, knowledge, decoding, or all (the default).
    #[arg(long)]
    axis: Option<String>,
    /// Collect a single decoding policy from the sweep.
    #[arg(long)]
    policy: Option<PolicyKind>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override worker-thread count.
    #[arg(long)]
    concurrency: Option<usize>,
    /// Print planned backend calls and exit without generating anything.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    config: PathBuf,
    /// Score one axis: input, knowledge, decoding, or all (the default).
    #[arg(long)]
    axis: Option<String>,
    /// Score a single decoding policy from the sweep.
    #[arg(long)]
    policy: Option<PolicyKind>,
    /// Equivalence judge override: exact, rouge, or nli.
    #[arg(long)]
    judge: Option<String>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    /// Decoding policy whose scores join the evaluation.
    #[arg(long)]
    policy: Option<PolicyKind>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OutputArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes the process exit code distinguishes.
enum CliError {
    /// Bad flags, bad config, bad data: nothing was attempted. Exit 1.
    Usage(String),
    /// Some results exist but the run is incomplete. Exit 2.
    Partial(String),
    /// A backend or judge endpoint is unreachable. Exit 3.
    Backend(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Partial(_) => 2,
            CliError::Backend(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Partial(m) | CliError::Backend(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(err: ConfigError) -> Self {
        CliError::Usage(err.to_string())
    }
}

fn usage(err: impl std::fmt::Display) -> CliError {
    CliError::Usage(err.to_string())
}

/// `--axis` accepts the three axis names plus `all`, which lifts the
/// restriction.
fn parse_axis(flag: Option<&str>) -> Result<Option<Axis>, CliError> {
    match flag {
        None | Some("all") => Ok(None),
        Some(name) => name.parse::<Axis>().map(Some).map_err(usage),
    }
}

fn map_collect_err(err: CollectError) -> CliError {
    match err {
        CollectError::Backend(e) => CliError::Backend(e.to_string()),
        other => CliError::Usage(other.to_string()),
    }
}

/// A judge transport failure means the endpoint is down, not that one prompt
/// is bad; scoring aborts instead of burning through the whole dataset.
fn is_judge_transport(err: &EntropyError) -> bool {
    matches!(
        err,
        EntropyError::Cluster(ClusterError::Judge(JudgeError::Transport(_)))
    )
}

fn main() -> ExitCode {
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            error!("{}", err.message());
            ExitCode::from(err.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Validate(args) => cmd_validate(args),
        Command::Paraphrase(args) => cmd_paraphrase(args),
        Command::Collect(args) => cmd_collect(args),
        Command::Score(args) => cmd_score(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Grid(args) => cmd_grid(args),
        Command::Report(args) => cmd_report(args),
    }
}

/// Loads the config and builds the plan with the shared flag overrides
/// applied.
fn load_plan(
    config_path: &Path,
    out: Option<&Path>,
    axis: Option<Axis>,
    policy: Option<PolicyKind>,
    concurrency: Option<usize>,
) -> Result<(RunConfig, PathBuf, CollectionPlan), CliError> {
    let (config, dir) = RunConfig::load(config_path)?;
    let mut plan = config.to_plan(&dir);
    if let Some(out) = out {
        plan.out_dir = out.to_owned();
    }
    if let Some(axis) = axis {
        if !plan.axes.contains(&axis) {
            return Err(CliError::Usage(format!(
                "axis `{axis}` is not in the configured set"
            )));
        }
        plan.axes.retain(|a| *a == axis);
    }
    if let Some(kind) = policy {
        let hit: Vec<_> = plan
            .policies
            .iter()
            .filter(|p| p.kind() == kind)
            .cloned()
            .collect();
        if hit.is_empty() {
            return Err(CliError::Usage(format!(
                "policy `{kind}` is not in the configured sweep"
            )));
        }
        plan.policies = hit;
    }
    if let Some(n) = concurrency {
        plan.concurrency = n;
    }
    Ok((config, dir, plan))
}

fn print_json<T: Serialize>(value: &T) {
    let body = serde_json::to_string_pretty(value).expect("reports serialize infallibly");
    println!("{body}");
}

fn cmd_validate(args: ValidateArgs) -> Result<(), CliError> {
    let path = match (&args.dataset, &args.config) {
        (Some(p), _) => p.clone(),
        (None, Some(c)) => {
            let (config, dir) = RunConfig::load(c)?;
            resolve(&dir, &config.collection.dataset)
        }
        (None, None) => {
            return Err(CliError::Usage(
                "pass --dataset or --config to locate the dataset".to_owned(),
            ))
        }
    };
    let report = validate_dataset(&path).map_err(usage)?;
    print_json(&report);
    if report.is_clean() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{} of {} lines invalid",
            report.invalid, report.total
        )))
    }
}

#[derive(Serialize)]
struct ParaphraseSummary {
    prompts: usize,
    fresh: usize,
    cached: usize,
    failed: usize,
}

fn cmd_paraphrase(args: ParaphraseArgs) -> Result<(), CliError> {
    let (config, dir, plan) = load_plan(&args.config, args.out.as_deref(), None, None, None)?;
    if !plan.axes.contains(&Axis::Input) {
        return Err(CliError::Usage(
            "input axis not configured; nothing to paraphrase".to_owned(),
        ));
    }
    plan.validate().map_err(map_collect_err)?;
    let registry = config.build_registry(&dir)?;
    let backend = registry
        .get(&plan.paraphraser_backend)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let prompts = load_dataset(&plan.dataset).map_err(usage)?;

    let mut summary = ParaphraseSummary {
        prompts: prompts.len(),
        fresh: 0,
        cached: 0,
        failed: 0,
    };
    for prompt in &prompts {
        let path = paraphrase_path(&plan.out_dir, &prompt.id);
        if path.exists() {
            summary.cached += 1;
            continue;
        }
        // Same truncation margin the collector uses, so a recording made
        // here replays there.
        match generate_paraphrases(
            &prompt.question,
            plan.k,
            backend.as_ref(),
            plan.max_tokens.max(256),
            || {},
        ) {
            Ok(paraphrases) => {
                write_json_atomic(&path, &paraphrases).map_err(usage)?;
                summary.fresh += 1;
            }
            Err(err) => {
                warn!(prompt = %prompt.id, "paraphrase failed: {err}");
                summary.failed += 1;
            }
        }
    }
    print_json(&summary);
    if summary.failed == 0 {
        Ok(())
    } else if summary.fresh == 0 && summary.cached == 0 {
        Err(CliError::Backend(format!(
            "all {} paraphrase attempts failed",
            summary.failed
        )))
    } else {
        Err(CliError::Partial(format!(
            "{} of {} prompts failed; rerun to retry",
            summary.failed, summary.prompts
        )))
    }
}

fn cmd_collect(args: CollectArgs) -> Result<(), CliError> {
    let (config, dir, plan) = load_plan(
        &args.config,
        args.out.as_deref(),
        parse_axis(args.axis.as_deref())?,
        args.policy,
        args.concurrency,
    )?;
    plan.validate().map_err(map_collect_err)?;
    let prompts = load_dataset(&plan.dataset).map_err(usage)?;

    if args.dry_run {
        #[derive(Serialize)]
        struct DryRun {
            prompts: usize,
            experiments: Vec<String>,
            planned_calls: usize,
        }
        let experiments = plan
            .experiments()
            .iter()
            .map(|(axis, kind)| format!("{axis}/{kind}"))
            .collect();
        print_json(&DryRun {
            prompts: prompts.len(),
            experiments,
            planned_calls: plan.planned_calls(prompts.len()),
        });
        return Ok(());
    }

    let registry = config.build_registry(&dir)?;
    info!(
        prompts = prompts.len(),
        planned = plan.planned_calls(prompts.len()),
        out = %plan.out_dir.display(),
        "collecting"
    );
    let outcome = run_collection(&plan, &registry).map_err(map_collect_err)?;
    for failure in &outcome.failures {
        warn!(prompt = %failure.prompt_id, stage = %failure.stage, "{}", failure.reason);
    }
    info!(calls = outcome.calls_made, "collection finished");
    print_json(&outcome.manifest);

    if outcome.failures.is_empty() {
        return Ok(());
    }
    let completed: usize = outcome
        .manifest
        .experiments
        .values()
        .map(|c| c.complete)
        .sum();
    if completed == 0 && outcome.manifest.answers_complete == 0 {
        Err(CliError::Backend(
            "every prompt failed; is the backend reachable?".to_owned(),
        ))
    } else {
        Err(CliError::Partial(format!(
            "{} stage failures; rerun collect to resume",
            outcome.failures.len()
        )))
    }
}

fn scores_path(out_dir: &Path, axis: Axis, kind: PolicyKind) -> PathBuf {
    out_dir
        .join("scores")
        .join(axis.as_str())
        .join(format!("{}.jsonl", kind.as_str()))
}

#[derive(Serialize)]
struct ScoreSummary {
    experiments: Vec<ScoredExperiment>,
    unscored: usize,
}

#[derive(Serialize)]
struct ScoredExperiment {
    axis: Axis,
    policy: PolicyKind,
    scored: usize,
    missing: usize,
    file: String,
}

fn cmd_score(args: ScoreArgs) -> Result<(), CliError> {
    let (config, _dir, plan) = load_plan(
        &args.config,
        args.out.as_deref(),
        parse_axis(args.axis.as_deref())?,
        args.policy,
        None,
    )?;
    let judge = config.build_judge(args.judge.as_deref())?;
    let weighting = config.judge.weighting;
    let prompts = load_dataset(&plan.dataset).map_err(usage)?;

    let mut summary = ScoreSummary {
        experiments: Vec::new(),
        unscored: 0,
    };
    for (axis, kind) in plan.experiments() {
        let mut rows: Vec<UncertaintyScore> = Vec::new();
        let mut missing = 0usize;
        for prompt in &prompts {
            let bundle = match load_bundle(&plan.out_dir, axis, kind, prompt) {
                Ok(bundle) => bundle,
                Err(err) => {
                    warn!(prompt = %prompt.id, axis = %axis, policy = %kind, "no bundle: {err}");
                    missing += 1;
                    continue;
                }
            };
            let scored = match axis {
                Axis::Input => score_input(&bundle, judge.as_ref(), weighting),
                Axis::Knowledge => score_knowledge(&bundle, judge.as_ref(), weighting),
                Axis::Decoding => score_decoding(&bundle, judge.as_ref(), weighting),
            };
            match scored {
                Ok(score) => rows.push(score),
                Err(err) if is_judge_transport(&err) => {
                    return Err(CliError::Backend(err.to_string()))
                }
                Err(err) => {
                    warn!(prompt = %prompt.id, axis = %axis, "scoring failed: {err}");
                    missing += 1;
                }
            }
        }
        rows.sort_by(|a, b| a.prompt_id.cmp(&b.prompt_id));
        let path = scores_path(&plan.out_dir, axis, kind);
        write_jsonl_atomic(&path, &rows).map_err(usage)?;
        summary.unscored += missing;
        summary.experiments.push(ScoredExperiment {
            axis,
            policy: kind,
            scored: rows.len(),
            missing,
            file: path.display().to_string(),
        });
    }
    print_json(&summary);
    if summary.unscored == 0 {
        Ok(())
    } else {
        Err(CliError::Partial(format!(
            "{} prompt-experiments lacked a scorable bundle; run collect first",
            summary.unscored
        )))
    }
}

fn eval_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("eval")
}

fn outcomes_path(out_dir: &Path) -> PathBuf {
    eval_dir(out_dir).join("outcomes.jsonl")
}

/// Builds labeled outcomes by joining canonical answers with score files.
fn build_outcomes(
    config: &RunConfig,
    plan: &CollectionPlan,
    prompts: &[PromptRecord],
    eval_policy: PolicyKind,
) -> Result<(Vec<EvalOutcome>, usize), CliError> {
    let mut axis_scores: BTreeMap<Axis, BTreeMap<String, f64>> = BTreeMap::new();
    for (axis, kind) in plan.experiments() {
        if axis == Axis::Decoding && kind != eval_policy {
            continue;
        }
        let path = scores_path(&plan.out_dir, axis, kind);
        let rows: Vec<UncertaintyScore> = match read_jsonl(&path) {
            Ok(rows) => rows,
            Err(err) => {
                warn!(axis = %axis, policy = %kind, "no scores: {err}");
                continue;
            }
        };
        let entry = axis_scores.entry(axis).or_default();
        for row in rows {
            entry.insert(row.prompt_id.clone(), row.value);
        }
    }

    let labeling = &config.labeling;
    let rouge_variant = labeling.rouge_variant()?;
    let nli_judge = if labeling.rule == "nli" {
        Some(config.build_judge(Some("nli"))?)
    } else {
        None
    };

    let mut outcomes = Vec::new();
    let mut unlabeled = 0usize;
    for prompt in prompts {
        let path = answer_path(&plan.out_dir, &prompt.id);
        let body = match std::fs::read_to_string(&path) {
            Ok(body) => body,
            Err(err) => {
                warn!(prompt = %prompt.id, "no canonical answer: {err}");
                unlabeled += 1;
                continue;
            }
        };
        let answer: GenerationRecord = match serde_json::from_str(&body) {
            Ok(answer) => answer,
            Err(err) => {
                warn!(prompt = %prompt.id, "unreadable answer file: {err}");
                unlabeled += 1;
                continue;
            }
        };
        let correct = match &nli_judge {
            None => label_rouge(
                &answer.text,
                &prompt.reference_answer,
                labeling.threshold,
                rouge_variant,
            ),
            Some(judge) => label_nli(
                &answer.text,
                &prompt.reference_answer,
                judge.as_ref(),
                &prompt.question,
            )
            .map_err(|err| match err {
                EvalError::Judge(JudgeError::Transport(e)) => CliError::Backend(e),
                other => CliError::Usage(other.to_string()),
            })?,
        };
        let mut scores = BTreeMap::new();
        for (axis, map) in &axis_scores {
            if let Some(value) = map.get(&prompt.id) {
                scores.insert(*axis, *value);
            }
        }
        outcomes.push(EvalOutcome::new(
            prompt.id.clone(),
            prompt.dataset_tag.clone(),
            answer.text,
            correct,
            scores,
        ));
    }
    outcomes.sort_by(|a, b| a.prompt_id.cmp(&b.prompt_id));
    Ok((outcomes, unlabeled))
}

/// Writes report.json/report.csv (and grid.csv when present) under `dir`.
fn write_report_files(dir: &Path, report: &EvalReport) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(usage)?;
    write_json_atomic(&dir.join("report.json"), report).map_err(usage)?;
    write_report_csv(&dir.join("report.csv"), report).map_err(usage)?;
    if let Some(grid) = &report.grid {
        write_grid_csv(&dir.join("grid.csv"), grid).map_err(usage)?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (config, _dir, plan) = load_plan(&args.config, args.out.as_deref(), None, None, None)?;
    let prompts = load_dataset(&plan.dataset).map_err(usage)?;
    let eval_policy = if plan.axes.contains(&Axis::Decoding) {
        config.eval_policy(args.policy)?
    } else {
        PolicyKind::Greedy
    };

    let (outcomes, unlabeled) = build_outcomes(&config, &plan, &prompts, eval_policy)?;
    if outcomes.is_empty() {
        return Err(CliError::Usage(
            "no labeled outcomes; run collect and score first".to_owned(),
        ));
    }

    let eval_config = config.eval_config()?;
    let report = evaluate_outcomes(&outcomes, &eval_config).map_err(usage)?;
    for warning in &report.warnings {
        warn!("{warning}");
    }

    write_jsonl_atomic(&outcomes_path(&plan.out_dir), &outcomes).map_err(usage)?;
    write_report_files(&eval_dir(&plan.out_dir), &report)?;
    print_json(&report);

    if unlabeled > 0 {
        Err(CliError::Partial(format!(
            "{unlabeled} prompts had no canonical answer; metrics cover the rest"
        )))
    } else if report.has_undefined_auroc() {
        Err(CliError::Partial(
            "AUROC undefined: some dataset produced only one label class; \
             collect failing and succeeding prompts or adjust the labeling rule"
                .to_owned(),
        ))
    } else {
        Ok(())
    }
}

fn load_outcomes(plan: &CollectionPlan) -> Result<Vec<EvalOutcome>, CliError> {
    let path = outcomes_path(&plan.out_dir);
    read_jsonl(&path).map_err(|err| {
        CliError::Usage(format!(
            "cannot read {}: {err}; run eval first",
            path.display()
        ))
    })
}

fn cmd_grid(args: OutputArgs) -> Result<(), CliError> {
    let (_config, _dir, plan) = load_plan(&args.config, args.out.as_deref(), None, None, None)?;
    let outcomes = load_outcomes(&plan)?;
    let both_axes: Vec<EvalOutcome> = outcomes
        .into_iter()
        .filter(|o| {
            o.scores.contains_key(&Axis::Input) && o.scores.contains_key(&Axis::Decoding)
        })
        .collect();
    if both_axes.is_empty() {
        return Err(CliError::Usage(
            "no outcomes carry both input and decoding scores; collect both axes first"
                .to_owned(),
        ));
    }
    let grid = match quantile_grid(&both_axes, GRID_QUANTILES) {
        Ok(grid) => grid,
        Err(err @ EvalError::DegenerateQuantiles { .. }) => {
            return Err(CliError::Partial(err.to_string()))
        }
        Err(err) => return Err(usage(err)),
    };
    write_grid_csv(&eval_dir(&plan.out_dir).join("grid.csv"), &grid).map_err(usage)?;
    print_json(&grid);
    Ok(())
}

/// The full run artifact: the configuration exactly as written, plus the
/// evaluation it produced.
#[derive(Serialize)]
struct ReportDocument<'a> {
    config: &'a RunConfig,
    report: &'a EvalReport,
}

fn cmd_report(args: OutputArgs) -> Result<(), CliError> {
    let (config, _dir, plan) = load_plan(&args.config, args.out.as_deref(), None, None, None)?;
    let outcomes = load_outcomes(&plan)?;
    if outcomes.is_empty() {
        return Err(CliError::Usage(
            "eval outcomes are empty; run eval first".to_owned(),
        ));
    }
    let eval_config = config.eval_config()?;
    let report = evaluate_outcomes(&outcomes, &eval_config).map_err(usage)?;
    for warning in &report.warnings {
        warn!("{warning}");
    }

    let document = ReportDocument {
        config: &config,
        report: &report,
    };
    write_json_atomic(&plan.out_dir.join("report.json"), &document).map_err(usage)?;
    write_report_csv(&plan.out_dir.join("report.csv"), &report).map_err(usage)?;
    if let Some(grid) = &report.grid {
        write_grid_csv(&plan.out_dir.join("grid.csv"), grid).map_err(usage)?;
    }
    print_json(&document);
    Ok(())
}
