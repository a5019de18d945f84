//! Correctness labeling, failure-prediction metrics, and the joint
//! quantile-grid analysis.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equivalence::{EquivalenceJudge, JudgeError};
use crate::records::Axis;
use crate::textmetrics::{rouge_l, RougeVariant};

pub const DEFAULT_ROUGE_THRESHOLD: f64 = 0.3;
pub const DEFAULT_ECE_BINS: usize = 10;
pub const GRID_QUANTILES: usize = 3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores and labels have different lengths ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no examples to evaluate")]
    Empty,
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
    #[error("confidence {0} is outside [0,1]")]
    ConfidenceOutOfRange(f64),
    #[error(
        "AUROC is undefined: {positives} failures and {negatives} successes; \
         both classes are required"
    )]
    DegenerateLabels { positives: usize, negatives: usize },
    #[error("{axis} scores have fewer than {need} distinct values; quantiles are degenerate")]
    DegenerateQuantiles { axis: Axis, need: usize },
    #[error("outcome for `{prompt_id}` is missing a {axis} score required by the grid")]
    MissingAxisScore { prompt_id: String, axis: Axis },
    #[error("answers and scores share no prompt ids; nothing to evaluate")]
    EmptyJoin,
    #[error(transparent)]
    Judge(#[from] JudgeError),
}

/// Correctness by lexical overlap: Rouge-L against the reference at or above
/// the threshold (inclusive).
pub fn label_rouge(answer: &str, reference: &str, threshold: f64, variant: RougeVariant) -> bool {
    rouge_l(answer, reference, variant) >= threshold
}

/// Correctness by bidirectional entailment between answer and reference,
/// using the judge's own threshold.
pub fn label_nli(
    answer: &str,
    reference: &str,
    judge: &dyn EquivalenceJudge,
    question: &str,
) -> Result<bool, EvalError> {
    Ok(judge.judge_pair(answer, reference, question)?.equivalent)
}

/// Probability that a uniformly random failure outranks a uniformly random
/// success, ties counting half. Computed from midranks, which is equivalent
/// to exhaustive pair enumeration but O(n log n).
pub fn auroc(scores: &[f64], failures: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != failures.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: failures.len(),
        });
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(*bad));
    }
    let positives = failures.iter().filter(|f| **f).count();
    let negatives = failures.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::DegenerateLabels {
            positives,
            negatives,
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their average.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        i = j + 1;
    }

    let positive_rank_sum: f64 = ranks
        .iter()
        .zip(failures)
        .filter(|(_, f)| **f)
        .map(|(r, _)| r)
        .sum();
    let u = positive_rank_sum - (positives * (positives + 1)) as f64 / 2.0;
    Ok(u / (positives as f64 * negatives as f64))
}

/// How raw uncertainty scores become failure confidences in [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum NormalizationMethod {
    /// Affine map of the observed range to [0,1]; a constant list maps to
    /// all 0.5. Comparable only within one evaluated set.
    MinMax,
    /// Divide by the entropy ceiling ln(num_responses); comparable across
    /// datasets collected with the same bundle size.
    MaxEntropyRatio { num_responses: usize },
}

/// Order-preserving map of scores to [0,1] confidences.
pub fn normalize_confidence(scores: &[f64], method: NormalizationMethod) -> Vec<f64> {
    match method {
        NormalizationMethod::MinMax => {
            let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if scores.is_empty() || min == max {
                return vec![0.5; scores.len()];
            }
            scores.iter().map(|s| (s - min) / (max - min)).collect()
        }
        NormalizationMethod::MaxEntropyRatio { num_responses } => {
            let ceiling = (num_responses.max(2) as f64).ln();
            scores
                .iter()
                .map(|s| (s / ceiling).clamp(0.0, 1.0))
                .collect()
        }
    }
}

/// Expected calibration error over equal-width bins: the bin-size-weighted
/// mean gap between predicted failure confidence and empirical failure rate.
/// Internal bins are right-exclusive; the top bin includes 1.0.
pub fn ece(confidences: &[f64], failures: &[bool], bins: usize) -> Result<f64, EvalError> {
    if confidences.len() != failures.len() {
        return Err(EvalError::LengthMismatch {
            scores: confidences.len(),
            labels: failures.len(),
        });
    }
    if confidences.is_empty() {
        return Err(EvalError::Empty);
    }
    let bins = bins.max(1);
    if let Some(bad) = confidences
        .iter()
        .find(|c| !c.is_finite() || **c < 0.0 || **c > 1.0)
    {
        return Err(EvalError::ConfidenceOutOfRange(*bad));
    }

    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    let mut fail_count = vec![0usize; bins];
    for (&c, &f) in confidences.iter().zip(failures) {
        let b = ((c * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        fail_count[b] += usize::from(f);
    }

    let n = confidences.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let avg_conf = conf_sum[b] / count[b] as f64;
        let fail_rate = fail_count[b] as f64 / count[b] as f64;
        total += (count[b] as f64 / n) * (fail_rate - avg_conf).abs();
    }
    Ok(total)
}

/// One prompt's labeled result with its per-axis uncertainty values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub prompt_id: String,
    pub dataset_tag: String,
    /// The canonical greedy answer the label was computed from.
    pub answer_text: String,
    pub correct: bool,
    /// Always the exact complement of `correct`.
    pub failure: bool,
    pub scores: BTreeMap<Axis, f64>,
}

impl EvalOutcome {
    pub fn new(
        prompt_id: impl Into<String>,
        dataset_tag: impl Into<String>,
        answer_text: impl Into<String>,
        correct: bool,
        scores: BTreeMap<Axis, f64>,
    ) -> Self {
        EvalOutcome {
            prompt_id: prompt_id.into(),
            dataset_tag: dataset_tag.into(),
            answer_text: answer_text.into(),
            correct,
            failure: !correct,
            scores,
        }
    }
}

/// One cell of the input-by-decoding uncertainty grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub input_quantile: usize,
    pub dec_quantile: usize,
    pub count: usize,
    pub failure_rate: f64,
    pub ece: f64,
}

/// Rank-based quantile index (0..q) per value: stable under permutation of
/// equal values and invariant under strictly monotone score transforms.
fn quantile_assignment(values: &[f64], q: usize, axis: Axis) -> Result<Vec<usize>, EvalError> {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    distinct.dedup();
    if distinct.len() < q {
        return Err(EvalError::DegenerateQuantiles { axis, need: q });
    }

    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable tie handling: equal scores keep their original relative order.
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut assignment = vec![0usize; n];
    for (rank, &idx) in order.iter().enumerate() {
        assignment[idx] = (rank * q / n).min(q - 1);
    }
    Ok(assignment)
}

/// Partitions outcomes into a q-by-q grid of input-uncertainty by
/// decoding-uncertainty quantiles with per-cell failure rate and calibration
/// error. Every outcome must carry both axis scores.
pub fn quantile_grid(outcomes: &[EvalOutcome], q: usize) -> Result<Vec<GridCell>, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::Empty);
    }
    let axis_values = |axis: Axis| -> Result<Vec<f64>, EvalError> {
        outcomes
            .iter()
            .map(|o| {
                o.scores
                    .get(&axis)
                    .copied()
                    .ok_or_else(|| EvalError::MissingAxisScore {
                        prompt_id: o.prompt_id.clone(),
                        axis,
                    })
            })
            .collect()
    };
    let input_scores = axis_values(Axis::Input)?;
    let dec_scores = axis_values(Axis::Decoding)?;
    let input_q = quantile_assignment(&input_scores, q, Axis::Input)?;
    let dec_q = quantile_assignment(&dec_scores, q, Axis::Decoding)?;

    // Cell confidence blends the two axes' globally normalized scores, so
    // per-cell calibration is measured against the same scale everywhere.
    let input_conf = normalize_confidence(&input_scores, NormalizationMethod::MinMax);
    let dec_conf = normalize_confidence(&dec_scores, NormalizationMethod::MinMax);

    let mut cells = Vec::with_capacity(q * q);
    for iq in 0..q {
        for dq in 0..q {
            let members: Vec<usize> = (0..outcomes.len())
                .filter(|&i| input_q[i] == iq && dec_q[i] == dq)
                .collect();
            let count = members.len();
            let (failure_rate, cell_ece) = if count == 0 {
                (0.0, 0.0)
            } else {
                let failures: Vec<bool> = members.iter().map(|&i| outcomes[i].failure).collect();
                let confidences: Vec<f64> = members
                    .iter()
                    .map(|&i| 0.5 * (input_conf[i] + dec_conf[i]))
                    .collect();
                let rate =
                    failures.iter().filter(|f| **f).count() as f64 / count as f64;
                (rate, ece(&confidences, &failures, DEFAULT_ECE_BINS)?)
            };
            cells.push(GridCell {
                input_quantile: iq,
                dec_quantile: dq,
                count,
                failure_rate,
                ece: cell_ece,
            });
        }
    }
    Ok(cells)
}

/// Failure-prediction metrics for one axis within one dataset row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisMetrics {
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ece: Option<f64>,
    /// Why a metric is absent, when it is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// One report row: a dataset tag with per-axis metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset_tag: String,
    pub count: usize,
    pub failure_rate: f64,
    pub metrics: BTreeMap<Axis, AxisMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<GridCell>>,
    pub warnings: Vec<String>,
    pub normalization: NormalizationMethod,
    /// Human-readable description of the labeling rule used.
    pub labeling: String,
}

impl EvalReport {
    /// True when any axis in any row had no defined AUROC.
    pub fn has_undefined_auroc(&self) -> bool {
        self.rows
            .iter()
            .any(|row| row.metrics.values().any(|m| m.auroc.is_none()))
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub normalization: NormalizationMethod,
    pub ece_bins: usize,
    pub labeling: String,
    /// Compute the input-by-decoding grid when both axes are present.
    pub grid: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            normalization: NormalizationMethod::MinMax,
            ece_bins: DEFAULT_ECE_BINS,
            labeling: format!("rouge_l_f1 >= {DEFAULT_ROUGE_THRESHOLD}"),
            grid: true,
        }
    }
}

/// Aggregates labeled outcomes into the per-dataset, per-axis metric table
/// plus (when possible) the joint grid.
///
/// Degenerate AUROC (single-class labels) is reported in the row's note and
/// leaves the metric unset rather than failing the whole report; the caller
/// decides how loudly to surface it.
pub fn evaluate_outcomes(
    outcomes: &[EvalOutcome],
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::EmptyJoin);
    }
    let mut by_tag: BTreeMap<&str, Vec<&EvalOutcome>> = BTreeMap::new();
    for outcome in outcomes {
        by_tag
            .entry(outcome.dataset_tag.as_str())
            .or_default()
            .push(outcome);
    }

    let mut warnings = Vec::new();
    let mut rows = Vec::new();
    for (tag, group) in &by_tag {
        let mut metrics = BTreeMap::new();
        for axis in Axis::ALL {
            let scored: Vec<(&&EvalOutcome, f64)> = group
                .iter()
                .filter_map(|o| o.scores.get(&axis).map(|s| (o, *s)))
                .collect();
            if scored.is_empty() {
                warnings.push(format!("dataset `{tag}`: no {axis} scores; axis excluded"));
                continue;
            }
            if scored.len() < group.len() {
                warnings.push(format!(
                    "dataset `{tag}`: {} of {} outcomes lack a {axis} score",
                    group.len() - scored.len(),
                    group.len()
                ));
            }
            let scores: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();
            let failures: Vec<bool> = scored.iter().map(|(o, _)| o.failure).collect();
            let confidences = normalize_confidence(&scores, config.normalization);
            let ece_value = ece(&confidences, &failures, config.ece_bins)?;
            let (auroc_value, note) = match auroc(&scores, &failures) {
                Ok(value) => (Some(value), None),
                Err(err @ EvalError::DegenerateLabels { .. }) => (None, Some(err.to_string())),
                Err(err) => return Err(err),
            };
            metrics.insert(
                axis,
                AxisMetrics {
                    count: scores.len(),
                    auroc: auroc_value,
                    ece: Some(ece_value),
                    note,
                },
            );
        }
        let failure_count = group.iter().filter(|o| o.failure).count();
        rows.push(ReportRow {
            dataset_tag: (*tag).to_owned(),
            count: group.len(),
            failure_rate: failure_count as f64 / group.len() as f64,
            metrics,
        });
    }

    let grid = if config.grid {
        let eligible: Vec<EvalOutcome> = outcomes
            .iter()
            .filter(|o| {
                o.scores.contains_key(&Axis::Input) && o.scores.contains_key(&Axis::Decoding)
            })
            .cloned()
            .collect();
        if eligible.len() < outcomes.len() {
            warnings.push(format!(
                "grid: {} of {} outcomes lack both input and decoding scores",
                outcomes.len() - eligible.len(),
                outcomes.len()
            ));
        }
        if eligible.is_empty() {
            None
        } else {
            match quantile_grid(&eligible, GRID_QUANTILES) {
                Ok(cells) => Some(cells),
                Err(err @ EvalError::DegenerateQuantiles { .. }) => {
                    warnings.push(format!("grid skipped: {err}"));
                    None
                }
                Err(err) => return Err(err),
            }
        }
    } else {
        None
    };

    Ok(EvalReport {
        rows,
        grid,
        warnings,
        normalization: config.normalization,
        labeling: config.labeling.clone(),
    })
}

fn csv_field(raw: &str) -> String {
    if raw.contains(',') || raw.contains('"') || raw.contains('\n') {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw.to_owned()
    }
}

fn format_opt(value: Option<f64>) -> String {
    value.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Writes the per-axis metric table as CSV, one row per dataset-axis pair.
pub fn write_report_csv(path: &Path, report: &EvalReport) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = Vec::new();
    writeln!(out, "dataset,axis,count,auroc,ece,note")?;
    for row in &report.rows {
        for (axis, metrics) in &row.metrics {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                csv_field(&row.dataset_tag),
                axis,
                metrics.count,
                format_opt(metrics.auroc),
                format_opt(metrics.ece),
                csv_field(metrics.note.as_deref().unwrap_or_default()),
            )?;
        }
    }
    std::fs::write(path, out)
}

/// Writes the joint grid as CSV, 9 rows for the default 3-by-3.
pub fn write_grid_csv(path: &Path, grid: &[GridCell]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = Vec::new();
    writeln!(out, "input_quantile,dec_quantile,count,failure_rate,ece")?;
    for cell in grid {
        writeln!(
            out,
            "{},{},{},{:.6},{:.6}",
            cell.input_quantile, cell.dec_quantile, cell.count, cell.failure_rate, cell.ece
        )?;
    }
    std::fs::write(path, out)
}
