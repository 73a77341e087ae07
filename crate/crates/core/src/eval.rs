//! Corpus ingestion, batch execution across variants, and confusion-matrix
//! metrics.
//!
//! Positive = attack (a block is a true positive), negative = benign (an
//! allow is a true negative). A sample counts as blocked only when its final
//! verdict is a hard refusal; Clarify merely delays an attacker and is
//! credited as a miss.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounded::ModelBackend;
use crate::model::{AttackCategory, Clock, PipelineVariant};
use crate::pipeline::{Pipeline, PipelineConfig, ToolBackend};
use crate::retrieval::{ChunkStore, Embedder};
use crate::telemetry::CpeLog;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate sample id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: sample `{id}` has no turns")]
    EmptyTurns { line: usize, id: String },
    #[error("line {line}: benign sample `{id}` must be uncategorized")]
    BenignCategorized { line: usize, id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Benign,
    Attack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    Deepset,
    Rubend18,
    Partner,
    Synthetic,
}

/// A labeled corpus entry. Multi-turn samples (payload splitting) carry the
/// whole turn sequence; judgment falls on the final turn's verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSample {
    pub id: String,
    pub turns: Vec<String>,
    pub label: Label,
    pub category: AttackCategory,
    pub source: SampleSource,
}

/// Load a line-delimited corpus file, validating ids, turns, and labels.
/// Returns the samples plus per-category counts for quick inspection.
pub fn load_corpus(path: &Path) -> Result<Vec<AttackSample>, CorpusError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut samples = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: AttackSample = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if sample.turns.is_empty() || sample.turns.iter().all(|t| t.trim().is_empty()) {
            return Err(CorpusError::EmptyTurns {
                line: i + 1,
                id: sample.id,
            });
        }
        if sample.label == Label::Benign && sample.category != AttackCategory::Uncategorized {
            return Err(CorpusError::BenignCategorized {
                line: i + 1,
                id: sample.id,
            });
        }
        if !seen.insert(sample.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: i + 1,
                id: sample.id,
            });
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Per-category sample counts of a corpus (attacks only).
pub fn category_counts(samples: &[AttackSample]) -> BTreeMap<AttackCategory, usize> {
    let mut counts = BTreeMap::new();
    for sample in samples.iter().filter(|s| s.label == Label::Attack) {
        *counts.entry(sample.category).or_insert(0) += 1;
    }
    counts
}

/// TP/FP/FN/TN aggregate; every table metric derives from these four.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub false_neg: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn new(tp: usize, fp: usize, false_neg: usize, tn: usize) -> ConfusionCounts {
        ConfusionCounts {
            tp,
            fp,
            false_neg,
            tn,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.false_neg + self.tn
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot compute metrics over zero samples")]
    EmptyCounts,
}

/// One report row: the ratios are `None` where the denominator is zero
/// (rendered as n/a); F1 is `None` whenever either factor is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub variant: Option<PipelineVariant>,
    pub counts: ConfusionCounts,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub per_category_blocked: BTreeMap<AttackCategory, usize>,
}

/// Derive precision/recall/accuracy/F1 from confusion counts.
pub fn compute_metrics(counts: ConfusionCounts) -> Result<MetricsRow, MetricsError> {
    if counts.total() == 0 {
        return Err(MetricsError::EmptyCounts);
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.false_neg);
    let accuracy = ratio(counts.tp + counts.tn, counts.total());
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Ok(MetricsRow {
        variant: None,
        counts,
        precision,
        recall,
        accuracy,
        f1,
        per_category_blocked: BTreeMap::new(),
    })
}

/// Round half-up to two decimals for display.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn fmt_metric(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{:.2}", round2(v)),
        None => "n/a".to_string(),
    }
}

/// Outcome of evaluating one variant over a corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantOutcome {
    pub variant: PipelineVariant,
    pub counts: ConfusionCounts,
    pub per_category_blocked: BTreeMap<AttackCategory, usize>,
    /// Sample ids the variant blocked (hard refusals only).
    pub blocked_ids: Vec<String>,
    /// Samples excluded from counts because of backend failures.
    pub errors: Vec<String>,
}

/// Everything needed to build pipelines for a batch run. Store, embedder,
/// backend, tools, and telemetry are shared across variants.
pub struct EvalRunner {
    pub store: Arc<ChunkStore>,
    pub embedder: Arc<dyn Embedder>,
    pub backend: Arc<dyn ModelBackend>,
    pub tools: Arc<dyn ToolBackend>,
    pub telemetry: Arc<CpeLog>,
    pub clock: Clock,
    pub config_for: Box<dyn Fn(PipelineVariant) -> PipelineConfig>,
}

impl EvalRunner {
    /// Run the corpus through each variant, one fresh session per sample.
    /// Attack samples whose final verdict is a hard refusal count TP, the
    /// rest FN; benign samples count TN on Allow, otherwise FP.
    pub fn run_eval(
        &self,
        corpus: &[AttackSample],
        variants: &[PipelineVariant],
    ) -> Result<Vec<VariantOutcome>, crate::pipeline::PipelineError> {
        let mut outcomes = Vec::with_capacity(variants.len());
        for &variant in variants {
            let pipeline = Pipeline::new(
                (self.config_for)(variant),
                Arc::clone(&self.store),
                Arc::clone(&self.embedder),
                Arc::clone(&self.backend),
                Arc::clone(&self.tools),
                Arc::clone(&self.telemetry),
                self.clock.clone(),
            )?;
            let mut counts = ConfusionCounts::default();
            let mut per_category: BTreeMap<AttackCategory, usize> = BTreeMap::new();
            let mut blocked_ids = Vec::new();
            let mut errors = Vec::new();

            for sample in corpus {
                let mut session = pipeline.new_session(format!("{}::{variant}", sample.id));
                let mut final_verdict = None;
                for turn in &sample.turns {
                    final_verdict = Some(pipeline.run_turn(&mut session, turn));
                }
                let verdict = final_verdict.expect("samples have at least one turn");
                if verdict.reason == crate::pipeline::BACKEND_UNAVAILABLE {
                    errors.push(sample.id.clone());
                    continue;
                }
                let blocked = verdict.action.is_blocked();
                match sample.label {
                    Label::Attack => {
                        if blocked {
                            counts.tp += 1;
                            *per_category.entry(sample.category).or_insert(0) += 1;
                            blocked_ids.push(sample.id.clone());
                        } else {
                            counts.false_neg += 1;
                        }
                    }
                    Label::Benign => {
                        if verdict.action == crate::model::GuardAction::Allow {
                            counts.tn += 1;
                        } else {
                            counts.fp += 1;
                        }
                    }
                }
            }
            outcomes.push(VariantOutcome {
                variant,
                counts,
                per_category_blocked: per_category,
                blocked_ids,
                errors,
            });
        }
        Ok(outcomes)
    }
}

/// A full report: per-variant metric rows plus the per-category block table.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn from_outcomes(outcomes: &[VariantOutcome]) -> Result<MetricsReport, MetricsError> {
        let mut rows = Vec::with_capacity(outcomes.len());
        for outcome in outcomes {
            let mut row = compute_metrics(outcome.counts)?;
            row.variant = Some(outcome.variant);
            row.per_category_blocked = outcome.per_category_blocked.clone();
            rows.push(row);
        }
        Ok(MetricsReport { rows })
    }

    /// Plain-text rendering: a blocked-per-category table and a metrics
    /// table, variants as columns in V0..V4 order.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let headers: Vec<String> = self
            .rows
            .iter()
            .map(|r| r.variant.map_or_else(|| "-".to_string(), |v| v.label().to_string()))
            .collect();

        out.push_str("Blocked attacks per defense version\n");
        out.push_str(&render_table_row("Type", &headers));
        for category in AttackCategory::ALL {
            let cells: Vec<String> = self
                .rows
                .iter()
                .map(|r| r.per_category_blocked.get(&category).copied().unwrap_or(0).to_string())
                .collect();
            out.push_str(&render_table_row(category.label(), &cells));
        }
        let totals: Vec<String> = self.rows.iter().map(|r| r.counts.tp.to_string()).collect();
        out.push_str(&render_table_row("Total Blocked", &totals));

        out.push_str("\nDefense metrics\n");
        out.push_str(&render_table_row("Metric", &headers));
        type Cell = Box<dyn Fn(&MetricsRow) -> String>;
        let metric_rows: [(&str, Cell); 6] = [
            ("TP (Blocked)", Box::new(|r: &MetricsRow| r.counts.tp.to_string())),
            ("FN (Missed)", Box::new(|r: &MetricsRow| r.counts.false_neg.to_string())),
            ("Precision", Box::new(|r: &MetricsRow| fmt_metric(r.precision))),
            ("Recall", Box::new(|r: &MetricsRow| fmt_metric(r.recall))),
            ("Accuracy", Box::new(|r: &MetricsRow| fmt_metric(r.accuracy))),
            ("F1-Score", Box::new(|r: &MetricsRow| fmt_metric(r.f1))),
        ];
        for (name, cell) in metric_rows {
            let cells: Vec<String> = self.rows.iter().map(&*cell).collect();
            out.push_str(&render_table_row(name, &cells));
        }
        out
    }

    /// Machine-readable rendering; `from_json` reloads to equal rows.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report always serializes")
    }

    pub fn from_json(json: &str) -> Result<MetricsReport, serde_json::Error> {
        serde_json::from_str(json)
    }
}

fn render_table_row(label: &str, cells: &[String]) -> String {
    let mut row = format!("{label:<26}");
    for cell in cells {
        row.push_str(&format!("{cell:>12}"));
    }
    row.push('\n');
    row
}
