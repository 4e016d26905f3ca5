//! Precision / recall / F1 over confusion counts, and the attribute-swap
//! failure rate.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::localization::SegmentationBackend;
use crate::probing::{
    evaluate_image, load_image, AnswerRecord, EvalConfig, EvaluateError, ItemContext, Outcome, VqaBackend,
};
use crate::prompt::{EvalItem, StructuredPrompt};

#[derive(Debug, thiserror::Error)]
pub enum ScoringError {
    #[error("no cases to score")]
    EmptyInput,
    #[error("{0} has a {1} score but no matching counterpart")]
    Unpaired(String, &'static str),
    #[error("{0} has more than one {1} score")]
    DuplicateScore(String, &'static str),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_outcomes<I: IntoIterator<Item = Outcome>>(outcomes: I) -> Self {
        let mut c = ConfusionCounts::default();
        for o in outcomes {
            c.record(o);
        }
        c
    }

    pub fn record(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::TP => self.tp += 1,
            Outcome::FP => self.fp += 1,
            Outcome::TN => self.tn += 1,
            Outcome::FN => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn precision(&self) -> Option<Fraction> {
        Fraction::new(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<Fraction> {
        Fraction::new(self.tp, self.tp + self.fn_)
    }

    /// `2PR / (P + R)`, which reduces to `2tp / (2tp + fp + fn)`. Undefined
    /// unless `tp > 0`, since otherwise `P + R` is zero or undefined.
    pub fn f1(&self) -> Option<Fraction> {
        if self.tp == 0 {
            return None;
        }
        Fraction::new(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

/// Exact ratio of two counts, `den > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Option<Self> {
        (den > 0).then_some(Fraction { num, den })
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Image,
    Group,
    Run,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Precision,
    Recall,
    #[default]
    F1,
}

impl std::str::FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "precision" => Ok(MetricKind::Precision),
            "recall" => Ok(MetricKind::Recall),
            "f1" => Ok(MetricKind::F1),
            other => Err(format!("unknown metric `{other}` (expected precision, recall or f1)")),
        }
    }
}

/// Counts plus derived metrics; `None` marks an undefined metric (zero
/// denominator), which is not the same as a score of zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub counts: ConfusionCounts,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub scope: Scope,
}

impl ScoreReport {
    pub fn from_counts(counts: ConfusionCounts, scope: Scope) -> Self {
        ScoreReport {
            counts,
            precision: counts.precision().map(Fraction::value),
            recall: counts.recall().map(Fraction::value),
            f1: counts.f1().map(Fraction::value),
            scope,
        }
    }

    pub fn metric(&self, kind: MetricKind) -> Option<f64> {
        match kind {
            MetricKind::Precision => self.precision,
            MetricKind::Recall => self.recall,
            MetricKind::F1 => self.f1,
        }
    }

    /// The metric with undefined coerced to 0, for places that need a total order.
    pub fn metric_or_zero(&self, kind: MetricKind) -> f64 {
        self.metric(kind).unwrap_or(0.0)
    }
}

pub fn aggregate(records: &[AnswerRecord], scope: Scope) -> ScoreReport {
    ScoreReport::from_counts(ConfusionCounts::from_outcomes(records.iter().map(|r| r.outcome)), scope)
}

/// Micro-average: pools the counts of every report.
pub fn pool<'a, I: IntoIterator<Item = &'a ScoreReport>>(reports: I, scope: Scope) -> ScoreReport {
    let mut counts = ConfusionCounts::default();
    for r in reports {
        counts.merge(&r.counts);
    }
    ScoreReport::from_counts(counts, scope)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// Mean of each metric over the reports where it is defined.
pub fn macro_average(reports: &[ScoreReport]) -> MacroScores {
    let mean = |kind| {
        let vals: Vec<f64> = reports.iter().filter_map(|r| r.metric(kind)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    MacroScores { precision: mean(MetricKind::Precision), recall: mean(MetricKind::Recall), f1: mean(MetricKind::F1) }
}

/// Image-scope reports keyed by `(source_id, generator_id)`, in order of
/// first appearance.
pub fn per_image_reports(records: &[AnswerRecord]) -> Vec<(ItemContext, ScoreReport)> {
    let mut order: Vec<ItemContext> = Vec::new();
    let mut counts: HashMap<(String, String), ConfusionCounts> = HashMap::new();
    for r in records {
        let key = (r.source_id.clone(), r.generator_id.clone());
        counts
            .entry(key)
            .or_insert_with(|| {
                order.push(ItemContext::new(r.source_id.clone(), r.generator_id.clone()));
                ConfusionCounts::default()
            })
            .record(r.outcome);
    }
    order
        .into_iter()
        .map(|ctx| {
            let c = counts[&(ctx.source_id.clone(), ctx.generator_id.clone())];
            (ctx, ScoreReport::from_counts(c, Scope::Image))
        })
        .collect()
}

/// Group-scope reports per generator, pooled from image reports.
pub fn per_generator_reports(images: &[(ItemContext, ScoreReport)]) -> BTreeMap<String, ScoreReport> {
    let mut groups: BTreeMap<String, Vec<&ScoreReport>> = BTreeMap::new();
    for (ctx, report) in images {
        groups.entry(ctx.generator_id.clone()).or_default().push(report);
    }
    groups.into_iter().map(|(g, rs)| (g, pool(rs, Scope::Group))).collect()
}

/// One line of the score export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub source_id: String,
    pub generator_id: String,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl ScoreRow {
    pub fn new(source_id: &str, generator_id: &str, report: &ScoreReport) -> Self {
        ScoreRow {
            source_id: source_id.to_owned(),
            generator_id: generator_id.to_owned(),
            tp: report.counts.tp,
            fp: report.counts.fp,
            tn: report.counts.tn,
            fn_: report.counts.fn_,
            precision: report.precision,
            recall: report.recall,
            f1: report.f1,
        }
    }

    pub fn counts(&self) -> ConfusionCounts {
        ConfusionCounts { tp: self.tp, fp: self.fp, tn: self.tn, fn_: self.fn_ }
    }
}

pub fn write_score_csv<W: Write>(writer: W, rows: &[ScoreRow]) -> Result<(), ScoringError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_score_csv<R: Read>(reader: R) -> Result<Vec<ScoreRow>, ScoringError> {
    csv::Reader::from_reader(reader).deserialize().map(|r| r.map_err(ScoringError::from)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwapTestResult {
    pub n_cases: usize,
    pub n_failures: usize,
    /// Percentage in `[0, 100]`.
    pub failure_rate: f64,
}

/// A metric fails a case when it scores the swapped description strictly
/// higher than the correct one; ties are not failures.
pub fn swap_failure_rate(pairs: &[(f64, f64)]) -> Result<SwapTestResult, ScoringError> {
    if pairs.is_empty() {
        return Err(ScoringError::EmptyInput);
    }
    let n_failures = pairs.iter().filter(|(correct, swapped)| swapped > correct).count();
    Ok(SwapTestResult {
        n_cases: pairs.len(),
        n_failures,
        failure_rate: 100.0 * n_failures as f64 / pairs.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapPair {
    pub source_id: String,
    pub generator_id: String,
    pub correct: f64,
    pub swapped: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptionVariant {
    Correct,
    Swapped,
}

/// One line of an imported baseline-metric score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub source_id: String,
    pub generator_id: String,
    pub description_variant: DescriptionVariant,
    pub score: f64,
}

pub fn read_baseline_csv<R: Read>(reader: R) -> Result<Vec<BaselineRow>, ScoringError> {
    csv::Reader::from_reader(reader).deserialize().map(|r| r.map_err(ScoringError::from)).collect()
}

/// Pairs correct and swapped scores per `(source_id, generator_id)`,
/// ordered by key.
pub fn pair_baseline_scores(rows: &[BaselineRow]) -> Result<Vec<SwapPair>, ScoringError> {
    let mut slots: BTreeMap<(String, String), (Option<f64>, Option<f64>)> = BTreeMap::new();
    for row in rows {
        let key = (row.source_id.clone(), row.generator_id.clone());
        let slot = slots.entry(key.clone()).or_default();
        let (target, name) = match row.description_variant {
            DescriptionVariant::Correct => (&mut slot.0, "correct"),
            DescriptionVariant::Swapped => (&mut slot.1, "swapped"),
        };
        if target.replace(row.score).is_some() {
            return Err(ScoringError::DuplicateScore(format!("{}:{}", key.0, key.1), name));
        }
    }
    slots
        .into_iter()
        .map(|((source_id, generator_id), slot)| match slot {
            (Some(correct), Some(swapped)) => Ok(SwapPair { source_id, generator_id, correct, swapped }),
            (Some(_), None) => Err(ScoringError::Unpaired(format!("{source_id}:{generator_id}"), "correct")),
            (None, _) => Err(ScoringError::Unpaired(format!("{source_id}:{generator_id}"), "swapped")),
        })
        .collect()
}

/// Scores the item's image against `description` (possibly a swapped
/// negative) and returns the chosen metric, undefined mapped to 0.
pub fn score_item_under_description(
    item: &EvalItem,
    description: &StructuredPrompt,
    seg: &dyn SegmentationBackend,
    vqa: &dyn VqaBackend,
    config: &EvalConfig,
    metric: MetricKind,
) -> Result<f64, EvaluateError> {
    let image = load_image(std::path::Path::new(&item.image_ref))?;
    score_image_under_description(&image, &ItemContext::of(item), description, seg, vqa, config, metric)
}

pub fn score_image_under_description(
    image: &image::RgbImage,
    ctx: &ItemContext,
    description: &StructuredPrompt,
    seg: &dyn SegmentationBackend,
    vqa: &dyn VqaBackend,
    config: &EvalConfig,
    metric: MetricKind,
) -> Result<f64, EvaluateError> {
    let records = evaluate_image(description, image, ctx, seg, vqa, config)?;
    Ok(aggregate(&records, Scope::Image).metric_or_zero(metric))
}
