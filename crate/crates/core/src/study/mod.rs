//! Human studies: Likert rating of whole images and localized yes/no
//! questions, response collection, annotator agreement and human reference
//! scores.

mod registry;
mod server;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::localization::BBox;
use crate::probing::{build_questions, Label, Outcome, Question, QuestionKind};
use crate::prompt::EvalItem;
use crate::scoring::{ConfusionCounts, MetricKind, Scope, ScoreReport};

pub use registry::{Event, EventLog, StudyRegistry, StudySummary};
pub use server::{router, AppState};

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error("study has no items")]
    NoItems,
    #[error("unknown study `{0}`")]
    UnknownStudy(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("annotator `{annotator}` already answered task `{task}`")]
    Conflict { task: String, annotator: String },
    #[error("invalid answer: {0}")]
    Validation(String),
    #[error("no task has at least 2 responses")]
    InsufficientData,
    #[error("operation needs a {expected} study, this one is {found}")]
    Mode { expected: StudyMode, found: StudyMode },
    #[error("{} question(s) have no response", .0.len())]
    Incomplete(Vec<String>),
    #[error("response log: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyMode {
    Likert,
    Localized,
}

impl fmt::Display for StudyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StudyMode::Likert => "likert",
            StudyMode::Localized => "localized",
        })
    }
}

impl std::str::FromStr for StudyMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "likert" => Ok(StudyMode::Likert),
            "localized" => Ok(StudyMode::Localized),
            other => Err(format!("unknown study mode `{other}` (expected likert or localized)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YesNo {
    Yes,
    No,
}

/// A Likert rating (1 to 5) or a yes/no answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Rating(u8),
    Choice(YesNo),
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Rating(r) => write!(f, "{r}"),
            Answer::Choice(YesNo::Yes) => f.write_str("yes"),
            Answer::Choice(YesNo::No) => f.write_str("no"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskPayload {
    Likert { prompt_text: String },
    Localized { question: Question, highlight: Option<BBox> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTask {
    pub task_id: String,
    pub mode: StudyMode,
    pub item_id: String,
    pub image_key: String,
    pub payload: TaskPayload,
}

/// What an annotator is shown. Question kind and target label stay hidden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorTask {
    pub task_id: String,
    pub mode: StudyMode,
    pub image_url: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub question_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub highlight: Option<BBox>,
}

impl StudyTask {
    pub fn blinded(&self) -> AnnotatorTask {
        let image_url = format!("/v1/images/{}", self.image_key);
        match &self.payload {
            TaskPayload::Likert { prompt_text } => AnnotatorTask {
                task_id: self.task_id.clone(),
                mode: self.mode,
                image_url,
                prompt_text: Some(prompt_text.clone()),
                question_text: None,
                highlight: None,
            },
            TaskPayload::Localized { question, highlight } => AnnotatorTask {
                task_id: self.task_id.clone(),
                mode: self.mode,
                image_url,
                prompt_text: None,
                question_text: Some(question.text.clone()),
                highlight: *highlight,
            },
        }
    }

    pub fn accepts(&self, answer: Answer) -> bool {
        match (self.mode, answer) {
            (StudyMode::Likert, Answer::Rating(r)) => (1..=5).contains(&r),
            (StudyMode::Localized, Answer::Choice(_)) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanResponse {
    pub task_id: String,
    pub annotator_id: String,
    pub answer: Answer,
    /// Milliseconds since the Unix epoch.
    #[serde(default)]
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    /// Target number of responses per task.
    pub redundancy: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig { redundancy: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAgreement {
    pub task_id: String,
    pub majority_answer: Answer,
    pub agreement_ratio: f64,
    pub n_responses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Tasks with at least two responses.
    pub n_tasks: usize,
    /// Percentage in `[0, 100]`.
    pub mean_agreement: f64,
    pub per_task: Vec<TaskAgreement>,
}

/// Human reference for one generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemReference {
    pub item_id: String,
    pub report: ScoreReport,
    /// Tasks whose majority was tied and resolved against the target label.
    pub tied_tasks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScores {
    pub items: Vec<ItemReference>,
}

impl ReferenceScores {
    pub fn to_item_scores(&self, metric: MetricKind) -> crate::correlation::ItemScores {
        crate::correlation::ItemScores::Counts {
            counts: self.items.iter().map(|i| (i.item_id.clone(), i.report.counts)).collect(),
            metric,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub study_id: String,
    pub mode: StudyMode,
    pub config: StudyConfig,
    pub tasks: Vec<StudyTask>,
    /// Image key to on-disk path.
    pub images: BTreeMap<String, String>,
    /// Task index to responses keyed by annotator.
    #[serde(skip)]
    responses: BTreeMap<usize, BTreeMap<String, HumanResponse>>,
}

impl Study {
    /// Builds the task set: one task per item for Likert studies, one per
    /// (item, question) over reflection and leakage questions for localized
    /// studies. Returns warnings for items that produce no tasks.
    pub fn create(
        study_id: impl Into<String>,
        items: &[EvalItem],
        mode: StudyMode,
        config: StudyConfig,
    ) -> Result<(Study, Vec<String>), StudyError> {
        if items.is_empty() {
            return Err(StudyError::NoItems);
        }
        let study_id = study_id.into();
        let mut tasks = Vec::new();
        let mut images = BTreeMap::new();
        let mut warnings = Vec::new();
        for (n, item) in items.iter().enumerate() {
            let image_key = format!("{study_id}-img{n}");
            images.insert(image_key.clone(), item.image_ref.clone());
            let mut push = |payload| {
                tasks.push(StudyTask {
                    task_id: format!("{study_id}-t{}", tasks.len()),
                    mode,
                    item_id: item.item_id(),
                    image_key: image_key.clone(),
                    payload,
                })
            };
            match mode {
                StudyMode::Likert => push(TaskPayload::Likert { prompt_text: item.prompt.rendered_text().to_owned() }),
                StudyMode::Localized => {
                    let questions = build_questions(&item.prompt);
                    if questions.is_empty() {
                        let msg = format!("item {} yields no questions", item.item_id());
                        tracing::warn!("{msg}");
                        warnings.push(msg);
                    }
                    for question in questions {
                        push(TaskPayload::Localized { question, highlight: None });
                    }
                }
            }
        }
        Ok((Study { study_id, mode, config, tasks, images, responses: BTreeMap::new() }, warnings))
    }

    pub fn set_highlight(&mut self, task_id: &str, bbox: BBox) -> Result<(), StudyError> {
        let idx = self.task_index(task_id)?;
        match &mut self.tasks[idx].payload {
            TaskPayload::Localized { highlight, .. } => {
                *highlight = Some(bbox);
                Ok(())
            }
            TaskPayload::Likert { .. } => Err(StudyError::Mode { expected: StudyMode::Localized, found: self.mode }),
        }
    }

    fn task_index(&self, task_id: &str) -> Result<usize, StudyError> {
        self.tasks
            .iter()
            .position(|t| t.task_id == task_id)
            .ok_or_else(|| StudyError::UnknownTask(task_id.to_owned()))
    }

    pub fn response_count(&self, task_idx: usize) -> usize {
        self.responses.get(&task_idx).map_or(0, BTreeMap::len)
    }

    pub fn total_responses(&self) -> usize {
        self.responses.values().map(BTreeMap::len).sum()
    }

    pub fn responses(&self) -> impl Iterator<Item = &HumanResponse> {
        self.responses.values().flat_map(BTreeMap::values)
    }

    pub fn answered_by(&self, annotator: &str) -> usize {
        self.responses.values().filter(|r| r.contains_key(annotator)).count()
    }

    /// An unanswered task for `annotator`: least-answered first, preferring
    /// tasks still below the redundancy target, ties broken by task order.
    /// `None` once the annotator has answered everything.
    pub fn next_task(&self, annotator: &str) -> Option<&StudyTask> {
        (0..self.tasks.len())
            .filter(|i| !self.responses.get(i).is_some_and(|r| r.contains_key(annotator)))
            .min_by_key(|&i| {
                let n = self.response_count(i);
                (n >= self.config.redundancy, n, i)
            })
            .map(|i| &self.tasks[i])
    }

    /// Checks a response without storing it.
    pub fn check(&self, response: &HumanResponse) -> Result<usize, StudyError> {
        let idx = self.task_index(&response.task_id)?;
        let task = &self.tasks[idx];
        if response.annotator_id.trim().is_empty() {
            return Err(StudyError::Validation("annotator_id is empty".into()));
        }
        if !task.accepts(response.answer) {
            return Err(StudyError::Validation(format!(
                "answer `{}` is not valid for a {} task",
                response.answer, task.mode
            )));
        }
        if self.responses.get(&idx).is_some_and(|r| r.contains_key(&response.annotator_id)) {
            return Err(StudyError::Conflict { task: response.task_id.clone(), annotator: response.annotator_id.clone() });
        }
        Ok(idx)
    }

    pub fn submit(&mut self, response: HumanResponse) -> Result<(), StudyError> {
        let idx = self.check(&response)?;
        self.responses.entry(idx).or_default().insert(response.annotator_id.clone(), response);
        Ok(())
    }

    /// Majority answer and its share for every task with at least two
    /// responses, and the mean share over those tasks.
    pub fn agreement(&self) -> Result<AgreementReport, StudyError> {
        let mut per_task = Vec::new();
        for (idx, task) in self.tasks.iter().enumerate() {
            let Some(resps) = self.responses.get(&idx) else { continue };
            if resps.len() < 2 {
                continue;
            }
            let (majority_answer, count, _) = majority(resps.values().map(|r| r.answer));
            per_task.push(TaskAgreement {
                task_id: task.task_id.clone(),
                majority_answer,
                agreement_ratio: count as f64 / resps.len() as f64,
                n_responses: resps.len(),
            });
        }
        if per_task.is_empty() {
            return Err(StudyError::InsufficientData);
        }
        let mean = per_task.iter().map(|t| t.agreement_ratio).sum::<f64>() / per_task.len() as f64;
        Ok(AgreementReport { n_tasks: per_task.len(), mean_agreement: 100.0 * mean, per_task })
    }

    /// Per-item confusion counts from majority answers.
    ///
    /// A majority "yes" counts as a positive prediction. A tied majority is
    /// resolved against the question's target label, so it lands in an error
    /// cell, and the task is listed in `tied_tasks`.
    pub fn human_reference_scores(&self) -> Result<ReferenceScores, StudyError> {
        if self.mode != StudyMode::Localized {
            return Err(StudyError::Mode { expected: StudyMode::Localized, found: self.mode });
        }
        let unanswered: Vec<String> = self
            .tasks
            .iter()
            .enumerate()
            .filter(|(i, _)| self.response_count(*i) == 0)
            .map(|(_, t)| t.task_id.clone())
            .collect();
        if !unanswered.is_empty() {
            return Err(StudyError::Incomplete(unanswered));
        }

        let mut order: Vec<String> = Vec::new();
        let mut by_item: BTreeMap<String, (ConfusionCounts, Vec<String>)> = BTreeMap::new();
        for (idx, task) in self.tasks.iter().enumerate() {
            let TaskPayload::Localized { question, .. } = &task.payload else { unreachable!("mode checked") };
            let (answer, _, tied) = majority(self.responses[&idx].values().map(|r| r.answer));
            let target = question.target();
            let predicted = if tied {
                match target {
                    Label::Positive => Label::Negative,
                    Label::Negative => Label::Positive,
                }
            } else if answer == Answer::Choice(YesNo::Yes) {
                Label::Positive
            } else {
                Label::Negative
            };
            let entry = by_item.entry(task.item_id.clone()).or_insert_with(|| {
                order.push(task.item_id.clone());
                Default::default()
            });
            entry.0.record(Outcome::from_labels(target, predicted));
            if tied {
                entry.1.push(task.task_id.clone());
            }
        }
        let items = order
            .into_iter()
            .map(|item_id| {
                let (counts, tied_tasks) = by_item.remove(&item_id).expect("collected above");
                ItemReference { item_id, report: ScoreReport::from_counts(counts, Scope::Image), tied_tasks }
            })
            .collect();
        Ok(ReferenceScores { items })
    }

    /// Question kind per task, for audit tooling that is allowed to see it.
    pub fn task_kind(&self, task_id: &str) -> Option<QuestionKind> {
        self.tasks.iter().find(|t| t.task_id == task_id).and_then(|t| match &t.payload {
            TaskPayload::Localized { question, .. } => Some(question.kind),
            TaskPayload::Likert { .. } => None,
        })
    }
}

/// Most frequent answer, its count, and whether another answer ties it.
/// Among tied answers the smallest in `Answer` order is named.
fn majority<I: IntoIterator<Item = Answer>>(answers: I) -> (Answer, usize, bool) {
    let mut counts: BTreeMap<Answer, usize> = BTreeMap::new();
    for a in answers {
        *counts.entry(a).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    let mut winners = counts.iter().filter(|(_, c)| **c == best).map(|(a, _)| *a);
    let first = winners.next().expect("at least one answer");
    (first, best, winners.next().is_some())
}
