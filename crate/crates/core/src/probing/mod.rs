//! Reflection and leakage questions and their scoring through a VQA model.
//!
//! Reflection questions ask whether each entity shows its own attributes
//! (expected answer: yes). Leakage questions ask whether an entity shows an
//! attribute that belongs to a different entity (expected answer: no).

mod pipeline;
mod vqa;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::backend::BackendError;
use crate::localization::LocalizedView;
use crate::prompt::{Attribute, RenderTable, StructuredPrompt};

pub use pipeline::{evaluate_image, evaluate_item, evaluate_items, load_image, EvalConfig, EvaluateError, ItemContext};
pub use vqa::{
    FixedVqa, HttpVqa, OracleVqa, VqaBackend, VqaPromptTemplate, VqaQuery, VqaRequest, VqaResponse,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Reflection,
    Leakage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    TP,
    FP,
    TN,
    FN,
}

impl Outcome {
    /// Confusion cell for a target label and a predicted label.
    pub fn from_labels(target: Label, predicted: Label) -> Outcome {
        match (target, predicted) {
            (Label::Positive, Label::Positive) => Outcome::TP,
            (Label::Positive, Label::Negative) => Outcome::FN,
            (Label::Negative, Label::Negative) => Outcome::TN,
            (Label::Negative, Label::Positive) => Outcome::FP,
        }
    }
}

impl QuestionKind {
    pub fn target(self) -> Label {
        match self {
            QuestionKind::Reflection => Label::Positive,
            QuestionKind::Leakage => Label::Negative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Question {
    pub kind: QuestionKind,
    /// Index of the entity whose localized view is shown.
    pub subject: usize,
    pub entity_class: String,
    pub attribute: Attribute,
    pub text: String,
}

impl Question {
    fn new(kind: QuestionKind, subject: usize, entity_class: &str, attribute: &Attribute) -> Self {
        Question {
            kind,
            subject,
            entity_class: entity_class.to_owned(),
            attribute: attribute.clone(),
            text: render_question(entity_class, attribute.name()),
        }
    }

    pub fn target(&self) -> Label {
        self.kind.target()
    }

    /// Key used to detect conflicts between reflection and leakage questions.
    pub fn key(&self) -> (&str, &str) {
        (&self.entity_class, self.attribute.name())
    }
}

/// `"Is the blazer floral?"`, or `"Are the pants dotted?"` for paired garments.
pub fn render_question(entity_class: &str, attribute: &str) -> String {
    if RenderTable::builtin().is_plural(entity_class) {
        format!("Are the {entity_class} {attribute}?")
    } else {
        format!("Is the {entity_class} {attribute}?")
    }
}

/// One question per (entity, own attribute), in entity then attribute order.
pub fn build_reflection_questions(prompt: &StructuredPrompt) -> Vec<Question> {
    prompt
        .entities()
        .iter()
        .enumerate()
        .flat_map(|(i, e)| {
            e.attributes()
                .iter()
                .map(move |a| Question::new(QuestionKind::Reflection, i, e.class_label(), a))
        })
        .collect()
}

/// Questions asking entity `i` about attributes of every other entity `j`,
/// minus those that collide with a reflection question on
/// (entity class, attribute name). Repeated candidates are kept once.
pub fn build_leakage_questions(prompt: &StructuredPrompt) -> Vec<Question> {
    let reflection: HashSet<(&str, &str)> = prompt
        .entities()
        .iter()
        .flat_map(|e| e.attributes().iter().map(move |a| (e.class_label(), a.name())))
        .collect();

    let mut seen: HashSet<(&str, &str)> = HashSet::new();
    let mut out = Vec::new();
    for (i, subject) in prompt.entities().iter().enumerate() {
        for (j, other) in prompt.entities().iter().enumerate() {
            if i == j {
                continue;
            }
            for attr in other.attributes() {
                let key = (subject.class_label(), attr.name());
                if reflection.contains(&key) || !seen.insert(key) {
                    continue;
                }
                out.push(Question::new(QuestionKind::Leakage, i, subject.class_label(), attr));
            }
        }
    }
    out
}

/// Reflection questions followed by leakage questions.
pub fn build_questions(prompt: &StructuredPrompt) -> Vec<Question> {
    let mut questions = build_reflection_questions(prompt);
    questions.extend(build_leakage_questions(prompt));
    questions
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub source_id: String,
    pub generator_id: String,
    pub question_index: usize,
    pub question: Question,
    pub p_yes: f64,
    pub predicted: Label,
    pub outcome: Outcome,
    pub fallback_used: bool,
    pub view_ref: String,
}

impl AnswerRecord {
    pub fn item_id(&self) -> String {
        format!("{}:{}", self.source_id, self.generator_id)
    }
}

/// Flat JSONL layout for persisted answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRow {
    pub source_id: String,
    pub generator_id: String,
    pub question_index: usize,
    pub kind: QuestionKind,
    pub entity: String,
    pub attribute: String,
    pub question: String,
    pub p_yes: f64,
    pub predicted: Label,
    pub target: Label,
    pub outcome: Outcome,
    pub fallback_used: bool,
    pub view_ref: String,
}

impl From<&AnswerRecord> for AnswerRow {
    fn from(r: &AnswerRecord) -> Self {
        AnswerRow {
            source_id: r.source_id.clone(),
            generator_id: r.generator_id.clone(),
            question_index: r.question_index,
            kind: r.question.kind,
            entity: r.question.entity_class.clone(),
            attribute: r.question.attribute.name().to_owned(),
            question: r.question.text.clone(),
            p_yes: r.p_yes,
            predicted: r.predicted,
            target: r.question.target(),
            outcome: r.outcome,
            fallback_used: r.fallback_used,
            view_ref: r.view_ref.clone(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScoreError {
    #[error("decision threshold {0} is not in (0, 1)")]
    InvalidThreshold(f64),
    #[error("question `{question}`: {source}")]
    Backend {
        question: String,
        #[source]
        source: BackendError,
    },
}

/// Asks the backend for P("Yes") and files the answer into a confusion cell.
/// The answer counts as positive only when `p_yes > threshold`.
pub fn score_question(
    backend: &dyn VqaBackend,
    view: &LocalizedView,
    question: &Question,
    threshold: f64,
    ctx: &ItemContext,
) -> Result<AnswerRecord, ScoreError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(ScoreError::InvalidThreshold(threshold));
    }
    let with_question = |source| ScoreError::Backend { question: question.text.clone(), source };
    let query = VqaQuery {
        image: &view.pixels,
        question,
        source_id: &ctx.source_id,
        generator_id: &ctx.generator_id,
    };
    let p_yes = backend.p_yes(&query).map_err(with_question)?;
    if !(0.0..=1.0).contains(&p_yes) {
        return Err(with_question(BackendError::Protocol(format!("p_yes {p_yes} outside [0, 1]"))));
    }
    let predicted = if p_yes > threshold { Label::Positive } else { Label::Negative };
    Ok(AnswerRecord {
        source_id: ctx.source_id.clone(),
        generator_id: ctx.generator_id.clone(),
        question_index: 0,
        question: question.clone(),
        p_yes,
        predicted,
        outcome: Outcome::from_labels(question.target(), predicted),
        fallback_used: view.fallback_used,
        view_ref: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::Entity;
    use image::RgbImage;

    fn prompt(entities: &[(&str, &[&str])]) -> StructuredPrompt {
        StructuredPrompt::new(
            "t",
            entities
                .iter()
                .map(|(c, attrs)| Entity::new(c, attrs.iter().map(|a| Attribute::pattern(a).unwrap()).collect()).unwrap())
                .collect(),
        )
    }

    fn keys(qs: &[Question]) -> Vec<(String, String)> {
        qs.iter().map(|q| (q.entity_class.clone(), q.attribute.name().to_owned())).collect()
    }

    #[test]
    fn reflection_one_per_pair() {
        let p = prompt(&[("shirt", &["striped"]), ("pants", &["dotted"])]);
        let qs = build_reflection_questions(&p);
        assert_eq!(keys(&qs), vec![("shirt".into(), "striped".into()), ("pants".into(), "dotted".into())]);
        assert!(qs.iter().all(|q| q.target() == Label::Positive));
        assert_eq!(qs[1].subject, 1);

        let blazer = prompt(&[("blazer", &["floral"])]);
        let q = &build_reflection_questions(&blazer)[0];
        assert_eq!(q.text, "Is the blazer floral?");
        assert_eq!(q.target(), Label::Positive);

        assert!(build_reflection_questions(&prompt(&[])).is_empty());
    }

    #[test]
    fn leakage_asks_about_other_entities() {
        let p = prompt(&[("blazer", &["floral"]), ("pants", &["gold"])]);
        let qs = build_leakage_questions(&p);
        assert_eq!(qs.len(), 2);
        assert_eq!(qs[0].text, "Is the blazer gold?");
        assert_eq!(qs[0].target(), Label::Negative);
        assert_eq!(qs[1].text, "Are the pants floral?");
    }

    #[test]
    fn leakage_dedup_against_reflection() {
        let p = prompt(&[("shirt", &["striped"]), ("pants", &["striped", "dotted"])]);
        let qs = build_leakage_questions(&p);
        assert_eq!(keys(&qs), vec![("shirt".into(), "dotted".into())]);
        assert!(build_leakage_questions(&prompt(&[("shirt", &["striped"])])).is_empty());
    }

    #[test]
    fn leakage_collapses_repeats() {
        let p = prompt(&[("shirt", &["a"]), ("pants", &["b"]), ("coat", &["b"])]);
        let qs = build_leakage_questions(&p);
        // shirt: b once; pants: a (b is its own); coat: a.
        assert_eq!(
            keys(&qs),
            vec![("shirt".into(), "b".into()), ("pants".into(), "a".into()), ("coat".into(), "a".into())]
        );
    }

    #[test]
    fn question_templates() {
        assert_eq!(render_question("blazer", "floral"), "Is the blazer floral?");
        assert_eq!(render_question("pants", "dotted"), "Are the pants dotted?");
        assert_eq!(render_question("shirt", "striped"), "Is the shirt striped?");
    }

    #[test]
    fn outcome_table() {
        assert_eq!(Outcome::from_labels(Label::Positive, Label::Positive), Outcome::TP);
        assert_eq!(Outcome::from_labels(Label::Positive, Label::Negative), Outcome::FN);
        assert_eq!(Outcome::from_labels(Label::Negative, Label::Negative), Outcome::TN);
        assert_eq!(Outcome::from_labels(Label::Negative, Label::Positive), Outcome::FP);
    }

    #[test]
    fn score_question_cells() {
        let p = prompt(&[("shirt", &["striped"]), ("pants", &["dotted"])]);
        let view = LocalizedView::unlocalized(&RgbImage::new(4, 4));
        let ctx = ItemContext::new("t", "g");
        let refl = &build_reflection_questions(&p)[0];
        let leak = &build_leakage_questions(&p)[0];

        let r = score_question(&FixedVqa(0.9), &view, refl, 0.5, &ctx).unwrap();
        assert_eq!(r.outcome, Outcome::TP);
        let r = score_question(&FixedVqa(0.9), &view, leak, 0.5, &ctx).unwrap();
        assert_eq!(r.outcome, Outcome::FP);
        let r = score_question(&FixedVqa(0.5), &view, refl, 0.5, &ctx).unwrap();
        assert_eq!((r.predicted, r.outcome), (Label::Negative, Outcome::FN));
        let r = score_question(&FixedVqa(0.1), &view, leak, 0.5, &ctx).unwrap();
        assert_eq!(r.outcome, Outcome::TN);
        assert_eq!(r.p_yes, 0.1);

        assert!(matches!(
            score_question(&FixedVqa(1.2), &view, refl, 0.5, &ctx),
            Err(ScoreError::Backend { source: BackendError::Protocol(_), .. })
        ));
        assert!(matches!(
            score_question(&FixedVqa(0.4), &view, refl, 1.0, &ctx),
            Err(ScoreError::InvalidThreshold(_))
        ));
    }
}
