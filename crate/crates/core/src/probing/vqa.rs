use std::collections::HashMap;
use std::sync::OnceLock;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::Question;
use crate::backend::{encode_png_base64, BackendError, HttpJsonClient, RetryPolicy};
use crate::prompt::StructuredPrompt;

/// Everything a VQA backend may look at for one question. Remote backends
/// only see the image and question text; the item identifiers exist for
/// annotation-driven mocks.
pub struct VqaQuery<'a> {
    pub image: &'a RgbImage,
    pub question: &'a Question,
    pub source_id: &'a str,
    pub generator_id: &'a str,
}

pub trait VqaBackend: Send + Sync {
    fn model_id(&self) -> &str;

    /// Probability that the answer is "Yes", in `[0, 1]`.
    fn p_yes(&self, query: &VqaQuery<'_>) -> Result<f64, BackendError>;
}

/// Instruction wrapper appended to every question sent to a remote model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct VqaPromptTemplate {
    pub version: u32,
    pub suffix: String,
}

impl VqaPromptTemplate {
    pub fn builtin() -> &'static VqaPromptTemplate {
        static TEMPLATE: OnceLock<VqaPromptTemplate> = OnceLock::new();
        TEMPLATE.get_or_init(|| {
            serde_json::from_str(include_str!("../../resources/vqa_prompt.json"))
                .expect("bundled VQA prompt template is valid JSON")
        })
    }

    pub fn wrap(&self, question: &str) -> String {
        format!("{question}{}", self.suffix)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VqaRequest {
    pub image: String,
    pub question: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VqaResponse {
    pub p_yes: f64,
}

/// Remote VQA model speaking `POST {image, question} -> {p_yes}`.
#[derive(Debug)]
pub struct HttpVqa {
    client: HttpJsonClient,
    model_id: String,
    template: VqaPromptTemplate,
}

impl HttpVqa {
    pub fn new(
        endpoint: url::Url,
        model_id: impl Into<String>,
        retry: RetryPolicy,
        max_in_flight: usize,
    ) -> Result<Self, BackendError> {
        Ok(HttpVqa {
            client: HttpJsonClient::new(endpoint, retry, max_in_flight)?,
            model_id: model_id.into(),
            template: VqaPromptTemplate::builtin().clone(),
        })
    }

    pub fn retry_count(&self) -> u64 {
        self.client.retry_count()
    }
}

impl VqaBackend for HttpVqa {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn p_yes(&self, query: &VqaQuery<'_>) -> Result<f64, BackendError> {
        let req = VqaRequest { image: encode_png_base64(query.image)?, question: self.template.wrap(&query.question.text) };
        let resp: VqaResponse = self.client.post_json(&req)?;
        Ok(resp.p_yes)
    }
}

/// Always answers with the same probability.
#[derive(Debug, Clone, Copy)]
pub struct FixedVqa(pub f64);

impl VqaBackend for FixedVqa {
    fn model_id(&self) -> &str {
        "mock/fixed"
    }

    fn p_yes(&self, _query: &VqaQuery<'_>) -> Result<f64, BackendError> {
        Ok(self.0)
    }
}

/// Answers from ground-truth annotations of what each image depicts:
/// `p_yes = 1` when the annotated entity of the question's class carries the
/// attribute, else `0`.
///
/// Annotations are looked up by `(source_id, generator_id)` first and then
/// by `source_id` alone.
#[derive(Debug, Clone, Default)]
pub struct OracleVqa {
    truth: HashMap<(String, Option<String>), StructuredPrompt>,
}

impl OracleVqa {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, generator_id: Option<&str>, truth: StructuredPrompt) {
        self.truth.insert((truth.source_id().to_owned(), generator_id.map(str::to_owned)), truth);
    }

    pub fn with(mut self, generator_id: Option<&str>, truth: StructuredPrompt) -> Self {
        self.insert(generator_id, truth);
        self
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    fn lookup(&self, source_id: &str, generator_id: &str) -> Option<&StructuredPrompt> {
        self.truth
            .get(&(source_id.to_owned(), Some(generator_id.to_owned())))
            .or_else(|| self.truth.get(&(source_id.to_owned(), None)))
    }
}

impl VqaBackend for OracleVqa {
    fn model_id(&self) -> &str {
        "mock/oracle"
    }

    fn p_yes(&self, query: &VqaQuery<'_>) -> Result<f64, BackendError> {
        let truth = self.lookup(query.source_id, query.generator_id).ok_or_else(|| {
            BackendError::Protocol(format!(
                "oracle has no annotation for {}:{}",
                query.source_id, query.generator_id
            ))
        })?;
        let present = truth
            .entities()
            .iter()
            .filter(|e| e.class_label() == query.question.entity_class)
            .any(|e| e.has_attribute(query.question.attribute.name()));
        Ok(if present { 1.0 } else { 0.0 })
    }
}
