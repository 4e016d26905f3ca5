use std::collections::HashMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::mask::{Bitmap, Mask, RleMask};
use crate::backend::{encode_png_base64, BackendError, HttpJsonClient, RetryPolicy};

#[derive(Debug, Clone, PartialEq)]
pub struct MaskCandidate {
    pub bitmap: Bitmap,
    pub confidence: f64,
}

/// Open-vocabulary segmenter: image plus text label in, zero or more scored
/// masks out.
pub trait SegmentationBackend: Send + Sync {
    fn model_id(&self) -> &str;

    fn candidates(&self, image: &RgbImage, label: &str) -> Result<Vec<MaskCandidate>, BackendError>;
}

#[derive(Debug, thiserror::Error)]
pub enum SegmentError {
    #[error("entity label is empty")]
    EmptyLabel,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Union of all candidates at or above `confidence_threshold`.
///
/// When nothing qualifies the result is an all-zero mask with
/// `found == false`.
pub fn segment(
    backend: &dyn SegmentationBackend,
    image: &RgbImage,
    entity_label: &str,
    confidence_threshold: f64,
) -> Result<Mask, SegmentError> {
    if entity_label.trim().is_empty() {
        return Err(SegmentError::EmptyLabel);
    }
    let (w, h) = image.dimensions();
    let candidates = backend.candidates(image, entity_label)?;

    let mut union = Bitmap::new(w, h);
    let mut best = 0.0f64;
    let mut any = false;
    for cand in &candidates {
        if !(0.0..=1.0).contains(&cand.confidence) {
            return Err(BackendError::Protocol(format!("confidence {} outside [0, 1]", cand.confidence)).into());
        }
        if (cand.bitmap.width(), cand.bitmap.height()) != (w, h) {
            return Err(BackendError::Protocol(format!(
                "candidate mask is {}x{}, image is {w}x{h}",
                cand.bitmap.width(),
                cand.bitmap.height()
            ))
            .into());
        }
        if cand.confidence >= confidence_threshold {
            union.union_with(&cand.bitmap).expect("dimensions checked above");
            best = best.max(cand.confidence);
            any = true;
        }
    }
    if !any || union.is_empty() {
        return Ok(Mask::not_found(w, h, entity_label));
    }
    Ok(Mask::new(union, best, entity_label))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image: String,
    pub label: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub candidates: Vec<WireCandidate>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireCandidate {
    pub mask: RleMask,
    pub confidence: f64,
}

/// Remote segmenter speaking
/// `POST {image, label} -> {candidates: [{mask, confidence}]}`.
#[derive(Debug)]
pub struct HttpSegmenter {
    client: HttpJsonClient,
    model_id: String,
}

impl HttpSegmenter {
    pub fn new(
        endpoint: url::Url,
        model_id: impl Into<String>,
        retry: RetryPolicy,
        max_in_flight: usize,
    ) -> Result<Self, BackendError> {
        Ok(HttpSegmenter { client: HttpJsonClient::new(endpoint, retry, max_in_flight)?, model_id: model_id.into() })
    }

    pub fn retry_count(&self) -> u64 {
        self.client.retry_count()
    }
}

impl SegmentationBackend for HttpSegmenter {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn candidates(&self, image: &RgbImage, label: &str) -> Result<Vec<MaskCandidate>, BackendError> {
        let req = SegmentRequest { image: encode_png_base64(image)?, label: label.to_owned() };
        let resp: SegmentResponse = self.client.post_json(&req)?;
        resp.candidates
            .into_iter()
            .map(|c| {
                let bitmap = c.mask.decode().map_err(|e| BackendError::Protocol(e.to_string()))?;
                Ok(MaskCandidate { bitmap, confidence: c.confidence })
            })
            .collect()
    }
}

/// Returns one full-frame candidate for every label. With it, localization
/// leaves images untouched, which is what model-free runs want.
#[derive(Debug, Default, Clone)]
pub struct FullFrameSegmenter;

impl SegmentationBackend for FullFrameSegmenter {
    fn model_id(&self) -> &str {
        "mock/full-frame"
    }

    fn candidates(&self, image: &RgbImage, _label: &str) -> Result<Vec<MaskCandidate>, BackendError> {
        let (w, h) = image.dimensions();
        Ok(vec![MaskCandidate { bitmap: Bitmap::filled(w, h), confidence: 1.0 }])
    }
}

/// Canned candidates per label; unknown labels yield nothing.
#[derive(Debug, Default, Clone)]
pub struct StaticSegmenter {
    pub by_label: HashMap<String, Vec<MaskCandidate>>,
}

impl StaticSegmenter {
    pub fn with(mut self, label: &str, candidates: Vec<MaskCandidate>) -> Self {
        self.by_label.insert(label.to_owned(), candidates);
        self
    }
}

impl SegmentationBackend for StaticSegmenter {
    fn model_id(&self) -> &str {
        "mock/static"
    }

    fn candidates(&self, _image: &RgbImage, label: &str) -> Result<Vec<MaskCandidate>, BackendError> {
        Ok(self.by_label.get(label).cloned().unwrap_or_default())
    }
}
