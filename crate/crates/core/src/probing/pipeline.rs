use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_questions, score_question, AnswerRecord, ScoreError, VqaBackend};
use crate::localization::{
    localize, segment, GeometryError, LocalizeParams, LocalizedView, SegmentError, SegmentationBackend, Strategy,
};
use crate::prompt::{EvalItem, StructuredPrompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub strategy: Strategy,
    pub threshold: f64,
    pub localize: LocalizeParams,
    pub mask_confidence_threshold: f64,
    /// Upper bound on concurrently processed items and questions.
    pub parallelism: usize,
    /// When set, every localized view is written here as PNG plus sidecar.
    #[serde(skip)]
    pub save_views: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            strategy: Strategy::BlurCrop,
            threshold: 0.5,
            localize: LocalizeParams::default(),
            mask_confidence_threshold: 0.5,
            parallelism: 4,
            save_views: None,
        }
    }
}

/// Identifies which generated image is being scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemContext {
    pub source_id: String,
    pub generator_id: String,
}

impl ItemContext {
    pub fn new(source_id: impl Into<String>, generator_id: impl Into<String>) -> Self {
        ItemContext { source_id: source_id.into(), generator_id: generator_id.into() }
    }

    pub fn of(item: &EvalItem) -> Self {
        ItemContext::new(item.prompt.source_id(), item.generator_id.clone())
    }

    pub fn item_id(&self) -> String {
        format!("{}:{}", self.source_id, self.generator_id)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvaluateError {
    #[error("cannot read image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("segmenting `{entity}`: {source}")]
    Segment {
        entity: String,
        #[source]
        source: SegmentError,
    },
    #[error("localizing `{entity}`: {source}")]
    Geometry {
        entity: String,
        #[source]
        source: GeometryError,
    },
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("writing localized view: {0}")]
    Io(#[from] std::io::Error),
}

impl EvaluateError {
    /// True when the failure came from a segmentation or VQA backend.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            EvaluateError::Segment { source: SegmentError::Backend(_), .. }
                | EvaluateError::Score(ScoreError::Backend { .. })
        )
    }
}

pub fn load_image(path: &Path) -> Result<RgbImage, EvaluateError> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|source| EvaluateError::Image { path: path.to_owned(), source })
}

/// Scores one image against `description`.
///
/// Every entity is segmented and localized once; each question is asked
/// against the view of its subject entity. Records come back in question
/// order: reflection questions first, then leakage questions.
pub fn evaluate_image(
    description: &StructuredPrompt,
    image: &RgbImage,
    ctx: &ItemContext,
    seg: &dyn SegmentationBackend,
    vqa: &dyn VqaBackend,
    config: &EvalConfig,
) -> Result<Vec<AnswerRecord>, EvaluateError> {
    let views = description
        .entities()
        .iter()
        .map(|entity| {
            let class = entity.class_label();
            let mask = segment(seg, image, class, config.mask_confidence_threshold)
                .map_err(|source| EvaluateError::Segment { entity: class.to_owned(), source })?;
            localize(image, &mask, config.strategy, &config.localize)
                .map_err(|source| EvaluateError::Geometry { entity: class.to_owned(), source })
        })
        .collect::<Result<Vec<LocalizedView>, _>>()?;

    let item_id = ctx.item_id();
    if let Some(dir) = &config.save_views {
        for (i, (view, entity)) in views.iter().zip(description.entities()).enumerate() {
            let stem = format!("{}-{}-{i}-{}", ctx.source_id, ctx.generator_id, entity.class_label());
            view.save(dir, &sanitize(&stem))?;
        }
    }

    let questions = build_questions(description);
    questions
        .par_iter()
        .enumerate()
        .map(|(idx, q)| {
            let view = &views[q.subject];
            let mut record = score_question(vqa, view, q, config.threshold, ctx)?;
            record.question_index = idx;
            record.view_ref = format!("{item_id}#{}:{}", q.subject, q.entity_class);
            Ok(record)
        })
        .collect()
}

fn sanitize(stem: &str) -> String {
    stem.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Loads the item's image and scores it against its own prompt.
pub fn evaluate_item(
    item: &EvalItem,
    seg: &dyn SegmentationBackend,
    vqa: &dyn VqaBackend,
    config: &EvalConfig,
) -> Result<Vec<AnswerRecord>, EvaluateError> {
    let image = load_image(Path::new(&item.image_ref))?;
    evaluate_image(&item.prompt, &image, &ItemContext::of(item), seg, vqa, config)
}

/// Scores many items on a pool of `config.parallelism` threads. Results keep
/// the input order regardless of completion order.
pub fn evaluate_items(
    items: &[EvalItem],
    seg: &dyn SegmentationBackend,
    vqa: &dyn VqaBackend,
    config: &EvalConfig,
) -> Vec<Result<Vec<AnswerRecord>, EvaluateError>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().map(|item| evaluate_item(item, seg, vqa, config)).collect())
}
