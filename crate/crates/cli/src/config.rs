use std::path::{Path, PathBuf};
use std::time::Duration;

use lvqa_core::correlation::{DEFAULT_GROUPS, DEFAULT_SEEDS};
use lvqa_core::localization::{LocalizeParams, Strategy};
use lvqa_core::probing::EvalConfig;
use lvqa_core::scoring::MetricKind;
use lvqa_core::RetryPolicy;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use url::Url;

use crate::error::{CliError, Result};

/// Effective settings of a run. Built from defaults, then the TOML config
/// file, then command-line flags (endpoint flags also read their env vars).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub threshold: f64,
    pub margin_fraction: f64,
    pub blur_radius_fraction: f64,
    pub mask_confidence_threshold: f64,
    /// `[height, width]` of localized views; source size when unset.
    pub target_size: Option<[u32; 2]>,
    pub seg_endpoint: Option<Url>,
    pub vqa_endpoint: Option<Url>,
    pub seg_model: String,
    pub vqa_model: String,
    /// Ground-truth annotations answered by the mock VQA oracle.
    pub mock_oracle: Option<PathBuf>,
    pub parallelism: usize,
    pub max_in_flight: usize,
    pub retry_attempts: u32,
    pub retry_initial_ms: u64,
    pub n_groups: usize,
    pub seeds: Vec<u64>,
    pub metric: MetricKind,
    #[serde(skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let eval = EvalConfig::default();
        RunConfig {
            strategy: eval.strategy,
            threshold: eval.threshold,
            margin_fraction: eval.localize.margin_fraction,
            blur_radius_fraction: eval.localize.blur_radius_fraction,
            mask_confidence_threshold: eval.mask_confidence_threshold,
            target_size: None,
            seg_endpoint: None,
            vqa_endpoint: None,
            seg_model: "remote/segmentation".into(),
            vqa_model: "remote/vqa".into(),
            mock_oracle: None,
            parallelism: eval.parallelism,
            max_in_flight: 8,
            retry_attempts: RetryPolicy::default().max_attempts,
            retry_initial_ms: RetryPolicy::default().initial_backoff.as_millis() as u64,
            n_groups: DEFAULT_GROUPS,
            seeds: DEFAULT_SEEDS.to_vec(),
            metric: MetricKind::F1,
            output_dir: None,
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("threshold", self.threshold),
            ("margin_fraction", self.margin_fraction),
            ("blur_radius_fraction", self.blur_radius_fraction),
            ("mask_confidence_threshold", self.mask_confidence_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(CliError::validation(format!("{name} must lie strictly between 0 and 1, got {v}")));
            }
        }
        if matches!(self.target_size, Some([0, _]) | Some([_, 0])) {
            return Err(CliError::validation("target_size entries must be positive"));
        }
        if self.parallelism == 0 || self.max_in_flight == 0 || self.retry_attempts == 0 {
            return Err(CliError::validation("parallelism, max_in_flight and retry_attempts must be positive"));
        }
        for url in [&self.seg_endpoint, &self.vqa_endpoint].into_iter().flatten() {
            if !matches!(url.scheme(), "http" | "https") {
                return Err(CliError::validation(format!("endpoint {url} must be http or https")));
            }
        }
        if self.n_groups < 2 {
            return Err(CliError::validation("n_groups must be at least 2"));
        }
        if self.seeds.is_empty() {
            return Err(CliError::validation("at least one seed is required"));
        }
        Ok(())
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            strategy: self.strategy,
            threshold: self.threshold,
            localize: LocalizeParams {
                margin_fraction: self.margin_fraction,
                blur_radius_fraction: self.blur_radius_fraction,
                target: self.target_size.map(|[h, w]| (h, w)),
            },
            mask_confidence_threshold: self.mask_confidence_threshold,
            parallelism: self.parallelism,
            save_views: None,
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.retry_attempts,
            initial_backoff: Duration::from_millis(self.retry_initial_ms),
            ..RetryPolicy::default()
        }
    }

    /// Hex SHA-256 of the serialized config. `output_dir` is excluded so
    /// reruns into another directory hash the same.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
