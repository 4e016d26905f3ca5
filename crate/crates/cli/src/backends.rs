use lvqa_core::localization::{FullFrameSegmenter, HttpSegmenter, SegmentationBackend};
use lvqa_core::probing::{HttpVqa, OracleVqa, VqaBackend};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::load_oracle;

pub enum Segmenter {
    Http(HttpSegmenter),
    FullFrame(FullFrameSegmenter),
}

pub enum Vqa {
    Http(HttpVqa),
    Oracle(OracleVqa),
}

pub struct Backends {
    pub seg: Segmenter,
    pub vqa: Vqa,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryCounts {
    pub segmentation: u64,
    pub vqa: u64,
}

impl Backends {
    /// A remote segmenter when an endpoint is configured, otherwise the
    /// full-frame mock (allowed only together with the mock oracle). The
    /// mock oracle takes precedence over a VQA endpoint.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let backend_err = |e: lvqa_core::BackendError| CliError::Backend(e.to_string());
        let vqa = match (&cfg.mock_oracle, &cfg.vqa_endpoint) {
            (Some(path), _) => Vqa::Oracle(load_oracle(path)?),
            (None, Some(url)) => Vqa::Http(
                HttpVqa::new(url.clone(), cfg.vqa_model.clone(), cfg.retry_policy(), cfg.max_in_flight)
                    .map_err(backend_err)?,
            ),
            (None, None) => {
                return Err(CliError::Usage("no VQA backend: pass --vqa-endpoint or --mock-oracle".into()))
            }
        };
        let seg = match (&cfg.seg_endpoint, &vqa) {
            (Some(url), _) => Segmenter::Http(
                HttpSegmenter::new(url.clone(), cfg.seg_model.clone(), cfg.retry_policy(), cfg.max_in_flight)
                    .map_err(backend_err)?,
            ),
            (None, Vqa::Oracle(_)) => {
                tracing::info!("no segmentation endpoint; using full-frame masks");
                Segmenter::FullFrame(FullFrameSegmenter)
            }
            (None, Vqa::Http(_)) => {
                return Err(CliError::Usage("no segmentation backend: pass --seg-endpoint".into()))
            }
        };
        Ok(Backends { seg, vqa })
    }

    pub fn seg(&self) -> &dyn SegmentationBackend {
        match &self.seg {
            Segmenter::Http(s) => s,
            Segmenter::FullFrame(s) => s,
        }
    }

    pub fn vqa(&self) -> &dyn VqaBackend {
        match &self.vqa {
            Vqa::Http(v) => v,
            Vqa::Oracle(v) => v,
        }
    }

    pub fn retries(&self) -> RetryCounts {
        RetryCounts {
            segmentation: match &self.seg {
                Segmenter::Http(s) => s.retry_count(),
                Segmenter::FullFrame(_) => 0,
            },
            vqa: match &self.vqa {
                Vqa::Http(v) => v.retry_count(),
                Vqa::Oracle(_) => 0,
            },
        }
    }
}
