use std::path::Path;

use lvqa_core::probing::{load_image, ItemContext};
use lvqa_core::prompt::{swap_attributes, EvalItem};
use lvqa_core::scoring::{
    pair_baseline_scores, read_baseline_csv, score_image_under_description, swap_failure_rate, MetricKind, SwapPair,
};
use serde::{Deserialize, Serialize};

use crate::backends::Backends;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::{open, read_items, write_json};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub item_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    /// `pipeline` or the imported file name.
    pub scores_from: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricKind>,
    pub n_cases: usize,
    pub n_failures: usize,
    /// Percentage in `[0, 100]`.
    pub failure_rate: f64,
    /// Two-decimal rendering of `failure_rate`.
    pub failure_rate_display: String,
    pub pairs: Vec<SwapPair>,
    pub skipped: Vec<Skipped>,
}

/// Swap test from pipeline scores over `items_path`, or from an imported
/// baseline CSV (`source_id,generator_id,description_variant,score`).
pub fn cmd_swap_test(
    items_path: Option<&Path>,
    import: Option<&Path>,
    cfg: &RunConfig,
    out: Option<&Path>,
) -> Result<SwapReport> {
    let report = match (items_path, import) {
        (_, Some(csv)) => {
            let rows = read_baseline_csv(open(csv)?).map_err(|e| CliError::validation(format!("{}: {e}", csv.display())))?;
            let pairs = pair_baseline_scores(&rows).map_err(|e| CliError::validation(e.to_string()))?;
            let name = csv.file_name().map_or_else(|| csv.display().to_string(), |n| n.to_string_lossy().into_owned());
            build_report(name, None, pairs, Vec::new())?
        }
        (Some(items), None) => {
            cfg.validate()?;
            let backends = Backends::from_config(cfg)?;
            swap_test_with(&read_items(items)?, cfg, &backends)?
        }
        (None, None) => return Err(CliError::Usage("swap-test needs --items or --import".into())),
    };
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(report)
}

/// Scores every admissible item under its own description and under the
/// attribute-swapped one. Inadmissible items are listed as skipped.
pub fn swap_test_with(items: &[EvalItem], cfg: &RunConfig, backends: &Backends) -> Result<SwapReport> {
    let eval_cfg = cfg.eval_config();
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for item in items {
        let swapped = match swap_attributes(&item.prompt) {
            Ok(s) => s,
            Err(e) => {
                skipped.push(Skipped { item_id: item.item_id(), reason: e.to_string() });
                continue;
            }
        };
        let image = load_image(Path::new(&item.image_ref))?;
        let ctx = ItemContext::of(item);
        let score = |desc| {
            score_image_under_description(&image, &ctx, desc, backends.seg(), backends.vqa(), &eval_cfg, cfg.metric)
        };
        pairs.push(SwapPair {
            source_id: ctx.source_id.clone(),
            generator_id: ctx.generator_id.clone(),
            correct: score(&item.prompt)?,
            swapped: score(&swapped)?,
        });
    }
    build_report("pipeline".into(), Some(cfg.metric), pairs, skipped)
}

fn build_report(scores_from: String, metric: Option<MetricKind>, pairs: Vec<SwapPair>, skipped: Vec<Skipped>) -> Result<SwapReport> {
    let flat: Vec<(f64, f64)> = pairs.iter().map(|p| (p.correct, p.swapped)).collect();
    let result = swap_failure_rate(&flat).map_err(|_| CliError::validation("no admissible items to swap"))?;
    Ok(SwapReport {
        scores_from,
        metric,
        n_cases: result.n_cases,
        n_failures: result.n_failures,
        failure_rate: result.failure_rate,
        failure_rate_display: format!("{:.2}", result.failure_rate),
        pairs,
        skipped,
    })
}
