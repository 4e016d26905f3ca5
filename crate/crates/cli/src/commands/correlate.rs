use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use lvqa_core::correlation::{correlate, CorrelationReport, ItemScores};
use lvqa_core::scoring::{read_score_csv, MetricKind};
use lvqa_core::study::ReferenceScores;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::{create, open};

/// Reads per-item scores for correlation. Accepted layouts:
/// - `.json`: human reference scores as served by the study service;
/// - CSV with a `tp` column: a `scores.csv` export (pooled per group);
/// - CSV with `item_id,score`: scalar scores (averaged per group).
pub fn read_item_scores(path: &Path, metric: MetricKind) -> Result<ItemScores> {
    let bad = |msg: String| CliError::validation(format!("{}: {msg}", path.display()));
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        let refs: ReferenceScores = serde_json::from_reader(open(path)?).map_err(|e| bad(e.to_string()))?;
        return Ok(refs.to_item_scores(metric));
    }
    let mut reader = csv::Reader::from_reader(open(path)?);
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().any(|h| h == "tp") {
        let rows = read_score_csv(open(path)?).map_err(|e| bad(e.to_string()))?;
        let mut counts = BTreeMap::new();
        for row in rows {
            let id = format!("{}:{}", row.source_id, row.generator_id);
            if counts.insert(id.clone(), row.counts()).is_some() {
                return Err(bad(format!("duplicate item `{id}`")));
            }
        }
        return Ok(ItemScores::Counts { counts, metric });
    }
    let (Some(id_col), Some(score_col)) =
        (headers.iter().position(|h| h == "item_id"), headers.iter().position(|h| h == "score"))
    else {
        return Err(bad("expected columns item_id,score or a score export with tp/fp/tn/fn".into()));
    };
    let mut scores = BTreeMap::new();
    for (n, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let id = record.get(id_col).unwrap_or_default().to_owned();
        let score: f64 = record
            .get(score_col)
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|_| bad(format!("row {}: score is not a number", n + 1)))?;
        if !score.is_finite() {
            return Err(bad(format!("row {}: score is not finite", n + 1)));
        }
        if scores.insert(id.clone(), score).is_some() {
            return Err(bad(format!("duplicate item `{id}`")));
        }
    }
    Ok(ItemScores::Scalar(scores))
}

/// Grouped rank correlation of two score files; the report is written to
/// `out` or stdout.
pub fn cmd_correlate(metric: &Path, human: &Path, cfg: &RunConfig, out: Option<&Path>) -> Result<CorrelationReport> {
    cfg.validate()?;
    let m = read_item_scores(metric, cfg.metric)?;
    let h = read_item_scores(human, cfg.metric)?;
    let result = correlate(&m, &h, cfg.n_groups, &cfg.seeds).map_err(|e| CliError::validation(e.to_string()))?;
    let report = CorrelationReport::from(&result);
    let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
    json.push(b'\n');
    match out {
        Some(path) => {
            let mut w = create(path)?;
            w.write_all(&json).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))?;
        }
        None => std::io::stdout().write_all(&json).map_err(|e| CliError::io("<stdout>", e))?,
    }
    Ok(report)
}
