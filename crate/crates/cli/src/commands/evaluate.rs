use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use lvqa_core::probing::{evaluate_items, AnswerRow, VqaPromptTemplate};
use lvqa_core::prompt::EvalItem;
use lvqa_core::scoring::{write_score_csv, ConfusionCounts, Scope, ScoreReport, ScoreRow};
use serde::{Deserialize, Serialize};

use crate::backends::{Backends, RetryCounts};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::{create, read_items, write_json};

pub const ANSWERS: &str = "answers.jsonl";
pub const SCORES: &str = "scores.csv";
pub const GENERATORS: &str = "generators.csv";
pub const RUN: &str = "run.json";
pub const CURSOR: &str = "cursor.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cursor {
    /// Index of the first item without stored answers.
    pub next_item: usize,
    pub total_items: usize,
    pub failed_item: String,
    pub error: String,
    pub config_hash: String,
    pub retries: RetryCounts,
}

#[derive(Debug, Clone, Serialize)]
pub struct BackendInfo {
    pub segmentation: String,
    pub vqa: String,
    pub vqa_prompt_version: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub tool_version: &'static str,
    pub config: RunConfig,
    pub config_hash: String,
    pub backends: BackendInfo,
    pub retries: RetryCounts,
    pub n_items: usize,
    pub n_answers: usize,
    pub n_fallbacks: usize,
    pub summary: ScoreReport,
}

#[derive(Debug, Clone)]
pub struct EvaluateOutcome {
    pub per_image: Vec<ScoreRow>,
    pub per_generator: BTreeMap<String, ScoreReport>,
    pub summary: ScoreReport,
}

/// Runs the pipeline over `items_path` with backends built from `cfg`.
pub fn cmd_evaluate(items_path: &Path, cfg: &RunConfig, out: &Path, resume: bool) -> Result<EvaluateOutcome> {
    cfg.validate()?;
    let backends = Backends::from_config(cfg)?;
    evaluate_with(&read_items(items_path)?, cfg, &backends, out, resume, None)
}

/// Scores `items` and writes `answers.jsonl`, `scores.csv`,
/// `generators.csv` and `run.json` into `out`.
///
/// Items are processed in chunks; answers are appended and flushed per
/// chunk. When an item fails, answers for every earlier item stay on disk
/// and `cursor.json` records where to pick up; `resume` continues from it.
pub fn evaluate_with(
    items: &[EvalItem],
    cfg: &RunConfig,
    backends: &Backends,
    out: &Path,
    resume: bool,
    save_views: Option<PathBuf>,
) -> Result<EvaluateOutcome> {
    if items.is_empty() {
        return Err(CliError::validation("no items to evaluate"));
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let config_hash = cfg.hash();
    let answers_path = out.join(ANSWERS);
    let cursor_path = out.join(CURSOR);

    let start = if resume { resume_point(&cursor_path, &config_hash, items.len())? } else { 0 };
    let file = if start > 0 {
        OpenOptions::new().append(true).open(&answers_path)
    } else {
        File::create(&answers_path)
    }
    .map_err(|e| CliError::io(&answers_path, e))?;
    let mut answers = BufWriter::new(file);

    let mut eval_cfg = cfg.eval_config();
    eval_cfg.save_views = save_views;
    let chunk = cfg.parallelism.max(1) * 8;
    let mut next = start;
    while next < items.len() {
        let end = (next + chunk).min(items.len());
        for (offset, result) in evaluate_items(&items[next..end], backends.seg(), backends.vqa(), &eval_cfg)
            .into_iter()
            .enumerate()
        {
            match result {
                Ok(records) => {
                    for r in &records {
                        let line = serde_json::to_string(&AnswerRow::from(r)).expect("row serializes");
                        writeln!(answers, "{line}").map_err(|e| CliError::io(&answers_path, e))?;
                    }
                }
                Err(err) => {
                    answers.flush().map_err(|e| CliError::io(&answers_path, e))?;
                    let idx = next + offset;
                    let retries = backends.retries();
                    let cursor = Cursor {
                        next_item: idx,
                        total_items: items.len(),
                        failed_item: items[idx].item_id(),
                        error: err.to_string(),
                        config_hash: config_hash.clone(),
                        retries,
                    };
                    write_json(&cursor_path, &cursor)?;
                    let context = format!(
                        "item {} ({} of {}) failed after {} segmentation / {} VQA retries; answers for {idx} item(s) kept in {}, rerun with --resume",
                        cursor.failed_item,
                        idx + 1,
                        items.len(),
                        retries.segmentation,
                        retries.vqa,
                        out.display()
                    );
                    return Err(match CliError::from(err) {
                        CliError::Backend(m) => CliError::Backend(format!("{m}\n{context}")),
                        CliError::Validation(m) => CliError::Validation(format!("{m}\n{context}")),
                        other => {
                            eprintln!("{context}");
                            other
                        }
                    });
                }
            }
        }
        answers.flush().map_err(|e| CliError::io(&answers_path, e))?;
        next = end;
    }
    drop(answers);
    if cursor_path.exists() {
        std::fs::remove_file(&cursor_path).map_err(|e| CliError::io(&cursor_path, e))?;
    }

    let rows = read_answer_rows(&answers_path)?;
    let outcome = summarize(items, &rows);

    let mut w = create(&out.join(SCORES))?;
    write_score_csv(&mut w, &outcome.per_image).map_err(|e| CliError::validation(e.to_string()))?;
    w.flush().map_err(|e| CliError::io(out.join(SCORES), e))?;

    let gen_rows: Vec<ScoreRow> = outcome.per_generator.iter().map(|(g, r)| ScoreRow::new("*", g, r)).collect();
    let mut w = create(&out.join(GENERATORS))?;
    write_score_csv(&mut w, &gen_rows).map_err(|e| CliError::validation(e.to_string()))?;
    w.flush().map_err(|e| CliError::io(out.join(GENERATORS), e))?;

    let meta = RunMetadata {
        tool_version: env!("CARGO_PKG_VERSION"),
        config: cfg.clone(),
        config_hash,
        backends: BackendInfo {
            segmentation: backends.seg().model_id().to_owned(),
            vqa: backends.vqa().model_id().to_owned(),
            vqa_prompt_version: VqaPromptTemplate::builtin().version,
        },
        retries: backends.retries(),
        n_items: items.len(),
        n_answers: rows.len(),
        n_fallbacks: rows.iter().filter(|r| r.fallback_used).count(),
        summary: outcome.summary,
    };
    write_json(&out.join(RUN), &meta)?;
    Ok(outcome)
}

fn resume_point(cursor_path: &Path, config_hash: &str, n_items: usize) -> Result<usize> {
    let text = match std::fs::read_to_string(cursor_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            tracing::info!("no cursor in output directory; starting from the first item");
            return Ok(0);
        }
        Err(e) => return Err(CliError::io(cursor_path, e)),
    };
    let cursor: Cursor = serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("{}: {e}", cursor_path.display())))?;
    if cursor.config_hash != config_hash {
        return Err(CliError::validation("config differs from the interrupted run; cannot resume"));
    }
    if cursor.total_items != n_items || cursor.next_item > n_items {
        return Err(CliError::validation("item list differs from the interrupted run; cannot resume"));
    }
    Ok(cursor.next_item)
}

pub fn read_answer_rows(path: &Path) -> Result<Vec<AnswerRow>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| CliError::validation(format!("{} line {}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(rows)
}

/// Per-image counts in item order (images without questions get zero
/// counts), pooled per generator and over the run.
pub fn summarize(items: &[EvalItem], rows: &[AnswerRow]) -> EvaluateOutcome {
    let mut counts: HashMap<(&str, &str), ConfusionCounts> = HashMap::new();
    for r in rows {
        counts.entry((&r.source_id, &r.generator_id)).or_default().record(r.outcome);
    }
    let mut per_generator: BTreeMap<String, ScoreReport> = BTreeMap::new();
    let mut run = ConfusionCounts::default();
    let per_image = items
        .iter()
        .map(|item| {
            let c = counts.get(&(item.prompt.source_id(), item.generator_id.as_str())).copied().unwrap_or_default();
            run.merge(&c);
            let g = per_generator
                .entry(item.generator_id.clone())
                .or_insert_with(|| ScoreReport::from_counts(ConfusionCounts::default(), Scope::Group));
            let mut pooled = g.counts;
            pooled.merge(&c);
            *g = ScoreReport::from_counts(pooled, Scope::Group);
            ScoreRow::new(item.prompt.source_id(), &item.generator_id, &ScoreReport::from_counts(c, Scope::Image))
        })
        .collect();
    EvaluateOutcome { per_image, per_generator, summary: ScoreReport::from_counts(run, Scope::Run) }
}
