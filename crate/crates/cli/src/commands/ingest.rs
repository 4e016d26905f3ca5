use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use lvqa_core::prompt::{parse_structured_annotation, validate_eval_item, EvalItem, StructuredPrompt};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io::{open, read_annotation_values, write_items, write_json};

#[derive(Debug, Deserialize)]
struct ManifestRow {
    source_id: String,
    generator_id: String,
    image_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub source_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator_id: Option<String>,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub admissible: usize,
    pub rejected: usize,
    pub rejections: Vec<Rejection>,
}

/// Joins annotations with the image manifest, validates every pair and
/// writes `items.jsonl` plus `validation.json` into `out`.
///
/// Relative image paths in the manifest resolve against the manifest's
/// directory. Returns the report; zero admissible items is an error, raised
/// after both files are written.
pub fn cmd_ingest(annotations: &Path, manifest: &Path, out: &Path) -> Result<IngestReport> {
    let mut rejections = Vec::new();
    let mut prompts: BTreeMap<String, StructuredPrompt> = BTreeMap::new();
    let mut duplicate_sources = BTreeSet::new();
    for (pos, value) in read_annotation_values(annotations)? {
        match parse_structured_annotation(&value) {
            Ok(p) if p.source_id().is_empty() => rejections.push(Rejection {
                source_id: format!("#{pos}"),
                generator_id: None,
                reasons: vec!["annotation has no source_id".into()],
            }),
            Ok(p) => {
                if prompts.insert(p.source_id().to_owned(), p.clone()).is_some() {
                    duplicate_sources.insert(p.source_id().to_owned());
                }
            }
            Err(e) => {
                let source_id = value.get("source_id").and_then(|v| v.as_str()).map_or(format!("#{pos}"), str::to_owned);
                rejections.push(Rejection { source_id, generator_id: None, reasons: vec![e.to_string()] });
            }
        }
    }

    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(manifest)?);
    let mut items = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| CliError::validation(format!("{} row {}: {e}", manifest.display(), n + 1)))?;
        let mut reasons = Vec::new();
        if !seen.insert((row.source_id.clone(), row.generator_id.clone())) {
            reasons.push("duplicate manifest row".to_owned());
        }
        let prompt = prompts.get(&row.source_id);
        match prompt {
            None => reasons.push("no annotation for this source_id".into()),
            Some(_) if duplicate_sources.contains(&row.source_id) => {
                reasons.push("source_id annotated more than once".into())
            }
            Some(p) => reasons.extend(validate_eval_item(p).violations.iter().map(ToString::to_string)),
        }
        let image = resolve(&base, &row.image_ref);
        if !image.is_file() {
            reasons.push(format!("image not found: {}", image.display()));
        }
        if reasons.is_empty() {
            items.push(EvalItem::new(prompt.expect("checked").clone(), image.to_string_lossy(), row.generator_id));
        } else {
            rejections.push(Rejection { source_id: row.source_id, generator_id: Some(row.generator_id), reasons });
        }
    }

    let report = IngestReport { admissible: items.len(), rejected: rejections.len(), rejections };
    write_items(&out.join("items.jsonl"), &items)?;
    write_json(&out.join("validation.json"), &report)?;
    for r in &report.rejections {
        let who = match &r.generator_id {
            Some(g) => format!("{}:{g}", r.source_id),
            None => r.source_id.clone(),
        };
        eprintln!("rejected {who}: {}", r.reasons.join("; "));
    }
    eprintln!("{} admissible, {} rejected", report.admissible, report.rejected);
    if items.is_empty() {
        return Err(CliError::validation("no admissible items"));
    }
    Ok(report)
}

fn resolve(base: &Path, image_ref: &str) -> PathBuf {
    let p = Path::new(image_ref);
    if p.is_absolute() {
        p.to_owned()
    } else {
        base.join(p)
    }
}
