use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use lvqa_core::probing::OracleVqa;
use lvqa_core::prompt::{parse_structured_annotation, EvalItem, EvalItemRecord};
use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, Result};

pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| CliError::io(path, e))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::io(path, e.into()))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

/// Annotation records from a JSON array or a JSONL file, each tagged with
/// its 1-based position.
pub fn read_annotation_values(path: &Path) -> Result<Vec<(usize, Value)>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |at: String, e: serde_json::Error| CliError::validation(format!("{}{at}: {e}", path.display()));
    if text.trim_start().starts_with('[') {
        let values: Vec<Value> = serde_json::from_str(&text).map_err(|e| bad(String::new(), e))?;
        return Ok(values.into_iter().enumerate().map(|(i, v)| (i + 1, v)).collect());
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map(|v| (i + 1, v)).map_err(|e| bad(format!(" line {}", i + 1), e)))
        .collect()
}

pub fn read_items(path: &Path) -> Result<Vec<EvalItem>> {
    let reader = BufReader::new(open(path)?);
    let mut items = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EvalItemRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::validation(format!("{} line {}: {e}", path.display(), n + 1)))?;
        items.push(EvalItem::from(record));
    }
    Ok(items)
}

pub fn write_items(path: &Path, items: &[EvalItem]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        let line = serde_json::to_string(&EvalItemRecord::from(item)).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Ground truth for the mock oracle. A record with a `generator_id`
/// describes that generator's image only; one without describes every image
/// of its source.
pub fn load_oracle(path: &Path) -> Result<OracleVqa> {
    let mut oracle = OracleVqa::new();
    for (pos, value) in read_annotation_values(path)? {
        let truth = parse_structured_annotation(&value)
            .map_err(|e| CliError::validation(format!("{} record {pos}: {e}", path.display())))?;
        let generator = value.get("generator_id").and_then(Value::as_str);
        oracle.insert(generator, truth);
    }
    if oracle.is_empty() {
        return Err(CliError::validation(format!("{}: no oracle annotations", path.display())));
    }
    Ok(oracle)
}
