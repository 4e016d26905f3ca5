use std::io::Write;
use std::path::Path;

use lvqa_core::prompt::{parse_structured_annotation, swap_attributes};
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::io::{create, read_annotation_values};

#[derive(Debug, Serialize)]
struct RenderedLine {
    source_id: String,
    prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    swapped_prompt: Option<String>,
}

/// Writes one JSONL line per annotation with its rendered prompt, for
/// feeding external generators. With `swapped`, admissible records also
/// carry their attribute-swapped text.
pub fn cmd_render(annotations: &Path, swapped: bool, out: Option<&Path>) -> Result<usize> {
    let mut lines = Vec::new();
    let mut failures = 0;
    for (pos, value) in read_annotation_values(annotations)? {
        match parse_structured_annotation(&value) {
            Ok(p) => {
                let swapped_prompt = if swapped {
                    match swap_attributes(&p) {
                        Ok(s) => Some(s.rendered_text().to_owned()),
                        Err(e) => {
                            eprintln!("record {pos} ({}): no swapped prompt: {e}", p.source_id());
                            None
                        }
                    }
                } else {
                    None
                };
                lines.push(RenderedLine {
                    source_id: p.source_id().to_owned(),
                    prompt: p.rendered_text().to_owned(),
                    swapped_prompt,
                });
            }
            Err(e) => {
                failures += 1;
                eprintln!("record {pos}: {e}");
            }
        }
    }
    if lines.is_empty() {
        return Err(CliError::validation(format!("{}: no renderable annotations", annotations.display())));
    }

    let mut buf = Vec::new();
    for line in &lines {
        serde_json::to_writer(&mut buf, line).expect("line serializes");
        buf.push(b'\n');
    }
    match out {
        Some(path) => {
            let mut w = create(path)?;
            w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))?;
        }
        None => std::io::stdout().write_all(&buf).map_err(|e| CliError::io("<stdout>", e))?,
    }
    if failures > 0 {
        eprintln!("{failures} record(s) skipped");
    }
    Ok(lines.len())
}
