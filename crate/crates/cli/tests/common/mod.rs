#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use lvqa_core::prompt::{parse_structured_annotation, swap_attributes};
use serde_json::{json, Value};
use tempfile::TempDir;

pub const GENERATORS: [&str; 5] = ["gen-a", "gen-b", "gen-c", "gen-d", "gen-e"];
const CLASSES: [&str; 8] = ["blazer", "pants", "shirt", "skirt", "coat", "dress", "scarf", "shoes"];
const PATTERNS: [&str; 7] = ["floral", "striped", "dotted", "plaid", "checked", "paisley", "zebra"];
const OTHERS: [&str; 4] = ["red", "long-sleeve", "wool", "gold"];

/// Admissible outfit `i`: two or three garments with distinct classes and
/// distinct patterns, some with an extra non-pattern attribute.
pub fn annotation(i: usize) -> Value {
    let n = 2 + i % 2;
    let garments: Vec<Value> = (0..n)
        .map(|k| {
            let mut attrs = vec![json!(PATTERNS[(i + k) % PATTERNS.len()])];
            if (i + k) % 3 == 0 {
                attrs.push(json!(OTHERS[(i / 3 + k) % OTHERS.len()]));
            }
            json!({ "class": CLASSES[(i + 2 * k) % CLASSES.len()], "attrs": attrs })
        })
        .collect();
    json!({ "source_id": format!("s{i:02}"), "garments": garments })
}

/// The same outfit with its patterns swapped, as the oracle truth for a
/// confused image of `generator`.
pub fn confused_annotation(i: usize, generator: Option<&str>) -> Value {
    let truth = parse_structured_annotation(&annotation(i)).unwrap();
    let mut value = swap_attributes(&truth).unwrap().to_annotation();
    if let Some(g) = generator {
        value["generator_id"] = json!(g);
    }
    value
}

pub struct Fixture {
    pub dir: TempDir,
    pub annotations: PathBuf,
    pub manifest: PathBuf,
}

impl Fixture {
    /// `n_sources` outfits, one small PNG per (source, generator).
    pub fn new(n_sources: usize, generators: &[&str]) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let annotations = dir.path().join("annotations.jsonl");
        let lines: Vec<String> = (0..n_sources).map(|i| annotation(i).to_string()).collect();
        std::fs::write(&annotations, lines.join("\n") + "\n").unwrap();

        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        let mut manifest = String::from("source_id,generator_id,image_ref\n");
        for i in 0..n_sources {
            for (g, gen) in generators.iter().enumerate() {
                let rel = format!("images/s{i:02}-{gen}.png");
                RgbImage::from_fn(12, 10, |x, y| Rgb([(i * 7 + x as usize) as u8, (g * 40 + y as usize) as u8, 90]))
                    .save(dir.path().join(&rel))
                    .unwrap();
                manifest.push_str(&format!("s{i:02},{gen},{rel}\n"));
            }
        }
        let manifest_path = dir.path().join("manifest.csv");
        std::fs::write(&manifest_path, manifest).unwrap();
        Fixture { dir, annotations, manifest: manifest_path }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// Runs `lvqa ingest` into `<dir>/ingest` and returns the items path.
    pub fn ingest(&self) -> PathBuf {
        let out = self.path("ingest");
        let o = lvqa(&[
            "ingest",
            "--annotations",
            s(&self.annotations),
            "--manifest",
            s(&self.manifest),
            "--out",
            s(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out.join("items.jsonl")
    }

    pub fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> PathBuf {
        let p = self.path(rel);
        std::fs::write(&p, contents).unwrap();
        p
    }
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn lvqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lvqa"))
        .args(args)
        .env_remove("LVQA_SEG_ENDPOINT")
        .env_remove("LVQA_VQA_ENDPOINT")
        .output()
        .unwrap()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}
