//! Command implementations for the `lvqa` binary.

pub mod backends;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use lvqa_core::localization::Strategy;
use lvqa_core::scoring::MetricKind;
use lvqa_core::study::StudyMode;
use serde::Serialize;
use url::Url;

pub use commands::{
    cmd_correlate, cmd_evaluate, cmd_ingest, cmd_render, cmd_study, cmd_swap_test, evaluate_with, swap_test_with,
    StudyOptions,
};
pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "lvqa", version, about = "Localized VQA scoring of attribute confusion in generated images")]
pub struct Cli {
    /// TOML run configuration; flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Log more (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate annotations against an image manifest; writes items.jsonl and validation.json.
    Ingest {
        /// Annotation records (JSON array or JSONL).
        #[arg(long)]
        annotations: PathBuf,
        /// CSV with source_id,generator_id,image_ref.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Render prompts (and optionally their swapped negatives) as JSONL.
    Render {
        #[arg(long)]
        annotations: PathBuf,
        /// Also emit the attribute-swapped prompt.
        #[arg(long)]
        swapped: bool,
        /// Write prompts.jsonl here instead of stdout.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Score items; writes answers.jsonl, scores.csv, generators.csv and run.json.
    Evaluate {
        #[arg(long)]
        items: PathBuf,
        /// Output directory (falls back to output_dir from the config file).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Continue an interrupted run from its cursor.json.
        #[arg(long)]
        resume: bool,
        /// Also write every localized view (PNG + JSON sidecar) here.
        #[arg(long, value_name = "DIR")]
        save_views: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineFlags,
    },
    /// Compare scores under correct and attribute-swapped descriptions.
    SwapTest {
        #[arg(long, required_unless_present = "import")]
        items: Option<PathBuf>,
        /// Baseline scores CSV: source_id,generator_id,description_variant,score.
        #[arg(long, value_name = "CSV")]
        import: Option<PathBuf>,
        /// Write swap_test.json and config.json here instead of stdout.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineFlags,
    },
    /// Grouped Spearman/Kendall correlation between two score files.
    Correlate {
        /// Metric scores: scores.csv export or item_id,score CSV.
        #[arg(long)]
        metric_scores: PathBuf,
        /// Human scores: same layouts, or reference-scores JSON.
        #[arg(long)]
        human_scores: PathBuf,
        #[arg(long)]
        n_groups: Option<usize>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        metric: Option<MetricKind>,
        /// Write correlation.json and config.json here instead of stdout.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Serve the human-study API.
    Study {
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        mode: StudyMode,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Response log (default: responses.jsonl under --out or the working directory).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        redundancy: usize,
        /// Attach subject bounding boxes to localized tasks.
        #[arg(long)]
        highlight: bool,
        #[arg(long, env = "LVQA_SEG_ENDPOINT")]
        seg_endpoint: Option<Url>,
    },
}

#[derive(Debug, Default, Args)]
pub struct PipelineFlags {
    /// none, mask, blur, crop, mask_crop or blur_crop.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// Yes-probability above which an answer counts as positive.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Bounding-box margin as a fraction of the box size.
    #[arg(long)]
    pub margin: Option<f64>,
    /// Blur radius as a fraction of the shorter image side.
    #[arg(long)]
    pub blur_radius: Option<f64>,
    /// Minimum confidence for a mask candidate.
    #[arg(long)]
    pub mask_confidence: Option<f64>,
    /// Localized view size as HxW.
    #[arg(long, value_parser = parse_size)]
    pub target_size: Option<[u32; 2]>,
    #[arg(long, env = "LVQA_SEG_ENDPOINT")]
    pub seg_endpoint: Option<Url>,
    #[arg(long, env = "LVQA_VQA_ENDPOINT")]
    pub vqa_endpoint: Option<Url>,
    #[arg(long)]
    pub seg_model: Option<String>,
    #[arg(long)]
    pub vqa_model: Option<String>,
    /// Answer questions from these ground-truth annotations instead of a model.
    #[arg(long, value_name = "ANNOTATIONS")]
    pub mock_oracle: Option<PathBuf>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    #[arg(long)]
    pub metric: Option<MetricKind>,
}

impl PipelineFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$flag { cfg.$field = v.clone().into(); })*
            };
        }
        set!(
            strategy => strategy,
            threshold => threshold,
            margin => margin_fraction,
            blur_radius => blur_radius_fraction,
            mask_confidence => mask_confidence_threshold,
            target_size => target_size,
            seg_endpoint => seg_endpoint,
            vqa_endpoint => vqa_endpoint,
            seg_model => seg_model,
            vqa_model => vqa_model,
            mock_oracle => mock_oracle,
            parallelism => parallelism,
            max_in_flight => max_in_flight,
            metric => metric,
        );
    }
}

fn parse_size(s: &str) -> std::result::Result<[u32; 2], String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("`{v}`: {e}"));
    Ok([parse(h)?, parse(w)?])
}

#[derive(Serialize)]
struct EffectiveConfig<'a> {
    config: &'a RunConfig,
    config_hash: String,
}

fn write_effective_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    io::write_json(&dir.join("config.json"), &EffectiveConfig { config: cfg, config_hash: cfg.hash() })
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest { annotations, manifest, out } => {
            let report = cmd_ingest(&annotations, &manifest, &out)?;
            println!("{} items written to {}", report.admissible, out.join("items.jsonl").display());
        }
        Command::Render { annotations, swapped, out } => {
            let path = out.map(|d| d.join("prompts.jsonl"));
            cmd_render(&annotations, swapped, path.as_deref())?;
        }
        Command::Evaluate { items, out, resume, save_views, pipeline } => {
            pipeline.apply(&mut cfg);
            let out = out.or_else(|| cfg.output_dir.clone()).ok_or_else(|| {
                CliError::Usage("evaluate needs --out or output_dir in the config file".into())
            })?;
            cfg.validate()?;
            let backends = backends::Backends::from_config(&cfg)?;
            let items = io::read_items(&items)?;
            let outcome = evaluate_with(&items, &cfg, &backends, &out, resume, save_views)?;
            let fmt = |v: Option<f64>| v.map_or("undefined".to_owned(), |x| format!("{x:.4}"));
            println!(
                "{} images scored; precision {} recall {} f1 {}",
                outcome.per_image.len(),
                fmt(outcome.summary.precision),
                fmt(outcome.summary.recall),
                fmt(outcome.summary.f1)
            );
        }
        Command::SwapTest { items, import, out, pipeline } => {
            pipeline.apply(&mut cfg);
            let path = out.as_ref().map(|d| d.join("swap_test.json"));
            let report = cmd_swap_test(items.as_deref(), import.as_deref(), &cfg, path.as_deref())?;
            match &out {
                Some(dir) => {
                    write_effective_config(dir, &cfg)?;
                    println!("failure rate {}% over {} cases", report.failure_rate_display, report.n_cases);
                }
                None => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
            }
        }
        Command::Correlate { metric_scores, human_scores, n_groups, seeds, metric, out } => {
            if let Some(n) = n_groups {
                cfg.n_groups = n;
            }
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(m) = metric {
                cfg.metric = m;
            }
            let path = out.as_ref().map(|d| d.join("correlation.json"));
            cmd_correlate(&metric_scores, &human_scores, &cfg, path.as_deref())?;
            if let Some(dir) = &out {
                write_effective_config(dir, &cfg)?;
            }
        }
        Command::Study { items, mode, host, port, log, out, redundancy, highlight, seg_endpoint } => {
            if seg_endpoint.is_some() {
                cfg.seg_endpoint = seg_endpoint;
            }
            let log = log.unwrap_or_else(|| out.unwrap_or_default().join("responses.jsonl"));
            cmd_study(&StudyOptions { items, mode, host, port, log, redundancy, highlight }, &cfg)?;
        }
    }
    Ok(())
}
