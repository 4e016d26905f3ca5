use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use lvqa_core::localization::{bounding_box, segment, BBox, HttpSegmenter};
use lvqa_core::probing::load_image;
use lvqa_core::study::{router, AppState, Study, StudyConfig, StudyMode, StudyRegistry, TaskPayload};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::read_items;

#[derive(Debug, Clone)]
pub struct StudyOptions {
    pub items: PathBuf,
    pub mode: StudyMode,
    pub host: String,
    pub port: u16,
    pub log: PathBuf,
    pub redundancy: usize,
    /// Attach the subject's bounding box to localized tasks (needs a
    /// segmentation endpoint).
    pub highlight: bool,
}

/// Opens (replaying) the response log and makes sure it holds a study over
/// the given items. A study with the same mode and tasks is reused, so a
/// restarted service continues where it stopped.
pub fn prepare_registry(opts: &StudyOptions, cfg: &RunConfig) -> Result<(StudyRegistry, String)> {
    if opts.redundancy == 0 {
        return Err(CliError::validation("redundancy must be at least 1"));
    }
    let items = read_items(&opts.items)?;
    let mut registry = StudyRegistry::open(&opts.log).map_err(|e| study_err(&opts.log, e))?;
    let config = StudyConfig { redundancy: opts.redundancy };

    let mut reuse = None;
    for existing in registry.studies() {
        let (mut candidate, _) = Study::create(existing.study_id.clone(), &items, opts.mode, config)
            .map_err(|e| CliError::validation(e.to_string()))?;
        if opts.highlight {
            attach_highlights(&mut candidate, &items, cfg)?;
        }
        if candidate.mode == existing.mode && candidate.tasks == existing.tasks {
            reuse = Some(existing.study_id.clone());
            break;
        }
    }
    if let Some(id) = reuse {
        tracing::info!(study = %id, "resuming study from the response log");
        return Ok((registry, id));
    }

    let id = registry.next_study_id();
    let (mut study, warnings) =
        Study::create(id.clone(), &items, opts.mode, config).map_err(|e| CliError::validation(e.to_string()))?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    if opts.highlight {
        attach_highlights(&mut study, &items, cfg)?;
    }
    registry.insert_study(study).map_err(|e| study_err(&opts.log, e))?;
    Ok((registry, id))
}

fn study_err(log: &Path, e: lvqa_core::study::StudyError) -> CliError {
    match e {
        lvqa_core::study::StudyError::Log(io) => CliError::io(log, io),
        other => CliError::validation(format!("{}: {other}", log.display())),
    }
}

fn attach_highlights(study: &mut Study, items: &[lvqa_core::EvalItem], cfg: &RunConfig) -> Result<()> {
    let Some(url) = &cfg.seg_endpoint else {
        return Err(CliError::Usage("--highlight needs --seg-endpoint".into()));
    };
    let seg = HttpSegmenter::new(url.clone(), cfg.seg_model.clone(), cfg.retry_policy(), cfg.max_in_flight)
        .map_err(|e| CliError::Backend(e.to_string()))?;
    let by_id: BTreeMap<String, &lvqa_core::EvalItem> = items.iter().map(|i| (i.item_id(), i)).collect();

    // One segmentation per (item, subject entity).
    let mut boxes: BTreeMap<(String, usize), Option<BBox>> = BTreeMap::new();
    let mut wanted = Vec::new();
    for task in &study.tasks {
        let TaskPayload::Localized { question, .. } = &task.payload else { continue };
        let key = (task.item_id.clone(), question.subject);
        if !boxes.contains_key(&key) {
            let item = by_id[&task.item_id];
            let image = load_image(Path::new(&item.image_ref))?;
            let mask = segment(&seg, &image, &question.entity_class, cfg.mask_confidence_threshold)
                .map_err(|e| CliError::Backend(e.to_string()))?;
            let bbox = if mask.is_empty() { None } else { bounding_box(&mask, cfg.margin_fraction).ok() };
            boxes.insert(key.clone(), bbox);
        }
        wanted.push((task.task_id.clone(), key));
    }
    for (task_id, key) in wanted {
        if let Some(bbox) = boxes[&key] {
            study.set_highlight(&task_id, bbox).map_err(|e| CliError::validation(e.to_string()))?;
        }
    }
    Ok(())
}

/// Serves the study API until Ctrl-C. The port is bound before the log is
/// touched, so a busy port changes nothing on disk. Prints
/// `listening on http://ADDR` once ready.
pub fn cmd_study(opts: &StudyOptions, cfg: &RunConfig) -> Result<()> {
    let addr = format!("{}:{}", opts.host, opts.port);
    let listener = std::net::TcpListener::bind(&addr).map_err(|e| CliError::io(&addr, e))?;
    listener.set_nonblocking(true).map_err(|e| CliError::io(&addr, e))?;
    let local = listener.local_addr().map_err(|e| CliError::io(&addr, e))?;
    let (registry, study_id) = prepare_registry(opts, cfg)?;

    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::io("<runtime>", e))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::from_std(listener).map_err(|e| CliError::io(&addr, e))?;
        println!("listening on http://{local}");
        println!("study {study_id}");
        std::io::stdout().flush().ok();
        axum::serve(listener, router(AppState::new(registry)))
            .with_graceful_shutdown(async {
                tokio::signal::ctrl_c().await.ok();
                tracing::info!("shutting down");
            })
            .await
            .map_err(|e| CliError::io(&addr, e))
    })
}
