use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HumanResponse, Study, StudyConfig, StudyError, StudyMode};
use crate::prompt::EvalItem;

/// One line of the response log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    StudyCreated { study: Study },
    Response { study_id: String, response: HumanResponse },
    AnnotatorIssued { annotator_id: String },
}

/// Append-only JSONL log; every event is flushed and synced before the
/// mutation it records becomes visible.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    pub fn open(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        // Cut a torn tail so the next event starts on its own line.
        if let Ok(bytes) = std::fs::read(&path) {
            let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            if keep < bytes.len() {
                OpenOptions::new().write(true).open(&path)?.set_len(keep as u64)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(EventLog { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, event: &Event) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(event).map_err(std::io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()
    }

    /// Reads every complete event. A torn final line (crash mid-write) is
    /// dropped with a warning; corruption elsewhere is an error.
    pub fn read(path: &Path) -> std::io::Result<Vec<Event>> {
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
        let mut events = Vec::with_capacity(lines.len());
        let last = lines.len().saturating_sub(1);
        for (n, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(ev) => events.push(ev),
                Err(e) if n == last => {
                    tracing::warn!(path = %path.display(), "dropping torn final log line: {e}");
                }
                Err(e) => {
                    return Err(std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("{} line {}: {e}", path.display(), n + 1),
                    ))
                }
            }
        }
        Ok(events)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub study_id: String,
    pub mode: StudyMode,
    pub n_tasks: usize,
    pub n_responses: usize,
}

/// All studies served by one process, optionally backed by an event log.
#[derive(Debug, Default)]
pub struct StudyRegistry {
    studies: BTreeMap<String, Study>,
    annotators: BTreeSet<String>,
    log: Option<EventLog>,
}

impl StudyRegistry {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Replays `path` (if it exists) and keeps appending to it.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, StudyError> {
        let path = path.into();
        let mut reg = StudyRegistry::default();
        for event in EventLog::read(&path)? {
            reg.apply(event)?;
        }
        reg.log = Some(EventLog::open(path)?);
        Ok(reg)
    }

    fn apply(&mut self, event: Event) -> Result<(), StudyError> {
        match event {
            Event::StudyCreated { study } => {
                self.studies.insert(study.study_id.clone(), study);
            }
            Event::Response { study_id, response } => {
                self.studies.get_mut(&study_id).ok_or(StudyError::UnknownStudy(study_id))?.submit(response)?;
            }
            Event::AnnotatorIssued { annotator_id } => {
                self.annotators.insert(annotator_id);
            }
        }
        Ok(())
    }

    fn record(&mut self, event: &Event) -> Result<(), StudyError> {
        if let Some(log) = &mut self.log {
            log.append(event)?;
        }
        Ok(())
    }

    pub fn create_study(
        &mut self,
        items: &[EvalItem],
        mode: StudyMode,
        config: StudyConfig,
    ) -> Result<(String, Vec<String>), StudyError> {
        let study_id = self.next_study_id();
        let (study, warnings) = Study::create(study_id.clone(), items, mode, config)?;
        self.insert_study(study)?;
        Ok((study_id, warnings))
    }

    /// Id the next created study will get.
    pub fn next_study_id(&self) -> String {
        let mut n = self.studies.len() + 1;
        while self.studies.contains_key(&format!("study-{n}")) {
            n += 1;
        }
        format!("study-{n}")
    }

    /// Registers a prebuilt study, e.g. one with highlight boxes attached.
    pub fn insert_study(&mut self, study: Study) -> Result<(), StudyError> {
        let event = Event::StudyCreated { study };
        self.record(&event)?;
        self.apply(event)
    }

    pub fn study(&self, study_id: &str) -> Result<&Study, StudyError> {
        self.studies.get(study_id).ok_or_else(|| StudyError::UnknownStudy(study_id.to_owned()))
    }

    pub fn studies(&self) -> impl Iterator<Item = &Study> {
        self.studies.values()
    }

    pub fn summaries(&self) -> Vec<StudySummary> {
        self.studies
            .values()
            .map(|s| StudySummary {
                study_id: s.study_id.clone(),
                mode: s.mode,
                n_tasks: s.tasks.len(),
                n_responses: s.total_responses(),
            })
            .collect()
    }

    /// Validates, logs, then applies. Nothing is logged for a rejected
    /// response.
    pub fn submit(&mut self, study_id: &str, response: HumanResponse) -> Result<(), StudyError> {
        self.study(study_id)?.check(&response)?;
        let event = Event::Response { study_id: study_id.to_owned(), response };
        self.record(&event)?;
        self.apply(event)
    }

    pub fn issue_annotator(&mut self) -> Result<String, StudyError> {
        let annotator_id = loop {
            let candidate = format!("ann-{:032x}", rand::random::<u128>());
            if !self.annotators.contains(&candidate) {
                break candidate;
            }
        };
        let event = Event::AnnotatorIssued { annotator_id: annotator_id.clone() };
        self.record(&event)?;
        self.apply(event)?;
        Ok(annotator_id)
    }

    /// Path of the image behind a registered key; unregistered keys are
    /// never resolved.
    pub fn image_path(&self, key: &str) -> Option<&str> {
        self.studies.values().find_map(|s| s.images.get(key)).map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{Attribute, Entity, StructuredPrompt};
    use crate::study::{Answer, YesNo};

    fn items() -> Vec<EvalItem> {
        let p = StructuredPrompt::new(
            "s1",
            vec![
                Entity::new("shirt", vec![Attribute::pattern("striped").unwrap()]).unwrap(),
                Entity::new("skirt", vec![Attribute::pattern("floral").unwrap()]).unwrap(),
            ],
        );
        vec![EvalItem::new(p, "/img/a.png", "g")]
    }

    #[test]
    fn replay_reconstructs_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut reg = StudyRegistry::open(&path).unwrap();
        let (id, _) = reg.create_study(&items(), StudyMode::Localized, StudyConfig::default()).unwrap();
        let ann = reg.issue_annotator().unwrap();
        for (i, task) in reg.study(&id).unwrap().tasks.clone().iter().enumerate() {
            let answer = Answer::Choice(if i % 2 == 0 { YesNo::Yes } else { YesNo::No });
            reg.submit(&id, HumanResponse { task_id: task.task_id.clone(), annotator_id: ann.clone(), answer, timestamp: i as u64 })
                .unwrap();
        }
        // Rejected submissions leave no trace.
        let dup = HumanResponse {
            task_id: format!("{id}-t0"),
            annotator_id: ann.clone(),
            answer: Answer::Choice(YesNo::No),
            timestamp: 9,
        };
        assert!(matches!(reg.submit(&id, dup), Err(StudyError::Conflict { .. })));

        let before = reg.study(&id).unwrap().clone();
        let before_responses: Vec<_> = before.responses().cloned().collect();
        drop(reg);

        let replayed = StudyRegistry::open(&path).unwrap();
        let after = replayed.study(&id).unwrap();
        assert_eq!(after, &before);
        assert_eq!(after.responses().cloned().collect::<Vec<_>>(), before_responses);
        assert_eq!(after.total_responses(), 4);
        assert!(replayed.annotators.contains(&ann));
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        {
            let mut reg = StudyRegistry::open(&path).unwrap();
            reg.create_study(&items(), StudyMode::Likert, StudyConfig::default()).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"event\":\"response\",\"study_").unwrap();
        drop(f);
        let mut reg = StudyRegistry::open(&path).unwrap();
        assert_eq!(reg.summaries().len(), 1);
        reg.issue_annotator().unwrap();
        drop(reg);
        let reg = StudyRegistry::open(&path).unwrap();
        assert_eq!(reg.annotators.len(), 1);
    }

    #[test]
    fn image_keys_are_scoped_to_registered_refs() {
        let mut reg = StudyRegistry::in_memory();
        let (id, _) = reg.create_study(&items(), StudyMode::Likert, StudyConfig::default()).unwrap();
        let key = &reg.study(&id).unwrap().tasks[0].image_key;
        assert_eq!(reg.image_path(key), Some("/img/a.png"));
        assert_eq!(reg.image_path("../etc/passwd"), None);
    }
}
