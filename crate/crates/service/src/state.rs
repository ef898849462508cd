use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use followup_core::clock::{Clock, SystemClock};
use followup_core::provider::{ProviderSet, ScriptEntry, ScriptedProvider};
use followup_core::report::{write_atomic, ReportStore};
use followup_core::session::{read_event_log, EngineConfig, FileEventLog, PatientProfile, Session, SessionEngine};
use followup_core::template::{parse_template, serialize_template, Template};
use followup_core::verification::{EntailmentScorer, LexicalScorer};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

const SERVICE_SCRIPT: &str = include_str!("../assets/service_script.json");

/// Script for a served scripted backend: template-driven questions, and a
/// report model that takes the patient's words as the extraction.
pub fn service_script() -> Vec<ScriptEntry> {
    serde_json::from_str(SERVICE_SCRIPT).expect("bundled service script parses")
}

pub fn scripted_providers() -> ProviderSet {
    ProviderSet::uniform(Arc::new(ScriptedProvider::new(service_script()).with_id("scripted")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Queued,
    Active,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FollowupTask {
    pub task_id: String,
    pub patient: PatientProfile,
    pub template_id: String,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub providers: ProviderSet,
    pub scorer: Arc<dyn EntailmentScorer>,
    pub engine: EngineConfig,
    pub clock: Arc<dyn Clock>,
    /// Required as `Authorization: Bearer <token>` on every route but /healthz.
    pub bearer_token: Option<String>,
    pub seed: u64,
}

impl ServiceConfig {
    pub fn scripted(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            providers: scripted_providers(),
            scorer: Arc::new(LexicalScorer),
            engine: EngineConfig::default(),
            clock: Arc::new(SystemClock),
            bearer_token: None,
            seed: 42,
        }
    }
}

pub struct SessionSlot {
    pub task_id: String,
    pub template: Arc<Template>,
    pub session: Arc<tokio::sync::Mutex<Session>>,
}

pub struct AppState {
    pub config: ServiceConfig,
    templates: RwLock<BTreeMap<String, Arc<Template>>>,
    pub(crate) tasks: Mutex<BTreeMap<String, FollowupTask>>,
    sessions: RwLock<HashMap<String, Arc<SessionSlot>>>,
    log: Arc<FileEventLog>,
    reports: ReportStore,
    next_id: AtomicU64,
}

fn load_json_dir<T: for<'de> Deserialize<'de>>(dir: &Path, suffix: &str) -> Vec<(PathBuf, T)> {
    let Ok(rd) = std::fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(suffix))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .filter_map(|p| match std::fs::read(&p).map(|b| serde_json::from_slice::<T>(&b)) {
            Ok(Ok(v)) => Some((p, v)),
            Ok(Err(e)) => {
                warn!(path = %p.display(), error = %e, "skipping unreadable file");
                None
            }
            Err(e) => {
                warn!(path = %p.display(), error = %e, "skipping unreadable file");
                None
            }
        })
        .collect()
}

impl AppState {
    /// Open the data directory and restore templates, tasks and sessions.
    pub fn open(config: ServiceConfig) -> std::io::Result<Arc<Self>> {
        std::fs::create_dir_all(&config.data_dir)?;
        let log = Arc::new(FileEventLog::new(&config.data_dir)?);
        let reports = ReportStore::new(&config.data_dir);
        let mut templates = BTreeMap::new();
        for t in [Template::demo(), Template::demo_mini()] {
            templates.insert(t.template_id.clone(), Arc::new(t));
        }
        if let Ok(rd) = std::fs::read_dir(config.data_dir.join("templates")) {
            let mut paths: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
            paths.sort();
            for p in paths {
                match std::fs::read(&p).map(|b| parse_template(&b)) {
                    Ok(Ok(t)) => {
                        templates.insert(t.template_id.clone(), Arc::new(t));
                    }
                    _ => warn!(path = %p.display(), "skipping invalid template file"),
                }
            }
        }
        let tasks: BTreeMap<String, FollowupTask> =
            load_json_dir::<FollowupTask>(&config.data_dir.join("tasks"), ".json")
                .into_iter()
                .map(|(_, t)| (t.task_id.clone(), t))
                .collect();
        let max_id = tasks
            .keys()
            .filter_map(|k| k.strip_prefix("task-").and_then(|n| n.parse::<u64>().ok()))
            .max()
            .unwrap_or(0);

        let mut sessions = HashMap::new();
        for task in tasks.values() {
            let Some(sid) = &task.session_id else { continue };
            let Some(template) = templates.get(&task.template_id).cloned() else {
                warn!(task = %task.task_id, "template missing, session not restored");
                continue;
            };
            match read_event_log(&log.path_for(sid)) {
                Ok(Ok(events)) => match Session::replay(&events) {
                    Ok(s) => {
                        sessions.insert(
                            sid.clone(),
                            Arc::new(SessionSlot {
                                task_id: task.task_id.clone(),
                                template,
                                session: Arc::new(tokio::sync::Mutex::new(s)),
                            }),
                        );
                    }
                    Err(e) => warn!(session = %sid, error = %e, "session log does not replay"),
                },
                Ok(Err(e)) => warn!(session = %sid, error = %e, "session log is corrupt"),
                Err(e) => warn!(session = %sid, error = %e, "session log unreadable"),
            }
        }
        info!(tasks = tasks.len(), sessions = sessions.len(), "state restored");
        Ok(Arc::new(Self {
            config,
            templates: RwLock::new(templates),
            tasks: Mutex::new(tasks),
            sessions: RwLock::new(sessions),
            log,
            reports,
            next_id: AtomicU64::new(max_id),
        }))
    }

    pub fn next_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::SeqCst) + 1
    }

    pub fn template(&self, id: &str) -> Option<Arc<Template>> {
        self.templates.read().unwrap().get(id).cloned()
    }

    pub fn templates(&self) -> Vec<Arc<Template>> {
        self.templates.read().unwrap().values().cloned().collect()
    }

    /// Add or replace a template. Running sessions keep the version they
    /// started with. Re-posting an id/version pair with different content
    /// is refused.
    pub fn put_template(&self, template: Template) -> Result<bool, String> {
        let mut map = self.templates.write().unwrap();
        if let Some(old) = map.get(&template.template_id) {
            if old.version == template.version {
                return if **old == template {
                    Ok(false)
                } else {
                    Err(format!(
                        "template {} version {} already exists with different content",
                        template.template_id, template.version
                    ))
                };
            }
        }
        let path = self.config.data_dir.join("templates").join(format!("{}.json", template.template_id));
        write_atomic(&path, &serialize_template(&template)).map_err(|e| e.to_string())?;
        map.insert(template.template_id.clone(), Arc::new(template));
        Ok(true)
    }

    pub fn save_task(&self, task: &FollowupTask) -> std::io::Result<()> {
        let path = self.config.data_dir.join("tasks").join(format!("{}.json", task.task_id));
        write_atomic(&path, &serde_json::to_vec_pretty(task).expect("task serializes"))
    }

    pub fn session(&self, id: &str) -> Option<Arc<SessionSlot>> {
        self.sessions.read().unwrap().get(id).cloned()
    }

    pub fn insert_session(&self, id: String, slot: SessionSlot) {
        self.sessions.write().unwrap().insert(id, Arc::new(slot));
    }

    pub fn engine(&self, template: Arc<Template>) -> SessionEngine {
        SessionEngine::new(template, self.config.providers.clone())
            .with_scorer(self.config.scorer.clone())
            .with_clock(self.config.clock.clone())
            .with_sink(self.log.clone())
            .with_report_store(self.reports.clone())
    }
}
