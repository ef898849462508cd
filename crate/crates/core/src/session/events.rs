//! Append-only session events.
//!
//! The engine never mutates a [`Session`] directly: it builds an event, applies
//! it with [`Session::apply`] and appends it to an [`EventSink`]. Replaying a
//! log through `apply` therefore reconstructs the session exactly.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::types::{EngineConfig, FieldState, FieldStatus, PatientProfile, Phase, Session, Turn};
use crate::report::Report;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    SessionStarted {
        session_id: String,
        profile: PatientProfile,
        template_id: String,
        template_version: String,
        field_ids: Vec<String>,
        config: EngineConfig,
        rng_seed: u64,
    },
    TurnAppended {
        turn: Turn,
    },
    FieldTransition {
        from: FieldStatus,
        state: FieldState,
    },
    PhaseChanged {
        from: Phase,
        to: Phase,
        at: DateTime<Utc>,
    },
    ReportEmitted {
        report: Report,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("log is empty")]
    Empty,
    #[error("first event must be session_started")]
    MissingStart,
    #[error("session already started")]
    DuplicateStart,
    #[error("turn index {got} is not after {last}")]
    TurnOrder { got: u64, last: u64 },
    #[error("turn references unknown field \"{0}\"")]
    UnknownField(String),
    #[error("illegal transition {from:?} -> {to:?} for \"{field}\"")]
    IllegalTransition { field: String, from: FieldStatus, to: FieldStatus },
    #[error("transition source {claimed:?} does not match current {actual:?} for \"{field}\"")]
    StaleTransition { field: String, claimed: FieldStatus, actual: FieldStatus },
    #[error("field state invariant violated for \"{0}\"")]
    InvalidState(String),
    #[error("illegal phase change {from:?} -> {to:?}")]
    IllegalPhase { from: Phase, to: Phase },
    #[error("report emitted outside the reporting phase")]
    UnexpectedReport,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl Session {
    pub fn from_started(event: &SessionEvent) -> Result<Session, ReplayError> {
        let SessionEvent::SessionStarted {
            session_id,
            profile,
            template_id,
            template_version,
            field_ids,
            config,
            rng_seed,
        } = event
        else {
            return Err(ReplayError::MissingStart);
        };
        let field_states: BTreeMap<_, _> = field_ids.iter().map(|id| (id.clone(), FieldState::new(id.clone()))).collect();
        Ok(Session {
            session_id: session_id.clone(),
            profile: profile.clone(),
            template_id: template_id.clone(),
            template_version: template_version.clone(),
            field_states,
            transcript: Vec::new(),
            phase: Phase::Active,
            config: config.clone(),
            rng_seed: *rng_seed,
            completed_at: None,
            report: None,
        })
    }

    /// Apply one event after checking it against the session invariants.
    pub fn apply(&mut self, event: &SessionEvent) -> Result<(), ReplayError> {
        match event {
            SessionEvent::SessionStarted { .. } => Err(ReplayError::DuplicateStart),
            SessionEvent::TurnAppended { turn } => {
                if let Some(last) = self.transcript.last() {
                    if turn.index <= last.index {
                        return Err(ReplayError::TurnOrder {
                            got: turn.index,
                            last: last.index,
                        });
                    }
                }
                if let Some(f) = turn.field_ids.iter().find(|f| !self.field_states.contains_key(*f)) {
                    return Err(ReplayError::UnknownField(f.clone()));
                }
                self.transcript.push(turn.clone());
                Ok(())
            }
            SessionEvent::FieldTransition { from, state } => {
                let id = &state.field_id;
                let current = self
                    .field_states
                    .get(id)
                    .ok_or_else(|| ReplayError::UnknownField(id.clone()))?;
                if current.status != *from {
                    return Err(ReplayError::StaleTransition {
                        field: id.clone(),
                        claimed: *from,
                        actual: current.status,
                    });
                }
                if !from.can_transition_to(state.status) {
                    return Err(ReplayError::IllegalTransition {
                        field: id.clone(),
                        from: *from,
                        to: state.status,
                    });
                }
                let ok = match state.status {
                    FieldStatus::Pending => state.attempts == 0,
                    FieldStatus::Verified | FieldStatus::Failed => state.value.is_some(),
                    _ => true,
                } && state.attempts <= self.config.max_attempts_per_field
                    && state.attempts >= current.attempts;
                if !ok {
                    return Err(ReplayError::InvalidState(id.clone()));
                }
                self.field_states.insert(id.clone(), state.clone());
                Ok(())
            }
            SessionEvent::PhaseChanged { from, to, at } => {
                let legal = *from == self.phase
                    && matches!((from, to), (Phase::Active, Phase::Reporting) | (Phase::Reporting, Phase::Done));
                if !legal {
                    return Err(ReplayError::IllegalPhase { from: *from, to: *to });
                }
                if *to == Phase::Reporting {
                    self.completed_at = Some(*at);
                }
                self.phase = *to;
                Ok(())
            }
            SessionEvent::ReportEmitted { report } => {
                if self.phase != Phase::Reporting {
                    return Err(ReplayError::UnexpectedReport);
                }
                self.report = Some(report.clone());
                Ok(())
            }
        }
    }

    pub fn replay<'a>(events: impl IntoIterator<Item = &'a SessionEvent>) -> Result<Session, ReplayError> {
        let mut it = events.into_iter();
        let first = it.next().ok_or(ReplayError::Empty)?;
        let mut session = Session::from_started(first)?;
        for ev in it {
            session.apply(ev)?;
        }
        Ok(session)
    }
}

pub trait EventSink: Send + Sync {
    fn append(&self, session_id: &str, event: &SessionEvent) -> io::Result<()>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl EventSink for NullSink {
    fn append(&self, _: &str, _: &SessionEvent) -> io::Result<()> {
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct MemorySink {
    events: Mutex<Vec<(String, SessionEvent)>>,
}

impl MemorySink {
    pub fn events_for(&self, session_id: &str) -> Vec<SessionEvent> {
        self.events
            .lock()
            .unwrap()
            .iter()
            .filter(|(s, _)| s == session_id)
            .map(|(_, e)| e.clone())
            .collect()
    }
}

impl EventSink for MemorySink {
    fn append(&self, session_id: &str, event: &SessionEvent) -> io::Result<()> {
        self.events.lock().unwrap().push((session_id.to_string(), event.clone()));
        Ok(())
    }
}

/// One NDJSON file per session under `{data_dir}/sessions/`.
#[derive(Debug)]
pub struct FileEventLog {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl FileEventLog {
    pub fn new(data_dir: impl AsRef<Path>) -> io::Result<Self> {
        let dir = data_dir.as_ref().join("sessions");
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    pub fn path_for(&self, session_id: &str) -> PathBuf {
        self.dir.join(format!("{session_id}.events.ndjson"))
    }
}

impl EventSink for FileEventLog {
    fn append(&self, session_id: &str, event: &SessionEvent) -> io::Result<()> {
        let mut line = serde_json::to_vec(event).map_err(io::Error::other)?;
        line.push(b'\n');
        let _g = self.write_lock.lock().unwrap();
        let mut f = OpenOptions::new().create(true).append(true).open(self.path_for(session_id))?;
        f.write_all(&line)?;
        f.flush()
    }
}

pub fn read_event_log(path: &Path) -> io::Result<Result<Vec<SessionEvent>, ReplayError>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(ev) => out.push(ev),
            Err(e) => {
                return Ok(Err(ReplayError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                }))
            }
        }
    }
    Ok(Ok(out))
}
