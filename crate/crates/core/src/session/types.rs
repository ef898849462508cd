use std::collections::BTreeMap;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::report::Report;
use crate::verification::{RawExtraction, VerifiedValue};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub patient_id: String,
    pub bed_number: String,
    pub age: u32,
    pub sex: String,
    pub surgery_type: String,
    pub surgery_date: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl PatientProfile {
    pub fn validate(&self) -> Result<(), String> {
        if self.patient_id.trim().is_empty() {
            return Err("patient_id is empty".into());
        }
        if self.bed_number.trim().is_empty() {
            return Err("bed_number is empty".into());
        }
        Ok(())
    }

    /// One-line summary used in prompts.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{}-year-old {}, bed {}, {} on {}.",
            self.age, self.sex, self.bed_number, self.surgery_type, self.surgery_date
        );
        if let Some(n) = self.notes.as_deref().filter(|n| !n.trim().is_empty()) {
            s.push_str(" Notes: ");
            s.push_str(n.trim());
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Robot,
    Patient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    SpeechTranscript,
    Touch,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub index: u64,
    pub speaker: Speaker,
    pub text: String,
    pub modality: Modality,
    /// Fields this turn is about. With field tracking there is exactly one;
    /// an open conversation may touch several or none.
    pub field_ids: Vec<String>,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
}

impl Turn {
    pub fn concerns(&self, field_id: &str) -> bool {
        self.field_ids.iter().any(|f| f == field_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldStatus {
    Pending,
    InProgress,
    Answered,
    Verified,
    Failed,
}

impl FieldStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, FieldStatus::Verified | FieldStatus::Failed)
    }

    pub fn is_open(self) -> bool {
        matches!(self, FieldStatus::Pending | FieldStatus::InProgress)
    }

    /// pending→in_progress→{answered→verified, in_progress, failed}. Pending
    /// may also fail directly when a field is never asked (field limit).
    pub fn can_transition_to(self, next: FieldStatus) -> bool {
        use FieldStatus::*;
        matches!(
            (self, next),
            (Pending, InProgress)
                | (Pending, Failed)
                | (InProgress, InProgress)
                | (InProgress, Answered)
                | (InProgress, Failed)
                | (Answered, Verified)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldState {
    pub field_id: String,
    pub status: FieldStatus,
    pub attempts: u32,
    pub raw_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction: Option<RawExtraction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<VerifiedValue>,
}

impl FieldState {
    pub fn new(field_id: impl Into<String>) -> Self {
        Self {
            field_id: field_id.into(),
            status: FieldStatus::Pending,
            attempts: 0,
            raw_answers: Vec::new(),
            extraction: None,
            value: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Active,
    Reporting,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AskStyle {
    #[default]
    Concise,
    Empathetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub max_attempts_per_field: u32,
    pub ask_style: AskStyle,
    pub locale: String,
    pub provider_timeout_ms: u64,
    /// One field at a time. When off, all fields are handled in a single open
    /// conversation and extracted from the whole transcript afterwards.
    pub field_tracking: bool,
    /// Normalize extractions (entailment argmax, numeric parsing). When off,
    /// only literally valid extractions are accepted.
    pub verification: bool,
    /// With field tracking, reject an extraction that contradicts the
    /// patient's own latest answer for the field.
    pub corroborate: bool,
    /// Ask at most this many fields; the rest fail without being asked.
    pub field_limit: Option<usize>,
    /// Robot turn cap for the open conversation.
    pub open_turn_limit: u32,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_attempts_per_field: 3,
            ask_style: AskStyle::Concise,
            locale: "en".into(),
            provider_timeout_ms: 30_000,
            field_tracking: true,
            verification: true,
            corroborate: true,
            field_limit: None,
            open_turn_limit: 8,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_attempts_per_field < 1 {
            return Err("max_attempts_per_field must be at least 1".into());
        }
        if self.open_turn_limit < 1 {
            return Err("open_turn_limit must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub profile: PatientProfile,
    pub template_id: String,
    pub template_version: String,
    pub field_states: BTreeMap<String, FieldState>,
    pub transcript: Vec<Turn>,
    pub phase: Phase,
    pub config: EngineConfig,
    pub rng_seed: u64,
    /// Set when the last field became terminal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completed_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<Report>,
}

impl Session {
    pub fn state(&self, field_id: &str) -> Option<&FieldState> {
        self.field_states.get(field_id)
    }

    pub fn last_robot_turn(&self) -> Option<&Turn> {
        self.transcript.iter().rev().find(|t| t.speaker == Speaker::Robot)
    }

    pub fn next_turn_index(&self) -> u64 {
        self.transcript.last().map_or(0, |t| t.index + 1)
    }

    /// The field currently being asked, if any.
    pub fn current_field_id(&self) -> Option<&str> {
        self.field_states
            .values()
            .find(|s| s.status == FieldStatus::InProgress)
            .map(|s| s.field_id.as_str())
    }
}
