//! Structured follow-up reports.
//!
//! A report has one entry per template field in `ordered_fields` order. The
//! report id is `{session_id}-{hash}` where the hash covers the report content,
//! so rebuilding a report for the same session yields the same id.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::provider::{build_summary_prompt, complete_or_degrade, ChatProvider};
use crate::session::{FieldStatus, PatientProfile, Phase, Session};
use crate::template::{FieldKind, Template};
use crate::verification::{format_number, missing_value, VerifiedValue, VerifyMethod, NOT_OBTAINED};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReportValue {
    Number(f64),
    Text(String),
}

impl ReportValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            ReportValue::Number(n) => Some(*n),
            ReportValue::Text(_) => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            ReportValue::Text(t) => Some(t),
            ReportValue::Number(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Verified,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportEntry {
    pub field_id: String,
    pub label: String,
    pub kind: FieldKind,
    pub value: Option<ReportValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    pub status: EntryStatus,
    pub confidence: f64,
    pub method: VerifyMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub report_id: String,
    pub title: String,
    pub session_id: String,
    pub patient: PatientProfile,
    pub template_id: String,
    pub template_version: String,
    pub generated_at: DateTime<Utc>,
    pub entries: Vec<ReportEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Structured,
    HumanReadable,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "structured" => Ok(ReportFormat::Structured),
            "human_readable" => Ok(ReportFormat::HumanReadable),
            other => Err(format!("unknown report format \"{other}\"")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("session {0} is not ready for a report: phase {1:?}")]
    NotTerminal(String, Phase),
    #[error("required field \"{0}\" is not terminal")]
    FieldOpen(String),
    #[error("session template {0} does not match {1}")]
    TemplateMismatch(String, String),
    #[error("malformed report document: {0}")]
    Malformed(String),
    #[error("report io: {0}")]
    Io(#[from] io::Error),
}

fn entry_value(v: &VerifiedValue) -> Option<ReportValue> {
    v.choice
        .clone()
        .map(ReportValue::Text)
        .or(v.number.map(ReportValue::Number))
        .or_else(|| v.text.clone().map(ReportValue::Text))
}

fn content_hash(report: &Report) -> String {
    let mut copy = report.clone();
    copy.report_id = String::new();
    let bytes = serde_json::to_vec(&copy).expect("report serializes");
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..6])
}

/// Entries for every template field, without the summary.
fn build_entries(session: &Session, template: &Template) -> Vec<ReportEntry> {
    template
        .ordered_fields()
        .into_iter()
        .map(|f| {
            let state = session.state(&f.id);
            let (status, value) = match state {
                Some(s) if s.status == FieldStatus::Verified => (EntryStatus::Verified, s.value.clone()),
                Some(s) => (EntryStatus::Failed, s.value.clone()),
                None => (EntryStatus::Failed, None),
            };
            let value = value.unwrap_or_else(|| missing_value(f));
            ReportEntry {
                field_id: f.id.clone(),
                label: f.label.clone(),
                kind: f.kind,
                value: entry_value(&value),
                unit: f.unit.clone(),
                status,
                confidence: value.confidence,
                method: value.method,
            }
        })
        .collect()
}

fn findings(entries: &[ReportEntry]) -> Vec<String> {
    entries
        .iter()
        .map(|e| format!("{}: {}", e.label, display_value(e)))
        .collect()
}

/// Build the report for a finished session. If the session already carries a
/// report it is returned unchanged.
pub fn build_report(
    session: &Session,
    template: &Template,
    summary_provider: Option<&dyn ChatProvider>,
) -> Result<Report, ReportError> {
    if let Some(r) = &session.report {
        return Ok(r.clone());
    }
    if session.phase == Phase::Active {
        return Err(ReportError::NotTerminal(session.session_id.clone(), session.phase));
    }
    if session.template_id != template.template_id {
        return Err(ReportError::TemplateMismatch(session.template_id.clone(), template.template_id.clone()));
    }
    for id in template.required_ids() {
        if !session.state(id).is_some_and(|s| s.status.is_terminal()) {
            return Err(ReportError::FieldOpen(id.to_string()));
        }
    }
    let entries = build_entries(session, template);
    let summary = summary_provider.and_then(|p| {
        let mut req = build_summary_prompt(&findings(&entries));
        req.seed = Some(session.rng_seed);
        let resp = complete_or_degrade(p, &req);
        let text = resp.text.trim();
        (!resp.degraded && !text.is_empty()).then(|| text.to_string())
    });
    let mut report = Report {
        report_id: String::new(),
        title: template.report_title.clone(),
        session_id: session.session_id.clone(),
        patient: session.profile.clone(),
        template_id: template.template_id.clone(),
        template_version: template.version.clone(),
        generated_at: session
            .completed_at
            .or_else(|| session.transcript.last().map(|t| t.timestamp))
            .unwrap_or_default(),
        entries,
        summary,
    };
    report.report_id = format!("{}-{}", session.session_id, content_hash(&report));
    Ok(report)
}

pub fn display_value(entry: &ReportEntry) -> String {
    match &entry.value {
        None => NOT_OBTAINED.to_string(),
        Some(ReportValue::Number(n)) => match &entry.unit {
            Some(u) => format!("{} {u}", format_number(*n)),
            None => format_number(*n),
        },
        Some(ReportValue::Text(t)) => t.clone(),
    }
}

fn render_human(report: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", report.title);
    let _ = writeln!(s, "{}", "=".repeat(report.title.chars().count().max(8)));
    let _ = writeln!(s, "Report ID: {}", report.report_id);
    let _ = writeln!(s, "Generated: {}", report.generated_at.to_rfc3339());
    let _ = writeln!(s, "Template: {} (version {})", report.template_id, report.template_version);
    let p = &report.patient;
    let _ = writeln!(s, "\nPATIENT INFORMATION");
    let _ = writeln!(s, "  Patient ID: {}", p.patient_id);
    let _ = writeln!(s, "  Bed: {}", p.bed_number);
    let _ = writeln!(s, "  Age / Sex: {} / {}", p.age, p.sex);
    let _ = writeln!(s, "  Surgery: {} ({})", p.surgery_type, p.surgery_date);
    if let Some(n) = &p.notes {
        let _ = writeln!(s, "  Notes: {n}");
    }
    let sections = [
        ("VITAL SIGNS", FieldKind::Numeric),
        ("COMPLICATIONS", FieldKind::SingleChoice),
        ("OTHER FINDINGS", FieldKind::FreeText),
    ];
    for (title, kind) in sections {
        let rows: Vec<_> = report.entries.iter().filter(|e| e.kind == kind).collect();
        if rows.is_empty() {
            continue;
        }
        let _ = writeln!(s, "\n{title}");
        for e in rows {
            let status = match e.status {
                EntryStatus::Verified => "verified",
                EntryStatus::Failed => "failed",
            };
            let _ = writeln!(s, "  {}: {} [{status}]", e.label, display_value(e));
        }
    }
    if let Some(sum) = &report.summary {
        let _ = writeln!(s, "\nSUMMARY\n  {sum}");
    }
    s
}

pub fn render_report(report: &Report, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Structured => {
            let mut v = serde_json::to_vec_pretty(report).expect("report serializes");
            v.push(b'\n');
            v
        }
        ReportFormat::HumanReadable => render_human(report).into_bytes(),
    }
}

pub fn parse_report(document: &[u8]) -> Result<Report, ReportError> {
    serde_json::from_slice(document).map_err(|e| ReportError::Malformed(e.to_string()))
}

/// Write `bytes` to `path` via a temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

/// Local report storage under `{data_dir}/reports/`.
#[derive(Debug, Clone)]
pub struct ReportStore {
    dir: PathBuf,
}

impl ReportStore {
    pub fn new(data_dir: impl AsRef<Path>) -> Self {
        Self {
            dir: data_dir.as_ref().join("reports"),
        }
    }

    pub fn structured_path(&self, report_id: &str) -> PathBuf {
        self.dir.join(format!("{report_id}.report"))
    }

    pub fn human_path(&self, report_id: &str) -> PathBuf {
        self.dir.join(format!("{report_id}.txt"))
    }

    pub fn save(&self, report: &Report) -> io::Result<()> {
        write_atomic(&self.structured_path(&report.report_id), &render_report(report, ReportFormat::Structured))?;
        write_atomic(&self.human_path(&report.report_id), &render_report(report, ReportFormat::HumanReadable))
    }

    pub fn load(&self, report_id: &str) -> Result<Report, ReportError> {
        parse_report(&std::fs::read(self.structured_path(report_id))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{NaiveDate, TimeZone};

    fn sample() -> Report {
        Report {
            report_id: "s1-abc".into(),
            title: "Postoperative Follow-up Report".into(),
            session_id: "s1".into(),
            patient: PatientProfile {
                patient_id: "p1".into(),
                bed_number: "7".into(),
                age: 62,
                sex: "male".into(),
                surgery_type: "appendectomy".into(),
                surgery_date: NaiveDate::from_ymd_opt(2026, 1, 1).unwrap(),
                notes: None,
            },
            template_id: "demo-mini-v1".into(),
            template_version: "1".into(),
            generated_at: Utc.with_ymd_and_hms(2026, 1, 2, 9, 0, 0).unwrap(),
            entries: vec![
                ReportEntry {
                    field_id: "headache".into(),
                    label: "headache".into(),
                    kind: FieldKind::SingleChoice,
                    value: Some(ReportValue::Text("Yes".into())),
                    unit: None,
                    status: EntryStatus::Verified,
                    confidence: 1.0,
                    method: VerifyMethod::ExactMatch,
                },
                ReportEntry {
                    field_id: "temperature".into(),
                    label: "body temperature".into(),
                    kind: FieldKind::Numeric,
                    value: None,
                    unit: Some("°C".into()),
                    status: EntryStatus::Failed,
                    confidence: 0.0,
                    method: VerifyMethod::MissingPolicy,
                },
            ],
            summary: None,
        }
    }

    #[test]
    fn structured_round_trip() {
        let r = sample();
        assert_eq!(parse_report(&render_report(&r, ReportFormat::Structured)).unwrap(), r);
    }

    #[test]
    fn human_layout() {
        let text = String::from_utf8(render_report(&sample(), ReportFormat::HumanReadable)).unwrap();
        assert_eq!(text.lines().next(), Some("Postoperative Follow-up Report"));
        assert!(text.contains("body temperature: not obtained [failed]"));
        assert!(text.contains("headache: Yes [verified]"));
        let vitals = text.find("VITAL SIGNS").unwrap();
        let comp = text.find("COMPLICATIONS").unwrap();
        assert!(text.find("PATIENT INFORMATION").unwrap() < vitals && vitals < comp);
    }

    #[test]
    fn store_writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let store = ReportStore::new(dir.path());
        let r = sample();
        store.save(&r).unwrap();
        assert!(store.human_path(&r.report_id).exists());
        assert_eq!(store.load(&r.report_id).unwrap(), r);
    }
}
