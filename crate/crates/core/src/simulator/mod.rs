//! Simulated follow-up sessions: synthetic cases, scripted patients, a noisy
//! stand-in for the report model, and the satisfaction judge.

mod dataset;
mod extractor;
mod judge;
mod patient;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use dataset::{generate_dataset, Dataset, FieldAnswer, PatientStyle, SimCase, PHRASE_BANK};
pub use extractor::{locate_evidence, named_option, simulate_extraction, NoiseModel, SimReportLlm, SIM_SUMMARY};
pub use judge::{judge_satisfaction, parse_judge_reply, JudgeParseError, ASPECTS};
pub use patient::{
    celsius_to_fahrenheit, is_non_answer, scripted_patient_reply, ProviderPatient, ScriptedPatient, FAHRENHEIT_RATE,
    GENERIC_REPLY, NON_ANSWER,
};

use crate::clock::StepClock;
use crate::metrics::text_f1;
use crate::provider::{ChatProvider, ProviderError, ProviderSet, ScriptEntry, ScriptedProvider};
use crate::report::{Report, ReportValue};
use crate::session::{EngineConfig, EngineError, Modality, Session, SessionEngine, StepOutcome, Turn};
use crate::template::{FieldKind, Template};
use crate::verification::{EntailmentScorer, LexicalScorer};

pub const NUMERIC_TOL: f64 = 0.05;
pub const TEXT_TOL: f64 = 0.5;

const SIM_SCRIPT: &str = include_str!("../../assets/scripts/sim_script.json");

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("case {case_id}: {source}")]
    Engine {
        case_id: String,
        #[source]
        source: EngineError,
    },
    #[error("case {0}: session did not finish")]
    NoProgress(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Stable 64-bit seed from a base seed, a tag and a counter.
pub fn derive_seed(base: u64, tag: &str, n: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    h.update([0]);
    h.update(n.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// The bundled question and judge script used by simulations.
pub fn bundled_script() -> Vec<ScriptEntry> {
    serde_json::from_str(SIM_SCRIPT).expect("bundled script parses")
}

/// Providers and scorer for simulated sessions. Scripted pieces are rebuilt
/// per case so script consumption never leaks between cases.
#[derive(Clone)]
pub struct SimStack {
    pub script: Vec<ScriptEntry>,
    pub noise: NoiseModel,
    pub scorer: Arc<dyn EntailmentScorer>,
    /// Replaces the scripted question model.
    pub question: Option<Arc<dyn ChatProvider>>,
    /// Replaces the simulated report model.
    pub report: Option<Arc<dyn ChatProvider>>,
    /// Plays the patient instead of the scripted patient.
    pub patient: Option<Arc<dyn ChatProvider>>,
    pub judge: bool,
}

impl SimStack {
    pub fn scripted() -> Self {
        Self {
            script: bundled_script(),
            noise: NoiseModel::default(),
            scorer: Arc::new(LexicalScorer),
            question: None,
            report: None,
            patient: None,
            judge: true,
        }
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Self {
        self.noise = noise;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub case_id: String,
    pub style: PatientStyle,
    pub coverage: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub satisfaction: Option<BTreeMap<String, u8>>,
    pub per_field_correct: BTreeMap<String, bool>,
    pub attempts: BTreeMap<String, u32>,
    /// Last raw extraction per field, before verification.
    pub extractions: BTreeMap<String, String>,
    pub report: Report,
    pub transcript: Vec<Turn>,
}

/// Fraction of required fields with at least one robot question about them.
pub fn coverage(session: &Session, template: &Template) -> f64 {
    let required: Vec<&str> = template.required_ids().collect();
    if required.is_empty() {
        return 1.0;
    }
    let covered = required
        .iter()
        .filter(|id| {
            session
                .transcript
                .iter()
                .any(|t| t.speaker == crate::session::Speaker::Robot && t.concerns(id))
        })
        .count();
    covered as f64 / required.len() as f64
}

fn entry_correct(kind: FieldKind, value: Option<&ReportValue>, truth: &FieldAnswer) -> bool {
    match (kind, value, truth) {
        (FieldKind::SingleChoice, Some(ReportValue::Text(p)), FieldAnswer::Text(t)) => p == t,
        (FieldKind::Numeric, Some(ReportValue::Number(p)), FieldAnswer::Number(t)) => (p - t).abs() <= NUMERIC_TOL,
        (FieldKind::FreeText, Some(ReportValue::Text(p)), FieldAnswer::Text(t)) => text_f1(p, t) >= TEXT_TOL,
        _ => false,
    }
}

enum Patient {
    Scripted(ScriptedPatient),
    Provider(ProviderPatient),
}

/// Run one case to completion.
pub fn run_case(
    case: &SimCase,
    template: &Arc<Template>,
    config: &EngineConfig,
    stack: &SimStack,
    seed: u64,
) -> Result<SimResult, SimError> {
    let engine_err = |source| SimError::Engine {
        case_id: case.case_id.clone(),
        source,
    };
    let scripted: Arc<dyn ChatProvider> = Arc::new(ScriptedProvider::new(stack.script.clone()).with_id("sim-script"));
    let providers = ProviderSet {
        question: stack.question.clone().unwrap_or_else(|| scripted.clone()),
        report: stack
            .report
            .clone()
            .unwrap_or_else(|| Arc::new(SimReportLlm::new(template.clone(), stack.noise))),
        judge: scripted,
    };
    let engine = SessionEngine::new(template.clone(), providers.clone())
        .with_scorer(stack.scorer.clone())
        .with_clock(Arc::new(StepClock::default()));
    let mut patient = match &stack.patient {
        Some(p) => Patient::Provider(ProviderPatient::new(case, template, p.clone())),
        None => Patient::Scripted(ScriptedPatient::new(case.clone(), template.clone())),
    };

    let (mut session, mut turn) = engine
        .start_session(case.case_id.clone(), case.profile.clone(), config.clone(), seed)
        .map_err(engine_err)?;
    let budget = template.fields.len() as u64 * config.max_attempts_per_field as u64 + config.open_turn_limit as u64;
    let mut finished = false;
    for _ in 0..=budget * 2 {
        let answer = match &mut patient {
            Patient::Scripted(p) => p.reply(&turn),
            Patient::Provider(p) => p.reply(&session.transcript),
        };
        match engine
            .submit_answer(&mut session, &answer, Modality::SpeechTranscript)
            .map_err(engine_err)?
        {
            StepOutcome::Reprompt(t) | StepOutcome::NextTurn { turn: t, .. } => turn = t,
            StepOutcome::SessionComplete { .. } => {
                finished = true;
                break;
            }
        }
    }
    if !finished {
        return Err(SimError::NoProgress(case.case_id.clone()));
    }
    let report = session.report.clone().ok_or_else(|| SimError::NoProgress(case.case_id.clone()))?;

    let per_field_correct = report
        .entries
        .iter()
        .filter_map(|e| {
            let truth = case.ground_truth.get(&e.field_id)?;
            Some((e.field_id.clone(), entry_correct(e.kind, e.value.as_ref(), truth)))
        })
        .collect();
    let attempts = session.field_states.iter().map(|(id, s)| (id.clone(), s.attempts)).collect();
    let extractions = session
        .field_states
        .iter()
        .filter_map(|(id, s)| s.extraction.as_ref().map(|x| (id.clone(), x.text.clone())))
        .collect();
    let satisfaction = if stack.judge {
        let aspects: Vec<String> = ASPECTS.iter().map(|a| a.to_string()).collect();
        judge_satisfaction(&session.transcript, providers.judge.as_ref(), &aspects)
    } else {
        None
    };
    Ok(SimResult {
        case_id: case.case_id.clone(),
        style: case.style,
        coverage: coverage(&session, template),
        satisfaction,
        per_field_correct,
        attempts,
        extractions,
        report,
        transcript: session.transcript,
    })
}

/// Run every case in parallel; results come back sorted by case id.
pub fn run_dataset(
    dataset: &Dataset,
    template: &Arc<Template>,
    config: &EngineConfig,
    stack: &SimStack,
    seed: u64,
) -> Result<Vec<SimResult>, SimError> {
    use rayon::prelude::*;
    dataset.validate(template)?;
    let mut results = dataset
        .cases
        .par_iter()
        .map(|c| run_case(c, template, config, stack, derive_seed(seed, &c.case_id, 0)))
        .collect::<Result<Vec<_>, _>>()?;
    results.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(results)
}

/// Mean coverage over results; 0 for an empty list.
pub fn mean_coverage(results: &[SimResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().map(|r| r.coverage).sum::<f64>() / results.len() as f64
}
