use std::sync::Arc;

use thiserror::Error;
use tracing::{debug, warn};

use super::events::{EventSink, NullSink, ReplayError, SessionEvent};
use super::types::{EngineConfig, FieldState, FieldStatus, Modality, PatientProfile, Phase, Session, Speaker, Turn};
use crate::clock::{Clock, SystemClock};
use crate::provider::prompts::END_MARKER;
use crate::provider::{
    build_extraction_prompt, build_open_question_prompt, build_question_prompt, complete_or_degrade, ProviderSet,
    QuestionStage,
};
use crate::report::{build_report, Report, ReportError, ReportStore};
use crate::template::{FieldSpec, Template};
use crate::text::tokens;
use crate::verification::{
    corroborate, literal_value, missing_value, verify, Corroboration, EntailmentScorer, LexicalScorer, RawExtraction,
    VerificationFailure, VerifiedValue, VerifierConfig,
};

const OPEN_FALLBACK: &str = "How have you been feeling since your operation?";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("session is not active (phase {0:?})")]
    NotActive(Phase),
    #[error("no field is in progress")]
    NoFieldInProgress,
    #[error("unknown field \"{0}\"")]
    UnknownField(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("session belongs to template {0}, engine runs {1}")]
    TemplateMismatch(String, String),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("event log write failed: {0}")]
    Persist(#[from] std::io::Error),
}

/// Result of one patient submission.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    /// Blank input; the last question is sent again and nothing changes.
    Reprompt(Turn),
    /// The robot asks again: a clarification, the next field, or the next
    /// open-conversation question. `finished_field` became terminal this step.
    NextTurn { turn: Turn, finished_field: Option<String> },
    SessionComplete { finished_field: Option<String>, report_id: String },
}

/// First field in priority order that is still pending or in progress.
pub fn next_field<'t>(session: &Session, template: &'t Template) -> Option<&'t FieldSpec> {
    template
        .ordered_fields()
        .into_iter()
        .find(|f| session.state(&f.id).is_some_and(|s| s.status.is_open()))
}

/// Turns tagged with `field_id`, in transcript order.
pub fn field_dialogue_segment(session: &Session, field_id: &str) -> Result<Vec<Turn>, EngineError> {
    if !session.field_states.contains_key(field_id) {
        return Err(EngineError::UnknownField(field_id.to_string()));
    }
    Ok(session.transcript.iter().filter(|t| t.concerns(field_id)).cloned().collect())
}

/// Fields whose label appears (as a token sequence) in `text`, in priority order.
pub fn mentioned_fields(text: &str, template: &Template) -> Vec<String> {
    let words = tokens(text);
    template
        .ordered_fields()
        .into_iter()
        .filter(|f| {
            let label = tokens(&f.label);
            !label.is_empty() && words.windows(label.len()).any(|w| w == label.as_slice())
        })
        .map(|f| f.id.clone())
        .collect()
}

/// Drives sessions for one template.
///
/// All mutation goes through events, so a session's log always replays to the
/// in-memory state. A `Session` must not be driven from two threads at once;
/// callers serialize access per session.
pub struct SessionEngine {
    template: Arc<Template>,
    providers: ProviderSet,
    scorer: Arc<dyn EntailmentScorer>,
    verifier: VerifierConfig,
    clock: Arc<dyn Clock>,
    sink: Arc<dyn EventSink>,
    reports: Option<ReportStore>,
}

impl SessionEngine {
    pub fn new(template: Arc<Template>, providers: ProviderSet) -> Self {
        Self {
            template,
            providers,
            scorer: Arc::new(LexicalScorer),
            verifier: VerifierConfig::default(),
            clock: Arc::new(SystemClock),
            sink: Arc::new(NullSink),
            reports: None,
        }
    }

    pub fn with_scorer(mut self, scorer: Arc<dyn EntailmentScorer>) -> Self {
        self.scorer = scorer;
        self
    }

    pub fn with_verifier(mut self, verifier: VerifierConfig) -> Self {
        self.verifier = verifier;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_sink(mut self, sink: Arc<dyn EventSink>) -> Self {
        self.sink = sink;
        self
    }

    pub fn with_report_store(mut self, store: ReportStore) -> Self {
        self.reports = Some(store);
        self
    }

    pub fn template(&self) -> &Template {
        &self.template
    }

    pub fn providers(&self) -> &ProviderSet {
        &self.providers
    }

    fn emit(&self, session: &mut Session, event: SessionEvent) -> Result<(), EngineError> {
        session.apply(&event)?;
        self.sink.append(&session.session_id, &event)?;
        Ok(())
    }

    fn transition(&self, session: &mut Session, state: FieldState) -> Result<(), EngineError> {
        let from = session
            .state(&state.field_id)
            .map(|s| s.status)
            .ok_or_else(|| EngineError::UnknownField(state.field_id.clone()))?;
        self.emit(session, SessionEvent::FieldTransition { from, state })
    }

    fn push_turn(
        &self,
        session: &mut Session,
        speaker: Speaker,
        text: String,
        modality: Modality,
        field_ids: Vec<String>,
        degraded: bool,
    ) -> Result<Turn, EngineError> {
        let turn = Turn {
            index: session.next_turn_index(),
            speaker,
            text,
            modality,
            field_ids,
            timestamp: self.clock.now(),
            degraded,
        };
        self.emit(session, SessionEvent::TurnAppended { turn: turn.clone() })?;
        Ok(turn)
    }

    fn field(&self, id: &str) -> Result<&FieldSpec, EngineError> {
        self.template.field(id).ok_or_else(|| EngineError::UnknownField(id.to_string()))
    }

    fn call_seed(session: &Session) -> u64 {
        session
            .rng_seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(session.next_turn_index())
    }

    pub fn start_session(
        &self,
        session_id: impl Into<String>,
        profile: PatientProfile,
        config: EngineConfig,
        rng_seed: u64,
    ) -> Result<(Session, Turn), EngineError> {
        profile.validate().map_err(EngineError::InvalidInput)?;
        config.validate().map_err(EngineError::InvalidInput)?;
        let start = SessionEvent::SessionStarted {
            session_id: session_id.into(),
            profile,
            template_id: self.template.template_id.clone(),
            template_version: self.template.version.clone(),
            field_ids: self.template.fields.iter().map(|f| f.id.clone()).collect(),
            config,
            rng_seed,
        };
        let mut session = Session::from_started(&start)?;
        self.sink.append(&session.session_id, &start)?;

        let turn = if session.config.field_tracking {
            if let Some(limit) = session.config.field_limit {
                for f in self.template.ordered_fields().into_iter().skip(limit) {
                    let mut st = session.state(&f.id).cloned().expect("field state exists");
                    st.status = FieldStatus::Failed;
                    st.value = Some(missing_value(f));
                    self.transition(&mut session, st)?;
                }
            }
            match next_field(&session, &self.template) {
                Some(first) => {
                    let id = first.id.clone();
                    self.begin_field(&mut session, &id)?;
                    self.ask(&mut session, &id, QuestionStage::Opening)?
                }
                None => return Err(EngineError::InvalidInput("field limit leaves nothing to ask".into())),
            }
        } else {
            for f in self.template.ordered_fields() {
                let mut st = session.state(&f.id).cloned().expect("field state exists");
                st.status = FieldStatus::InProgress;
                self.transition(&mut session, st)?;
            }
            self.open_question(&mut session)?
                .expect("the opening question always produces a turn")
        };
        Ok((session, turn))
    }

    fn check(&self, session: &Session) -> Result<(), EngineError> {
        if session.template_id != self.template.template_id {
            return Err(EngineError::TemplateMismatch(
                session.template_id.clone(),
                self.template.template_id.clone(),
            ));
        }
        if session.phase != Phase::Active {
            return Err(EngineError::NotActive(session.phase));
        }
        Ok(())
    }

    fn begin_field(&self, session: &mut Session, field_id: &str) -> Result<(), EngineError> {
        let mut st = session.state(field_id).cloned().expect("field state exists");
        st.status = FieldStatus::InProgress;
        self.transition(session, st)
    }

    fn ask(&self, session: &mut Session, field_id: &str, stage: QuestionStage) -> Result<Turn, EngineError> {
        let field = self.field(field_id)?.clone();
        let segment = field_dialogue_segment(session, field_id)?;
        let mut req = build_question_prompt(&session.profile, &field, &segment, session.config.ask_style, stage);
        req.seed = Some(Self::call_seed(session));
        let resp = complete_or_degrade(self.providers.question.as_ref(), &req);
        let (text, degraded) = if resp.text.trim().is_empty() {
            (req.fallback.clone(), true)
        } else {
            (resp.text.trim().to_string(), resp.degraded)
        };
        self.push_turn(session, Speaker::Robot, text, Modality::Text, vec![field.id.clone()], degraded)
    }

    /// Next open-conversation question; `None` when the conversation is over.
    fn open_question(&self, session: &mut Session) -> Result<Option<Turn>, EngineError> {
        let mut req =
            build_open_question_prompt(&session.profile, &self.template, &session.transcript, session.config.ask_style);
        req.seed = Some(Self::call_seed(session));
        let opening = session.transcript.is_empty();
        req.fallback = if opening { OPEN_FALLBACK.to_string() } else { String::new() };
        let resp = complete_or_degrade(self.providers.question.as_ref(), &req);
        let mut text = resp.text.trim().to_string();
        let mut degraded = resp.degraded;
        let ended = !opening && (text.contains(END_MARKER) || degraded);
        text = text.replace(END_MARKER, "").trim().to_string();
        if text.is_empty() && opening {
            text = OPEN_FALLBACK.to_string();
            degraded = true;
        }
        if text.is_empty() {
            return Ok(None);
        }
        let mentions = mentioned_fields(&text, &self.template);
        let turn = self.push_turn(session, Speaker::Robot, text, Modality::Text, mentions, degraded)?;
        Ok(if ended { None } else { Some(turn) })
    }

    fn extract(&self, session: &Session, field: &FieldSpec, segment: &[Turn], scope: &str) -> RawExtraction {
        let text = match build_extraction_prompt(field, segment) {
            Ok(req) => {
                let mut req = req.with_meta("segment_scope", scope);
                req.seed = Some(Self::call_seed(session));
                let resp = complete_or_degrade(self.providers.report.as_ref(), &req);
                return RawExtraction {
                    field_id: field.id.clone(),
                    text: resp.text,
                    provider_id: resp.provider_id,
                };
            }
            Err(_) => String::new(),
        };
        RawExtraction {
            field_id: field.id.clone(),
            text,
            provider_id: String::new(),
        }
    }

    fn check_value(
        &self,
        session: &Session,
        raw: &RawExtraction,
        field: &FieldSpec,
        evidence: Option<&str>,
    ) -> Result<VerifiedValue, VerificationFailure> {
        if !session.config.verification {
            return literal_value(raw, field);
        }
        let value = verify(raw, field, self.scorer.as_ref(), &self.verifier)?;
        if session.config.corroborate {
            if let Some(ev) = evidence {
                if corroborate(&value, ev, field, self.scorer.as_ref(), &self.verifier) == Corroboration::Contradicted {
                    return Err(VerificationFailure::Contradicted);
                }
            }
        }
        Ok(value)
    }

    pub fn submit_answer(
        &self,
        session: &mut Session,
        patient_text: &str,
        modality: Modality,
    ) -> Result<StepOutcome, EngineError> {
        self.check(session)?;
        if patient_text.trim().is_empty() {
            let last = session.last_robot_turn().cloned().ok_or(EngineError::NoFieldInProgress)?;
            return Ok(StepOutcome::Reprompt(last));
        }
        if session.config.field_tracking {
            self.submit_tracked(session, patient_text.trim(), modality)
        } else {
            self.submit_open(session, patient_text.trim(), modality)
        }
    }

    fn submit_tracked(&self, session: &mut Session, text: &str, modality: Modality) -> Result<StepOutcome, EngineError> {
        let field_id = next_field(session, &self.template)
            .filter(|f| session.state(&f.id).is_some_and(|s| s.status == FieldStatus::InProgress))
            .map(|f| f.id.clone())
            .ok_or(EngineError::NoFieldInProgress)?;
        let field = self.field(&field_id)?.clone();
        self.push_turn(session, Speaker::Patient, text.to_string(), modality, vec![field_id.clone()], false)?;

        let segment = field_dialogue_segment(session, &field_id)?;
        let raw = self.extract(session, &field, &segment, "field");
        let mut st = session.state(&field_id).cloned().expect("field state exists");
        st.attempts += 1;
        st.raw_answers.push(text.to_string());
        st.extraction = Some(raw.clone());

        match self.check_value(session, &raw, &field, Some(text)) {
            Ok(value) => {
                st.status = FieldStatus::Answered;
                self.transition(session, st.clone())?;
                st.status = FieldStatus::Verified;
                st.value = Some(value);
                self.transition(session, st)?;
                self.advance(session, field_id)
            }
            Err(reason) => {
                debug!(field = %field_id, attempt = st.attempts, %reason, "verification failed");
                if st.attempts >= session.config.max_attempts_per_field {
                    st.status = FieldStatus::Failed;
                    st.value = Some(missing_value(&field));
                    self.transition(session, st)?;
                    self.advance(session, field_id)
                } else {
                    self.transition(session, st)?;
                    let turn = self.ask(session, &field_id, QuestionStage::Clarify)?;
                    Ok(StepOutcome::NextTurn {
                        turn,
                        finished_field: None,
                    })
                }
            }
        }
    }

    fn advance(&self, session: &mut Session, finished: String) -> Result<StepOutcome, EngineError> {
        match next_field(session, &self.template).map(|f| f.id.clone()) {
            Some(next) => {
                self.begin_field(session, &next)?;
                let turn = self.ask(session, &next, QuestionStage::Next)?;
                Ok(StepOutcome::NextTurn {
                    turn,
                    finished_field: Some(finished),
                })
            }
            None => {
                let report = self.finish(session)?;
                Ok(StepOutcome::SessionComplete {
                    finished_field: Some(finished),
                    report_id: report.report_id,
                })
            }
        }
    }

    fn submit_open(&self, session: &mut Session, text: &str, modality: Modality) -> Result<StepOutcome, EngineError> {
        let tags = session.last_robot_turn().map(|t| t.field_ids.clone()).unwrap_or_default();
        self.push_turn(session, Speaker::Patient, text.to_string(), modality, tags, false)?;
        let robot_turns = session.transcript.iter().filter(|t| t.speaker == Speaker::Robot).count();
        if robot_turns < session.config.open_turn_limit as usize {
            if let Some(turn) = self.open_question(session)? {
                return Ok(StepOutcome::NextTurn {
                    turn,
                    finished_field: None,
                });
            }
        }
        // conversation over: extract every field from the whole transcript
        let transcript = session.transcript.clone();
        for field in self.template.ordered_fields() {
            let raw = self.extract(session, field, &transcript, "transcript");
            let mut st = session.state(&field.id).cloned().expect("field state exists");
            st.attempts = 1;
            st.extraction = Some(raw.clone());
            st.raw_answers = transcript
                .iter()
                .filter(|t| t.speaker == Speaker::Patient && t.concerns(&field.id))
                .map(|t| t.text.clone())
                .collect();
            match self.check_value(session, &raw, field, None) {
                Ok(value) => {
                    st.status = FieldStatus::Answered;
                    self.transition(session, st.clone())?;
                    st.status = FieldStatus::Verified;
                    st.value = Some(value);
                }
                Err(_) => {
                    st.status = FieldStatus::Failed;
                    st.value = Some(missing_value(field));
                }
            }
            self.transition(session, st)?;
        }
        let report = self.finish(session)?;
        Ok(StepOutcome::SessionComplete {
            finished_field: None,
            report_id: report.report_id,
        })
    }

    fn finish(&self, session: &mut Session) -> Result<Report, EngineError> {
        let at = self.clock.now();
        self.emit(
            session,
            SessionEvent::PhaseChanged {
                from: Phase::Active,
                to: Phase::Reporting,
                at,
            },
        )?;
        let report = build_report(session, &self.template, Some(self.providers.report.as_ref()))?;
        if let Some(store) = &self.reports {
            if let Err(e) = store.save(&report) {
                warn!(report = %report.report_id, error = %e, "report save failed");
                return Err(e.into());
            }
        }
        self.emit(session, SessionEvent::ReportEmitted { report: report.clone() })?;
        self.emit(
            session,
            SessionEvent::PhaseChanged {
                from: Phase::Reporting,
                to: Phase::Done,
                at,
            },
        )?;
        Ok(report)
    }

    /// Report for a finished session, rebuilt if it was not recorded.
    pub fn report(&self, session: &Session) -> Result<Report, EngineError> {
        Ok(build_report(session, &self.template, None)?)
    }
}
