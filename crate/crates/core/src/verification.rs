//! Normalization of free-form extractions into template-valid values.
//!
//! Choice fields go through entailment scoring: every option is turned into a
//! hypothesis, scored against the extraction as premise, and the argmax wins
//! (ties go to the lowest option index). Numeric fields take the first number
//! token and check the range. Text fields are trimmed and capped.

use std::sync::OnceLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::provider::fill_placeholders;
use crate::template::{FieldKind, FieldSpec};
use crate::text::{normalize_whitespace, number_tokens, token_set};

pub const ENV_NLI_ENDPOINT: &str = "FOLLOWUP_NLI_ENDPOINT";
pub const DEFAULT_THRESHOLD: f64 = 0.2;
pub const DEFAULT_TEXT_CAP: usize = 500;
pub const NOT_OBTAINED: &str = "not obtained";
pub const NO_INFORMATION: &str = "No information obtained";
/// What the report model is told to answer when the dialogue lacks the item.
pub const NOT_MENTIONED: &str = "not mentioned";

fn is_blank(text: &str) -> bool {
    let t = text.trim();
    t.is_empty() || t.eq_ignore_ascii_case(NOT_MENTIONED)
}
const HYPOTHESIS_TEMPLATE: &str = include_str!("../assets/prompts/hypothesis.txt");
/// Max |extracted - stated| before a numeric extraction counts as contradicted.
pub const CORROBORATION_NUMERIC_TOL: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawExtraction {
    pub field_id: String,
    pub text: String,
    pub provider_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailmentScore {
    pub premise: String,
    pub hypothesis: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyMethod {
    NliArgmax,
    ExactMatch,
    NumericParse,
    Passthrough,
    MissingPolicy,
}

/// A template-valid field value. Exactly one of `choice`/`number`/`text` is
/// set, matching `kind`, except a numeric missing-policy value which is null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifiedValue {
    pub field_id: String,
    pub kind: FieldKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub number: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub confidence: f64,
    pub method: VerifyMethod,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl VerifiedValue {
    fn base(field: &FieldSpec, confidence: f64, method: VerifyMethod) -> Self {
        Self {
            field_id: field.id.clone(),
            kind: field.kind,
            choice: None,
            number: None,
            text: None,
            confidence,
            method,
            warnings: Vec::new(),
        }
    }

    pub fn choice(field: &FieldSpec, option: &str, confidence: f64, method: VerifyMethod) -> Self {
        Self {
            choice: Some(option.to_string()),
            ..Self::base(field, confidence, method)
        }
    }

    pub fn number(field: &FieldSpec, value: f64, method: VerifyMethod) -> Self {
        Self {
            number: Some(value),
            ..Self::base(field, 1.0, method)
        }
    }

    pub fn text(field: &FieldSpec, value: String, method: VerifyMethod) -> Self {
        Self {
            text: Some(value),
            ..Self::base(field, 1.0, method)
        }
    }

    /// Display form of the value; `None` for a null numeric.
    pub fn display(&self) -> Option<String> {
        self.choice
            .clone()
            .or_else(|| self.number.map(format_number))
            .or_else(|| self.text.clone())
    }

    /// Checks the kind-specific invariant against `field`.
    pub fn is_valid_for(&self, field: &FieldSpec) -> bool {
        if self.field_id != field.id || self.kind != field.kind || !(0.0..=1.0).contains(&self.confidence) {
            return false;
        }
        match field.kind {
            FieldKind::SingleChoice => {
                self.number.is_none()
                    && self.text.is_none()
                    && self.choice.as_ref().is_some_and(|c| field.options.contains(c))
            }
            FieldKind::Numeric => {
                self.choice.is_none()
                    && self.text.is_none()
                    && match self.number {
                        Some(n) => n.is_finite() && field.in_range(n),
                        None => self.method == VerifyMethod::MissingPolicy,
                    }
            }
            FieldKind::FreeText => {
                self.choice.is_none() && self.number.is_none() && self.text.as_ref().is_some_and(|t| !t.is_empty())
            }
        }
    }
}

pub fn format_number(n: f64) -> String {
    format!("{n}")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScorerError {
    #[error("premise and hypothesis must be non-empty")]
    EmptyInput,
    #[error("entailment scorer unavailable: {0}")]
    Unavailable(String),
    #[error("entailment scorer returned an invalid response: {0}")]
    BadResponse(String),
}

pub trait EntailmentScorer: Send + Sync {
    /// Entailment probability of `hypothesis` given `premise`, in [0, 1].
    fn score(&self, premise: &str, hypothesis: &str) -> Result<f64, ScorerError>;

    /// Hypothesis statement for one option of a choice field.
    fn hypothesis(&self, label: &str, option: &str) -> String {
        hypothesis_statement(label, option)
    }
}

pub fn hypothesis_statement(label: &str, option: &str) -> String {
    let vars = [("label".to_string(), label.to_string()), ("option".to_string(), option.to_string())]
        .into_iter()
        .collect();
    fill_placeholders(HYPOTHESIS_TEMPLATE.trim_end(), &vars)
}

/// Token-overlap scorer: |tokens(premise) ∩ tokens(hypothesis)| / |tokens(hypothesis)|
/// over lowercased, punctuation-stripped token sets.
///
/// Its hypothesis is the bare option text: the shared words of a templated
/// hypothesis would give every option the same overlap.
#[derive(Debug, Default, Clone, Copy)]
pub struct LexicalScorer;

impl EntailmentScorer for LexicalScorer {
    fn score(&self, premise: &str, hypothesis: &str) -> Result<f64, ScorerError> {
        if premise.trim().is_empty() || hypothesis.trim().is_empty() {
            return Err(ScorerError::EmptyInput);
        }
        let h = token_set(hypothesis);
        if h.is_empty() {
            return Ok(0.0);
        }
        let p = token_set(premise);
        Ok(h.intersection(&p).count() as f64 / h.len() as f64)
    }

    fn hypothesis(&self, _label: &str, option: &str) -> String {
        option.to_string()
    }
}

#[derive(Debug, Serialize)]
struct NliRequest<'a> {
    premise: &'a str,
    hypothesis: &'a str,
}

#[derive(Debug, Deserialize)]
struct NliResponse {
    entailment: f64,
    #[allow(dead_code)]
    #[serde(default)]
    contradiction: f64,
    #[allow(dead_code)]
    #[serde(default)]
    neutral: f64,
}

/// Cross-encoder NLI model behind `POST {endpoint}/score`.
pub struct HttpNliScorer {
    endpoint: String,
    timeout: Duration,
    client: OnceLock<Result<reqwest::blocking::Client, String>>,
}

impl HttpNliScorer {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout,
            client: OnceLock::new(),
        }
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(ENV_NLI_ENDPOINT)
            .ok()
            .filter(|e| !e.trim().is_empty())
            .map(|e| Self::new(e, Duration::from_secs(10)))
    }
}

impl EntailmentScorer for HttpNliScorer {
    fn score(&self, premise: &str, hypothesis: &str) -> Result<f64, ScorerError> {
        if premise.trim().is_empty() || hypothesis.trim().is_empty() {
            return Err(ScorerError::EmptyInput);
        }
        let client = self
            .client
            .get_or_init(|| {
                reqwest::blocking::Client::builder()
                    .timeout(self.timeout)
                    .build()
                    .map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(|e| ScorerError::Unavailable(e.clone()))?;
        let url = format!("{}/score", self.endpoint.trim_end_matches('/'));
        let resp = client
            .post(url)
            .json(&NliRequest { premise, hypothesis })
            .send()
            .map_err(|e| ScorerError::Unavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(ScorerError::Unavailable(format!("status {}", resp.status())));
        }
        let body: NliResponse = resp.json().map_err(|e| ScorerError::BadResponse(e.to_string()))?;
        if !(0.0..=1.0).contains(&body.entailment) {
            return Err(ScorerError::BadResponse(format!("entailment {} out of [0,1]", body.entailment)));
        }
        Ok(body.entailment)
    }
}

pub fn score_entailment(
    premise: &str,
    hypothesis: &str,
    scorer: &dyn EntailmentScorer,
) -> Result<EntailmentScore, ScorerError> {
    let score = scorer.score(premise, hypothesis)?;
    Ok(EntailmentScore {
        premise: premise.to_string(),
        hypothesis: hypothesis.to_string(),
        score: score.clamp(0.0, 1.0),
    })
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerificationFailure {
    #[error("extraction is empty")]
    Empty,
    #[error("no option reached the acceptance threshold (best {best:.3})")]
    BelowThreshold { best: f64 },
    #[error("no number found")]
    NoNumber,
    #[error("{value} is outside the valid range")]
    OutOfRange { value: f64 },
    #[error("not a literally valid value")]
    NotLiteral,
    #[error("{0}")]
    Scorer(ScorerError),
    #[error("extraction contradicts the patient's answer")]
    Contradicted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifierConfig {
    pub threshold: f64,
    pub text_cap: usize,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            text_cap: DEFAULT_TEXT_CAP,
        }
    }
}

/// Index and value of the largest score; the first index wins ties.
pub fn select_option(scores: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best
}

fn exact_option<'a>(text: &str, field: &'a FieldSpec) -> Option<&'a String> {
    let t = text.trim();
    field.options.iter().find(|o| o.trim().eq_ignore_ascii_case(t))
}

/// Scores of every option against `premise`, in option order.
pub fn option_scores(premise: &str, field: &FieldSpec, scorer: &dyn EntailmentScorer) -> Result<Vec<f64>, ScorerError> {
    field
        .options
        .iter()
        .map(|o| score_entailment(premise, &scorer.hypothesis(&field.label, o), scorer).map(|s| s.score))
        .collect()
}

pub fn verify_choice(
    raw: &RawExtraction,
    field: &FieldSpec,
    scorer: &dyn EntailmentScorer,
    config: &VerifierConfig,
) -> Result<VerifiedValue, VerificationFailure> {
    debug_assert_eq!(field.kind, FieldKind::SingleChoice);
    if is_blank(&raw.text) {
        return Err(VerificationFailure::Empty);
    }
    if let Some(o) = exact_option(&raw.text, field) {
        return Ok(VerifiedValue::choice(field, o, 1.0, VerifyMethod::ExactMatch));
    }
    let scores = option_scores(&raw.text, field, scorer).map_err(VerificationFailure::Scorer)?;
    let (idx, best) = select_option(&scores).expect("choice field has options");
    if best < config.threshold {
        return Err(VerificationFailure::BelowThreshold { best });
    }
    Ok(VerifiedValue::choice(field, &field.options[idx], best, VerifyMethod::NliArgmax))
}

fn is_celsius(unit: &str) -> bool {
    matches!(unit.trim().to_ascii_lowercase().as_str(), "°c" | "c" | "celsius" | "degc" | "deg c")
}

/// True when the text right after a number names Fahrenheit.
fn names_fahrenheit(after: &str) -> bool {
    let a = after.trim_start().to_lowercase();
    let a = a.strip_prefix("degrees").map(str::trim_start).unwrap_or(&a);
    if a.starts_with("fahrenheit") || a.starts_with("°f") || a.starts_with("° f") {
        return true;
    }
    a.strip_prefix('f').is_some_and(|rest| !rest.starts_with(|c: char| c.is_alphanumeric()))
}

pub fn fahrenheit_to_celsius(f: f64) -> f64 {
    ((f - 32.0) * 5.0 / 9.0 * 100.0).round() / 100.0
}

pub fn verify_numeric(raw: &RawExtraction, field: &FieldSpec) -> Result<VerifiedValue, VerificationFailure> {
    debug_assert_eq!(field.kind, FieldKind::Numeric);
    let numbers = number_tokens(&raw.text);
    let first = numbers.first().ok_or(VerificationFailure::NoNumber)?;
    let mut warnings = Vec::new();
    if numbers.len() > 1 {
        warnings.push(format!("{} numbers found, used the first", numbers.len()));
    }
    let mut value = first.value;
    if field.unit.as_deref().is_some_and(is_celsius) && names_fahrenheit(&raw.text[first.end..]) {
        value = fahrenheit_to_celsius(value);
        warnings.push(format!("converted {} °F to °C", first.value));
    }
    if !field.in_range(value) {
        return Err(VerificationFailure::OutOfRange { value });
    }
    let mut v = VerifiedValue::number(field, value, VerifyMethod::NumericParse);
    v.warnings = warnings;
    Ok(v)
}

pub fn verify_text(
    raw: &RawExtraction,
    field: &FieldSpec,
    config: &VerifierConfig,
) -> Result<VerifiedValue, VerificationFailure> {
    debug_assert_eq!(field.kind, FieldKind::FreeText);
    let norm = normalize_whitespace(&raw.text);
    if is_blank(&norm) {
        return Err(VerificationFailure::Empty);
    }
    let capped = if norm.chars().count() > config.text_cap {
        let mut s: String = norm.chars().take(config.text_cap).collect();
        s.push('…');
        s
    } else {
        norm
    };
    Ok(VerifiedValue::text(field, capped, VerifyMethod::Passthrough))
}

pub fn verify(
    raw: &RawExtraction,
    field: &FieldSpec,
    scorer: &dyn EntailmentScorer,
    config: &VerifierConfig,
) -> Result<VerifiedValue, VerificationFailure> {
    match field.kind {
        FieldKind::SingleChoice => verify_choice(raw, field, scorer, config),
        FieldKind::Numeric => verify_numeric(raw, field),
        FieldKind::FreeText => verify_text(raw, field, config),
    }
}

/// Acceptance without normalization: the extraction must already be a valid
/// value as written.
pub fn literal_value(raw: &RawExtraction, field: &FieldSpec) -> Result<VerifiedValue, VerificationFailure> {
    let t = raw.text.trim();
    if is_blank(t) {
        return Err(VerificationFailure::Empty);
    }
    match field.kind {
        FieldKind::SingleChoice => field
            .options
            .iter()
            .find(|o| o.as_str() == t)
            .map(|o| VerifiedValue::choice(field, o, 1.0, VerifyMethod::ExactMatch))
            .ok_or(VerificationFailure::NotLiteral),
        FieldKind::Numeric => match t.parse::<f64>() {
            Ok(v) if v.is_finite() && field.in_range(v) => Ok(VerifiedValue::number(field, v, VerifyMethod::NumericParse)),
            Ok(v) => Err(VerificationFailure::OutOfRange { value: v }),
            Err(_) => Err(VerificationFailure::NotLiteral),
        },
        FieldKind::FreeText => Ok(VerifiedValue::text(field, t.to_string(), VerifyMethod::Passthrough)),
    }
}

/// Value recorded when a field could not be verified: "Unclear" (or the last
/// option) for choice, null for numeric, a fixed note for text.
pub fn missing_value(field: &FieldSpec) -> VerifiedValue {
    let mut v = match field.kind {
        FieldKind::SingleChoice => {
            let opt = field
                .options
                .iter()
                .find(|o| o.as_str() == "Unclear")
                .or_else(|| field.options.last())
                .expect("choice field has options");
            VerifiedValue::choice(field, opt, 0.0, VerifyMethod::MissingPolicy)
        }
        FieldKind::Numeric => VerifiedValue::base(field, 0.0, VerifyMethod::MissingPolicy),
        FieldKind::FreeText => VerifiedValue::text(field, NO_INFORMATION.into(), VerifyMethod::MissingPolicy),
    };
    v.confidence = 0.0;
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corroboration {
    Consistent,
    Contradicted,
    Inconclusive,
}

/// Compare a verified value with what the patient said directly. Only a
/// confident, unambiguous reading of the evidence can contradict.
pub fn corroborate(
    value: &VerifiedValue,
    evidence: &str,
    field: &FieldSpec,
    scorer: &dyn EntailmentScorer,
    config: &VerifierConfig,
) -> Corroboration {
    if evidence.trim().is_empty() {
        return Corroboration::Inconclusive;
    }
    match field.kind {
        FieldKind::SingleChoice => {
            let Some(chosen) = value.choice.as_deref() else {
                return Corroboration::Inconclusive;
            };
            let implied = match exact_option(evidence, field) {
                Some(o) => o.as_str(),
                None => {
                    let Ok(scores) = option_scores(evidence, field, scorer) else {
                        return Corroboration::Inconclusive;
                    };
                    let Some((idx, best)) = select_option(&scores) else {
                        return Corroboration::Inconclusive;
                    };
                    let tied = scores.iter().filter(|&&s| s == best).count() > 1;
                    if best < config.threshold || tied {
                        return Corroboration::Inconclusive;
                    }
                    field.options[idx].as_str()
                }
            };
            if implied == chosen {
                Corroboration::Consistent
            } else {
                Corroboration::Contradicted
            }
        }
        FieldKind::Numeric => {
            let Some(n) = value.number else {
                return Corroboration::Inconclusive;
            };
            let probe = RawExtraction {
                field_id: field.id.clone(),
                text: evidence.to_string(),
                provider_id: String::new(),
            };
            match verify_numeric(&probe, field) {
                Ok(stated) if (stated.number.unwrap() - n).abs() > CORROBORATION_NUMERIC_TOL => {
                    Corroboration::Contradicted
                }
                Ok(_) => Corroboration::Consistent,
                Err(_) => Corroboration::Inconclusive,
            }
        }
        FieldKind::FreeText => Corroboration::Inconclusive,
    }
}
