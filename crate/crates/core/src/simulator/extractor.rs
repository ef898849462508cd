use std::sync::Arc;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use super::patient::is_non_answer;
use crate::provider::{ChatProvider, ChatRequest, ChatResponse, ProviderError};
use crate::session::mentioned_fields;
use crate::template::{FieldKind, FieldSpec, Template};
use crate::text::{number_tokens, token_set, tokens};
use crate::verification::{fahrenheit_to_celsius, format_number, NOT_MENTIONED};

pub const SIM_SUMMARY: &str = "Follow-up completed. The findings are recorded item by item.";

/// How the simulated report model misbehaves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Probability an extraction is corrupted.
    pub corruption: f64,
    /// Probability an uncorrupted extraction is written in the requested
    /// format rather than as a free-form paraphrase.
    pub format_adherence: f64,
    pub numeric_delta_min: f64,
    pub numeric_delta_max: f64,
    /// Per-token drop probability inside a corrupted text extraction.
    pub text_dropout: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            corruption: 0.1,
            format_adherence: 0.2,
            numeric_delta_min: 0.5,
            numeric_delta_max: 2.0,
            text_dropout: 0.3,
        }
    }
}

impl NoiseModel {
    /// Always correct and always in format.
    pub fn exact() -> Self {
        Self {
            corruption: 0.0,
            format_adherence: 1.0,
            ..Self::default()
        }
    }
}

/// Option named in `text`, if exactly one is.
pub fn named_option<'f>(text: &str, field: &'f FieldSpec) -> Option<&'f str> {
    let words = token_set(text);
    let mut hits = field
        .options
        .iter()
        .filter(|o| {
            let t = token_set(o);
            !t.is_empty() && t.is_subset(&words)
        });
    match (hits.next(), hits.next()) {
        (Some(o), None) => Some(o.as_str()),
        _ => None,
    }
}

fn clause_for<'a>(text: &'a str, label: &str) -> Option<&'a str> {
    let parts: Vec<&str> = text.split("; ").collect();
    let about: Vec<&str> = parts.iter().filter_map(|p| p.strip_prefix("About ")).collect();
    if about.is_empty() {
        return Some(text);
    }
    about
        .into_iter()
        .find_map(|p| p.strip_prefix(label).and_then(|r| r.strip_prefix(", ")))
}

/// The patient's words about `field` in a rendered dialogue. With
/// `whole_transcript`, only answers to questions that name the field count.
pub fn locate_evidence(dialogue: &str, field: &FieldSpec, template: &Template, whole_transcript: bool) -> Option<String> {
    let mut last_robot = "";
    let mut found = None;
    for line in dialogue.lines() {
        if let Some(r) = line.strip_prefix("Robot: ") {
            last_robot = r;
        } else if let Some(p) = line.strip_prefix("Patient: ") {
            if whole_transcript && !mentioned_fields(last_robot, template).contains(&field.id) {
                continue;
            }
            if let Some(c) = clause_for(p, &field.label) {
                found = Some(c.trim().to_string());
            }
        }
    }
    found.filter(|e| !is_non_answer(e))
}

fn stated_celsius(evidence: &str, field: &FieldSpec) -> Option<f64> {
    let tok = number_tokens(evidence).into_iter().next()?;
    let fahrenheit = evidence[tok.end..].trim_start().starts_with("°F");
    if fahrenheit && field.unit.as_deref() == Some("°C") {
        Some((fahrenheit_to_celsius(tok.value) * 10.0).round() / 10.0)
    } else {
        Some(tok.value)
    }
}

fn canonical_text(evidence: &str) -> String {
    let e = evidence.trim();
    let e = e.strip_prefix("Just ").unwrap_or(e);
    let e = e.strip_suffix(", nothing else really.").unwrap_or(e);
    e.trim_end_matches('.').to_string()
}

/// One extraction from located evidence, with the noise model applied.
pub fn simulate_extraction(evidence: Option<&str>, field: &FieldSpec, noise: &NoiseModel, rng: &mut ChaCha8Rng) -> String {
    let Some(evidence) = evidence else {
        return NOT_MENTIONED.to_string();
    };
    let corrupt = rng.gen_bool(noise.corruption.clamp(0.0, 1.0));
    let in_format = rng.gen_bool(noise.format_adherence.clamp(0.0, 1.0));
    match field.kind {
        FieldKind::SingleChoice => {
            let Some(said) = named_option(evidence, field) else {
                return NOT_MENTIONED.to_string();
            };
            if corrupt {
                let others: Vec<&String> = field.options.iter().filter(|o| o.as_str() != said).collect();
                return match others.choose(rng) {
                    Some(o) => o.to_string(),
                    None => said.to_string(),
                };
            }
            if in_format {
                said.to_string()
            } else {
                format!("Patient reports: {evidence}")
            }
        }
        FieldKind::Numeric => {
            let Some(c) = stated_celsius(evidence, field) else {
                return NOT_MENTIONED.to_string();
            };
            if corrupt {
                let delta = rng.gen_range(noise.numeric_delta_min..=noise.numeric_delta_max);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                return format_number(((c + sign * delta) * 10.0).round() / 10.0);
            }
            if in_format {
                format_number(c)
            } else {
                format!("Patient reports: {evidence}")
            }
        }
        FieldKind::FreeText => {
            let base = if in_format {
                canonical_text(evidence)
            } else {
                evidence.to_string()
            };
            if !corrupt {
                return base;
            }
            let words = tokens(&base);
            let kept: Vec<&String> = words.iter().filter(|_| !rng.gen_bool(noise.text_dropout)).collect();
            match kept.is_empty() {
                true => words.first().cloned().unwrap_or_default(),
                false => kept.into_iter().cloned().collect::<Vec<_>>().join(" "),
            }
        }
    }
}

/// Stand-in for the report model: reads the dialogue the way the scripted
/// patient writes it and answers with [`NoiseModel`] errors. Randomness comes
/// from the request seed, so results do not depend on call order.
pub struct SimReportLlm {
    template: Arc<Template>,
    noise: NoiseModel,
}

impl SimReportLlm {
    pub fn new(template: Arc<Template>, noise: NoiseModel) -> Self {
        Self { template, noise }
    }
}

impl ChatProvider for SimReportLlm {
    fn id(&self) -> &str {
        "sim-report"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let meta = |k: &str| request.metadata.get(k).map(String::as_str);
        let text = match meta("purpose") {
            Some("summary") => SIM_SUMMARY.to_string(),
            Some("extraction") => {
                let id = meta("field_id").unwrap_or_default();
                let field = self
                    .template
                    .field(id)
                    .ok_or_else(|| ProviderError::InvalidRequest(format!("unknown field \"{id}\"")))?;
                let dialogue = request.messages.last().map(|m| m.text.as_str()).unwrap_or_default();
                let whole = meta("segment_scope") == Some("transcript");
                let evidence = locate_evidence(dialogue, field, &self.template, whole);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(request.seed.unwrap_or(0), id, 0));
                simulate_extraction(evidence.as_deref(), field, &self.noise, &mut rng)
            }
            other => return Err(ProviderError::InvalidRequest(format!("unsupported purpose {other:?}"))),
        };
        Ok(ChatResponse {
            text,
            provider_id: self.id().to_string(),
            latency: Duration::ZERO,
            degraded: false,
        })
    }
}
