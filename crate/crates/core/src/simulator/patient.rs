use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{FieldAnswer, PatientStyle, SimCase};
use super::derive_seed;
use crate::provider::{complete_or_degrade, ChatMessage, ChatProvider, ChatRequest, RoleTag};
use crate::session::{Speaker, Turn};
use crate::template::{FieldKind, FieldSpec, Template};
use crate::verification::format_number;

pub const NON_ANSWER: &str = "I'm not sure what you mean";
pub const GENERIC_REPLY: &str = "I'm feeling okay, thank you.";
/// Share of verbose Celsius answers given in Fahrenheit instead.
pub const FAHRENHEIT_RATE: f64 = 0.25;

/// Fixed lines the scripted patient uses when it does not answer.
pub fn is_non_answer(text: &str) -> bool {
    let t = text.trim();
    t == NON_ANSWER || t == GENERIC_REPLY
}

fn celsius_field(field: &FieldSpec) -> bool {
    field.unit.as_deref().is_some_and(|u| u.trim().eq_ignore_ascii_case("°c"))
}

pub fn celsius_to_fahrenheit(c: f64) -> f64 {
    ((c * 1.8 + 32.0) * 100.0).round() / 100.0
}

fn verbose_choice(option: &str, label: &str) -> String {
    match option.to_ascii_lowercase().as_str() {
        "yes" => format!("Yes, I have had some {label}."),
        "no" => format!("No, I haven't had any {label}."),
        "unclear" => "I can't really say, it's unclear to me.".to_string(),
        other => format!("I would say {other}."),
    }
}

/// Reply to the `ask`-th question (0-based) about `field`.
pub fn scripted_patient_reply(case: &SimCase, field: &FieldSpec, ask: u32) -> String {
    let Some(truth) = case.ground_truth.get(&field.id) else {
        return GENERIC_REPLY.to_string();
    };
    match case.style {
        PatientStyle::Direct => truth.render(),
        PatientStyle::Evasive if ask == 0 => NON_ANSWER.to_string(),
        PatientStyle::Verbose | PatientStyle::Evasive => verbose_reply(case, field, truth, ask),
    }
}

fn verbose_reply(case: &SimCase, field: &FieldSpec, truth: &FieldAnswer, ask: u32) -> String {
    match (field.kind, truth) {
        (FieldKind::SingleChoice, FieldAnswer::Text(o)) => verbose_choice(o, &field.label),
        (FieldKind::Numeric, FieldAnswer::Number(v)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(case.noise_seed, &field.id, ask as u64));
            if celsius_field(field) && rng.gen_bool(FAHRENHEIT_RATE) {
                format!("I think it was around {} °F this morning", format_number(celsius_to_fahrenheit(*v)))
            } else {
                format!("I think it was around {} this morning", format_number(*v))
            }
        }
        _ => format!("Just {}, nothing else really.", truth.render()),
    }
}

/// A patient that answers from a case's ground truth, counting asks per field.
#[derive(Debug, Clone)]
pub struct ScriptedPatient {
    case: SimCase,
    template: Arc<Template>,
    asks: BTreeMap<String, u32>,
}

impl ScriptedPatient {
    pub fn new(case: SimCase, template: Arc<Template>) -> Self {
        Self {
            case,
            template,
            asks: BTreeMap::new(),
        }
    }

    pub fn asks(&self, field_id: &str) -> u32 {
        self.asks.get(field_id).copied().unwrap_or(0)
    }

    /// Answer a robot turn. A turn about several fields gets one
    /// "About {label}, ..." clause per field.
    pub fn reply(&mut self, turn: &Turn) -> String {
        let fields: Vec<FieldSpec> = turn
            .field_ids
            .iter()
            .filter_map(|id| self.template.field(id).cloned())
            .collect();
        let mut parts = Vec::with_capacity(fields.len());
        for f in &fields {
            let n = self.asks.entry(f.id.clone()).or_insert(0);
            parts.push((f.label.clone(), scripted_patient_reply(&self.case, f, *n)));
            *n += 1;
        }
        match parts.len() {
            0 => GENERIC_REPLY.to_string(),
            1 => parts.pop().unwrap().1,
            _ => parts
                .into_iter()
                .map(|(label, r)| format!("About {label}, {r}"))
                .collect::<Vec<_>>()
                .join("; "),
        }
    }
}

/// A model plays the patient, briefed with the case's ground truth. Output is
/// only as reproducible as the backend.
pub struct ProviderPatient {
    provider: Arc<dyn ChatProvider>,
    system_prompt: String,
}

impl ProviderPatient {
    pub fn new(case: &SimCase, template: &Template, provider: Arc<dyn ChatProvider>) -> Self {
        let facts = template
            .ordered_fields()
            .into_iter()
            .filter_map(|f| case.ground_truth.get(&f.id).map(|v| format!("- {}: {}", f.label, v.render())))
            .collect::<Vec<_>>()
            .join("\n");
        let manner = match case.style {
            PatientStyle::Direct => "Answer briefly and directly.",
            PatientStyle::Verbose => "Answer in full, chatty sentences.",
            PatientStyle::Evasive => "The first time you are asked about something, dodge the question.",
        };
        let system_prompt = format!(
            "You are a patient recovering from {} ({}). A follow-up robot is asking about your recovery. {manner}\nThe facts about your condition:\n{facts}\nNever invent symptoms beyond these facts.",
            case.profile.surgery_type,
            case.profile.summary(),
        );
        Self {
            provider,
            system_prompt,
        }
    }

    pub fn reply(&self, transcript: &[Turn]) -> String {
        // roles are mirrored: the robot is the "user" from the patient's side
        let messages = transcript
            .iter()
            .map(|t| match t.speaker {
                Speaker::Robot => ChatMessage::user(t.text.clone()),
                Speaker::Patient => ChatMessage::assistant(t.text.clone()),
            })
            .collect();
        let mut req = ChatRequest::new(RoleTag::QuestionLlm, self.system_prompt.clone(), messages);
        req.fallback = GENERIC_REPLY.to_string();
        let text = complete_or_degrade(self.provider.as_ref(), &req.with_meta("purpose", "patient")).text;
        if text.trim().is_empty() {
            GENERIC_REPLY.to_string()
        } else {
            text.trim().to_string()
        }
    }
}
