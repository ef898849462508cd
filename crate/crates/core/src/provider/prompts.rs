//! Prompt construction. Wording lives in `assets/prompts/*.txt`.

use thiserror::Error;

use super::{fill_placeholders, ChatMessage, ChatRequest, RoleTag};
use crate::session::{AskStyle, PatientProfile, Speaker, Turn};
use crate::template::{FieldKind, FieldSpec, Template};
use std::collections::BTreeMap;

pub const PROMPT_VERSION: &str = "v1";

const QUESTION_SYSTEM: &str = include_str!("../../assets/prompts/question_system.txt");
const OPEN_QUESTION_SYSTEM: &str = include_str!("../../assets/prompts/open_question_system.txt");
const EXTRACTION_SYSTEM: &str = include_str!("../../assets/prompts/extraction_system.txt");
const SUMMARY_SYSTEM: &str = include_str!("../../assets/prompts/summary_system.txt");
const JUDGE_SYSTEM: &str = include_str!("../../assets/prompts/judge_system.txt");

pub const END_MARKER: &str = "[END]";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuestionStage {
    /// First question of the session.
    Opening,
    /// First question for a later field.
    Next,
    /// Re-ask after a failed verification.
    Clarify,
}

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("dialogue segment is empty")]
    EmptySegment,
}

fn vars(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn style_line(style: AskStyle) -> &'static str {
    match style {
        AskStyle::Concise => "Keep your wording short and plain.",
        AskStyle::Empathetic => "Be warm and reassuring, and acknowledge how the patient feels.",
    }
}

fn options_list(field: &FieldSpec) -> String {
    field.options.join(", ")
}

fn answer_format(field: &FieldSpec) -> String {
    match field.kind {
        FieldKind::SingleChoice => format!("Allowed answers: {}", field.options.join("/")),
        FieldKind::Numeric => {
            let mut s = String::from("Expected answer: a number");
            if let Some(u) = &field.unit {
                s.push_str(&format!(" in {u}"));
            }
            if let Some(r) = field.range_text() {
                s.push_str(&format!(", valid range {r}"));
            }
            s.push('.');
            s
        }
        FieldKind::FreeText => "Expected answer: a brief description in the patient's own words.".into(),
    }
}

/// Short hint a fallback or scripted question can append.
fn answer_hint(field: &FieldSpec) -> String {
    match field.kind {
        FieldKind::SingleChoice => format!("Please answer with one of: {}.", options_list(field)),
        FieldKind::Numeric => match &field.unit {
            Some(u) => format!("Please give a number in {u}."),
            None => "Please give a number.".into(),
        },
        FieldKind::FreeText => String::new(),
    }
}

fn stage_line(stage: QuestionStage, field: &FieldSpec) -> String {
    match stage {
        QuestionStage::Opening => {
            "Begin with a brief greeting that uses the patient's details, then move to the current item.".into()
        }
        QuestionStage::Next => "Move on to the current item.".into(),
        QuestionStage::Clarify => match field.kind {
            FieldKind::SingleChoice => format!(
                "The previous answer could not be mapped to a valid value. Rephrase the question simply and list the allowed answers verbatim: {}.",
                options_list(field)
            ),
            _ => "The previous answer could not be mapped to a valid value. Rephrase the question simply and state the expected format.".into(),
        },
    }
}

fn profile_meta(req: ChatRequest, profile: &PatientProfile) -> ChatRequest {
    req.with_meta("age", profile.age.to_string())
        .with_meta("sex", profile.sex.clone())
        .with_meta("surgery_type", profile.surgery_type.clone())
        .with_meta("bed_number", profile.bed_number.clone())
}

fn turns_as_messages(segment: &[Turn]) -> Vec<ChatMessage> {
    segment
        .iter()
        .map(|t| match t.speaker {
            Speaker::Robot => ChatMessage::assistant(t.text.clone()),
            Speaker::Patient => ChatMessage::user(t.text.clone()),
        })
        .collect()
}

/// Fallback question when the question model is unavailable.
pub fn fallback_question(field: &FieldSpec, stage: QuestionStage) -> String {
    let base = format!("Do you have {}?", field.label);
    match stage {
        QuestionStage::Clarify if field.kind != FieldKind::FreeText => format!("{base} {}", answer_hint(field)),
        _ => base,
    }
}

pub fn build_question_prompt(
    profile: &PatientProfile,
    field: &FieldSpec,
    segment: &[Turn],
    style: AskStyle,
    stage: QuestionStage,
) -> ChatRequest {
    let system = fill_placeholders(
        QUESTION_SYSTEM,
        &vars(&[
            ("profile", profile.summary()),
            ("style", style_line(style).into()),
            ("stage", stage_line(stage, field)),
            ("label", field.label.clone()),
            ("description", field.description.clone()),
            ("answer_format", answer_format(field)),
        ]),
    );
    let mut messages = turns_as_messages(segment);
    if messages.is_empty() {
        messages.push(ChatMessage::user(match stage {
            QuestionStage::Opening => "Please begin.",
            _ => "Please continue.",
        }));
    }
    let mut req = ChatRequest::new(RoleTag::QuestionLlm, system.trim_end().to_string(), messages);
    req.fallback = fallback_question(field, stage);
    let stage_tag = match stage {
        QuestionStage::Opening => "opening",
        QuestionStage::Next => "next",
        QuestionStage::Clarify => "clarify",
    };
    profile_meta(req, profile)
        .with_meta("purpose", "question")
        .with_meta("stage", stage_tag)
        .with_meta("field_id", field.id.clone())
        .with_meta("field_label", field.label.clone())
        .with_meta("answer_hint", answer_hint(field))
}

/// Prompt for a conversation without field tracking: every field is listed
/// and the model decides what to ask.
pub fn build_open_question_prompt(
    profile: &PatientProfile,
    template: &Template,
    transcript: &[Turn],
    style: AskStyle,
) -> ChatRequest {
    let ordered = template.ordered_fields();
    let items = ordered
        .iter()
        .map(|f| format!("- {} ({}): {}", f.label, f.kind, f.description))
        .collect::<Vec<_>>()
        .join("\n");
    let system = fill_placeholders(
        OPEN_QUESTION_SYSTEM,
        &vars(&[
            ("profile", profile.summary()),
            ("style", style_line(style).into()),
            ("items", items),
        ]),
    );
    let mut messages = turns_as_messages(transcript);
    if messages.is_empty() {
        messages.push(ChatMessage::user("Please begin."));
    }
    let mut req = ChatRequest::new(RoleTag::QuestionLlm, system.trim_end().to_string(), messages);
    req = profile_meta(req, profile)
        .with_meta("purpose", "open_question")
        .with_meta("field_count", ordered.len().to_string());
    for (i, f) in ordered.iter().enumerate() {
        req = req.with_meta(&format!("field_label.{i}"), f.label.clone());
    }
    req
}

/// Speaker-tagged lines, one per turn.
pub fn render_segment(segment: &[Turn]) -> String {
    segment
        .iter()
        .map(|t| {
            let who = match t.speaker {
                Speaker::Robot => "Robot",
                Speaker::Patient => "Patient",
            };
            format!("{who}: {}", t.text)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn format_instruction(field: &FieldSpec) -> String {
    match field.kind {
        FieldKind::SingleChoice => format!("Answer with exactly one of: {}.", options_list(field)),
        FieldKind::Numeric => match &field.unit {
            Some(u) => format!("Answer with a single number in {u}."),
            None => "Answer with a single number.".into(),
        },
        FieldKind::FreeText => "Answer with a short phrase, no preamble.".into(),
    }
}

pub fn build_extraction_prompt(field: &FieldSpec, segment: &[Turn]) -> Result<ChatRequest, PromptError> {
    if segment.is_empty() {
        return Err(PromptError::EmptySegment);
    }
    let system = fill_placeholders(
        EXTRACTION_SYSTEM,
        &vars(&[
            ("label", field.label.clone()),
            ("description", field.description.clone()),
            ("format", format_instruction(field)),
        ]),
    );
    let req = ChatRequest::new(
        RoleTag::ReportLlm,
        system.trim_end().to_string(),
        vec![ChatMessage::user(render_segment(segment))],
    );
    Ok(req
        .with_meta("purpose", "extraction")
        .with_meta("field_id", field.id.clone())
        .with_meta("field_label", field.label.clone())
        .with_meta("kind", field.kind.as_str()))
}

/// `findings` are "label: value" lines.
pub fn build_summary_prompt(findings: &[String]) -> ChatRequest {
    ChatRequest::new(
        RoleTag::ReportLlm,
        SUMMARY_SYSTEM.trim_end().to_string(),
        vec![ChatMessage::user(findings.join("\n"))],
    )
    .with_meta("purpose", "summary")
}

pub fn build_judge_prompt(transcript: &[Turn], aspects: &[String]) -> ChatRequest {
    let system = fill_placeholders(JUDGE_SYSTEM, &vars(&[("aspects", aspects.join(", "))]));
    let body = if transcript.is_empty() {
        "(empty conversation)".to_string()
    } else {
        render_segment(transcript)
    };
    ChatRequest::new(RoleTag::JudgeLlm, system.trim_end().to_string(), vec![ChatMessage::user(body)])
        .with_meta("purpose", "judge")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::Modality;
    use chrono::{NaiveDate, TimeZone, Utc};

    fn profile() -> PatientProfile {
        PatientProfile {
            patient_id: "p1".into(),
            bed_number: "12".into(),
            age: 62,
            sex: "female".into(),
            surgery_type: "appendectomy".into(),
            surgery_date: NaiveDate::from_ymd_opt(2026, 1, 2).unwrap(),
            notes: None,
        }
    }

    fn turn(i: u64, speaker: Speaker, text: &str) -> Turn {
        Turn {
            index: i,
            speaker,
            text: text.into(),
            modality: Modality::Text,
            field_ids: vec!["headache".into()],
            timestamp: Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap(),
            degraded: false,
        }
    }

    #[test]
    fn question_prompt_lists_options_and_profile() {
        let t = Template::demo();
        let req = build_question_prompt(&profile(), t.field("headache").unwrap(), &[], AskStyle::Concise, QuestionStage::Opening);
        assert!(req.system_prompt.contains("Yes/No/Unclear"));
        assert!(req.system_prompt.contains("62-year-old"));
        assert!(req.system_prompt.contains("appendectomy"));
        assert!(req.system_prompt.contains("Ask exactly one question"));
        assert_eq!(req.fallback, "Do you have headache?");
        assert_eq!(req.temperature, 0.7);
        assert_eq!(req.messages.len(), 1);
    }

    #[test]
    fn numeric_prompt_has_unit_and_range() {
        let t = Template::demo();
        let req = build_question_prompt(&profile(), t.field("temperature").unwrap(), &[], AskStyle::Concise, QuestionStage::Next);
        assert!(req.system_prompt.contains("°C"));
        assert!(req.system_prompt.contains("30 to 45 °C"), "{}", req.system_prompt);
    }

    #[test]
    fn clarify_prompt_has_rephrase_instruction() {
        let t = Template::demo();
        let seg = [turn(0, Speaker::Robot, "Any headache?"), turn(1, Speaker::Patient, "hmm")];
        let req = build_question_prompt(&profile(), t.field("headache").unwrap(), &seg, AskStyle::Empathetic, QuestionStage::Clarify);
        assert!(req.system_prompt.contains("Rephrase the question simply"));
        assert!(req.system_prompt.contains("verbatim: Yes, No, Unclear"));
        assert_eq!(req.messages.len(), 2);
        assert_eq!(req.fallback, "Do you have headache? Please answer with one of: Yes, No, Unclear.");
    }

    #[test]
    fn extraction_prompts_by_kind() {
        let t = Template::demo();
        let seg = [turn(0, Speaker::Robot, "Any headache?"), turn(1, Speaker::Patient, "yes")];
        let req = build_extraction_prompt(t.field("headache").unwrap(), &seg).unwrap();
        assert!(req.system_prompt.contains("exactly one of: Yes, No, Unclear"));
        assert!(req.system_prompt.contains(&t.field("headache").unwrap().description));
        assert_eq!(req.messages[0].text, "Robot: Any headache?\nPatient: yes");
        assert_eq!(req.temperature, 0.0);

        let req = build_extraction_prompt(t.field("temperature").unwrap(), &seg).unwrap();
        assert!(req.system_prompt.contains("a single number"));
        let req = build_extraction_prompt(t.field("other_complaints").unwrap(), &seg).unwrap();
        assert!(req.system_prompt.contains("a short phrase, no preamble"));

        assert_eq!(
            build_extraction_prompt(t.field("headache").unwrap(), &[]),
            Err(PromptError::EmptySegment)
        );
    }

    #[test]
    fn open_prompt_lists_all_fields() {
        let t = Template::demo();
        let req = build_open_question_prompt(&profile(), &t, &[], AskStyle::Concise);
        for f in &t.fields {
            assert!(req.system_prompt.contains(&f.label));
        }
        assert_eq!(req.metadata["field_label.3"], "body temperature");
        assert!(req.system_prompt.contains(END_MARKER));
    }
}
