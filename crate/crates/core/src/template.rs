//! Follow-up templates: the ordered list of fields an interview must complete.
//!
//! Templates are parsed from a JSON document with explicit kind tags. Parsing
//! validates every field constraint, so a [`Template`] value is always valid
//! and immutable afterwards.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEMO_TEMPLATE_JSON: &str = include_str!("../assets/templates/demo-v1.json");
pub const DEMO_MINI_TEMPLATE_JSON: &str = include_str!("../assets/templates/demo-mini-v1.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    SingleChoice,
    Numeric,
    FreeText,
}

impl FieldKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldKind::SingleChoice => "single_choice",
            FieldKind::Numeric => "numeric",
            FieldKind::FreeText => "free_text",
        }
    }
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub id: String,
    pub label: String,
    pub kind: FieldKind,
    pub description: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    /// Lower is asked earlier.
    pub priority: i64,
    #[serde(default = "default_required")]
    pub required: bool,
}

fn default_required() -> bool {
    true
}

impl FieldSpec {
    pub fn in_range(&self, value: f64) -> bool {
        self.min.is_none_or(|m| value >= m) && self.max.is_none_or(|m| value <= m)
    }

    /// Human-readable range text, e.g. "30 to 45 °C".
    pub fn range_text(&self) -> Option<String> {
        let unit = self.unit.as_deref().map(|u| format!(" {u}")).unwrap_or_default();
        match (self.min, self.max) {
            (Some(lo), Some(hi)) => Some(format!("{lo} to {hi}{unit}")),
            (Some(lo), None) => Some(format!("at least {lo}{unit}")),
            (None, Some(hi)) => Some(format!("at most {hi}{unit}")),
            (None, None) => None,
        }
    }

    fn validate(&self) -> Result<(), TemplateError> {
        let invalid = |reason: &str| TemplateError::InvalidField {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.trim().is_empty() {
            return Err(invalid("field id is empty"));
        }
        if self.label.trim().is_empty() {
            return Err(invalid("label is empty"));
        }
        match self.kind {
            FieldKind::SingleChoice => {
                if self.options.len() < 2 {
                    return Err(invalid("single_choice needs at least 2 options"));
                }
                let mut seen = HashSet::new();
                for o in &self.options {
                    if o.trim().is_empty() {
                        return Err(invalid("empty option"));
                    }
                    if !seen.insert(o.as_str()) {
                        return Err(invalid(&format!("duplicate option \"{o}\"")));
                    }
                }
                if self.unit.is_some() || self.min.is_some() || self.max.is_some() {
                    return Err(invalid("single_choice cannot have unit or range"));
                }
            }
            FieldKind::Numeric => {
                if !self.options.is_empty() {
                    return Err(invalid("numeric field cannot have options"));
                }
                for b in [self.min, self.max].into_iter().flatten() {
                    if !b.is_finite() {
                        return Err(invalid("range bounds must be finite"));
                    }
                }
                if let (Some(lo), Some(hi)) = (self.min, self.max) {
                    if lo > hi {
                        return Err(invalid(&format!("min {lo} > max {hi}")));
                    }
                }
            }
            FieldKind::FreeText => {
                if !self.options.is_empty() {
                    return Err(invalid("free_text field cannot have options"));
                }
                if self.unit.is_some() || self.min.is_some() || self.max.is_some() {
                    return Err(invalid("free_text field cannot have unit or range"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub template_id: String,
    pub version: String,
    pub report_title: String,
    pub fields: Vec<FieldSpec>,
}

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("malformed template document: {0}")]
    Malformed(String),
    #[error("template has no fields")]
    NoFields,
    #[error("template has no required fields")]
    NoRequiredFields,
    #[error("duplicate field id \"{0}\"")]
    DuplicateId(String),
    #[error("field \"{id}\": {reason}")]
    InvalidField { id: String, reason: String },
}

pub fn parse_template(document: &[u8]) -> Result<Template, TemplateError> {
    let template: Template =
        serde_json::from_slice(document).map_err(|e| TemplateError::Malformed(e.to_string()))?;
    template.validate()?;
    Ok(template)
}

pub fn serialize_template(template: &Template) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(template).expect("template serializes");
    out.push(b'\n');
    out
}

impl Template {
    pub fn validate(&self) -> Result<(), TemplateError> {
        if self.template_id.trim().is_empty() {
            return Err(TemplateError::Malformed("template_id is empty".into()));
        }
        if self.fields.is_empty() {
            return Err(TemplateError::NoFields);
        }
        let mut ids = HashSet::new();
        for f in &self.fields {
            f.validate()?;
            if !ids.insert(f.id.as_str()) {
                return Err(TemplateError::DuplicateId(f.id.clone()));
            }
        }
        if !self.fields.iter().any(|f| f.required) {
            return Err(TemplateError::NoRequiredFields);
        }
        Ok(())
    }

    pub fn field(&self, id: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.id == id)
    }

    /// Fields by ascending priority; ties keep source order.
    pub fn ordered_fields(&self) -> Vec<&FieldSpec> {
        let mut out: Vec<&FieldSpec> = self.fields.iter().collect();
        out.sort_by_key(|f| f.priority);
        out
    }

    pub fn required_ids(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().filter(|f| f.required).map(|f| f.id.as_str())
    }

    /// Five-field demo: headache, dizziness, nausea, body temperature, other complaints.
    pub fn demo() -> Template {
        parse_template(DEMO_TEMPLATE_JSON.as_bytes()).expect("bundled demo template is valid")
    }

    /// Three-field demo (headache, body temperature, other complaints).
    pub fn demo_mini() -> Template {
        parse_template(DEMO_MINI_TEMPLATE_JSON.as_bytes()).expect("bundled demo template is valid")
    }
}

pub fn ordered_fields(template: &Template) -> Vec<&FieldSpec> {
    template.ordered_fields()
}
