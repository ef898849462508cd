use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::report::write_atomic;
use crate::session::PatientProfile;
use crate::template::{FieldKind, FieldSpec, Template};
use crate::verification::format_number;

/// Bank of free-text complaints used as ground truth.
pub const PHRASE_BANK: &[&str] = &[
    "mild pain at the incision",
    "some trouble sleeping",
    "slight itching around the wound",
    "feeling tired during the day",
    "reduced appetite",
    "sore throat after the breathing tube",
    "back pain from lying in bed",
    "no other complaints",
];

const SURGERIES: &[&str] = &[
    "appendectomy",
    "cholecystectomy",
    "hernia repair",
    "knee arthroscopy",
    "thyroidectomy",
    "hip replacement",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatientStyle {
    Direct,
    Verbose,
    Evasive,
}

impl PatientStyle {
    pub const ALL: [PatientStyle; 3] = [PatientStyle::Direct, PatientStyle::Verbose, PatientStyle::Evasive];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldAnswer {
    Number(f64),
    Text(String),
}

impl FieldAnswer {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            FieldAnswer::Number(n) => Some(*n),
            FieldAnswer::Text(_) => None,
        }
    }

    pub fn render(&self) -> String {
        match self {
            FieldAnswer::Number(n) => format_number(*n),
            FieldAnswer::Text(t) => t.clone(),
        }
    }

    pub fn is_valid_for(&self, field: &FieldSpec) -> bool {
        match (field.kind, self) {
            (FieldKind::SingleChoice, FieldAnswer::Text(t)) => field.options.contains(t),
            (FieldKind::Numeric, FieldAnswer::Number(n)) => n.is_finite() && field.in_range(*n),
            (FieldKind::FreeText, FieldAnswer::Text(t)) => !t.trim().is_empty(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimCase {
    pub case_id: String,
    pub profile: PatientProfile,
    pub ground_truth: BTreeMap<String, FieldAnswer>,
    pub style: PatientStyle,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub template_id: String,
    pub seed: u64,
    pub cases: Vec<SimCase>,
}

impl Dataset {
    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("dataset serializes");
        out.push(b'\n');
        out
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        write_atomic(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Dataset, SimError> {
        let bytes = std::fs::read(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| SimError::Dataset(e.to_string()))
    }

    /// Every case must carry a valid value for every template field.
    pub fn validate(&self, template: &Template) -> Result<(), SimError> {
        if self.template_id != template.template_id {
            return Err(SimError::Dataset(format!(
                "dataset is for template {}, not {}",
                self.template_id, template.template_id
            )));
        }
        if self.cases.is_empty() {
            return Err(SimError::Dataset("dataset has no cases".into()));
        }
        for case in &self.cases {
            for field in &template.fields {
                match case.ground_truth.get(&field.id) {
                    Some(v) if v.is_valid_for(field) => {}
                    _ => {
                        return Err(SimError::Dataset(format!(
                            "case {}: missing or invalid truth for \"{}\"",
                            case.case_id, field.id
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

fn sample_truth(field: &FieldSpec, rng: &mut ChaCha8Rng) -> FieldAnswer {
    match field.kind {
        FieldKind::SingleChoice => FieldAnswer::Text(field.options.choose(rng).expect("options").clone()),
        FieldKind::Numeric => {
            let lo = field.min.unwrap_or(0.0);
            let hi = field.max.unwrap_or(lo + 100.0);
            let v = (rng.gen_range(lo..=hi) * 10.0).round() / 10.0;
            FieldAnswer::Number(v.clamp(lo, hi))
        }
        FieldKind::FreeText => FieldAnswer::Text(PHRASE_BANK.choose(rng).expect("phrases").to_string()),
    }
}

/// `n` synthetic cases. Truths are uniform over each field's domain and
/// styles cycle direct, verbose, evasive.
pub fn generate_dataset(template: &Template, n: usize, seed: u64) -> Result<Dataset, SimError> {
    if n == 0 {
        return Err(SimError::Dataset("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_date = NaiveDate::from_ymd_opt(2026, 1, 1).expect("valid date");
    let width = n.to_string().len().max(3);
    let cases = (0..n)
        .map(|i| {
            let profile = PatientProfile {
                patient_id: format!("P{:0width$}", i + 1),
                bed_number: format!("{}", rng.gen_range(1..=40)),
                age: rng.gen_range(18..=90),
                sex: if rng.gen_bool(0.5) { "female" } else { "male" }.to_string(),
                surgery_type: SURGERIES.choose(&mut rng).expect("surgeries").to_string(),
                surgery_date: base_date + Days::new(rng.gen_range(0..60)),
                notes: None,
            };
            let ground_truth = template
                .fields
                .iter()
                .map(|f| (f.id.clone(), sample_truth(f, &mut rng)))
                .collect();
            SimCase {
                case_id: format!("case-{:0width$}", i + 1),
                profile,
                ground_truth,
                style: PatientStyle::ALL[i % 3],
                noise_seed: rng.gen(),
            }
        })
        .collect();
    Ok(Dataset {
        template_id: template.template_id.clone(),
        seed,
        cases,
    })
}
