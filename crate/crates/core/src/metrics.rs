//! Report accuracy metrics and the three-way ablation.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::report::ReportValue;
use crate::session::EngineConfig;
use crate::simulator::{derive_seed, mean_coverage, run_dataset, Dataset, FieldAnswer, SimError, SimResult, SimStack, NUMERIC_TOL};
use crate::template::{FieldKind, Template};
use crate::text::{first_number, token_set};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction and truth lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("metric needs at least one pair")]
    Empty,
}

fn check_lengths(a: usize, b: usize) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Fraction of exact string matches.
pub fn choice_accuracy<S: AsRef<str>, T: AsRef<str>>(predictions: &[S], truths: &[T]) -> Result<f64, MetricsError> {
    check_lengths(predictions.len(), truths.len())?;
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| p.as_ref() == t.as_ref())
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Mean absolute error over non-null predictions; `None` when all are null.
pub fn numeric_mae(predictions: &[Option<f64>], truths: &[f64]) -> Result<Option<f64>, MetricsError> {
    check_lengths(predictions.len(), truths.len())?;
    let errors: Vec<f64> = predictions
        .iter()
        .zip(truths)
        .filter_map(|(p, t)| p.map(|p| (p - t).abs()))
        .collect();
    if errors.is_empty() {
        return Ok(None);
    }
    Ok(Some(errors.iter().sum::<f64>() / errors.len() as f64))
}

/// Fraction within `tol`; nulls count as wrong.
pub fn numeric_accuracy(predictions: &[Option<f64>], truths: &[f64], tol: f64) -> Result<f64, MetricsError> {
    check_lengths(predictions.len(), truths.len())?;
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| p.is_some_and(|p| (p - **t).abs() <= tol))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Token-set F1 over lowercased, punctuation-stripped tokens.
pub fn text_f1(prediction: &str, truth: &str) -> f64 {
    let p = token_set(prediction);
    let t = token_set(truth);
    match (p.is_empty(), t.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let common = p.intersection(&t).count();
    // 2PR/(P+R) reduces to 2|P∩T|/(|P|+|T|)
    2.0 * common as f64 / (p.len() + t.len()) as f64
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSetting {
    /// Field descriptions only: no verification, no field tracking.
    DescOnly,
    /// Verification on, field tracking off.
    DescPlusNli,
    /// Verification and field tracking.
    Full,
}

impl AblationSetting {
    pub const ALL: [AblationSetting; 3] = [AblationSetting::DescOnly, AblationSetting::DescPlusNli, AblationSetting::Full];

    pub fn name(self) -> &'static str {
        match self {
            AblationSetting::DescOnly => "desc_only",
            AblationSetting::DescPlusNli => "desc_plus_nli",
            AblationSetting::Full => "full",
        }
    }

    pub fn engine_config(self) -> EngineConfig {
        let (field_tracking, verification) = match self {
            AblationSetting::DescOnly => (false, false),
            AblationSetting::DescPlusNli => (false, true),
            AblationSetting::Full => (true, true),
        };
        EngineConfig {
            field_tracking,
            verification,
            ..EngineConfig::default()
        }
    }

    /// Whether metrics read the raw extraction instead of the report.
    pub fn reads_raw(self) -> bool {
        self == AblationSetting::DescOnly
    }
}

impl std::str::FromStr for AblationSetting {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown setting \"{s}\" (expected desc_only, desc_plus_nli or full)"))
    }
}

/// Metrics for one setting, averaged over repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingMetrics {
    pub setting: AblationSetting,
    pub choice_accuracy: f64,
    pub choice_similarity_f1: f64,
    pub numeric_accuracy: f64,
    /// Absent when no repeat produced a numeric value.
    pub numeric_mae: Option<f64>,
    pub text_f1: f64,
    pub coverage: f64,
    pub n_cases: usize,
    pub n_repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub template_id: String,
    pub seed: u64,
    pub n_cases: usize,
    pub n_repeats: usize,
    pub settings: Vec<SettingMetrics>,
}

impl MetricsTable {
    pub fn get(&self, setting: AblationSetting) -> Option<&SettingMetrics> {
        self.settings.iter().find(|s| s.setting == setting)
    }

    /// Aligned text table, one row per setting.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>10} {:>10} {:>11} {:>11} {:>8} {:>8}",
            "setting", "choice_acc", "choice_f1", "numeric_acc", "numeric_mae", "text_f1", "coverage"
        );
        for s in &self.settings {
            let mae = s.numeric_mae.map(|m| format!("{m:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<14} {:>10.4} {:>10.4} {:>11.4} {:>11} {:>8.4} {:>8.4}",
                s.setting.name(),
                s.choice_accuracy,
                s.choice_similarity_f1,
                s.numeric_accuracy,
                mae,
                s.text_f1,
                s.coverage
            );
        }
        let _ = writeln!(out, "n_cases={} n_repeats={} seed={}", self.n_cases, self.n_repeats, self.seed);
        out
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("table serializes");
        v.push(b'\n');
        v
    }
}

/// Predictions for one field kind across a result set, aligned with truths.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct KindPredictions {
    pub choice: (Vec<String>, Vec<String>),
    pub numeric: (Vec<Option<f64>>, Vec<f64>),
    pub text: (Vec<String>, Vec<String>),
}

/// Collect predictions. With `raw`, values come from the unverified
/// extraction: choice must match an option as written, numbers are read
/// literally, text is taken as is.
pub fn collect_predictions(results: &[SimResult], dataset: &Dataset, template: &Template, raw: bool) -> KindPredictions {
    let mut k = KindPredictions::default();
    for r in results {
        let Some(case) = dataset.cases.iter().find(|c| c.case_id == r.case_id) else {
            continue;
        };
        for field in template.ordered_fields() {
            let Some(truth) = case.ground_truth.get(&field.id) else {
                continue;
            };
            let extraction = r.extractions.get(&field.id).map(String::as_str).unwrap_or("");
            let entry = r.report.entries.iter().find(|e| e.field_id == field.id);
            let value = entry.and_then(|e| e.value.as_ref());
            match (field.kind, truth) {
                (FieldKind::SingleChoice, FieldAnswer::Text(t)) => {
                    let p = if raw {
                        extraction.trim().to_string()
                    } else {
                        value.and_then(ReportValue::as_text).unwrap_or("").to_string()
                    };
                    k.choice.0.push(p);
                    k.choice.1.push(t.clone());
                }
                (FieldKind::Numeric, FieldAnswer::Number(t)) => {
                    let p = if raw {
                        first_number(extraction).map(|n| n.value)
                    } else {
                        value.and_then(ReportValue::as_number)
                    };
                    k.numeric.0.push(p);
                    k.numeric.1.push(*t);
                }
                (FieldKind::FreeText, FieldAnswer::Text(t)) => {
                    let p = if raw {
                        extraction.to_string()
                    } else {
                        value.and_then(ReportValue::as_text).unwrap_or("").to_string()
                    };
                    k.text.0.push(p);
                    k.text.1.push(t.clone());
                }
                _ => {}
            }
        }
    }
    k
}

struct RepeatScores {
    choice_accuracy: f64,
    choice_f1: f64,
    numeric_accuracy: f64,
    numeric_mae: Option<f64>,
    text_f1: f64,
    coverage: f64,
}

fn score_repeat(results: &[SimResult], dataset: &Dataset, template: &Template, setting: AblationSetting) -> RepeatScores {
    let k = collect_predictions(results, dataset, template, setting.reads_raw());
    let pair_f1 = |(p, t): (&Vec<String>, &Vec<String>)| {
        if p.is_empty() {
            0.0
        } else {
            mean(&p.iter().zip(t).map(|(a, b)| text_f1(a, b)).collect::<Vec<_>>())
        }
    };
    RepeatScores {
        choice_accuracy: choice_accuracy(&k.choice.0, &k.choice.1).unwrap_or(0.0),
        choice_f1: pair_f1((&k.choice.0, &k.choice.1)),
        numeric_accuracy: numeric_accuracy(&k.numeric.0, &k.numeric.1, NUMERIC_TOL).unwrap_or(0.0),
        numeric_mae: numeric_mae(&k.numeric.0, &k.numeric.1).ok().flatten(),
        text_f1: pair_f1((&k.text.0, &k.text.1)),
        coverage: mean_coverage(results),
    }
}

/// Seed of one (setting, repeat) run.
pub fn repeat_seed(seed: u64, setting: AblationSetting, repeat: usize) -> u64 {
    derive_seed(seed, setting.name(), repeat as u64)
}

/// Run every setting `repeats` times and average the metrics per setting.
pub fn run_ablation(
    dataset: &Dataset,
    template: &Arc<Template>,
    settings: &[AblationSetting],
    repeats: usize,
    seed: u64,
    stack: &SimStack,
) -> Result<MetricsTable, SimError> {
    if repeats == 0 {
        return Err(SimError::Dataset("repeats must be at least 1".into()));
    }
    dataset.validate(template)?;
    let jobs: Vec<(AblationSetting, usize)> = settings
        .iter()
        .flat_map(|&s| (0..repeats).map(move |r| (s, r)))
        .collect();
    let scored = jobs
        .par_iter()
        .map(|&(s, r)| {
            let results = run_dataset(dataset, template, &s.engine_config(), stack, repeat_seed(seed, s, r))?;
            Ok((s, score_repeat(&results, dataset, template, s)))
        })
        .collect::<Result<Vec<_>, SimError>>()?;

    let rows = settings
        .iter()
        .map(|&s| {
            let runs: Vec<&RepeatScores> = scored.iter().filter(|(x, _)| *x == s).map(|(_, r)| r).collect();
            let avg = |f: fn(&RepeatScores) -> f64| mean(&runs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let maes: Vec<f64> = runs.iter().filter_map(|r| r.numeric_mae).collect();
            SettingMetrics {
                setting: s,
                choice_accuracy: avg(|r| r.choice_accuracy),
                choice_similarity_f1: avg(|r| r.choice_f1),
                numeric_accuracy: avg(|r| r.numeric_accuracy),
                numeric_mae: (!maes.is_empty()).then(|| mean(&maes)),
                text_f1: avg(|r| r.text_f1),
                coverage: avg(|r| r.coverage),
                n_cases: dataset.cases.len(),
                n_repeats: repeats,
            }
        })
        .collect();
    Ok(MetricsTable {
        template_id: template.template_id.clone(),
        seed,
        n_cases: dataset.cases.len(),
        n_repeats: repeats,
        settings: rows,
    })
}
