use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use followup_core::metrics::{run_ablation, AblationSetting};
use followup_core::report::{render_report, ReportFormat};
use followup_core::simulator::{
    generate_dataset, run_case, run_dataset, scripted_patient_reply, FieldAnswer, NoiseModel, PatientStyle, SimCase,
    SimStack, NON_ANSWER,
};
use followup_core::session::EngineConfig;
use followup_core::template::{FieldKind, Template};

fn demo() -> Arc<Template> {
    Arc::new(Template::demo())
}

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compare with a checked-in golden file; `UPDATE_GOLDEN=1` rewrites it.
fn check_golden(name: &str, actual: &[u8]) {
    let path = golden_path(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(String::from_utf8_lossy(actual), String::from_utf8_lossy(&expected), "golden {name} differs");
}

#[test]
fn dataset_is_deterministic_and_valid() {
    let t = demo();
    let a = generate_dataset(&t, 100, 7).unwrap();
    let b = generate_dataset(&t, 100, 7).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    a.validate(&t).unwrap();
    assert_ne!(generate_dataset(&t, 100, 8).unwrap().to_json(), a.to_json());

    let one = generate_dataset(&t, 1, 7).unwrap();
    assert_eq!(one.cases.len(), 1);
    assert!(t.required_ids().all(|id| one.cases[0].ground_truth.contains_key(id)));
    assert!(generate_dataset(&t, 0, 7).is_err());

    let styles: Vec<PatientStyle> = a.cases.iter().take(4).map(|c| c.style).collect();
    assert_eq!(styles, [PatientStyle::Direct, PatientStyle::Verbose, PatientStyle::Evasive, PatientStyle::Direct]);
}

#[test]
fn choice_truths_are_roughly_uniform() {
    let t = demo();
    for seed in [7, 42] {
        let ds = generate_dataset(&t, 100, seed).unwrap();
        for f in t.fields.iter().filter(|f| f.kind == FieldKind::SingleChoice) {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for c in &ds.cases {
                if let Some(FieldAnswer::Text(v)) = c.ground_truth.get(&f.id) {
                    *counts.entry(v.as_str()).or_default() += 1;
                }
            }
            for o in &f.options {
                let freq = counts.get(o.as_str()).copied().unwrap_or(0) as f64 / 100.0;
                assert!((0.2..=0.5).contains(&freq), "seed {seed} {} {o}: {freq}", f.id);
            }
        }
    }
}

fn case(style: PatientStyle, noise_seed: u64) -> SimCase {
    let mut c = generate_dataset(&demo(), 1, 3).unwrap().cases.remove(0);
    c.style = style;
    c.noise_seed = noise_seed;
    c.ground_truth.insert("headache".into(), FieldAnswer::Text("Yes".into()));
    c.ground_truth.insert("temperature".into(), FieldAnswer::Number(37.2));
    c.ground_truth.insert("other_complaints".into(), FieldAnswer::Text("mild pain at the incision".into()));
    c
}

#[test]
fn patient_reply_styles() {
    let t = demo();
    let headache = t.field("headache").unwrap();
    let temp = t.field("temperature").unwrap();
    assert_eq!(scripted_patient_reply(&case(PatientStyle::Direct, 1), headache, 0), "Yes");
    assert_eq!(scripted_patient_reply(&case(PatientStyle::Direct, 1), temp, 0), "37.2");
    assert_eq!(scripted_patient_reply(&case(PatientStyle::Evasive, 1), temp, 0), NON_ANSWER);
    assert_ne!(scripted_patient_reply(&case(PatientStyle::Evasive, 1), temp, 1), NON_ANSWER);

    // verbose wrappers for a fixed noise seed, frozen
    let mut lines = Vec::new();
    for ask in 0..8 {
        for f in &t.fields {
            lines.push(format!("{}#{ask}: {}", f.id, scripted_patient_reply(&case(PatientStyle::Verbose, 11), f, ask)));
        }
    }
    let joined = lines.join("\n") + "\n";
    assert!(joined.contains("temperature#0: I think it was around 37.2 this morning"));
    assert!(joined.contains("°F"), "some verbose temperatures are given in Fahrenheit");
    check_golden("verbose_replies.txt", joined.as_bytes());
}

#[test]
fn full_engine_covers_every_case() {
    let t = demo();
    let ds = generate_dataset(&t, 30, 42).unwrap();
    let results = run_dataset(&ds, &t, &EngineConfig::default(), &SimStack::scripted(), 42).unwrap();
    assert!(results.iter().all(|r| r.coverage == 1.0));
    for r in results.iter().filter(|r| r.style == PatientStyle::Evasive) {
        assert!(r.attempts.values().all(|&a| a > 1), "{}: {:?}", r.case_id, r.attempts);
    }
    let sat = results[0].satisfaction.as_ref().unwrap();
    assert_eq!(sat.len(), 6);
    assert!(sat.values().all(|&v| v == 4));
}

#[test]
fn exact_extractions_are_correct_for_direct_patients() {
    let t = demo();
    let ds = generate_dataset(&t, 30, 5).unwrap();
    let stack = SimStack::scripted().with_noise(NoiseModel::exact());
    for c in ds.cases.iter().filter(|c| c.style == PatientStyle::Direct) {
        let r = run_case(c, &t, &EngineConfig::default(), &stack, 1).unwrap();
        assert!(r.per_field_correct.values().all(|&ok| ok), "{}: {:?}", c.case_id, r.per_field_correct);
    }
}

#[test]
fn first_field_only_gives_fractional_coverage() {
    let t = demo();
    let c = generate_dataset(&t, 1, 1).unwrap().cases.remove(0);
    let cfg = EngineConfig {
        field_limit: Some(1),
        ..EngineConfig::default()
    };
    let r = run_case(&c, &t, &cfg, &SimStack::scripted(), 1).unwrap();
    assert_eq!(r.coverage, 1.0 / 5.0);
}

#[test]
fn run_case_is_deterministic() {
    let t = demo();
    let ds = generate_dataset(&t, 6, 9).unwrap();
    for c in &ds.cases {
        let a = run_case(c, &t, &EngineConfig::default(), &SimStack::scripted(), 77).unwrap();
        let b = run_case(c, &t, &EngineConfig::default(), &SimStack::scripted(), 77).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}

#[test]
fn report_golden_for_mini_template() {
    let t = Arc::new(Template::demo_mini());
    let ds = generate_dataset(&t, 3, 42).unwrap();
    let stack = SimStack::scripted().with_noise(NoiseModel::exact());
    let r = run_case(&ds.cases[1], &t, &EngineConfig::default(), &stack, 42).unwrap();
    assert_eq!(r.report.entries.len(), 3);
    check_golden("report_demo_mini.json", &render_report(&r.report, ReportFormat::Structured));
    let human = render_report(&r.report, ReportFormat::HumanReadable);
    assert!(human.starts_with(t.report_title.as_bytes()));
    check_golden("report_demo_mini.txt", &human);
}

/// Expected full-setting choice accuracy, by enumeration of corruption
/// patterns: a field is right unless every attempt it gets is corrupted,
/// and then only if the missing-value option happens to be the truth.
fn expected_full_choice_accuracy(cases: &[SimCase], template: &Template, p: f64, max_attempts: u32) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for c in cases {
        let k = max_attempts - u32::from(c.style == PatientStyle::Evasive);
        for f in template.fields.iter().filter(|f| f.kind == FieldKind::SingleChoice) {
            let Some(FieldAnswer::Text(truth)) = c.ground_truth.get(&f.id) else { continue };
            let mut acc = 0.0;
            for pattern in 0u32..(1 << k) {
                let corrupted = pattern.count_ones();
                let prob = p.powi(corrupted as i32) * (1.0 - p).powi((k - corrupted) as i32);
                let all_bad = corrupted == k;
                let right = !all_bad || truth == "Unclear";
                if right {
                    acc += prob;
                }
            }
            total += acc;
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn full_setting_matches_expected_recovery() {
    let t = demo();
    let ds = generate_dataset(&t, 100, 42).unwrap();
    let noise = NoiseModel::default();
    let expected = expected_full_choice_accuracy(&ds.cases, &t, noise.corruption, 3);
    let table = run_ablation(&ds, &t, &[AblationSetting::Full], 2, 42, &SimStack::scripted()).unwrap();
    let observed = table.get(AblationSetting::Full).unwrap().choice_accuracy;
    assert!((observed - expected).abs() <= 0.05, "observed {observed}, expected {expected}");
    assert!(expected > 0.99);
}

#[test]
fn ablation_orders_the_settings() {
    let t = demo();
    let ds = generate_dataset(&t, 60, 42).unwrap();
    let table = run_ablation(&ds, &t, &AblationSetting::ALL, 2, 42, &SimStack::scripted()).unwrap();
    let [d, n, f] = AblationSetting::ALL.map(|s| table.get(s).unwrap().clone());
    assert!(d.choice_accuracy < n.choice_accuracy && n.choice_accuracy <= f.choice_accuracy);
    assert!(d.numeric_mae.unwrap() > n.numeric_mae.unwrap());
    assert!(n.numeric_mae.unwrap() >= f.numeric_mae.unwrap());
    assert!(table.render_text().lines().count() == 5);
    let again = run_ablation(&ds, &t, &AblationSetting::ALL, 2, 42, &SimStack::scripted()).unwrap();
    assert_eq!(table.to_json(), again.to_json());
}
