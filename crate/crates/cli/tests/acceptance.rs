//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fail. Needs no network and no UI build.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use followup_core::clock::StepClock;
use followup_core::metrics::{numeric_mae, run_ablation, text_f1, AblationSetting};
use followup_core::provider::{
    ChatProvider, ChatRequest, ChatResponse, FailingProvider, ProviderError, ProviderSet, RoleTag, ScriptEntry,
    ScriptedProvider,
};
use followup_core::report::{parse_report, render_report, EntryStatus, Report, ReportFormat};
use followup_core::session::{EngineConfig, Modality, PatientProfile, SessionEngine, StepOutcome};
use followup_core::simulator::{bundled_script, generate_dataset, run_case, NoiseModel, SimStack};
use followup_core::template::{parse_template, serialize_template, FieldKind, FieldSpec, Template};
use followup_core::verification::{
    select_option, verify_choice, EntailmentScorer, RawExtraction, ScorerError, VerificationFailure, VerifierConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn followup(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_followup"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| format!("spawn failed: {e}"))?;
    if !out.status.success() {
        return Err(format!("followup {} exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn read_metric(stdout: &str, key: &str) -> Result<String, String> {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .map(str::to_string)
        .ok_or_else(|| format!("no \"{key}\" line in output: {stdout:?}"))
}

fn coverage_reproduction(dir: &Path) -> Outcome {
    let start = Instant::now();
    followup(&["gen-dataset", "--n", "100", "--seed", "42", "--out", "ds.json"], dir)?;
    let out = followup(&["simulate", "--dataset", "ds.json", "--seed", "42", "--out", "full"], dir)?;
    let elapsed = start.elapsed();
    let cov = read_metric(&out, "coverage")?;
    ensure(cov == "1.000", || format!("coverage {cov}"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    let lines = std::fs::read_to_string(dir.join("full/results.ndjson")).map_err(|e| e.to_string())?;
    ensure(lines.lines().count() == 100, || "results.ndjson does not hold 100 results".into())?;
    Ok(format!("coverage: {cov} over 100 cases in {:.2}s", elapsed.as_secs_f64()))
}

fn baseline_degradation(dir: &Path) -> Outcome {
    let out = followup(
        &["simulate", "--dataset", "ds.json", "--seed", "42", "--out", "baseline", "--disable-field-tracking"],
        dir,
    )?;
    let cov: f64 = read_metric(&out, "coverage")?.parse().map_err(|e| format!("{e}"))?;
    ensure(cov < 1.0, || format!("baseline coverage {cov}"))?;
    Ok(format!("coverage without field tracking: {cov:.3}"))
}

fn ablation_direction(dir: &Path) -> Outcome {
    let stdout = followup(&["ablate", "--dataset", "ds.json", "--repeats", "5", "--seed", "42", "--out", "ablate"], dir)?;
    ensure(stdout.lines().count() == 5, || format!("unexpected table: {stdout}"))?;
    let template = Arc::new(Template::demo());
    let mut accs = Vec::new();
    for seed in [42u64, 7, 1234] {
        let ds = generate_dataset(&template, 100, seed).map_err(|e| e.to_string())?;
        let table = run_ablation(&ds, &template, &AblationSetting::ALL, 5, seed, &SimStack::scripted())
            .map_err(|e| e.to_string())?;
        let [d, n, f] = AblationSetting::ALL.map(|s| table.get(s).cloned().expect("row"));
        ensure(d.choice_accuracy < n.choice_accuracy && n.choice_accuracy <= f.choice_accuracy, || {
            format!("seed {seed}: choice accuracy {} / {} / {}", d.choice_accuracy, n.choice_accuracy, f.choice_accuracy)
        })?;
        let (dm, nm, fm) = (d.numeric_mae.unwrap_or(f64::NAN), n.numeric_mae.unwrap_or(f64::NAN), f.numeric_mae.unwrap_or(f64::NAN));
        ensure(dm > nm && nm >= fm, || format!("seed {seed}: numeric MAE {dm} / {nm} / {fm}"))?;
        ensure(f.choice_accuracy >= 0.93, || format!("seed {seed}: full choice accuracy {}", f.choice_accuracy))?;
        accs.push(f.choice_accuracy);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    ensure(mean >= 0.95, || format!("mean full choice accuracy {mean}"))?;
    Ok(format!("ordering holds on seeds 42, 7, 1234; full choice accuracy {accs:.4?}, mean {mean:.4}"))
}

struct TableScorer {
    scores: HashMap<String, f64>,
    f: fn(f64) -> f64,
}

impl EntailmentScorer for TableScorer {
    fn score(&self, _premise: &str, hypothesis: &str) -> Result<f64, ScorerError> {
        Ok((self.f)(self.scores[hypothesis]))
    }
    fn hypothesis(&self, _label: &str, option: &str) -> String {
        option.to_string()
    }
}

fn choice_field(options: &[String]) -> FieldSpec {
    FieldSpec {
        id: "f".into(),
        label: "item".into(),
        kind: FieldKind::SingleChoice,
        description: String::new(),
        options: options.to_vec(),
        unit: None,
        min: None,
        max: None,
        priority: 1,
        required: true,
    }
}

fn raw(text: &str) -> RawExtraction {
    RawExtraction {
        field_id: "f".into(),
        text: text.into(),
        provider_id: "oracle".into(),
    }
}

/// Exact option match first, else the first index with the maximum score.
fn brute_force(extraction: &str, options: &[String], scores: &[f64], threshold: f64) -> Option<usize> {
    if let Some(i) = options.iter().position(|o| o.to_lowercase() == extraction.trim().to_lowercase()) {
        return Some(i);
    }
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    (scores[best] >= threshold).then_some(best)
}

fn word(rng: &mut ChaCha8Rng) -> String {
    (0..rng.gen_range(2..7)).map(|_| rng.gen_range(b'a'..=b'h') as char).collect()
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let transforms: [fn(f64) -> f64; 3] = [|x| x, |x| x * x, |x| 0.5 * x + 0.1];
    for i in 0..1000 {
        let k = rng.gen_range(1..=5);
        let mut options: Vec<String> = Vec::new();
        while options.len() < k {
            let w = word(&mut rng);
            if !options.contains(&w) {
                options.push(w);
            }
        }
        let scores: Vec<f64> = (0..k).map(|_| rng.gen_range(0..=1000) as f64 / 1000.0).collect();
        let extraction = if rng.gen_bool(0.1) {
            options[rng.gen_range(0..k)].clone()
        } else {
            (0..rng.gen_range(1..5)).map(|_| word(&mut rng)).collect::<Vec<_>>().join(" ")
        };
        let table: HashMap<String, f64> = options.iter().cloned().zip(scores.iter().copied()).collect();
        let field = choice_field(&options);
        let threshold = rng.gen_range(0..=3) as f64 / 10.0;
        let want = brute_force(&extraction, &options, &scores, threshold);
        let scorer = TableScorer { scores: table.clone(), f: transforms[0] };
        let got = verify_choice(&raw(&extraction), &field, &scorer, &VerifierConfig { threshold, text_cap: 500 });
        match (&got, want) {
            (Ok(v), Some(w)) if v.choice.as_deref() == Some(options[w].as_str()) => {}
            (Err(VerificationFailure::BelowThreshold { .. }), None) => {}
            _ => return Err(format!("instance {i}: {extraction:?} {options:?} {scores:?} gave {got:?}, brute force {want:?}")),
        }
        // monotone transforms keep the selection
        let base = select_option(&scores).map(|(j, _)| j);
        for f in &transforms[1..] {
            let mapped: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
            if select_option(&mapped).map(|(j, _)| j) != base {
                return Err(format!("instance {i}: argmax moved under a transform for {scores:?}"));
            }
            let s = TableScorer { scores: table.clone(), f: *f };
            let zero = VerifierConfig { threshold: 0.0, text_cap: 500 };
            let a = verify_choice(&raw("free form reply"), &field, &scorer, &zero).map(|v| v.choice).ok();
            let b = verify_choice(&raw("free form reply"), &field, &s, &zero).map(|v| v.choice).ok();
            if a != b {
                return Err(format!("instance {i}: verify_choice changed under a transform"));
            }
        }
    }
    Ok("1000/1000 instances match the brute-force loop; argmax stable under x^2 and 0.5x+0.1".into())
}

/// Report model that repeats the last patient line.
struct Echo;

impl ChatProvider for Echo {
    fn id(&self) -> &str {
        "echo"
    }
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let text = request
            .messages
            .last()
            .and_then(|m| m.text.lines().rev().find_map(|l| l.strip_prefix("Patient: ")))
            .unwrap_or("")
            .to_string();
        Ok(ChatResponse {
            text,
            provider_id: "echo".into(),
            latency: Duration::ZERO,
            degraded: false,
        })
    }
}

fn profile() -> PatientProfile {
    serde_json::from_value(json!({
        "patient_id": "P900", "bed_number": "4", "age": 70, "sex": "male",
        "surgery_type": "hip replacement", "surgery_date": "2026-02-10"
    }))
    .expect("profile")
}

fn random_template(rng: &mut ChaCha8Rng) -> Template {
    let fields: Vec<serde_json::Value> = (0..rng.gen_range(1..=6))
        .map(|i| match rng.gen_range(0..3) {
            0 => json!({"id": format!("f{i}"), "label": format!("item {i}"), "kind": "single_choice", "description": "d",
                        "options": (0..rng.gen_range(2..=5)).map(|k| format!("opt{k}")).collect::<Vec<_>>(), "priority": rng.gen_range(0..4)}),
            1 => json!({"id": format!("f{i}"), "label": format!("item {i}"), "kind": "numeric", "description": "d",
                        "min": 0.0, "max": 10.0, "priority": rng.gen_range(0..4)}),
            _ => json!({"id": format!("f{i}"), "label": format!("item {i}"), "kind": "free_text", "description": "d", "priority": rng.gen_range(0..4)}),
        })
        .collect();
    let doc = json!({"template_id": "rand", "version": "1", "report_title": "R", "fields": fields});
    parse_template(doc.to_string().as_bytes()).expect("random template")
}

fn liveness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut total_submissions = 0;
    for case in 0..500u64 {
        let template = random_template(&mut rng);
        let max_attempts = rng.gen_range(1..=5);
        let report: Arc<dyn ChatProvider> = match rng.gen_range(0..3) {
            0 => Arc::new(Echo),
            1 => Arc::new(FailingProvider),
            _ => Arc::new(ScriptedProvider::new(vec![ScriptEntry::new(RoleTag::ReportLlm, "", "zzz").repeating()])),
        };
        let question: Arc<dyn ChatProvider> = if rng.gen_bool(0.5) {
            Arc::new(ScriptedProvider::new(bundled_script()))
        } else {
            Arc::new(FailingProvider)
        };
        let engine = SessionEngine::new(Arc::new(template.clone()), ProviderSet { question: question.clone(), report, judge: question })
            .with_clock(Arc::new(StepClock::default()));
        let cfg = EngineConfig {
            max_attempts_per_field: max_attempts,
            verification: rng.gen_bool(0.8),
            ..EngineConfig::default()
        };
        let (mut s, _) = engine
            .start_session(format!("live-{case}"), profile(), cfg, case)
            .map_err(|e| format!("case {case}: {e}"))?;
        let bound = template.fields.len() as u32 * max_attempts;
        let mut n = 0;
        loop {
            if n >= bound {
                return Err(format!("case {case} still running after {bound} submissions"));
            }
            n += 1;
            let garbage: String = (0..rng.gen_range(1..12)).map(|_| rng.gen_range(b'q'..=b'z') as char).collect();
            match engine.submit_answer(&mut s, &garbage, Modality::Text) {
                Ok(StepOutcome::SessionComplete { .. }) => break,
                Ok(_) => {}
                Err(e) => return Err(format!("case {case}: {e}")),
            }
        }
        total_submissions += n;
        let r = s.report.as_ref().ok_or_else(|| format!("case {case}: no report"))?;
        ensure(r.entries.len() == template.fields.len(), || format!("case {case}: {} entries", r.entries.len()))?;
    }
    Ok(format!("500/500 sessions finished within their bound ({total_submissions} submissions), reports complete"))
}

fn determinism(dir: &Path) -> Outcome {
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(format!("det-{run}"));
        std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
        followup(&["gen-dataset", "--n", "100", "--seed", "42", "--out", "ds.json"], &out)?;
        followup(&["simulate", "--dataset", "ds.json", "--seed", "42", "--out", "."], &out)?;
        followup(&["ablate", "--dataset", "ds.json", "--repeats", "5", "--seed", "42", "--out", "."], &out)?;
        outputs.push(out);
    }
    let files = ["ds.json", "results.ndjson", "ablation.json", "ablation.txt"];
    for f in files {
        let a = std::fs::read(outputs[0].join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(outputs[1].join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(!a.is_empty() && a == b, || format!("{f} differs between runs"))?;
    }
    Ok(format!("{} files byte-identical across two runs", files.len()))
}

fn round_trips() -> Outcome {
    let mut templates: Vec<Vec<u8>> = vec![
        json!({"template_id": "one", "version": "1", "report_title": "One", "fields": [
            {"id": "pain", "label": "pain", "kind": "single_choice", "description": "", "options": ["Yes", "No"], "priority": 0}]}),
        json!({"template_id": "num", "version": "2", "report_title": "Vitals", "fields": [
            {"id": "hr", "label": "heart rate", "kind": "numeric", "description": "bpm", "unit": "bpm", "min": 20.0, "max": 250.0, "priority": 1}]}),
        json!({"template_id": "text", "version": "1", "report_title": "Notes", "fields": [
            {"id": "n", "label": "notes", "kind": "free_text", "description": "", "priority": 1, "required": false},
            {"id": "m", "label": "mood", "kind": "single_choice", "description": "", "options": ["good", "bad", "unsure"], "priority": 1}]}),
        json!({"template_id": "unicode", "version": "β", "report_title": "Nachsorge – Bericht", "fields": [
            {"id": "schmerz", "label": "Schmerz", "kind": "single_choice", "description": "\"q\"\nline", "options": ["Ja", "Nein"], "priority": -2}]}),
    ]
    .into_iter()
    .map(|d| serde_json::to_vec_pretty(&d).expect("json"))
    .collect();
    templates.push(serialize_template(&Template::demo()));
    templates.push(serialize_template(&Template::demo_mini()));
    for doc in &templates {
        let t = parse_template(doc).map_err(|e| e.to_string())?;
        let again = parse_template(&serialize_template(&t)).map_err(|e| e.to_string())?;
        ensure(again == t && serialize_template(&again) == serialize_template(&t), || format!("template {} changed", t.template_id))?;
    }

    let single = Arc::new(parse_template(&templates[0]).map_err(|e| e.to_string())?);
    let failing = SimStack {
        report: Some(Arc::new(FailingProvider) as Arc<dyn ChatProvider>),
        ..SimStack::scripted()
    };
    let runs: Vec<(Arc<Template>, SimStack)> = vec![
        (Arc::new(Template::demo()), SimStack::scripted()),
        (Arc::new(Template::demo_mini()), SimStack::scripted().with_noise(NoiseModel::exact())),
        (Arc::new(Template::demo()), failing),
        (single, SimStack::scripted()),
    ];
    let mut reports: Vec<Report> = Vec::new();
    for (i, (t, stack)) in runs.iter().enumerate() {
        let ds = generate_dataset(t, 4, i as u64).map_err(|e| e.to_string())?;
        for c in &ds.cases {
            reports.push(run_case(c, t, &EngineConfig::default(), stack, 3).map_err(|e| e.to_string())?.report);
        }
    }
    let mut all_failed = 0;
    for r in &reports {
        let doc = render_report(r, ReportFormat::Structured);
        let back = parse_report(&doc).map_err(|e| e.to_string())?;
        ensure(&back == r && render_report(&back, ReportFormat::Structured) == doc, || format!("report {} changed", r.report_id))?;
        all_failed += usize::from(r.entries.iter().all(|e| e.status == EntryStatus::Failed));
    }
    ensure(all_failed > 0, || "no all-failed report in the corpus".into())?;
    ensure(reports.iter().any(|r| r.entries.len() == 1), || "no single-field report".into())?;
    let total = templates.len() + reports.len();
    ensure(total >= 20, || format!("corpus has only {total} documents"))?;
    Ok(format!("{total} documents ({} templates, {} reports, {all_failed} all-failed) round-trip", templates.len(), reports.len()))
}

fn metric_units() -> Outcome {
    let f1 = text_f1("no nausea", "no nausea reported");
    ensure((f1 - 0.8).abs() <= 1e-9, || format!("text_f1 = {f1}"))?;
    let mae = numeric_mae(&[Some(36.5), Some(37.0)], &[36.5, 37.5]).map_err(|e| e.to_string())?;
    ensure(mae == Some(0.25), || format!("numeric_mae = {mae:?}"))?;
    Ok(format!("text_f1 = {f1}, numeric_mae = {}", mae.unwrap_or(f64::NAN)))
}

fn main() {
    let dir = tempfile::tempdir().expect("tempdir");
    let d = dir.path();
    let criteria: Vec<(&str, Check)> = vec![
        ("coverage reproduction", Box::new(|| coverage_reproduction(d))),
        ("baseline degradation", Box::new(|| baseline_degradation(d))),
        ("ablation direction", Box::new(|| ablation_direction(d))),
        ("verification oracle equivalence", Box::new(oracle_equivalence)),
        ("liveness", Box::new(liveness)),
        ("determinism", Box::new(|| determinism(d))),
        ("round-trips", Box::new(round_trips)),
        ("metric unit checks", Box::new(metric_units)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
