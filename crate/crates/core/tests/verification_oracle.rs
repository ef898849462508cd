use std::collections::HashMap;

use followup_core::template::{FieldKind, FieldSpec};
use followup_core::verification::{
    select_option, verify_choice, EntailmentScorer, RawExtraction, ScorerError, VerificationFailure, VerifierConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scores looked up per hypothesis (the option text), passed through `f`.
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

/// Brute force: exact (case-insensitive) option match, else the first index
/// holding the maximum score, rejected below the threshold.
fn oracle(extraction: &str, options: &[String], scores: &[f64], threshold: f64) -> Option<usize> {
    let t = extraction.trim();
    if t.is_empty() {
        return None;
    }
    for (i, o) in options.iter().enumerate() {
        if o.trim().to_lowercase() == t.to_lowercase() {
            return Some(i);
        }
    }
    let mut best = 0;
    for i in 0..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    if scores[best] >= threshold {
        Some(best)
    } else {
        None
    }
}

fn word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(2..7);
    (0..len).map(|_| rng.gen_range(b'a'..=b'h') as char).collect()
}

#[test]
fn verify_choice_matches_brute_force_on_1000_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut exact_hits = 0;
    for _ in 0..1000 {
        let k = rng.gen_range(2..=5);
        let mut options: Vec<String> = Vec::new();
        while options.len() < k {
            let w = word(&mut rng);
            if !options.contains(&w) {
                options.push(w);
            }
        }
        // coarse scores so ties happen
        let scores: Vec<f64> = (0..k).map(|_| rng.gen_range(0..=10) as f64 / 10.0).collect();
        let extraction = if rng.gen_bool(0.15) {
            exact_hits += 1;
            options[rng.gen_range(0..k)].to_uppercase()
        } else {
            (0..rng.gen_range(1..5)).map(|_| word(&mut rng)).collect::<Vec<_>>().join(" ")
        };
        let threshold = rng.gen_range(0..=5) as f64 / 10.0;
        let scorer = TableScorer {
            scores: options.iter().cloned().zip(scores.iter().copied()).collect(),
            f: |x| x,
        };
        let field = choice_field(&options);
        let got = verify_choice(&raw(&extraction), &field, &scorer, &VerifierConfig { threshold, text_cap: 500 });
        let want = oracle(&extraction, &options, &scores, threshold);
        match (got, want) {
            (Ok(v), Some(i)) => assert_eq!(v.choice.as_deref(), Some(options[i].as_str()), "{extraction:?} {scores:?}"),
            (Err(VerificationFailure::BelowThreshold { .. }), None) => {}
            (got, want) => panic!("mismatch for {extraction:?} {options:?} {scores:?}: {got:?} vs {want:?}"),
        }
    }
    assert!(exact_hits > 50);
}

fn quantized_scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0u32..=1000).prop_map(|q| q as f64 / 1000.0), 1..=5)
}

proptest! {
    #[test]
    fn argmax_is_invariant_under_monotone_maps(scores in quantized_scores()) {
        let base = select_option(&scores).map(|(i, _)| i);
        let squared: Vec<f64> = scores.iter().map(|x| x * x).collect();
        let affine: Vec<f64> = scores.iter().map(|x| 0.5 * x + 0.1).collect();
        prop_assert_eq!(select_option(&squared).map(|(i, _)| i), base);
        prop_assert_eq!(select_option(&affine).map(|(i, _)| i), base);
    }

    #[test]
    fn verify_choice_selection_survives_score_transforms(scores in quantized_scores()) {
        let options: Vec<String> = (0..scores.len()).map(|i| format!("option{i}")).collect();
        let field = choice_field(&options);
        let table: HashMap<String, f64> = options.iter().cloned().zip(scores.iter().copied()).collect();
        let cfg = VerifierConfig { threshold: 0.0, text_cap: 500 };
        let pick = |f: fn(f64) -> f64| {
            let s = TableScorer { scores: table.clone(), f };
            verify_choice(&raw("free form answer"), &field, &s, &cfg).unwrap().choice
        };
        let id = pick(|x| x);
        prop_assert_eq!(&pick(|x| x * x), &id);
        prop_assert_eq!(&pick(|x| 0.5 * x + 0.1), &id);
    }

    #[test]
    fn selected_value_is_a_maximum(scores in prop::collection::vec(0.0f64..=1.0, 1..=8)) {
        let (i, best) = select_option(&scores).unwrap();
        prop_assert!(scores.iter().all(|&s| s <= best));
        prop_assert!(scores[..i].iter().all(|&s| s < best));
    }
}
