use std::collections::BTreeMap;

use thiserror::Error;
use tracing::warn;

use crate::provider::{build_judge_prompt, complete_or_degrade, ChatProvider};
use crate::session::Turn;

/// Default rubric aspect names.
pub const ASPECTS: [&str; 6] = ["clarity", "empathy", "efficiency", "coverage", "burden", "overall"];

#[derive(Debug, Error, PartialEq)]
pub enum JudgeParseError {
    #[error("item \"{0}\" is not of the form aspect: score")]
    Item(String),
    #[error("unknown aspect \"{0}\"")]
    UnknownAspect(String),
    #[error("aspect \"{0}\" appears twice")]
    Duplicate(String),
    #[error("score for \"{0}\" must be an integer from 1 to 5")]
    Score(String),
    #[error("aspect \"{0}\" is missing")]
    Missing(String),
}

/// Parse `aspect: score` items separated by commas or newlines. Every aspect
/// must appear exactly once.
pub fn parse_judge_reply(reply: &str, aspects: &[String]) -> Result<BTreeMap<String, u8>, JudgeParseError> {
    let mut out = BTreeMap::new();
    for item in reply.split([',', '\n']).map(str::trim).filter(|s| !s.is_empty()) {
        let item = item.trim_end_matches('.');
        let (name, score) = item.split_once(':').ok_or_else(|| JudgeParseError::Item(item.to_string()))?;
        let name = name.trim().to_ascii_lowercase();
        if !aspects.iter().any(|a| a == &name) {
            return Err(JudgeParseError::UnknownAspect(name));
        }
        let score: u8 = score
            .trim()
            .parse()
            .ok()
            .filter(|s| (1..=5).contains(s))
            .ok_or_else(|| JudgeParseError::Score(name.clone()))?;
        if out.insert(name.clone(), score).is_some() {
            return Err(JudgeParseError::Duplicate(name));
        }
    }
    if let Some(a) = aspects.iter().find(|a| !out.contains_key(*a)) {
        return Err(JudgeParseError::Missing(a.clone()));
    }
    Ok(out)
}

/// Likert scores from the judge; `None` when the judge is unavailable or its
/// reply does not parse.
pub fn judge_satisfaction(transcript: &[Turn], judge: &dyn ChatProvider, aspects: &[String]) -> Option<BTreeMap<String, u8>> {
    let resp = complete_or_degrade(judge, &build_judge_prompt(transcript, aspects));
    if resp.degraded {
        return None;
    }
    match parse_judge_reply(&resp.text, aspects) {
        Ok(m) => Some(m),
        Err(e) => {
            warn!(error = %e, "judge reply rejected");
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn aspects() -> Vec<String> {
        ASPECTS.iter().map(|a| a.to_string()).collect()
    }

    #[test]
    fn parses_full_reply() {
        let m = parse_judge_reply(
            "clarity: 5, empathy: 4, efficiency: 3, coverage: 4, burden: 2, overall: 4",
            &aspects(),
        )
        .unwrap();
        assert_eq!(m["clarity"], 5);
        assert_eq!(m["burden"], 2);
        assert_eq!(m.len(), 6);
    }

    #[test]
    fn newline_separated_and_case_insensitive() {
        let m = parse_judge_reply("Clarity: 4\nEmpathy: 4\nefficiency:4\ncoverage: 4\nburden: 4\noverall: 4.", &aspects()).unwrap();
        assert!(m.values().all(|&v| v == 4));
    }

    #[test]
    fn rejects_malformed() {
        let a = aspects();
        assert!(matches!(parse_judge_reply("great robot", &a), Err(JudgeParseError::Item(_))));
        assert_eq!(
            parse_judge_reply("clarity: 9", &a),
            Err(JudgeParseError::Score("clarity".into()))
        );
        assert_eq!(
            parse_judge_reply("clarity: 4", &a),
            Err(JudgeParseError::Missing("empathy".into()))
        );
        assert_eq!(
            parse_judge_reply("clarity: 4, clarity: 3", &a),
            Err(JudgeParseError::Duplicate("clarity".into()))
        );
        assert_eq!(
            parse_judge_reply("warmth: 4", &a),
            Err(JudgeParseError::UnknownAspect("warmth".into()))
        );
    }
}
