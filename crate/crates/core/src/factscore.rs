//! Atomic-fact decomposition, support judgment, and penalized scoring for a
//! single response.
//!
//! A response is split into sentences; the evaluator model breaks each
//! sentence into independent claims; every claim is judged against passages
//! retrieved from the designated knowledge document; the supported fraction
//! is scaled by a length penalty for short answers.

use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError};
use crate::retrieval::{split_sentences, Passage, PassageIndex};

/// One independent claim extracted from a response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicFact {
    pub text: String,
    /// Ordinal of the source sentence within the response.
    pub sentence_index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Clean,
    Fallback,
}

/// Judgment for one fact, with everything shown to the judge kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactVerdict {
    pub fact: AtomicFact,
    pub supported: bool,
    pub passages: Vec<(Passage, f64)>,
    pub raw_reply: String,
    pub parse_status: ParseStatus,
}

/// Which side of the boundary the length penalty applies on. The displayed
/// formula penalizes `num_facts <= gamma`; the prose reading would be strict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaBoundary {
    #[default]
    Le,
    Lt,
}

/// Penalized factual-precision score for one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub num_facts: u32,
    pub num_supported: u32,
    pub gamma: u32,
    pub penalty: f64,
    pub score: f64,
    /// Set when the response produced zero facts; such scores are 0 by
    /// convention rather than an error so batch runs stay total.
    pub degenerate: bool,
}

#[derive(Debug, Error)]
pub enum FactScoreError {
    #[error("response is empty; sanity checks must run before decomposition")]
    EmptyResponse,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

// ---------------------------------------------------------------------------
// Scoring math

/// Length penalty `exp((1 - gamma) / num_facts)` for short responses, 1.0
/// once a response carries more facts than `gamma`.
pub fn penalty(num_facts: u32, gamma: u32) -> f64 {
    penalty_bounded(num_facts, gamma, GammaBoundary::Le)
}

pub fn penalty_bounded(num_facts: u32, gamma: u32, boundary: GammaBoundary) -> f64 {
    assert!(num_facts >= 1, "penalty is undefined for zero facts");
    assert!(gamma >= 1, "gamma must be >= 1");
    let penalized = match boundary {
        GammaBoundary::Le => num_facts <= gamma,
        GammaBoundary::Lt => num_facts < gamma,
    };
    if penalized {
        ((1.0 - gamma as f64) / num_facts as f64).exp()
    } else {
        1.0
    }
}

/// Fold verdicts into the final score: `penalty * num_supported / num_facts`.
/// Zero verdicts score 0 with `penalty = exp(1 - gamma)` and the degenerate
/// flag set.
pub fn score(verdicts: &[FactVerdict], gamma: u32) -> ScoreResult {
    score_bounded(verdicts, gamma, GammaBoundary::Le)
}

pub fn score_bounded(verdicts: &[FactVerdict], gamma: u32, boundary: GammaBoundary) -> ScoreResult {
    assert!(gamma >= 1, "gamma must be >= 1");
    let num_facts = verdicts.len() as u32;
    let num_supported = verdicts.iter().filter(|v| v.supported).count() as u32;
    if num_facts == 0 {
        return ScoreResult {
            num_facts: 0,
            num_supported: 0,
            gamma,
            penalty: (1.0 - gamma as f64).exp(),
            score: 0.0,
            degenerate: true,
        };
    }
    let penalty = penalty_bounded(num_facts, gamma, boundary);
    ScoreResult {
        num_facts,
        num_supported,
        gamma,
        penalty,
        score: penalty * num_supported as f64 / num_facts as f64,
        degenerate: false,
    }
}

/// Decide a judge reply: the first standalone "true"/"false" (any case)
/// wins; a reply containing neither is conservatively Not-supported with
/// fallback status.
pub fn parse_verdict(raw: &str) -> (bool, ParseStatus) {
    static VERDICT: OnceLock<Regex> = OnceLock::new();
    let re = VERDICT.get_or_init(|| Regex::new(r"(?i)\b(true|false)\b").expect("static regex"));
    match re.find(raw) {
        Some(m) => (m.as_str().eq_ignore_ascii_case("true"), ParseStatus::Clean),
        None => (false, ParseStatus::Fallback),
    }
}

// ---------------------------------------------------------------------------
// Decomposition

/// One decomposition exemplar shown to the evaluator before the real
/// sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demo {
    pub sentence: String,
    pub facts: Vec<String>,
}

/// Few-shot demonstration set, shipped as a line-delimited data file.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DemoSet {
    demos: Vec<Demo>,
}

impl DemoSet {
    pub fn empty() -> Self {
        DemoSet::default()
    }

    pub fn new(demos: Vec<Demo>) -> Self {
        DemoSet { demos }
    }

    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let body = std::fs::read_to_string(path)?;
        let mut demos = Vec::new();
        for (idx, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let demo: Demo = serde_json::from_str(line).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}:{}: {e}", path.display(), idx + 1),
                )
            })?;
            demos.push(demo);
        }
        Ok(DemoSet { demos })
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }
}

const DECOMPOSE_INSTRUCTION: &str =
    "Please breakdown the following sentence into independent facts:";

fn decompose_prompt(demos: &DemoSet, sentence: &str) -> String {
    let mut prompt = String::new();
    for demo in &demos.demos {
        prompt.push_str(DECOMPOSE_INSTRUCTION);
        prompt.push(' ');
        prompt.push_str(&demo.sentence);
        prompt.push('\n');
        for fact in &demo.facts {
            prompt.push_str("- ");
            prompt.push_str(fact);
            prompt.push('\n');
        }
        prompt.push('\n');
    }
    prompt.push_str(DECOMPOSE_INSTRUCTION);
    prompt.push(' ');
    prompt.push_str(sentence);
    prompt
}

/// Break `response` into atomic facts by prompting the evaluator once per
/// sentence. Facts come back in response order; a sentence whose reply
/// contains no "- " lines contributes nothing, with a logged warning.
pub fn decompose(
    response: &str,
    language: &str,
    gateway: &Gateway,
    eval_backend: &str,
    demos: &DemoSet,
) -> Result<Vec<AtomicFact>, FactScoreError> {
    if response.trim().is_empty() {
        return Err(FactScoreError::EmptyResponse);
    }
    let mut facts = Vec::new();
    for (sentence_index, span) in split_sentences(response).iter().enumerate() {
        let sentence = span.text(response);
        let request = gateway.request(eval_backend, decompose_prompt(demos, sentence))?;
        let reply = gateway.complete(eval_backend, &request)?;
        let mut parsed = 0usize;
        for line in reply.text.lines() {
            if let Some(fact) = line.trim_start().strip_prefix("- ") {
                let fact = fact.trim();
                if !fact.is_empty() {
                    facts.push(AtomicFact {
                        text: fact.to_string(),
                        sentence_index: sentence_index as u32,
                    });
                    parsed += 1;
                }
            }
        }
        if parsed == 0 {
            log::warn!(
                "decomposition produced zero facts for {language} sentence {sentence_index}: {:?}",
                reply.text.chars().take(60).collect::<String>()
            );
        }
    }
    Ok(facts)
}

// ---------------------------------------------------------------------------
// Judgment

fn judge_prompt(passages: &[(Passage, f64)], fact: &str) -> String {
    let blocks: Vec<&str> = passages.iter().map(|(p, _)| p.text.as_str()).collect();
    format!(
        "{}\n\nInput: {} True or False?\nOutput:",
        blocks.join("\n\n"),
        fact
    )
}

/// Judge one fact against the top-`k` passages of `index`. Empty retrieval
/// means nothing supports the fact: Not-supported with fallback status, no
/// LM call.
pub fn judge(
    fact: &AtomicFact,
    index: &PassageIndex,
    language: &str,
    gateway: &Gateway,
    eval_backend: &str,
    k: usize,
) -> Result<FactVerdict, FactScoreError> {
    let passages = index.retrieve(&fact.text, language, k);
    if passages.is_empty() {
        return Ok(FactVerdict {
            fact: fact.clone(),
            supported: false,
            passages,
            raw_reply: String::new(),
            parse_status: ParseStatus::Fallback,
        });
    }
    let request = gateway.request(eval_backend, judge_prompt(&passages, &fact.text))?;
    let reply = gateway.complete(eval_backend, &request)?;
    let (supported, parse_status) = parse_verdict(&reply.text);
    Ok(FactVerdict {
        fact: fact.clone(),
        supported,
        passages,
        raw_reply: reply.text,
        parse_status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DocVariant, KnowledgeDoc};
    use crate::gateway::{FixtureBackend, RequestDefaults};
    use crate::retrieval::{build_index, chunk};

    fn verdicts(flags: &[bool]) -> Vec<FactVerdict> {
        flags
            .iter()
            .enumerate()
            .map(|(i, &supported)| FactVerdict {
                fact: AtomicFact {
                    text: format!("fact {i}"),
                    sentence_index: i as u32,
                },
                supported,
                passages: Vec::new(),
                raw_reply: String::new(),
                parse_status: ParseStatus::Clean,
            })
            .collect()
    }

    fn fixture_gateway(backend: FixtureBackend) -> Gateway {
        Gateway::builder()
            .backend(Box::new(backend), RequestDefaults::new("m", 0.0), 4)
            .build()
    }

    // exp(-9) and exp(-0.9), frozen from a high-precision evaluation of
    // exp((1 - gamma) / n)
    const EXP_NEG_9: f64 = 1.2340980408667956e-4;
    const EXP_NEG_0_9: f64 = 0.4065696597405991;

    #[test]
    fn penalty_above_gamma_is_one() {
        assert_eq!(penalty(100, 10), 1.0);
        assert_eq!(penalty(11, 10), 1.0);
    }

    #[test]
    fn penalty_single_fact() {
        assert!((penalty(1, 10) - EXP_NEG_9).abs() < 1e-12);
    }

    #[test]
    fn penalty_at_boundary_follows_the_formula() {
        assert!((penalty(10, 10) - EXP_NEG_0_9).abs() < 1e-12);
        // the strict reading leaves the boundary unpenalized
        assert_eq!(penalty_bounded(10, 10, GammaBoundary::Lt), 1.0);
        assert!((penalty_bounded(9, 10, GammaBoundary::Lt) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn hundred_facts_ninety_nine_supported_scores_99_percent() {
        let mut flags = vec![true; 100];
        flags[17] = false;
        let result = score(&verdicts(&flags), 10);
        assert_eq!(result.score, 0.99);
        assert_eq!(result.penalty, 1.0);
        assert_eq!(result.num_facts, 100);
        assert_eq!(result.num_supported, 99);
    }

    #[test]
    fn single_supported_fact_is_penalized_not_perfect() {
        let result = score(&verdicts(&[true]), 10);
        assert!((result.score - EXP_NEG_9).abs() < 1e-12);
        assert!(result.score < 1e-3);
    }

    #[test]
    fn zero_supported_scores_zero() {
        let result = score(&verdicts(&[false; 7]), 10);
        assert_eq!(result.score, 0.0);
        assert!(!result.degenerate);
    }

    #[test]
    fn zero_facts_is_degenerate() {
        let result = score(&[], 10);
        assert_eq!(result.score, 0.0);
        assert!(result.degenerate);
        assert!((result.penalty - EXP_NEG_9).abs() < 1e-12);
    }

    #[test]
    fn parse_verdict_cases() {
        assert_eq!(parse_verdict("TRUE."), (true, ParseStatus::Clean));
        assert_eq!(
            parse_verdict("The statement is false"),
            (false, ParseStatus::Clean)
        );
        assert_eq!(
            parse_verdict("False, because the dates differ"),
            (false, ParseStatus::Clean)
        );
        assert_eq!(
            parse_verdict("I cannot determine this"),
            (false, ParseStatus::Fallback)
        );
        // embedded words do not count as standalone tokens
        assert_eq!(
            parse_verdict("untrue and falsely put"),
            (false, ParseStatus::Fallback)
        );
        assert_eq!(parse_verdict(""), (false, ParseStatus::Fallback));
    }

    #[test]
    fn decompose_parses_dash_lines_in_order() {
        let backend = FixtureBackend::new("eval").with_rule(
            r"independent facts: Marie Curie",
            "- Marie Curie was a physicist.\n- Marie Curie was born in 1867.",
        );
        let gw = fixture_gateway(backend);
        let facts = decompose(
            "Marie Curie was a physicist born in 1867.",
            "en",
            &gw,
            "eval",
            &DemoSet::empty(),
        )
        .unwrap();
        assert_eq!(facts.len(), 2);
        assert_eq!(facts[0].text, "Marie Curie was a physicist.");
        assert_eq!(facts[1].text, "Marie Curie was born in 1867.");
        assert_eq!(facts[0].sentence_index, 0);
    }

    #[test]
    fn decompose_preserves_sentence_order() {
        let backend = FixtureBackend::new("eval")
            .with_rule(
                r"independent facts: First ada sentence\.$",
                "- fact from s0.",
            )
            .with_rule(
                r"independent facts: Second omar sentence\.$",
                "- fact from s1.",
            );
        let gw = fixture_gateway(backend);
        let facts = decompose(
            "First ada sentence. Second omar sentence.",
            "en",
            &gw,
            "eval",
            &DemoSet::empty(),
        )
        .unwrap();
        assert_eq!(facts.len(), 2);
        assert_eq!(facts[0].text, "fact from s0.");
        assert_eq!(facts[0].sentence_index, 0);
        assert_eq!(facts[1].text, "fact from s1.");
        assert_eq!(facts[1].sentence_index, 1);
    }

    #[test]
    fn decompose_rejects_empty_response() {
        let gw = fixture_gateway(FixtureBackend::new("eval"));
        assert!(matches!(
            decompose("   ", "en", &gw, "eval", &DemoSet::empty()),
            Err(FactScoreError::EmptyResponse)
        ));
    }

    #[test]
    fn decompose_zero_fact_sentence_contributes_nothing() {
        let backend = FixtureBackend::new("eval").with_rule(r"independent facts:", "no list here");
        let gw = fixture_gateway(backend);
        let facts = decompose("One sentence.", "en", &gw, "eval", &DemoSet::empty()).unwrap();
        assert!(facts.is_empty());
    }

    #[test]
    fn demo_prompt_layout() {
        let demos = DemoSet::new(vec![Demo {
            sentence: "He was born in 1900 in Lyon.".into(),
            facts: vec!["He was born in 1900.".into(), "He was born in Lyon.".into()],
        }]);
        let prompt = decompose_prompt(&demos, "She paints.");
        let expected = "Please breakdown the following sentence into independent facts: He was born in 1900 in Lyon.\n- He was born in 1900.\n- He was born in Lyon.\n\nPlease breakdown the following sentence into independent facts: She paints.";
        assert_eq!(prompt, expected);
    }

    fn english_index() -> PassageIndex {
        let doc = KnowledgeDoc {
            entity_id: "e1".into(),
            language: "en".into(),
            variant: DocVariant::Original,
            text: "Ada Lumen studied glass optics in Prague. She later founded a small laboratory."
                .to_string(),
        };
        build_index(chunk(&doc, 64)).unwrap()
    }

    #[test]
    fn judge_true_reply() {
        let gw = fixture_gateway(FixtureBackend::new("eval").with_rule("True or False", "True"));
        let fact = AtomicFact {
            text: "Ada Lumen studied optics.".into(),
            sentence_index: 0,
        };
        let verdict = judge(&fact, &english_index(), "en", &gw, "eval", 5).unwrap();
        assert!(verdict.supported);
        assert_eq!(verdict.parse_status, ParseStatus::Clean);
        assert!(!verdict.passages.is_empty());
        assert_eq!(verdict.raw_reply, "True");
    }

    #[test]
    fn judge_false_with_explanation() {
        let gw = fixture_gateway(
            FixtureBackend::new("eval").with_rule("True or False", "False, because dates differ."),
        );
        let fact = AtomicFact {
            text: "Ada Lumen studied optics.".into(),
            sentence_index: 0,
        };
        let verdict = judge(&fact, &english_index(), "en", &gw, "eval", 5).unwrap();
        assert!(!verdict.supported);
        assert_eq!(verdict.parse_status, ParseStatus::Clean);
    }

    #[test]
    fn judge_with_no_retrieved_passages_falls_back() {
        let gw = fixture_gateway(FixtureBackend::new("eval"));
        let fact = AtomicFact {
            text: "完全不相关的词汇".into(),
            sentence_index: 0,
        };
        let verdict = judge(&fact, &english_index(), "en", &gw, "eval", 5).unwrap();
        assert!(!verdict.supported);
        assert_eq!(verdict.parse_status, ParseStatus::Fallback);
        assert!(verdict.passages.is_empty());
        assert!(verdict.raw_reply.is_empty());
    }

    #[test]
    fn judge_prompt_layout() {
        let index = english_index();
        let passages = index.retrieve("Ada Lumen optics", "en", 5);
        let prompt = judge_prompt(&passages, "Ada studied optics.");
        assert!(prompt.ends_with("\n\nInput: Ada studied optics. True or False?\nOutput:"));
        assert!(prompt.starts_with("Ada Lumen studied glass optics in Prague."));
    }
}
