//! Pre-scoring filters: target-language verification and a distinct-word
//! floor against degenerate repetition.
//!
//! Language identification is a rank-order character n-gram classifier
//! trained from the corpus's own knowledge documents, so the whole check
//! runs offline with no external model. The identifier is behind a trait,
//! so an external classifier can be swapped in.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::corpus::DocVariant;
use crate::retrieval::tokenize;

/// Why a response failed the pre-scoring filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SanityFailure {
    WrongLanguage,
    TooFewDistinctWords,
}

/// Outcome of [`SanityChecker::check`]. `passed` holds exactly when
/// `reasons` is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    /// Best language code, or "other" when no profile is a confident match.
    pub detected_language: String,
    pub confidence: f64,
    pub distinct_words: u32,
    pub passed: bool,
    pub reasons: Vec<SanityFailure>,
}

/// Number of unique tokens under the retrieval tokenizer (bigrams for
/// unsegmented scripts, so "word" stays defined for zh/ja/th).
pub fn distinct_word_count(text: &str, language: &str) -> u32 {
    let mut tokens = tokenize(text, language);
    tokens.sort();
    tokens.dedup();
    tokens.len() as u32
}

/// Pluggable language classifier: best code (or "other") plus a confidence
/// in [0, 1].
pub trait LanguageIdentifier: Send + Sync {
    fn identify(&self, text: &str) -> (String, f64);
}

/// Profile size: ranked list of the most frequent character n-grams.
const PROFILE_SIZE: usize = 300;
/// N-gram orders used for profiles.
const MAX_NGRAM: usize = 3;

/// Rank-order character n-gram classifier (out-of-place distance over the
/// top-300 n-grams, n in 1..=3).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NGramIdentifier {
    profiles: BTreeMap<String, BTreeMap<String, u32>>,
    margin_threshold: f64,
}

fn normalize(text: &str) -> Vec<char> {
    let mut out = Vec::new();
    let mut pending_space = false;
    for ch in text.to_lowercase().chars() {
        if ch.is_alphabetic() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(ch);
        } else {
            pending_space = true;
        }
    }
    out
}

/// Top-300 n-grams of `text` with rank (most frequent first, ties broken
/// lexicographically so training is order-independent) and raw count.
fn profile_with_counts(text: &str) -> Vec<(String, u32, u64)> {
    let chars = normalize(text);
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for n in 1..=MAX_NGRAM {
        if chars.len() < n {
            break;
        }
        for window in chars.windows(n) {
            let gram: String = window.iter().collect();
            if gram.trim().is_empty() {
                continue;
            }
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
        .into_iter()
        .take(PROFILE_SIZE)
        .enumerate()
        .map(|(rank, (gram, count))| (gram, rank as u32, count))
        .collect()
}

fn profile(text: &str) -> BTreeMap<String, u32> {
    profile_with_counts(text)
        .into_iter()
        .map(|(gram, rank, _)| (gram, rank))
        .collect()
}

/// Out-of-place distance between a text profile and a language profile,
/// normalized to [0, 1]. Each gram's rank displacement (capped at the
/// profile size for absent grams) is weighted by the gram's frequency in
/// the text, so the discriminative frequent grams dominate and one-off
/// trigram noise does not.
fn distance(text_profile: &[(String, u32, u64)], lang_profile: &BTreeMap<String, u32>) -> f64 {
    if text_profile.is_empty() {
        return 1.0;
    }
    let cap = PROFILE_SIZE as u64;
    let mut weighted = 0.0f64;
    let mut weight = 0.0f64;
    for (gram, rank, count) in text_profile {
        let oop = match lang_profile.get(gram) {
            Some(&lang_rank) => (*rank as i64 - lang_rank as i64).unsigned_abs(),
            None => cap,
        };
        weighted += *count as f64 * oop as f64;
        weight += *count as f64;
    }
    weighted / (weight * cap as f64)
}

impl NGramIdentifier {
    /// Train one profile per language from raw texts.
    pub fn train<S: AsRef<str>>(texts: &BTreeMap<String, S>, margin_threshold: f64) -> Self {
        let profiles = texts
            .iter()
            .map(|(code, text)| (code.clone(), profile(text.as_ref())))
            .collect();
        NGramIdentifier {
            profiles,
            margin_threshold,
        }
    }

    /// Train from the original-variant knowledge docs of `corpus`, one
    /// profile per language present.
    pub fn train_from_corpus(corpus: &Corpus, margin_threshold: f64) -> Self {
        let mut texts: BTreeMap<String, String> = BTreeMap::new();
        for doc in corpus.docs() {
            if doc.variant == DocVariant::Original {
                let entry = texts.entry(doc.language.clone()).or_default();
                entry.push_str(&doc.text);
                entry.push('\n');
            }
        }
        Self::train(&texts, margin_threshold)
    }

    pub fn languages(&self) -> Vec<&str> {
        self.profiles.keys().map(String::as_str).collect()
    }

    /// Persist alongside the digest of the corpus the profiles were trained
    /// from.
    pub fn save(&self, path: &Path, corpus_digest: &str) -> Result<(), std::io::Error> {
        #[derive(Serialize)]
        struct CacheFile<'a> {
            corpus_digest: &'a str,
            identifier: &'a NGramIdentifier,
        }
        let body = serde_json::to_string(&CacheFile {
            corpus_digest,
            identifier: self,
        })
        .expect("profile serialization cannot fail");
        std::fs::write(path, body)
    }

    /// Reload a cached identifier; `None` when missing, unreadable, or
    /// trained from a different corpus.
    pub fn load_cached(path: &Path, corpus_digest: &str) -> Option<Self> {
        #[derive(Deserialize)]
        struct CacheFile {
            corpus_digest: String,
            identifier: NGramIdentifier,
        }
        let body = std::fs::read_to_string(path).ok()?;
        let cached: CacheFile = serde_json::from_str(&body).ok()?;
        (cached.corpus_digest == corpus_digest).then_some(cached.identifier)
    }
}

impl LanguageIdentifier for NGramIdentifier {
    fn identify(&self, text: &str) -> (String, f64) {
        let mut text_profile = profile_with_counts(text);
        if text_profile.is_empty() || self.profiles.is_empty() {
            return ("other".into(), 0.0);
        }
        // grams absent from every trained profile cannot separate languages;
        // they would charge each candidate the same cap
        text_profile.retain(|(gram, _, _)| self.profiles.values().any(|p| p.contains_key(gram)));
        let mut distances: Vec<(&str, f64)> = self
            .profiles
            .iter()
            .map(|(code, lang_profile)| (code.as_str(), distance(&text_profile, lang_profile)))
            .collect();
        distances.sort_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .expect("finite")
                .then_with(|| a.0.cmp(b.0))
        });
        let (best, d1) = distances[0];
        let confidence = match distances.get(1) {
            Some(&(_, d2)) if d2 > 0.0 => (d2 - d1) / d2,
            Some(_) => 0.0,
            None => 1.0,
        };
        if confidence < self.margin_threshold {
            ("other".into(), confidence)
        } else {
            (best.to_string(), confidence)
        }
    }
}

/// Applies both checks; a response is scored only when it passes.
pub struct SanityChecker {
    identifier: Box<dyn LanguageIdentifier>,
    min_distinct: u32,
}

impl SanityChecker {
    pub fn new(identifier: Box<dyn LanguageIdentifier>, min_distinct: u32) -> Self {
        SanityChecker {
            identifier,
            min_distinct,
        }
    }

    /// Passed iff the detected language equals `target` and the response has
    /// at least the configured number of distinct words.
    pub fn check(&self, response: &str, target: &str) -> SanityReport {
        let (detected_language, confidence) = if response.trim().is_empty() {
            ("other".into(), 0.0)
        } else {
            self.identifier.identify(response)
        };
        let distinct_words = distinct_word_count(response, target);
        let mut reasons = Vec::new();
        if detected_language != target {
            reasons.push(SanityFailure::WrongLanguage);
        }
        if distinct_words < self.min_distinct {
            reasons.push(SanityFailure::TooFewDistinctWords);
        }
        SanityReport {
            detected_language,
            confidence,
            distinct_words,
            passed: reasons.is_empty(),
            reasons,
        }
    }
}
