//! Passage chunking and BM25 ranking over a knowledge document.
//!
//! Judging an atomic fact needs context passages. Documents are split at
//! sentence boundaries, packed greedily into passages, indexed, and ranked
//! with BM25 against the fact text. The index is immutable after build and
//! safe to query concurrently.

use std::collections::BTreeMap;

use thiserror::Error;
use unicode_segmentation::UnicodeSegmentation;

use crate::corpus::{DocKey, KnowledgeDoc};

/// Scripts without word delimiters; tokenized as character bigrams.
const UNSEGMENTED: [&str; 3] = ["zh", "ja", "th"];

/// Tokenize for indexing and querying.
///
/// Space-delimited scripts get Unicode word segmentation, case-folded.
/// Unsegmented scripts (zh, ja, th) get overlapping character bigrams over
/// each contiguous letter run; digit runs stay whole either way.
pub fn tokenize(text: &str, language: &str) -> Vec<String> {
    let folded = text.to_lowercase();
    if UNSEGMENTED.contains(&language) {
        bigram_tokens(&folded)
    } else {
        folded.unicode_words().map(str::to_string).collect()
    }
}

fn bigram_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut letters: Vec<char> = Vec::new();
    let mut digits = String::new();
    let flush_letters = |letters: &mut Vec<char>, tokens: &mut Vec<String>| {
        match letters.len() {
            0 => {}
            1 => tokens.push(letters[0].to_string()),
            n => {
                for i in 0..n - 1 {
                    tokens.push(letters[i..i + 2].iter().collect());
                }
            }
        }
        letters.clear();
    };
    for ch in text.chars() {
        if ch.is_alphabetic() {
            if !digits.is_empty() {
                tokens.push(std::mem::take(&mut digits));
            }
            letters.push(ch);
        } else if ch.is_ascii_digit() {
            flush_letters(&mut letters, &mut tokens);
            digits.push(ch);
        } else {
            flush_letters(&mut letters, &mut tokens);
            if !digits.is_empty() {
                tokens.push(std::mem::take(&mut digits));
            }
        }
    }
    flush_letters(&mut letters, &mut tokens);
    if !digits.is_empty() {
        tokens.push(digits);
    }
    tokens
}

/// Byte span of one sentence within a larger text, trimmed of surrounding
/// whitespace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
}

impl SentenceSpan {
    pub fn text<'a>(&self, source: &'a str) -> &'a str {
        &source[self.start..self.end]
    }
}

// ASCII terminators need trailing whitespace so "3.14" and "e.g." don't
// split; the fullwidth CJK stops and never end abbreviations and are not
// followed by spaces in running text, so they split unconditionally.
const TERMINATORS_BEFORE_SPACE: [char; 5] = ['.', '!', '?', '؟', '।'];
const TERMINATORS_ALWAYS: [char; 3] = ['。', '！', '？'];

/// Split into sentence spans. Every non-whitespace byte of `text` lands in
/// exactly one span; spans are in document order.
pub fn split_sentences(text: &str) -> Vec<SentenceSpan> {
    let mut spans = Vec::new();
    let mut sentence_start: Option<usize> = None;
    let mut last_non_ws_end = 0usize;
    let mut iter = text.char_indices().peekable();
    while let Some((pos, ch)) = iter.next() {
        if !ch.is_whitespace() {
            if sentence_start.is_none() {
                sentence_start = Some(pos);
            }
            last_non_ws_end = pos + ch.len_utf8();
        }
        let boundary = if TERMINATORS_ALWAYS.contains(&ch) {
            true
        } else if TERMINATORS_BEFORE_SPACE.contains(&ch) {
            match iter.peek() {
                Some((_, next)) => next.is_whitespace(),
                None => true,
            }
        } else {
            false
        };
        if boundary {
            if let Some(start) = sentence_start.take() {
                spans.push(SentenceSpan {
                    start,
                    end: last_non_ws_end,
                });
            }
        }
    }
    if let Some(start) = sentence_start {
        spans.push(SentenceSpan {
            start,
            end: last_non_ws_end,
        });
    }
    spans
}

/// A contiguous slice of a knowledge document spanning whole sentences.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Passage {
    pub doc_key: DocKey,
    /// Ordinal within the source document.
    pub index: u32,
    pub text: String,
    pub token_count: u32,
}

/// Split a document into passages: sentences packed greedily up to
/// `max_tokens`. A single over-long sentence becomes its own passage.
/// Passage text is a verbatim slice of the document, so concatenating
/// passages in order reconstructs the document modulo boundary whitespace.
pub fn chunk(doc: &KnowledgeDoc, max_tokens: u32) -> Vec<Passage> {
    assert!(
        max_tokens >= 16,
        "max_tokens must be >= 16, got {max_tokens}"
    );
    let sentences = split_sentences(&doc.text);
    let counts: Vec<u32> = sentences
        .iter()
        .map(|s| tokenize(s.text(&doc.text), &doc.language).len() as u32)
        .collect();

    let mut groups: Vec<(usize, usize)> = Vec::new(); // inclusive sentence ranges
    let mut group_start = 0usize;
    let mut group_tokens = 0u32;
    for (i, &count) in counts.iter().enumerate() {
        if i > group_start && group_tokens + count > max_tokens {
            groups.push((group_start, i - 1));
            group_start = i;
            group_tokens = 0;
        }
        group_tokens += count;
    }
    if group_start < sentences.len() {
        groups.push((group_start, sentences.len() - 1));
    }

    let key = DocKey {
        entity_id: doc.entity_id.clone(),
        language: doc.language.clone(),
        variant: doc.variant,
    };
    groups
        .into_iter()
        .enumerate()
        .map(|(idx, (first, last))| {
            let text = &doc.text[sentences[first].start..sentences[last].end];
            Passage {
                doc_key: key.clone(),
                index: idx as u32,
                text: text.to_string(),
                // clamp: BM25 length normalization divides by this
                token_count: counts[first..=last].iter().sum::<u32>().max(1),
            }
        })
        .collect()
}

/// BM25 parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.5, b: 0.75 }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("cannot build an index over an empty passage list")]
    EmptyPassageList,
}

/// Inverted index over a passage set, with the statistics BM25 needs.
#[derive(Debug, Clone)]
pub struct PassageIndex {
    passages: Vec<Passage>,
    /// term -> (passage ordinal, term frequency), ordinals ascending.
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    avgdl: f64,
    params: Bm25Params,
}

/// Build an index with default BM25 parameters.
pub fn build_index(passages: Vec<Passage>) -> Result<PassageIndex, IndexError> {
    PassageIndex::build(passages, Bm25Params::default())
}

impl PassageIndex {
    pub fn build(passages: Vec<Passage>, params: Bm25Params) -> Result<Self, IndexError> {
        if passages.is_empty() {
            return Err(IndexError::EmptyPassageList);
        }
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        for (ordinal, passage) in passages.iter().enumerate() {
            let mut counts: BTreeMap<String, u32> = BTreeMap::new();
            for token in tokenize(&passage.text, &passage.doc_key.language) {
                *counts.entry(token).or_insert(0) += 1;
            }
            for (term, tf) in counts {
                postings.entry(term).or_default().push((ordinal as u32, tf));
            }
        }
        let avgdl =
            passages.iter().map(|p| p.token_count as f64).sum::<f64>() / passages.len() as f64;
        Ok(PassageIndex {
            passages,
            postings,
            avgdl,
            params,
        })
    }

    pub fn passage_count(&self) -> usize {
        self.passages.len()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    /// Number of passages containing `term`.
    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// Mean passage length in tokens.
    pub fn average_length(&self) -> f64 {
        self.avgdl
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    /// Rank passages by BM25 relevance to `query`.
    ///
    /// Results are sorted by score descending, ties broken by (doc_key,
    /// index) ascending; zero-score passages are excluded; at most `k`
    /// results. A query sharing no terms with any passage yields an empty
    /// list.
    pub fn retrieve(&self, query: &str, language: &str, k: usize) -> Vec<(Passage, f64)> {
        assert!(k >= 1, "k must be >= 1");
        let n = self.passages.len() as f64;
        let Bm25Params { k1, b } = self.params;
        let mut scores = vec![0.0f64; self.passages.len()];
        // repeated query tokens contribute once per occurrence
        for token in tokenize(query, language) {
            if let Some(postings) = self.postings.get(&token) {
                let df = postings.len() as f64;
                let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                for &(ordinal, tf) in postings {
                    let tf = tf as f64;
                    let dl = self.passages[ordinal as usize].token_count as f64;
                    let norm = tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / self.avgdl));
                    scores[ordinal as usize] += idf * norm;
                }
            }
        }
        let mut ranked: Vec<(usize, f64)> = scores
            .into_iter()
            .enumerate()
            .filter(|&(_, score)| score > 0.0)
            .collect();
        ranked.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("BM25 scores are finite")
                .then_with(|| {
                    let pa = &self.passages[a.0];
                    let pb = &self.passages[b.0];
                    (&pa.doc_key, pa.index).cmp(&(&pb.doc_key, pb.index))
                })
        });
        ranked.truncate(k);
        ranked
            .into_iter()
            .map(|(i, score)| (self.passages[i].clone(), score))
            .collect()
    }
}
