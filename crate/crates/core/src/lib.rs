//! Measures multilingual factual-hallucination gaps in LLM outputs.
//!
//! The pipeline decomposes a generated response into atomic facts, retrieves
//! supporting passages from a per-entity knowledge document with BM25, asks an
//! evaluator model "True or False?" per fact, and folds the verdicts into a
//! length-penalized factual-precision score. Everything runs through pluggable
//! chat-completion backends so the whole pipeline is deterministic offline.
//!
//! Modules map onto pipeline stages:
//!
//! - [`corpus`] — entities, knowledge documents, the fixed 19-language table
//! - [`retrieval`] — tokenization, passage chunking, BM25 index and ranking
//! - [`gateway`] — chat-completion backends, response cache, call log
//! - [`factscore`] — decomposition, judgment, penalty and score math
//! - [`sanity`] — pre-scoring filters (language ID, distinct-word threshold)
//! - [`experiments`] — prompt building, generation, the three scoring modes
//! - [`analytics`] — rollups, score matrices, evaluator-validation metrics

pub mod analytics;
pub mod corpus;
pub mod exec;
pub mod experiments;
pub mod factscore;
pub mod gateway;
pub mod retrieval;
pub mod sanity;
