//! Orchestrates generation (3 templates x 2 prompting methods) and the
//! three scoring pipelines, plus the knowledge-source self-audit.
//!
//! The three experiment modes pair a prompting method with a knowledge
//! language: (lang, lang) judges the raw response against the same-language
//! document; (lang, en) and (en, en) translate the response to English first
//! and judge against the English document. Per-(entity, language, template)
//! work items are independent and fan out on the rayon pool; aggregation is
//! a deterministic fold over the sorted record stream.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus;
use crate::corpus::{Corpus, DocVariant, KnowledgeDoc};
use crate::exec;
use crate::factscore::{
    decompose, judge, score_bounded, DemoSet, FactScoreError, FactVerdict, GammaBoundary,
    ParseStatus, ScoreResult,
};
use crate::gateway::{Gateway, GatewayError};
use crate::retrieval::{Bm25Params, IndexError, PassageIndex};
use crate::sanity::{SanityChecker, SanityReport};

/// The three biography templates, fixed verbatim.
pub const TEMPLATES: [&str; 3] = [
    "Tell me a biography of {}",
    "Give me a biography of {}",
    "Please give me a biography of {}",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMethod {
    /// Fully translated template, directive included.
    LangPrompt,
    /// English template with an "in {language}" directive appended.
    EnPrompt,
}

/// Identifies one generation work item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub entity_id: String,
    pub language: String,
    pub template_id: u8,
    pub method: PromptMethod,
}

/// One generated response with its sanity outcome. A gateway failure is
/// recorded, not dropped, so the record stream stays complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub spec: PromptSpec,
    pub model: String,
    pub text: String,
    pub sanity: Option<SanityReport>,
    pub error: Option<String>,
}

impl Generation {
    /// Eligible for scoring?
    pub fn sane(&self) -> bool {
        self.error.is_none() && self.sanity.as_ref().is_some_and(|s| s.passed)
    }
}

/// (prompt language, knowledge language) pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentMode {
    LangLang,
    LangEn,
    EnEn,
}

impl ExperimentMode {
    pub fn tag(&self) -> &'static str {
        match self {
            ExperimentMode::LangLang => "lang-lang",
            ExperimentMode::LangEn => "lang-en",
            ExperimentMode::EnEn => "en-en",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "lang-lang" => Some(ExperimentMode::LangLang),
            "lang-en" => Some(ExperimentMode::LangEn),
            "en-en" => Some(ExperimentMode::EnEn),
            _ => None,
        }
    }

    pub fn prompt_method(&self) -> PromptMethod {
        match self {
            ExperimentMode::LangLang | ExperimentMode::LangEn => PromptMethod::LangPrompt,
            ExperimentMode::EnEn => PromptMethod::EnPrompt,
        }
    }

    /// Language of the knowledge document facts are judged against.
    pub fn knowledge_language<'a>(&self, response_language: &'a str) -> &'a str {
        match self {
            ExperimentMode::LangLang => response_language,
            ExperimentMode::LangEn | ExperimentMode::EnEn => "en",
        }
    }

    /// Whether the response body must be translated to English before
    /// judging. En-prompted responses are still written in the target
    /// language, so (en, en) translates too. English responses never need
    /// translation.
    pub fn translate_response(&self, response_language: &str) -> bool {
        match self {
            ExperimentMode::LangLang => false,
            ExperimentMode::LangEn | ExperimentMode::EnEn => response_language != "en",
        }
    }
}

impl std::fmt::Display for ExperimentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Template-averaged score for one (entity, language, model, mode).
/// `mean`/`std` are `None` when no template survived sanity checks; such
/// rows are excluded from rollups. `std` is the population formula over the
/// scored templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityScore {
    pub entity_id: String,
    pub language: String,
    pub model: String,
    pub mode: ExperimentMode,
    pub per_template_scores: Vec<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub mean_num_facts: Option<f64>,
    pub n_templates_scored: u32,
}

/// One judged fact, persisted for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub entity_id: String,
    pub language: String,
    pub template_id: u8,
    pub mode: ExperimentMode,
    pub model: String,
    pub fact: String,
    pub sentence_index: u32,
    pub supported: bool,
    pub parse_status: ParseStatus,
    pub raw_reply: String,
    pub passages: Vec<PassageRef>,
}

/// Slim provenance for a passage shown to the judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageRef {
    pub index: u32,
    pub score: f64,
    pub text: String,
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("no translated template for ({language}, {template_id})")]
    MissingTemplate { language: String, template_id: u8 },
    #[error("template table {path}:{line}: {message}")]
    MalformedTable {
        path: String,
        line: usize,
        message: String,
    },
    #[error("generations were produced with {found:?} but mode {mode} requires {expected:?}")]
    MethodMismatch {
        mode: ExperimentMode,
        expected: PromptMethod,
        found: PromptMethod,
    },
    #[error("unknown language code \"{0}\"")]
    UnknownLanguage(String),
    #[error("unknown entity \"{0}\" in generations")]
    UnknownEntity(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    FactScore(#[from] FactScoreError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// Templates

/// Reviewed translations of the three templates, one row per
/// (language, template). Every row already carries the translated
/// "in {language}" directive.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TemplateTable {
    rows: BTreeMap<(String, u8), String>,
}

#[derive(Serialize, Deserialize)]
struct TemplateRow {
    language: String,
    template_id: u8,
    text: String,
}

impl TemplateTable {
    pub fn insert(&mut self, language: &str, template_id: u8, text: impl Into<String>) {
        self.rows
            .insert((language.to_string(), template_id), text.into());
    }

    pub fn get(&self, language: &str, template_id: u8) -> Option<&str> {
        self.rows
            .get(&(language.to_string(), template_id))
            .map(String::as_str)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let body = std::fs::read_to_string(path).map_err(|e| ExperimentError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut table = TemplateTable::default();
        for (idx, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: TemplateRow =
                serde_json::from_str(line).map_err(|e| ExperimentError::MalformedTable {
                    path: path.display().to_string(),
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            if !row.text.contains("{}") {
                return Err(ExperimentError::MalformedTable {
                    path: path.display().to_string(),
                    line: idx + 1,
                    message: "template text must contain the {} placeholder".into(),
                });
            }
            table.rows.insert((row.language, row.template_id), row.text);
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<(), ExperimentError> {
        let mut body = String::new();
        for ((language, template_id), text) in &self.rows {
            let row = TemplateRow {
                language: language.clone(),
                template_id: *template_id,
                text: text.clone(),
            };
            body.push_str(&serde_json::to_string(&row).expect("serialize template row"));
            body.push('\n');
        }
        std::fs::write(path, body).map_err(|e| ExperimentError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Produce the translated-template table for `languages` by translating
/// each English template plus its directive. English rows are the identity
/// plus directive. The result is meant to be persisted and reviewed, not
/// rebuilt per run.
pub fn translate_templates(
    languages: &[String],
    gateway: &Gateway,
    translator_backend: &str,
) -> Result<TemplateTable, ExperimentError> {
    let mut table = TemplateTable::default();
    for language in languages {
        let info = corpus::language(language)
            .ok_or_else(|| ExperimentError::UnknownLanguage(language.clone()))?;
        for (template_id, template) in TEMPLATES.iter().enumerate() {
            let english = format!("{template} in {}", info.name);
            let text = if language == "en" {
                english
            } else {
                gateway.translate(translator_backend, &english, "en", language)?
            };
            table.insert(language, template_id as u8, text);
        }
    }
    Ok(table)
}

/// Fill a template for one work item.
///
/// En-prompting fills the English template and appends the directive;
/// lang-prompting fills the reviewed translated template, which already
/// embeds the directive.
pub fn build_prompt(
    spec: &PromptSpec,
    table: &TemplateTable,
    canonical_name: &str,
) -> Result<String, ExperimentError> {
    match spec.method {
        PromptMethod::EnPrompt => {
            let info = corpus::language(&spec.language)
                .ok_or_else(|| ExperimentError::UnknownLanguage(spec.language.clone()))?;
            let template = TEMPLATES.get(spec.template_id as usize).ok_or(
                ExperimentError::MissingTemplate {
                    language: "en".into(),
                    template_id: spec.template_id,
                },
            )?;
            Ok(format!(
                "{} in {}",
                template.replace("{}", canonical_name),
                info.name
            ))
        }
        PromptMethod::LangPrompt => {
            let template = table.get(&spec.language, spec.template_id).ok_or_else(|| {
                ExperimentError::MissingTemplate {
                    language: spec.language.clone(),
                    template_id: spec.template_id,
                }
            })?;
            Ok(template.replace("{}", canonical_name))
        }
    }
}

// ---------------------------------------------------------------------------
// Generation

/// Generate one response per (entity, language-with-docs, template) through
/// the subject backend and sanity-check each. Failures become records, not
/// gaps; the stream is sorted by (entity_id, language, template_id).
pub fn run_generation(
    corpus: &Corpus,
    gateway: &Gateway,
    subj_backend: &str,
    method: PromptMethod,
    table: &TemplateTable,
    checker: &SanityChecker,
) -> Result<Vec<Generation>, ExperimentError> {
    let model = gateway.defaults(subj_backend)?.model.clone();
    let languages = corpus.languages_present();

    let mut items: Vec<(PromptSpec, String)> = Vec::new();
    for entity in corpus.entities() {
        for language in &languages {
            for template_id in 0..TEMPLATES.len() as u8 {
                let spec = PromptSpec {
                    entity_id: entity.id.clone(),
                    language: language.clone(),
                    template_id,
                    method,
                };
                // fail fast on holes in the template table
                let prompt = build_prompt(&spec, table, &entity.canonical_name)?;
                items.push((spec, prompt));
            }
        }
    }

    let generations = exec::map_ordered(items, |(spec, prompt)| {
        let request = match gateway.request(subj_backend, prompt) {
            Ok(req) => req,
            Err(e) => {
                return Generation {
                    spec,
                    model: model.clone(),
                    text: String::new(),
                    sanity: None,
                    error: Some(e.to_string()),
                }
            }
        };
        match gateway.complete(subj_backend, &request) {
            Ok(response) => {
                let sanity = checker.check(&response.text, &spec.language);
                Generation {
                    spec,
                    model: model.clone(),
                    text: response.text,
                    sanity: Some(sanity),
                    error: None,
                }
            }
            Err(e) => Generation {
                spec,
                model: model.clone(),
                text: String::new(),
                sanity: None,
                error: Some(e.to_string()),
            },
        }
    });
    Ok(generations)
}

// ---------------------------------------------------------------------------
// Scoring experiments

/// Evaluation-side handles shared by the scoring pipelines: the gateway
/// plus the evaluator and translator backend names and the decomposition
/// demos.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub gateway: &'a Gateway,
    pub eval_backend: &'a str,
    pub translator_backend: &'a str,
    pub demos: &'a DemoSet,
}

/// Knobs shared by the scoring pipelines.
#[derive(Debug, Clone, Copy)]
pub struct ScoringConfig {
    pub bm25: Bm25Params,
    pub top_k: usize,
    pub max_passage_tokens: u32,
    pub gamma: u32,
    pub gamma_boundary: GammaBoundary,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            bm25: Bm25Params::default(),
            top_k: 5,
            max_passage_tokens: 256,
            gamma: 10,
            gamma_boundary: GammaBoundary::Le,
        }
    }
}

/// Output of [`run_experiment`]: per-entity scores plus the full verdict
/// stream for audit.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub scores: Vec<EntityScore>,
    pub verdicts: Vec<VerdictRecord>,
}

struct TemplateOutcome {
    template_id: u8,
    result: ScoreResult,
    verdicts: Vec<FactVerdict>,
}

fn score_one(
    generation: &Generation,
    mode: ExperimentMode,
    corpus: &Corpus,
    ctx: EvalContext<'_>,
    config: &ScoringConfig,
) -> Result<Option<TemplateOutcome>, ExperimentError> {
    let spec = &generation.spec;
    let knowledge_language = mode.knowledge_language(&spec.language);
    let Some(doc) = corpus.doc(&spec.entity_id, knowledge_language, DocVariant::Original) else {
        log::warn!(
            "no ({}, {knowledge_language}) knowledge doc; skipping template {}",
            spec.entity_id,
            spec.template_id
        );
        return Ok(None);
    };

    let text = if mode.translate_response(&spec.language) {
        ctx.gateway.translate(
            ctx.translator_backend,
            &generation.text,
            &spec.language,
            "en",
        )?
    } else {
        generation.text.clone()
    };
    let judging_language = if mode.translate_response(&spec.language) {
        "en"
    } else {
        spec.language.as_str()
    };

    let index = PassageIndex::build(
        crate::retrieval::chunk(doc, config.max_passage_tokens),
        config.bm25,
    )?;
    let facts = decompose(
        &text,
        judging_language,
        ctx.gateway,
        ctx.eval_backend,
        ctx.demos,
    )?;
    let verdicts: Vec<FactVerdict> = facts
        .iter()
        .map(|fact| {
            judge(
                fact,
                &index,
                judging_language,
                ctx.gateway,
                ctx.eval_backend,
                config.top_k,
            )
        })
        .collect::<Result<_, _>>()?;
    let result = score_bounded(&verdicts, config.gamma, config.gamma_boundary);
    Ok(Some(TemplateOutcome {
        template_id: spec.template_id,
        result,
        verdicts,
    }))
}

/// Population standard deviation.
fn population_std(values: &[f64], mean: f64) -> f64 {
    let variance =
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    variance.sqrt()
}

/// Score every sane generation under `mode` and fold the per-template
/// results into one [`EntityScore`] per (entity, language).
pub fn run_experiment(
    generations: &[Generation],
    mode: ExperimentMode,
    corpus: &Corpus,
    ctx: EvalContext<'_>,
    config: &ScoringConfig,
) -> Result<ExperimentOutput, ExperimentError> {
    let expected = mode.prompt_method();
    if let Some(bad) = generations.iter().find(|g| g.spec.method != expected) {
        return Err(ExperimentError::MethodMismatch {
            mode,
            expected,
            found: bad.spec.method,
        });
    }
    for generation in generations {
        if corpus.entity(&generation.spec.entity_id).is_none() {
            return Err(ExperimentError::UnknownEntity(
                generation.spec.entity_id.clone(),
            ));
        }
    }

    let mut sorted: Vec<&Generation> = generations.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.spec.entity_id, &a.spec.language, a.spec.template_id).cmp(&(
            &b.spec.entity_id,
            &b.spec.language,
            b.spec.template_id,
        ))
    });

    let outcomes: Vec<Result<Option<TemplateOutcome>, ExperimentError>> =
        exec::map_ordered(sorted.clone(), |generation| {
            if !generation.sane() {
                return Ok(None);
            }
            score_one(generation, mode, corpus, ctx, config)
        });

    // deterministic sequential fold over the sorted stream
    let mut grouped: BTreeMap<(String, String), Vec<(u8, ScoreResult)>> = BTreeMap::new();
    let mut verdict_records = Vec::new();
    for (generation, outcome) in sorted.iter().zip(outcomes) {
        let spec = &generation.spec;
        grouped
            .entry((spec.entity_id.clone(), spec.language.clone()))
            .or_default();
        if let Some(outcome) = outcome? {
            for verdict in &outcome.verdicts {
                verdict_records.push(VerdictRecord {
                    entity_id: spec.entity_id.clone(),
                    language: spec.language.clone(),
                    template_id: outcome.template_id,
                    mode,
                    model: generation.model.clone(),
                    fact: verdict.fact.text.clone(),
                    sentence_index: verdict.fact.sentence_index,
                    supported: verdict.supported,
                    parse_status: verdict.parse_status,
                    raw_reply: verdict.raw_reply.clone(),
                    passages: verdict
                        .passages
                        .iter()
                        .map(|(p, s)| PassageRef {
                            index: p.index,
                            score: *s,
                            text: p.text.clone(),
                        })
                        .collect(),
                });
            }
            grouped
                .get_mut(&(spec.entity_id.clone(), spec.language.clone()))
                .expect("entry just created")
                .push((outcome.template_id, outcome.result));
        }
    }

    let model = generations
        .first()
        .map(|g| g.model.clone())
        .unwrap_or_default();
    let scores = grouped
        .into_iter()
        .map(|((entity_id, language), mut results)| {
            results.sort_by_key(|(template_id, _)| *template_id);
            let per_template_scores: Vec<f64> = results.iter().map(|(_, r)| r.score).collect();
            let n = per_template_scores.len();
            let (mean, std, mean_num_facts) = if n == 0 {
                (None, None, None)
            } else {
                let mean = per_template_scores.iter().sum::<f64>() / n as f64;
                let facts = results.iter().map(|(_, r)| r.num_facts as f64).sum::<f64>() / n as f64;
                (
                    Some(mean),
                    Some(population_std(&per_template_scores, mean)),
                    Some(facts),
                )
            };
            EntityScore {
                entity_id,
                language,
                model: model.clone(),
                mode,
                per_template_scores,
                mean,
                std,
                mean_num_facts,
                n_templates_scored: n as u32,
            }
        })
        .collect();

    Ok(ExperimentOutput {
        scores,
        verdicts: verdict_records,
    })
}

// ---------------------------------------------------------------------------
// Knowledge-source audit

/// Per-entity outcome of the knowledge-source audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditScore {
    pub entity_id: String,
    pub language: String,
    pub result: ScoreResult,
}

/// Audit the knowledge source itself: treat each language-L document as the
/// "response" (translated to English when L != en; the English doc is
/// compared against itself) and score it against the English document.
///
/// A pre-translated [`DocVariant::TranslatedToEnglish`] doc is used when the
/// corpus carries one; otherwise the translator backend is called. Entities
/// missing either side of the pair are skipped with a warning.
pub fn audit_knowledge(
    corpus: &Corpus,
    language: &str,
    ctx: EvalContext<'_>,
    config: &ScoringConfig,
) -> Result<Vec<AuditScore>, ExperimentError> {
    if corpus::language(language).is_none() {
        return Err(ExperimentError::UnknownLanguage(language.to_string()));
    }
    let mut items: Vec<(&corpus::Entity, &KnowledgeDoc, &KnowledgeDoc)> = Vec::new();
    for entity in corpus.entities() {
        let lang_doc = corpus.doc(&entity.id, language, DocVariant::Original);
        let en_doc = corpus.doc(&entity.id, "en", DocVariant::Original);
        match (lang_doc, en_doc) {
            (Some(lang_doc), Some(en_doc)) => items.push((entity, lang_doc, en_doc)),
            _ => log::warn!(
                "missing ({}, {language})/(en) doc pair; skipping entity",
                entity.id
            ),
        }
    }

    let results: Vec<Result<AuditScore, ExperimentError>> =
        exec::map_ordered(items, |(entity, lang_doc, en_doc)| {
            let response = if language == "en" {
                lang_doc.text.clone()
            } else if let Some(translated) =
                corpus.doc(&entity.id, language, DocVariant::TranslatedToEnglish)
            {
                translated.text.clone()
            } else {
                ctx.gateway
                    .translate(ctx.translator_backend, &lang_doc.text, language, "en")?
            };
            let index = PassageIndex::build(
                crate::retrieval::chunk(en_doc, config.max_passage_tokens),
                config.bm25,
            )?;
            let facts = decompose(&response, "en", ctx.gateway, ctx.eval_backend, ctx.demos)?;
            let verdicts: Vec<FactVerdict> = facts
                .iter()
                .map(|fact| {
                    judge(
                        fact,
                        &index,
                        "en",
                        ctx.gateway,
                        ctx.eval_backend,
                        config.top_k,
                    )
                })
                .collect::<Result<_, _>>()?;
            Ok(AuditScore {
                entity_id: entity.id.clone(),
                language: language.to_string(),
                result: score_bounded(&verdicts, config.gamma, config.gamma_boundary),
            })
        });
    results.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Record files

/// Write serializable records as one JSON object per line.
pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), ExperimentError> {
    let mut body = String::new();
    for record in records {
        body.push_str(&serde_json::to_string(record).expect("record serialization cannot fail"));
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| ExperimentError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Read line-delimited JSON records.
pub fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ExperimentError> {
    let body = std::fs::read_to_string(path).map_err(|e| ExperimentError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut records = Vec::new();
    for (idx, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(line).map_err(|e| ExperimentError::Io {
            path: format!("{}:{}", path.display(), idx + 1),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?;
        records.push(record);
    }
    Ok(records)
}
