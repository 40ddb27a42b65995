//! Entities, per-language knowledge documents, and the fixed language table.
//!
//! A corpus is loaded from two line-delimited JSON files (one record per
//! line), validated against the closed 19-language set, and is immutable
//! afterwards, so it can be shared freely across threads.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Resource category of a language, by Common Crawl data ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LanguageCategory {
    VeryHigh,
    High,
    Medium,
    Low,
}

impl fmt::Display for LanguageCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LanguageCategory::VeryHigh => "very-high",
            LanguageCategory::High => "high",
            LanguageCategory::Medium => "medium",
            LanguageCategory::Low => "low",
        };
        f.write_str(s)
    }
}

/// One row of the fixed language table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LanguageInfo {
    /// ISO-639-1 code.
    pub code: &'static str,
    pub name: &'static str,
    pub category: LanguageCategory,
    /// Percent of Common Crawl. Informational only; no logic branches on it.
    pub cc_ratio: f64,
}

use LanguageCategory::{High, Low, Medium, VeryHigh};

#[rustfmt::skip]
const LANGUAGES: [LanguageInfo; 19] = [
    LanguageInfo { code: "en", name: "English", category: VeryHigh, cc_ratio: 46.45 },
    LanguageInfo { code: "ja", name: "Japanese", category: High, cc_ratio: 5.09 },
    LanguageInfo { code: "zh", name: "Chinese", category: High, cc_ratio: 4.17 },
    LanguageInfo { code: "es", name: "Spanish", category: High, cc_ratio: 4.55 },
    LanguageInfo { code: "fr", name: "French", category: High, cc_ratio: 4.64 },
    LanguageInfo { code: "pl", name: "Polish", category: High, cc_ratio: 1.76 },
    LanguageInfo { code: "vi", name: "Vietnamese", category: Medium, cc_ratio: 0.99 },
    LanguageInfo { code: "tr", name: "Turkish", category: Medium, cc_ratio: 0.99 },
    LanguageInfo { code: "fa", name: "Persian", category: Medium, cc_ratio: 0.67 },
    LanguageInfo { code: "ko", name: "Korean", category: Medium, cc_ratio: 0.65 },
    LanguageInfo { code: "ar", name: "Arabic", category: Medium, cc_ratio: 0.59 },
    LanguageInfo { code: "hu", name: "Hungarian", category: Medium, cc_ratio: 0.56 },
    LanguageInfo { code: "th", name: "Thai", category: Medium, cc_ratio: 0.41 },
    LanguageInfo { code: "hi", name: "Hindi", category: Medium, cc_ratio: 0.18 },
    LanguageInfo { code: "bn", name: "Bengali", category: Low, cc_ratio: 0.10 },
    LanguageInfo { code: "ms", name: "Malay", category: Low, cc_ratio: 0.07 },
    LanguageInfo { code: "ta", name: "Tamil", category: Low, cc_ratio: 0.04 },
    LanguageInfo { code: "sw", name: "Swahili", category: Low, cc_ratio: 0.008 },
    LanguageInfo { code: "jv", name: "Javanese", category: Low, cc_ratio: 0.002 },
];

/// The fixed 19-language table, in table order.
pub fn language_table() -> &'static [LanguageInfo] {
    &LANGUAGES
}

/// Look up a language by ISO code.
pub fn language(code: &str) -> Option<&'static LanguageInfo> {
    LANGUAGES.iter().find(|l| l.code == code)
}

/// True if `code` is one of the 19 supported codes.
pub fn is_supported_language(code: &str) -> bool {
    language(code).is_some()
}

/// A person (or other subject) whose knowledge documents the corpus holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    /// Stable opaque key, unique within a corpus.
    pub id: String,
    /// Fills prompt templates in every language.
    pub canonical_name: String,
}

/// Whether a document is the original-language text or a translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocVariant {
    Original,
    TranslatedToEnglish,
}

/// Reference text for one (entity, language, variant).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeDoc {
    pub entity_id: String,
    pub language: String,
    pub variant: DocVariant,
    pub text: String,
}

/// Key of a knowledge document within a corpus.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct DocKey {
    pub entity_id: String,
    pub language: String,
    pub variant: DocVariant,
}

impl fmt::Display for DocKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {:?})",
            self.entity_id, self.language, self.variant
        )
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: unknown language code \"{code}\"")]
    UnknownLanguage {
        path: PathBuf,
        line: usize,
        code: String,
    },
    #[error("{path}:{line}: doc references unknown entity \"{entity_id}\"")]
    DanglingEntity {
        path: PathBuf,
        line: usize,
        entity_id: String,
    },
    #[error("{path}:{line}: duplicate entity id \"{id}\"")]
    DuplicateEntity {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("{path}:{line}: duplicate doc key {key}")]
    DuplicateDoc {
        path: PathBuf,
        line: usize,
        key: DocKey,
    },
    #[error("{path}:{line}: field \"{field}\" must be non-empty")]
    EmptyField {
        path: PathBuf,
        line: usize,
        field: &'static str,
    },
}

/// Validated, immutable collection of entities and knowledge documents.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    entities: BTreeMap<String, Entity>,
    docs: BTreeMap<DocKey, KnowledgeDoc>,
    warnings: Vec<String>,
}

impl Corpus {
    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.entities.get(id)
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn docs(&self) -> impl Iterator<Item = &KnowledgeDoc> {
        self.docs.values()
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn doc(
        &self,
        entity_id: &str,
        language: &str,
        variant: DocVariant,
    ) -> Option<&KnowledgeDoc> {
        self.docs.get(&DocKey {
            entity_id: entity_id.to_string(),
            language: language.to_string(),
            variant,
        })
    }

    /// Sorted codes of languages with at least one original-variant doc.
    /// Generation and scoring iterate over exactly this set.
    pub fn languages_present(&self) -> Vec<String> {
        let mut codes: Vec<String> = self
            .docs
            .keys()
            .filter(|k| k.variant == DocVariant::Original)
            .map(|k| k.language.clone())
            .collect();
        codes.sort();
        codes.dedup();
        codes
    }

    /// Non-fatal observations from the load (e.g. an empty docs file).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Content digest over the canonical serialization of entities and docs.
    /// Stable across load order; used to key derived artifacts.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for entity in self.entities.values() {
            hasher.update(serde_json::to_string(entity).expect("serialize entity"));
            hasher.update(b"\n");
        }
        for doc in self.docs.values() {
            hasher.update(serde_json::to_string(doc).expect("serialize doc"));
            hasher.update(b"\n");
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Persist as `entities.jsonl` + `docs.jsonl` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(|e| CorpusError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let write = |name: &str, lines: Vec<String>| -> Result<(), CorpusError> {
            let path = dir.join(name);
            let mut buf = Vec::new();
            for line in lines {
                writeln!(buf, "{line}").expect("vec write");
            }
            fs::write(&path, buf).map_err(|e| CorpusError::Io { path, source: e })
        };
        write(
            "entities.jsonl",
            self.entities
                .values()
                .map(|e| serde_json::to_string(e).expect("serialize entity"))
                .collect(),
        )?;
        write(
            "docs.jsonl",
            self.docs
                .values()
                .map(|d| serde_json::to_string(d).expect("serialize doc"))
                .collect(),
        )
    }

    /// Load from a directory previously written by [`Corpus::save`].
    pub fn load(dir: &Path) -> Result<Corpus, CorpusError> {
        load_corpus(&dir.join("entities.jsonl"), &dir.join("docs.jsonl"))
    }
}

/// Load and validate a corpus from line-delimited entity and doc files.
///
/// Every doc must reference a loaded entity, carry one of the 19 language
/// codes, and be unique in (entity, language, variant). Errors name the
/// offending line.
pub fn load_corpus(entities_path: &Path, docs_path: &Path) -> Result<Corpus, CorpusError> {
    let read = |path: &Path| -> Result<String, CorpusError> {
        fs::read_to_string(path).map_err(|e| CorpusError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    };

    let mut entities = BTreeMap::new();
    for (idx, line) in read(entities_path)?.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entity: Entity = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            path: entities_path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        if entity.canonical_name.trim().is_empty() {
            return Err(CorpusError::EmptyField {
                path: entities_path.to_path_buf(),
                line: lineno,
                field: "canonical_name",
            });
        }
        if entity.id.is_empty() {
            return Err(CorpusError::EmptyField {
                path: entities_path.to_path_buf(),
                line: lineno,
                field: "id",
            });
        }
        if entities.insert(entity.id.clone(), entity.clone()).is_some() {
            return Err(CorpusError::DuplicateEntity {
                path: entities_path.to_path_buf(),
                line: lineno,
                id: entity.id,
            });
        }
    }

    let mut docs = BTreeMap::new();
    let mut saw_doc = false;
    for (idx, line) in read(docs_path)?.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        saw_doc = true;
        let doc: KnowledgeDoc = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            path: docs_path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        if !is_supported_language(&doc.language) {
            return Err(CorpusError::UnknownLanguage {
                path: docs_path.to_path_buf(),
                line: lineno,
                code: doc.language,
            });
        }
        if !entities.contains_key(&doc.entity_id) {
            return Err(CorpusError::DanglingEntity {
                path: docs_path.to_path_buf(),
                line: lineno,
                entity_id: doc.entity_id,
            });
        }
        if doc.text.trim().is_empty() {
            return Err(CorpusError::EmptyField {
                path: docs_path.to_path_buf(),
                line: lineno,
                field: "text",
            });
        }
        let key = DocKey {
            entity_id: doc.entity_id.clone(),
            language: doc.language.clone(),
            variant: doc.variant,
        };
        if docs.insert(key.clone(), doc).is_some() {
            return Err(CorpusError::DuplicateDoc {
                path: docs_path.to_path_buf(),
                line: lineno,
                key,
            });
        }
    }

    let mut warnings = Vec::new();
    if !saw_doc {
        let w = format!("{}: docs file contains no records", docs_path.display());
        log::warn!("{w}");
        warnings.push(w);
    }

    Ok(Corpus {
        entities,
        docs,
        warnings,
    })
}
