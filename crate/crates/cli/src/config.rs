//! Run configuration: one JSON file addresses a whole run. Relative paths
//! are resolved against the config file's directory, so configs can live
//! next to their fixtures.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use factgap::factscore::GammaBoundary;
use factgap::gateway::{
    Backend, FixtureBackend, Gateway, HttpBackend, RequestDefaults, ResponseCache,
};
use factgap::retrieval::Bm25Params;

use crate::CliError;

pub const DEFAULT_API_KEY_ENV: &str = "FACTGAP_API_KEY";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub cache_dir: PathBuf,
    pub backends: BTreeMap<String, BackendConfig>,
    #[serde(default = "default_gamma")]
    pub gamma: u32,
    #[serde(default)]
    pub gamma_boundary: GammaBoundary,
    #[serde(default)]
    pub bm25: Bm25Config,
    #[serde(default)]
    pub sanity: SanityConfig,
    pub paths: PathsConfig,
}

fn default_gamma() -> u32 {
    10
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Http,
    Fixture,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default)]
    pub base_url: Option<String>,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: u32,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Environment variable holding the bearer token; FACTGAP_API_KEY when
    /// unset.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Fixture backends: ordered rule file.
    #[serde(default)]
    pub rules: Option<PathBuf>,
    /// Fixture backends: canned responses keyed by cache key.
    #[serde(default)]
    pub responses_dir: Option<PathBuf>,
}

fn default_max_in_flight() -> u32 {
    8
}

fn default_max_tokens() -> u32 {
    1024
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Bm25Config {
    pub k1: f64,
    pub b: f64,
    pub k: usize,
    pub max_tokens: u32,
}

impl Default for Bm25Config {
    fn default() -> Self {
        Bm25Config {
            k1: 1.5,
            b: 0.75,
            k: 5,
            max_tokens: 256,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SanityConfig {
    pub distinct_word_min: u32,
    pub confidence_margin: f64,
    #[serde(default)]
    pub profile_cache: Option<PathBuf>,
}

impl Default for SanityConfig {
    fn default() -> Self {
        SanityConfig {
            distinct_word_min: 20,
            confidence_margin: 0.05,
            profile_cache: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathsConfig {
    /// Directory holding entities.jsonl + docs.jsonl.
    pub corpus: PathBuf,
    pub demos: PathBuf,
    pub template_table: PathBuf,
    pub out_dir: PathBuf,
}

/// A loaded config plus the raw bytes it came from (the raw bytes feed the
/// run id, so run ids do not depend on where the checkout lives).
pub struct LoadedConfig {
    pub config: RunConfig,
    pub raw: Vec<u8>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
        let raw = std::fs::read(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_slice(&raw)
            .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(LoadedConfig { config, raw })
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        resolve(&mut self.cache_dir);
        resolve(&mut self.paths.corpus);
        resolve(&mut self.paths.demos);
        resolve(&mut self.paths.template_table);
        resolve(&mut self.paths.out_dir);
        if let Some(p) = &mut self.sanity.profile_cache {
            resolve(p);
        }
        for backend in self.backends.values_mut() {
            if let Some(p) = &mut backend.rules {
                resolve(p);
            }
            if let Some(p) = &mut backend.responses_dir {
                resolve(p);
            }
        }
    }

    /// The invariants a command checks before doing anything.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.gamma < 1 {
            return Err(CliError::usage("gamma must be >= 1"));
        }
        if self.bm25.max_tokens < 16 {
            return Err(CliError::usage("bm25.max_tokens must be >= 16"));
        }
        if self.bm25.k < 1 {
            return Err(CliError::usage("bm25.k must be >= 1"));
        }
        let must_exist = [
            (
                "paths.corpus entities",
                self.paths.corpus.join("entities.jsonl"),
            ),
            ("paths.corpus docs", self.paths.corpus.join("docs.jsonl")),
            ("paths.demos", self.paths.demos.clone()),
            ("paths.template_table", self.paths.template_table.clone()),
        ];
        for (what, path) in must_exist {
            if !path.exists() {
                return Err(CliError::usage(format!(
                    "{what} does not exist: {}",
                    path.display()
                )));
            }
        }
        for (name, backend) in &self.backends {
            match backend.kind {
                BackendKind::Http => {
                    if backend.base_url.is_none() {
                        return Err(CliError::usage(format!(
                            "backend \"{name}\": http backends need base_url"
                        )));
                    }
                }
                BackendKind::Fixture => {
                    if backend.rules.is_none() && backend.responses_dir.is_none() {
                        return Err(CliError::usage(format!(
                            "backend \"{name}\": fixture backends need rules or responses_dir"
                        )));
                    }
                    for path in backend.rules.iter().chain(backend.responses_dir.iter()) {
                        if !path.exists() {
                            return Err(CliError::usage(format!(
                                "backend \"{name}\": {} does not exist",
                                path.display()
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn bm25_params(&self) -> Bm25Params {
        Bm25Params {
            k1: self.bm25.k1,
            b: self.bm25.b,
        }
    }

    /// Construct the gateway from the backend table. HTTP backends read
    /// their bearer token from the configured environment variable.
    pub fn build_gateway(&self) -> Result<Gateway, CliError> {
        let cache = ResponseCache::new(&self.cache_dir)
            .map_err(|e| CliError::runtime(format!("cannot open cache: {e}")))?;
        let mut builder = Gateway::builder().cache(cache);
        for (name, bc) in &self.backends {
            let backend: Box<dyn Backend> = match bc.kind {
                BackendKind::Http => {
                    let base_url = bc.base_url.clone().expect("validated");
                    let env_name = bc
                        .api_key_env
                        .clone()
                        .unwrap_or_else(|| DEFAULT_API_KEY_ENV.to_string());
                    let api_key = std::env::var(&env_name).ok();
                    Box::new(HttpBackend::new(name.clone(), base_url, api_key))
                }
                BackendKind::Fixture => {
                    let mut fixture = FixtureBackend::new(name.clone());
                    if let Some(dir) = &bc.responses_dir {
                        fixture = fixture.with_responses_dir(dir);
                    }
                    if let Some(rules) = &bc.rules {
                        fixture = fixture
                            .with_rules_file(rules)
                            .map_err(|e| CliError::usage(format!("backend \"{name}\": {e}")))?;
                    }
                    Box::new(fixture)
                }
            };
            let defaults = RequestDefaults {
                model: bc.model.clone(),
                temperature: bc.temperature,
                max_tokens: bc.max_tokens,
                seed: bc.seed,
            };
            builder = builder.backend(backend, defaults, bc.max_in_flight);
        }
        Ok(builder.build())
    }
}

/// Content-addressed run id: a digest over the command essence, the raw
/// config bytes, and the bytes of every input file. Identical invocations
/// land in identical output directories.
pub fn run_id(
    command: &str,
    loaded: &LoadedConfig,
    inputs: &[PathBuf],
) -> Result<String, CliError> {
    let mut hasher = Sha256::new();
    hasher.update(command.as_bytes());
    hasher.update([0]);
    hasher.update(&loaded.raw);
    for input in inputs {
        hasher.update([0]);
        let bytes = std::fs::read(input)
            .map_err(|e| CliError::usage(format!("cannot read input {}: {e}", input.display())))?;
        hasher.update(Sha256::digest(&bytes));
    }
    let digest = hasher.finalize();
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}
