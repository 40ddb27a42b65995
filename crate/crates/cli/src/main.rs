//! `factgap` — drive the multilingual factual-precision pipeline from a
//! single config file: ingest a corpus, generate biographies, score them
//! under the three experiment modes, audit the knowledge source, roll up
//! reports, and validate the evaluator against gold labels.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use factgap::analytics::{
    emit_report, rollup_categories, rollup_template_spread, score_matrix, validator_metrics,
    HumanAnnotatedFact, Report, ReportFormat, ResponseVerdicts,
};
use factgap::corpus::{self, Corpus};
use factgap::experiments::{
    audit_knowledge, read_records, run_experiment, run_generation, write_records, EntityScore,
    EvalContext, ExperimentError, ExperimentMode, Generation, PromptMethod, ScoringConfig,
    TemplateTable, VerdictRecord,
};
use factgap::factscore::DemoSet;
use factgap::gateway::{Gateway, GatewayError};
use factgap::sanity::{NGramIdentifier, SanityChecker};

use config::{run_id, LoadedConfig, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError::Usage(message.into())
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError::Runtime(message.into())
    }

    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(err: ExperimentError) -> Self {
        match err {
            ExperimentError::Gateway(e) => e.into(),
            ExperimentError::FactScore(factgap::factscore::FactScoreError::Gateway(e)) => e.into(),
            ExperimentError::Io { .. } => CliError::runtime(err.to_string()),
            _ => CliError::usage(err.to_string()),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(err: GatewayError) -> Self {
        match err {
            GatewayError::UnknownBackend(_) | GatewayError::InvalidRequest(_) => {
                CliError::usage(err.to_string())
            }
            _ => CliError::runtime(err.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "factgap",
    version,
    about = "Multilingual factual-precision evaluation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Lang,
    En,
}

impl MethodArg {
    fn method(self) -> PromptMethod {
        match self {
            MethodArg::Lang => PromptMethod::LangPrompt,
            MethodArg::En => PromptMethod::EnPrompt,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            MethodArg::Lang => "lang",
            MethodArg::En => "en",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    LangLang,
    LangEn,
    EnEn,
}

impl ModeArg {
    fn mode(self) -> ExperimentMode {
        match self {
            ModeArg::LangLang => ExperimentMode::LangLang,
            ModeArg::LangEn => ExperimentMode::LangEn,
            ModeArg::EnEn => ExperimentMode::EnEn,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

/// Config-file overrides shared by the pipeline subcommands.
#[derive(Debug, clap::Args)]
struct Overrides {
    /// Override the length-penalty gamma from the config.
    #[arg(long)]
    gamma: Option<u32>,
    /// Override cache_dir from the config.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Override paths.out_dir from the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, config: &mut RunConfig) {
        if let Some(gamma) = self.gamma {
            config.gamma = gamma;
        }
        if let Some(cache_dir) = &self.cache_dir {
            config.cache_dir = cache_dir.clone();
        }
        if let Some(out_dir) = &self.out_dir {
            config.paths.out_dir = out_dir.clone();
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate entity and doc files and persist the corpus.
    Ingest {
        #[arg(long)]
        entities: PathBuf,
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate one response per (entity, language, template) and sanity-check each.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Subject backend name from the config's backend table.
        #[arg(long)]
        backend: String,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a generations file under one experiment mode.
    Score {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        generations: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score each language-L knowledge doc against the English doc.
    Audit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        language: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Aggregate score files into category rollups and per-model matrices.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        scores: Vec<PathBuf>,
        #[arg(long, value_enum)]
        format: FormatArg,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare predicted verdicts against human-annotated facts.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        verdicts: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(err) = run(cli.command) {
        eprintln!("error: {}", err.message());
        std::process::exit(err.exit_code());
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Ingest {
            entities,
            docs,
            out,
        } => cmd_ingest(&entities, &docs, &out),
        Command::Generate {
            config,
            backend,
            method,
            overrides,
        } => cmd_generate(&config, &backend, method, &overrides),
        Command::Score {
            config,
            mode,
            generations,
            overrides,
        } => cmd_score(&config, mode, &generations, &overrides),
        Command::Audit {
            config,
            language,
            overrides,
        } => cmd_audit(&config, &language, &overrides),
        Command::Report {
            config,
            scores,
            format,
            overrides,
        } => cmd_report(&config, &scores, format, &overrides),
        Command::Validate {
            config,
            gold,
            verdicts,
        } => cmd_validate(&config, &gold, &verdicts),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing

fn load_config(path: &Path, overrides: &Overrides) -> Result<LoadedConfig, CliError> {
    let mut loaded = RunConfig::load(path)?;
    overrides.apply(&mut loaded.config);
    loaded.config.validate()?;
    Ok(loaded)
}

fn load_corpus_dir(dir: &Path) -> Result<Corpus, CliError> {
    let corpus = corpus::load_corpus(&dir.join("entities.jsonl"), &dir.join("docs.jsonl"))
        .map_err(|e| CliError::usage(e.to_string()))?;
    for warning in corpus.warnings() {
        eprintln!("warning: {warning}");
    }
    Ok(corpus)
}

/// Build the sanity checker, honoring the optional profile cache keyed by
/// the corpus digest.
fn build_checker(config: &RunConfig, corpus: &Corpus) -> SanityChecker {
    let digest = corpus.digest();
    let identifier = match &config.sanity.profile_cache {
        Some(path) => match NGramIdentifier::load_cached(path, &digest) {
            Some(cached) => cached,
            None => {
                let trained =
                    NGramIdentifier::train_from_corpus(corpus, config.sanity.confidence_margin);
                if let Err(e) = trained.save(path, &digest) {
                    log::warn!("cannot write profile cache {}: {e}", path.display());
                }
                trained
            }
        },
        None => NGramIdentifier::train_from_corpus(corpus, config.sanity.confidence_margin),
    };
    SanityChecker::new(Box::new(identifier), config.sanity.distinct_word_min)
}

fn scoring_config(config: &RunConfig) -> ScoringConfig {
    ScoringConfig {
        bm25: config.bm25_params(),
        top_k: config.bm25.k,
        max_passage_tokens: config.bm25.max_tokens,
        gamma: config.gamma,
        gamma_boundary: config.gamma_boundary,
    }
}

fn make_run_dir(
    loaded: &LoadedConfig,
    command: &str,
    inputs: &[PathBuf],
) -> Result<PathBuf, CliError> {
    let id = run_id(command, loaded, inputs)?;
    let dir = loaded.config.paths.out_dir.join(id);
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

#[derive(serde::Serialize)]
struct LoggedCall {
    backend: String,
    count: u32,
    prompt: String,
}

/// Persist the logical call log (cache hits included, so the file is
/// byte-identical between cold and warm runs), sorted for determinism.
fn write_call_log(gateway: &Gateway, path: &Path) -> Result<(), CliError> {
    let mut counts: BTreeMap<(String, String), u32> = BTreeMap::new();
    for record in gateway.call_log() {
        *counts.entry((record.backend, record.prompt)).or_insert(0) += 1;
    }
    let records: Vec<LoggedCall> = counts
        .into_iter()
        .map(|((backend, prompt), count)| LoggedCall {
            backend,
            count,
            prompt,
        })
        .collect();
    write_records(path, &records).map_err(CliError::from)
}

fn corpus_inputs(config: &RunConfig) -> [PathBuf; 2] {
    [
        config.paths.corpus.join("entities.jsonl"),
        config.paths.corpus.join("docs.jsonl"),
    ]
}

// ---------------------------------------------------------------------------
// Commands

fn cmd_ingest(entities: &Path, docs: &Path, out: &Path) -> Result<(), CliError> {
    let corpus = corpus::load_corpus(entities, docs).map_err(|e| CliError::usage(e.to_string()))?;
    for warning in corpus.warnings() {
        eprintln!("warning: {warning}");
    }
    corpus
        .save(out)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    println!("entities: {}", corpus.entity_count());
    println!("docs: {}", corpus.doc_count());
    println!("languages: {}", corpus.languages_present().join(","));
    println!("corpus: {}", out.display());
    Ok(())
}

fn cmd_generate(
    config_path: &Path,
    backend: &str,
    method: MethodArg,
    overrides: &Overrides,
) -> Result<(), CliError> {
    let loaded = load_config(config_path, overrides)?;
    let config = &loaded.config;
    if !config.backends.contains_key(backend) {
        return Err(CliError::usage(format!(
            "unknown backend \"{backend}\" (not in config)"
        )));
    }
    let corpus = load_corpus_dir(&config.paths.corpus)?;
    let table = TemplateTable::load(&config.paths.template_table)?;
    let checker = build_checker(config, &corpus);
    let gateway = config.build_gateway()?;

    let generations = run_generation(
        &corpus,
        &gateway,
        backend,
        method.method(),
        &table,
        &checker,
    )?;

    let mut inputs = corpus_inputs(config).to_vec();
    inputs.push(config.paths.template_table.clone());
    let run_dir = make_run_dir(
        &loaded,
        &format!("generate:{}:{}", backend, method.tag()),
        &inputs,
    )?;
    let generations_path = run_dir.join(format!("generations_{}.jsonl", method.tag()));
    write_records(&generations_path, &generations)?;
    write_call_log(&gateway, &run_dir.join("calls.jsonl"))?;

    // per-language sanity pass rates (the language-correctness summary)
    let mut per_language: BTreeMap<&str, (u32, u32)> = BTreeMap::new();
    for generation in &generations {
        let entry = per_language
            .entry(generation.spec.language.as_str())
            .or_insert((0, 0));
        entry.1 += 1;
        if generation.sane() {
            entry.0 += 1;
        }
    }
    println!("run_dir: {}", run_dir.display());
    println!("generations: {}", generations_path.display());
    for (language, (passed, total)) in per_language {
        println!("sanity_pass_rate[{language}]: {passed}/{total}");
    }
    println!("backend_calls: {}", gateway.backend_calls());
    Ok(())
}

fn require_backend(config: &RunConfig, name: &str) -> Result<(), CliError> {
    if !config.backends.contains_key(name) {
        return Err(CliError::usage(format!(
            "config must define a \"{name}\" backend for this command"
        )));
    }
    Ok(())
}

fn cmd_score(
    config_path: &Path,
    mode: ModeArg,
    generations_path: &Path,
    overrides: &Overrides,
) -> Result<(), CliError> {
    let loaded = load_config(config_path, overrides)?;
    let config = &loaded.config;
    require_backend(config, "eval")?;
    require_backend(config, "translator")?;
    let corpus = load_corpus_dir(&config.paths.corpus)?;
    let demos =
        DemoSet::load(&config.paths.demos).map_err(|e| CliError::usage(format!("demos: {e}")))?;
    let gateway = config.build_gateway()?;
    let generations: Vec<Generation> = read_records(generations_path)?;
    let mode = mode.mode();

    let output = run_experiment(
        &generations,
        mode,
        &corpus,
        EvalContext {
            gateway: &gateway,
            eval_backend: "eval",
            translator_backend: "translator",
            demos: &demos,
        },
        &scoring_config(config),
    )?;

    let mut inputs = corpus_inputs(config).to_vec();
    inputs.push(config.paths.demos.clone());
    inputs.push(generations_path.to_path_buf());
    let run_dir = make_run_dir(
        &loaded,
        &format!("score:{}:g{}", mode.tag(), config.gamma),
        &inputs,
    )?;
    let verdicts_path = run_dir.join(format!("verdicts_{}.jsonl", mode.tag()));
    let scores_path = run_dir.join(format!("scores_{}.jsonl", mode.tag()));
    write_records(&verdicts_path, &output.verdicts)?;
    write_records(&scores_path, &output.scores)?;
    write_call_log(&gateway, &run_dir.join("calls.jsonl"))?;

    let scored = output
        .scores
        .iter()
        .filter(|s| s.n_templates_scored > 0)
        .count();
    println!("run_dir: {}", run_dir.display());
    println!("verdicts: {}", verdicts_path.display());
    println!("scores: {}", scores_path.display());
    println!("entities_scored: {scored}/{}", output.scores.len());
    println!("backend_calls: {}", gateway.backend_calls());
    Ok(())
}

fn cmd_audit(config_path: &Path, language: &str, overrides: &Overrides) -> Result<(), CliError> {
    let loaded = load_config(config_path, overrides)?;
    let config = &loaded.config;
    if corpus::language(language).is_none() {
        return Err(CliError::usage(format!(
            "unknown language code \"{language}\""
        )));
    }
    require_backend(config, "eval")?;
    require_backend(config, "translator")?;
    let corpus = load_corpus_dir(&config.paths.corpus)?;
    let demos =
        DemoSet::load(&config.paths.demos).map_err(|e| CliError::usage(format!("demos: {e}")))?;
    let gateway = config.build_gateway()?;

    let scores = audit_knowledge(
        &corpus,
        language,
        EvalContext {
            gateway: &gateway,
            eval_backend: "eval",
            translator_backend: "translator",
            demos: &demos,
        },
        &scoring_config(config),
    )?;

    let mut inputs = corpus_inputs(config).to_vec();
    inputs.push(config.paths.demos.clone());
    let run_dir = make_run_dir(
        &loaded,
        &format!("audit:{language}:g{}", config.gamma),
        &inputs,
    )?;
    let audit_path = run_dir.join(format!("audit_{language}.jsonl"));
    write_records(&audit_path, &scores)?;
    write_call_log(&gateway, &run_dir.join("calls.jsonl"))?;

    println!("run_dir: {}", run_dir.display());
    println!("audit: {}", audit_path.display());
    println!("entities_audited: {}", scores.len());
    println!("backend_calls: {}", gateway.backend_calls());
    Ok(())
}

fn cmd_report(
    config_path: &Path,
    score_paths: &[PathBuf],
    format: FormatArg,
    overrides: &Overrides,
) -> Result<(), CliError> {
    let loaded = load_config(config_path, overrides)?;
    let mut scores: Vec<EntityScore> = Vec::new();
    for path in score_paths {
        scores.extend(read_records::<EntityScore>(path)?);
    }

    let rollups = rollup_categories(&scores).map_err(|e| CliError::usage(e.to_string()))?;
    let spreads = rollup_template_spread(&scores).map_err(|e| CliError::usage(e.to_string()))?;

    // axes: table order for languages, sorted models, one matrix per mode
    let present_languages: Vec<String> = corpus::language_table()
        .iter()
        .map(|l| l.code.to_string())
        .filter(|code| scores.iter().any(|s| &s.language == code))
        .collect();
    let mut models: Vec<String> = scores.iter().map(|s| s.model.clone()).collect();
    models.sort();
    models.dedup();
    let mut modes: Vec<ExperimentMode> = scores.iter().map(|s| s.mode).collect();
    modes.sort();
    modes.dedup();
    let matrices = modes
        .into_iter()
        .map(|mode| {
            (
                mode,
                score_matrix(&scores, &present_languages, &models, mode),
            )
        })
        .collect();

    let report = Report {
        rollups,
        spreads,
        matrices,
    };
    let report_format = match format {
        FormatArg::Csv => ReportFormat::Csv,
        FormatArg::Json => ReportFormat::Json,
    };
    let run_dir = make_run_dir(&loaded, "report", score_paths)?;
    let written = emit_report(&report, report_format, &run_dir)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    println!("run_dir: {}", run_dir.display());
    for path in written {
        println!("report_file: {}", path.display());
    }
    Ok(())
}

/// Group pipeline verdict records into per-response support vectors, keyed
/// by (entity, language, template), in file order.
fn group_verdict_records(records: Vec<VerdictRecord>) -> Vec<ResponseVerdicts> {
    let mut grouped: Vec<ResponseVerdicts> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for record in records {
        let response_id = format!(
            "{}/{}/{}",
            record.entity_id, record.language, record.template_id
        );
        let slot = *index.entry(response_id.clone()).or_insert_with(|| {
            grouped.push(ResponseVerdicts {
                response_id,
                supported: Vec::new(),
            });
            grouped.len() - 1
        });
        grouped[slot].supported.push(record.supported);
    }
    grouped
}

fn cmd_validate(
    config_path: &Path,
    gold_path: &Path,
    verdicts_path: &Path,
) -> Result<(), CliError> {
    let loaded = RunConfig::load(config_path)?;
    loaded.config.validate()?;
    let gold: Vec<HumanAnnotatedFact> = read_records(gold_path)?;

    // the verdicts file is either per-response support vectors or raw
    // pipeline verdict records; sniff the first record
    let body = std::fs::read_to_string(verdicts_path)
        .map_err(|e| CliError::usage(format!("{}: {e}", verdicts_path.display())))?;
    let first = body.lines().find(|l| !l.trim().is_empty()).unwrap_or("{}");
    let sniffed: serde_json::Value = serde_json::from_str(first)
        .map_err(|e| CliError::usage(format!("{}: {e}", verdicts_path.display())))?;
    let predicted: Vec<ResponseVerdicts> = if sniffed.get("supported").is_some_and(|v| v.is_array())
    {
        read_records(verdicts_path)?
    } else {
        group_verdict_records(read_records(verdicts_path)?)
    };

    let metrics =
        validator_metrics(&predicted, &gold).map_err(|e| CliError::usage(e.to_string()))?;
    println!("error_rate: {:.6}", metrics.error_rate);
    println!("micro_f1: {:.6}", metrics.micro_f1);
    Ok(())
}
