//! Exit-code and black-box behavior of the `factgap` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_factgap"))
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).to_string()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).to_string()
}

/// Copy the fixture config into a temp dir with cache/out dirs scoped to the
/// test, keeping the relative fixture paths working via absolute rewrite.
fn temp_config(dir: &Path) -> PathBuf {
    let source = fixtures().join("configs/fixture-run.json");
    let mut config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&source).unwrap()).unwrap();
    config["cache_dir"] = serde_json::json!(dir.join("cache"));
    config["paths"]["out_dir"] = serde_json::json!(dir.join("out"));
    config["paths"]["corpus"] = serde_json::json!(fixtures().join("corpus-e2e"));
    config["paths"]["demos"] = serde_json::json!(fixtures().join("demos.jsonl"));
    config["paths"]["template_table"] = serde_json::json!(fixtures().join("templates.jsonl"));
    for backend in ["subj", "eval", "translator"] {
        let rules = config["backends"][backend]["rules"].as_str().unwrap();
        let name = Path::new(rules).file_name().unwrap().to_owned();
        config["backends"][backend]["rules"] = serde_json::json!(fixtures().join(name));
    }
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn ingest_valid_fixtures_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let output = binary()
        .args(["ingest", "--entities"])
        .arg(fixtures().join("corpus-e2e/entities.jsonl"))
        .arg("--docs")
        .arg(fixtures().join("corpus-e2e/docs.jsonl"))
        .arg("--out")
        .arg(dir.path().join("corpus"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", stderr(&output));
    let out = stdout(&output);
    assert!(out.contains("entities: 3"), "{out}");
    assert!(out.contains("docs: 15"), "{out}");
    assert!(dir.path().join("corpus/entities.jsonl").exists());
}

#[test]
fn ingest_bad_language_exits_two_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let entities = dir.path().join("entities.jsonl");
    let docs = dir.path().join("docs.jsonl");
    std::fs::write(&entities, "{\"id\":\"e1\",\"canonical_name\":\"A\"}\n").unwrap();
    std::fs::write(
        &docs,
        "{\"entity_id\":\"e1\",\"language\":\"en\",\"variant\":\"original\",\"text\":\"ok\"}\n{\"entity_id\":\"e1\",\"language\":\"xx\",\"variant\":\"original\",\"text\":\"bad\"}\n",
    )
    .unwrap();
    let output = binary()
        .args(["ingest", "--entities"])
        .arg(&entities)
        .arg("--docs")
        .arg(&docs)
        .arg("--out")
        .arg(dir.path().join("corpus"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let err = stderr(&output);
    assert!(err.contains(":2"), "error must name the line: {err}");
    assert!(err.contains("xx"), "{err}");
}

#[test]
fn ingest_missing_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let output = binary()
        .args([
            "ingest",
            "--entities",
            "/nonexistent/entities.jsonl",
            "--docs",
        ])
        .arg(dir.path().join("also-missing.jsonl"))
        .arg("--out")
        .arg(dir.path().join("corpus"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn generate_unknown_backend_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = temp_config(dir.path());
    let output = binary()
        .arg("generate")
        .arg("--config")
        .arg(&config)
        .args(["--backend", "nope", "--method", "lang"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{}", stderr(&output));
    assert!(stderr(&output).contains("unknown backend"));
}

#[test]
fn generate_warm_cache_rerun_makes_zero_backend_calls() {
    let dir = tempfile::tempdir().unwrap();
    let config = temp_config(dir.path());
    let run = || {
        binary()
            .arg("generate")
            .arg("--config")
            .arg(&config)
            .args(["--backend", "subj", "--method", "lang"])
            .output()
            .unwrap()
    };
    let cold = run();
    assert_eq!(cold.status.code(), Some(0), "{}", stderr(&cold));
    assert!(
        stdout(&cold).contains("backend_calls: 27"),
        "{}",
        stdout(&cold)
    );
    let warm = run();
    assert!(
        stdout(&warm).contains("backend_calls: 0"),
        "{}",
        stdout(&warm)
    );
    // identical records
    let gen_line = |out: &Output| {
        stdout(out)
            .lines()
            .find(|l| l.starts_with("generations: "))
            .unwrap()
            .trim_start_matches("generations: ")
            .to_string()
    };
    let a = std::fs::read(gen_line(&cold)).unwrap();
    let b = std::fs::read(gen_line(&warm)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn audit_french_uses_pretranslated_docs_offline() {
    let dir = tempfile::tempdir().unwrap();
    let config = temp_config(dir.path());
    let output = binary()
        .arg("audit")
        .arg("--config")
        .arg(&config)
        .args(["--language", "fr"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", stderr(&output));
    let out = stdout(&output);
    // the corpus ships translated_to_english variants for fr, so the
    // translator backend is never needed
    assert!(out.contains("entities_audited: 3"), "{out}");
    let audit_path = out
        .lines()
        .find(|l| l.starts_with("audit: "))
        .unwrap()
        .trim_start_matches("audit: ");
    let body = std::fs::read_to_string(audit_path).unwrap();
    for line in body.lines() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        // the pre-translated docs are assembled from English doc sentences,
        // so every fact is supported; 8 facts <= gamma=10 keeps the penalty
        assert_eq!(
            record["result"]["num_supported"],
            record["result"]["num_facts"]
        );
        assert!(record["result"]["score"].as_f64().unwrap() > 0.0);
        assert!(record["result"]["penalty"].as_f64().unwrap() < 1.0);
    }
    let run_dir = out
        .lines()
        .find(|l| l.starts_with("run_dir: "))
        .unwrap()
        .trim_start_matches("run_dir: ");
    let calls = std::fs::read_to_string(Path::new(run_dir).join("calls.jsonl")).unwrap();
    assert!(
        !calls.contains("\"backend\":\"translator\""),
        "translator must stay idle: {calls}"
    );
}

#[test]
fn validate_prints_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let config = temp_config(dir.path());
    let output = binary()
        .arg("validate")
        .arg("--config")
        .arg(&config)
        .arg("--gold")
        .arg(fixtures().join("gold.jsonl"))
        .arg("--verdicts")
        .arg(fixtures().join("predicted.jsonl"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", stderr(&output));
    let out = stdout(&output);
    assert!(out.contains("error_rate: 0.150000"), "{out}");
    assert!(out.contains("micro_f1: 85.714286"), "{out}");
}

#[test]
fn validate_accepts_pipeline_verdict_records() {
    let dir = tempfile::tempdir().unwrap();
    let config = temp_config(dir.path());
    // two responses keyed entity/lang/template with 2 facts each
    let verdicts = dir.path().join("verdicts.jsonl");
    let records = [
        ("ada-lumen", 0u8, "f0", true),
        ("ada-lumen", 0u8, "f1", false),
        ("omar-benali", 1u8, "f0", true),
        ("omar-benali", 1u8, "f1", true),
    ];
    let mut body = String::new();
    for (entity, template, fact, supported) in records {
        body.push_str(
            &serde_json::json!({
                "entity_id": entity,
                "language": "en",
                "template_id": template,
                "mode": "en-en",
                "model": "m",
                "fact": fact,
                "sentence_index": 0,
                "supported": supported,
                "parse_status": "clean",
                "raw_reply": "True",
                "passages": []
            })
            .to_string(),
        );
        body.push('\n');
    }
    std::fs::write(&verdicts, body).unwrap();
    let gold = dir.path().join("gold.jsonl");
    let mut body = String::new();
    for (rid, flags) in [
        ("ada-lumen/en/0", [true, true]),
        ("omar-benali/en/1", [true, false]),
    ] {
        for (i, flag) in flags.iter().enumerate() {
            body.push_str(
                &serde_json::json!({"response_id": rid, "fact": format!("f{i}"), "gold_supported": flag})
                    .to_string(),
            );
            body.push('\n');
        }
    }
    std::fs::write(&gold, body).unwrap();
    let output = binary()
        .arg("validate")
        .arg("--config")
        .arg(&config)
        .arg("--gold")
        .arg(&gold)
        .arg("--verdicts")
        .arg(&verdicts)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", stderr(&output));
    // |0.5-1.0| and |1.0-0.5| -> mean 0.5 ; TP=2 FP=1 FN=1 -> 2*2/(4+1+1)
    let out = stdout(&output);
    assert!(out.contains("error_rate: 0.500000"), "{out}");
    assert!(out.contains("micro_f1: 66.666667"), "{out}");
}

#[test]
fn score_with_wrong_method_generations_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = temp_config(dir.path());
    let gen = binary()
        .arg("generate")
        .arg("--config")
        .arg(&config)
        .args(["--backend", "subj", "--method", "lang"])
        .output()
        .unwrap();
    assert_eq!(gen.status.code(), Some(0));
    let generations = stdout(&gen)
        .lines()
        .find(|l| l.starts_with("generations: "))
        .unwrap()
        .trim_start_matches("generations: ")
        .to_string();
    let output = binary()
        .arg("score")
        .arg("--config")
        .arg(&config)
        .args(["--mode", "en-en", "--generations"])
        .arg(&generations)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{}", stderr(&output));
    assert!(stderr(&output).contains("requires"), "{}", stderr(&output));
}

#[test]
fn profile_cache_is_written_and_reused() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = temp_config(dir.path());
    let cache_file = dir.path().join("profiles.json");
    let mut config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&config_path).unwrap()).unwrap();
    config["sanity"]["profile_cache"] = serde_json::json!(cache_file);
    std::fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();

    let run = || {
        binary()
            .arg("generate")
            .arg("--config")
            .arg(&config_path)
            .args(["--backend", "subj", "--method", "lang"])
            .output()
            .unwrap()
    };
    let first = run();
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    assert!(
        cache_file.exists(),
        "profile cache must be written on first run"
    );
    let cached_bytes = std::fs::read(&cache_file).unwrap();
    let second = run();
    assert_eq!(second.status.code(), Some(0), "{}", stderr(&second));
    assert_eq!(
        cached_bytes,
        std::fs::read(&cache_file).unwrap(),
        "cache must be stable"
    );
    // identical sanity outcomes either way
    assert_eq!(
        stdout(&first)
            .lines()
            .filter(|l| l.contains("sanity_pass_rate"))
            .collect::<Vec<_>>(),
        stdout(&second)
            .lines()
            .filter(|l| l.contains("sanity_pass_rate"))
            .collect::<Vec<_>>()
    );
}

#[test]
fn gamma_boundary_config_switches_penalty_rule() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = temp_config(dir.path());
    let gen = binary()
        .arg("generate")
        .arg("--config")
        .arg(&config_path)
        .args(["--backend", "subj", "--method", "lang"])
        .output()
        .unwrap();
    let generations = stdout(&gen)
        .lines()
        .find(|l| l.starts_with("generations: "))
        .unwrap()
        .trim_start_matches("generations: ")
        .to_string();

    let score_with_boundary = |boundary: &str| {
        let mut config: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&config_path).unwrap()).unwrap();
        config["gamma"] = serde_json::json!(5);
        config["gamma_boundary"] = serde_json::json!(boundary);
        let path = dir.path().join(format!("config-{boundary}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
        let output = binary()
            .arg("score")
            .arg("--config")
            .arg(&path)
            .args(["--mode", "lang-lang", "--generations"])
            .arg(&generations)
            .output()
            .unwrap();
        assert_eq!(output.status.code(), Some(0), "{}", stderr(&output));
        let scores = stdout(&output)
            .lines()
            .find(|l| l.starts_with("scores: "))
            .unwrap()
            .trim_start_matches("scores: ")
            .to_string();
        let first: serde_json::Value = serde_json::from_str(
            std::fs::read_to_string(scores)
                .unwrap()
                .lines()
                .next()
                .unwrap(),
        )
        .unwrap();
        first["per_template_scores"][0].as_f64().unwrap()
    };

    // template 0 has 5 facts, 4 supported; gamma=5: the formula reading
    // penalizes n <= gamma, the strict reading does not penalize n == gamma
    let le = score_with_boundary("le");
    let lt = score_with_boundary("lt");
    assert!((le - (-4.0f64 / 5.0).exp() * 0.8).abs() < 1e-12, "le: {le}");
    assert!((lt - 0.8).abs() < 1e-12, "lt: {lt}");
}

#[test]
fn gamma_override_changes_scores() {
    let dir = tempfile::tempdir().unwrap();
    let config = temp_config(dir.path());
    let gen = binary()
        .arg("generate")
        .arg("--config")
        .arg(&config)
        .args(["--backend", "subj", "--method", "lang"])
        .output()
        .unwrap();
    let generations = stdout(&gen)
        .lines()
        .find(|l| l.starts_with("generations: "))
        .unwrap()
        .trim_start_matches("generations: ")
        .to_string();
    let score = |gamma: &str| {
        let output = binary()
            .arg("score")
            .arg("--config")
            .arg(&config)
            .args(["--mode", "lang-lang", "--generations"])
            .arg(&generations)
            .args(["--gamma", gamma])
            .output()
            .unwrap();
        assert_eq!(output.status.code(), Some(0), "{}", stderr(&output));
        let path = stdout(&output)
            .lines()
            .find(|l| l.starts_with("scores: "))
            .unwrap()
            .trim_start_matches("scores: ")
            .to_string();
        std::fs::read_to_string(path).unwrap()
    };
    let with_penalty = score("10");
    let without_penalty = score("1"); // gamma 1 disables the penalty
    assert_ne!(with_penalty, without_penalty);
    let first: serde_json::Value =
        serde_json::from_str(without_penalty.lines().next().unwrap()).unwrap();
    // 4/5, 4/6, 3/5 unpenalized
    let scores: Vec<f64> = first["per_template_scores"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!((scores[0] - 0.8).abs() < 1e-12, "{scores:?}");
}
