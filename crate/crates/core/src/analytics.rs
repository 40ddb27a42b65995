//! Aggregation of entity scores into reporting artifacts, plus the
//! evaluator-validation metrics against human-annotated facts.
//!
//! Everything here is a pure fold over immutable inputs, run single-threaded
//! so emitted files are byte-deterministic.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{language, LanguageCategory};
use crate::experiments::{EntityScore, ExperimentMode};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("unknown language code \"{0}\" (closed 19-language set)")]
    UnknownLanguage(String),
    #[error("predicted/gold alignment mismatch: {0}")]
    AlignmentMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Mean score and fact count per (language category, mode), across entities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryRollup {
    pub category: LanguageCategory,
    pub mode: ExperimentMode,
    pub mean_score: f64,
    /// Population std of entity means within the category.
    pub std_across_entities: f64,
    pub mean_num_facts: f64,
    pub n_entities: u32,
}

/// Mean of per-entity template-spread stds per (category, mode).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TemplateSpreadRollup {
    pub category: LanguageCategory,
    pub mode: ExperimentMode,
    pub mean_template_std: f64,
    pub n_entities: u32,
}

/// One gold-labeled fact. `response_id` groups facts into responses, in
/// file order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanAnnotatedFact {
    pub response_id: String,
    pub fact: String,
    pub gold_supported: bool,
}

/// Support flags of one predicted response, aligned with gold by
/// response id and fact order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseVerdicts {
    pub response_id: String,
    pub supported: Vec<bool>,
}

/// Evaluator-validation outcome: mean absolute per-response score error and
/// micro-F1 (percent) of the Supported class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidatorMetrics {
    pub error_rate: f64,
    pub micro_f1: f64,
}

/// Mean-score matrix over (language, model) for one mode. Missing cells are
/// `None`, never zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreMatrix {
    pub languages: Vec<String>,
    pub models: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

fn population_std(values: &[f64], mean: f64) -> f64 {
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64).sqrt()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Group scored entities by (language category, mode) and average the
/// entity means. Rows come out ordered by category then mode; unknown
/// language codes are a hard error.
pub fn rollup_categories(scores: &[EntityScore]) -> Result<Vec<CategoryRollup>, AnalyticsError> {
    let mut groups: BTreeMap<(LanguageCategory, ExperimentMode), (Vec<f64>, Vec<f64>)> =
        BTreeMap::new();
    for score in scores {
        let info = language(&score.language)
            .ok_or_else(|| AnalyticsError::UnknownLanguage(score.language.clone()))?;
        let (Some(entity_mean), Some(facts)) = (score.mean, score.mean_num_facts) else {
            continue; // nothing sane to aggregate
        };
        let entry = groups.entry((info.category, score.mode)).or_default();
        entry.0.push(entity_mean);
        entry.1.push(facts);
    }
    Ok(groups
        .into_iter()
        .map(|((category, mode), (means, facts))| {
            let m = mean(&means);
            CategoryRollup {
                category,
                mode,
                mean_score: m,
                std_across_entities: population_std(&means, m),
                mean_num_facts: mean(&facts),
                n_entities: means.len() as u32,
            }
        })
        .collect())
}

/// Per (category, mode): mean of the per-entity template stds. Entities with
/// fewer than two scored templates carry no spread information and are
/// excluded.
pub fn rollup_template_spread(
    scores: &[EntityScore],
) -> Result<Vec<TemplateSpreadRollup>, AnalyticsError> {
    let mut groups: BTreeMap<(LanguageCategory, ExperimentMode), Vec<f64>> = BTreeMap::new();
    for score in scores {
        let info = language(&score.language)
            .ok_or_else(|| AnalyticsError::UnknownLanguage(score.language.clone()))?;
        if score.n_templates_scored < 2 {
            continue;
        }
        let Some(std) = score.std else { continue };
        groups
            .entry((info.category, score.mode))
            .or_default()
            .push(std);
    }
    Ok(groups
        .into_iter()
        .map(|((category, mode), stds)| TemplateSpreadRollup {
            category,
            mode,
            mean_template_std: mean(&stds),
            n_entities: stds.len() as u32,
        })
        .collect())
}

/// Matrix of mean entity scores per (language, model) for `mode`. Rows and
/// columns follow the requested axis order exactly.
pub fn score_matrix(
    scores: &[EntityScore],
    axis_languages: &[String],
    axis_models: &[String],
    mode: ExperimentMode,
) -> ScoreMatrix {
    let mut cells = Vec::with_capacity(axis_languages.len());
    for lang in axis_languages {
        let mut row = Vec::with_capacity(axis_models.len());
        for model in axis_models {
            let means: Vec<f64> = scores
                .iter()
                .filter(|s| s.mode == mode && &s.language == lang && &s.model == model)
                .filter_map(|s| s.mean)
                .collect();
            row.push(if means.is_empty() {
                None
            } else {
                Some(mean(&means))
            });
        }
        cells.push(row);
    }
    ScoreMatrix {
        languages: axis_languages.to_vec(),
        models: axis_models.to_vec(),
        cells,
    }
}

/// Error rate and micro-F1 of predicted verdicts against gold labels.
///
/// Error rate is the mean over responses of the absolute difference between
/// predicted and gold unpenalized supported fractions; micro-F1 pools
/// true/false positives over all facts and reports the Supported-class F1
/// as a percentage.
pub fn validator_metrics(
    predicted: &[ResponseVerdicts],
    gold: &[HumanAnnotatedFact],
) -> Result<ValidatorMetrics, AnalyticsError> {
    let mut gold_by_response: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    for fact in gold {
        gold_by_response
            .entry(&fact.response_id)
            .or_default()
            .push(fact.gold_supported);
    }
    if predicted.len() != gold_by_response.len() {
        return Err(AnalyticsError::AlignmentMismatch(format!(
            "{} predicted responses vs {} gold responses",
            predicted.len(),
            gold_by_response.len()
        )));
    }
    let mut abs_errors = Vec::with_capacity(predicted.len());
    let (mut tp, mut fp, mut r#fn) = (0u64, 0u64, 0u64);
    for response in predicted {
        let gold_flags = gold_by_response
            .get(response.response_id.as_str())
            .ok_or_else(|| {
                AnalyticsError::AlignmentMismatch(format!(
                    "response \"{}\" absent from gold",
                    response.response_id
                ))
            })?;
        if gold_flags.len() != response.supported.len() {
            return Err(AnalyticsError::AlignmentMismatch(format!(
                "response \"{}\": {} predicted facts vs {} gold facts",
                response.response_id,
                response.supported.len(),
                gold_flags.len()
            )));
        }
        if gold_flags.is_empty() {
            return Err(AnalyticsError::AlignmentMismatch(format!(
                "response \"{}\" has zero facts",
                response.response_id
            )));
        }
        let frac =
            |flags: &[bool]| flags.iter().filter(|&&s| s).count() as f64 / flags.len() as f64;
        abs_errors.push((frac(&response.supported) - frac(gold_flags)).abs());
        for (&pred, &gold) in response.supported.iter().zip(gold_flags) {
            match (pred, gold) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => r#fn += 1,
                (false, false) => {}
            }
        }
    }
    let denominator = 2 * tp + fp + r#fn;
    let micro_f1 = if denominator == 0 {
        100.0 // vacuously perfect: no positives anywhere on either side
    } else {
        200.0 * tp as f64 / denominator as f64
    };
    Ok(ValidatorMetrics {
        error_rate: mean(&abs_errors),
        micro_f1,
    })
}

// ---------------------------------------------------------------------------
// Report emission

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "csv" => Some(ReportFormat::Csv),
            "json" => Some(ReportFormat::Json),
            _ => None,
        }
    }
}

/// Everything one report run emits.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub rollups: Vec<CategoryRollup>,
    pub spreads: Vec<TemplateSpreadRollup>,
    pub matrices: Vec<(ExperimentMode, ScoreMatrix)>,
}

/// Round to the 6 decimal places the report format pins, so the CSV and
/// JSON variants carry identical values.
fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn fmt6(v: f64) -> String {
    format!("{:.6}", round6(v))
}

fn write_file(path: &Path, body: String) -> Result<(), AnalyticsError> {
    std::fs::write(path, body).map_err(|e| AnalyticsError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// JSON with sorted keys: route through `serde_json::Value`, whose object
/// map is a BTreeMap.
fn sorted_json<T: Serialize>(value: &T) -> String {
    let value = serde_json::to_value(value).expect("report serialization cannot fail");
    let mut body = serde_json::to_string_pretty(&value).expect("value serialization cannot fail");
    body.push('\n');
    body
}

#[derive(Serialize)]
struct RollupJson {
    category: String,
    mode: String,
    mean_score: f64,
    std_across_entities: f64,
    mean_num_facts: f64,
    n_entities: u32,
}

#[derive(Serialize)]
struct SpreadJson {
    category: String,
    mode: String,
    mean_template_std: f64,
    n_entities: u32,
}

#[derive(Serialize)]
struct MatrixJson {
    mode: String,
    languages: Vec<String>,
    models: Vec<String>,
    cells: Vec<Vec<Option<f64>>>,
}

/// Write the report files under `out_dir`: `category_rollup`,
/// `template_spread`, one `matrix_{mode}` per matrix plus a long-form
/// `matrix_{mode}_plot.csv` consumable by generic plotting tools. Output is
/// deterministic: sorted rows, LF endings, 6-decimal floats.
pub fn emit_report(
    report: &Report,
    format: ReportFormat,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, AnalyticsError> {
    std::fs::create_dir_all(out_dir).map_err(|e| AnalyticsError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let mut written = Vec::new();
    let mut emit = |name: String, body: String| -> Result<(), AnalyticsError> {
        let path = out_dir.join(name);
        write_file(&path, body)?;
        written.push(path);
        Ok(())
    };

    match format {
        ReportFormat::Csv => {
            let mut body = String::from(
                "category,mode,mean_score,std_across_entities,mean_num_facts,n_entities\n",
            );
            for r in &report.rollups {
                writeln!(
                    body,
                    "{},{},{},{},{},{}",
                    r.category,
                    r.mode,
                    fmt6(r.mean_score),
                    fmt6(r.std_across_entities),
                    fmt6(r.mean_num_facts),
                    r.n_entities
                )
                .expect("string write");
            }
            emit("category_rollup.csv".into(), body)?;

            let mut body = String::from("category,mode,mean_template_std,n_entities\n");
            for r in &report.spreads {
                writeln!(
                    body,
                    "{},{},{},{}",
                    r.category,
                    r.mode,
                    fmt6(r.mean_template_std),
                    r.n_entities
                )
                .expect("string write");
            }
            emit("template_spread.csv".into(), body)?;
        }
        ReportFormat::Json => {
            let rows: Vec<RollupJson> = report
                .rollups
                .iter()
                .map(|r| RollupJson {
                    category: r.category.to_string(),
                    mode: r.mode.tag().to_string(),
                    mean_score: round6(r.mean_score),
                    std_across_entities: round6(r.std_across_entities),
                    mean_num_facts: round6(r.mean_num_facts),
                    n_entities: r.n_entities,
                })
                .collect();
            emit("category_rollup.json".into(), sorted_json(&rows))?;

            let rows: Vec<SpreadJson> = report
                .spreads
                .iter()
                .map(|r| SpreadJson {
                    category: r.category.to_string(),
                    mode: r.mode.tag().to_string(),
                    mean_template_std: round6(r.mean_template_std),
                    n_entities: r.n_entities,
                })
                .collect();
            emit("template_spread.json".into(), sorted_json(&rows))?;
        }
    }

    for (mode, matrix) in &report.matrices {
        match format {
            ReportFormat::Csv => {
                let mut body = String::from("language");
                for model in &matrix.models {
                    write!(body, ",{model}").expect("string write");
                }
                body.push('\n');
                for (row_idx, lang) in matrix.languages.iter().enumerate() {
                    write!(body, "{lang}").expect("string write");
                    for cell in &matrix.cells[row_idx] {
                        match cell {
                            Some(v) => write!(body, ",{}", fmt6(*v)).expect("string write"),
                            None => body.push(','),
                        }
                    }
                    body.push('\n');
                }
                emit(format!("matrix_{}.csv", mode.tag()), body)?;
            }
            ReportFormat::Json => {
                let json = MatrixJson {
                    mode: mode.tag().to_string(),
                    languages: matrix.languages.clone(),
                    models: matrix.models.clone(),
                    cells: matrix
                        .cells
                        .iter()
                        .map(|row| row.iter().map(|c| c.map(round6)).collect())
                        .collect(),
                };
                emit(format!("matrix_{}.json", mode.tag()), sorted_json(&json))?;
            }
        }

        // long-form plot data, one row per present cell
        let mut body = String::from("language,model,score\n");
        for (row_idx, lang) in matrix.languages.iter().enumerate() {
            for (col_idx, model) in matrix.models.iter().enumerate() {
                if let Some(v) = matrix.cells[row_idx][col_idx] {
                    writeln!(body, "{lang},{model},{}", fmt6(v)).expect("string write");
                }
            }
        }
        emit(format!("matrix_{}_plot.csv", mode.tag()), body)?;
    }

    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// (mean, std, mean_num_facts, n_templates_scored)
    type Stats = (f64, f64, f64, u32);

    fn entity_score(
        entity: &str,
        language: &str,
        model: &str,
        mode: ExperimentMode,
        (mean, std, facts, n): Stats,
    ) -> EntityScore {
        EntityScore {
            entity_id: entity.into(),
            language: language.into(),
            model: model.into(),
            mode,
            per_template_scores: vec![mean; n as usize],
            mean: (n > 0).then_some(mean),
            std: (n > 0).then_some(std),
            mean_num_facts: (n > 0).then_some(facts),
            n_templates_scored: n,
        }
    }

    #[test]
    fn uniform_scores_roll_up_to_their_value() {
        let scores = vec![
            entity_score("e1", "en", "m", ExperimentMode::EnEn, (0.5, 0.0, 10.0, 3)),
            entity_score("e2", "fr", "m", ExperimentMode::EnEn, (0.5, 0.0, 12.0, 3)),
            entity_score("e3", "sw", "m", ExperimentMode::EnEn, (0.5, 0.0, 8.0, 3)),
        ];
        let rollups = rollup_categories(&scores).unwrap();
        assert_eq!(rollups.len(), 3); // very-high, high, low
        for rollup in &rollups {
            assert_eq!(rollup.mean_score, 0.5);
            assert_eq!(rollup.std_across_entities, 0.0);
        }
    }

    #[test]
    fn low_category_pair_hand_computed() {
        let scores = vec![
            entity_score("e1", "sw", "m", ExperimentMode::LangEn, (0.4, 0.0, 5.0, 3)),
            entity_score("e2", "jv", "m", ExperimentMode::LangEn, (0.6, 0.0, 7.0, 3)),
        ];
        let rollups = rollup_categories(&scores).unwrap();
        assert_eq!(rollups.len(), 1);
        let low = &rollups[0];
        assert_eq!(low.category, LanguageCategory::Low);
        assert!((low.mean_score - 0.5).abs() < 1e-12);
        assert!((low.std_across_entities - 0.1).abs() < 1e-12);
        assert!((low.mean_num_facts - 6.0).abs() < 1e-12);
        assert_eq!(low.n_entities, 2);
    }

    #[test]
    fn unknown_language_is_hard_error() {
        let scores = vec![entity_score(
            "e1",
            "xx",
            "m",
            ExperimentMode::EnEn,
            (0.5, 0.0, 5.0, 3),
        )];
        assert!(matches!(
            rollup_categories(&scores),
            Err(AnalyticsError::UnknownLanguage(code)) if code == "xx"
        ));
    }

    #[test]
    fn unscored_entities_are_excluded() {
        let scores = vec![
            entity_score("e1", "en", "m", ExperimentMode::EnEn, (0.8, 0.0, 9.0, 3)),
            entity_score("e2", "en", "m", ExperimentMode::EnEn, (0.0, 0.0, 0.0, 0)),
        ];
        let rollups = rollup_categories(&scores).unwrap();
        assert_eq!(rollups.len(), 1);
        assert_eq!(rollups[0].n_entities, 1);
        assert_eq!(rollups[0].mean_score, 0.8);
    }

    #[test]
    fn rollup_is_permutation_invariant() {
        let mut scores = vec![
            entity_score(
                "e1",
                "fr",
                "m",
                ExperimentMode::LangLang,
                (0.3, 0.02, 5.0, 3),
            ),
            entity_score(
                "e2",
                "es",
                "m",
                ExperimentMode::LangLang,
                (0.7, 0.04, 9.0, 3),
            ),
            entity_score(
                "e3",
                "ja",
                "m",
                ExperimentMode::LangLang,
                (0.5, 0.06, 7.0, 2),
            ),
        ];
        let forward = rollup_categories(&scores).unwrap();
        scores.reverse();
        assert_eq!(forward, rollup_categories(&scores).unwrap());
    }

    #[test]
    fn spread_averages_only_multi_template_entities() {
        let scores = vec![
            entity_score("e1", "sw", "m", ExperimentMode::EnEn, (0.5, 0.04, 5.0, 3)),
            entity_score("e2", "sw", "m", ExperimentMode::EnEn, (0.5, 0.06, 5.0, 2)),
            entity_score("e3", "sw", "m", ExperimentMode::EnEn, (0.5, 0.00, 5.0, 1)),
        ];
        let spreads = rollup_template_spread(&scores).unwrap();
        assert_eq!(spreads.len(), 1);
        assert!((spreads[0].mean_template_std - 0.05).abs() < 1e-12);
        assert_eq!(spreads[0].n_entities, 2);
    }

    #[test]
    fn all_zero_stds_roll_up_to_zero() {
        let scores = vec![
            entity_score("e1", "en", "m", ExperimentMode::EnEn, (0.5, 0.0, 5.0, 3)),
            entity_score("e2", "en", "m", ExperimentMode::EnEn, (0.7, 0.0, 5.0, 3)),
        ];
        let spreads = rollup_template_spread(&scores).unwrap();
        assert_eq!(spreads[0].mean_template_std, 0.0);
    }

    #[test]
    fn matrix_single_cell() {
        let scores = vec![entity_score(
            "e1",
            "en",
            "m1",
            ExperimentMode::EnEn,
            (0.8, 0.0, 9.0, 3),
        )];
        let matrix = score_matrix(
            &scores,
            &["en".into()],
            &["m1".into()],
            ExperimentMode::EnEn,
        );
        assert_eq!(matrix.cells, vec![vec![Some(0.8)]]);
    }

    #[test]
    fn matrix_missing_cell_is_absent_not_zero() {
        let scores = vec![entity_score(
            "e1",
            "en",
            "m1",
            ExperimentMode::EnEn,
            (0.8, 0.0, 9.0, 3),
        )];
        let matrix = score_matrix(
            &scores,
            &["en".into(), "jv".into()],
            &["m1".into(), "m2".into()],
            ExperimentMode::EnEn,
        );
        assert_eq!(matrix.cells[0], vec![Some(0.8), None]);
        assert_eq!(matrix.cells[1], vec![None, None]);
    }

    #[test]
    fn matrix_respects_requested_axis_order() {
        let scores = vec![
            entity_score("e1", "fr", "m1", ExperimentMode::EnEn, (0.6, 0.0, 9.0, 3)),
            entity_score("e1", "en", "m1", ExperimentMode::EnEn, (0.8, 0.0, 9.0, 3)),
        ];
        let matrix = score_matrix(
            &scores,
            &["fr".into(), "en".into()],
            &["m1".into()],
            ExperimentMode::EnEn,
        );
        assert_eq!(matrix.languages, vec!["fr", "en"]);
        assert_eq!(matrix.cells, vec![vec![Some(0.6)], vec![Some(0.8)]]);
    }

    fn gold_uniform_42() -> Vec<HumanAnnotatedFact> {
        // 5 responses x 100 facts, each with exactly 42 supported
        let mut gold = Vec::new();
        for r in 0..5 {
            for i in 0..100 {
                gold.push(HumanAnnotatedFact {
                    response_id: format!("r{r}"),
                    fact: format!("fact {i}"),
                    gold_supported: i < 42,
                });
            }
        }
        gold
    }

    #[test]
    fn perfect_predictions_score_zero_error_and_full_f1() {
        let gold = gold_uniform_42();
        let predicted: Vec<ResponseVerdicts> = (0..5)
            .map(|r| ResponseVerdicts {
                response_id: format!("r{r}"),
                supported: (0..100).map(|i| i < 42).collect(),
            })
            .collect();
        let metrics = validator_metrics(&predicted, &gold).unwrap();
        assert_eq!(metrics.error_rate, 0.0);
        assert_eq!(metrics.micro_f1, 100.0);
    }

    #[test]
    fn always_not_supported_matches_gold_fraction() {
        let gold = gold_uniform_42();
        let predicted: Vec<ResponseVerdicts> = (0..5)
            .map(|r| ResponseVerdicts {
                response_id: format!("r{r}"),
                supported: vec![false; 100],
            })
            .collect();
        let metrics = validator_metrics(&predicted, &gold).unwrap();
        assert!((metrics.error_rate - 0.42).abs() < 1e-12);
        assert_eq!(metrics.micro_f1, 0.0);
    }

    #[test]
    fn pooled_confusion_matrix_hand_case() {
        // single response, gold [T, T, F, F], predicted [F, T, T, T]:
        // TP=1, FP=2, FN=1 -> F1 = 2/(2+2+1) * 100 = 40; ER = |0.75 - 0.5|
        let gold: Vec<HumanAnnotatedFact> = [true, true, false, false]
            .iter()
            .enumerate()
            .map(|(i, &g)| HumanAnnotatedFact {
                response_id: "r0".into(),
                fact: format!("f{i}"),
                gold_supported: g,
            })
            .collect();
        let predicted = vec![ResponseVerdicts {
            response_id: "r0".into(),
            supported: vec![false, true, true, true],
        }];
        let metrics = validator_metrics(&predicted, &gold).unwrap();
        assert!((metrics.error_rate - 0.25).abs() < 1e-12);
        assert!((metrics.micro_f1 - 40.0).abs() < 1e-12);
    }

    #[test]
    fn misaligned_fact_counts_are_rejected() {
        let gold = vec![HumanAnnotatedFact {
            response_id: "r0".into(),
            fact: "f".into(),
            gold_supported: true,
        }];
        let predicted = vec![ResponseVerdicts {
            response_id: "r0".into(),
            supported: vec![true, false],
        }];
        assert!(matches!(
            validator_metrics(&predicted, &gold),
            Err(AnalyticsError::AlignmentMismatch(_))
        ));
    }

    fn sample_report() -> Report {
        let scores = vec![
            entity_score(
                "e1",
                "en",
                "m1",
                ExperimentMode::EnEn,
                (0.75, 0.05, 11.0, 3),
            ),
            entity_score("e2", "fr", "m1", ExperimentMode::EnEn, (0.5, 0.1, 7.0, 3)),
        ];
        Report {
            rollups: rollup_categories(&scores).unwrap(),
            spreads: rollup_template_spread(&scores).unwrap(),
            matrices: vec![(
                ExperimentMode::EnEn,
                score_matrix(
                    &scores,
                    &["en".into(), "fr".into(), "jv".into()],
                    &["m1".into()],
                    ExperimentMode::EnEn,
                ),
            )],
        }
    }

    #[test]
    fn emit_is_deterministic() {
        let report = sample_report();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        for format in [ReportFormat::Csv, ReportFormat::Json] {
            emit_report(&report, format, dir_a.path()).unwrap();
            emit_report(&report, format, dir_b.path()).unwrap();
        }
        for entry in std::fs::read_dir(dir_a.path()).unwrap() {
            let name = entry.unwrap().file_name();
            let a = std::fs::read(dir_a.path().join(&name)).unwrap();
            let b = std::fs::read(dir_b.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name:?} differs between runs");
        }
    }

    #[test]
    fn empty_rollups_emit_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&Report::default(), ReportFormat::Csv, dir.path()).unwrap();
        let body = std::fs::read_to_string(dir.path().join("category_rollup.csv")).unwrap();
        assert_eq!(
            body,
            "category,mode,mean_score,std_across_entities,mean_num_facts,n_entities\n"
        );
    }

    #[test]
    fn csv_and_json_carry_identical_values() {
        let report = sample_report();
        let dir = tempfile::tempdir().unwrap();
        emit_report(&report, ReportFormat::Csv, dir.path()).unwrap();
        emit_report(&report, ReportFormat::Json, dir.path()).unwrap();

        let csv = std::fs::read_to_string(dir.path().join("category_rollup.csv")).unwrap();
        let json: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("category_rollup.json")).unwrap(),
        )
        .unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        let json_rows = json.as_array().unwrap();
        assert_eq!(rows.len(), json_rows.len());
        for (csv_row, json_row) in rows.iter().zip(json_rows) {
            let fields: Vec<&str> = csv_row.split(',').collect();
            assert_eq!(fields[0], json_row["category"].as_str().unwrap());
            assert_eq!(fields[1], json_row["mode"].as_str().unwrap());
            let csv_mean: f64 = fields[2].parse().unwrap();
            assert_eq!(csv_mean, json_row["mean_score"].as_f64().unwrap());
        }

        // matrix absent cell: empty in CSV, null in JSON
        let matrix_csv = std::fs::read_to_string(dir.path().join("matrix_en-en.csv")).unwrap();
        assert!(matrix_csv
            .lines()
            .any(|l| l.starts_with("jv,") && l.ends_with(',')));
        let matrix_json: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("matrix_en-en.json")).unwrap(),
        )
        .unwrap();
        assert!(matrix_json["cells"][2][0].is_null());
    }
}
