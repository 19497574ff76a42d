//! Benchmark evaluation: prompts every question against its scene's
//! keyframes, scores the answers, and aggregates.

mod metrics;
mod questions;

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{bounded_map, fingerprint, to_chat_request, ChatBackend, ChatParams};
use crate::pipeline::{select_scene_cached, KeyframeStrategy, SceneDirectory};
use crate::prompt::{assemble, build_blocks, AnnotationSpec, KeyframeBlock, PromptOptions};
use crate::selector::SelectionConfig;

pub use self::metrics::{bleu_n, em_at_1, normalize_answer, rouge_l, ROUGE_L_BETA};
pub use self::questions::{
    build_answer_bank, classify_question, load_questions, parse_questions, render_benchmark_annotation,
    AnswerBank, Dataset, QaItem, QuestionType, BANK_SIZE,
};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("answer bank is empty; cannot render a benchmark annotation")]
    EmptyBank,
    #[error("{unscored} of {total} items could not be scored")]
    Incomplete { unscored: usize, total: usize },
}

/// Single-factor variations of the full prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Keyframes without pose text.
    NoPose,
    /// Uniformly sampled frames instead of greedy selection.
    UniformKf,
    /// Generic short-answer annotation instead of the answer bank.
    ZeroShotAnnotation,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::NoPose, Ablation::UniformKf, Ablation::ZeroShotAnnotation];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoPose => "no-pose",
            Ablation::UniformKf => "uniform-kf",
            Ablation::ZeroShotAnnotation => "zero-shot-annotation",
        }
    }
}

impl FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation `{s}` (expected no-pose, uniform-kf or zero-shot-annotation)"))
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The keyframe strategy, annotation and prompt options of one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub strategy: KeyframeStrategy,
    pub annotation: AnnotationSpec,
    pub options: PromptOptions,
}

impl Arm {
    pub fn new(ablation: Option<Ablation>, annotation: AnnotationSpec, options: PromptOptions) -> Self {
        let mut arm = Arm {
            strategy: KeyframeStrategy::Greedy,
            annotation,
            options,
        };
        match ablation {
            None => {}
            Some(Ablation::NoPose) => arm.options.include_pose = false,
            Some(Ablation::UniformKf) => arm.strategy = KeyframeStrategy::Uniform,
            Some(Ablation::ZeroShotAnnotation) => arm.annotation = AnnotationSpec::ZeroShot,
        }
        arm
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub dataset: Dataset,
    pub selection: SelectionConfig,
    pub ablation: Option<Ablation>,
    /// Annotation of the full arm; usually the rendered answer bank.
    pub annotation: AnnotationSpec,
    pub prompt: PromptOptions,
    pub model_tag: String,
    pub chat: ChatParams,
    pub in_flight: usize,
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemScores {
    pub em_at_1: f64,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
}

impl ItemScores {
    pub fn compute(prediction: &str, references: &[String]) -> Self {
        ItemScores {
            em_at_1: em_at_1(prediction, references),
            bleu_1: bleu_n(prediction, references, 1),
            bleu_2: bleu_n(prediction, references, 2),
            bleu_3: bleu_n(prediction, references, 3),
            bleu_4: bleu_n(prediction, references, 4),
            rouge_l: rouge_l(prediction, references),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub question_id: String,
    pub scene_id: String,
    pub question_type: QuestionType,
    /// Request fingerprint, usable as a replay key.
    pub fingerprint: Option<String>,
    pub prediction: Option<String>,
    pub scores: Option<ItemScores>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub question_type: QuestionType,
    pub count: usize,
    pub em_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub scored: usize,
    pub unscored: usize,
    /// True when some items could not be scored.
    pub partial: bool,
    pub em_at_1: f64,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    /// EM@1 per question type, in the dataset's type order.
    pub categories: Vec<CategoryScore>,
    /// Unweighted mean over the categories that have items.
    pub category_average: Option<f64>,
}

impl Aggregates {
    pub fn from_items(dataset: Dataset, items: &[ItemRecord]) -> Self {
        let scored: Vec<(QuestionType, ItemScores)> =
            items.iter().filter_map(|r| r.scores.map(|s| (r.question_type, s))).collect();
        let n = scored.len();
        let mean = |f: fn(&ItemScores) -> f64| {
            if n == 0 {
                0.0
            } else {
                scored.iter().map(|(_, s)| f(s)).sum::<f64>() / n as f64
            }
        };
        let categories: Vec<CategoryScore> = dataset
            .question_types()
            .iter()
            .filter_map(|&qt| {
                let hits: Vec<f64> = scored.iter().filter(|(t, _)| *t == qt).map(|(_, s)| s.em_at_1).collect();
                (!hits.is_empty()).then(|| CategoryScore {
                    question_type: qt,
                    count: hits.len(),
                    em_at_1: hits.iter().sum::<f64>() / hits.len() as f64,
                })
            })
            .collect();
        let category_average = (!categories.is_empty())
            .then(|| categories.iter().map(|c| c.em_at_1).sum::<f64>() / categories.len() as f64);
        Aggregates {
            scored: n,
            unscored: items.len() - n,
            partial: n < items.len(),
            em_at_1: mean(|s| s.em_at_1),
            bleu_1: mean(|s| s.bleu_1),
            bleu_2: mean(|s| s.bleu_2),
            bleu_3: mean(|s| s.bleu_3),
            bleu_4: mean(|s| s.bleu_4),
            rouge_l: mean(|s| s.rouge_l),
            categories,
            category_average,
        }
    }

    fn category(&self, qt: QuestionType) -> Option<f64> {
        self.categories.iter().find(|c| c.question_type == qt).map(|c| c.em_at_1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub dataset: Dataset,
    pub model: String,
    pub backend: String,
    pub ablation: Option<Ablation>,
    pub selection_fingerprint: String,
    pub items: Vec<ItemRecord>,
    pub aggregates: Aggregates,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One human-readable line of aggregate scores.
    pub fn summary_row(&self) -> String {
        let a = &self.aggregates;
        let arm = self.ablation.map_or("full", Ablation::name);
        let mut row = format!("{} arm={arm} EM@1={:.4}", self.dataset, a.em_at_1);
        match self.dataset {
            Dataset::ScanQa => row.push_str(&format!(
                " BLEU-1={:.4} BLEU-2={:.4} BLEU-3={:.4} BLEU-4={:.4} ROUGE-L={:.4}",
                a.bleu_1, a.bleu_2, a.bleu_3, a.bleu_4, a.rouge_l
            )),
            Dataset::Sqa3d => {
                for &qt in self.dataset.question_types() {
                    row.push_str(&format!(" {}={}", qt.prompt_label(Dataset::Sqa3d), fmt_opt(a.category(qt))));
                }
                row.push_str(&format!(" Avg={}", fmt_opt(a.category_average)));
            }
        }
        row.push_str(&format!(" scored={} unscored={}", a.scored, a.unscored));
        row
    }

    /// Header plus one data row.
    pub fn to_csv(&self) -> String {
        let a = &self.aggregates;
        let mut header = vec![
            "dataset", "model", "arm", "scored", "unscored", "em_at_1", "bleu_1", "bleu_2", "bleu_3", "bleu_4",
            "rouge_l",
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
        let mut row = vec![
            self.dataset.to_string(),
            self.model.clone(),
            self.ablation.map_or("full", Ablation::name).to_string(),
            a.scored.to_string(),
            a.unscored.to_string(),
        ];
        for v in [a.em_at_1, a.bleu_1, a.bleu_2, a.bleu_3, a.bleu_4, a.rouge_l] {
            row.push(format!("{v:.6}"));
        }
        for &qt in self.dataset.question_types() {
            header.push(format!("em_{}", qt.key()));
            row.push(a.category(qt).map_or_else(String::new, |v| format!("{v:.6}")));
        }
        header.push("category_average".into());
        row.push(a.category_average.map_or_else(String::new, |v| format!("{v:.6}")));
        let quote = |s: &String| {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.clone()
            }
        };
        let line = |v: &[String]| v.iter().map(quote).collect::<Vec<_>>().join(",");
        format!("{}\n{}\n", line(&header), line(&row))
    }
}

fn scene_blocks(scenes: &SceneDirectory, scene_id: &str, config: &EvalConfig, arm: &Arm) -> Result<Vec<KeyframeBlock>, crate::Error> {
    let (manifest, store) = scenes.load(scene_id)?;
    let selection = select_scene_cached(&manifest, &store, &config.selection, arm.strategy, config.cache_dir.as_deref())?;
    Ok(build_blocks(&manifest, &selection.kept, &arm.options)?)
}

/// Runs every item through its scene's prompt and the backend. Items whose
/// scene cannot be prepared, or whose request fails, are kept as unscored
/// records with the error message.
pub fn run_eval(
    items: &[QaItem],
    scenes: &SceneDirectory,
    backend: &dyn ChatBackend,
    config: &EvalConfig,
) -> Result<EvalReport, crate::Error> {
    config.selection.validate()?;
    let arm = Arm::new(config.ablation, config.annotation.clone(), config.prompt.clone());

    let mut prepared: HashMap<&str, Result<Vec<KeyframeBlock>, String>> = HashMap::new();
    for item in items {
        if prepared.contains_key(item.scene_id.as_str()) {
            continue;
        }
        let blocks = scene_blocks(scenes, &item.scene_id, config, &arm).map_err(|e| {
            log::warn!("scene {}: {e}", item.scene_id);
            format!("error[{}]: {e}", e.code())
        });
        prepared.insert(&item.scene_id, blocks);
    }

    let records = bounded_map(items, config.in_flight, |item| {
        let mut rec = ItemRecord {
            question_id: item.question_id.clone(),
            scene_id: item.scene_id.clone(),
            question_type: classify_question(&item.question, config.dataset),
            fingerprint: None,
            prediction: None,
            scores: None,
            error: None,
        };
        let blocks = match &prepared[item.scene_id.as_str()] {
            Ok(b) => b.clone(),
            Err(e) => {
                rec.error = Some(e.clone());
                return rec;
            }
        };
        let bundle = match assemble(blocks, &item.query_text(), &arm.annotation, arm.options.role.as_deref()) {
            Ok(b) => b,
            Err(e) => {
                rec.error = Some(e.to_string());
                return rec;
            }
        };
        let request = to_chat_request(&bundle, &config.model_tag, config.chat);
        rec.fingerprint = Some(fingerprint(&request));
        match backend.send(&request) {
            Ok(resp) => {
                rec.scores = Some(ItemScores::compute(&resp.answer_text, &item.references));
                rec.prediction = Some(resp.answer_text);
            }
            Err(e) => {
                log::warn!("question {}: {e}", item.question_id);
                rec.error = Some(e.to_string());
            }
        }
        rec
    });

    let aggregates = Aggregates::from_items(config.dataset, &records);
    Ok(EvalReport {
        version: REPORT_VERSION,
        dataset: config.dataset,
        model: config.model_tag.clone(),
        backend: backend.tag().to_string(),
        ablation: config.ablation,
        selection_fingerprint: config.selection.fingerprint(),
        items: records,
        aggregates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(qt: QuestionType, em: Option<f64>) -> ItemRecord {
        ItemRecord {
            question_id: "q".into(),
            scene_id: "s".into(),
            question_type: qt,
            fingerprint: None,
            prediction: em.map(|_| "x".into()),
            scores: em.map(|e| ItemScores { em_at_1: e, bleu_1: e, bleu_2: e, bleu_3: e, bleu_4: e, rouge_l: e }),
            error: em.is_none().then(|| "boom".into()),
        }
    }

    #[test]
    fn aggregates_exclude_unscored() {
        let items = vec![
            record(QuestionType::Where, Some(1.0)),
            record(QuestionType::Where, Some(0.0)),
            record(QuestionType::Others, Some(1.0)),
            record(QuestionType::Others, None),
        ];
        let a = Aggregates::from_items(Dataset::ScanQa, &items);
        assert_eq!((a.scored, a.unscored, a.partial), (3, 1, true));
        assert!((a.em_at_1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(a.categories.len(), 2);
        // unweighted: (0.5 + 1.0) / 2
        assert_eq!(a.category_average, Some(0.75));
    }

    #[test]
    fn empty_report_is_zero() {
        let a = Aggregates::from_items(Dataset::Sqa3d, &[]);
        assert_eq!((a.scored, a.partial, a.em_at_1), (0, false, 0.0));
        assert!(a.category_average.is_none());
    }

    #[test]
    fn arms_change_one_factor() {
        let base = Arm::new(None, AnnotationSpec::Text("bank".into()), PromptOptions::default());
        let np = Arm::new(Some(Ablation::NoPose), AnnotationSpec::Text("bank".into()), PromptOptions::default());
        assert!(!np.options.include_pose);
        assert_eq!((np.strategy, &np.annotation), (base.strategy, &base.annotation));
        let uk = Arm::new(Some(Ablation::UniformKf), AnnotationSpec::Text("bank".into()), PromptOptions::default());
        assert_eq!(uk.strategy, KeyframeStrategy::Uniform);
        assert_eq!((&uk.options, &uk.annotation), (&base.options, &base.annotation));
        let zs = Arm::new(Some(Ablation::ZeroShotAnnotation), AnnotationSpec::Text("bank".into()), PromptOptions::default());
        assert_eq!(zs.annotation, AnnotationSpec::ZeroShot);
        assert_eq!((&zs.options, zs.strategy), (&base.options, base.strategy));
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{}\"", a.name()));
        }
        assert!("no_pose".parse::<Ablation>().is_err());
    }

    #[test]
    fn csv_has_matching_columns() {
        let items = vec![record(QuestionType::Is, Some(1.0))];
        let report = EvalReport {
            version: REPORT_VERSION,
            dataset: Dataset::Sqa3d,
            model: "m,1".into(),
            backend: "echo".into(),
            ablation: None,
            selection_fingerprint: String::new(),
            aggregates: Aggregates::from_items(Dataset::Sqa3d, &items),
            items,
        };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("sqa3d,\"m,1\",full,1,0,1.000000"));
        assert!(report.summary_row().contains("Is=1.0000"));
        assert!(report.summary_row().contains("What=-"));
    }
}
