//! Benchmark questions: JSON-lines items, question-type classification, and
//! few-shot answer banks rendered into the benchmark annotation.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Entries per question type in an answer bank.
pub const BANK_SIZE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    ScanQa,
    Sqa3d,
}

impl Dataset {
    /// Question types in classification and rendering order.
    pub fn question_types(self) -> &'static [QuestionType] {
        use QuestionType::*;
        match self {
            Dataset::ScanQa => &[Where, HowMany, WhatColor, WhatShape, WhatIs, Others],
            Dataset::Sqa3d => &[What, Is, How, Can, Which, Others],
        }
    }

    fn annotation_opening(self) -> &'static str {
        match self {
            Dataset::ScanQa => "Note that the answer for the question is as short as possible such as:",
            Dataset::Sqa3d => {
                "Note that the answer for the question based on the situation is as short as possible such as:"
            }
        }
    }
}

impl FromStr for Dataset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "scanqa" => Ok(Dataset::ScanQa),
            "sqa3d" => Ok(Dataset::Sqa3d),
            other => Err(format!("unknown dataset `{other}` (expected scanqa or sqa3d)")),
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dataset::ScanQa => "scanqa",
            Dataset::Sqa3d => "sqa3d",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    Where,
    HowMany,
    WhatColor,
    WhatShape,
    WhatIs,
    What,
    Is,
    How,
    Can,
    Which,
    Others,
}

impl QuestionType {
    pub fn key(self) -> &'static str {
        match self {
            QuestionType::Where => "where",
            QuestionType::HowMany => "how_many",
            QuestionType::WhatColor => "what_color",
            QuestionType::WhatShape => "what_shape",
            QuestionType::WhatIs => "what_is",
            QuestionType::What => "what",
            QuestionType::Is => "is",
            QuestionType::How => "how",
            QuestionType::Can => "can",
            QuestionType::Which => "which",
            QuestionType::Others => "others",
        }
    }

    /// Label used after "If question is start with".
    pub fn prompt_label(self, dataset: Dataset) -> &'static str {
        match self {
            QuestionType::Where => "Where",
            QuestionType::HowMany => "How many",
            QuestionType::WhatColor => "What color, What is the color",
            QuestionType::WhatShape => "What shape, What type, What kind",
            QuestionType::WhatIs => "What is",
            QuestionType::What => "What",
            QuestionType::Is => "Is",
            QuestionType::How => "How",
            QuestionType::Can => "Can",
            QuestionType::Which => "Which",
            QuestionType::Others => match dataset {
                Dataset::ScanQa => "others",
                Dataset::Sqa3d => "Others",
            },
        }
    }
}

/// Classifies by case-insensitive prefix (ScanQA) or first token (SQA3D).
pub fn classify_question(question: &str, dataset: Dataset) -> QuestionType {
    let q = question.trim().to_lowercase();
    match dataset {
        Dataset::ScanQa => {
            let starts = |prefixes: &[&str]| prefixes.iter().any(|p| q.starts_with(p));
            if starts(&["where"]) {
                QuestionType::Where
            } else if starts(&["how many"]) {
                QuestionType::HowMany
            } else if starts(&["what color", "what is the color"]) {
                QuestionType::WhatColor
            } else if starts(&["what shape", "what type", "what kind"]) {
                QuestionType::WhatShape
            } else if starts(&["what is"]) {
                QuestionType::WhatIs
            } else {
                QuestionType::Others
            }
        }
        Dataset::Sqa3d => {
            let first = q
                .split_whitespace()
                .next()
                .unwrap_or("")
                .trim_end_matches(|c: char| !c.is_alphanumeric());
            match first {
                "what" => QuestionType::What,
                "is" => QuestionType::Is,
                "how" => QuestionType::How,
                "can" => QuestionType::Can,
                "which" => QuestionType::Which,
                _ => QuestionType::Others,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub question_id: String,
    pub scene_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub situation: Option<String>,
    pub question: String,
    #[serde(rename = "answers")]
    pub references: Vec<String>,
}

impl QaItem {
    /// User-query text; SQA3D situations are prepended to the question.
    pub fn query_text(&self) -> String {
        match self.situation.as_deref().map(str::trim).filter(|s| !s.is_empty()) {
            Some(s) => format!("Situation: {s}\nQuestion: {}", self.question),
            None => self.question.clone(),
        }
    }
}

pub fn parse_questions(text: &str) -> Result<Vec<QaItem>, EvalError> {
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| EvalError::Dataset(format!("line {}: {m}", n + 1));
        let item: QaItem = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if item.references.is_empty() {
            return Err(bad(format!("question {} has no answers", item.question_id)));
        }
        if item.question.trim().is_empty() {
            return Err(bad(format!("question {} is empty", item.question_id)));
        }
        items.push(item);
    }
    Ok(items)
}

pub fn load_questions(path: &Path) -> Result<Vec<QaItem>, EvalError> {
    let text = fs::read_to_string(path)
        .map_err(|e| EvalError::Dataset(format!("{}: {e}", path.display())))?;
    parse_questions(&text)
}

/// Most frequent training answers per question type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerBank {
    pub dataset: Dataset,
    /// In the dataset's question-type order; each list at most `BANK_SIZE` long.
    pub entries: Vec<(QuestionType, Vec<String>)>,
}

impl AnswerBank {
    pub fn answers(&self, qt: QuestionType) -> &[String] {
        self.entries
            .iter()
            .find(|(t, _)| *t == qt)
            .map_or(&[], |(_, a)| a.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(|(_, a)| a.is_empty())
    }
}

/// Counts trimmed answer strings per question type; ties keep first-seen order.
pub fn build_answer_bank(training: &[QaItem], dataset: Dataset) -> AnswerBank {
    // (answer, count, first occurrence) per type
    let mut counts: HashMap<QuestionType, Vec<(String, usize, usize)>> = HashMap::new();
    let mut positions: HashMap<(QuestionType, String), usize> = HashMap::new();
    let mut seq = 0usize;
    for item in training {
        let qt = classify_question(&item.question, dataset);
        for answer in &item.references {
            let a = answer.trim().to_string();
            let list = counts.entry(qt).or_default();
            match positions.get(&(qt, a.clone())) {
                Some(&i) => list[i].1 += 1,
                None => {
                    positions.insert((qt, a.clone()), list.len());
                    list.push((a, 1, seq));
                }
            }
            seq += 1;
        }
    }
    let entries = dataset
        .question_types()
        .iter()
        .map(|&qt| {
            let mut list = counts.remove(&qt).unwrap_or_default();
            list.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
            (qt, list.into_iter().take(BANK_SIZE).map(|(a, _, _)| a).collect())
        })
        .collect();
    AnswerBank { dataset, entries }
}

/// Renders the few-shot annotation: an opening line, then one block per
/// question type with a trailing-comma answer list, blocks separated by a
/// blank line. Types without answers are omitted.
pub fn render_benchmark_annotation(bank: &AnswerBank) -> Result<String, EvalError> {
    if bank.is_empty() {
        return Err(EvalError::EmptyBank);
    }
    let mut out = String::from(bank.dataset.annotation_opening());
    for (qt, answers) in &bank.entries {
        if answers.is_empty() {
            continue;
        }
        out.push_str("\n\nIf question is start with ");
        out.push_str(qt.prompt_label(bank.dataset));
        out.push_str("\nExample of answers: ");
        out.push_str(&answers.join(", "));
        out.push(',');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(q: &str, answers: &[&str]) -> QaItem {
        QaItem {
            question_id: "q".into(),
            scene_id: "s".into(),
            situation: None,
            question: q.into(),
            references: answers.iter().map(|a| a.to_string()).collect(),
        }
    }

    #[test]
    fn scanqa_prefixes() {
        use QuestionType::*;
        let d = Dataset::ScanQa;
        assert_eq!(classify_question("What color is the chair?", d), WhatColor);
        assert_eq!(classify_question("what is the color of the bed?", d), WhatColor);
        assert_eq!(classify_question("How many sofas are there?", d), HowMany);
        assert_eq!(classify_question("  Where is the lamp?", d), Where);
        assert_eq!(classify_question("What kind of table is it?", d), WhatShape);
        assert_eq!(classify_question("What is on top of the sideboard?", d), WhatIs);
        assert_eq!(classify_question("Which side is the door on?", d), Others);
        assert_eq!(classify_question("How big is the room?", d), Others);
    }

    #[test]
    fn sqa3d_first_token() {
        use QuestionType::*;
        let d = Dataset::Sqa3d;
        assert_eq!(classify_question("Which direction do I have to walk to sit down on the couch?", d), Which);
        assert_eq!(classify_question("Is the door open?", d), Is);
        assert_eq!(classify_question("can I reach the sink?", d), Can);
        assert_eq!(classify_question("How many chairs?", d), How);
        assert_eq!(classify_question("What, exactly, is left?", d), What);
        assert_eq!(classify_question("Whatever is there?", d), Others);
        assert_eq!(classify_question("Could I sit?", d), Others);
    }

    #[test]
    fn bank_frequency_order() {
        let mut train = Vec::new();
        for (a, n) in [("4", 1), ("3", 3), ("2", 5)] {
            for _ in 0..n {
                train.push(item("How many chairs?", &[a]));
            }
        }
        let bank = build_answer_bank(&train, Dataset::ScanQa);
        assert_eq!(bank.answers(QuestionType::HowMany), ["2", "3", "4"]);
    }

    #[test]
    fn bank_ties_keep_first_occurrence() {
        let train = vec![
            item("Where is it?", &["left "]),
            item("Where is it?", &["right"]),
            item("Where is it?", &[" right", "left"]),
        ];
        let bank = build_answer_bank(&train, Dataset::ScanQa);
        assert_eq!(bank.answers(QuestionType::Where), ["left", "right"]);
    }

    #[test]
    fn bank_truncates_to_twenty() {
        let train: Vec<_> = (0..30).map(|i| item("What is here?", &[&format!("a{i}")])).collect();
        let bank = build_answer_bank(&train, Dataset::ScanQa);
        assert_eq!(bank.answers(QuestionType::WhatIs).len(), BANK_SIZE);
        assert_eq!(bank.answers(QuestionType::WhatIs)[19], "a19");
    }

    #[test]
    fn render_layout() {
        let train = vec![item("How many?", &["2", "3"]), item("Where?", &["left"])];
        let text = render_benchmark_annotation(&build_answer_bank(&train, Dataset::ScanQa)).unwrap();
        assert_eq!(
            text,
            "Note that the answer for the question is as short as possible such as:\n\n\
             If question is start with Where\nExample of answers: left,\n\n\
             If question is start with How many\nExample of answers: 2, 3,"
        );
        let sqa = build_answer_bank(&[item("Is it?", &["yes"])], Dataset::Sqa3d);
        assert!(render_benchmark_annotation(&sqa).unwrap().contains("based on the situation"));
    }

    #[test]
    fn empty_bank_is_an_error() {
        let bank = build_answer_bank(&[], Dataset::ScanQa);
        assert!(matches!(render_benchmark_annotation(&bank), Err(EvalError::EmptyBank)));
    }

    #[test]
    fn situation_prefix() {
        let mut it = item("Which way?", &["left"]);
        assert_eq!(it.query_text(), "Which way?");
        it.situation = Some("I am sitting on the bed.".into());
        assert_eq!(it.query_text(), "Situation: I am sitting on the bed.\nQuestion: Which way?");
    }

    #[test]
    fn parses_jsonl() {
        let text = r#"{"question_id": "a", "scene_id": "s0", "question": "Where?", "answers": ["here"]}

{"question_id": "b", "scene_id": "s0", "situation": "I stand.", "question": "Is it?", "answers": ["yes", "no"]}"#;
        let items = parse_questions(text).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[1].situation.as_deref(), Some("I stand."));
        let bad = r#"{"question_id": "a", "scene_id": "s0", "question": "Where?", "answers": []}"#;
        assert!(matches!(parse_questions(bad), Err(EvalError::Dataset(_))));
    }
}
