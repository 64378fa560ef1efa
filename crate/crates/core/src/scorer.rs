//! Micro-F1 evaluation over canonical record sets.
//!
//! Matching is exact string matching on canonicalized units. Duplicate units
//! are counted with multiset-min semantics.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{CanonicalSet, ExtractionRecord};
use crate::schema::{EeSubtask, TaskKind};

#[derive(Debug, Error, PartialEq)]
pub enum ScorerError {
    #[error("event extraction needs a subtask (trigger or argument)")]
    SubtaskRequired,
    #[error("a subtask applies only to event extraction, not {0}")]
    UnexpectedSubtask(TaskKind),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl std::ops::Add for MatchCounts {
    type Output = MatchCounts;
    fn add(self, o: MatchCounts) -> MatchCounts {
        MatchCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl std::iter::Sum for MatchCounts {
    fn sum<I: Iterator<Item = MatchCounts>>(iter: I) -> Self {
        iter.fold(MatchCounts::default(), |a, b| a + b)
    }
}

/// The matching units a record contributes for a task and subtask.
pub fn units(record: &ExtractionRecord, subtask: Option<EeSubtask>) -> Vec<Vec<String>> {
    match record {
        ExtractionRecord::Entity { mention, class_id } => vec![vec![mention.clone(), class_id.clone()]],
        ExtractionRecord::Relation { subject, relation, object } => {
            vec![vec![subject.clone(), relation.clone(), object.clone()]]
        }
        ExtractionRecord::Event { class_id, trigger, arguments } => match subtask {
            Some(EeSubtask::Argument) => arguments
                .iter()
                .map(|(role, span)| vec![class_id.clone(), role.clone(), span.clone()])
                .collect(),
            _ => vec![vec![class_id.clone(), trigger.clone()]],
        },
    }
}

fn unit_bag(set: &CanonicalSet, subtask: Option<EeSubtask>) -> (HashMap<Vec<String>, u64>, u64) {
    let mut bag = HashMap::new();
    let mut total = 0;
    for r in set.iter() {
        for u in units(r, subtask) {
            *bag.entry(u).or_insert(0) += 1;
            total += 1;
        }
    }
    (bag, total)
}

pub fn count_matches(
    pred: &CanonicalSet,
    gold: &CanonicalSet,
    task: TaskKind,
    subtask: Option<EeSubtask>,
) -> Result<MatchCounts, ScorerError> {
    match (task, subtask) {
        (TaskKind::Ee, None) => return Err(ScorerError::SubtaskRequired),
        (TaskKind::Ner | TaskKind::Re, Some(_)) => return Err(ScorerError::UnexpectedSubtask(task)),
        _ => {}
    }
    let (p, np) = unit_bag(pred, subtask);
    let (g, ng) = unit_bag(gold, subtask);
    let tp: u64 = p.iter().map(|(u, c)| (*c).min(g.get(u).copied().unwrap_or(0))).sum();
    Ok(MatchCounts {
        tp,
        fp: np - tp,
        fn_: ng - tp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: MatchCounts,
    /// True when a zero denominator forced a metric to 0.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Pools counts across instances and computes precision, recall and F1.
pub fn micro_f1(counts: &[MatchCounts]) -> Metrics {
    let c: MatchCounts = counts.iter().copied().sum();
    let (precision, dp) = ratio(c.tp, c.tp + c.fp);
    let (recall, dr) = ratio(c.tp, c.tp + c.fn_);
    let (f1, df) = if precision + recall > 0.0 {
        (2.0 * precision * recall / (precision + recall), false)
    } else {
        (0.0, true)
    };
    Metrics {
        precision,
        recall,
        f1,
        counts: c,
        degenerate: dp || dr || df,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtask: Option<EeSubtask>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(default)]
    pub degenerate: bool,
}

impl MetricRow {
    pub fn from_metrics(dataset: &str, task: TaskKind, subtask: Option<EeSubtask>, m: &Metrics) -> Self {
        MetricRow {
            dataset: dataset.into(),
            task,
            subtask,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            degenerate: m.degenerate,
        }
    }
}

/// Scores paired prediction and gold sets for one dataset. Event extraction
/// yields a trigger row and an argument row; other tasks a single row.
pub fn score_dataset(dataset: &str, task: TaskKind, pairs: &[(CanonicalSet, CanonicalSet)]) -> Vec<MetricRow> {
    let subtasks: Vec<Option<EeSubtask>> = match task {
        TaskKind::Ee => vec![Some(EeSubtask::Trigger), Some(EeSubtask::Argument)],
        _ => vec![None],
    };
    subtasks
        .into_iter()
        .map(|sub| {
            let counts: Vec<MatchCounts> = pairs
                .iter()
                .map(|(p, g)| count_matches(p, g, task, sub).expect("subtask matches task"))
                .collect();
            MetricRow::from_metrics(dataset, task, sub, &micro_f1(&counts))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<MetricRow>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

const HEADER: [&str; 6] = ["dataset", "task", "subtask", "P", "R", "F1"];

/// Builds the report, sorted by dataset, task, then trigger before argument.
/// The text table shows scores as percentages with two decimals.
pub fn build_report(rows: &[MetricRow]) -> (String, Report) {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| {
        (a.dataset.as_str(), a.task.as_str(), a.subtask.map(|s| s as u8))
            .cmp(&(b.dataset.as_str(), b.task.as_str(), b.subtask.map(|s| s as u8)))
    });
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            let mark = if r.degenerate { "*" } else { "" };
            [
                r.dataset.clone(),
                r.task.as_str().to_string(),
                r.subtask.map_or("-", |s| s.as_str()).to_string(),
                format!("{:.2}", r.precision * 100.0),
                format!("{:.2}", r.recall * 100.0),
                format!("{:.2}{mark}", r.f1 * 100.0),
            ]
        })
        .collect();
    let mut widths = HEADER.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut text = String::new();
    let line = |cols: &[&str]| -> String {
        let mut s = String::new();
        for (i, c) in cols.iter().enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i >= 3 {
                let _ = write!(s, "{c:>w$}", w = widths[i]);
            } else {
                let _ = write!(s, "{c:<w$}", w = widths[i]);
            }
        }
        s.trim_end().to_string()
    };
    text.push_str(&line(&HEADER));
    text.push('\n');
    for row in &cells {
        let cols: Vec<&str> = row.iter().map(String::as_str).collect();
        text.push_str(&line(&cols));
        text.push('\n');
    }
    (text, Report { rows })
}
