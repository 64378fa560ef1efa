//! Multi-granularity reward for RL alignment.
//!
//! - result reward: weighted harmonic mean of category-level and
//!   argument-level correctness, `2ab·c·g / (a·c + b·g)` with `a > b > 0`,
//!   divided by its maximum `2ab / (a + b)` so it lies in `[0, 1]`;
//! - process reward: the fraction of three rule-based faithfulness checks
//!   that pass (schema adherence, input grounding, strategy soundness);
//! - total: `λ1·result + λ2·process` with `λ1 + λ2 = 1`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{canonicalize, parse_completion, CanonicalSet, ExtractionRecord};
use crate::schema::UnifiedSchema;
use crate::text::{content_tokens, normalize_ws};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
    #[error("reward component {0} outside [0, 1]")]
    OutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    /// Indicator correctness: a view either matches exactly or scores 0.
    #[default]
    Strict,
    /// Micro-F1 of each view as partial credit.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub mode: RewardMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha: 2.0,
            beta: 1.0,
            lambda1: 0.9,
            lambda2: 0.1,
            mode: RewardMode::Strict,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let finite = [self.alpha, self.beta, self.lambda1, self.lambda2].iter().all(|v| v.is_finite());
        if !finite {
            return Err(RewardError::InvalidConfig("non-finite parameter".into()));
        }
        if !(self.alpha > self.beta && self.beta > 0.0) {
            return Err(RewardError::InvalidConfig(format!(
                "need alpha > beta > 0, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || (self.lambda1 + self.lambda2 - 1.0).abs() > 1e-9 {
            return Err(RewardError::InvalidConfig(format!(
                "need lambda1, lambda2 >= 0 summing to 1, got {} + {}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

/// Category labels and argument payloads of a record set, as sorted multisets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryArgumentView {
    pub categories: Vec<String>,
    /// Entity mention; relation (subject, object); event trigger and each (role, span).
    pub arguments: Vec<Vec<String>>,
}

impl CategoryArgumentView {
    pub fn of(records: &CanonicalSet) -> Self {
        let mut categories = Vec::new();
        let mut arguments = Vec::new();
        for r in records {
            categories.push(r.class_id().to_string());
            match r {
                ExtractionRecord::Entity { mention, .. } => arguments.push(vec![mention.clone()]),
                ExtractionRecord::Relation { subject, object, .. } => {
                    arguments.push(vec![subject.clone(), object.clone()])
                }
                ExtractionRecord::Event { trigger, arguments: args, .. } => {
                    arguments.push(vec!["trigger".into(), trigger.clone()]);
                    for (role, span) in args {
                        arguments.push(vec!["argument".into(), role.clone(), span.clone()]);
                    }
                }
            }
        }
        categories.sort();
        arguments.sort();
        CategoryArgumentView { categories, arguments }
    }
}

/// F1 of two multisets with multiset-min matching; two empty multisets score 1.
pub fn multiset_f1<T: std::hash::Hash + Eq>(pred: &[T], gold: &[T]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for g in gold {
        *counts.entry(g).or_default() += 1;
    }
    let mut tp = 0usize;
    for p in pred {
        if let Some(c) = counts.get_mut(p) {
            if *c > 0 {
                *c -= 1;
                tp += 1;
            }
        }
    }
    2.0 * tp as f64 / (pred.len() + gold.len()) as f64
}

/// `2ab·c·g / (a·c + b·g)`, defined as 0 when the denominator is 0.
pub fn weighted_harmonic_mean(category: f64, argument: f64, alpha: f64, beta: f64) -> f64 {
    let denom = alpha * category + beta * argument;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * alpha * beta * category * argument / denom
    }
}

/// The harmonic mean divided by its value at `c = g = 1`, written as
/// `(a + b)·c·g / (a·c + b·g)` so that full credit is exactly 1.
pub fn normalized_harmonic_mean(category: f64, argument: f64, alpha: f64, beta: f64) -> f64 {
    let denom = alpha * category + beta * argument;
    if denom == 0.0 {
        0.0
    } else {
        (alpha + beta) * category * argument / denom
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResultScore {
    pub score: f64,
    /// Unnormalized harmonic mean.
    pub raw: f64,
    pub category: f64,
    pub argument: f64,
}

pub fn result_reward(pred: &CanonicalSet, gold: &CanonicalSet, cfg: &RewardConfig) -> Result<ResultScore, RewardError> {
    cfg.validate()?;
    let p = CategoryArgumentView::of(pred);
    let g = CategoryArgumentView::of(gold);
    let (category, argument) = match cfg.mode {
        RewardMode::Strict => (
            f64::from(u8::from(p.categories == g.categories)),
            f64::from(u8::from(p.arguments == g.arguments)),
        ),
        RewardMode::Soft => (
            multiset_f1(&p.categories, &g.categories),
            multiset_f1(&p.arguments, &g.arguments),
        ),
    };
    Ok(ResultScore {
        score: normalized_harmonic_mean(category, argument, cfg.alpha, cfg.beta),
        raw: weighted_harmonic_mean(category, argument, cfg.alpha, cfg.beta),
        category,
        argument,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessScore {
    pub score: f64,
    pub schema_adherence: bool,
    pub input_grounding: bool,
    pub strategy_soundness: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub off_schema_labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ungrounded_spans: Vec<String>,
}

impl ProcessScore {
    pub fn passes(&self) -> usize {
        [self.schema_adherence, self.input_grounding, self.strategy_soundness]
            .iter()
            .filter(|b| **b)
            .count()
    }
}

/// Labels the reasoning cites in square brackets, e.g. `[PER]`.
///
/// Bracketed text counts as a label when it is at most 64 characters and
/// contains a letter, so `[1]` or `[...]` are ignored.
pub fn cited_labels(cot: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = cot;
    while let Some(open) = rest.find('[') {
        let after = &rest[open + 1..];
        let Some(close) = after.find([']', '[']) else { break };
        if after[close..].starts_with(']') {
            let label = after[..close].trim();
            if !label.is_empty() && label.chars().count() <= 64 && label.chars().any(char::is_alphabetic) {
                out.push(label.to_string());
            }
        }
        rest = &after[close..];
    }
    out
}

/// Rule-based faithfulness, `passes / 3` over:
/// 1. schema adherence: every label cited in the reasoning and every class or
///    role used in the prediction belongs to the schema (case-insensitive);
/// 2. input grounding: every predicted span occurs in the input after
///    whitespace normalization;
/// 3. strategy soundness: non-empty reasoning shares a content token with the
///    strategy when one is given; empty reasoning passes.
pub fn process_reward(x: &str, s: &UnifiedSchema, strategy: Option<&str>, cot: &str, pred: &CanonicalSet) -> ProcessScore {
    let vocab: Vec<String> = s.labels().map(str::to_lowercase).collect();
    let known = |label: &str| vocab.iter().any(|v| *v == label.to_lowercase());
    let mut off_schema: Vec<String> = cited_labels(cot).into_iter().filter(|l| !known(l)).collect();
    for r in pred {
        if !known(r.class_id()) {
            off_schema.push(r.class_id().to_string());
        }
        if let ExtractionRecord::Event { arguments, .. } = r {
            off_schema.extend(arguments.iter().filter(|(role, _)| !known(role)).map(|(role, _)| role.clone()));
        }
    }
    off_schema.dedup();

    let haystack = normalize_ws(x);
    let mut ungrounded: Vec<String> = pred
        .iter()
        .flat_map(|r| r.spans())
        .map(normalize_ws)
        .filter(|span| !haystack.contains(span.as_str()))
        .collect();
    ungrounded.sort();
    ungrounded.dedup();

    let strategy_soundness = if cot.trim().is_empty() {
        true
    } else {
        match strategy.filter(|t| !t.trim().is_empty()) {
            None => true,
            Some(t) => {
                let wanted = content_tokens(t);
                content_tokens(cot).iter().any(|tok| wanted.contains(tok))
            }
        }
    };

    let mut score = ProcessScore {
        score: 0.0,
        schema_adherence: off_schema.is_empty(),
        input_grounding: ungrounded.is_empty(),
        strategy_soundness,
        off_schema_labels: off_schema,
        ungrounded_spans: ungrounded,
    };
    score.score = score.passes() as f64 / 3.0;
    score
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardDiagnostics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<ResultScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub process: Option<ProcessScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    #[serde(default)]
    pub dropped_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_result: f64,
    pub r_process: f64,
    pub r_total: f64,
    pub diagnostics: RewardDiagnostics,
}

pub fn total_reward(r_result: f64, r_process: f64, cfg: &RewardConfig) -> Result<RewardBreakdown, RewardError> {
    cfg.validate()?;
    for v in [r_result, r_process] {
        if !(0.0..=1.0).contains(&v) {
            return Err(RewardError::OutOfRange(v));
        }
    }
    Ok(RewardBreakdown {
        r_result,
        r_process,
        r_total: cfg.lambda1 * r_result + cfg.lambda2 * r_process,
        diagnostics: RewardDiagnostics::default(),
    })
}

/// Scores a raw completion end to end. Completions whose answer cannot be
/// recovered score 0 on every component, with the reason in the diagnostics.
pub fn score_completion(
    x: &str,
    s: &UnifiedSchema,
    strategy: Option<&str>,
    completion: &str,
    gold: &CanonicalSet,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    cfg.validate()?;
    let (out, dropped) = match parse_completion(completion, s) {
        Ok(parsed) => parsed,
        Err(e) => {
            let mut zero = total_reward(0.0, 0.0, cfg)?;
            zero.diagnostics.parse_error = Some(format!("{e:?}"));
            return Ok(zero);
        }
    };
    let result = result_reward(&out.records, gold, cfg)?;
    let process = process_reward(x, s, strategy, &out.cot, &out.records);
    let mut b = total_reward(result.score, process.score, cfg)?;
    b.diagnostics = RewardDiagnostics {
        result: Some(result),
        process: Some(process),
        parse_error: None,
        dropped_records: dropped.len(),
    };
    Ok(b)
}

/// Body of a reward-serving request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardRequest {
    pub x: String,
    pub schema: UnifiedSchema,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    pub completion: String,
    pub gold: Vec<ExtractionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RewardConfig>,
}

/// Scores one request; a request-level config overrides `default_cfg`.
pub fn handle_request(req: &RewardRequest, default_cfg: &RewardConfig) -> Result<RewardBreakdown, RewardError> {
    let cfg = req.config.unwrap_or(*default_cfg);
    let gold = canonicalize(&req.gold, &req.schema);
    score_completion(&req.x, &req.schema, req.strategy.as_deref(), &req.completion, &gold, &cfg)
}
