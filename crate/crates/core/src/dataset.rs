//! Corpus curation, SFT rendering with loss-mask segments, strategy hiding and
//! SFT/RL routing.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::forge::{ForgeDiagnostics, ReasoningTrace};
use crate::prompts::{render, PromptTemplates, SKIP_REASONING_DIRECTIVE};
use crate::records::{canonicalize, CanonicalSet, ExtractionRecord, LabeledExample, THINK_CLOSE, THINK_OPEN};
use crate::schema::{compile_schema, parse_schema, serialize_schema, validate_output, TaskKind, UnifiedSchema};
use crate::text::normalize_ws;

pub const CORPUS_FORMAT: &str = "uiekit.corpus";
pub const REASONING_FORMAT: &str = "uiekit.reasoning";
pub const SFT_FORMAT: &str = "uiekit.sft";

/// Default loss weights handed to the external trainer in the SFT header.
pub const DEFAULT_LAMBDA_COT: f64 = 0.5;
pub const DEFAULT_LAMBDA_STRUCT: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unknown dataset adapter `{0}`")]
    UnknownAdapter(String),
    #[error("instance `{0}` is not routed to SFT")]
    NotSftRouted(String),
    #[error("fraction {0} outside [0, 1]")]
    BadFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub x: String,
    pub schema_ref: UnifiedSchema,
    pub gold: CanonicalSet,
    pub source: String,
    #[serde(default)]
    pub split: Split,
}

impl CorpusRecord {
    pub fn task(&self) -> TaskKind {
        self.schema_ref.task
    }

    pub fn to_example(&self) -> LabeledExample {
        LabeledExample {
            id: self.id.clone(),
            x: self.x.clone(),
            schema_ref: self.schema_ref.clone(),
            gold: self.gold.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Route {
    #[serde(rename = "SFT")]
    Sft,
    #[serde(rename = "RL")]
    Rl,
}

/// Half-open character range `[start, end)`, counted in Unicode scalar values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

impl CharSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// The characters of `text` inside this span.
    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        let mut idx = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
        let start = idx.nth(self.start).unwrap_or(text.len());
        let end = text
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(text.len()))
            .nth(self.end)
            .unwrap_or(text.len());
        &text[start..end]
    }
}

/// Reasoning and structured-answer regions of a rendered target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segments {
    pub cot: CharSpan,
    #[serde(rename = "struct")]
    pub structure: CharSpan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningInstance {
    #[serde(flatten)]
    pub record: CorpusRecord,
    pub traces: Vec<ReasoningTrace>,
    pub level: usize,
    pub route: Route,
    /// One entry per kept trace, offsets into that trace's rendered target.
    pub segments: Vec<Segments>,
    #[serde(default)]
    pub diagnostics: ForgeDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSegment {
    pub start: usize,
    pub end: usize,
    /// Whether the trainer applies this segment's loss.
    pub enabled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossMask {
    pub cot: MaskedSegment,
    #[serde(rename = "struct")]
    pub structure: MaskedSegment,
}

impl LossMask {
    /// Structure loss always on; CoT loss as given.
    pub fn from_segments(seg: Segments, cot_enabled: bool) -> Self {
        LossMask {
            cot: MaskedSegment {
                start: seg.cot.start,
                end: seg.cot.end,
                enabled: cot_enabled,
            },
            structure: MaskedSegment {
                start: seg.structure.start,
                end: seg.structure.end,
                enabled: true,
            },
        }
    }

    pub fn cot_span(&self) -> CharSpan {
        CharSpan {
            start: self.cot.start,
            end: self.cot.end,
        }
    }

    pub fn struct_span(&self) -> CharSpan {
        CharSpan {
            start: self.structure.start,
            end: self.structure.end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSample {
    pub instance_id: String,
    pub strategy: String,
    pub prompt: String,
    pub target: String,
    pub loss_mask: LossMask,
    pub hidden: bool,
}

/// `<think>` + cot + `</think>` + canonical answer JSON, with segment offsets.
pub fn render_target(cot: &str, answer: &CanonicalSet) -> (String, Segments) {
    let answer_text = answer.to_json_string();
    let open = THINK_OPEN.chars().count();
    let cot_len = cot.chars().count();
    let struct_start = open + cot_len + THINK_CLOSE.chars().count();
    let target = format!("{THINK_OPEN}{cot}{THINK_CLOSE}{answer_text}");
    let segments = Segments {
        cot: CharSpan {
            start: open,
            end: open + cot_len,
        },
        structure: CharSpan {
            start: struct_start,
            end: struct_start + answer_text.chars().count(),
        },
    };
    (target, segments)
}

/// The extraction instruction for an input, before any strategy prefix.
pub fn instruction_prompt(templates: &PromptTemplates, x: &str, s: &UnifiedSchema) -> String {
    render(&templates.instruction, &[("x", x), ("schema", &serialize_schema(s))])
}

fn prefixed(prefix: &str, instruction: &str) -> String {
    format!("Strategy: {prefix}\n\n{instruction}")
}

/// One sample per kept trace, the strategy text prefixed to the instruction.
pub fn render_sft(instances: &[ReasoningInstance], templates: &PromptTemplates) -> Result<Vec<SftSample>, DatasetError> {
    let mut out = Vec::new();
    for inst in instances {
        if inst.route != Route::Sft {
            return Err(DatasetError::NotSftRouted(inst.record.id.clone()));
        }
        let instruction = instruction_prompt(templates, &inst.record.x, &inst.record.schema_ref);
        for trace in &inst.traces {
            let (target, seg) = render_target(&trace.cot, &trace.prediction);
            out.push(SftSample {
                instance_id: inst.record.id.clone(),
                strategy: trace.strategy.text.clone(),
                prompt: prefixed(&trace.strategy.text, &instruction),
                target,
                loss_mask: LossMask::from_segments(seg, true),
                hidden: false,
            });
        }
    }
    Ok(out)
}

/// Number of hidden clones for `n` samples at `fraction`: `ceil(fraction * n)`.
///
/// The product is nudged down by 1e-9 before rounding up so that values like
/// `0.1 * 30` (which is 3.0000000000000004 in binary) give 3, not 4.
pub fn hidden_count(n: usize, fraction: f64) -> usize {
    (((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Appends `ceil(fraction * n)` clones with empty reasoning and the CoT loss disabled.
///
/// The clones are drawn without replacement with a seeded RNG, and their
/// prompt tells the model to skip reasoning. Originals are left untouched.
pub fn inject_strategy_hiding(samples: &[SftSample], fraction: f64, seed: u64) -> Result<Vec<SftSample>, DatasetError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(DatasetError::BadFraction(fraction));
    }
    let k = hidden_count(samples.len(), fraction);
    let mut out = samples.to_vec();
    if k == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, samples.len(), k);
    for i in picked {
        let src = &samples[i];
        let answer = src.loss_mask.struct_span().slice(&src.target);
        let target = format!("{THINK_OPEN}{THINK_CLOSE}{answer}");
        let open = THINK_OPEN.chars().count();
        let struct_start = open + THINK_CLOSE.chars().count();
        let seg = Segments {
            cot: CharSpan { start: open, end: open },
            structure: CharSpan {
                start: struct_start,
                end: struct_start + answer.chars().count(),
            },
        };
        let instruction = src
            .prompt
            .strip_prefix(&format!("Strategy: {}\n\n", src.strategy))
            .unwrap_or(&src.prompt);
        out.push(SftSample {
            instance_id: src.instance_id.clone(),
            strategy: src.strategy.clone(),
            prompt: prefixed(SKIP_REASONING_DIRECTIVE, instruction),
            target,
            loss_mask: LossMask::from_segments(seg, false),
            hidden: true,
        });
    }
    Ok(out)
}

/// Partitions by `level >= o` and stamps each instance with its route.
pub fn route_instances(instances: Vec<ReasoningInstance>, o: usize) -> (Vec<ReasoningInstance>, Vec<ReasoningInstance>) {
    let mut sft = Vec::new();
    let mut rl = Vec::new();
    for mut inst in instances {
        if inst.level >= o {
            inst.route = Route::Sft;
            sft.push(inst);
        } else {
            inst.route = Route::Rl;
            rl.push(inst);
        }
    }
    (sft, rl)
}

/// Count of instances per level, per task.
pub fn level_histogram(instances: &[ReasoningInstance]) -> BTreeMap<TaskKind, BTreeMap<usize, usize>> {
    let mut h: BTreeMap<TaskKind, BTreeMap<usize, usize>> = BTreeMap::new();
    for inst in instances {
        *h.entry(inst.record.task()).or_default().entry(inst.level).or_default() += 1;
    }
    h
}

/// Keeps every labeled record and each empty-gold record with probability `keep_ratio`.
pub fn subsample_negatives(records: Vec<CorpusRecord>, keep_ratio: f64, seed: u64) -> Result<Vec<CorpusRecord>, DatasetError> {
    if !(0.0..=1.0).contains(&keep_ratio) {
        return Err(DatasetError::BadFraction(keep_ratio));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(records
        .into_iter()
        .filter(|r| !r.gold.is_empty() || rng.gen::<f64>() < keep_ratio)
        .collect())
}

/// A source record converted by an adapter, before curation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawExample {
    pub id: Option<String>,
    pub x: String,
    pub schema: UnifiedSchema,
    pub gold: Vec<ExtractionRecord>,
    pub source: Option<String>,
    pub split: Option<Split>,
}

/// Turns one source line into a [`RawExample`].
pub trait DatasetAdapter: Send + Sync {
    fn name(&self) -> &'static str;
    fn convert(&self, raw: &Value) -> Result<RawExample, String>;
}

/// Lines already in the unified layout: `x`, `gold` and either `schema_ref`
/// (a unified schema) or `schema` + `task` (a raw schema to compile).
pub struct UnifiedAdapter;

impl DatasetAdapter for UnifiedAdapter {
    fn name(&self) -> &'static str {
        "unified"
    }

    fn convert(&self, raw: &Value) -> Result<RawExample, String> {
        let source = raw.get("source").and_then(Value::as_str).map(str::to_string);
        let schema = if let Some(s) = raw.get("schema_ref") {
            parse_schema(&s.to_string()).map_err(|e| e.to_string())?
        } else {
            let task = raw
                .get("task")
                .and_then(Value::as_str)
                .and_then(TaskKind::parse)
                .ok_or("missing `schema_ref` or `task`")?;
            let s = raw.get("schema").ok_or("missing `schema`")?;
            compile_schema(s, task, source.as_deref().unwrap_or_default()).map_err(|e| e.to_string())?
        };
        let x = raw
            .get("x")
            .or_else(|| raw.get("text"))
            .and_then(Value::as_str)
            .ok_or("missing `x`")?
            .to_string();
        let gold: Vec<ExtractionRecord> = match raw.get("gold") {
            Some(g) => serde_json::from_value(g.clone()).map_err(|e| e.to_string())?,
            None => Vec::new(),
        };
        let split = match raw.get("split") {
            Some(v) => Some(serde_json::from_value(v.clone()).map_err(|e| e.to_string())?),
            None => None,
        };
        Ok(RawExample {
            id: raw.get("id").and_then(Value::as_str).map(str::to_string),
            x,
            schema,
            gold,
            source,
            split,
        })
    }
}

/// IEPILE-style lines: `task`, `source`, an `instruction` JSON string holding
/// `schema` and `input`, and an `output` JSON string.
///
/// Output layouts: NER `{label: [mention, ..]}`, RE `{relation: [{subject,
/// object}, ..]}`, EE `[{event_type, event_trigger, arguments: [{argument,
/// role}, ..]}, ..]`.
pub struct IepileAdapter;

fn json_field(raw: &Value, key: &str) -> Result<Value, String> {
    match raw.get(key) {
        Some(Value::String(s)) => serde_json::from_str(s).map_err(|e| format!("`{key}`: {e}")),
        Some(v) => Ok(v.clone()),
        None => Err(format!("missing `{key}`")),
    }
}

impl DatasetAdapter for IepileAdapter {
    fn name(&self) -> &'static str {
        "iepile"
    }

    fn convert(&self, raw: &Value) -> Result<RawExample, String> {
        let task = raw
            .get("task")
            .and_then(Value::as_str)
            .and_then(TaskKind::parse)
            .ok_or("missing or unknown `task`")?;
        let source = raw.get("source").and_then(Value::as_str).unwrap_or_default().to_string();
        let instruction = json_field(raw, "instruction")?;
        let schema_raw = instruction.get("schema").ok_or("instruction without `schema`")?;
        let schema = compile_schema(schema_raw, task, &source).map_err(|e| e.to_string())?;
        let x = instruction
            .get("input")
            .and_then(Value::as_str)
            .ok_or("instruction without `input`")?
            .to_string();
        let output = json_field(raw, "output").unwrap_or(Value::Null);
        let mut gold = Vec::new();
        match (task, &output) {
            (_, Value::Null) => {}
            (TaskKind::Ner, Value::Object(m)) => {
                for (label, mentions) in m {
                    for mention in mentions.as_array().into_iter().flatten() {
                        let mention = mention.as_str().ok_or("non-string mention")?;
                        gold.push(ExtractionRecord::entity(mention, label.as_str()));
                    }
                }
            }
            (TaskKind::Re, Value::Object(m)) => {
                for (relation, pairs) in m {
                    for pair in pairs.as_array().into_iter().flatten() {
                        let get = |k: &str| pair.get(k).and_then(Value::as_str).ok_or(format!("pair without `{k}`"));
                        gold.push(ExtractionRecord::relation(get("subject")?, relation.as_str(), get("object")?));
                    }
                }
            }
            (TaskKind::Ee, Value::Array(events)) => {
                for ev in events {
                    let get = |k: &str| ev.get(k).and_then(Value::as_str).ok_or(format!("event without `{k}`"));
                    let mut args = Vec::new();
                    for a in ev.get("arguments").and_then(Value::as_array).into_iter().flatten() {
                        let role = a.get("role").and_then(Value::as_str).ok_or("argument without `role`")?;
                        let span = a.get("argument").and_then(Value::as_str).ok_or("argument without `argument`")?;
                        args.push((role.to_string(), span.to_string()));
                    }
                    gold.push(ExtractionRecord::event(get("event_type")?, get("event_trigger")?, args));
                }
            }
            (t, other) => return Err(format!("unexpected {t} output layout: {other}")),
        }
        let split = raw
            .get("split")
            .and_then(|v| serde_json::from_value(v.clone()).ok());
        Ok(RawExample {
            id: raw.get("id").and_then(Value::as_str).map(str::to_string),
            x,
            schema,
            gold,
            source: Some(source),
            split,
        })
    }
}

pub fn adapter(name: &str) -> Result<Box<dyn DatasetAdapter>, DatasetError> {
    match name {
        "unified" => Ok(Box::new(UnifiedAdapter)),
        "iepile" => Ok(Box::new(IepileAdapter)),
        other => Err(DatasetError::UnknownAdapter(other.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationRules {
    pub adapter: String,
    /// Used when a line carries no `source`.
    pub source: String,
    /// Used when a line carries no `split`.
    pub split: Split,
}

impl Default for CurationRules {
    fn default() -> Self {
        CurationRules {
            adapter: "unified".into(),
            source: "corpus".into(),
            split: Split::Train,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationStats {
    pub input: usize,
    pub malformed: usize,
    pub duplicates: usize,
    pub quality_dropped: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curated {
    pub records: Vec<CorpusRecord>,
    pub stats: CurationStats,
}

/// Converts, validates and deduplicates source lines.
///
/// Lines the adapter cannot convert count as malformed. Records with an empty
/// input or gold that fails schema validation count as quality drops. Exact
/// duplicates on (normalized input, canonical gold) keep the first occurrence.
pub fn curate_corpus(raw: &[Value], rules: &CurationRules) -> Result<Curated, DatasetError> {
    let adapter = adapter(&rules.adapter)?;
    let mut stats = CurationStats {
        input: raw.len(),
        ..Default::default()
    };
    let mut seen_keys = HashSet::new();
    let mut used_ids: HashMap<String, usize> = HashMap::new();
    let mut records = Vec::new();
    for line in raw {
        let ex = match adapter.convert(line) {
            Ok(ex) => ex,
            Err(e) => {
                log::debug!("malformed source line: {e}");
                stats.malformed += 1;
                continue;
            }
        };
        let x = normalize_ws(&ex.x);
        let gold = canonicalize(&ex.gold, &ex.schema);
        if x.is_empty() || !validate_output(gold.records(), &ex.schema).is_valid() {
            stats.quality_dropped += 1;
            continue;
        }
        let key = hex::encode(Sha256::digest(format!("{x}\u{0}{}", gold.to_json_string()).as_bytes()));
        if !seen_keys.insert(key) {
            stats.duplicates += 1;
            continue;
        }
        let source = ex.source.filter(|s| !s.is_empty()).unwrap_or_else(|| rules.source.clone());
        let base_id = ex.id.unwrap_or_else(|| format!("{source}-{:06}", records.len()));
        let n = used_ids.entry(base_id.clone()).or_insert(0);
        let id = if *n == 0 { base_id } else { format!("{base_id}-{n}") };
        *n += 1;
        records.push(CorpusRecord {
            id,
            x: ex.x,
            schema_ref: ex.schema,
            gold,
            source,
            split: ex.split.unwrap_or(rules.split),
        });
    }
    stats.kept = records.len();
    Ok(Curated { records, stats })
}
