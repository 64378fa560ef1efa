//! Extraction records: the shared representation for gold labels and model
//! predictions, plus completion parsing and the canonical equality used by
//! rejection sampling and scoring.
//!
//! Wire shapes (keys sorted on output):
//! - entity: `{"mention": .., "type": ..}`
//! - relation: `{"object": .., "relation": .., "subject": ..}`
//! - event: `{"arguments": {role: span | [span, ..]}, "event": .., "trigger": ..}`

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::schema::{record_issues, UnifiedSchema, ValidationReason};
use crate::text::normalize_ws;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecordError {
    #[error("unbalanced reasoning markers")]
    UnbalancedMarkers,
    #[error("no JSON value could be recovered from the answer")]
    Unparseable,
    #[error("invalid record shape: {0}")]
    BadShape(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExtractionRecord {
    Entity {
        mention: String,
        class_id: String,
    },
    Relation {
        subject: String,
        relation: String,
        object: String,
    },
    Event {
        class_id: String,
        trigger: String,
        arguments: Vec<(String, String)>,
    },
}

impl ExtractionRecord {
    pub fn entity(mention: impl Into<String>, class_id: impl Into<String>) -> Self {
        ExtractionRecord::Entity {
            mention: mention.into(),
            class_id: class_id.into(),
        }
    }

    pub fn relation(subject: impl Into<String>, relation: impl Into<String>, object: impl Into<String>) -> Self {
        ExtractionRecord::Relation {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
        }
    }

    pub fn event<R: Into<String>, S: Into<String>>(
        class_id: impl Into<String>,
        trigger: impl Into<String>,
        arguments: Vec<(R, S)>,
    ) -> Self {
        ExtractionRecord::Event {
            class_id: class_id.into(),
            trigger: trigger.into(),
            arguments: arguments.into_iter().map(|(r, s)| (r.into(), s.into())).collect(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ExtractionRecord::Entity { .. } => "entity",
            ExtractionRecord::Relation { .. } => "relation",
            ExtractionRecord::Event { .. } => "event",
        }
    }

    /// Entity type, relation label or event type.
    pub fn class_id(&self) -> &str {
        match self {
            ExtractionRecord::Entity { class_id, .. } => class_id,
            ExtractionRecord::Relation { relation, .. } => relation,
            ExtractionRecord::Event { class_id, .. } => class_id,
        }
    }

    /// Every text span the record claims to be present in the input.
    pub fn spans(&self) -> Box<dyn Iterator<Item = &str> + '_> {
        match self {
            ExtractionRecord::Entity { mention, .. } => Box::new(std::iter::once(mention.as_str())),
            ExtractionRecord::Relation { subject, object, .. } => {
                Box::new([subject.as_str(), object.as_str()].into_iter())
            }
            ExtractionRecord::Event { trigger, arguments, .. } => Box::new(
                std::iter::once(trigger.as_str()).chain(arguments.iter().map(|(_, s)| s.as_str())),
            ),
        }
    }

    /// Whitespace-normalizes spans and labels; event arguments are sorted and deduplicated.
    fn normalized(&self) -> Self {
        match self {
            ExtractionRecord::Entity { mention, class_id } => ExtractionRecord::Entity {
                mention: normalize_ws(mention),
                class_id: normalize_ws(class_id),
            },
            ExtractionRecord::Relation { subject, relation, object } => ExtractionRecord::Relation {
                subject: normalize_ws(subject),
                relation: normalize_ws(relation),
                object: normalize_ws(object),
            },
            ExtractionRecord::Event { class_id, trigger, arguments } => {
                let mut args: Vec<(String, String)> = arguments
                    .iter()
                    .map(|(r, s)| (normalize_ws(r), normalize_ws(s)))
                    .collect();
                args.sort();
                args.dedup();
                ExtractionRecord::Event {
                    class_id: normalize_ws(class_id),
                    trigger: normalize_ws(trigger),
                    arguments: args,
                }
            }
        }
    }

    /// Rewrites class and role labels to the schema's casing when they match
    /// case-insensitively. Unmatched labels are left as they are.
    fn fold_labels(&mut self, s: &UnifiedSchema) {
        match self {
            ExtractionRecord::Entity { class_id, .. } | ExtractionRecord::Relation { relation: class_id, .. } => {
                if let Some(c) = s.class_ignore_case(class_id) {
                    *class_id = c.class_id.clone();
                }
            }
            ExtractionRecord::Event { class_id, arguments, .. } => {
                if let Some(c) = s.class_ignore_case(class_id) {
                    *class_id = c.class_id.clone();
                    for (role, _) in arguments.iter_mut() {
                        let lower = role.to_lowercase();
                        if let Some(r) = c
                            .arguments
                            .iter()
                            .find(|a| *a == role)
                            .or_else(|| c.arguments.iter().find(|a| a.to_lowercase() == lower))
                        {
                            *role = r.clone();
                        }
                    }
                    arguments.sort();
                    arguments.dedup();
                }
            }
        }
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        match self {
            ExtractionRecord::Entity { mention, class_id } => {
                m.insert("mention".into(), Value::String(mention.clone()));
                m.insert("type".into(), Value::String(class_id.clone()));
            }
            ExtractionRecord::Relation { subject, relation, object } => {
                m.insert("object".into(), Value::String(object.clone()));
                m.insert("relation".into(), Value::String(relation.clone()));
                m.insert("subject".into(), Value::String(subject.clone()));
            }
            ExtractionRecord::Event { class_id, trigger, arguments } => {
                let mut grouped: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
                for (role, span) in arguments {
                    grouped.entry(role).or_default().push(span);
                }
                let mut args = Map::new();
                for (role, spans) in grouped {
                    let v = if spans.len() == 1 {
                        Value::String(spans[0].to_string())
                    } else {
                        Value::Array(spans.into_iter().map(|s| Value::String(s.to_string())).collect())
                    };
                    args.insert(role.to_string(), v);
                }
                m.insert("arguments".into(), Value::Object(args));
                m.insert("event".into(), Value::String(class_id.clone()));
                m.insert("trigger".into(), Value::String(trigger.clone()));
            }
        }
        Value::Object(m)
    }

    pub fn from_json(v: &Value) -> Result<Self, RecordError> {
        let obj = v
            .as_object()
            .ok_or_else(|| RecordError::BadShape(format!("expected an object, got {v}")))?;
        let field = |k: &str| -> Result<String, RecordError> {
            obj.get(k)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| RecordError::BadShape(format!("missing string field `{k}` in {v}")))
        };
        let only = |keys: &[&str]| -> Result<(), RecordError> {
            match obj.keys().find(|k| !keys.contains(&k.as_str())) {
                Some(k) => Err(RecordError::BadShape(format!("unexpected field `{k}`"))),
                None => Ok(()),
            }
        };
        if obj.contains_key("event") {
            only(&["event", "trigger", "arguments"])?;
            let mut arguments = Vec::new();
            match obj.get("arguments") {
                Some(Value::Object(args)) => {
                    for (role, span) in args {
                        match span {
                            Value::String(s) => arguments.push((role.clone(), s.clone())),
                            Value::Array(items) => {
                                for item in items {
                                    let s = item.as_str().ok_or_else(|| {
                                        RecordError::BadShape(format!("non-string span for role `{role}`"))
                                    })?;
                                    arguments.push((role.clone(), s.to_string()));
                                }
                            }
                            other => {
                                return Err(RecordError::BadShape(format!(
                                    "bad span for role `{role}`: {other}"
                                )))
                            }
                        }
                    }
                }
                None => {}
                Some(other) => return Err(RecordError::BadShape(format!("bad arguments: {other}"))),
            }
            Ok(ExtractionRecord::Event {
                class_id: field("event")?,
                trigger: field("trigger")?,
                arguments,
            })
        } else if obj.contains_key("relation") {
            only(&["relation", "subject", "object"])?;
            Ok(ExtractionRecord::Relation {
                subject: field("subject")?,
                relation: field("relation")?,
                object: field("object")?,
            })
        } else if obj.contains_key("type") {
            only(&["type", "mention"])?;
            Ok(ExtractionRecord::Entity {
                mention: field("mention")?,
                class_id: field("type")?,
            })
        } else {
            Err(RecordError::BadShape(format!("unrecognised record: {v}")))
        }
    }
}

impl Serialize for ExtractionRecord {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ExtractionRecord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(deserializer)?;
        ExtractionRecord::from_json(&v).map_err(serde::de::Error::custom)
    }
}

/// A deduplicated, whitespace-normalized, totally ordered record set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "Vec<ExtractionRecord>", into = "Vec<ExtractionRecord>")]
pub struct CanonicalSet(Vec<ExtractionRecord>);

impl CanonicalSet {
    pub fn records(&self) -> &[ExtractionRecord] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ExtractionRecord> {
        self.0.iter()
    }

    /// Canonical compact JSON array text.
    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("record serialization cannot fail")
    }
}

impl From<Vec<ExtractionRecord>> for CanonicalSet {
    fn from(records: Vec<ExtractionRecord>) -> Self {
        let mut v: Vec<ExtractionRecord> = records.iter().map(ExtractionRecord::normalized).collect();
        v.sort();
        v.dedup();
        CanonicalSet(v)
    }
}

impl From<CanonicalSet> for Vec<ExtractionRecord> {
    fn from(s: CanonicalSet) -> Self {
        s.0
    }
}

impl<'a> IntoIterator for &'a CanonicalSet {
    type Item = &'a ExtractionRecord;
    type IntoIter = std::slice::Iter<'a, ExtractionRecord>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Normalizes whitespace, folds label casing onto the schema, deduplicates and sorts.
pub fn canonicalize(records: &[ExtractionRecord], s: &UnifiedSchema) -> CanonicalSet {
    let folded: Vec<ExtractionRecord> = records
        .iter()
        .map(|r| {
            let mut r = r.normalized();
            r.fold_labels(s);
            r
        })
        .collect();
    CanonicalSet::from(folded)
}

/// Set equality of canonical record sets.
pub fn records_match(pred: &CanonicalSet, gold: &CanonicalSet) -> bool {
    pred == gold
}

/// One gold-annotated input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub x: String,
    pub schema_ref: UnifiedSchema,
    pub gold: CanonicalSet,
}

/// A completion split into reasoning and answer, with the parsed records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningOutput {
    pub cot: String,
    pub answer: String,
    pub records: CanonicalSet,
}

/// Splits a completion at the think markers.
///
/// Without markers the whole text is the answer and the reasoning is empty.
/// A lone marker, or a closing marker before the opening one, is an error.
pub fn split_reasoning(text: &str) -> Result<(String, String), RecordError> {
    let open = text.find(THINK_OPEN);
    let close = text.find(THINK_CLOSE);
    match (open, close) {
        (None, None) => Ok((String::new(), text.to_string())),
        (Some(o), Some(_)) => {
            let body_start = o + THINK_OPEN.len();
            let rel = text[body_start..].find(THINK_CLOSE).ok_or(RecordError::UnbalancedMarkers)?;
            let body_end = body_start + rel;
            Ok((
                text[body_start..body_end].to_string(),
                text[body_end + THINK_CLOSE.len()..].to_string(),
            ))
        }
        _ => Err(RecordError::UnbalancedMarkers),
    }
}

/// A record that failed shape parsing or schema validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedRecord {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub records: Vec<ExtractionRecord>,
    pub dropped: Vec<DroppedRecord>,
}

/// Parses an answer into schema-valid records.
///
/// The answer is first parsed as strict JSON. If that fails, one repair pass
/// strips a code fence and any prose outside the outermost JSON value, then
/// parses again. Records with a bad shape or that fail validation against the
/// schema are dropped and listed in [`ParsedAnswer::dropped`].
pub fn parse_model_output(answer: &str, s: &UnifiedSchema) -> Result<ParsedAnswer, RecordError> {
    let value = recover_json(answer).ok_or(RecordError::Unparseable)?;
    let items = match value {
        Value::Array(items) => items,
        obj @ Value::Object(_) => vec![obj],
        _ => return Err(RecordError::Unparseable),
    };
    let mut out = ParsedAnswer::default();
    for (index, item) in items.iter().enumerate() {
        let mut record = match ExtractionRecord::from_json(item) {
            Ok(r) => r.normalized(),
            Err(e) => {
                out.dropped.push(DroppedRecord { index, reason: e.to_string() });
                continue;
            }
        };
        record.fold_labels(s);
        let issues = record_issues(&record, s);
        if issues.is_empty() {
            out.records.push(record);
        } else {
            out.dropped.push(DroppedRecord {
                index,
                reason: describe(&issues),
            });
        }
    }
    Ok(out)
}

fn describe(issues: &[ValidationReason]) -> String {
    issues
        .iter()
        .map(|i| serde_json::to_string(i).unwrap_or_default())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Split, parse and canonicalize a full completion in one step.
pub fn parse_completion(text: &str, s: &UnifiedSchema) -> Result<(ReasoningOutput, Vec<DroppedRecord>), RecordError> {
    let (cot, answer) = split_reasoning(text)?;
    let parsed = parse_model_output(&answer, s)?;
    let records = canonicalize(&parsed.records, s);
    Ok((ReasoningOutput { cot, answer, records }, parsed.dropped))
}

fn recover_json(answer: &str) -> Option<Value> {
    if let Ok(v) = serde_json::from_str::<Value>(answer.trim()) {
        return Some(v);
    }
    let unfenced = strip_fence(answer).unwrap_or(answer);
    let start = unfenced.find(['[', '{'])?;
    let closer = if unfenced.as_bytes()[start] == b'[' { ']' } else { '}' };
    let end = unfenced.rfind(closer)?;
    if end < start {
        return None;
    }
    serde_json::from_str(&unfenced[start..=end]).ok()
}

/// Content of the first fenced block, without the info string.
fn strip_fence(text: &str) -> Option<&str> {
    let open = text.find("```")?;
    let after = &text[open + 3..];
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
    let body = &after[body_start..];
    let close = body.find("```").unwrap_or(body.len());
    Some(&body[..close])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{compile_schema, TaskKind};
    use serde_json::json;

    fn ner() -> UnifiedSchema {
        compile_schema(&json!(["PER", "LOC"]), TaskKind::Ner, "t").unwrap()
    }

    #[test]
    fn split_basic_shapes() {
        assert_eq!(split_reasoning("<think>abc</think>{...}").unwrap(), ("abc".into(), "{...}".into()));
        assert_eq!(split_reasoning("<think></think>{...}").unwrap(), ("".into(), "{...}".into()));
        assert_eq!(split_reasoning("{...}").unwrap(), ("".into(), "{...}".into()));
    }

    #[test]
    fn split_unbalanced() {
        assert_eq!(split_reasoning("<think>abc"), Err(RecordError::UnbalancedMarkers));
        assert_eq!(split_reasoning("</think>x<think>"), Err(RecordError::UnbalancedMarkers));
        assert_eq!(split_reasoning("abc</think>[]"), Err(RecordError::UnbalancedMarkers));
    }

    #[test]
    fn wire_shapes_are_exact() {
        assert_eq!(
            serde_json::to_string(&ExtractionRecord::entity("Obama", "PER")).unwrap(),
            r#"{"mention":"Obama","type":"PER"}"#
        );
        assert_eq!(
            serde_json::to_string(&ExtractionRecord::relation("Obama", "born_in", "Hawaii")).unwrap(),
            r#"{"object":"Hawaii","relation":"born_in","subject":"Obama"}"#
        );
        let ev = ExtractionRecord::event("Attack", "stormed", vec![("Target", "palace"), ("Attacker", "rebels"), ("Target", "gate")]);
        assert_eq!(
            serde_json::to_string(&ev).unwrap(),
            r#"{"arguments":{"Attacker":"rebels","Target":["palace","gate"]},"event":"Attack","trigger":"stormed"}"#
        );
    }

    #[test]
    fn parse_plain_array() {
        let p = parse_model_output(r#"[{"type":"PER","mention":"Obama"},{"type":"LOC","mention":"Paris"}]"#, &ner()).unwrap();
        assert_eq!(p.records.len(), 2);
        assert!(p.dropped.is_empty());
    }

    #[test]
    fn fenced_and_unfenced_agree() {
        let body = r#"[{"type":"PER","mention":"Obama"}]"#;
        let fenced = format!("Here you go:\n```json\n{body}\n```\nHope this helps.");
        let a = parse_model_output(body, &ner()).unwrap();
        let b = parse_model_output(&fenced, &ner()).unwrap();
        assert_eq!(a, b);
        let prose = format!("The answer is {body} as requested.");
        assert_eq!(parse_model_output(&prose, &ner()).unwrap(), a);
    }

    #[test]
    fn prose_is_unparseable() {
        assert_eq!(
            parse_model_output("I could not find any entities.", &ner()),
            Err(RecordError::Unparseable)
        );
        assert_eq!(parse_model_output("\"just a string\"", &ner()), Err(RecordError::Unparseable));
    }

    #[test]
    fn off_schema_records_are_dropped_and_counted() {
        let p = parse_model_output(
            r#"[{"type":"per","mention":"Obama"},{"type":"ORG","mention":"UN"},{"foo":1}]"#,
            &ner(),
        )
        .unwrap();
        assert_eq!(p.records, vec![ExtractionRecord::entity("Obama", "PER")]);
        assert_eq!(p.dropped.len(), 2);
    }

    #[test]
    fn canonicalize_merges_variants() {
        let s = ner();
        let c = canonicalize(
            &[ExtractionRecord::entity(" Obama ", "PER"), ExtractionRecord::entity("Obama", "per")],
            &s,
        );
        assert_eq!(c.records(), &[ExtractionRecord::entity("Obama", "PER")]);
        assert!(canonicalize(&[], &s).is_empty());
    }

    #[test]
    fn spans_stay_case_sensitive() {
        let s = ner();
        let a = canonicalize(&[ExtractionRecord::entity("obama", "PER")], &s);
        let b = canonicalize(&[ExtractionRecord::entity("Obama", "PER")], &s);
        assert!(!records_match(&a, &b));
    }

    #[test]
    fn match_ignores_order_and_whitespace() {
        let s = ner();
        let gold = canonicalize(
            &[ExtractionRecord::entity("Barack Obama", "PER"), ExtractionRecord::entity("Paris", "LOC")],
            &s,
        );
        let pred = canonicalize(
            &[ExtractionRecord::entity("Paris ", "loc"), ExtractionRecord::entity("Barack   Obama", "PER")],
            &s,
        );
        assert!(records_match(&pred, &gold));
        let missing = canonicalize(&[ExtractionRecord::entity("Paris", "LOC")], &s);
        assert!(!records_match(&missing, &gold));
        assert!(records_match(&CanonicalSet::default(), &CanonicalSet::default()));
    }

    #[test]
    fn event_role_casing_folds_onto_schema() {
        let s = compile_schema(&json!({"Attack": ["Attacker", "Target"]}), TaskKind::Ee, "").unwrap();
        let c = canonicalize(&[ExtractionRecord::event("attack", "hit", vec![("attacker", "rebels")])], &s);
        assert_eq!(c.records(), &[ExtractionRecord::event("Attack", "hit", vec![("Attacker", "rebels")])]);
    }
}
