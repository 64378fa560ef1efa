//! Unified schema representation for NER, RE and EE tasks.
//!
//! Every task schema is compiled into one shape: a task kind plus an ordered
//! list of classes, each with a class identifier, its argument roles and a
//! free-text descriptor. The canonical JSON text is
//!
//! ```json
//! {"classes":[{"arguments":["subject","object"],"class":"born_in","description":""}],"source":"nyt","task":"RE"}
//! ```
//!
//! Keys are always emitted in sorted order so the text is byte-stable.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::records::ExtractionRecord;
use crate::text::normalize_ws;

/// Argument roles every relation class carries, in order.
pub const RELATION_ARGUMENTS: [&str; 2] = ["subject", "object"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("schema lists no classes")]
    EmptySchema,
    #[error("duplicate class `{0}`")]
    DuplicateClass(String),
    #[error("event class `{0}` lists no argument roles")]
    MissingArguments(String),
    #[error("malformed schema JSON: {0}")]
    MalformedJson(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
}

/// The three extraction task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "NER")]
    Ner,
    #[serde(rename = "RE")]
    Re,
    #[serde(rename = "EE")]
    Ee,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Ner => "NER",
            TaskKind::Re => "RE",
            TaskKind::Ee => "EE",
        }
    }

    /// Case-insensitive parse of `ner`, `re` or `ee`.
    pub fn parse(s: &str) -> Option<TaskKind> {
        match s.to_ascii_uppercase().as_str() {
            "NER" => Some(TaskKind::Ner),
            "RE" => Some(TaskKind::Re),
            "EE" => Some(TaskKind::Ee),
            _ => None,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// EE is always evaluated as two subtasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EeSubtask {
    Trigger,
    Argument,
}

impl EeSubtask {
    pub fn as_str(self) -> &'static str {
        match self {
            EeSubtask::Trigger => "trigger",
            EeSubtask::Argument => "argument",
        }
    }
}

/// One extraction target: class identifier, argument roles, descriptor.
///
/// Fields are declared in alphabetical order; serde emits them in declaration
/// order, which keeps the canonical text sorted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaClass {
    pub arguments: Vec<String>,
    #[serde(rename = "class")]
    pub class_id: String,
    #[serde(default)]
    pub description: String,
}

impl SchemaClass {
    pub fn new(class_id: impl Into<String>, arguments: Vec<String>) -> Self {
        SchemaClass {
            arguments,
            class_id: class_id.into(),
            description: String::new(),
        }
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = description.into();
        self
    }

    pub fn has_argument(&self, role: &str) -> bool {
        self.arguments.iter().any(|a| a == role)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnifiedSchema {
    pub classes: Vec<SchemaClass>,
    #[serde(rename = "source", default)]
    pub source_name: String,
    pub task: TaskKind,
}

impl UnifiedSchema {
    /// Builds and checks a schema from already-structured parts.
    pub fn new(
        task: TaskKind,
        classes: Vec<SchemaClass>,
        source_name: impl Into<String>,
    ) -> Result<Self, SchemaError> {
        let schema = UnifiedSchema {
            classes,
            source_name: source_name.into(),
            task,
        };
        schema.check()?;
        Ok(schema)
    }

    pub fn class(&self, class_id: &str) -> Option<&SchemaClass> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    /// Exact match first, then a case-insensitive fallback.
    pub fn class_ignore_case(&self, class_id: &str) -> Option<&SchemaClass> {
        self.class(class_id).or_else(|| {
            let lower = class_id.to_lowercase();
            self.classes.iter().find(|c| c.class_id.to_lowercase() == lower)
        })
    }

    /// All class identifiers and argument roles, the label vocabulary of the schema.
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.classes
            .iter()
            .flat_map(|c| std::iter::once(c.class_id.as_str()).chain(c.arguments.iter().map(String::as_str)))
    }

    pub fn argument_count(&self) -> usize {
        self.classes.iter().map(|c| c.arguments.len()).sum()
    }

    fn check(&self) -> Result<(), SchemaError> {
        if self.classes.is_empty() {
            return Err(SchemaError::EmptySchema);
        }
        let mut seen = HashSet::new();
        for class in &self.classes {
            if class.class_id.trim().is_empty() {
                return Err(SchemaError::SchemaViolation("empty class identifier".into()));
            }
            if !seen.insert(class.class_id.as_str()) {
                return Err(SchemaError::DuplicateClass(class.class_id.clone()));
            }
            let mut roles = HashSet::new();
            for role in &class.arguments {
                if role.trim().is_empty() {
                    return Err(SchemaError::SchemaViolation(format!(
                        "class `{}` has an empty argument name",
                        class.class_id
                    )));
                }
                if !roles.insert(role.as_str()) {
                    return Err(SchemaError::SchemaViolation(format!(
                        "class `{}` repeats argument `{role}`",
                        class.class_id
                    )));
                }
            }
            match self.task {
                TaskKind::Ner if !class.arguments.is_empty() => {
                    return Err(SchemaError::SchemaViolation(format!(
                        "entity class `{}` must not declare arguments",
                        class.class_id
                    )));
                }
                TaskKind::Re if class.arguments != RELATION_ARGUMENTS => {
                    return Err(SchemaError::SchemaViolation(format!(
                        "relation class `{}` must have arguments [subject, object]",
                        class.class_id
                    )));
                }
                TaskKind::Ee if class.arguments.is_empty() => {
                    return Err(SchemaError::MissingArguments(class.class_id.clone()));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Compiles a task-specific schema description into a [`UnifiedSchema`].
///
/// Accepted raw shapes:
/// - an array of labels: `["PER", "LOC"]`
/// - an array of objects with a label key (`class`, `name`, `type`, `label`,
///   `event_type` or `relation`), optional `arguments`/`roles` and optional
///   `description`
/// - a map from label to a role list, a descriptor string, or an object as above
/// - a unified schema document (`{"task", "classes", ...}`), which makes
///   compilation idempotent
///
/// Relation classes always receive `[subject, object]`.
pub fn compile_schema(raw: &Value, task: TaskKind, source_name: &str) -> Result<UnifiedSchema, SchemaError> {
    let mut source = source_name.to_string();
    let entries: Vec<(String, Option<Vec<String>>, String)> = match raw {
        Value::Object(map) if map.contains_key("classes") => {
            if let Some(t) = map.get("task") {
                let declared = t.as_str().and_then(TaskKind::parse).ok_or_else(|| {
                    SchemaError::SchemaViolation(format!("unknown task {t}"))
                })?;
                if declared != task {
                    return Err(SchemaError::SchemaViolation(format!(
                        "schema declares task {declared}, expected {task}"
                    )));
                }
            }
            if source.is_empty() {
                if let Some(s) = map.get("source").and_then(Value::as_str) {
                    source = s.to_string();
                }
            }
            return compile_schema(&map["classes"], task, &source);
        }
        Value::Array(items) => items.iter().map(raw_entry).collect::<Result<_, _>>()?,
        Value::Object(map) => map
            .iter()
            .map(|(label, v)| match v {
                Value::Array(_) => Ok((label.clone(), Some(string_list(v)?), String::new())),
                Value::String(d) => Ok((label.clone(), None, d.clone())),
                Value::Null => Ok((label.clone(), None, String::new())),
                Value::Object(_) => {
                    let (_, args, desc) = raw_entry_fields(v, Some(label.clone()))?;
                    Ok((label.clone(), args, desc))
                }
                other => Err(SchemaError::SchemaViolation(format!(
                    "unsupported value for class `{label}`: {other}"
                ))),
            })
            .collect::<Result<_, _>>()?,
        other => {
            return Err(SchemaError::SchemaViolation(format!(
                "unsupported raw schema: {other}"
            )))
        }
    };
    if entries.is_empty() {
        return Err(SchemaError::EmptySchema);
    }
    let mut classes = Vec::with_capacity(entries.len());
    for (label, args, description) in entries {
        let label = normalize_ws(&label);
        let arguments = match task {
            TaskKind::Ner => args.unwrap_or_default(),
            TaskKind::Re => match args {
                None => RELATION_ARGUMENTS.iter().map(|s| s.to_string()).collect(),
                Some(a) if a.is_empty() => RELATION_ARGUMENTS.iter().map(|s| s.to_string()).collect(),
                Some(a) => a,
            },
            TaskKind::Ee => {
                let a = args.unwrap_or_default();
                if a.is_empty() {
                    return Err(SchemaError::MissingArguments(label));
                }
                a
            }
        };
        classes.push(SchemaClass {
            arguments: arguments.iter().map(|a| normalize_ws(a)).collect(),
            class_id: label,
            description,
        });
    }
    UnifiedSchema::new(task, classes, source)
}

fn raw_entry(v: &Value) -> Result<(String, Option<Vec<String>>, String), SchemaError> {
    match v {
        Value::String(s) => Ok((s.clone(), None, String::new())),
        Value::Object(_) => {
            let (label, args, desc) = raw_entry_fields(v, None)?;
            Ok((label, args, desc))
        }
        other => Err(SchemaError::SchemaViolation(format!("unsupported class entry: {other}"))),
    }
}

fn raw_entry_fields(
    v: &Value,
    fallback_label: Option<String>,
) -> Result<(String, Option<Vec<String>>, String), SchemaError> {
    const LABEL_KEYS: [&str; 6] = ["class", "name", "type", "label", "event_type", "relation"];
    let label = LABEL_KEYS
        .iter()
        .find_map(|k| v.get(*k).and_then(Value::as_str).map(str::to_string))
        .or(fallback_label)
        .ok_or_else(|| SchemaError::SchemaViolation(format!("class entry without a label: {v}")))?;
    let args = match v.get("arguments").or_else(|| v.get("roles")) {
        Some(a) => Some(string_list(a)?),
        None => None,
    };
    let description = v
        .get("description")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    Ok((label, args, description))
}

fn string_list(v: &Value) -> Result<Vec<String>, SchemaError> {
    let items = v
        .as_array()
        .ok_or_else(|| SchemaError::SchemaViolation(format!("expected a list of names, got {v}")))?;
    items
        .iter()
        .map(|item| match item {
            Value::String(s) => Ok(s.clone()),
            // {"role": "Attacker"} style role entries
            Value::Object(o) => o
                .get("role")
                .or_else(|| o.get("name"))
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| SchemaError::SchemaViolation(format!("unnamed argument: {item}"))),
            other => Err(SchemaError::SchemaViolation(format!("bad argument name: {other}"))),
        })
        .collect()
}

/// Canonical, byte-stable JSON text of a schema.
pub fn serialize_schema(s: &UnifiedSchema) -> String {
    serde_json::to_string(s).expect("schema serialization cannot fail")
}

/// Parses canonical schema JSON, rejecting unknown fields and broken invariants.
pub fn parse_schema(text: &str) -> Result<UnifiedSchema, SchemaError> {
    let schema: UnifiedSchema = serde_json::from_str(text).map_err(|e| {
        if e.is_data() {
            SchemaError::SchemaViolation(e.to_string())
        } else {
            SchemaError::MalformedJson(e.to_string())
        }
    })?;
    schema.check()?;
    Ok(schema)
}

/// Reads a schema file holding one schema object or an array of schemas.
pub fn parse_schema_file(text: &str) -> Result<Vec<UnifiedSchema>, SchemaError> {
    let value: Value = serde_json::from_str(text).map_err(|e| SchemaError::MalformedJson(e.to_string()))?;
    let items = match value {
        Value::Array(items) => items,
        single => vec![single],
    };
    items
        .into_iter()
        .map(|v| parse_schema(&v.to_string()))
        .collect()
}

/// Why a record failed validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum ValidationReason {
    UnknownClass { class: String },
    UnknownArgument { class: String, role: String },
    /// The record shape does not fit the task (for example a relation
    /// triple under an NER schema).
    WrongArity { task: TaskKind, record_kind: String },
    EmptySpan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub record: usize,
    #[serde(flatten)]
    pub reason: ValidationReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }

    /// Indices of records with at least one issue.
    pub fn invalid_records(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.issues.iter().map(|i| i.record).collect();
        idx.dedup();
        idx
    }
}

/// Checks every record's class, roles and shape against the schema.
///
/// Labels are compared exactly; run [`crate::records::canonicalize`] first to
/// fold label casing onto the schema.
pub fn validate_output(records: &[ExtractionRecord], s: &UnifiedSchema) -> ValidationReport {
    let mut issues = Vec::new();
    for (i, record) in records.iter().enumerate() {
        for reason in record_issues(record, s) {
            issues.push(ValidationIssue { record: i, reason });
        }
    }
    ValidationReport { issues }
}

pub(crate) fn record_issues(record: &ExtractionRecord, s: &UnifiedSchema) -> Vec<ValidationReason> {
    let mut out = Vec::new();
    let expected = match record {
        ExtractionRecord::Entity { .. } => TaskKind::Ner,
        ExtractionRecord::Relation { .. } => TaskKind::Re,
        ExtractionRecord::Event { .. } => TaskKind::Ee,
    };
    if expected != s.task {
        out.push(ValidationReason::WrongArity {
            task: s.task,
            record_kind: record.kind_name().to_string(),
        });
        return out;
    }
    if record.spans().any(|span| normalize_ws(span).is_empty()) {
        out.push(ValidationReason::EmptySpan);
    }
    let class_id = record.class_id();
    match s.class(class_id) {
        None => out.push(ValidationReason::UnknownClass {
            class: class_id.to_string(),
        }),
        Some(class) => {
            if let ExtractionRecord::Event { arguments, .. } = record {
                for (role, _) in arguments {
                    if !class.has_argument(role) {
                        out.push(ValidationReason::UnknownArgument {
                            class: class_id.to_string(),
                            role: role.clone(),
                        });
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn toy_ee() -> UnifiedSchema {
        compile_schema(
            &json!({"Attack": ["Attacker", "Target"], "Arrest": ["Agent", "Person"]}),
            TaskKind::Ee,
            "toy",
        )
        .unwrap()
    }

    #[test]
    fn ner_label_list_compiles_to_four_classes() {
        let s = compile_schema(&json!(["PER", "LOC", "ORG", "MISC"]), TaskKind::Ner, "conll2003").unwrap();
        assert_eq!(s.classes.len(), 4);
        assert!(s.classes.iter().all(|c| c.arguments.is_empty()));
        assert_eq!(s.source_name, "conll2003");
    }

    #[test]
    fn casie_like_event_schema_keeps_all_roles() {
        let raw = json!([
            {"event_type": "Attack.Databreach", "arguments": ["Attacker", "Attack-Pattern", "Victim", "Number-of-Victim", "Compromised-Data", "Number-of-Data", "Tool", "Place", "Time", "Damage-Amount", "Purpose"]},
            {"event_type": "Attack.Phishing", "arguments": ["Attacker", "Victim", "Trusted-Entity", "Attack-Pattern", "Tool"]},
            {"event_type": "Attack.Ransom", "arguments": ["Attacker", "Victim", "Price", "Payment-Method"]},
            {"event_type": "Discover.Vulnerability", "arguments": ["Discoverer", "Vulnerability", "CVE"]},
            {"event_type": "Patch.Vulnerability", "arguments": ["Releaser", "Patch", "Vulnerable_System", "Time", "Issues-Addressed"]},
        ]);
        // 11 + 5 + 4 + 3 + 5 = 28, trim two to land on 26
        let mut raw = raw;
        let args = raw[0]["arguments"].as_array_mut().unwrap();
        args.truncate(9);
        let s = compile_schema(&raw, TaskKind::Ee, "casie").unwrap();
        assert_eq!(s.classes.len(), 5);
        assert_eq!(s.argument_count(), 26);
    }

    #[test]
    fn relation_classes_get_subject_object() {
        let s = compile_schema(&json!(["born_in", "works_for"]), TaskKind::Re, "").unwrap();
        for c in &s.classes {
            assert_eq!(c.arguments, vec!["subject", "object"]);
        }
        let bad = compile_schema(&json!([{"class": "x", "arguments": ["a", "b"]}]), TaskKind::Re, "");
        assert!(matches!(bad, Err(SchemaError::SchemaViolation(_))));
    }

    #[test]
    fn compile_errors() {
        assert_eq!(compile_schema(&json!([]), TaskKind::Ner, ""), Err(SchemaError::EmptySchema));
        assert_eq!(
            compile_schema(&json!(["PER", "PER"]), TaskKind::Ner, ""),
            Err(SchemaError::DuplicateClass("PER".into()))
        );
        assert_eq!(
            compile_schema(&json!([{"event_type": "Attack"}]), TaskKind::Ee, ""),
            Err(SchemaError::MissingArguments("Attack".into()))
        );
    }

    #[test]
    fn compile_is_idempotent() {
        let s = toy_ee();
        let again: Value = serde_json::from_str(&serialize_schema(&s)).unwrap();
        assert_eq!(compile_schema(&again, TaskKind::Ee, "").unwrap(), s);
    }

    #[test]
    fn compiling_under_the_wrong_task_fails() {
        let again: Value = serde_json::from_str(&serialize_schema(&toy_ee())).unwrap();
        assert!(compile_schema(&again, TaskKind::Ner, "").is_err());
    }

    #[test]
    fn canonical_text_has_sorted_keys() {
        let s = compile_schema(&json!([{"name": "PER", "description": "a person"}]), TaskKind::Ner, "d").unwrap();
        assert_eq!(
            serialize_schema(&s),
            r#"{"classes":[{"arguments":[],"class":"PER","description":"a person"}],"source":"d","task":"NER"}"#
        );
    }

    #[test]
    fn parse_rejects_bad_input() {
        let dup = r#"{"classes":[{"arguments":[],"class":"A","description":""},{"arguments":[],"class":"A","description":""}],"source":"","task":"NER"}"#;
        assert!(matches!(parse_schema(dup), Err(SchemaError::DuplicateClass(_))));
        let truncated = r#"{"classes":[{"arguments":[],"cla"#;
        assert!(matches!(parse_schema(truncated), Err(SchemaError::MalformedJson(_))));
        let unknown = r#"{"classes":[{"arguments":[],"class":"A","description":""}],"source":"","task":"NER","extra":1}"#;
        assert!(matches!(parse_schema(unknown), Err(SchemaError::SchemaViolation(_))));
    }

    #[test]
    fn schema_file_accepts_array() {
        let a = serialize_schema(&toy_ee());
        let text = format!("[{a},{a}]");
        assert_eq!(parse_schema_file(&text).unwrap().len(), 2);
        assert_eq!(parse_schema_file(&a).unwrap().len(), 1);
    }

    #[test]
    fn validation_flags_cross_class_role() {
        let s = toy_ee();
        let ok = ExtractionRecord::event("Attack", "stormed", vec![("Attacker", "rebels")]);
        let cross = ExtractionRecord::event("Attack", "stormed", vec![("Agent", "police")]);
        assert!(validate_output(std::slice::from_ref(&ok), &s).is_valid());
        let report = validate_output(&[ok, cross], &s);
        assert_eq!(
            report.issues,
            vec![ValidationIssue {
                record: 1,
                reason: ValidationReason::UnknownArgument {
                    class: "Attack".into(),
                    role: "Agent".into()
                }
            }]
        );
    }

    #[test]
    fn validation_unknown_class_and_vacuous() {
        let s = compile_schema(&json!(["PER"]), TaskKind::Ner, "").unwrap();
        assert!(validate_output(&[], &s).is_valid());
        let r = validate_output(&[ExtractionRecord::entity("Paris", "LOC")], &s);
        assert_eq!(r.issues[0].reason, ValidationReason::UnknownClass { class: "LOC".into() });
        let r = validate_output(&[ExtractionRecord::relation("a", "PER", "b")], &s);
        assert!(matches!(r.issues[0].reason, ValidationReason::WrongArity { .. }));
    }
}
