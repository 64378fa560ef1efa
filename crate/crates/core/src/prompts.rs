//! Prompt templates with `{name}` placeholders.
//!
//! Placeholders: `{x}`, `{schema}`, `{strategy}`, `{dimension}`, `{index}`, `{n}`.
//! Substitution is single pass, so placeholder-like text inside an input is
//! never expanded a second time.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const DEFAULT_STRATEGY_TEMPLATE: &str = "You are designing thinking strategies for an information extraction task.
Analytical dimension: {dimension}
Write strategy {index} of {n} for this dimension: one fine-grained, self-contained instruction describing how to reason about the input before extracting.
Reply with the strategy text only.

Schema:
{schema}

Input:
{x}
";

pub const DEFAULT_RATIONALE_TEMPLATE: &str = "Extract structured information from the input according to the schema, following the thinking strategy.
Thinking strategy: {strategy}

Schema:
{schema}

Input:
{x}

Reason step by step between <think> and </think>, citing schema labels in square brackets such as [LABEL]. After </think>, output only a JSON array of records.
";

pub const DEFAULT_INSTRUCTION_TEMPLATE: &str = "Extract structured information from the input according to the schema.

Schema:
{schema}

Input:
{x}

Output a JSON array of records.";

/// Directive that replaces the strategy prefix in hidden-reasoning samples.
pub const SKIP_REASONING_DIRECTIVE: &str = "Skip all reasoning steps and answer directly.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub strategy: String,
    pub rationale: String,
    pub instruction: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            strategy: DEFAULT_STRATEGY_TEMPLATE.into(),
            rationale: DEFAULT_RATIONALE_TEMPLATE.into(),
            instruction: DEFAULT_INSTRUCTION_TEMPLATE.into(),
        }
    }
}

impl PromptTemplates {
    /// Loads `strategy.txt`, `rationale.txt` and `instruction.txt` from a
    /// directory; missing files keep the default template.
    pub fn from_dir(dir: &Path) -> std::io::Result<Self> {
        let mut t = PromptTemplates::default();
        for (name, slot) in [
            ("strategy.txt", &mut t.strategy),
            ("rationale.txt", &mut t.rationale),
            ("instruction.txt", &mut t.instruction),
        ] {
            let path = dir.join(name);
            if path.exists() {
                *slot = fs::read_to_string(path)?;
            }
        }
        Ok(t)
    }
}

/// Replaces `{key}` occurrences with their values in one left-to-right pass.
/// Unknown placeholders are kept verbatim.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
        });
        match replaced {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}
