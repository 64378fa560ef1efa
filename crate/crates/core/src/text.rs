//! Text helpers shared by record canonicalization, keyword clustering, TF-IDF
//! and the faithfulness checks.

/// Trims and collapses every internal whitespace run to a single space.
pub fn normalize_ws(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Lowercased tokens, splitting on anything that is not alphanumeric.
///
/// No stemming and no stopword removal.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

const STOPWORDS: &[&str] = &[
    "the", "and", "for", "with", "that", "this", "from", "are", "was", "were", "its", "into",
    "any", "all", "each", "then", "than", "not", "but", "have", "has", "had", "will", "can",
    "you", "your", "our", "their", "they", "them", "what", "which", "who", "how", "when",
    "where", "there", "here", "also", "only", "such", "per", "via", "out", "use",
];

/// Tokens that carry content: at least three characters, not purely numeric,
/// and not in a short English function-word list.
pub fn content_tokens(s: &str) -> Vec<String> {
    tokenize(s)
        .into_iter()
        .filter(|t| t.chars().count() >= 3)
        .filter(|t| !t.chars().all(|c| c.is_ascii_digit()))
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitespace_runs_collapse() {
        assert_eq!(normalize_ws("  Barack \t\n Obama  "), "Barack Obama");
        assert_eq!(normalize_ws("   "), "");
    }

    #[test]
    fn tokens_split_on_punctuation() {
        assert_eq!(
            tokenize("Check entity-types, and SPANS!"),
            vec!["check", "entity", "types", "and", "spans"]
        );
        assert_eq!(tokenize("Zürich (CH)"), vec!["zürich", "ch"]);
        assert!(tokenize("...").is_empty());
    }

    #[test]
    fn content_tokens_drop_function_words() {
        assert_eq!(content_tokens("Look at the 2024 entity"), vec!["look", "entity"]);
    }
}
