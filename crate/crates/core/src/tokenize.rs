//! The two tokenizations used across the engine.
//!
//! Engine tokens are whitespace-separated runs; they measure budgets and block
//! lengths. Retrieval terms are lowercase alphanumeric runs; they feed BM25.

pub fn whitespace_token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Keeps the first `budget` whitespace tokens of `text`, preserving the
/// original separators between them. Trailing text after the last kept
/// token is dropped.
pub fn truncate_to_tokens(text: &str, budget: usize) -> &str {
    if budget == 0 {
        return "";
    }
    let mut seen = 0usize;
    let mut in_token = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_token {
                in_token = false;
                if seen == budget {
                    return &text[..i];
                }
            }
        } else if !in_token {
            in_token = true;
            seen += 1;
        }
    }
    text
}

/// Lowercased alphanumeric terms; everything else separates terms.
pub fn terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitespace_counts() {
        assert_eq!(whitespace_token_count(""), 0);
        assert_eq!(whitespace_token_count("  a\nb\t c "), 3);
    }

    #[test]
    fn truncation_keeps_separators() {
        assert_eq!(truncate_to_tokens("a b\nc d", 3), "a b\nc");
        assert_eq!(truncate_to_tokens("a b", 5), "a b");
        assert_eq!(truncate_to_tokens("a b", 0), "");
        assert_eq!(truncate_to_tokens("  a  b  ", 1), "  a");
    }

    #[test]
    fn retrieval_terms() {
        assert_eq!(terms("The Home-City of X2!"), vec!["the", "home", "city", "of", "x2"]);
        assert!(terms(" ,.; ").is_empty());
    }
}
