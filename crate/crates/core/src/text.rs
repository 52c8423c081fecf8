//! Answer normalization shared by the reward, the evaluator and candidate
//! deduplication.

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    answer_tokens(s).join(" ")
}

pub fn answer_tokens(s: &str) -> Vec<String> {
    let lowered = s.to_lowercase();
    let stripped: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Lowercased word with surrounding ASCII punctuation removed.
pub fn clean_word(w: &str) -> String {
    w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase()
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "in", "on", "by", "to", "is", "was", "did", "does", "do", "return",
    "what", "which", "who", "how", "that", "where", "and", "for", "with", "at", "from", "be",
    "are", "were", "as", "it", "its", "their", "his", "her", "than", "when", "there", "this",
];

pub fn is_stopword(w: &str) -> bool {
    STOPWORDS.contains(&w)
}

/// Distinct non-stopword cleaned words, in order of first appearance.
pub fn content_words(s: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for w in s.split_whitespace() {
        let c = clean_word(w);
        if !c.is_empty() && !is_stopword(&c) && !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer("The  Eiffel Tower!"), "eiffel tower");
        assert_eq!(normalize_answer("a"), "");
        assert_eq!(normalize_answer("1,200"), "1200");
        assert_eq!(normalize_answer("Théâtre"), "théâtre");
    }

    #[test]
    fn content() {
        assert_eq!(
            content_words("return points scored by the Bears."),
            vec!["points", "scored", "bears"]
        );
    }
}
