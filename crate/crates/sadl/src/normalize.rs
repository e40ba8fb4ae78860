//! Answer normalization applied before any answer equality test.

/// Canonicalize an answer string: lowercase, trim, strip terminal
/// punctuation, collapse internal whitespace, and drop leading articles.
pub fn normalize_answer(raw: &str) -> String {
    let lowered = raw.trim().to_lowercase();
    let stripped = lowered.trim_end_matches(['.', '!', '?', ',', ';', ':']);
    let mut words: Vec<&str> = stripped.split_whitespace().collect();
    while matches!(words.first(), Some(&"a") | Some(&"an") | Some(&"the")) {
        words.remove(0);
    }
    words.join(" ")
}
