//! Text normalization shared by ingest and the exact-match metrics.

/// Lowercases, trims, and collapses internal whitespace runs to one space.
pub fn normalize(text: &str) -> String {
    let lower = text.to_lowercase();
    let mut out = String::with_capacity(lower.len());
    for word in lower.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Whitespace tokens of already-normalized text.
pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapses_and_lowercases() {
        assert_eq!(
            normalize("  Data\t ENGINEER \n sydney "),
            "data engineer sydney"
        );
        assert_eq!(normalize("   "), "");
    }

    #[test]
    fn idempotent() {
        let once = normalize(" Part  Time   Adobe");
        assert_eq!(normalize(&once), once);
    }
}
