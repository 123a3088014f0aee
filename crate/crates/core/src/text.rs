//! Tokenizers shared by the sparse index, intent parsing and the hashing
//! encoder.

/// Characters that belong to a term. Hyphens and angle brackets are kept so
/// that tags such as `stuffed-toy` and triggers such as `<bear-v4>` stay one
/// term.
pub fn is_term_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '-' | '_' | '<' | '>')
}

/// Lowercased terms, split on anything that is not a term character.
/// Stray leading/trailing hyphens are trimmed.
pub fn terms(text: &str) -> Vec<String> {
    text.split(|c: char| !is_term_char(c))
        .map(|t| t.trim_matches('-'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Lowercased alphanumeric words, as consumed by the hashing encoder.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}
