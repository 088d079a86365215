//! Canonical text forms shared by extraction, hashing, and the mock backend.

use unicode_normalization::UnicodeNormalization;

use crate::records::sha256_hex;

/// NFC, lowercase, whitespace collapsed to single spaces, trimmed.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Feature identity: hex SHA-256 of the normalized text.
pub fn feature_id(text: &str) -> String {
    sha256_hex(normalize(text).as_bytes())
}

/// Multiple-choice labels: `A`..`Z`, then `AA`, `AB`, ...
pub fn option_label(mut index: usize) -> String {
    let mut label = Vec::new();
    loop {
        label.push(b'A' + (index % 26) as u8);
        if index < 26 {
            break;
        }
        index = index / 26 - 1;
    }
    label.reverse();
    String::from_utf8(label).expect("ascii")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_collapses_and_lowercases() {
        assert_eq!(normalize("  Red   Crest\t"), "red crest");
        // Decomposed e + combining acute composes to U+00E9.
        assert_eq!(normalize("Cafe\u{301}"), "caf\u{e9}");
        assert_eq!(feature_id("Red  crest"), feature_id("red crest"));
    }

    #[test]
    fn labels_roll_over() {
        assert_eq!(option_label(0), "A");
        assert_eq!(option_label(25), "Z");
        assert_eq!(option_label(26), "AA");
        assert_eq!(option_label(27), "AB");
        assert_eq!(option_label(52), "BA");
    }
}
