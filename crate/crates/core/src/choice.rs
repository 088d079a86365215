//! Multiple-choice option lists and reply parsing, shared by pair probing
//! and evaluation.

use crate::text::option_label;

/// Renders `A. name` lines in the given order.
pub fn render_options(names: &[&str]) -> String {
    names
        .iter()
        .enumerate()
        .map(|(i, n)| format!("{}. {n}", option_label(i)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Index of the option a reply picks, if it can be read.
///
/// Accepted forms, after stripping an optional `Answer:` / `The answer is`
/// prefix, surrounding quotes, `*` and parentheses: a leading option label
/// followed by end of text, whitespace or one of `.`, `)`, `:`, `,`; or the
/// exact option name (case-insensitive, trailing period ignored).
pub fn parse_choice(reply: &str, names: &[&str]) -> Option<usize> {
    let mut s = reply.trim();
    for prefix in ["the answer is", "answer:", "answer"] {
        if s.len() >= prefix.len() && s[..prefix.len()].eq_ignore_ascii_case(prefix) {
            s = s[prefix.len()..].trim_start();
            break;
        }
    }
    let s = s.trim_start_matches(['*', '"', '\'', '(', ' ']);
    let letters: String = s.chars().take_while(char::is_ascii_uppercase).collect();
    if !letters.is_empty() && letters.len() <= 3 {
        let next = s[letters.len()..].chars().next();
        if matches!(next, None | Some('.' | ')' | ':' | ',' | '*' | '"')) || next.is_some_and(char::is_whitespace) {
            if let Some(i) = (0..names.len()).find(|&i| option_label(i) == letters) {
                return Some(i);
            }
        }
    }
    let bare = s.trim_end_matches(['*', '"', '\'', ')']).trim_end().trim_end_matches('.').trim();
    names.iter().position(|n| n.eq_ignore_ascii_case(bare))
}

#[cfg(test)]
mod tests {
    use super::*;

    const NAMES: [&str; 3] = ["Lear's Macaw", "Hyacinth Macaw", "Blue Jay"];

    #[test]
    fn renders_labels() {
        assert_eq!(render_options(&NAMES), "A. Lear's Macaw\nB. Hyacinth Macaw\nC. Blue Jay");
    }

    #[test]
    fn parses_labels_and_names() {
        assert_eq!(parse_choice("B", &NAMES), Some(1));
        assert_eq!(parse_choice("B. Hyacinth Macaw", &NAMES), Some(1));
        assert_eq!(parse_choice("(C)", &NAMES), Some(2));
        assert_eq!(parse_choice("Answer: A", &NAMES), Some(0));
        assert_eq!(parse_choice("The answer is C.", &NAMES), Some(2));
        assert_eq!(parse_choice("**A**", &NAMES), Some(0));
        assert_eq!(parse_choice("blue jay.", &NAMES), Some(2));
    }

    #[test]
    fn rejects_ambiguous_or_out_of_range() {
        assert_eq!(parse_choice("D", &NAMES), None);
        assert_eq!(parse_choice("I think it is a macaw", &NAMES), None);
        assert_eq!(parse_choice("Blue Jay or Lear's Macaw", &NAMES), None);
        assert_eq!(parse_choice("", &NAMES), None);
    }
}
