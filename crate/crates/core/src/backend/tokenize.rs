//! Whitespace tokenizer used for simulated token counts.
//!
//! One token per whitespace-delimited unit. A unit carries its trailing
//! whitespace, and leading whitespace of the text belongs to the first unit,
//! so concatenating [`units`] always reproduces the input exactly.

pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn units(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut seen_word = false;
    let mut prev_ws = false;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if !ws && prev_ws && seen_word {
            out.push(&text[start..i]);
            start = i;
        }
        if !ws {
            seen_word = true;
        }
        prev_ws = ws;
    }
    if seen_word {
        out.push(&text[start..]);
    } else if !text.is_empty() {
        // whitespace only: no tokens, but keep the text reachable
        return Vec::new();
    }
    out
}

/// The first `n` units, with trailing whitespace of the last kept unit
/// dropped when the text is cut.
pub fn truncate_tokens(text: &str, n: usize) -> &str {
    let us = units(text);
    if us.len() <= n {
        return text;
    }
    let end: usize = us[..n].iter().map(|u| u.len()).sum();
    text[..end].trim_end()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_examples() {
        assert_eq!(units("a b\n\nc"), vec!["a ", "b\n\n", "c"]);
        assert_eq!(units("  a b "), vec!["  a ", "b "]);
        assert!(units("   ").is_empty());
        assert_eq!(count_tokens("Step 3: s3 = (5*42 + 7) mod 97 = 13."), 11);
        assert_eq!(truncate_tokens("one two three", 2), "one two");
        assert_eq!(truncate_tokens("one two", 5), "one two");
    }

    proptest! {
        #[test]
        fn units_reassemble_and_count(text in "[ a-c\n.]{0,60}") {
            let us = units(&text);
            prop_assert_eq!(us.len(), count_tokens(&text));
            if !text.trim().is_empty() {
                prop_assert_eq!(us.concat(), text.clone());
            }
        }
    }
}
