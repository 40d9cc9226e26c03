//! Step boundaries in generated text.

use crate::backend::tokenize::{count_tokens, truncate_tokens};
use crate::backend::FinishReason;
use crate::types::{EngineConfig, Tokens};

/// Byte offset just past the earliest marker occurrence, extended over any
/// newlines that directly follow it.
pub fn first_boundary(text: &str, markers: &[String]) -> Option<usize> {
    let (pos, len) = markers
        .iter()
        .filter_map(|m| text.find(m.as_str()).map(|p| (p, m.len())))
        .min_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))?;
    let mut end = pos + len;
    end += text[end..].bytes().take_while(|&b| b == b'\n').count();
    Some(end)
}

/// Cut one step off the front of `text`.
///
/// The step ends at the first of: a boundary marker (kept with the step), the
/// end-of-thinking marker (dropped, reported as `EndThink`), or
/// `max_tokens` tokens (reported as `Length`).
pub fn cut_step<'a>(
    text: &'a str,
    markers: &[String],
    end_marker: Option<&str>,
    max_tokens: Tokens,
) -> (&'a str, FinishReason) {
    let boundary = first_boundary(text, markers);
    let end_think = end_marker.and_then(|m| text.find(m));
    let (mut step, mut finish) = match (boundary, end_think) {
        (_, Some(e)) if boundary.is_none_or(|b| e < b) => (&text[..e], FinishReason::EndThink),
        (Some(b), _) => (&text[..b], FinishReason::Stop),
        _ => (text, FinishReason::Stop),
    };
    if count_tokens(step) > max_tokens {
        step = truncate_tokens(step, max_tokens);
        finish = FinishReason::Length;
    }
    (step, finish)
}

/// [`cut_step`] with the engine's configured boundaries.
pub fn segment_step(text: &str, config: &EngineConfig) -> (String, FinishReason) {
    let (step, finish) = cut_step(
        text,
        &config.step_stop_markers,
        Some(&config.end_think_marker),
        config.max_step_tokens,
    );
    (step.to_string(), finish)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(max: Tokens) -> EngineConfig {
        EngineConfig {
            max_step_tokens: max,
            ..EngineConfig::default()
        }
    }

    #[test]
    fn first_boundary_wins() {
        let (s, f) = segment_step("Compute 2+3 = 5.\n\nNext,", &cfg(256));
        assert_eq!(s, "Compute 2+3 = 5.\n\n");
        assert_eq!(f, FinishReason::Stop);
        let (s, _) = segment_step("Is it?\nYes.\n\n", &cfg(256));
        assert_eq!(s, "Is it?\n");
    }

    #[test]
    fn truncation_is_length() {
        let (s, f) = segment_step("one two three four five", &cfg(3));
        assert_eq!(s, "one two three");
        assert_eq!(f, FinishReason::Length);
    }

    #[test]
    fn end_marker_is_dropped() {
        let (s, f) = segment_step("done now </think>\n\nThe answer", &cfg(256));
        assert_eq!(s, "done now ");
        assert_eq!(f, FinishReason::EndThink);
        let (s, f) = segment_step("a.\n\nb </think>", &cfg(256));
        assert_eq!((s.as_str(), f), ("a.\n\n", FinishReason::Stop));
    }

    #[test]
    fn no_boundary_keeps_everything() {
        assert_eq!(segment_step("abc", &cfg(4)), ("abc".to_string(), FinishReason::Stop));
        assert_eq!(first_boundary("abc", &[]), None);
    }
}
