//! Prompt layouts shared by every backend.
//!
//! Generation, verification and answer prompts all start with the same
//! `problem + "\n\n<think>\n" + cot` prefix so a serving engine with prefix
//! caching only prefills the new suffix of each call.

use crate::error::InvariantViolation;

/// Version 1 of the verification prompt. Changing its wording changes the
/// per-verification prefill count, so edits go in a new versioned asset.
pub const VERIFY_TEMPLATE_V1: &str = include_str!("../../assets/verify_prompt_v1.txt");

pub const VERIFY_TAIL: &str = "Respond with a single digit 0-9:";

pub const THINK_OPEN: &str = "\n\n<think>\n";

const PLACEHOLDERS: [&str; 3] = ["{problem}", "{cot_prefix}", "{candidate_step}"];

pub fn check_template(template: &str) -> Result<(), InvariantViolation> {
    for p in PLACEHOLDERS {
        if !template.contains(p) {
            return Err(InvariantViolation::new(format!(
                "verification template lacks placeholder {p}"
            )));
        }
    }
    if !template.trim_end().ends_with(VERIFY_TAIL) {
        return Err(InvariantViolation::new(format!(
            "verification template must end with the line {VERIFY_TAIL:?}"
        )));
    }
    Ok(())
}

/// Single-pass substitution; placeholder-looking text inside the values is
/// left alone.
pub fn render_verification(template: &str, problem: &str, cot_prefix: &str, candidate: &str) -> String {
    let mut out = String::with_capacity(template.len() + problem.len() + cot_prefix.len() + candidate.len());
    let mut rest = template;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        let value = match PLACEHOLDERS.iter().position(|p| tail.starts_with(p)) {
            Some(0) => Some((problem, PLACEHOLDERS[0].len())),
            Some(1) => Some((cot_prefix, PLACEHOLDERS[1].len())),
            Some(2) => Some((candidate, PLACEHOLDERS[2].len())),
            _ => None,
        };
        match value {
            Some((v, skip)) => {
                out.push_str(v);
                rest = &tail[skip..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn generation_prompt(problem: &str, cot: &str) -> String {
    let mut p = String::with_capacity(problem.len() + THINK_OPEN.len() + cot.len());
    p.push_str(problem);
    p.push_str(THINK_OPEN);
    p.push_str(cot);
    p
}

pub fn answer_prompt(problem: &str, cot: &str, end_think: &str) -> String {
    let mut p = generation_prompt(problem, cot);
    if !p.ends_with('\n') {
        p.push('\n');
    }
    p.push_str(end_think);
    p.push_str("\n\n");
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::tokenize::count_tokens;

    #[test]
    fn default_template_is_valid() {
        check_template(VERIFY_TEMPLATE_V1).unwrap();
        assert!(VERIFY_TEMPLATE_V1.ends_with(VERIFY_TAIL));
    }

    #[test]
    fn verification_shares_generation_prefix() {
        let gen = generation_prompt("P", "step one\n\n");
        let ver = render_verification(VERIFY_TEMPLATE_V1, "P", "step one\n\n", "step two\n\n");
        assert!(ver.starts_with(&gen));
        assert!(ver.starts_with(&generation_prompt("P", "step one\n\nstep two\n\n")));
    }

    #[test]
    fn suffix_size_near_seventy_tokens() {
        let tail = VERIFY_TEMPLATE_V1.split("{candidate_step}").nth(1).unwrap();
        let candidate = "Step 3: s3 = (5*42 + 7) mod 97 = 13. so then we keep going on\n\n";
        let n = count_tokens(candidate) + count_tokens(tail);
        assert!((60..=75).contains(&n), "{n}");
    }

    #[test]
    fn values_are_not_re_expanded() {
        let out = render_verification("{problem}|{cot_prefix}|{candidate_step}{x}", "{cot_prefix}", "c", "d");
        assert_eq!(out, "{cot_prefix}|c|d{x}");
    }

    #[test]
    fn bad_templates_rejected() {
        assert!(check_template("{problem} {cot_prefix}").is_err());
        assert!(check_template("{problem}{cot_prefix}{candidate_step}\nScore:").is_err());
    }
}
