//! Canonical knowledge-summary grammar.
//!
//! A summary is read sentence by sentence (a sentence ends at `.` followed
//! by whitespace, at a newline, or at the end of the text). Recognized
//! sentences:
//!
//! ```text
//! Mastered: <construct>, <construct>, ... | none
//! Not mastered: <construct>, ... | none
//! Misconceptions: <phrase>; <phrase>; ... | none
//! Noise: slip rate <p>, guess rate <p>
//! The student has mastered <construct> [except in the event of misconceptions]
//! The student has not mastered <construct>
//! ```
//!
//! Other sentences are free prose and ignored. Later statements override
//! earlier ones; constructs never mentioned are assumed mastered. A final
//! fragment without a terminator is treated as possibly truncated and is
//! dropped if it does not parse.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};
use crate::sim::{Misconception, Operator, StudentId, StudentProfile};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedSummary {
    pub mastered: BTreeSet<Operator>,
    pub not_mastered: BTreeSet<Operator>,
    pub misconceptions: Vec<Misconception>,
    pub slip_rate: f64,
    pub guess_rate: f64,
}

impl ParsedSummary {
    pub fn to_profile(&self, id: StudentId) -> StudentProfile {
        let mut misconceptions = self.misconceptions.clone();
        misconceptions.sort();
        misconceptions.dedup();
        StudentProfile {
            id,
            mastered: Operator::ALL
                .into_iter()
                .filter(|o| !self.not_mastered.contains(o))
                .collect(),
            misconceptions,
            slip_rate: self.slip_rate,
            guess_rate: self.guess_rate,
        }
    }

    fn set_mastery(&mut self, op: Operator, mastered: bool) {
        if mastered {
            self.not_mastered.remove(&op);
            self.mastered.insert(op);
        } else {
            self.mastered.remove(&op);
            self.not_mastered.insert(op);
        }
    }
}

pub fn misconception_phrase(m: &Misconception) -> String {
    match m {
        Misconception::NoCarryAdd => "does not carry in addition".into(),
        Misconception::FailsMulWith { x } => format!("fails multiplications involving the number {x}"),
        Misconception::FailsAnyWith { x } => format!("fails any operation involving the number {x}"),
        Misconception::FailsOperandOver10 => "fails whenever an operand is greater than 10".into(),
        Misconception::RoundsDivDown => "always rounds division results down".into(),
        Misconception::FailsNegative => "fails with negative numbers".into(),
    }
}

fn parse_misconception(phrase: &str) -> Option<Misconception> {
    static PARAM: OnceLock<Regex> = OnceLock::new();
    let re = PARAM.get_or_init(|| {
        Regex::new(r"^fails (multiplications?|any operations?) (?:involving|with) (?:the number )?(-?\d+)$")
            .expect("valid regex")
    });
    let p = normalize(phrase);
    if let Some(c) = re.captures(&p) {
        let x = c[2].parse().ok()?;
        return Some(if c[1].starts_with("multiplication") {
            Misconception::FailsMulWith { x }
        } else {
            Misconception::FailsAnyWith { x }
        });
    }
    match p.as_str() {
        "does not carry in addition" | "does not carry" | "forgets to carry" | "drops carries in addition" => {
            Some(Misconception::NoCarryAdd)
        }
        "fails whenever an operand is greater than 10"
        | "fails whenever an operand > 10"
        | "fails whenever an operand >10"
        | "fails with operands greater than 10" => Some(Misconception::FailsOperandOver10),
        "always rounds division results down"
        | "rounds division results down"
        | "rounds division down"
        | "always rounds division down" => Some(Misconception::RoundsDivDown),
        "fails with negative numbers" | "fails with negative results" => Some(Misconception::FailsNegative),
        _ => None,
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn construct_list(ops: impl IntoIterator<Item = Operator>) -> String {
    let names: Vec<_> = ops.into_iter().map(|o| o.construct()).collect();
    if names.is_empty() {
        "none".into()
    } else {
        names.join(", ")
    }
}

/// Ground-truth summary of a profile in the canonical grammar.
pub fn render_canonical(profile: &StudentProfile) -> String {
    let not_mastered = Operator::ALL.into_iter().filter(|o| !profile.mastered.contains(o));
    let misconceptions = if profile.misconceptions.is_empty() {
        "none".to_string()
    } else {
        profile
            .misconceptions
            .iter()
            .map(misconception_phrase)
            .collect::<Vec<_>>()
            .join("; ")
    };
    let mut s = format!(
        "Mastered: {}. Not mastered: {}. Misconceptions: {}.",
        construct_list(profile.mastered.iter().copied()),
        construct_list(not_mastered),
        misconceptions
    );
    if profile.has_noise() {
        s.push_str(&format!(
            " Noise: slip rate {}, guess rate {}.",
            profile.slip_rate, profile.guess_rate
        ));
    }
    s
}

/// Summary restricted to the constructs that were actually observed.
pub fn render_partial(
    mastered: &BTreeSet<Operator>,
    not_mastered: &BTreeSet<Operator>,
    misconceptions: &[Misconception],
) -> String {
    let misc = if misconceptions.is_empty() {
        "none".to_string()
    } else {
        misconceptions.iter().map(misconception_phrase).collect::<Vec<_>>().join("; ")
    };
    format!(
        "Mastered: {}. Not mastered: {}. Misconceptions: {}.",
        construct_list(mastered.iter().copied()),
        construct_list(not_mastered.iter().copied()),
        misc
    )
}

/// One-sentence teacher statement about a construct's mastery.
pub fn teacher_sentence(profile: &StudentProfile, op: Operator) -> String {
    if profile.mastered.contains(&op) {
        format!(
            "The student has mastered {} except in the event of misconceptions.",
            op.construct()
        )
    } else {
        format!("The student has not mastered {}.", op.construct())
    }
}

/// Splits into (byte offset, sentence, terminated) triples.
fn sentences(text: &str) -> Vec<(usize, &str, bool)> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes = text.as_bytes();
    for (i, c) in text.char_indices() {
        let end = match c {
            '\n' => true,
            '.' => bytes.get(i + 1).is_none_or(|b| b.is_ascii_whitespace()),
            _ => false,
        };
        if end {
            out.push((start, &text[start..i], true));
            start = i + 1;
        }
    }
    if start < text.len() {
        out.push((start, &text[start..], false));
    }
    out
}

pub fn parse_summary(text: &str) -> Result<ParsedSummary> {
    let mut parsed = ParsedSummary::default();
    for (offset, sentence, terminated) in sentences(text) {
        let mut attempt = parsed.clone();
        match apply_sentence(&mut attempt, offset, sentence) {
            Ok(()) => parsed = attempt,
            Err(e) if terminated => return Err(e),
            Err(_) => {}
        }
    }
    Ok(parsed)
}

fn apply_sentence(parsed: &mut ParsedSummary, offset: usize, sentence: &str) -> Result<()> {
    let lead = sentence.len() - sentence.trim_start_matches(|c: char| c.is_whitespace() || "*-#>".contains(c)).len();
    let body = &sentence[lead..];
    let lower = body.to_lowercase();
    let label = |name: &str| -> Option<(usize, &str)> {
        let rest = lower.strip_prefix(name)?;
        let rest = rest.trim_start_matches('*');
        let rest = rest.strip_prefix(':')?.trim_start_matches('*');
        let skip = body.len() - rest.len();
        Some((offset + lead + skip, &body[skip..]))
    };
    if let Some((at, items)) = label("not mastered") {
        for (pos, item) in list_items(items, at) {
            let op = Operator::from_construct(item).ok_or_else(|| Error::Grammar {
                offset: pos,
                message: format!("unknown construct {item:?}"),
            })?;
            parsed.set_mastery(op, false);
        }
    } else if let Some((at, items)) = label("mastered") {
        for (pos, item) in list_items(items, at) {
            let op = Operator::from_construct(item).ok_or_else(|| Error::Grammar {
                offset: pos,
                message: format!("unknown construct {item:?}"),
            })?;
            parsed.set_mastery(op, true);
        }
    } else if let Some((at, items)) = label("misconceptions").or_else(|| label("misconception")) {
        for (pos, item) in list_items(items, at) {
            let m = parse_misconception(item).ok_or_else(|| Error::Grammar {
                offset: pos,
                message: format!("unknown misconception {item:?}"),
            })?;
            parsed.misconceptions.push(m);
        }
    } else if let Some((at, rest)) = label("noise") {
        let (slip, guess) = parse_noise(rest).ok_or_else(|| Error::Grammar {
            offset: at,
            message: format!("expected 'slip rate <p>, guess rate <p>', got {:?}", rest.trim()),
        })?;
        parsed.slip_rate = slip;
        parsed.guess_rate = guess;
    } else if let Some(rest) = lower.strip_prefix("the student has not mastered ") {
        if let Some(op) = Operator::from_construct(rest) {
            parsed.set_mastery(op, false);
        }
    } else if let Some(rest) = lower.strip_prefix("the student has mastered ") {
        let name = rest.split(" except").next().unwrap_or(rest);
        if let Some(op) = Operator::from_construct(name) {
            parsed.set_mastery(op, true);
        }
    }
    Ok(())
}

/// Items separated by `,` or `;`, with absolute offsets; `none` yields nothing.
fn list_items(items: &str, base: usize) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut pos = 0;
    for piece in items.split([',', ';']) {
        let trimmed = piece.trim();
        let lead = piece.len() - piece.trim_start().len();
        let item = trimmed.strip_prefix("and ").unwrap_or(trimmed).trim();
        if !item.is_empty() && !item.eq_ignore_ascii_case("none") {
            out.push((base + pos + lead, item));
        }
        pos += piece.len() + 1;
    }
    out
}

fn parse_noise(rest: &str) -> Option<(f64, f64)> {
    let lower = normalize(rest);
    let mut slip = None;
    let mut guess = None;
    for part in lower.split(',') {
        let part = part.trim();
        if let Some(v) = part.strip_prefix("slip rate ") {
            slip = v.trim().parse().ok();
        } else if let Some(v) = part.strip_prefix("guess rate ") {
            guess = v.trim().parse().ok();
        }
    }
    let valid = |p: f64| (0.0..=1.0).contains(&p);
    match (slip, guess) {
        (Some(s), Some(g)) if valid(s) && valid(g) => Some((s, g)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let p = StudentProfile {
            id: StudentId(4),
            mastered: [Operator::Add, Operator::Mul, Operator::Div].into_iter().collect(),
            misconceptions: vec![
                Misconception::NoCarryAdd,
                Misconception::FailsMulWith { x: 9 },
                Misconception::FailsOperandOver10,
                Misconception::FailsNegative,
            ],
            slip_rate: 0.0,
            guess_rate: 0.0,
        };
        let text = render_canonical(&p);
        assert_eq!(
            text,
            "Mastered: addition, multiplication, division. Not mastered: subtraction. \
             Misconceptions: does not carry in addition; fails multiplications involving the number 9; \
             fails whenever an operand is greater than 10; fails with negative numbers."
        );
        assert_eq!(parse_summary(&text).unwrap().to_profile(StudentId(4)), p);
    }

    #[test]
    fn short_aliases() {
        let s = parse_summary("Mastered: add, sub, mul, div. Not mastered: none. Misconceptions: none.").unwrap();
        assert_eq!(s.mastered.len(), 4);
        assert!(s.misconceptions.is_empty());
        let s = parse_summary("Misconceptions: rounds division down.").unwrap();
        assert_eq!(s.misconceptions, vec![Misconception::RoundsDivDown]);
    }

    #[test]
    fn noise_line() {
        let mut p = StudentProfile::expert(StudentId(0));
        p.slip_rate = 0.05;
        p.guess_rate = 0.05;
        let text = render_canonical(&p);
        assert!(text.ends_with("Noise: slip rate 0.05, guess rate 0.05."));
        let parsed = parse_summary(&text).unwrap();
        assert_eq!((parsed.slip_rate, parsed.guess_rate), (0.05, 0.05));
    }

    #[test]
    fn grammar_error_location() {
        let text = "Mastered: addition. Misconceptions: likes cheese.";
        match parse_summary(text) {
            Err(Error::Grammar { offset, .. }) => assert_eq!(&text[offset..offset + 5], "likes"),
            other => panic!("expected grammar error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_tail_is_dropped() {
        let s = parse_summary("Not mastered: division. Misconceptions: fails multiplications involving the").unwrap();
        assert!(s.not_mastered.contains(&Operator::Div));
        assert!(s.misconceptions.is_empty());
    }

    #[test]
    fn teacher_sentences_override() {
        let s = parse_summary(
            "Mastered: subtraction. The student has not mastered addition. \
             The student has mastered division except in the event of misconceptions.",
        )
        .unwrap();
        let p = s.to_profile(StudentId(0));
        assert!(!p.mastered.contains(&Operator::Add));
        assert!(p.mastered.contains(&Operator::Div));
        // unmentioned constructs default to mastered
        assert!(p.mastered.contains(&Operator::Mul));
    }

    #[test]
    fn prose_is_ignored() {
        let s = parse_summary("The student works hard. **Not mastered:** multiplication.\nOverall fine").unwrap();
        assert_eq!(s.not_mastered.iter().copied().collect::<Vec<_>>(), vec![Operator::Mul]);
        assert_eq!(parse_summary("").unwrap(), ParsedSummary::default());
    }
}
