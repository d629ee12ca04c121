//! Prompt templates for the encoder, the decoder and direct prompting.
//!
//! Templates are frozen by golden files under `tests/golden/`. The oracle
//! backend reads prompts back with the `parse_*` functions here, so the two
//! sides must change together.

use crate::gateway::CompletionRequest;
use crate::sim::{Interaction, Question};

pub const ENCODER_SYSTEM: &str = "You are an experienced mathematics teacher. \
You write short, accurate summaries of what a student knows, based on their answers to questions.";

pub const DECODER_SYSTEM: &str = "You predict whether a student will answer a question correctly. \
You know the student only through a written summary of their knowledge.";

pub const DIRECT_SYSTEM: &str = "You predict whether a student will answer a question correctly, \
based on the student's previous answers.";

const HISTORY_INTRO: &str = "Here are questions a student answered, with the student's answers:";
const SUMMARY_OPEN: &str = "<summary>\n";
const SUMMARY_CLOSE: &str = "\n</summary>\n\nQuestion: ";
const YES_NO: &str = "Answer with one word: Yes or No.";
pub const COT_MARKER: &str = "SUMMARY:";

/// A history entry as it appears in encoder and direct prompts.
pub fn render_interaction(question: &Question, interaction: &Interaction) -> String {
    format!(
        "Question: {} Answer: {} ({})",
        question.text,
        interaction.given_answer,
        if interaction.correct { "correct" } else { "incorrect" }
    )
}

fn history_block(history: &[(&Question, &Interaction)]) -> String {
    let mut s = format!("{HISTORY_INTRO}\n\n");
    for (i, (q, a)) in history.iter().enumerate() {
        s.push_str(&format!("{}. {}\n", i + 1, render_interaction(q, a)));
    }
    s
}

pub fn encoder_request(
    history: &[(&Question, &Interaction)],
    budget: usize,
    chain_of_thought: bool,
    steering_text: Option<&str>,
) -> CompletionRequest {
    let mut user = history_block(history);
    user.push_str(&format!(
        "\nWrite a summary of this student's knowledge state in at most {budget} tokens. \
Use three sections: \"Mastered:\" listing the constructs the student has mastered, \
\"Not mastered:\" listing the constructs the student has not mastered, and \
\"Misconceptions:\" listing any systematic errors the student makes."
    ));
    if chain_of_thought {
        user.push_str(&format!(
            "\nThink step by step about the student's errors first. Then write the final summary \
after a line containing only \"{COT_MARKER}\"."
        ));
    }
    if let Some(steer) = steering_text.filter(|s| !s.is_empty()) {
        user.push('\n');
        user.push_str(steer);
    }
    CompletionRequest {
        system_text: ENCODER_SYSTEM.into(),
        user_text: user,
        max_new_tokens: if chain_of_thought { budget.saturating_mul(4) } else { budget },
        temperature: 0.0,
        stop: Vec::new(),
        seed: None,
    }
}

pub fn decoder_request(summary: &str, question: &Question) -> CompletionRequest {
    CompletionRequest {
        system_text: DECODER_SYSTEM.into(),
        user_text: format!(
            "Summary of the student's knowledge:\n{SUMMARY_OPEN}{summary}{SUMMARY_CLOSE}{}\n\n\
Will the student answer this question correctly? {YES_NO}",
            question.text
        ),
        max_new_tokens: 4,
        temperature: 0.0,
        stop: Vec::new(),
        seed: None,
    }
}

pub fn direct_request(history: &[(&Question, &Interaction)], question: &Question) -> CompletionRequest {
    let mut user = history_block(history);
    user.push_str(&format!(
        "\nNew question: {}\n\nWill the student answer this new question correctly? {YES_NO}",
        question.text
    ));
    CompletionRequest {
        system_text: DIRECT_SYSTEM.into(),
        user_text: user,
        max_new_tokens: 4,
        temperature: 0.0,
        stop: Vec::new(),
        seed: None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PromptKind<'a> {
    Encoder { entries: Vec<HistoryEntry<'a>> },
    Decoder { summary: &'a str, question: &'a str },
    Direct,
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry<'a> {
    pub question: &'a str,
    pub given_answer: i64,
    pub correct: bool,
}

/// Recognizes which template produced `req`.
pub fn classify(req: &CompletionRequest) -> PromptKind<'_> {
    match req.system_text.as_str() {
        ENCODER_SYSTEM => PromptKind::Encoder {
            entries: parse_history(&req.user_text),
        },
        DECODER_SYSTEM => match parse_decoder(&req.user_text) {
            Some((summary, question)) => PromptKind::Decoder { summary, question },
            None => PromptKind::Unknown,
        },
        DIRECT_SYSTEM => PromptKind::Direct,
        _ => PromptKind::Unknown,
    }
}

fn parse_decoder(user: &str) -> Option<(&str, &str)> {
    let start = user.find(SUMMARY_OPEN)? + SUMMARY_OPEN.len();
    let close = user.rfind(SUMMARY_CLOSE)?;
    if close < start {
        return None;
    }
    let question = user[close + SUMMARY_CLOSE.len()..].lines().next()?;
    Some((&user[start..close], question))
}

fn parse_history(user: &str) -> Vec<HistoryEntry<'_>> {
    user.lines()
        .filter_map(|line| {
            let (num, rest) = line.split_once(". Question: ")?;
            num.parse::<usize>().ok()?;
            let (question, answer) = rest.rsplit_once(" Answer: ")?;
            let (value, verdict) = answer.split_once(' ')?;
            let correct = match verdict {
                "(correct)" => true,
                "(incorrect)" => false,
                _ => return None,
            };
            Some(HistoryEntry {
                question,
                given_answer: value.parse().ok()?,
                correct,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Operator, QuestionId};

    fn qa(l: i64, r: i64, given: i64) -> (Question, Interaction) {
        let q = Question::arithmetic(QuestionId(l as u64), Operator::Add, l, r);
        let i = Interaction {
            question_id: q.id,
            given_answer: given,
            correct: given == l + r,
            timestamp: None,
            response_time: None,
        };
        (q, i)
    }

    #[test]
    fn encoder_prompt_round_trips_through_classify() {
        let items = [qa(8, 7, 5), qa(2, 2, 4)];
        let hist: Vec<_> = items.iter().map(|(q, i)| (q, i)).collect();
        let req = encoder_request(&hist, 128, false, Some("Pay attention to misconceptions."));
        assert!(req.user_text.contains("128"));
        assert!(req.user_text.ends_with("Pay attention to misconceptions."));
        match classify(&req) {
            PromptKind::Encoder { entries } => {
                assert_eq!(entries.len(), 2);
                assert_eq!(entries[0].question, "What is 8 + 7?");
                assert_eq!((entries[0].given_answer, entries[0].correct), (5, false));
                assert!(entries[1].correct);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn decoder_prompt_round_trips_through_classify() {
        let (q, _) = qa(3, 4, 7);
        for summary in ["Mastered: addition.", "", "multi\nline"] {
            let req = decoder_request(summary, &q);
            assert_eq!(
                classify(&req),
                PromptKind::Decoder {
                    summary,
                    question: "What is 3 + 4?"
                }
            );
        }
    }
}
