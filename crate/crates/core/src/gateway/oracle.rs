//! Deterministic stand-in for a language model that understands the
//! canonical summary grammar.
//!
//! As a decoder it rebuilds a profile from the summary and replays the
//! simulator's answer policy. When the summary states noise rates, the
//! slip/guess draw is replayed from a stream keyed by the summary and the
//! question, so repeated calls agree.
//!
//! As an encoder it searches the profile space for the profile that best
//! explains the observed answers and writes it in the canonical grammar,
//! mentioning only constructs that were observed.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{count_tokens, Backend, BackendKind, CompletionRequest, CompletionResponse, GatewayError};
use crate::error::Result;
use crate::prompt::{classify, HistoryEntry, PromptKind};
use crate::sim::{parse_question_text, simulate_answer, Misconception, Operator, Question, QuestionId, StudentId};
use crate::summary::{parse_summary, render_partial};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OraclePrediction {
    pub correct: bool,
    pub answer: i64,
}

pub fn oracle_decode(summary: &str, question: &Question) -> Result<OraclePrediction> {
    let profile = parse_summary(summary)?.to_profile(StudentId(0));
    let mut rng = ChaCha8Rng::from_seed(replay_seed(summary, &question.text));
    let i = simulate_answer(&profile, question, &mut rng)?;
    Ok(OraclePrediction {
        correct: i.correct,
        answer: i.given_answer,
    })
}

fn replay_seed(summary: &str, question: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(summary.as_bytes());
    h.update([0u8]);
    h.update(question.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&h.finalize());
    seed
}

/// An observed arithmetic answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub op: Operator,
    pub lhs: i64,
    pub rhs: i64,
    pub given: i64,
}

impl Observation {
    pub fn from_entry(e: &HistoryEntry<'_>) -> Option<Observation> {
        let (op, lhs, rhs) = parse_question_text(e.question)?;
        Some(Observation {
            op,
            lhs,
            rhs,
            given: e.given_answer,
        })
    }
}

/// Every misconception set the simulator can produce, in pool order.
fn candidate_sets() -> Vec<Vec<Misconception>> {
    let xs = || std::iter::once(None).chain(Misconception::X_RANGE.map(Some));
    let mut out = Vec::new();
    for flags in 0u8..16 {
        for mul_x in xs() {
            for any_x in xs() {
                let mut set = Vec::new();
                if flags & 1 != 0 {
                    set.push(Misconception::NoCarryAdd);
                }
                if let Some(x) = mul_x {
                    set.push(Misconception::FailsMulWith { x });
                }
                if let Some(x) = any_x {
                    set.push(Misconception::FailsAnyWith { x });
                }
                if flags & 2 != 0 {
                    set.push(Misconception::FailsOperandOver10);
                }
                if flags & 4 != 0 {
                    set.push(Misconception::RoundsDivDown);
                }
                if flags & 8 != 0 {
                    set.push(Misconception::FailsNegative);
                }
                out.push(set);
            }
        }
    }
    out
}

/// Best-explaining partial profile: fewest mismatched answers, then fewest
/// misconceptions, then fewest unmastered constructs.
pub fn infer_profile(obs: &[Observation]) -> (BTreeSet<Operator>, BTreeSet<Operator>, Vec<Misconception>) {
    let observed: BTreeSet<Operator> = obs.iter().map(|o| o.op).collect();
    type Scored = ((usize, usize, usize), BTreeSet<Operator>, Vec<Misconception>);
    let mut best: Option<Scored> = None;
    for set in candidate_sets() {
        let mut miss_mastered = [0usize; 4];
        let mut miss_unmastered = [0usize; 4];
        for o in obs {
            let truth = o.op.apply(o.lhs, o.rhs);
            let as_mastered = set
                .iter()
                .find_map(|m| m.wrong_answer(o.op, o.lhs, o.rhs))
                .unwrap_or(truth);
            let k = o.op as usize;
            miss_mastered[k] += usize::from(as_mastered != o.given);
            miss_unmastered[k] += usize::from(truth + 1 != o.given);
        }
        let mut mismatches = 0;
        let mut not_mastered = BTreeSet::new();
        for &op in &observed {
            let k = op as usize;
            if miss_unmastered[k] < miss_mastered[k] {
                not_mastered.insert(op);
                mismatches += miss_unmastered[k];
            } else {
                mismatches += miss_mastered[k];
            }
        }
        let score = (mismatches, set.len(), not_mastered.len());
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, not_mastered, set));
        }
    }
    let (_, not_mastered, set) = best.expect("candidate space is nonempty");
    let mastered = observed.difference(&not_mastered).copied().collect();
    (mastered, not_mastered, set)
}

pub fn infer_summary(obs: &[Observation]) -> String {
    let (mastered, not_mastered, misconceptions) = infer_profile(obs);
    render_partial(&mastered, &not_mastered, &misconceptions)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OracleBackend;

impl Backend for OracleBackend {
    fn id(&self) -> String {
        "oracle".into()
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Oracle
    }

    fn complete(&self, req: &CompletionRequest) -> std::result::Result<CompletionResponse, GatewayError> {
        req.validate()?;
        let text = match classify(req) {
            PromptKind::Decoder { summary, question } => {
                let (op, lhs, rhs) = parse_question_text(question)
                    .ok_or_else(|| GatewayError::Oracle(format!("not an arithmetic question: {question:?}")))?;
                let q = Question::arithmetic(QuestionId(0), op, lhs, rhs);
                let p = oracle_decode(summary, &q).map_err(|e| GatewayError::Oracle(e.to_string()))?;
                if p.correct { "Yes" } else { "No" }.to_string()
            }
            PromptKind::Encoder { entries } => {
                let obs: Vec<Observation> = entries.iter().filter_map(Observation::from_entry).collect();
                infer_summary(&obs)
            }
            PromptKind::Direct => {
                return Err(GatewayError::Unsupported {
                    backend: self.id(),
                    what: "direct prompting needs a summary-free predictor".into(),
                })
            }
            PromptKind::Unknown => return Err(GatewayError::Oracle("unrecognized prompt template".into())),
        };
        Ok(CompletionResponse {
            token_count: count_tokens(&text),
            text,
            latency_ms: 0.0,
        })
    }
}
