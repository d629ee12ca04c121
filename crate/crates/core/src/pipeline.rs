//! Split sampling, encoding into a bottleneck, decoding from it, and the
//! direct-prompting baseline.

use std::collections::{HashMap, HashSet};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{count_tokens, truncate_to_budget, Backend, BackendKind, CompletionRequest};
use crate::prompt::{self, COT_MARKER};
use crate::sim::{Interaction, Question, QuestionId, StudentId, StudentProfile, Trajectory};
use crate::summary::render_canonical;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Encoder items drawn at random; targets drawn from the rest.
    #[default]
    Random,
    /// Targets are the final interactions; the encoder sees the ones before.
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub n_enc: usize,
    pub n_recon: usize,
    pub n_pred: usize,
    pub mode: SplitMode,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            n_enc: 50,
            n_recon: 0,
            n_pred: 4,
            mode: SplitMode::Random,
        }
    }
}

impl SplitConfig {
    /// Defaults for filtered real logs: 30 encoder items, last four held out.
    pub fn logs() -> Self {
        SplitConfig {
            n_enc: 30,
            mode: SplitMode::Last,
            ..SplitConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_enc == 0 {
            return Err(Error::Config("n_enc must be at least 1".into()));
        }
        if self.n_recon > self.n_enc {
            return Err(Error::Config(format!(
                "n_recon ({}) exceeds n_enc ({})",
                self.n_recon, self.n_enc
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub student_id: StudentId,
    pub x_enc: Vec<Interaction>,
    /// Reconstruction targets, a subset of `x_enc`.
    pub x_s: Vec<Interaction>,
    /// Held-out prediction targets; their questions never occur in `x_enc`.
    pub y_s: Vec<Interaction>,
}

impl Split {
    pub fn y_questions(&self) -> Vec<QuestionId> {
        self.y_s.iter().map(|i| i.question_id).collect()
    }
}

fn split_rng(seed: u64, t: &Trajectory) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5B11_7000_0000);
    rng.set_stream((t.student_id.0 << 16) | u64::from(t.segment));
    rng
}

pub fn sample_split(trajectory: &Trajectory, config: &SplitConfig, seed: u64) -> Result<Split> {
    config.validate()?;
    let n = trajectory.interactions.len();
    let needed = config.n_enc + config.n_pred;
    let too_short = || Error::TrajectoryTooShort {
        student: trajectory.student_id.0,
        needed,
        available: n,
    };
    if n < needed {
        return Err(too_short());
    }
    let mut rng = split_rng(seed, trajectory);
    let items = &trajectory.interactions;
    let (enc_idx, pred_idx) = match config.mode {
        SplitMode::Random => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut enc: Vec<usize> = order[..config.n_enc].to_vec();
            enc.sort_unstable();
            let seen: HashSet<QuestionId> = enc.iter().map(|&i| items[i].question_id).collect();
            let mut taken = HashSet::new();
            let pred: Vec<usize> = order[config.n_enc..]
                .iter()
                .copied()
                .filter(|&i| !seen.contains(&items[i].question_id) && taken.insert(items[i].question_id))
                .take(config.n_pred)
                .collect();
            (enc, pred)
        }
        SplitMode::Last => {
            let pred: Vec<usize> = (n - config.n_pred..n).collect();
            let held: HashSet<QuestionId> = pred.iter().map(|&i| items[i].question_id).collect();
            let mut enc: Vec<usize> = (0..n - config.n_pred)
                .rev()
                .filter(|&i| !held.contains(&items[i].question_id))
                .take(config.n_enc)
                .collect();
            enc.reverse();
            (enc, pred)
        }
    };
    if enc_idx.len() < config.n_enc || pred_idx.len() < config.n_pred {
        return Err(too_short());
    }
    let mut recon: Vec<usize> = rand::seq::index::sample(&mut rng, config.n_enc, config.n_recon).into_vec();
    recon.sort_unstable();
    Ok(Split {
        student_id: trajectory.student_id,
        x_s: recon.iter().map(|&k| items[enc_idx[k]].clone()).collect(),
        x_enc: enc_idx.iter().map(|&i| items[i].clone()).collect(),
        y_s: pred_idx.iter().map(|&i| items[i].clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bottleneck {
    pub student_id: StudentId,
    pub budget: usize,
    pub text: String,
    pub token_count: usize,
    pub encoder_id: String,
    pub chain_of_thought: bool,
    /// Completion before marker extraction and truncation.
    pub raw_text: String,
}

impl Bottleneck {
    /// Applies the post-hoc budget: keeps the longest token prefix that fits.
    pub fn from_completion(
        student_id: StudentId,
        raw: String,
        budget: usize,
        encoder_id: String,
        chain_of_thought: bool,
    ) -> Self {
        let body = if chain_of_thought {
            raw.rfind(COT_MARKER).map_or(raw.as_str(), |i| &raw[i + COT_MARKER.len()..])
        } else {
            raw.as_str()
        };
        let text = truncate_to_budget(body.trim(), budget).trim_end().to_string();
        Bottleneck {
            student_id,
            budget,
            token_count: count_tokens(&text),
            text,
            encoder_id,
            chain_of_thought,
            raw_text: raw,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodeOptions {
    pub chain_of_thought: bool,
    pub steering_text: Option<String>,
}

pub type BankIndex<'a> = HashMap<QuestionId, &'a Question>;

pub fn history<'a>(
    bank: &BankIndex<'a>,
    interactions: &'a [Interaction],
) -> Result<Vec<(&'a Question, &'a Interaction)>> {
    interactions
        .iter()
        .map(|i| {
            bank.get(&i.question_id)
                .map(|q| (*q, i))
                .ok_or(Error::UnknownQuestion(i.question_id.0))
        })
        .collect()
}

pub fn encoder_request(bank: &BankIndex<'_>, split: &Split, budget: usize, opts: &EncodeOptions) -> Result<CompletionRequest> {
    if budget == 0 {
        return Err(Error::Config("bottleneck budget must be at least 1 token".into()));
    }
    let hist = history(bank, &split.x_enc)?;
    Ok(prompt::encoder_request(
        &hist,
        budget,
        opts.chain_of_thought,
        opts.steering_text.as_deref(),
    ))
}

pub fn encode(
    backend: &dyn Backend,
    bank: &BankIndex<'_>,
    split: &Split,
    budget: usize,
    opts: &EncodeOptions,
) -> Result<Bottleneck> {
    let req = encoder_request(bank, split, budget, opts)?;
    let resp = backend.complete(&req)?;
    Ok(Bottleneck::from_completion(
        split.student_id,
        resp.text,
        budget,
        backend.id(),
        opts.chain_of_thought,
    ))
}

/// Test hook: the canonical summary of the true profile, budget applied.
pub fn encode_ground_truth(profile: &StudentProfile, budget: usize) -> Bottleneck {
    Bottleneck::from_completion(profile.id, render_canonical(profile), budget, "ground-truth".into(), false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Yes,
    No,
    /// Unparseable after one retry; scored as incorrect.
    Abstain,
}

impl Verdict {
    pub fn predicts_correct(self) -> Option<bool> {
        match self {
            Verdict::Yes => Some(true),
            Verdict::No => Some(false),
            Verdict::Abstain => None,
        }
    }
}

/// First standalone "yes" or "no", case-insensitive.
pub fn parse_yes_no(text: &str) -> Option<Verdict> {
    static WORD: OnceLock<Regex> = OnceLock::new();
    let re = WORD.get_or_init(|| Regex::new(r"(?i)\b(yes|no)\b").expect("valid regex"));
    let m = re.find(text)?;
    Some(if m.as_str().eq_ignore_ascii_case("yes") {
        Verdict::Yes
    } else {
        Verdict::No
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: QuestionId,
    pub verdict: Verdict,
    /// Raw completion texts, one per attempt.
    pub raw: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub predictions: Vec<Prediction>,
}

impl PredictionSet {
    pub fn question_ids(&self) -> Vec<QuestionId> {
        self.predictions.iter().map(|p| p.question_id).collect()
    }
}

fn predict_one(backend: &dyn Backend, question: &Question, req: &CompletionRequest) -> Result<Prediction> {
    let mut raw = Vec::with_capacity(2);
    for _ in 0..2 {
        let text = backend.complete(req)?.text;
        let verdict = parse_yes_no(&text);
        raw.push(text);
        if let Some(verdict) = verdict {
            return Ok(Prediction {
                question_id: question.id,
                verdict,
                raw,
            });
        }
    }
    Ok(Prediction {
        question_id: question.id,
        verdict: Verdict::Abstain,
        raw,
    })
}

/// One independent decoder call per question; the summary is the only
/// student information in each prompt.
pub fn decode(backend: &dyn Backend, summary: &str, questions: &[&Question]) -> Result<PredictionSet> {
    let predictions = questions
        .iter()
        .map(|q| predict_one(backend, q, &prompt::decoder_request(summary, q)))
        .collect::<Result<_>>()?;
    Ok(PredictionSet { predictions })
}

/// Baseline without a bottleneck: each prompt carries the whole history.
pub fn direct_predict(
    backend: &dyn Backend,
    bank: &BankIndex<'_>,
    x_enc: &[Interaction],
    questions: &[&Question],
) -> Result<PredictionSet> {
    if backend.kind() == BackendKind::Oracle {
        return Err(Error::Unsupported(
            "the oracle backend decodes summaries and cannot answer direct prompts".into(),
        ));
    }
    let hist = history(bank, x_enc)?;
    let predictions = questions
        .iter()
        .map(|q| predict_one(backend, q, &prompt::direct_request(&hist, q)))
        .collect::<Result<_>>()?;
    Ok(PredictionSet { predictions })
}

/// Rendered encoder-side interaction lines found in a decoder prompt.
pub fn bottleneck_leaks(decoder_prompt: &CompletionRequest, encoder_history: &[(&Question, &Interaction)]) -> Vec<String> {
    encoder_history
        .iter()
        .map(|(q, i)| prompt::render_interaction(q, i))
        .filter(|line| decoder_prompt.user_text.contains(line.as_str()) || decoder_prompt.system_text.contains(line.as_str()))
        .collect()
}
