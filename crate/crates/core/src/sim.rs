//! Synthetic arithmetic students with explicit misconceptions.
//!
//! Every student has a set of mastered operators and an ordered list of
//! misconceptions. Answers are produced by a deterministic policy, optionally
//! perturbed by slips and guesses drawn from a per-student random stream, so
//! generation is order-independent and can run in parallel.

use std::collections::BTreeSet;
use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StudentId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuestionId(pub u64);

impl fmt::Display for StudentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Display for QuestionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    Add,
    Sub,
    Mul,
    Div,
}

impl Operator {
    pub const ALL: [Operator; 4] = [Operator::Add, Operator::Sub, Operator::Mul, Operator::Div];

    /// Construct tag, also the name used in summaries.
    pub fn construct(self) -> &'static str {
        match self {
            Operator::Add => "addition",
            Operator::Sub => "subtraction",
            Operator::Mul => "multiplication",
            Operator::Div => "division",
        }
    }

    pub fn from_construct(name: &str) -> Option<Operator> {
        match name.trim().to_ascii_lowercase().as_str() {
            "addition" | "add" => Some(Operator::Add),
            "subtraction" | "sub" => Some(Operator::Sub),
            "multiplication" | "mul" => Some(Operator::Mul),
            "division" | "div" => Some(Operator::Div),
            _ => None,
        }
    }

    fn symbol(self) -> char {
        match self {
            Operator::Add => '+',
            Operator::Sub => '-',
            Operator::Mul => '×',
            Operator::Div => '÷',
        }
    }

    /// True result; division rounds half away from zero.
    pub fn apply(self, lhs: i64, rhs: i64) -> i64 {
        match self {
            Operator::Add => lhs + rhs,
            Operator::Sub => lhs - rhs,
            Operator::Mul => lhs * rhs,
            Operator::Div => div_round_half_away(lhs, rhs),
        }
    }
}

fn div_round_half_away(lhs: i64, rhs: i64) -> i64 {
    assert!(rhs != 0, "division by zero");
    let q = (2 * lhs.abs() + rhs.abs()) / (2 * rhs.abs());
    if (lhs < 0) != (rhs < 0) {
        -q
    } else {
        q
    }
}

/// Digit-wise sum with every carry dropped, e.g. 8 + 7 = 5, 15 + 9 = 14.
pub fn add_without_carry(lhs: i64, rhs: i64) -> i64 {
    debug_assert!(lhs >= 0 && rhs >= 0);
    let (mut a, mut b) = (lhs, rhs);
    let mut place = 1;
    let mut out = 0;
    while a > 0 || b > 0 {
        out += ((a % 10 + b % 10) % 10) * place;
        a /= 10;
        b /= 10;
        place *= 10;
    }
    out
}

/// Systematic error patterns. Declaration order is the precedence order used
/// when several misconceptions apply to the same question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Misconception {
    NoCarryAdd,
    FailsMulWith { x: i64 },
    FailsAnyWith { x: i64 },
    FailsOperandOver10,
    RoundsDivDown,
    FailsNegative,
}

impl Misconception {
    pub const POOL_SIZE: usize = 6;
    pub const X_RANGE: std::ops::RangeInclusive<i64> = 6..=9;

    fn pool_rank(&self) -> usize {
        match self {
            Misconception::NoCarryAdd => 0,
            Misconception::FailsMulWith { .. } => 1,
            Misconception::FailsAnyWith { .. } => 2,
            Misconception::FailsOperandOver10 => 3,
            Misconception::RoundsDivDown => 4,
            Misconception::FailsNegative => 5,
        }
    }

    fn from_rank(rank: usize, x: i64) -> Misconception {
        match rank {
            0 => Misconception::NoCarryAdd,
            1 => Misconception::FailsMulWith { x },
            2 => Misconception::FailsAnyWith { x },
            3 => Misconception::FailsOperandOver10,
            4 => Misconception::RoundsDivDown,
            _ => Misconception::FailsNegative,
        }
    }

    /// The answer this misconception forces, if it applies to the question
    /// and changes the outcome.
    pub fn wrong_answer(&self, op: Operator, lhs: i64, rhs: i64) -> Option<i64> {
        let truth = op.apply(lhs, rhs);
        let involves = |x: i64| lhs == x || rhs == x;
        let answer = match *self {
            Misconception::NoCarryAdd if op == Operator::Add && lhs >= 0 && rhs >= 0 => {
                add_without_carry(lhs, rhs)
            }
            Misconception::FailsMulWith { x } if op == Operator::Mul && involves(x) => truth + 1,
            Misconception::FailsAnyWith { x } if involves(x) => truth + 1,
            Misconception::FailsOperandOver10 if lhs > 10 || rhs > 10 => truth + 1,
            Misconception::RoundsDivDown if op == Operator::Div => lhs.div_euclid(rhs),
            Misconception::FailsNegative if truth < 0 => -truth,
            _ => return None,
        };
        (answer != truth).then_some(answer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentProfile {
    pub id: StudentId,
    pub mastered: BTreeSet<Operator>,
    pub misconceptions: Vec<Misconception>,
    #[serde(default)]
    pub slip_rate: f64,
    #[serde(default)]
    pub guess_rate: f64,
}

impl StudentProfile {
    /// Fully competent student with no misconceptions and no noise.
    pub fn expert(id: StudentId) -> Self {
        StudentProfile {
            id,
            mastered: Operator::ALL.into_iter().collect(),
            misconceptions: Vec::new(),
            slip_rate: 0.0,
            guess_rate: 0.0,
        }
    }

    /// Noise-free answer policy: unmastered operators are answered with
    /// `truth + 1`; otherwise the first applicable misconception in pool
    /// order decides; otherwise the answer is correct.
    pub fn deterministic_answer(&self, op: Operator, lhs: i64, rhs: i64) -> i64 {
        let truth = op.apply(lhs, rhs);
        if !self.mastered.contains(&op) {
            return truth + 1;
        }
        self.misconceptions
            .iter()
            .find_map(|m| m.wrong_answer(op, lhs, rhs))
            .unwrap_or(truth)
    }

    pub fn has_noise(&self) -> bool {
        self.slip_rate > 0.0 || self.guess_rate > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: QuestionId,
    pub text: String,
    pub construct: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op: Option<Operator>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lhs: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rhs: Option<i64>,
}

impl Question {
    pub fn arithmetic(id: QuestionId, op: Operator, lhs: i64, rhs: i64) -> Self {
        Question {
            id,
            text: render_question_text(op, lhs, rhs),
            construct: op.construct().to_string(),
            op: Some(op),
            lhs: Some(lhs),
            rhs: Some(rhs),
        }
    }

    pub fn operands(&self) -> Option<(Operator, i64, i64)> {
        Some((self.op?, self.lhs?, self.rhs?))
    }

    pub fn true_answer(&self) -> Option<i64> {
        self.operands().map(|(op, l, r)| op.apply(l, r))
    }
}

pub fn render_question_text(op: Operator, lhs: i64, rhs: i64) -> String {
    match op {
        Operator::Div => format!(
            "What is {lhs} {} {rhs}, rounded to the nearest integer?",
            op.symbol()
        ),
        _ => format!("What is {lhs} {} {rhs}?", op.symbol()),
    }
}

/// Inverse of [`render_question_text`].
pub fn parse_question_text(text: &str) -> Option<(Operator, i64, i64)> {
    let body = text.trim().strip_prefix("What is ")?;
    let body = body
        .strip_suffix(", rounded to the nearest integer?")
        .or_else(|| body.strip_suffix('?'))?;
    let mut parts = body.split(' ');
    let lhs = parts.next()?.parse().ok()?;
    let sym = parts.next()?;
    let rhs = parts.next()?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    let op = Operator::ALL
        .into_iter()
        .find(|o| sym.chars().eq(std::iter::once(o.symbol())))?;
    (op != Operator::Div || rhs != 0).then_some((op, lhs, rhs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub question_id: QuestionId,
    pub given_answer: i64,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub student_id: StudentId,
    /// Session index for logs split into several sessions; 0 for synthetic data.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub segment: u32,
    pub interactions: Vec<Interaction>,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_students: usize,
    pub n_questions: usize,
    pub per_student: usize,
    pub add_sub_range: (i64, i64),
    pub mul_div_range: (i64, i64),
    /// Operators questions are drawn from, uniformly.
    pub operators: Vec<Operator>,
    /// Weight of drawing k misconceptions, for k = 0, 1, ...
    pub misconception_count_weights: Vec<f64>,
    pub mastery_probability: f64,
    pub slip_rate: f64,
    pub guess_rate: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_students: 2000,
            n_questions: 5000,
            per_student: 210,
            add_sub_range: (0, 15),
            mul_div_range: (1, 10),
            operators: Operator::ALL.to_vec(),
            misconception_count_weights: vec![0.20, 0.35, 0.25, 0.15, 0.05],
            mastery_probability: 0.75,
            slip_rate: 0.0,
            guess_rate: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_students == 0 || self.n_questions == 0 || self.per_student == 0 {
            return bad("n_students, n_questions and per_student must be positive".into());
        }
        let (lo, hi) = self.add_sub_range;
        if !(0 <= lo && lo <= hi && hi <= 15) {
            return bad(format!("add_sub_range {lo}..={hi} must lie within 0..=15"));
        }
        let (lo, hi) = self.mul_div_range;
        if !(1 <= lo && lo <= hi && hi <= 10) {
            return bad(format!("mul_div_range {lo}..={hi} must lie within 1..=10"));
        }
        if self.operators.is_empty() {
            return bad("operators must not be empty".into());
        }
        let w = &self.misconception_count_weights;
        if w.is_empty() || w.len() > Misconception::POOL_SIZE + 1 {
            return bad(format!(
                "misconception_count_weights needs 1..={} entries",
                Misconception::POOL_SIZE + 1
            ));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return bad("misconception_count_weights must be non-negative with positive sum".into());
        }
        for (name, p) in [
            ("mastery_probability", self.mastery_probability),
            ("slip_rate", self.slip_rate),
            ("guess_rate", self.guess_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        Ok(())
    }
}

/// Independent random streams keyed by (seed, purpose, index).
#[derive(Clone, Copy)]
enum Stream {
    Bank = 1,
    Profile = 2,
    Sampling = 3,
    Noise = 4,
}

fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

/// Per-student random stream used for slip/guess noise.
pub fn noise_rng(seed: u64, student: StudentId) -> ChaCha8Rng {
    stream_rng(seed, Stream::Noise, student.0)
}

pub fn generate_profile(config: &SimConfig, student_index: usize) -> Result<StudentProfile> {
    config.validate()?;
    if student_index >= config.n_students {
        return Err(Error::InvalidInput(format!(
            "student index {student_index} out of range (n_students = {})",
            config.n_students
        )));
    }
    let counts = WeightedIndex::new(&config.misconception_count_weights)
        .map_err(|e| Error::Config(format!("misconception_count_weights: {e}")))?;
    Ok(sample_profile(config, &counts, student_index))
}

fn sample_profile(config: &SimConfig, counts: &WeightedIndex<f64>, idx: usize) -> StudentProfile {
    let mut rng = stream_rng(config.seed, Stream::Profile, idx as u64);
    let mastered = Operator::ALL
        .into_iter()
        .filter(|_| rng.random_bool(config.mastery_probability))
        .collect();
    let k = counts.sample(&mut rng).min(Misconception::POOL_SIZE);
    let mut ranks = rand::seq::index::sample(&mut rng, Misconception::POOL_SIZE, k).into_vec();
    ranks.sort_unstable();
    let misconceptions = ranks
        .into_iter()
        .map(|r| Misconception::from_rank(r, rng.random_range(Misconception::X_RANGE)))
        .collect::<Vec<_>>();
    debug_assert!(misconceptions.windows(2).all(|w| w[0].pool_rank() < w[1].pool_rank()));
    StudentProfile {
        id: StudentId(idx as u64),
        mastered,
        misconceptions,
        slip_rate: config.slip_rate,
        guess_rate: config.guess_rate,
    }
}

pub fn generate_question_bank(config: &SimConfig) -> Result<Vec<Question>> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, Stream::Bank, 0);
    Ok((0..config.n_questions)
        .map(|i| {
            let op = config.operators[rng.random_range(0..config.operators.len())];
            let (lo, hi) = match op {
                Operator::Add | Operator::Sub => config.add_sub_range,
                Operator::Mul | Operator::Div => config.mul_div_range,
            };
            let lhs = rng.random_range(lo..=hi);
            let rhs = rng.random_range(lo..=hi);
            Question::arithmetic(QuestionId(i as u64), op, lhs, rhs)
        })
        .collect())
}

/// Answers one question. Non-arithmetic questions cannot be simulated.
///
/// After the deterministic policy, a correct answer slips to `truth + 1`
/// with probability `slip_rate`, and a wrong one is replaced by the truth
/// with probability `guess_rate`. The stream is only consumed when the
/// profile has noise.
pub fn simulate_answer<R: Rng + ?Sized>(
    profile: &StudentProfile,
    question: &Question,
    rng: &mut R,
) -> Result<Interaction> {
    let (op, lhs, rhs) = question.operands().ok_or_else(|| {
        Error::InvalidInput(format!("question {} is not an arithmetic item", question.id))
    })?;
    let truth = op.apply(lhs, rhs);
    let mut given = profile.deterministic_answer(op, lhs, rhs);
    if profile.has_noise() {
        let u: f64 = rng.random();
        if given == truth && u < profile.slip_rate {
            given = truth + 1;
        } else if given != truth && u < profile.guess_rate {
            given = truth;
        }
    }
    Ok(Interaction {
        question_id: question.id,
        given_answer: given,
        correct: given == truth,
        timestamp: None,
        response_time: None,
    })
}

pub fn generate_dataset(config: &SimConfig) -> Result<Dataset> {
    generate_dataset_with(config, Execution::default())
}

pub fn generate_dataset_with(config: &SimConfig, exec: Execution) -> Result<Dataset> {
    config.validate()?;
    if config.per_student > config.n_questions {
        return Err(Error::Config(format!(
            "per_student ({}) exceeds n_questions ({})",
            config.per_student, config.n_questions
        )));
    }
    let bank = generate_question_bank(config)?;
    let counts = WeightedIndex::new(&config.misconception_count_weights)
        .map_err(|e| Error::Config(format!("misconception_count_weights: {e}")))?;
    let profiles = par::map_range(exec, config.n_students, |i| sample_profile(config, &counts, i));
    let trajectories = par::map(exec, &profiles, |p| {
        let mut pick = stream_rng(config.seed, Stream::Sampling, p.id.0);
        let mut noise = noise_rng(config.seed, p.id);
        let interactions = rand::seq::index::sample(&mut pick, bank.len(), config.per_student)
            .into_iter()
            .map(|qi| simulate_answer(p, &bank[qi], &mut noise).expect("bank items are arithmetic"))
            .collect();
        Trajectory {
            student_id: p.id,
            segment: 0,
            interactions,
        }
    });
    Ok(Dataset {
        bank,
        profiles,
        trajectories,
    })
}
