//! Bayesian Knowledge Tracing: a two-state hidden Markov model per skill.
//!
//! State 1 is "mastered". Each step emits a correct answer with probability
//! `1 − p_slip` when mastered and `p_guess` otherwise, then an unmastered
//! skill becomes mastered with probability `p_learn`. Mastery is never lost.

use std::collections::BTreeMap;
use std::ops::Add;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::par::{self, Execution};
use crate::sim::{Interaction, Question, QuestionId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BktParams {
    pub p_init: f64,
    pub p_learn: f64,
    pub p_guess: f64,
    pub p_slip: f64,
}

impl Default for BktParams {
    fn default() -> Self {
        BktParams {
            p_init: 0.5,
            p_learn: 0.1,
            p_guess: 0.2,
            p_slip: 0.1,
        }
    }
}

/// Guess and slip are kept this far below summing to one.
const IDENTIFIABILITY_MARGIN: f64 = 1e-6;

impl BktParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.p_init, self.p_learn, self.p_guess, self.p_slip];
        if all.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput(format!("BKT parameters must lie in [0, 1]: {self:?}")));
        }
        Ok(())
    }

    /// Projects onto `p_guess + p_slip < 1`, leaving valid parameters alone.
    fn clamp_identifiable(mut self) -> Self {
        let excess = self.p_guess + self.p_slip - (1.0 - IDENTIFIABILITY_MARGIN);
        if excess > 0.0 {
            self.p_guess = (self.p_guess - excess / 2.0).max(0.0);
            self.p_slip = (self.p_slip - excess / 2.0).max(0.0);
        }
        self
    }

    fn emission(&self, mastered: bool, correct: bool) -> f64 {
        match (mastered, correct) {
            (true, true) => 1.0 - self.p_slip,
            (true, false) => self.p_slip,
            (false, true) => self.p_guess,
            (false, false) => 1.0 - self.p_guess,
        }
    }
}

pub fn predict_correct_prob(p_mastery: f64, params: &BktParams) -> f64 {
    p_mastery * (1.0 - params.p_slip) + (1.0 - p_mastery) * params.p_guess
}

/// Bayes step on one observation followed by the learning transition.
pub fn posterior_update(p_mastery: f64, observed_correct: bool, params: &BktParams) -> Result<f64> {
    let on_mastered = p_mastery * params.emission(true, observed_correct);
    let evidence = on_mastered + (1.0 - p_mastery) * params.emission(false, observed_correct);
    if evidence <= 0.0 {
        return Err(Error::Degenerate(format!(
            "observation {observed_correct} has zero probability at mastery {p_mastery} under {params:?}"
        )));
    }
    let post = on_mastered / evidence;
    Ok(post + (1.0 - post) * params.p_learn)
}

pub fn sequence_log_likelihood(seq: &[bool], params: &BktParams) -> Result<f64> {
    params.validate()?;
    let mut p = params.p_init;
    let mut ll = 0.0;
    for &obs in seq {
        let pc = predict_correct_prob(p, params);
        let po = if obs { pc } else { 1.0 - pc };
        if po <= 0.0 {
            return Err(Error::Degenerate(format!(
                "sequence has zero likelihood under {params:?}"
            )));
        }
        ll += po.ln();
        p = posterior_update(p, obs, params)?;
    }
    Ok(ll)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillSequence {
    pub skill: String,
    pub observations: Vec<bool>,
}

/// Expected sufficient statistics of one E-step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Stats {
    init_mastered: f64,
    sequences: f64,
    learn: f64,
    learn_opportunities: f64,
    guess: f64,
    unmastered: f64,
    slip: f64,
    mastered: f64,
    log_likelihood: f64,
    observations: f64,
}

impl Add for Stats {
    type Output = Stats;
    fn add(self, o: Stats) -> Stats {
        Stats {
            init_mastered: self.init_mastered + o.init_mastered,
            sequences: self.sequences + o.sequences,
            learn: self.learn + o.learn,
            learn_opportunities: self.learn_opportunities + o.learn_opportunities,
            guess: self.guess + o.guess,
            unmastered: self.unmastered + o.unmastered,
            slip: self.slip + o.slip,
            mastered: self.mastered + o.mastered,
            log_likelihood: self.log_likelihood + o.log_likelihood,
            observations: self.observations + o.observations,
        }
    }
}

/// Scaled forward-backward over one sequence.
fn e_step(seq: &[bool], params: &BktParams) -> Result<Stats> {
    let n = seq.len();
    if n == 0 {
        return Ok(Stats::default());
    }
    let trans = [[1.0 - params.p_learn, params.p_learn], [0.0, 1.0]];
    let emit = |s: usize, t: usize| params.emission(s == 1, seq[t]);
    let mut alpha = vec![[0.0f64; 2]; n];
    let mut scale = vec![0.0f64; n];
    let prior = [1.0 - params.p_init, params.p_init];
    for t in 0..n {
        for s in 0..2 {
            let pred = if t == 0 {
                prior[s]
            } else {
                alpha[t - 1][0] * trans[0][s] + alpha[t - 1][1] * trans[1][s]
            };
            alpha[t][s] = pred * emit(s, t);
        }
        scale[t] = alpha[t][0] + alpha[t][1];
        if scale[t] <= 0.0 {
            return Err(Error::Degenerate(format!("zero-likelihood sequence under {params:?}")));
        }
        alpha[t][0] /= scale[t];
        alpha[t][1] /= scale[t];
    }
    let mut beta = vec![[1.0f64; 2]; n];
    for t in (0..n - 1).rev() {
        for s in 0..2 {
            beta[t][s] = (0..2)
                .map(|u| trans[s][u] * emit(u, t + 1) * beta[t + 1][u])
                .sum::<f64>()
                / scale[t + 1];
        }
    }
    let mut st = Stats {
        sequences: 1.0,
        observations: n as f64,
        log_likelihood: scale.iter().map(|c| c.ln()).sum(),
        ..Stats::default()
    };
    for t in 0..n {
        let gamma = [alpha[t][0] * beta[t][0], alpha[t][1] * beta[t][1]];
        let z = gamma[0] + gamma[1];
        let (g0, g1) = (gamma[0] / z, gamma[1] / z);
        if t == 0 {
            st.init_mastered = g1;
        }
        st.unmastered += g0;
        st.mastered += g1;
        if seq[t] {
            st.guess += g0;
        } else {
            st.slip += g1;
        }
        if t + 1 < n {
            // P(unmastered at t, mastered at t+1 | data)
            let xi = alpha[t][0] * trans[0][1] * emit(1, t + 1) * beta[t + 1][1] / scale[t + 1];
            st.learn += xi;
            st.learn_opportunities += g0;
        }
    }
    Ok(st)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmFit {
    pub params: BktParams,
    /// Log-likelihood of the parameters entering each iteration, plus the
    /// final parameters.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Expectation-maximisation. Stops when the log-likelihood gain per
/// observation falls below `tol`, or after `max_iters` iterations.
pub fn fit_em(sequences: &[Vec<bool>], init: BktParams, max_iters: usize, tol: f64) -> Result<EmFit> {
    fit_em_with(sequences, init, max_iters, tol, Execution::default())
}

pub fn fit_em_with(
    sequences: &[Vec<bool>],
    init: BktParams,
    max_iters: usize,
    tol: f64,
    exec: Execution,
) -> Result<EmFit> {
    init.validate()?;
    if sequences.iter().all(|s| s.is_empty()) {
        return Err(Error::InvalidInput("EM needs at least one nonempty sequence".into()));
    }
    let stats = |p: &BktParams| -> Result<Stats> {
        par::map_reduce(
            exec,
            sequences.len(),
            || Ok(Stats::default()),
            |i| e_step(&sequences[i], p),
            |a: Result<Stats>, b: Result<Stats>| Ok(a? + b?),
        )
    };
    let mut params = init.clamp_identifiable();
    let mut st = stats(&params)?;
    let mut lls = vec![st.log_likelihood];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let ratio = |num: f64, den: f64, old: f64| if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { old };
        params = BktParams {
            p_init: ratio(st.init_mastered, st.sequences, params.p_init),
            p_learn: ratio(st.learn, st.learn_opportunities, params.p_learn),
            p_guess: ratio(st.guess, st.unmastered, params.p_guess),
            p_slip: ratio(st.slip, st.mastered, params.p_slip),
        }
        .clamp_identifiable();
        st = stats(&params)?;
        let gain = st.log_likelihood - lls.last().copied().unwrap_or(f64::NEG_INFINITY);
        lls.push(st.log_likelihood);
        if gain / st.observations < tol {
            converged = true;
            break;
        }
    }
    Ok(EmFit {
        params,
        log_likelihoods: lls,
        iterations,
        converged,
    })
}

/// Skill of a question: its operator's construct, else its construct tag.
pub fn skill_of(q: &Question) -> String {
    q.op.map_or_else(|| q.construct.clone(), |op| op.construct().to_string())
}

pub fn skill_sequences(
    interactions: &[Interaction],
    bank: &std::collections::HashMap<QuestionId, &Question>,
) -> Result<BTreeMap<String, Vec<bool>>> {
    let mut out: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for i in interactions {
        let q = bank.get(&i.question_id).ok_or(Error::UnknownQuestion(i.question_id.0))?;
        out.entry(skill_of(q)).or_default().push(i.correct);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillFit {
    pub skill: String,
    pub params: BktParams,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BktConfig {
    pub n_test_students: usize,
    pub n_last: usize,
    pub threshold: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub init: BktParams,
}

impl Default for BktConfig {
    fn default() -> Self {
        BktConfig {
            n_test_students: 200,
            n_last: 4,
            threshold: 0.5,
            max_iters: 200,
            tol: 1e-7,
            init: BktParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BktReport {
    pub fits: Vec<SkillFit>,
    pub student_accuracies: Vec<(crate::sim::StudentId, f64)>,
    pub mean_accuracy: f64,
}

/// Fits one parameter set per skill on the training students, then scores
/// each test student's last `n_last` answers: predict, compare at
/// `threshold`, then update on the observed answer.
pub fn fit_and_evaluate(dataset: &Dataset, config: &BktConfig, exec: Execution) -> Result<BktReport> {
    let n = dataset.trajectories.len();
    if config.n_test_students == 0 || config.n_test_students >= n {
        return Err(Error::Config(format!(
            "n_test_students must be in 1..{n}, got {}",
            config.n_test_students
        )));
    }
    let bank = dataset.bank_index();
    let (train, test) = dataset.trajectories.split_at(n - config.n_test_students);
    let mut per_skill: BTreeMap<String, Vec<Vec<bool>>> = BTreeMap::new();
    for t in train {
        for (skill, seq) in skill_sequences(&t.interactions, &bank)? {
            per_skill.entry(skill).or_default().push(seq);
        }
    }
    let skills: Vec<(String, Vec<Vec<bool>>)> = per_skill.into_iter().collect();
    let fits: Vec<SkillFit> = par::map(exec, &skills, |(skill, seqs)| {
        let fit = fit_em_with(seqs, config.init, config.max_iters, config.tol, Execution::Sequential)?;
        Ok(SkillFit {
            skill: skill.clone(),
            params: fit.params,
            log_likelihood: *fit.log_likelihoods.last().expect("at least one entry"),
            iterations: fit.iterations,
            converged: fit.converged,
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let by_skill: BTreeMap<&str, &BktParams> = fits.iter().map(|f| (f.skill.as_str(), &f.params)).collect();

    let student_accuracies: Vec<(crate::sim::StudentId, f64)> = test
        .iter()
        .map(|t| {
            if t.interactions.len() < config.n_last {
                return Err(Error::TrajectoryTooShort {
                    student: t.student_id.0,
                    needed: config.n_last,
                    available: t.interactions.len(),
                });
            }
            let cut = t.interactions.len() - config.n_last;
            let mut mastery: BTreeMap<String, f64> = BTreeMap::new();
            let mut hits = 0usize;
            for (k, i) in t.interactions.iter().enumerate() {
                let skill = skill_of(bank.get(&i.question_id).ok_or(Error::UnknownQuestion(i.question_id.0))?);
                let default = BktParams::default();
                let params = by_skill.get(skill.as_str()).copied().unwrap_or(&default);
                let p = mastery.entry(skill).or_insert(params.p_init);
                if k >= cut {
                    let predicted = predict_correct_prob(*p, params) >= config.threshold;
                    hits += usize::from(predicted == i.correct);
                }
                *p = posterior_update(*p, i.correct, params).unwrap_or(*p);
            }
            Ok((t.student_id, hits as f64 / config.n_last.max(1) as f64))
        })
        .collect::<Result<_>>()?;
    let mean_accuracy = student_accuracies.iter().map(|(_, a)| a).sum::<f64>() / student_accuracies.len() as f64;
    Ok(BktReport {
        fits,
        student_accuracies,
        mean_accuracy,
    })
}

pub fn save_fits(fits: &[SkillFit], path: &Path) -> Result<()> {
    jsonl::write(path, "bkt_params", fits)
}

/// Samples correctness sequences from the model.
pub fn sample_sequences<R: rand::Rng + ?Sized>(params: &BktParams, n: usize, len: usize, rng: &mut R) -> Vec<Vec<bool>> {
    (0..n)
        .map(|_| {
            let mut mastered = rng.random_bool(params.p_init);
            (0..len)
                .map(|_| {
                    let correct = if mastered {
                        !rng.random_bool(params.p_slip)
                    } else {
                        rng.random_bool(params.p_guess)
                    };
                    if !mastered && rng.random_bool(params.p_learn) {
                        mastered = true;
                    }
                    correct
                })
                .collect()
        })
        .collect()
}
