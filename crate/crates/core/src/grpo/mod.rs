//! Rewards, group-relative advantages and the policy-gradient estimator.
//!
//! The reward of a summary is
//!
//! ```text
//! total = w_recon·acc_recon + w_pred·acc_pred
//!       − w_len·max(0, length − budget)/budget + w_omega·omega
//! ```
//!
//! and each of `G` summaries sampled for the same student gets the advantage
//! `(total − mean) / std` with the population standard deviation.

mod external;
mod toy;

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::PredictionSet;
use crate::sim::{Interaction, QuestionId};

pub use external::{finetune_via_gateway, manifest_path, BatchRecord, Exchange, FinetuneManifest, FinetunePlan, TrainerEndpoint};
pub use toy::{
    build_toy_task, run_toy, train_toy_encoder, Template, ToyRunConfig, ToyStudent, ToyTask, ToyTaskConfig, TraceStep,
    TrainingTrace, TEMPLATE_COUNT,
};

/// Standard deviations below this are treated as zero.
pub const STD_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub value: f64,
    /// Set when there was nothing to score; `value` is then 1.
    pub vacuous: bool,
}

/// Fraction of predictions that match the observed correctness. Abstentions
/// count as wrong.
pub fn accuracy(pred: &PredictionSet, truth: &[Interaction]) -> Result<Accuracy> {
    if pred.predictions.len() != truth.len() {
        return Err(Error::Mismatch(format!(
            "{} predictions for {} targets",
            pred.predictions.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Ok(Accuracy {
            value: 1.0,
            vacuous: true,
        });
    }
    let by_id: HashMap<QuestionId, bool> = truth.iter().map(|i| (i.question_id, i.correct)).collect();
    let mut hits = 0usize;
    for p in &pred.predictions {
        let actual = by_id
            .get(&p.question_id)
            .ok_or_else(|| Error::Mismatch(format!("prediction for unrequested question {}", p.question_id)))?;
        hits += usize::from(p.verdict.predicts_correct() == Some(*actual));
    }
    Ok(Accuracy {
        value: hits as f64 / truth.len() as f64,
        vacuous: false,
    })
}

/// Fraction of equal entries in two equally long boolean lists.
pub fn accuracy_of(pred: &[bool], truth: &[bool]) -> Result<Accuracy> {
    if pred.len() != truth.len() {
        return Err(Error::Mismatch(format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    if truth.is_empty() {
        return Ok(Accuracy {
            value: 1.0,
            vacuous: true,
        });
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(Accuracy {
        value: hits as f64 / truth.len() as f64,
        vacuous: false,
    })
}

/// Structural indicator: the summary mentions misconceptions.
pub fn omega(text: &str) -> bool {
    static WORD: OnceLock<Regex> = OnceLock::new();
    WORD.get_or_init(|| Regex::new(r"(?i)\bmisconceptions?\b").expect("valid regex"))
        .is_match(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub w_recon: f64,
    pub w_pred: f64,
    pub w_len: f64,
    pub w_omega: f64,
    pub budget: usize,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            w_recon: 1.0,
            w_pred: 1.0,
            w_len: 1.0,
            w_omega: 0.0,
            budget: 128,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_recon, self.w_pred, self.w_len, self.w_omega];
        if w.iter().any(|v| !v.is_finite()) || self.budget == 0 {
            return Err(Error::Config(format!(
                "reward weights must be finite and budget >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub acc_recon: f64,
    pub acc_pred: f64,
    pub length: usize,
    pub omega: bool,
    pub length_penalty: f64,
    pub total: f64,
}

pub fn phi_reward(acc_recon: f64, acc_pred: f64, length: usize, omega: bool, w: &RewardWeights) -> RewardBreakdown {
    let budget = w.budget.max(1) as f64;
    let over = (length as f64 - budget).max(0.0) / budget;
    let length_penalty = w.w_len * over;
    let total = w.w_recon * acc_recon + w.w_pred * acc_pred - length_penalty + w.w_omega * f64::from(u8::from(omega));
    RewardBreakdown {
        acc_recon,
        acc_pred,
        length,
        omega,
        length_penalty,
        total,
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn group_advantages(totals: &[f64]) -> Result<Vec<f64>> {
    if totals.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "a group needs at least 2 samples, got {}",
            totals.len()
        )));
    }
    if totals.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidInput("non-finite reward in group".into()));
    }
    let (mean, std) = mean_std(totals);
    if std < STD_EPSILON {
        return Ok(vec![0.0; totals.len()]);
    }
    Ok(totals.iter().map(|t| (t - mean) / std).collect())
}

/// `G` samples for one input with their rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group<S> {
    pub samples: Vec<(S, RewardBreakdown)>,
}

impl<S> Group<S> {
    pub fn totals(&self) -> Vec<f64> {
        self.samples.iter().map(|(_, r)| r.total).collect()
    }

    pub fn stats(&self) -> (f64, f64) {
        mean_std(&self.totals())
    }

    pub fn advantages(&self) -> Result<Vec<f64>> {
        group_advantages(&self.totals())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub learning_rate: f64,
    /// Weight of the KL penalty towards the reference policy; 0 disables it.
    pub kl_coefficient: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 5,
            learning_rate: 1e-4,
            kl_coefficient: 0.04,
            batch_size: 5,
            epochs: 1,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 || self.batch_size == 0 {
            return Err(Error::Config("group_size must be >= 2 and batch_size >= 1".into()));
        }
        if !(self.kl_coefficient >= 0.0 && self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(
                "kl_coefficient and learning_rate must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Softmax policy over a fixed library of candidate summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub theta: Vec<f64>,
    pub reference_theta: Vec<f64>,
}

pub fn softmax(theta: &[f64]) -> Vec<f64> {
    let max = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = theta.iter().map(|t| (t - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

impl ToyPolicy {
    /// Uniform policy that is also its own reference.
    pub fn uniform(k: usize) -> Self {
        ToyPolicy {
            theta: vec![0.0; k],
            reference_theta: vec![0.0; k],
        }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.theta)
    }

    pub fn log_prob(&self, k: usize) -> f64 {
        self.probs()[k].ln()
    }

    /// `e_k − p`.
    pub fn log_prob_grad(&self, k: usize) -> Vec<f64> {
        let mut g: Vec<f64> = self.probs().iter().map(|p| -p).collect();
        g[k] += 1.0;
        g
    }

    /// KL(p‖r) against the reference policy.
    pub fn kl(&self) -> f64 {
        let p = self.probs();
        let r = softmax(&self.reference_theta);
        p.iter().zip(&r).map(|(p, r)| if *p > 0.0 { p * (p.ln() - r.ln()) } else { 0.0 }).sum()
    }

    /// `∂KL/∂θ_j = p_j (log p_j − log r_j − KL)`.
    pub fn kl_grad(&self) -> Vec<f64> {
        let p = self.probs();
        let r = softmax(&self.reference_theta);
        let kl = self.kl();
        p.iter().zip(&r).map(|(p, r)| p * (p.ln() - r.ln() - kl)).collect()
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let p = self.probs();
        for (k, pk) in p.iter().enumerate() {
            acc += pk;
            if u < acc {
                return k;
            }
        }
        p.len() - 1
    }
}

/// `(1/G) Σ A_i (e_{k_i} − p) − β ∇KL`.
pub fn grpo_gradient(policy: &ToyPolicy, group: &Group<usize>, beta: f64) -> Result<Vec<f64>> {
    let k = policy.len();
    if let Some((bad, _)) = group.samples.iter().find(|(s, _)| *s >= k) {
        return Err(Error::InvalidInput(format!("sample {bad} outside the {k}-template library")));
    }
    let adv = group.advantages()?;
    let p = policy.probs();
    let g = group.samples.len() as f64;
    let mut grad = vec![0.0; k];
    for ((s, _), a) in group.samples.iter().zip(&adv) {
        for (j, gj) in grad.iter_mut().enumerate() {
            *gj += a * (f64::from(u8::from(j == *s)) - p[j]) / g;
        }
    }
    if beta > 0.0 {
        for (gj, kj) in grad.iter_mut().zip(policy.kl_grad()) {
            *gj -= beta * kj;
        }
    }
    Ok(grad)
}

/// Gradient of expected reward for fixed per-template rewards:
/// `∂J/∂θ_j = p_j (r_j − J)`.
pub fn expected_reward_gradient(policy: &ToyPolicy, rewards: &[f64]) -> Vec<f64> {
    let p = policy.probs();
    let j: f64 = p.iter().zip(rewards).map(|(p, r)| p * r).sum();
    p.iter().zip(rewards).map(|(p, r)| p * (r - j)).collect()
}

/// Exact expectation of [`grpo_gradient`] over all `K^G` sample outcomes,
/// for fixed per-template rewards.
pub fn exact_grpo_expectation(policy: &ToyPolicy, rewards: &[f64], group_size: usize, beta: f64) -> Result<Vec<f64>> {
    let k = policy.len();
    let outcomes = k
        .checked_pow(group_size as u32)
        .filter(|n| *n <= 1 << 24)
        .ok_or_else(|| Error::InvalidInput("K^G too large to enumerate".into()))?;
    let p = policy.probs();
    let mut expect = vec![0.0; k];
    let mut idx = vec![0usize; group_size];
    for code in 0..outcomes {
        let mut c = code;
        let mut prob = 1.0;
        for slot in idx.iter_mut() {
            *slot = c % k;
            c /= k;
            prob *= p[*slot];
        }
        if prob == 0.0 {
            continue;
        }
        let group = fixed_group(&idx, rewards);
        for (e, g) in expect.iter_mut().zip(grpo_gradient(policy, &group, beta)?) {
            *e += prob * g;
        }
    }
    Ok(expect)
}

pub(crate) fn fixed_group(samples: &[usize], rewards: &[f64]) -> Group<usize> {
    Group {
        samples: samples
            .iter()
            .map(|&s| {
                (
                    s,
                    RewardBreakdown {
                        acc_recon: 0.0,
                        acc_pred: 0.0,
                        length: 0,
                        omega: false,
                        length_penalty: 0.0,
                        total: rewards[s],
                    },
                )
            })
            .collect(),
    }
}

/// Mean of `n_groups` independent estimates, each from `G` samples drawn
/// from the policy, on a task with fixed per-template rewards.
pub fn monte_carlo_gradient(
    policy: &ToyPolicy,
    rewards: &[f64],
    group_size: usize,
    n_groups: usize,
    beta: f64,
    seed: u64,
    exec: crate::par::Execution,
) -> Result<Vec<f64>> {
    use rand::SeedableRng;
    const CHUNK: usize = 1024;
    let k = policy.len();
    let chunks = n_groups.div_ceil(CHUNK);
    let sum = crate::par::map_reduce(
        exec,
        chunks,
        || Ok(vec![0.0; k]),
        |c| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let mut acc = vec![0.0; k];
            let mut samples = vec![0usize; group_size];
            for _ in c * CHUNK..((c + 1) * CHUNK).min(n_groups) {
                for s in samples.iter_mut() {
                    *s = policy.sample(&mut rng);
                }
                for (a, g) in acc.iter_mut().zip(grpo_gradient(policy, &fixed_group(&samples, rewards), beta)?) {
                    *a += g;
                }
            }
            Ok(acc)
        },
        |a: Result<Vec<f64>>, b: Result<Vec<f64>>| Ok(a?.iter().zip(b?).map(|(x, y)| x + y).collect()),
    )?;
    Ok(sum.into_iter().map(|s| s / n_groups as f64).collect())
}
