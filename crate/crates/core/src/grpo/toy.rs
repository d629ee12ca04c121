//! Desk-scale training task: each student has its own softmax policy over a
//! small library of candidate summaries, and rewards come from decoding
//! those summaries with the oracle backend.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{accuracy_of, grpo_gradient, omega, phi_reward, Group, GrpoConfig, RewardBreakdown, RewardWeights, ToyPolicy};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gateway::{count_tokens, Backend, OracleBackend};
use crate::jsonl;
use crate::par::{self, Execution};
use crate::pipeline::{decode, sample_split, SplitConfig};
use crate::sim::{Question, SimConfig, StudentProfile};
use crate::summary::render_canonical;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Canonical,
    CanonicalWithoutMisconceptions,
    AllMastered,
    NothingMastered,
    Empty,
    Vague,
}

pub const TEMPLATE_COUNT: usize = 6;

impl Template {
    pub const ALL: [Template; TEMPLATE_COUNT] = [
        Template::Canonical,
        Template::CanonicalWithoutMisconceptions,
        Template::AllMastered,
        Template::NothingMastered,
        Template::Empty,
        Template::Vague,
    ];

    pub fn render(self, profile: &StudentProfile) -> String {
        match self {
            Template::Canonical => render_canonical(profile),
            Template::CanonicalWithoutMisconceptions => {
                let text = render_canonical(profile);
                match text.find(" Misconceptions:") {
                    Some(i) => text[..i].to_string(),
                    None => text,
                }
            }
            Template::AllMastered => "Mastered: addition, subtraction, multiplication, division. Not mastered: none.".into(),
            Template::NothingMastered => {
                "Mastered: none. Not mastered: addition, subtraction, multiplication, division. Misconceptions: none."
                    .into()
            }
            Template::Empty => String::new(),
            Template::Vague => "The student is doing fine overall.".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyStudent {
    pub profile: StudentProfile,
    pub recon: Vec<(Question, bool)>,
    pub pred: Vec<(Question, bool)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub students: Vec<ToyStudent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTaskConfig {
    pub n_students: usize,
    pub split: SplitConfig,
    pub seed: u64,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        ToyTaskConfig {
            n_students: 5,
            split: SplitConfig {
                n_recon: 16,
                ..SplitConfig::default()
            },
            seed: 0,
        }
    }
}

/// Everything a toy training run needs. Defaults: 5 students, one batch
/// per epoch, 500 steps, learning rate 0.5 and misconception shaping on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyRunConfig {
    pub sim: SimConfig,
    pub task: ToyTaskConfig,
    pub grpo: GrpoConfig,
    pub reward: RewardWeights,
}

impl Default for ToyRunConfig {
    fn default() -> Self {
        ToyRunConfig {
            sim: SimConfig {
                n_students: 20,
                n_questions: 2000,
                ..SimConfig::default()
            },
            task: ToyTaskConfig::default(),
            grpo: GrpoConfig {
                learning_rate: 0.5,
                epochs: 500,
                ..GrpoConfig::default()
            },
            reward: RewardWeights {
                w_omega: 0.5,
                ..RewardWeights::default()
            },
        }
    }
}

/// Generates the dataset, builds the task and trains.
pub fn run_toy(config: &ToyRunConfig, exec: Execution) -> Result<TrainingTrace> {
    let dataset = crate::sim::generate_dataset_with(&config.sim, exec)?;
    let task = build_toy_task(&dataset, &config.task)?;
    train_toy_encoder(&task, &config.grpo, &config.reward, exec)
}

/// Takes the first `n_students` students that have a profile.
pub fn build_toy_task(dataset: &Dataset, config: &ToyTaskConfig) -> Result<ToyTask> {
    let bank = dataset.bank_index();
    let lookup = |id| bank.get(&id).map(|q| (*q).clone()).ok_or(Error::UnknownQuestion(id.0));
    let mut students = Vec::new();
    for t in dataset.trajectories.iter().take(config.n_students) {
        let profile = dataset
            .profile(t.student_id)
            .ok_or(Error::UnknownStudent(t.student_id.0))?
            .clone();
        let split = sample_split(t, &config.split, config.seed)?;
        let pairs = |items: &[crate::sim::Interaction]| -> Result<Vec<(Question, bool)>> {
            items.iter().map(|i| Ok((lookup(i.question_id)?, i.correct))).collect()
        };
        students.push(ToyStudent {
            recon: pairs(&split.x_s)?,
            pred: pairs(&split.y_s)?,
            profile,
        });
    }
    if students.is_empty() {
        return Err(Error::InvalidInput("toy task needs at least one student".into()));
    }
    Ok(ToyTask { students })
}

fn score(backend: &dyn Backend, summary: &str, targets: &[(Question, bool)]) -> Result<f64> {
    let questions: Vec<&Question> = targets.iter().map(|(q, _)| q).collect();
    let set = decode(backend, summary, &questions)?;
    let pred: Vec<bool> = set
        .predictions
        .iter()
        .map(|p| p.verdict.predicts_correct().unwrap_or(false))
        .collect();
    let truth: Vec<bool> = targets.iter().map(|(_, c)| *c).collect();
    Ok(accuracy_of(&pred, &truth)?.value)
}

impl ToyTask {
    /// Reward of every (student, template) pair under a frozen decoder.
    pub fn reward_table(&self, decoder: &dyn Backend, weights: &RewardWeights, exec: Execution) -> Result<Vec<Vec<RewardBreakdown>>> {
        par::map(exec, &self.students, |s| {
            Template::ALL
                .iter()
                .map(|t| {
                    let text = t.render(&s.profile);
                    Ok(phi_reward(
                        score(decoder, &text, &s.recon)?,
                        score(decoder, &text, &s.pred)?,
                        count_tokens(&text),
                        omega(&text),
                        weights,
                    ))
                })
                .collect()
        })
        .into_iter()
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    /// Means over the sampled summaries of this step's batch.
    pub mean_reward: f64,
    pub decode_accuracy: f64,
    pub omega_rate: f64,
    /// Means over all students under the current policies.
    pub expected_reward: f64,
    pub expected_accuracy: f64,
    pub expected_omega_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub steps: Vec<TraceStep>,
    pub initial: TraceStep,
    /// Mean prediction accuracy of the canonical summaries.
    pub ceiling_accuracy: f64,
    pub policies: Vec<ToyPolicy>,
    /// Per student: final probability mass on reward-maximal templates.
    pub optimal_mass: Vec<f64>,
}

impl TrainingTrace {
    pub fn final_step(&self) -> &TraceStep {
        self.steps.last().unwrap_or(&self.initial)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut rows = vec![self.initial.clone()];
        rows.extend(self.steps.iter().cloned());
        jsonl::write(path, "training_trace", &rows)
    }
}

fn expected(policies: &[ToyPolicy], table: &[Vec<RewardBreakdown>], step: usize) -> TraceStep {
    let n = policies.len() as f64;
    let (mut reward, mut acc, mut om) = (0.0, 0.0, 0.0);
    for (policy, row) in policies.iter().zip(table) {
        for (p, r) in policy.probs().iter().zip(row) {
            reward += p * r.total;
            acc += p * r.acc_pred;
            om += p * f64::from(u8::from(r.omega));
        }
    }
    TraceStep {
        step,
        mean_reward: f64::NAN,
        decode_accuracy: f64::NAN,
        omega_rate: f64::NAN,
        expected_reward: reward / n,
        expected_accuracy: acc / n,
        expected_omega_rate: om / n,
    }
}

/// Runs `grpo.epochs` passes over the students in batches of
/// `grpo.batch_size`; each batch is one update step.
pub fn train_toy_encoder(task: &ToyTask, grpo: &GrpoConfig, reward: &RewardWeights, exec: Execution) -> Result<TrainingTrace> {
    grpo.validate()?;
    reward.validate()?;
    let table = task.reward_table(&OracleBackend, reward, exec)?;
    let mut policies = vec![ToyPolicy::uniform(TEMPLATE_COUNT); task.students.len()];
    let mut initial = expected(&policies, &table, 0);
    initial.mean_reward = initial.expected_reward;
    initial.decode_accuracy = initial.expected_accuracy;
    initial.omega_rate = initial.expected_omega_rate;
    let ceiling_accuracy = table.iter().map(|row| row[0].acc_pred).sum::<f64>() / table.len() as f64;

    let mut steps = Vec::new();
    let ids: Vec<usize> = (0..task.students.len()).collect();
    for _ in 0..grpo.epochs {
        for batch in ids.chunks(grpo.batch_size) {
            let step = steps.len() + 1;
            let groups: Vec<Result<(Group<usize>, Vec<f64>)>> = par::map(exec, batch, |&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(grpo.seed);
                rng.set_stream(((step as u64) << 24) | s as u64);
                let policy = &policies[s];
                let group = Group {
                    samples: (0..grpo.group_size)
                        .map(|_| {
                            let k = policy.sample(&mut rng);
                            (k, table[s][k])
                        })
                        .collect(),
                };
                let grad = grpo_gradient(policy, &group, grpo.kl_coefficient)?;
                Ok((group, grad))
            });
            let (mut reward_sum, mut acc_sum, mut omega_sum, mut count) = (0.0, 0.0, 0.0, 0.0);
            for (&s, item) in batch.iter().zip(groups) {
                let (group, grad) = item?;
                for (_, r) in &group.samples {
                    reward_sum += r.total;
                    acc_sum += r.acc_pred;
                    omega_sum += f64::from(u8::from(r.omega));
                    count += 1.0;
                }
                for (t, g) in policies[s].theta.iter_mut().zip(grad) {
                    *t += grpo.learning_rate * g;
                }
                if policies[s].theta.iter().any(|t| !t.is_finite()) {
                    return Err(Error::Diverged {
                        step,
                        reason: format!("non-finite policy parameters for student {s}"),
                    });
                }
            }
            if !reward_sum.is_finite() {
                return Err(Error::Diverged {
                    step,
                    reason: "non-finite reward".into(),
                });
            }
            let mut record = expected(&policies, &table, step);
            record.mean_reward = reward_sum / count;
            record.decode_accuracy = acc_sum / count;
            record.omega_rate = omega_sum / count;
            steps.push(record);
        }
    }

    let optimal_mass = policies
        .iter()
        .zip(&table)
        .map(|(policy, row)| {
            let best = row.iter().map(|r| r.total).fold(f64::NEG_INFINITY, f64::max);
            policy
                .probs()
                .iter()
                .zip(row)
                .filter(|(_, r)| r.total >= best - 1e-12)
                .map(|(p, _)| p)
                .sum()
        })
        .collect();
    Ok(TrainingTrace {
        steps,
        initial,
        ceiling_accuracy,
        policies,
        optimal_mass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_dataset, Misconception, Operator, SimConfig, StudentId};

    /// Operators whose mastery a template asserts incorrectly.
    fn wrong_mastery_claims(template: Template, profile: &StudentProfile) -> Vec<Operator> {
        let claimed = crate::summary::parse_summary(&template.render(profile))
            .expect("templates parse")
            .to_profile(profile.id);
        Operator::ALL
            .into_iter()
            .filter(|o| claimed.mastered.contains(o) != profile.mastered.contains(o))
            .collect()
    }

    fn small_task(n: usize) -> ToyTask {
        let d = generate_dataset(&SimConfig {
            n_students: n,
            n_questions: 400,
            per_student: 210,
            ..SimConfig::default()
        })
        .unwrap();
        build_toy_task(
            &d,
            &ToyTaskConfig {
                n_students: n,
                ..ToyTaskConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn templates_parse_and_mention_misconceptions_as_designed() {
        let p = StudentProfile {
            id: StudentId(0),
            mastered: [Operator::Add].into_iter().collect(),
            misconceptions: vec![Misconception::NoCarryAdd],
            slip_rate: 0.0,
            guess_rate: 0.0,
        };
        let mentions: Vec<bool> = Template::ALL.iter().map(|t| omega(&t.render(&p))).collect();
        assert_eq!(mentions, [true, false, false, true, false, false]);
        assert!(wrong_mastery_claims(Template::Canonical, &p).is_empty());
        assert!(wrong_mastery_claims(Template::CanonicalWithoutMisconceptions, &p).is_empty());
        assert_eq!(wrong_mastery_claims(Template::Empty, &p).len(), 3);
    }

    #[test]
    fn zero_learning_rate_keeps_expected_reward_flat() {
        let task = small_task(3);
        let grpo = GrpoConfig {
            learning_rate: 0.0,
            epochs: 20,
            ..GrpoConfig::default()
        };
        let trace = train_toy_encoder(&task, &grpo, &RewardWeights::default(), Execution::Sequential).unwrap();
        assert_eq!(trace.steps.len(), 20);
        assert!(trace
            .steps
            .iter()
            .all(|s| (s.expected_reward - trace.initial.expected_reward).abs() < 1e-12));
    }

    #[test]
    fn canonical_summary_is_reward_maximal() {
        let task = small_task(4);
        let table = task
            .reward_table(&OracleBackend, &RewardWeights::default(), Execution::Sequential)
            .unwrap();
        for row in &table {
            assert_eq!(row[0].acc_pred, 1.0);
            assert_eq!(row[0].acc_recon, 1.0);
            assert!(row.iter().all(|r| r.total <= row[0].total));
        }
    }

    #[test]
    fn parallel_and_sequential_training_agree() {
        let task = small_task(4);
        let grpo = GrpoConfig {
            learning_rate: 0.5,
            epochs: 10,
            batch_size: 2,
            ..GrpoConfig::default()
        };
        let a = train_toy_encoder(&task, &grpo, &RewardWeights::default(), Execution::Sequential).unwrap();
        let b = train_toy_encoder(&task, &grpo, &RewardWeights::default(), Execution::Parallel).unwrap();
        assert_eq!(a.policies, b.policies);
        assert_eq!(a.steps.len(), 20);
    }
}
