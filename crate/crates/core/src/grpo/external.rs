//! Driving a real encoder through an external trainer.
//!
//! Rewards and advantages are computed here; weight updates happen at the
//! trainer endpoint. Each step posts one JSON document:
//!
//! ```text
//! {
//!   "step": 3,
//!   "config": {"group_size": 5, "learning_rate": 1e-4, "kl_coefficient": 0.04, "batch_size": 5, ...},
//!   "items": [
//!     {"student_id": 17, "prompt": {system_text, user_text, ...},
//!      "completions": [...], "rewards": [...], "advantages": [...]}
//!   ]
//! }
//! ```
//!
//! and stores whatever JSON the trainer returns as the step's receipt. The
//! manifest is rewritten after every step, so an interrupted run resumes
//! from the last acknowledged step.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{group_advantages, omega, phi_reward, GrpoConfig, RewardWeights};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gateway::{Backend, CompletionRequest, GatewayError};
use crate::par::{self, Execution};
use crate::pipeline::{decode, encoder_request, sample_split, Bottleneck, EncodeOptions, SplitConfig};
use crate::sim::{Interaction, Question, StudentId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerEndpoint {
    pub url: String,
    /// Environment variable holding a bearer credential, if any.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
}

impl Default for TrainerEndpoint {
    fn default() -> Self {
        TrainerEndpoint {
            url: String::new(),
            api_key_env: None,
            timeout_secs: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetunePlan {
    pub n_train: usize,
    pub n_test: usize,
    pub split: SplitConfig,
    pub temperature: f64,
    /// Stop after this many steps in total (resumed runs included).
    pub max_steps: Option<usize>,
}

impl Default for FinetunePlan {
    fn default() -> Self {
        FinetunePlan {
            n_train: 800,
            n_test: 200,
            split: SplitConfig::default(),
            temperature: 1.0,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub student_id: StudentId,
    pub prompt: CompletionRequest,
    pub completions: Vec<String>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub step: usize,
    pub students: Vec<StudentId>,
    pub mean_reward: f64,
    pub omega_rate: f64,
    pub receipt: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneManifest {
    pub schema_version: u32,
    pub trainer_url: String,
    pub encoder_id: String,
    pub decoder_id: String,
    pub dataset_hash: String,
    pub grpo: GrpoConfig,
    pub reward: RewardWeights,
    pub n_train: usize,
    pub n_test: usize,
    pub train_students: Vec<StudentId>,
    pub test_students: Vec<StudentId>,
    pub steps_completed: usize,
    pub batches: Vec<BatchRecord>,
}

impl FinetuneManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(&tmp, text + "\n").map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    fn same_run(&self, other: &FinetuneManifest) -> bool {
        self.dataset_hash == other.dataset_hash
            && self.grpo == other.grpo
            && self.reward == other.reward
            && self.train_students == other.train_students
            && self.test_students == other.test_students
    }
}

fn post(trainer: &TrainerEndpoint, body: &Value) -> Result<Value> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(trainer.timeout_secs)))
        .http_status_as_error(false)
        .build()
        .into();
    let mut call = agent.post(&trainer.url).header("Content-Type", "application/json");
    if let Some(var) = &trainer.api_key_env {
        let key = std::env::var(var).map_err(|_| GatewayError::MissingCredential(var.clone()))?;
        call = call.header("Authorization", &format!("Bearer {key}"));
    }
    let mut resp = call.send(body.to_string()).map_err(|e| GatewayError::Exhausted {
        attempts: 1,
        message: e.to_string(),
    })?;
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().map_err(|e| GatewayError::Malformed(e.to_string()))?;
    if !(200..300).contains(&status) {
        return Err(GatewayError::Status { status, body: text }.into());
    }
    Ok(serde_json::from_str(&text).unwrap_or(Value::String(text)))
}

fn accuracy_on(decoder: &dyn Backend, summary: &str, bank: &crate::pipeline::BankIndex<'_>, targets: &[Interaction]) -> Result<f64> {
    let questions: Vec<&Question> = targets
        .iter()
        .map(|i| bank.get(&i.question_id).copied().ok_or(Error::UnknownQuestion(i.question_id.0)))
        .collect::<Result<_>>()?;
    let set = decode(decoder, summary, &questions)?;
    Ok(super::accuracy(&set, targets)?.value)
}

#[allow(clippy::too_many_arguments)]
pub fn finetune_via_gateway(
    encoder: &dyn Backend,
    decoder: &dyn Backend,
    trainer: Option<&TrainerEndpoint>,
    dataset: &Dataset,
    grpo: &GrpoConfig,
    reward: &RewardWeights,
    plan: &FinetunePlan,
    manifest_path: &Path,
    exec: Execution,
) -> Result<FinetuneManifest> {
    let trainer = trainer.filter(|t| !t.url.is_empty()).ok_or_else(|| {
        Error::ExternalTrainerRequired(
            "weight updates for a real encoder need a trainer endpoint accepting prompt/completions/rewards".into(),
        )
    })?;
    grpo.validate()?;
    reward.validate()?;
    plan.split.validate()?;
    let n = dataset.trajectories.len();
    if plan.n_train == 0 || plan.n_train + plan.n_test > n {
        return Err(Error::Config(format!(
            "train/test sizes {}/{} do not fit {n} trajectories",
            plan.n_train, plan.n_test
        )));
    }
    let ids = |range: std::ops::Range<usize>| -> Vec<StudentId> {
        dataset.trajectories[range].iter().map(|t| t.student_id).collect()
    };
    let fresh = FinetuneManifest {
        schema_version: crate::jsonl::SCHEMA_VERSION,
        trainer_url: trainer.url.clone(),
        encoder_id: encoder.id(),
        decoder_id: decoder.id(),
        dataset_hash: dataset.content_hash(),
        grpo: grpo.clone(),
        reward: *reward,
        n_train: plan.n_train,
        n_test: plan.n_test,
        train_students: ids(0..plan.n_train),
        test_students: ids(n - plan.n_test..n),
        steps_completed: 0,
        batches: Vec::new(),
    };
    let mut manifest = if manifest_path.exists() {
        let old = FinetuneManifest::load(manifest_path)?;
        if !old.same_run(&fresh) {
            return Err(Error::Config(format!(
                "{} belongs to a different run; choose another manifest path",
                manifest_path.display()
            )));
        }
        old
    } else {
        fresh
    };

    let bank = dataset.bank_index();
    let train = &dataset.trajectories[..plan.n_train];
    let batches: Vec<_> = train.chunks(grpo.batch_size).collect();
    let total_steps = grpo.epochs * batches.len();
    let stop = plan.max_steps.map_or(total_steps, |m| m.min(total_steps));
    let opts = EncodeOptions::default();
    while manifest.steps_completed < stop {
        let step = manifest.steps_completed + 1;
        let batch = batches[(step - 1) % batches.len()];
        let items: Vec<Result<(Exchange, f64)>> = par::map(exec, batch, |t| {
            let split = sample_split(t, &plan.split, grpo.seed)?;
            let base = encoder_request(&bank, &split, reward.budget, &opts)?;
            let mut completions = Vec::with_capacity(grpo.group_size);
            let mut totals = Vec::with_capacity(grpo.group_size);
            let mut mentions = 0.0;
            for i in 0..grpo.group_size {
                let req = CompletionRequest {
                    temperature: plan.temperature,
                    seed: Some(((step as u64) << 32) ^ (t.student_id.0 << 8) ^ i as u64),
                    ..base.clone()
                };
                let text = encoder.complete(&req)?.text;
                let b = Bottleneck::from_completion(t.student_id, text.clone(), reward.budget, encoder.id(), false);
                let r = phi_reward(
                    accuracy_on(decoder, &b.text, &bank, &split.x_s)?,
                    accuracy_on(decoder, &b.text, &bank, &split.y_s)?,
                    crate::gateway::count_tokens(&text),
                    omega(&b.text),
                    reward,
                );
                mentions += f64::from(u8::from(r.omega));
                completions.push(text);
                totals.push(r.total);
            }
            Ok((
                Exchange {
                    student_id: t.student_id,
                    prompt: base,
                    completions,
                    advantages: group_advantages(&totals)?,
                    rewards: totals,
                },
                mentions,
            ))
        });
        let mut exchanges = Vec::with_capacity(items.len());
        let mut mentions = 0.0;
        for item in items {
            let (x, m) = item?;
            mentions += m;
            exchanges.push(x);
        }
        let samples = (exchanges.len() * grpo.group_size) as f64;
        let mean_reward = exchanges.iter().flat_map(|x| &x.rewards).sum::<f64>() / samples;
        let body = serde_json::json!({"step": step, "config": grpo, "items": exchanges});
        let receipt = post(trainer, &body)?;
        manifest.batches.push(BatchRecord {
            step,
            students: exchanges.iter().map(|x| x.student_id).collect(),
            mean_reward,
            omega_rate: mentions / samples,
            receipt,
        });
        manifest.steps_completed = step;
        manifest.save(manifest_path)?;
    }
    if !manifest_path.exists() {
        manifest.save(manifest_path)?;
    }
    Ok(manifest)
}

/// Default location of the manifest inside an output directory.
pub fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("finetune_manifest.json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::OracleBackend;
    use crate::sim::{generate_dataset, SimConfig};

    #[test]
    fn missing_trainer_fails_before_writing() {
        let d = generate_dataset(&SimConfig {
            n_students: 4,
            n_questions: 300,
            per_student: 60,
            ..SimConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = manifest_path(dir.path());
        let plan = FinetunePlan {
            n_train: 3,
            n_test: 1,
            ..FinetunePlan::default()
        };
        for trainer in [None, Some(TrainerEndpoint::default())] {
            let err = finetune_via_gateway(
                &OracleBackend,
                &OracleBackend,
                trainer.as_ref(),
                &d,
                &GrpoConfig::default(),
                &RewardWeights::default(),
                &plan,
                &path,
                Execution::Sequential,
            )
            .unwrap_err();
            assert!(matches!(err, Error::ExternalTrainerRequired(_)));
        }
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
