//! Config-driven experiments: LBM against direct prompting, budget and
//! data-efficiency sweeps, encoder/decoder grids, misconception strata and
//! steering ablations.
//!
//! Every run records its backends' exchanges. [`rerun_from_manifest`]
//! replays those transcripts and must reproduce `report.json` byte for byte.
//!
//! # Config file (TOML)
//!
//! ```toml
//! dataset = "data/synthetic"        # dataset directory, relative to this file
//! mode = "lbm"                      # "lbm" or "direct"
//! n_enc = 50                        # encoder questions per student
//! n_pred = 4                        # held-out targets per student
//! split_mode = "random"             # "random" or "last"
//! budget = 128                      # bottleneck tokens
//! chain_of_thought = false
//! n_test_students = 200             # the last N trajectories
//! seeds = [0]                       # one split per seed
//! sem_over = "students"             # "students" or "seeds"
//! execution = "parallel"            # "parallel" or "sequential"
//!
//! [encoder]                         # kind: ground_truth | oracle | replay | http
//! kind = "oracle"
//!
//! [decoder]                         # kind: oracle | replay | http
//! kind = "http"
//! endpoint = "https://api.example.com"
//! model = "some-model"
//! api_key_env = "LBM_API_KEY"       # name of the variable, never the key
//!
//! [steering]
//! encoder_instruction = "Mention every misconception."
//! append_to_bottleneck = "The student has mastered addition."
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{hex, load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::gateway::{
    connect, request_key, Backend, BackendSpec, HttpSpec, Recorder, ReplayBackend,
};
use crate::grpo::accuracy;
use crate::jsonl;
use crate::par::{self, Execution};
use crate::pipeline::{
    decode, direct_predict, encode, encode_ground_truth, encoder_request, sample_split, BankIndex, Bottleneck,
    EncodeOptions, Split, SplitConfig, SplitMode,
};
use crate::prompt;
use crate::sim::{Interaction, Operator, Question, StudentId, StudentProfile, Trajectory};
use crate::summary::teacher_sentence;

pub const REPORT_FILE: &str = "report.json";
pub const STUDENTS_FILE: &str = "students.jsonl";
pub const BOTTLENECKS_FILE: &str = "bottlenecks.jsonl";
pub const TABLE_FILE: &str = "table.txt";
pub const ENCODER_TRANSCRIPT: &str = "encoder_transcript.jsonl";
pub const DECODER_TRANSCRIPT: &str = "decoder_transcript.jsonl";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Direct,
    #[default]
    Lbm,
}

/// Where bottlenecks come from. `ground_truth` renders the true profile
/// and needs a synthetic dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    GroundTruth,
    Http(HttpSpec),
    Replay { transcript: PathBuf },
    #[default]
    Oracle,
}

impl EncoderSpec {
    pub fn backend(&self) -> Option<BackendSpec> {
        match self {
            EncoderSpec::GroundTruth => None,
            EncoderSpec::Http(h) => Some(BackendSpec::Http(h.clone())),
            EncoderSpec::Replay { transcript } => Some(BackendSpec::Replay {
                transcript: transcript.clone(),
            }),
            EncoderSpec::Oracle => Some(BackendSpec::Oracle),
        }
    }

    /// `ground-truth` or any backend short form.
    pub fn parse_short(s: &str) -> Option<EncoderSpec> {
        if s == "ground-truth" || s == "ground_truth" {
            return Some(EncoderSpec::GroundTruth);
        }
        Some(match BackendSpec::parse_short(s)? {
            BackendSpec::Http(h) => EncoderSpec::Http(h),
            BackendSpec::Replay { transcript } => EncoderSpec::Replay { transcript },
            BackendSpec::Oracle => EncoderSpec::Oracle,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemOver {
    /// Spread of per-student accuracies.
    #[default]
    Students,
    /// Spread of per-seed mean accuracies.
    Seeds,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringOptions {
    /// Extra instruction appended to the encoder prompt.
    pub encoder_instruction: Option<String>,
    /// Text appended to every bottleneck before decoding.
    pub append_to_bottleneck: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub encoder: EncoderSpec,
    pub decoder: BackendSpec,
    pub mode: Mode,
    pub n_enc: usize,
    pub n_pred: usize,
    pub split_mode: SplitMode,
    pub budget: usize,
    pub chain_of_thought: bool,
    pub n_test_students: usize,
    pub seeds: Vec<u64>,
    pub sem_over: SemOver,
    pub steering: SteeringOptions,
    pub execution: Execution,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: PathBuf::from("data"),
            encoder: EncoderSpec::Oracle,
            decoder: BackendSpec::Oracle,
            mode: Mode::Lbm,
            n_enc: 50,
            n_pred: 4,
            split_mode: SplitMode::Random,
            budget: 128,
            chain_of_thought: false,
            n_test_students: 200,
            seeds: vec![0],
            sem_over: SemOver::Students,
            steering: SteeringOptions::default(),
            execution: Execution::Parallel,
        }
    }
}

impl ExperimentConfig {
    /// Reads a TOML file; a relative `dataset` is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = crate::config::load_toml(path)?;
        if cfg.dataset.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset = dir.join(&cfg.dataset);
            }
        }
        Ok(cfg)
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            n_enc: self.n_enc,
            n_recon: 0,
            n_pred: self.n_pred,
            mode: self.split_mode,
        }
    }

    pub fn encode_options(&self) -> EncodeOptions {
        EncodeOptions {
            chain_of_thought: self.chain_of_thought,
            steering_text: self.steering.encoder_instruction.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1 token".into()));
        }
        if self.n_test_students == 0 {
            return Err(Error::Config("n_test_students must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.n_pred == 0 {
            return Err(Error::Config("n_pred must be at least 1".into()));
        }
        self.split_config().validate()
    }

    /// Validation plus checks that referenced files exist.
    pub fn validate_paths(&self) -> Result<()> {
        self.validate()?;
        if !self.dataset.is_dir() {
            return Err(Error::Config(format!("dataset directory {} not found", self.dataset.display())));
        }
        let transcripts = [
            match &self.encoder {
                EncoderSpec::Replay { transcript } => Some(transcript),
                _ => None,
            },
            match &self.decoder {
                BackendSpec::Replay { transcript } => Some(transcript),
                _ => None,
            },
        ];
        for t in transcripts.into_iter().flatten() {
            if !t.is_file() {
                return Err(Error::Config(format!("transcript {} not found", t.display())));
            }
        }
        Ok(())
    }
}

/// The encoder side of a run, already connected.
#[derive(Clone)]
pub enum Encoder {
    GroundTruth,
    Backend(Arc<dyn Backend>),
}

impl Encoder {
    pub fn connect(spec: &EncoderSpec) -> Result<Self> {
        Ok(match spec.backend() {
            None => Encoder::GroundTruth,
            Some(b) => Encoder::Backend(connect(&b)?),
        })
    }

    pub fn id(&self) -> String {
        match self {
            Encoder::GroundTruth => "ground-truth".into(),
            Encoder::Backend(b) => b.id(),
        }
    }

    /// Encodes one split; the ground-truth encoder ignores the history.
    pub fn bottleneck(
        &self,
        dataset: &Dataset,
        bank: &BankIndex<'_>,
        split: &Split,
        budget: usize,
        opts: &EncodeOptions,
    ) -> Result<Bottleneck> {
        match self {
            Encoder::GroundTruth => {
                let profile = dataset
                    .profile(split.student_id)
                    .ok_or(Error::UnknownStudent(split.student_id.0))?;
                Ok(encode_ground_truth(profile, budget))
            }
            Encoder::Backend(b) => encode(b.as_ref(), bank, split, budget, opts),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentResult {
    pub student_id: StudentId,
    pub segment: u32,
    pub seed: u64,
    /// Absent when the student failed.
    pub accuracy: Option<f64>,
    pub target_ids: Vec<crate::sim::QuestionId>,
    pub split_hash: String,
    pub encoder_prompt_key: Option<String>,
    pub bottleneck_tokens: Option<usize>,
    pub misconceptions: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentAccuracy {
    pub student_id: StudentId,
    pub segment: u32,
    /// Mean over seeds.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    /// "0", "1", "2" or "3+".
    pub label: String,
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub dataset_hash: String,
    pub encoder_id: String,
    pub decoder_id: String,
    pub prompt_template_hash: String,
    /// Digest over every split, in result order; equal digests mean paired runs.
    pub split_digest: String,
    pub encoder_transcript: Option<String>,
    pub decoder_transcript: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub student_accuracies: Vec<StudentAccuracy>,
    pub mean: Option<f64>,
    pub sem: Option<f64>,
    pub n_attempted: usize,
    pub n_failed: usize,
    pub partial: bool,
    pub strata: Vec<Stratum>,
    pub results: Vec<StudentResult>,
    pub manifest: RunManifest,
}

/// Sample standard deviation over `√n`.
pub fn compute_sem(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("standard error needs at least 2 values, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((var / n as f64).sqrt())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn sha_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn split_hash(split: &Split) -> String {
    sha_hex(&serde_json::to_vec(split).expect("serializable"))
}

pub fn prompt_template_hash() -> String {
    let mut h = Sha256::new();
    for part in [prompt::ENCODER_SYSTEM, prompt::DECODER_SYSTEM, prompt::DIRECT_SYSTEM, prompt::COT_MARKER] {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    hex(&h.finalize())
}

fn stratum_label(misconceptions: usize) -> &'static str {
    match misconceptions {
        0 => "0",
        1 => "1",
        2 => "2",
        _ => "3+",
    }
}

/// Groups per-student accuracies by the true number of misconceptions.
/// Empty strata are omitted.
pub fn stratify_by_misconceptions(report: &MetricsReport, profiles: &[StudentProfile]) -> Result<Vec<Stratum>> {
    let by_id: BTreeMap<StudentId, &StudentProfile> = profiles.iter().map(|p| (p.id, p)).collect();
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for s in &report.student_accuracies {
        let p = by_id.get(&s.student_id).ok_or(Error::UnknownStudent(s.student_id.0))?;
        groups.entry(stratum_label(p.misconceptions.len())).or_default().push(s.accuracy);
    }
    Ok(groups
        .into_iter()
        .map(|(label, v)| {
            let (mean, std) = mean_std(&v);
            Stratum {
                label: label.to_string(),
                n: v.len(),
                mean,
                std,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumChange {
    pub label: String,
    pub before: f64,
    pub after: f64,
    /// `(after − before) / before`; absent when `before` is zero.
    pub relative: Option<f64>,
}

/// Per-stratum change between two runs, over strata present in both.
pub fn compare_strata(before: &[Stratum], after: &[Stratum]) -> Vec<StratumChange> {
    before
        .iter()
        .filter_map(|b| {
            let a = after.iter().find(|a| a.label == b.label)?;
            Some(StratumChange {
                label: b.label.clone(),
                before: b.mean,
                after: a.mean,
                relative: (b.mean != 0.0).then(|| (a.mean - b.mean) / b.mean),
            })
        })
        .collect()
}

/// The last `n` trajectories.
pub fn test_trajectories(dataset: &Dataset, n: usize) -> Result<&[Trajectory]> {
    let total = dataset.trajectories.len();
    if n > total {
        return Err(Error::Config(format!(
            "n_test_students ({n}) exceeds the {total} trajectories in the dataset"
        )));
    }
    Ok(&dataset.trajectories[total - n..])
}

fn targets<'a>(bank: &BankIndex<'a>, items: &[Interaction]) -> Result<Vec<&'a Question>> {
    items
        .iter()
        .map(|i| bank.get(&i.question_id).copied().ok_or(Error::UnknownQuestion(i.question_id.0)))
        .collect()
}

struct Outcome {
    result: StudentResult,
    bottleneck: Option<Bottleneck>,
}

fn run_student(
    config: &ExperimentConfig,
    dataset: &Dataset,
    bank: &BankIndex<'_>,
    encoder: &Encoder,
    decoder: &dyn Backend,
    traj: &Trajectory,
    seed: u64,
) -> Outcome {
    let mut result = StudentResult {
        student_id: traj.student_id,
        segment: traj.segment,
        seed,
        accuracy: None,
        target_ids: Vec::new(),
        split_hash: String::new(),
        encoder_prompt_key: None,
        bottleneck_tokens: None,
        misconceptions: dataset.profile(traj.student_id).map(|p| p.misconceptions.len()),
        error: None,
    };
    let mut bottleneck = None;
    let attempt = (|| -> Result<f64> {
        let split = sample_split(traj, &config.split_config(), seed)?;
        result.split_hash = split_hash(&split);
        result.target_ids = split.y_questions();
        let qs = targets(bank, &split.y_s)?;
        let predictions = match config.mode {
            Mode::Direct => direct_predict(decoder, bank, &split.x_enc, &qs)?,
            Mode::Lbm => {
                let opts = config.encode_options();
                if matches!(encoder, Encoder::Backend(_)) {
                    result.encoder_prompt_key = Some(request_key(&encoder_request(bank, &split, config.budget, &opts)?));
                }
                let mut b = encoder.bottleneck(dataset, bank, &split, config.budget, &opts)?;
                if let Some(extra) = config.steering.append_to_bottleneck.as_deref().filter(|s| !s.is_empty()) {
                    b.text = format!("{} {extra}", b.text);
                }
                result.bottleneck_tokens = Some(b.token_count);
                let set = decode(decoder, &b.text, &qs)?;
                bottleneck = Some(b);
                set
            }
        };
        Ok(accuracy(&predictions, &split.y_s)?.value)
    })();
    match attempt {
        Ok(a) => result.accuracy = Some(a),
        Err(e) => result.error = Some(e.to_string()),
    }
    Outcome { result, bottleneck }
}

/// Runs with already connected backends. Nothing is written.
pub fn run_with(
    config: &ExperimentConfig,
    dataset: &Dataset,
    encoder: &Encoder,
    decoder: &dyn Backend,
) -> Result<(MetricsReport, Vec<Bottleneck>)> {
    config.validate()?;
    let tests = test_trajectories(dataset, config.n_test_students)?;
    let bank = dataset.bank_index();
    let jobs: Vec<(&Trajectory, u64)> = tests
        .iter()
        .flat_map(|t| config.seeds.iter().map(move |&s| (t, s)))
        .collect();
    let mut outcomes = par::map(config.execution, &jobs, |(t, seed)| {
        run_student(config, dataset, &bank, encoder, decoder, t, *seed)
    });
    outcomes.sort_by_key(|o| (o.result.student_id, o.result.segment, o.result.seed));

    let mut per_student: BTreeMap<(StudentId, u32), Vec<f64>> = BTreeMap::new();
    let mut per_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for o in &outcomes {
        if let Some(a) = o.result.accuracy {
            per_student.entry((o.result.student_id, o.result.segment)).or_default().push(a);
            per_seed.entry(o.result.seed).or_default().push(a);
        }
    }
    let student_accuracies: Vec<StudentAccuracy> = per_student
        .into_iter()
        .map(|((student_id, segment), v)| StudentAccuracy {
            student_id,
            segment,
            accuracy: v.iter().sum::<f64>() / v.len() as f64,
        })
        .collect();
    let values: Vec<f64> = student_accuracies.iter().map(|s| s.accuracy).collect();
    let mean = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
    let sem = match config.sem_over {
        SemOver::Students => compute_sem(&values).ok(),
        SemOver::Seeds => {
            let seed_means: Vec<f64> = per_seed.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
            compute_sem(&seed_means).ok()
        }
    };
    let n_failed = outcomes.iter().filter(|o| o.result.error.is_some()).count();
    let mut digest = Sha256::new();
    for o in &outcomes {
        digest.update(o.result.split_hash.as_bytes());
    }
    let with_encoder = config.mode == Mode::Lbm && matches!(encoder, Encoder::Backend(_));
    let mut report = MetricsReport {
        student_accuracies,
        mean,
        sem,
        n_attempted: outcomes.len(),
        n_failed,
        partial: n_failed > 0,
        strata: Vec::new(),
        results: Vec::new(),
        manifest: RunManifest {
            schema_version: jsonl::SCHEMA_VERSION,
            config: config.clone(),
            dataset_hash: dataset.content_hash(),
            encoder_id: if config.mode == Mode::Lbm { encoder.id() } else { String::new() },
            decoder_id: decoder.id(),
            prompt_template_hash: prompt_template_hash(),
            split_digest: hex(&digest.finalize()),
            encoder_transcript: with_encoder.then(|| ENCODER_TRANSCRIPT.to_string()),
            decoder_transcript: DECODER_TRANSCRIPT.to_string(),
        },
    };
    if !dataset.profiles.is_empty() {
        report.strata = stratify_by_misconceptions(&report, &dataset.profiles).unwrap_or_default();
    }
    let mut bottlenecks = Vec::new();
    for o in outcomes {
        report.results.push(o.result);
        bottlenecks.extend(o.bottleneck);
    }
    Ok((report, bottlenecks))
}

/// Runs, records both backends, and writes every output file to `out_dir`.
pub fn run_and_save(
    config: &ExperimentConfig,
    dataset: &Dataset,
    encoder: &Encoder,
    decoder: Arc<dyn Backend>,
    out_dir: &Path,
) -> Result<MetricsReport> {
    let enc_rec = match encoder {
        Encoder::Backend(b) => Some(Arc::new(Recorder::new(b.clone()))),
        Encoder::GroundTruth => None,
    };
    let recorded = match &enc_rec {
        Some(r) => Encoder::Backend(r.clone()),
        None => Encoder::GroundTruth,
    };
    let dec_rec = Recorder::new(decoder);
    let (report, bottlenecks) = run_with(config, dataset, &recorded, &dec_rec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if let (Some(r), Some(name)) = (&enc_rec, &report.manifest.encoder_transcript) {
        r.save(&out_dir.join(name))?;
    }
    dec_rec.save(&out_dir.join(&report.manifest.decoder_transcript))?;
    write_report(&report, &bottlenecks, out_dir)?;
    Ok(report)
}

pub fn write_report(report: &MetricsReport, bottlenecks: &[Bottleneck], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join(REPORT_FILE);
    let text = serde_json::to_string_pretty(report).expect("serializable") + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    jsonl::write(&out_dir.join(STUDENTS_FILE), "student_result", &report.results)?;
    jsonl::write(&out_dir.join(BOTTLENECKS_FILE), "bottleneck", bottlenecks)?;
    let path = out_dir.join(TABLE_FILE);
    std::fs::write(&path, render_table(report)).map_err(|e| Error::io(&path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

pub fn render_table(report: &MetricsReport) -> String {
    let m = &report.manifest;
    let mut s = String::new();
    let _ = writeln!(s, "mode      {:?}", m.config.mode);
    let _ = writeln!(s, "encoder   {}", if m.encoder_id.is_empty() { "-" } else { &m.encoder_id });
    let _ = writeln!(s, "decoder   {}", m.decoder_id);
    let _ = writeln!(s, "budget    {}", m.config.budget);
    let _ = writeln!(s, "n_enc     {}", m.config.n_enc);
    let _ = writeln!(s, "students  {}", report.student_accuracies.len());
    let _ = writeln!(s, "accuracy  {} ± {} (SEM)", fmt_opt(report.mean), fmt_opt(report.sem));
    if report.partial {
        let _ = writeln!(s, "PARTIAL   {} of {} runs failed", report.n_failed, report.n_attempted);
    }
    if !report.strata.is_empty() {
        let _ = writeln!(s, "\nmisconceptions  n     mean    std");
        for st in &report.strata {
            let _ = writeln!(s, "{:<15} {:<5} {:.4}  {:.4}", st.label, st.n, st.mean, st.std);
        }
    }
    s
}

pub fn load_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Loads the dataset and backends named in `config`, runs, and saves.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<MetricsReport> {
    config.validate_paths()?;
    let dataset = load_dataset(&config.dataset)?;
    let encoder = match config.mode {
        Mode::Lbm => Encoder::connect(&config.encoder)?,
        Mode::Direct => Encoder::GroundTruth,
    };
    let decoder = connect(&config.decoder)?;
    run_and_save(config, &dataset, &encoder, decoder, out_dir)
}

/// Re-executes a saved run against its own transcripts and writes the
/// result to `out_dir`. The new `report.json` equals the old one byte for
/// byte when the run was deterministic.
pub fn rerun_from_manifest(report_path: &Path, out_dir: &Path) -> Result<MetricsReport> {
    let old = load_report(report_path)?;
    let dir = report_path.parent().unwrap_or(Path::new("."));
    let m = &old.manifest;
    let dataset = load_dataset(&m.config.dataset)?;
    if dataset.content_hash() != m.dataset_hash {
        return Err(Error::Config(format!(
            "dataset at {} changed since the run (hash mismatch)",
            m.config.dataset.display()
        )));
    }
    let replay = |name: &str, id: &str| -> Result<Arc<dyn Backend>> {
        let path = dir.join(name);
        let mut r = ReplayBackend::load(&path)?;
        if r.is_empty() {
            r = ReplayBackend::from_entries(Vec::new(), id);
        }
        Ok(Arc::new(r))
    };
    let encoder = match &m.encoder_transcript {
        Some(name) => Encoder::Backend(replay(name, &m.encoder_id)?),
        None => Encoder::GroundTruth,
    };
    let decoder = replay(&m.decoder_transcript, &m.decoder_id)?;
    run_and_save(&m.config, &dataset, &encoder, decoder, out_dir)
}

/// Writes `x<TAB>y<TAB>err` rows with a header line.
pub fn write_plot(path: &Path, x_label: &str, rows: &[(f64, f64, f64)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut s = format!("{x_label}\taccuracy\tsem\n");
    for (x, y, e) in rows {
        let _ = writeln!(s, "{x}\t{y}\t{e}");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn plot_row(x: f64, r: &MetricsReport) -> (f64, f64, f64) {
    (x, r.mean.unwrap_or(f64::NAN), r.sem.unwrap_or(0.0))
}

fn run_maybe_save(
    config: &ExperimentConfig,
    dataset: &Dataset,
    encoder: &Encoder,
    decoder: &Arc<dyn Backend>,
    out_dir: Option<PathBuf>,
) -> Result<MetricsReport> {
    match out_dir {
        Some(dir) => run_and_save(config, dataset, encoder, decoder.clone(), &dir),
        None => Ok(run_with(config, dataset, encoder, decoder.as_ref())?.0),
    }
}

/// One run per budget. Splits depend only on the seed, so all budgets see
/// the same splits; see [`same_splits`]. With `out_dir`, each run is saved
/// under `budget_<n>/` and the curve goes to `budget_sweep.tsv`.
pub fn bottleneck_sweep(
    config: &ExperimentConfig,
    dataset: &Dataset,
    encoder: &Encoder,
    decoder: &Arc<dyn Backend>,
    budgets: &[usize],
    out_dir: Option<&Path>,
) -> Result<Vec<MetricsReport>> {
    if budgets.is_empty() {
        return Err(Error::Config("budget sweep needs at least one budget".into()));
    }
    let reports = budgets
        .iter()
        .map(|&budget| {
            let cfg = ExperimentConfig { budget, ..config.clone() };
            run_maybe_save(&cfg, dataset, encoder, decoder, out_dir.map(|d| d.join(format!("budget_{budget}"))))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out_dir {
        let rows: Vec<_> = reports.iter().map(|r| plot_row(r.manifest.config.budget as f64, r)).collect();
        write_plot(&dir.join("budget_sweep.tsv"), "budget", &rows)?;
    }
    Ok(reports)
}

/// One run per encoder-history size. The x axis counts encoder questions
/// only. With `out_dir`, runs go under `n_enc_<n>/` and the curve to
/// `data_efficiency.tsv`.
pub fn data_efficiency_sweep(
    config: &ExperimentConfig,
    dataset: &Dataset,
    encoder: &Encoder,
    decoder: &Arc<dyn Backend>,
    n_encs: &[usize],
    out_dir: Option<&Path>,
) -> Result<Vec<MetricsReport>> {
    if n_encs.is_empty() {
        return Err(Error::Config("data-efficiency sweep needs at least one size".into()));
    }
    let reports = n_encs
        .iter()
        .map(|&n_enc| {
            let cfg = ExperimentConfig { n_enc, ..config.clone() };
            run_maybe_save(&cfg, dataset, encoder, decoder, out_dir.map(|d| d.join(format!("n_enc_{n_enc}"))))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out_dir {
        let rows: Vec<_> = reports.iter().map(|r| plot_row(r.manifest.config.n_enc as f64, r)).collect();
        write_plot(&dir.join("data_efficiency.tsv"), "encoder_questions", &rows)?;
    }
    Ok(reports)
}

/// True when both runs scored identical splits.
pub fn same_splits(a: &MetricsReport, b: &MetricsReport) -> bool {
    a.manifest.split_digest == b.manifest.split_digest
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub encoders: Vec<String>,
    pub decoders: Vec<String>,
    /// `cells[e][d]`: mean accuracy with encoder `e` and decoder `d`.
    pub cells: Vec<Vec<Option<f64>>>,
    /// Encoder with the best row mean.
    pub strongest_encoder: usize,
    /// Decoder with the best column mean.
    pub strongest_decoder: usize,
}

impl GridReport {
    pub fn render(&self) -> String {
        let mut s = String::from("encoder \\ decoder");
        for d in &self.decoders {
            let _ = write!(s, "\t{d}");
        }
        s.push('\n');
        for (e, row) in self.encoders.iter().zip(&self.cells) {
            s.push_str(e);
            for c in row {
                let _ = write!(s, "\t{}", fmt_opt(*c));
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "strongest encoder: {}; strongest decoder: {}",
            self.encoders[self.strongest_encoder], self.decoders[self.strongest_decoder]
        );
        s
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    values
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Accuracy for every (encoder, decoder) pair. With `out_dir`, each cell is
/// saved under `<encoder>__<decoder>/` and the matrix to `grid.txt`.
pub fn encoder_decoder_grid(
    config: &ExperimentConfig,
    dataset: &Dataset,
    encoders: &[(String, Encoder)],
    decoders: &[(String, Arc<dyn Backend>)],
    out_dir: Option<&Path>,
) -> Result<GridReport> {
    if encoders.len() + decoders.len() < 2 || encoders.is_empty() || decoders.is_empty() {
        return Err(Error::Config("grid needs at least one encoder, one decoder and two backends".into()));
    }
    let cfg = ExperimentConfig {
        mode: Mode::Lbm,
        ..config.clone()
    };
    let mut cells = Vec::with_capacity(encoders.len());
    let cell_dir = |e: &str, d: &str| out_dir.map(|dir| dir.join(format!("{}__{}", file_safe(e), file_safe(d))));
    for (en, enc) in encoders {
        let row = decoders
            .iter()
            .map(|(dn, dec)| Ok(run_maybe_save(&cfg, dataset, enc, dec, cell_dir(en, dn))?.mean))
            .collect::<Result<Vec<_>>>()?;
        cells.push(row);
    }
    let mean_of = |v: Vec<Option<f64>>| {
        let v: Vec<f64> = v.into_iter().flatten().collect();
        if v.is_empty() {
            f64::NEG_INFINITY
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let strongest_encoder = argmax(cells.iter().map(|row| mean_of(row.clone())));
    let strongest_decoder = argmax((0..decoders.len()).map(|d| mean_of(cells.iter().map(|r| r[d]).collect())));
    let grid = GridReport {
        encoders: encoders.iter().map(|(n, _)| n.clone()).collect(),
        decoders: decoders.iter().map(|(n, _)| n.clone()).collect(),
        cells,
        strongest_encoder,
        strongest_decoder,
    };
    if let Some(dir) = out_dir {
        let path = dir.join("grid.txt");
        std::fs::write(&path, grid.render()).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("grid.json");
        std::fs::write(&path, serde_json::to_string_pretty(&grid).expect("serializable") + "\n")
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(grid)
}

fn file_safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// What the injected arm appends to the bottleneck.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    /// The teacher's true one-sentence mastery statement.
    #[default]
    TeacherSentence,
    /// Nothing; both arms coincide.
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub construct: String,
    pub n_students: usize,
    pub n_questions: usize,
    pub without: f64,
    pub with: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub injection: Injection,
    pub rows: Vec<AblationRow>,
    pub without_mean: f64,
    pub without_std: f64,
    pub with_mean: f64,
    pub with_std: f64,
}

impl AblationReport {
    pub fn render(&self) -> String {
        let mut s = String::from("construct        n   without  with\n");
        for r in &self.rows {
            let _ = writeln!(s, "{:<16} {:<3} {:.4}   {:.4}", r.construct, r.n_students, r.without, r.with);
        }
        let _ = writeln!(
            s,
            "mean ± std       -   {:.4} ± {:.4}   {:.4} ± {:.4}",
            self.without_mean, self.without_std, self.with_mean, self.with_std
        );
        s
    }
}

/// For each construct: hide its questions from the encoder, encode, then
/// decode that construct's held-out questions with and without an appended
/// statement about it. Both arms share splits and bottlenecks.
pub fn steering_ablation_missing_construct(
    config: &ExperimentConfig,
    dataset: &Dataset,
    encoder: &Encoder,
    decoder: &dyn Backend,
    constructs: &[Operator],
    injection: Injection,
) -> Result<AblationReport> {
    config.validate()?;
    if dataset.profiles.is_empty() {
        return Err(Error::InvalidInput("steering ablation needs a synthetic dataset with profiles".into()));
    }
    let tests = test_trajectories(dataset, config.n_test_students)?;
    let bank = dataset.bank_index();
    let opts = config.encode_options();
    let mut rows = Vec::with_capacity(constructs.len());
    for &c in constructs {
        let jobs: Vec<(&Trajectory, u64)> = tests
            .iter()
            .flat_map(|t| config.seeds.iter().map(move |&s| (t, s)))
            .collect();
        let per_job = par::map(config.execution, &jobs, |(t, seed)| -> Result<Option<(usize, f64, f64)>> {
            let is_c = |i: &Interaction| bank.get(&i.question_id).is_some_and(|q| q.op == Some(c));
            let mut split = sample_split(t, &config.split_config(), *seed)?;
            let seen: std::collections::HashSet<_> = split.x_enc.iter().map(|i| i.question_id).collect();
            let held: Vec<Interaction> = t
                .interactions
                .iter()
                .filter(|i| is_c(i) && !seen.contains(&i.question_id))
                .take(config.n_pred)
                .cloned()
                .collect();
            if held.is_empty() {
                return Ok(None);
            }
            split.x_enc.retain(|i| !is_c(i));
            split.x_s.clear();
            split.y_s = held;
            let profile = dataset.profile(t.student_id).ok_or(Error::UnknownStudent(t.student_id.0))?;
            let b = encoder.bottleneck(dataset, &bank, &split, config.budget, &opts)?;
            let qs = targets(&bank, &split.y_s)?;
            let plain = accuracy(&decode(decoder, &b.text, &qs)?, &split.y_s)?.value;
            let injected_text = match injection {
                Injection::TeacherSentence => format!("{} {}", b.text, teacher_sentence(profile, c)),
                Injection::Empty => b.text.clone(),
            };
            let injected = accuracy(&decode(decoder, &injected_text, &qs)?, &split.y_s)?.value;
            Ok(Some((split.y_s.len(), plain, injected)))
        });
        let done: Vec<(usize, f64, f64)> = per_job.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
        if done.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no held-out {} questions among the test students",
                c.construct()
            )));
        }
        let n = done.len() as f64;
        rows.push(AblationRow {
            construct: c.construct().to_string(),
            n_students: done.len(),
            n_questions: done.iter().map(|d| d.0).sum(),
            without: done.iter().map(|d| d.1).sum::<f64>() / n,
            with: done.iter().map(|d| d.2).sum::<f64>() / n,
        });
    }
    let (without_mean, without_std) = mean_std(&rows.iter().map(|r| r.without).collect::<Vec<_>>());
    let (with_mean, with_std) = mean_std(&rows.iter().map(|r| r.with).collect::<Vec<_>>());
    Ok(AblationReport {
        injection,
        rows,
        without_mean,
        without_std,
        with_mean,
        with_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{OracleBackend, TranscriptEntry, WILDCARD_KEY};
    use crate::sim::{generate_dataset, SimConfig};

    fn small(n: usize) -> Dataset {
        generate_dataset(&SimConfig {
            n_students: n,
            n_questions: 600,
            per_student: 80,
            ..SimConfig::default()
        })
        .unwrap()
    }

    fn cfg(n: usize) -> ExperimentConfig {
        ExperimentConfig {
            n_test_students: n,
            execution: Execution::Sequential,
            ..ExperimentConfig::default()
        }
    }

    fn canned(text: &str, id: &str) -> Arc<dyn Backend> {
        Arc::new(ReplayBackend::from_entries(
            vec![TranscriptEntry {
                key: WILDCARD_KEY.into(),
                text: text.into(),
                backend: Some(id.into()),
            }],
            id,
        ))
    }

    #[test]
    fn sem_examples() {
        assert_eq!(compute_sem(&[0.5, 0.5, 0.5]).unwrap(), 0.0);
        assert!((compute_sem(&[0.4, 0.6]).unwrap() - 0.1).abs() < 1e-12);
        assert!(compute_sem(&[0.3]).is_err());
    }

    #[test]
    fn ground_truth_pipeline_hits_the_ceiling() {
        let d = small(30);
        let (r, b) = run_with(&cfg(30), &d, &Encoder::GroundTruth, &OracleBackend).unwrap();
        assert_eq!(r.mean, Some(1.0));
        assert_eq!(r.student_accuracies.len(), 30);
        assert_eq!(b.len(), 30);
        assert!(!r.partial);
        assert!(r.strata.iter().all(|s| s.mean == 1.0));
    }

    #[test]
    fn always_yes_direct_scores_the_base_rate() {
        let d = small(20);
        let c = ExperimentConfig {
            mode: Mode::Direct,
            ..cfg(20)
        };
        let (r, _) = run_with(&c, &d, &Encoder::GroundTruth, canned("Yes", "yes-man").as_ref()).unwrap();
        let targets: Vec<bool> = r
            .results
            .iter()
            .flat_map(|res| {
                let t = d.trajectory(res.student_id, res.segment).unwrap();
                res.target_ids
                    .iter()
                    .map(|q| t.interactions.iter().find(|i| i.question_id == *q).unwrap().correct)
                    .collect::<Vec<_>>()
            })
            .collect();
        let base = targets.iter().filter(|&&c| c).count() as f64 / targets.len() as f64;
        assert!((r.mean.unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn oracle_cannot_answer_direct_prompts_and_failures_are_recorded() {
        let d = small(5);
        let c = ExperimentConfig {
            mode: Mode::Direct,
            ..cfg(5)
        };
        let (r, _) = run_with(&c, &d, &Encoder::GroundTruth, &OracleBackend).unwrap();
        assert!(r.partial);
        assert_eq!(r.n_failed, 5);
        assert_eq!(r.mean, None);
    }

    #[test]
    fn strata_shapes() {
        let mut d = small(4);
        for (k, p) in d.profiles.iter_mut().enumerate() {
            p.misconceptions = vec![crate::sim::Misconception::RoundsDivDown; k];
        }
        let (r, _) = run_with(&cfg(4), &d, &Encoder::GroundTruth, &OracleBackend).unwrap();
        let strata = stratify_by_misconceptions(&r, &d.profiles).unwrap();
        assert_eq!(strata.iter().map(|s| s.label.as_str()).collect::<Vec<_>>(), ["0", "1", "2", "3+"]);
        assert!(strata.iter().all(|s| s.n == 1));
        for p in d.profiles.iter_mut() {
            p.misconceptions.clear();
        }
        assert_eq!(stratify_by_misconceptions(&r, &d.profiles).unwrap().len(), 1);
        assert!(stratify_by_misconceptions(&r, &[]).is_err());
        let change = compare_strata(&strata, &strata);
        assert!(change.iter().all(|c| c.relative == Some(0.0)));
    }

    #[test]
    fn sweep_reuses_splits() {
        let d = small(10);
        let oracle: Arc<dyn Backend> = Arc::new(OracleBackend);
        let enc = Encoder::Backend(oracle.clone());
        let dir = tempfile::tempdir().unwrap();
        let reports = bottleneck_sweep(&cfg(10), &d, &enc, &oracle, &[128, 256], Some(dir.path())).unwrap();
        assert!(dir.path().join("budget_256").join(REPORT_FILE).is_file());
        let plot = std::fs::read_to_string(dir.path().join("budget_sweep.tsv")).unwrap();
        assert_eq!(plot.lines().count(), 3);
        assert_eq!(reports.len(), 2);
        assert!(same_splits(&reports[0], &reports[1]));
        let single = bottleneck_sweep(&cfg(10), &d, &enc, &oracle, &[128], None).unwrap();
        assert_eq!(single[0], run_with(&cfg(10), &d, &enc, &OracleBackend).unwrap().0);
        assert!(bottleneck_sweep(&cfg(10), &d, &enc, &oracle, &[], None).is_err());
    }

    #[test]
    fn grid_rows_follow_the_encoder() {
        let d = small(10);
        let encoders = vec![
            ("truth".to_string(), Encoder::GroundTruth),
            ("blank".to_string(), Encoder::Backend(canned("", "blank"))),
        ];
        let decoders: Vec<(String, Arc<dyn Backend>)> =
            vec![("oracle".into(), Arc::new(OracleBackend)), ("oracle-2".into(), Arc::new(OracleBackend))];
        let g = encoder_decoder_grid(&cfg(10), &d, &encoders, &decoders, None).unwrap();
        assert_eq!(g.cells.len(), 2);
        assert!(g.cells.iter().all(|r| r.len() == 2 && r.iter().all(Option::is_some)));
        assert_eq!(g.strongest_encoder, 0);
        for col in 0..2 {
            assert!(g.cells[0][col].unwrap() >= g.cells[1][col].unwrap());
        }
        let same = run_with(&cfg(10), &d, &Encoder::GroundTruth, &OracleBackend).unwrap().0;
        assert_eq!(g.cells[0][0], same.mean);
    }

    #[test]
    fn empty_injection_leaves_arms_equal() {
        let d = small(12);
        let r = steering_ablation_missing_construct(
            &cfg(12),
            &d,
            &Encoder::Backend(Arc::new(OracleBackend)),
            &OracleBackend,
            &Operator::ALL,
            Injection::Empty,
        )
        .unwrap();
        assert_eq!(r.rows.len(), 4);
        assert!(r.rows.iter().all(|row| row.with == row.without));
    }

    #[test]
    fn config_parses_and_validates() {
        let c: ExperimentConfig = toml::from_str(
            "mode = \"direct\"\nbudget = 256\nseeds = [1, 2]\n[encoder]\nkind = \"ground_truth\"\n[decoder]\nkind = \"replay\"\ntranscript = \"t.jsonl\"\n",
        )
        .unwrap();
        assert_eq!(c.mode, Mode::Direct);
        assert_eq!(c.encoder, EncoderSpec::GroundTruth);
        assert!(c.validate().is_ok());
        assert!(ExperimentConfig { budget: 0, ..c.clone() }.validate().is_err());
        assert!(toml::from_str::<ExperimentConfig>("bogus = 1").is_err());
        assert_eq!(EncoderSpec::parse_short("ground-truth"), Some(EncoderSpec::GroundTruth));
    }
}
