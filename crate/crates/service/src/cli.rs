//! `lbm` command line.
//!
//! Exit status: 0 on success, 2 for usage and validation errors, 1 for any
//! other failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use lbm_core::bkt::{fit_and_evaluate, save_fits, BktConfig};
use lbm_core::config::load_toml;
use lbm_core::dataset::{load_dataset, save_dataset};
use lbm_core::gateway::{connect, Backend, BackendSpec};
use lbm_core::grpo::{finetune_via_gateway, manifest_path, run_toy, FinetunePlan, GrpoConfig, RewardWeights, ToyRunConfig, TrainerEndpoint};
use lbm_core::harness::{
    bottleneck_sweep, data_efficiency_sweep, encoder_decoder_grid, rerun_from_manifest, run_experiment,
    steering_ablation_missing_construct, Encoder, EncoderSpec, ExperimentConfig, Injection, Mode, MetricsReport,
};
use lbm_core::ingest::{dataset_from_records, filter_single_session, parse_records, SessionFilterConfig};
use lbm_core::par::Execution;
use lbm_core::pipeline::SplitMode;
use lbm_core::sim::{generate_dataset_with, Operator, SimConfig};
use serde::{Deserialize, Serialize};

use crate::server::{serve, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "lbm", version, about = "Language bottleneck models for knowledge tracing")]
struct Cli {
    /// Run data-parallel loops on all cores or on one.
    #[arg(long, global = true, value_enum, default_value = "parallel")]
    execution: ExecArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExecArg {
    Parallel,
    Sequential,
}

impl From<ExecArg> for Execution {
    fn from(e: ExecArg) -> Self {
        match e {
            ExecArg::Parallel => Execution::Parallel,
            ExecArg::Sequential => Execution::Sequential,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Turn a CSV interaction log into single-session trajectories.
    FilterSessions(FilterArgs),
    /// Run one experiment and write its report.
    RunExp(RunArgs),
    /// Re-run a saved experiment against its recorded transcripts.
    Rerun(RerunArgs),
    /// Sweep the bottleneck budget or the encoder history size.
    Sweep(SweepArgs),
    /// Accuracy for every encoder/decoder pair.
    Grid(GridArgs),
    /// Hide one construct from the encoder and inject a teacher statement.
    Ablate(AblateArgs),
    /// Train the toy template policy with GRPO.
    TrainToy(ToyArgs),
    /// Drive a real encoder through an external trainer.
    Finetune(FinetuneArgs),
    /// Fit per-skill BKT and score the last answers of test students.
    BktFit(BktArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// TOML simulator config, or `default`.
    #[arg(long, default_value = "default")]
    config: String,
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long)]
    students: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    slip: Option<f64>,
    #[arg(long)]
    guess: Option<f64>,
}

#[derive(Debug, Args)]
struct FilterArgs {
    /// CSV with student_id, question_id, question_text, answer_given,
    /// correct, timestamp, response_time.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML filter thresholds.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    min_response_time: Option<f64>,
    #[arg(long)]
    max_gap: Option<f64>,
    #[arg(long)]
    min_length: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Lbm,
    Direct,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Random,
    Last,
}

/// Experiment settings: a TOML file plus flag overrides.
#[derive(Debug, Args)]
struct ExpArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Backend for both roles: `oracle`, `replay:PATH`, `http:URL[#model]`.
    #[arg(long)]
    backend: Option<String>,
    /// Encoder: a backend short form or `ground-truth`.
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    decoder: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    n_enc: Option<usize>,
    #[arg(long)]
    n_pred: Option<usize>,
    #[arg(long, value_enum)]
    split_mode: Option<SplitArg>,
    /// Number of test students (the last N trajectories).
    #[arg(long)]
    students: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    cot: bool,
    /// Extra encoder instruction.
    #[arg(long)]
    steer: Option<String>,
    /// Text appended to every bottleneck before decoding.
    #[arg(long)]
    append: Option<String>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    exp: ExpArgs,
    #[arg(long, default_value = "runs/exp")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RerunArgs {
    /// A `report.json` written by `run-exp`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    exp: ExpArgs,
    #[arg(long, value_delimiter = ',', conflicts_with = "n_encs")]
    budgets: Option<Vec<usize>>,
    /// Encoder history sizes for a data-efficiency curve.
    #[arg(long, value_delimiter = ',')]
    n_encs: Option<Vec<usize>>,
    #[arg(long, default_value = "runs/sweep")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[command(flatten)]
    exp: ExpArgs,
    /// Comma-separated encoder short forms.
    #[arg(long, value_delimiter = ',', required = true)]
    encoders: Vec<String>,
    /// Comma-separated decoder short forms.
    #[arg(long, value_delimiter = ',', required = true)]
    decoders: Vec<String>,
    #[arg(long, default_value = "runs/grid")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InjectionArg {
    Teacher,
    Empty,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    exp: ExpArgs,
    #[arg(long, value_enum, default_value = "teacher")]
    injection: InjectionArg,
    #[arg(long, default_value = "runs/ablation")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ToyArgs {
    /// TOML with optional [sim], [task], [grpo] and [reward] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    kl: Option<f64>,
    #[arg(long)]
    w_omega: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value = "runs/toy")]
    out: PathBuf,
}

/// Settings for `finetune`. Credentials come from the environment
/// variables named in the backend and trainer tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub dataset: PathBuf,
    pub encoder: BackendSpec,
    pub decoder: BackendSpec,
    pub trainer: Option<TrainerEndpoint>,
    pub grpo: GrpoConfig,
    pub reward: RewardWeights,
    pub plan: FinetunePlan,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    trainer_url: Option<String>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, default_value = "runs/finetune")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BktArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// TOML BKT settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    test_students: Option<usize>,
    #[arg(long, default_value = "runs/bkt")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    decoder: Option<String>,
}

/// A bad argument value that clap could not catch.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Invalid(String);

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn backend_arg(s: &str) -> anyhow::Result<BackendSpec> {
    BackendSpec::parse_short(s)
        .ok_or_else(|| invalid(format!("unrecognized backend {s:?}; use oracle, replay:PATH or http:URL[#model]")))
}

fn encoder_arg(s: &str) -> anyhow::Result<EncoderSpec> {
    EncoderSpec::parse_short(s).ok_or_else(|| {
        invalid(format!(
            "unrecognized encoder {s:?}; use ground-truth, oracle, replay:PATH or http:URL[#model]"
        ))
    })
}

fn experiment_config(a: &ExpArgs, exec: Execution) -> anyhow::Result<ExperimentConfig> {
    let mut c = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig {
            execution: exec,
            ..ExperimentConfig::default()
        },
    };
    if let Some(d) = &a.dataset {
        c.dataset = d.clone();
    }
    if let Some(m) = a.mode {
        c.mode = match m {
            ModeArg::Lbm => Mode::Lbm,
            ModeArg::Direct => Mode::Direct,
        };
    }
    if let Some(b) = &a.backend {
        c.decoder = backend_arg(b)?;
        c.encoder = encoder_arg(b)?;
    }
    if let Some(e) = &a.encoder {
        c.encoder = encoder_arg(e)?;
    }
    if let Some(d) = &a.decoder {
        c.decoder = backend_arg(d)?;
    }
    if let Some(v) = a.budget {
        c.budget = v;
    }
    if let Some(v) = a.n_enc {
        c.n_enc = v;
    }
    if let Some(v) = a.n_pred {
        c.n_pred = v;
    }
    if let Some(v) = a.split_mode {
        c.split_mode = match v {
            SplitArg::Random => SplitMode::Random,
            SplitArg::Last => SplitMode::Last,
        };
    }
    if let Some(v) = a.students {
        c.n_test_students = v;
    }
    if let Some(v) = &a.seeds {
        c.seeds = v.clone();
    }
    if a.cot {
        c.chain_of_thought = true;
    }
    if let Some(v) = &a.steer {
        c.steering.encoder_instruction = Some(v.clone());
    }
    if let Some(v) = &a.append {
        c.steering.append_to_bottleneck = Some(v.clone());
    }
    c.validate_paths()?;
    Ok(c)
}

fn print_summary(label: &str, r: &MetricsReport) {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    println!(
        "{label}: accuracy {} ± {} over {} students{}",
        fmt(r.mean),
        fmt(r.sem),
        r.student_accuracies.len(),
        if r.partial { format!(" ({} failed)", r.n_failed) } else { String::new() }
    );
}

fn gen_data(a: &GenDataArgs, exec: Execution) -> anyhow::Result<()> {
    let mut cfg: SimConfig = if a.config == "default" {
        SimConfig::default()
    } else {
        load_toml(Path::new(&a.config))?
    };
    if let Some(v) = a.students {
        cfg.n_students = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.slip {
        cfg.slip_rate = v;
    }
    if let Some(v) = a.guess {
        cfg.guess_rate = v;
    }
    let d = generate_dataset_with(&cfg, exec)?;
    save_dataset(&d, &a.out)?;
    println!(
        "wrote {} students × {} answers to {} (hash {})",
        d.trajectories.len(),
        cfg.per_student,
        a.out.display(),
        d.content_hash()
    );
    Ok(())
}

fn filter_sessions(a: &FilterArgs) -> anyhow::Result<()> {
    let mut cfg: SessionFilterConfig = match &a.config {
        Some(p) => load_toml(p)?,
        None => SessionFilterConfig::default(),
    };
    if let Some(v) = a.min_response_time {
        cfg.min_response_time = v;
    }
    if let Some(v) = a.max_gap {
        cfg.max_gap = v;
    }
    if let Some(v) = a.min_length {
        cfg.min_length = v;
    }
    cfg.validate()?;
    let file = std::fs::File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let records = parse_records(file)?;
    let trajectories = filter_single_session(&records, &cfg);
    let n = trajectories.len();
    save_dataset(&dataset_from_records(&records, trajectories), &a.out)?;
    println!("kept {n} sessions from {} records; wrote {}", records.len(), a.out.display());
    Ok(())
}

fn connect_encoder(c: &ExperimentConfig) -> anyhow::Result<Encoder> {
    Ok(Encoder::connect(&c.encoder)?)
}

fn sweep(a: &SweepArgs, exec: Execution) -> anyhow::Result<()> {
    let c = experiment_config(&a.exp, exec)?;
    let dataset = load_dataset(&c.dataset)?;
    let encoder = connect_encoder(&c)?;
    let decoder = connect(&c.decoder)?;
    let reports = match (&a.budgets, &a.n_encs) {
        (_, Some(n_encs)) => data_efficiency_sweep(&c, &dataset, &encoder, &decoder, n_encs, Some(&a.out))?,
        (Some(budgets), None) => bottleneck_sweep(&c, &dataset, &encoder, &decoder, budgets, Some(&a.out))?,
        (None, None) => bottleneck_sweep(&c, &dataset, &encoder, &decoder, &[128, 256, 512], Some(&a.out))?,
    };
    for r in &reports {
        print_summary(
            &format!("budget {} n_enc {}", r.manifest.config.budget, r.manifest.config.n_enc),
            r,
        );
    }
    Ok(())
}

fn grid(a: &GridArgs, exec: Execution) -> anyhow::Result<()> {
    let c = experiment_config(&a.exp, exec)?;
    let dataset = load_dataset(&c.dataset)?;
    let encoders = a
        .encoders
        .iter()
        .map(|s| Ok((s.clone(), Encoder::connect(&encoder_arg(s)?)?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let decoders = a
        .decoders
        .iter()
        .map(|s| Ok((s.clone(), connect(&backend_arg(s)?)?)))
        .collect::<anyhow::Result<Vec<(String, Arc<dyn Backend>)>>>()?;
    let g = encoder_decoder_grid(&c, &dataset, &encoders, &decoders, Some(&a.out))?;
    print!("{}", g.render());
    Ok(())
}

fn ablate(a: &AblateArgs, exec: Execution) -> anyhow::Result<()> {
    let c = experiment_config(&a.exp, exec)?;
    let dataset = load_dataset(&c.dataset)?;
    let encoder = connect_encoder(&c)?;
    let decoder = connect(&c.decoder)?;
    let injection = match a.injection {
        InjectionArg::Teacher => Injection::TeacherSentence,
        InjectionArg::Empty => Injection::Empty,
    };
    let r = steering_ablation_missing_construct(&c, &dataset, &encoder, decoder.as_ref(), &Operator::ALL, injection)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("ablation.json"), serde_json::to_string_pretty(&r)? + "\n")?;
    std::fs::write(a.out.join("ablation.txt"), r.render())?;
    print!("{}", r.render());
    Ok(())
}

fn train_toy(a: &ToyArgs, exec: Execution) -> anyhow::Result<()> {
    let mut cfg: ToyRunConfig = match &a.config {
        Some(p) => load_toml(p)?,
        None => ToyRunConfig::default(),
    };
    if let Some(v) = a.learning_rate {
        cfg.grpo.learning_rate = v;
    }
    if let Some(v) = a.kl {
        cfg.grpo.kl_coefficient = v;
    }
    if let Some(v) = a.w_omega {
        cfg.reward.w_omega = v;
    }
    if let Some(v) = a.epochs {
        cfg.grpo.epochs = v;
    }
    let trace = run_toy(&cfg, exec)?;
    std::fs::create_dir_all(&a.out)?;
    trace.save(&a.out.join("trace.jsonl"))?;
    let f = trace.final_step();
    println!(
        "{} steps: expected accuracy {:.4} (ceiling {:.4}), misconception mention rate {:.4} -> {:.4}",
        trace.steps.len(),
        f.expected_accuracy,
        trace.ceiling_accuracy,
        trace.initial.expected_omega_rate,
        f.expected_omega_rate
    );
    Ok(())
}

fn finetune(a: &FinetuneArgs, exec: Execution) -> anyhow::Result<()> {
    let mut cfg: FinetuneConfig = load_toml(&a.config)?;
    if cfg.dataset.is_relative() {
        if let Some(dir) = a.config.parent() {
            cfg.dataset = dir.join(&cfg.dataset);
        }
    }
    if let Some(url) = &a.trainer_url {
        cfg.trainer.get_or_insert_with(TrainerEndpoint::default).url = url.clone();
    }
    if let Some(m) = a.max_steps {
        cfg.plan.max_steps = Some(m);
    }
    let dataset = load_dataset(&cfg.dataset)?;
    let encoder = connect(&cfg.encoder)?;
    let decoder = connect(&cfg.decoder)?;
    std::fs::create_dir_all(&a.out)?;
    let m = finetune_via_gateway(
        encoder.as_ref(),
        decoder.as_ref(),
        cfg.trainer.as_ref(),
        &dataset,
        &cfg.grpo,
        &cfg.reward,
        &cfg.plan,
        &manifest_path(&a.out),
        exec,
    )?;
    println!("{} steps completed; manifest in {}", m.steps_completed, manifest_path(&a.out).display());
    Ok(())
}

fn bkt_fit(a: &BktArgs, exec: Execution) -> anyhow::Result<()> {
    let mut cfg: BktConfig = match &a.config {
        Some(p) => load_toml(p)?,
        None => BktConfig::default(),
    };
    if let Some(v) = a.test_students {
        cfg.n_test_students = v;
    }
    let dataset = load_dataset(&a.dataset)?;
    let report = fit_and_evaluate(&dataset, &cfg, exec)?;
    std::fs::create_dir_all(&a.out)?;
    save_fits(&report.fits, &a.out.join("bkt_params.jsonl"))?;
    std::fs::write(a.out.join("bkt_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    for f in &report.fits {
        println!(
            "{:<16} init {:.3} learn {:.3} guess {:.3} slip {:.3}",
            f.skill, f.params.p_init, f.params.p_learn, f.params.p_guess, f.params.p_slip
        );
    }
    println!(
        "accuracy on the last {} answers of {} test students: {:.4}",
        cfg.n_last,
        report.student_accuracies.len(),
        report.mean_accuracy
    );
    Ok(())
}

fn serve_cmd(a: &ServeArgs) -> anyhow::Result<()> {
    let mut cfg: ServiceConfig = match &a.config {
        Some(p) => {
            let mut c: ServiceConfig = load_toml(p)?;
            if c.dataset.is_relative() {
                if let Some(dir) = p.parent() {
                    c.dataset = dir.join(&c.dataset);
                }
            }
            c
        }
        None => ServiceConfig::default(),
    };
    if let Some(v) = &a.dataset {
        cfg.dataset = v.clone();
    }
    if let Some(v) = &a.bind {
        cfg.bind = v.clone();
    }
    if let Some(v) = &a.encoder {
        cfg.encoder = encoder_arg(v)?;
    }
    if let Some(v) = &a.decoder {
        cfg.decoder = backend_arg(v)?;
    }
    cfg.validate()?;
    if !cfg.dataset.is_dir() {
        return Err(invalid(format!("dataset directory {} not found", cfg.dataset.display())));
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(serve(cfg))
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let exec: Execution = cli.execution.into();
    match cli.command {
        Command::GenData(a) => gen_data(&a, exec),
        Command::FilterSessions(a) => filter_sessions(&a),
        Command::RunExp(a) => {
            let c = experiment_config(&a.exp, exec)?;
            let r = run_experiment(&c, &a.out)?;
            print_summary(&format!("report in {}", a.out.display()), &r);
            Ok(())
        }
        Command::Rerun(a) => {
            let r = rerun_from_manifest(&a.report, &a.out)?;
            print_summary(&format!("report in {}", a.out.display()), &r);
            Ok(())
        }
        Command::Sweep(a) => sweep(&a, exec),
        Command::Grid(a) => grid(&a, exec),
        Command::Ablate(a) => ablate(&a, exec),
        Command::TrainToy(a) => train_toy(&a, exec),
        Command::Finetune(a) => finetune(&a, exec),
        Command::BktFit(a) => bkt_fit(&a, exec),
        Command::Serve(a) => serve_cmd(&a),
    }
}

/// Exit status for an error: 2 for bad input, 1 otherwise.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    if e.downcast_ref::<Invalid>().is_some() {
        return 2;
    }
    match e.downcast_ref::<lbm_core::Error>() {
        Some(core) if core.is_validation() => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
