//! HTTP service behind the steering workbench.
//!
//! | method | path                           | body / query                          |
//! |--------|--------------------------------|---------------------------------------|
//! | GET    | `/health`                      |                                       |
//! | GET    | `/students`                    |                                       |
//! | GET    | `/students/{id}/trajectory`    | `?segment=0`                          |
//! | POST   | `/encode`                      | [`EncodeRequest`]                     |
//! | POST   | `/decode`                      | [`DecodeRequest`]                     |
//!
//! Errors are `{"error": "..."}` with status 404 (unknown student or
//! question), 422 (invalid request, trajectory too short) or 502 (backend
//! failure). The dataset is loaded once and never modified.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lbm_core::dataset::{load_dataset, Dataset};
use lbm_core::gateway::{connect, Backend, BackendSpec};
use lbm_core::harness::{Encoder, EncoderSpec};
use lbm_core::pipeline::{decode, sample_split, EncodeOptions, SplitConfig, Verdict};
use lbm_core::sim::{Question, QuestionId, StudentId, Trajectory};
use lbm_core::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RequestLimits {
    pub max_questions: usize,
    pub max_budget: usize,
}

impl Default for RequestLimits {
    fn default() -> Self {
        RequestLimits {
            max_questions: 64,
            max_budget: 4096,
        }
    }
}

/// Service settings. Credentials are never stored here: an HTTP backend
/// names the environment variable that holds its key (`api_key_env`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub dataset: PathBuf,
    pub encoder: EncoderSpec,
    pub decoder: BackendSpec,
    pub limits: RequestLimits,
    /// Defaults for `/encode` fields the client leaves out.
    pub split: SplitConfig,
    pub budget: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8080".into(),
            dataset: PathBuf::from("data"),
            encoder: EncoderSpec::Oracle,
            decoder: BackendSpec::Oracle,
            limits: RequestLimits::default(),
            split: SplitConfig::default(),
            budget: 128,
        }
    }
}

impl ServiceConfig {
    pub fn bind_addr(&self) -> lbm_core::Result<SocketAddr> {
        self.bind
            .parse()
            .map_err(|e| Error::Config(format!("bind address {:?}: {e}", self.bind)))
    }

    pub fn validate(&self) -> lbm_core::Result<()> {
        self.bind_addr()?;
        self.split.validate()?;
        if self.budget == 0 || self.budget > self.limits.max_budget {
            return Err(Error::Config(format!(
                "default budget must be in 1..={}",
                self.limits.max_budget
            )));
        }
        Ok(())
    }
}

pub struct AppState {
    dataset: Dataset,
    question_index: HashMap<QuestionId, usize>,
    encoder: Encoder,
    decoder: Arc<dyn Backend>,
    config: ServiceConfig,
}

impl AppState {
    pub fn new(dataset: Dataset, encoder: Encoder, decoder: Arc<dyn Backend>, config: ServiceConfig) -> Self {
        let question_index = dataset.bank.iter().enumerate().map(|(i, q)| (q.id, i)).collect();
        AppState {
            dataset,
            question_index,
            encoder,
            decoder,
            config,
        }
    }

    /// Loads the dataset and connects the configured backends.
    pub fn from_config(config: ServiceConfig) -> lbm_core::Result<Self> {
        config.validate()?;
        let dataset = load_dataset(&config.dataset)?;
        let encoder = Encoder::connect(&config.encoder)?;
        let decoder = connect(&config.decoder)?;
        Ok(AppState::new(dataset, encoder, decoder, config))
    }

    fn question(&self, id: QuestionId) -> Option<&Question> {
        self.question_index.get(&id).map(|&i| &self.dataset.bank[i])
    }

    fn trajectory(&self, id: StudentId, segment: u32) -> Result<&Trajectory, ApiError> {
        self.dataset
            .trajectory(id, segment)
            .ok_or_else(|| ApiError::not_found(format!("student {} segment {segment} not found", id.0)))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn not_found(message: String) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            message,
        }
    }

    fn unprocessable(message: String) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownStudent(_) | Error::UnknownQuestion(_) => StatusCode::NOT_FOUND,
            Error::TrajectoryTooShort { .. } | Error::Config(_) | Error::InvalidInput(_) | Error::Grammar { .. } => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            Error::Gateway(_) | Error::Unsupported(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub trajectories: usize,
    pub encoder_id: String,
    pub decoder_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentEntry {
    pub student_id: StudentId,
    pub segment: u32,
    pub trajectory_length: usize,
    /// Known only for synthetic students.
    pub misconception_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryItem {
    pub question_id: QuestionId,
    pub question_text: String,
    pub construct: String,
    pub given_answer: i64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryView {
    pub student_id: StudentId,
    pub segment: u32,
    pub interactions: Vec<TrajectoryItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodeRequest {
    pub student_id: StudentId,
    #[serde(default)]
    pub segment: u32,
    pub n_enc: Option<usize>,
    pub n_pred: Option<usize>,
    pub budget: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    pub steering_text: Option<String>,
    #[serde(default)]
    pub chain_of_thought: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckView {
    pub text: String,
    pub token_count: usize,
    pub budget: usize,
    pub encoder_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitView {
    pub seed: u64,
    pub encoder_question_ids: Vec<QuestionId>,
    pub target_question_ids: Vec<QuestionId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub student_id: StudentId,
    pub segment: u32,
    pub bottleneck: BottleneckView,
    pub split: SplitView,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRequest {
    pub summary: String,
    pub question_ids: Vec<QuestionId>,
    /// Used only to look up true answers for scoring, never for decoding.
    pub student_id: Option<StudentId>,
    #[serde(default)]
    pub segment: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionView {
    pub question_id: QuestionId,
    pub question_text: String,
    pub verdict: Verdict,
    pub predicted_correct: Option<bool>,
    /// Whether the student actually answered correctly, when known.
    pub truth: Option<bool>,
    /// Whether the prediction matched the truth; abstentions never match.
    pub matches: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResponse {
    pub decoder_id: String,
    pub predictions: Vec<PredictionView>,
    /// Over predictions with a known truth.
    pub accuracy: Option<f64>,
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/students", get(students_handler))
        .route("/students/{id}/trajectory", get(trajectory_handler))
        .route("/encode", post(encode_handler))
        .route("/decode", post(decode_handler))
        .with_state(state)
}

async fn health(State(s): State<Shared>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        trajectories: s.dataset.trajectories.len(),
        encoder_id: s.encoder.id(),
        decoder_id: s.decoder.id(),
    })
}

pub fn list_students(dataset: &Dataset) -> Vec<StudentEntry> {
    let mut out: Vec<StudentEntry> = dataset
        .trajectories
        .iter()
        .map(|t| StudentEntry {
            student_id: t.student_id,
            segment: t.segment,
            trajectory_length: t.interactions.len(),
            misconception_count: dataset.profile(t.student_id).map(|p| p.misconceptions.len()),
        })
        .collect();
    out.sort_by_key(|e| (e.student_id, e.segment));
    out
}

async fn students_handler(State(s): State<Shared>) -> Json<Vec<StudentEntry>> {
    Json(list_students(&s.dataset))
}

#[derive(Debug, Deserialize)]
struct SegmentQuery {
    #[serde(default)]
    segment: u32,
}

async fn trajectory_handler(
    State(s): State<Shared>,
    Path(id): Path<u64>,
    Query(q): Query<SegmentQuery>,
) -> Result<Json<TrajectoryView>, ApiError> {
    let t = s.trajectory(StudentId(id), q.segment)?;
    let interactions = t
        .interactions
        .iter()
        .map(|i| {
            let question = s.question(i.question_id).ok_or(Error::UnknownQuestion(i.question_id.0))?;
            Ok(TrajectoryItem {
                question_id: i.question_id,
                question_text: question.text.clone(),
                construct: question.construct.clone(),
                given_answer: i.given_answer,
                correct: i.correct,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(Json(TrajectoryView {
        student_id: t.student_id,
        segment: t.segment,
        interactions,
    }))
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        message: format!("worker failed: {e}"),
    })?
}

pub fn encode_student(s: &AppState, req: &EncodeRequest) -> Result<EncodeResponse, ApiError> {
    let budget = req.budget.unwrap_or(s.config.budget);
    if budget == 0 || budget > s.config.limits.max_budget {
        return Err(ApiError::unprocessable(format!(
            "budget must be in 1..={}",
            s.config.limits.max_budget
        )));
    }
    let split_cfg = SplitConfig {
        n_enc: req.n_enc.unwrap_or(s.config.split.n_enc),
        n_pred: req.n_pred.unwrap_or(s.config.split.n_pred),
        n_recon: 0,
        ..s.config.split
    };
    split_cfg.validate()?;
    let t = s.trajectory(req.student_id, req.segment)?;
    let split = sample_split(t, &split_cfg, req.seed)?;
    let bank = s.dataset.bank_index();
    let opts = EncodeOptions {
        chain_of_thought: req.chain_of_thought,
        steering_text: req.steering_text.clone(),
    };
    let b = s.encoder.bottleneck(&s.dataset, &bank, &split, budget, &opts)?;
    Ok(EncodeResponse {
        student_id: t.student_id,
        segment: t.segment,
        bottleneck: BottleneckView {
            text: b.text,
            token_count: b.token_count,
            budget,
            encoder_id: b.encoder_id,
        },
        split: SplitView {
            seed: req.seed,
            encoder_question_ids: split.x_enc.iter().map(|i| i.question_id).collect(),
            target_question_ids: split.y_questions(),
        },
    })
}

async fn encode_handler(State(s): State<Shared>, Json(req): Json<EncodeRequest>) -> Result<Json<EncodeResponse>, ApiError> {
    blocking(move || encode_student(&s, &req)).await.map(Json)
}

/// Decodes from the summary text alone; the student, if named, only
/// supplies true answers for the match flags.
pub fn decode_summary(s: &AppState, req: &DecodeRequest) -> Result<DecodeResponse, ApiError> {
    if req.question_ids.len() > s.config.limits.max_questions {
        return Err(ApiError::unprocessable(format!(
            "at most {} questions per request",
            s.config.limits.max_questions
        )));
    }
    let questions: Vec<&Question> = req
        .question_ids
        .iter()
        .map(|&id| s.question(id).ok_or(Error::UnknownQuestion(id.0)))
        .collect::<Result<_, _>>()?;
    let truth_source = match req.student_id {
        Some(id) => Some(s.trajectory(id, req.segment)?),
        None => None,
    };
    let set = decode(s.decoder.as_ref(), &req.summary, &questions)?;
    let predictions: Vec<PredictionView> = set
        .predictions
        .into_iter()
        .zip(&questions)
        .map(|(p, q)| {
            let truth = truth_source.and_then(|t| {
                t.interactions
                    .iter()
                    .rev()
                    .find(|i| i.question_id == p.question_id)
                    .map(|i| i.correct)
            });
            let predicted_correct = p.verdict.predicts_correct();
            PredictionView {
                question_id: p.question_id,
                question_text: q.text.clone(),
                verdict: p.verdict,
                predicted_correct,
                truth,
                matches: truth.map(|t| predicted_correct == Some(t)),
            }
        })
        .collect();
    let scored: Vec<bool> = predictions.iter().filter_map(|p| p.matches).collect();
    let accuracy = (!scored.is_empty()).then(|| scored.iter().filter(|&&m| m).count() as f64 / scored.len() as f64);
    Ok(DecodeResponse {
        decoder_id: s.decoder.id(),
        predictions,
        accuracy,
    })
}

async fn decode_handler(State(s): State<Shared>, Json(req): Json<DecodeRequest>) -> Result<Json<DecodeResponse>, ApiError> {
    blocking(move || decode_summary(&s, &req)).await.map(Json)
}

pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let addr = config.bind_addr()?;
    let state = Arc::new(AppState::from_config(config)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, trajectories = state.dataset.trajectories.len(), "serving");
    axum::serve(listener, router(state)).await?;
    Ok(())
}
