use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use lbm_core::dataset::Dataset;
use lbm_core::gateway::{Backend, OracleBackend, ReplayBackend, TranscriptEntry, WILDCARD_KEY};
use lbm_core::harness::Encoder;
use lbm_core::sim::{generate_dataset, SimConfig, StudentProfile};
use lbm_core::summary::render_canonical;
use lbm_service::server::{router, AppState, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn dataset() -> Dataset {
    generate_dataset(&SimConfig {
        n_students: 3,
        n_questions: 200,
        per_student: 60,
        ..SimConfig::default()
    })
    .unwrap()
}

fn canned(text: &str) -> Arc<dyn Backend> {
    Arc::new(ReplayBackend::from_entries(
        vec![TranscriptEntry {
            key: WILDCARD_KEY.into(),
            text: text.into(),
            backend: Some("canned".into()),
        }],
        "canned",
    ))
}

fn app_with(d: Dataset, encoder: Encoder) -> axum::Router {
    router(Arc::new(AppState::new(d, encoder, Arc::new(OracleBackend), ServiceConfig::default())))
}

fn app() -> axum::Router {
    app_with(dataset(), Encoder::GroundTruth)
}

async fn call(app: axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, value)
}

/// Compares against `tests/golden/<name>.json`; `UPDATE_GOLDEN=1` rewrites.
fn golden(name: &str, value: &Value) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.json"));
    let text = serde_json::to_string_pretty(value).unwrap() + "\n";
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &text).unwrap();
        return;
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing {}; run with UPDATE_GOLDEN=1", path.display()));
    assert_eq!(text, want, "response shape for {name} changed");
}

#[tokio::test]
async fn health_reports_backends() {
    let (status, body) = call(app(), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    golden("health", &body);
}

#[tokio::test]
async fn students_listing() {
    let d = dataset();
    let counts: Vec<usize> = d.profiles.iter().map(|p| p.misconceptions.len()).collect();
    let (status, body) = call(app_with(d, Encoder::GroundTruth), "GET", "/students", None).await;
    assert_eq!(status, StatusCode::OK);
    let list = body.as_array().unwrap();
    assert_eq!(list.len(), 3);
    for (entry, c) in list.iter().zip(counts) {
        assert_eq!(entry["misconception_count"], json!(c));
    }
    golden("students", &body);

    let (_, empty) = call(app_with(Dataset::default(), Encoder::GroundTruth), "GET", "/students", None).await;
    assert_eq!(empty, json!([]));
}

#[tokio::test]
async fn trajectory_view() {
    let (status, body) = call(app(), "GET", "/students/1/trajectory", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["interactions"].as_array().unwrap().len(), 60);
    golden("trajectory", &body);
    let (status, _) = call(app(), "GET", "/students/99/trajectory", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn encode_returns_the_backend_summary() {
    let a = app_with(dataset(), Encoder::Backend(canned("Mastered: addition.")));
    let (status, body) = call(a, "POST", "/encode", Some(json!({"student_id": 0, "n_enc": 20}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["bottleneck"]["text"], "Mastered: addition.");
    assert_eq!(body["split"]["encoder_question_ids"].as_array().unwrap().len(), 20);
    assert_eq!(body["split"]["target_question_ids"].as_array().unwrap().len(), 4);
    golden("encode", &body);
}

#[tokio::test]
async fn encode_errors() {
    let (status, body) = call(app(), "POST", "/encode", Some(json!({"student_id": 42}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND, "{body}");
    let (status, _) = call(app(), "POST", "/encode", Some(json!({"student_id": 0, "n_enc": 500}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(app(), "POST", "/encode", Some(json!({"student_id": 0, "budget": 0}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let empty: Arc<dyn Backend> = Arc::new(ReplayBackend::from_entries(vec![], "empty"));
    let a = app_with(dataset(), Encoder::Backend(empty));
    let (status, body) = call(a, "POST", "/encode", Some(json!({"student_id": 0}))).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert!(body["error"].as_str().is_some_and(|m| !m.is_empty()));
}

/// A student with a misconception and questions where it bites.
fn misconception_case(d: &Dataset) -> Option<(StudentProfile, Vec<u64>, Vec<u64>)> {
    let bank = d.bank_index();
    for p in &d.profiles {
        if p.misconceptions.is_empty() {
            continue;
        }
        let t = d.trajectory(p.id, 0)?;
        let (mut bites, mut plain) = (Vec::new(), Vec::new());
        for i in &t.interactions {
            let q = bank[&i.question_id];
            let (op, l, r) = q.operands()?;
            let clean = StudentProfile {
                misconceptions: vec![],
                ..p.clone()
            };
            if p.deterministic_answer(op, l, r) != clean.deterministic_answer(op, l, r) {
                bites.push(i.question_id.0);
            } else if p.mastered.contains(&op) && i.correct {
                plain.push(i.question_id.0);
            }
        }
        if !bites.is_empty() && plain.len() >= 2 {
            bites.truncate(2);
            plain.truncate(2);
            return Some((p.clone(), bites, plain));
        }
    }
    None
}

#[tokio::test]
async fn decode_scores_and_reacts_to_edits() {
    let d = generate_dataset(&SimConfig {
        n_students: 20,
        n_questions: 300,
        per_student: 80,
        ..SimConfig::default()
    })
    .unwrap();
    let (profile, bites, plain) = misconception_case(&d).expect("some student has a visible misconception");
    let a = app_with(d, Encoder::GroundTruth);
    let ids: Vec<u64> = bites.iter().chain(&plain).copied().collect();
    let summary = render_canonical(&profile);
    let req = json!({"summary": summary, "question_ids": ids, "student_id": profile.id.0});
    let (status, body) = call(a.clone(), "POST", "/decode", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["accuracy"], json!(1.0));
    assert!(body["predictions"].as_array().unwrap().iter().all(|p| p["matches"] == json!(true)));

    let edited = summary[..summary.find(" Misconceptions:").unwrap()].to_string();
    let req = json!({"summary": edited, "question_ids": ids, "student_id": profile.id.0});
    let (_, after) = call(a.clone(), "POST", "/decode", Some(req)).await;
    for (before, after) in body["predictions"].as_array().unwrap().iter().zip(after["predictions"].as_array().unwrap()) {
        let id = before["question_id"].as_u64().unwrap();
        let flipped = before["verdict"] != after["verdict"];
        assert_eq!(flipped, bites.contains(&id), "question {id}");
    }
    assert!(after["accuracy"].as_f64().unwrap() < 1.0);

    // no truth without a student; verdicts unchanged
    let req = json!({"summary": summary, "question_ids": ids});
    let (_, anon) = call(a.clone(), "POST", "/decode", Some(req)).await;
    assert_eq!(anon["accuracy"], Value::Null);
    for (x, y) in anon["predictions"].as_array().unwrap().iter().zip(body["predictions"].as_array().unwrap()) {
        assert_eq!(x["verdict"], y["verdict"]);
        assert_eq!(x["truth"], Value::Null);
    }
}

#[tokio::test]
async fn decode_edge_cases() {
    let (status, body) = call(app(), "POST", "/decode", Some(json!({"summary": "", "question_ids": []}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["predictions"], json!([]));
    golden("decode_empty", &body);
    let (status, _) = call(app(), "POST", "/decode", Some(json!({"summary": "", "question_ids": [99999]}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let all = "Mastered: addition, subtraction, multiplication, division. Not mastered: none. Misconceptions: none.";
    let (status, body) = call(app(), "POST", "/decode", Some(json!({"summary": all, "question_ids": [0, 1], "student_id": 0}))).await;
    assert_eq!(status, StatusCode::OK);
    golden("decode", &body);
    let (status, _) = call(app(), "POST", "/decode", Some(json!({"summary": all, "question_ids": [0], "bogus": 1}))).await;
    assert!(status.is_client_error());
}
