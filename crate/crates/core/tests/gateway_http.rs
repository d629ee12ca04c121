mod common;

use lbm_core::gateway::{Backend, CompletionRequest, GatewayError, HttpBackend, HttpSpec, RetryPolicy};
use serde_json::Value;

fn request() -> CompletionRequest {
    CompletionRequest {
        system_text: "sys".into(),
        user_text: "user".into(),
        max_new_tokens: 16,
        temperature: 0.0,
        stop: vec!["\n".into()],
        seed: Some(3),
    }
}

fn spec(url: &str, attempts: u32) -> HttpSpec {
    HttpSpec {
        endpoint: url.into(),
        model: "m1".into(),
        timeout_secs: 10,
        retry: RetryPolicy {
            max_attempts: attempts,
            initial_backoff_ms: 1,
            max_backoff_ms: 4,
        },
        ..HttpSpec::default()
    }
}

#[test]
fn server_error_is_retried_then_succeeds() {
    let stub = common::serve(|n, _| if n == 0 { (500, "boom".into()) } else { (200, common::chat_reply("Yes")) });
    std::env::set_var("LBM_GATEWAY_TEST_KEY", "s3cret");
    let backend = HttpBackend::new(HttpSpec {
        api_key_env: Some("LBM_GATEWAY_TEST_KEY".into()),
        ..spec(&stub.url, 3)
    })
    .unwrap();
    let resp = backend.complete(&request()).unwrap();
    assert_eq!(resp.text, "Yes");
    assert_eq!(resp.token_count, 1);

    let seen = stub.requests.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[0].body, seen[1].body, "retries resend the same payload");
    assert_eq!(seen[1].header("authorization"), Some("Bearer s3cret"));
    let body: Value = serde_json::from_str(&seen[1].body).unwrap();
    assert_eq!(body["model"], "m1");
    assert_eq!(body["messages"][0]["content"], "sys");
    assert_eq!(body["messages"][1]["content"], "user");
    assert_eq!(body["max_tokens"], 16);
    assert_eq!(body["stop"][0], "\n");
    assert_eq!(body["seed"], 3);
}

#[test]
fn client_error_is_not_retried() {
    let stub = common::serve(|_, _| (400, "bad".into()));
    let err = HttpBackend::new(spec(&stub.url, 4)).unwrap().complete(&request()).unwrap_err();
    assert!(matches!(err, GatewayError::Status { status: 400, .. }), "{err}");
    assert_eq!(stub.requests.lock().unwrap().len(), 1);
}

#[test]
fn persistent_failure_exhausts_attempts() {
    let stub = common::serve(|_, _| (503, "busy".into()));
    let err = HttpBackend::new(spec(&stub.url, 3)).unwrap().complete(&request()).unwrap_err();
    assert!(matches!(err, GatewayError::Exhausted { attempts: 3, .. }), "{err}");
    assert_eq!(stub.requests.lock().unwrap().len(), 3);
}

#[test]
fn malformed_success_body_is_an_error() {
    let stub = common::serve(|_, _| (200, "{\"choices\": []}".into()));
    let err = HttpBackend::new(spec(&stub.url, 2)).unwrap().complete(&request()).unwrap_err();
    assert!(matches!(err, GatewayError::Malformed(_)), "{err}");
}

#[test]
fn zero_budget_never_reaches_the_network() {
    let stub = common::serve(|_, _| (200, common::chat_reply("x")));
    let req = CompletionRequest {
        max_new_tokens: 0,
        ..request()
    };
    let err = HttpBackend::new(spec(&stub.url, 2)).unwrap().complete(&req).unwrap_err();
    assert!(matches!(err, GatewayError::ZeroBudget));
    assert!(stub.requests.lock().unwrap().is_empty());
}
