//! Wire-level contract tests against a local scripted HTTP server: the
//! entailment judge's request/response protocol and the live chat-completions
//! client's retry, auth, and rejection behavior.

mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use common::MockServer;
use serde_json::json;
use uqd_core::backends::{BackendError, GenerationBackend, GenerationRequest};
use uqd_core::backends::{LiveBackend, LiveConfig, RetryPolicy};
use uqd_core::equivalence::{EquivalenceJudge, JudgeError, NliJudge};
use uqd_core::records::DecodingPolicy;

fn nli_body(probability: f64) -> String {
    json!({ "entailment_probability": probability }).to_string()
}

fn completion_body(text: &str, logprobs: Option<&[f64]>) -> String {
    let mut choice = json!({ "message": { "content": text } });
    if let Some(lps) = logprobs {
        let tokens: Vec<_> = lps.iter().map(|lp| json!({ "logprob": lp })).collect();
        choice["logprobs"] = json!({ "content": tokens });
    }
    json!({ "choices": [choice] }).to_string()
}

fn live_request(policy: DecodingPolicy, want_logprobs: bool) -> GenerationRequest {
    GenerationRequest {
        prompt_text: "What is the capital of France?".into(),
        system_text: None,
        policy,
        max_tokens: 64,
        want_logprobs,
        backend_id: "live".into(),
    }
}

fn live_config(server: &MockServer) -> LiveConfig {
    let mut config = LiveConfig::new(server.url(), "test-model");
    config.retry = RetryPolicy::fast();
    config.timeout = Duration::from_secs(5);
    config
}

#[test]
fn nli_judge_conjoins_both_directions_with_question_context() {
    // Entailment is direction-sensitive: anything stated by the "alpha"
    // answer entails broadly, nothing entails back.
    let server = MockServer::start(|req| {
        let body: serde_json::Value = serde_json::from_str(&req.body).expect("judge request");
        let premise = body["premise"].as_str().expect("premise field");
        assert!(body["hypothesis"].is_string(), "hypothesis field present");
        let score = if premise.contains("alpha") { 0.9 } else { 0.3 };
        (200, nli_body(score))
    });

    let judge = NliJudge::new(format!("{}/nli", server.url()), 0.5);
    let verdict = judge
        .judge_pair("alpha", "beta", "which letter came first?")
        .unwrap();
    assert_eq!(verdict.forward_score, 0.9);
    assert_eq!(verdict.backward_score, 0.3);
    assert!(!verdict.equivalent, "one failing direction vetoes the pair");
    assert_eq!(server.hits(), 2, "one POST per direction");

    for request in server.requests() {
        assert_eq!(request.path, "/nli");
        let body: serde_json::Value = serde_json::from_str(&request.body).unwrap();
        for side in ["premise", "hypothesis"] {
            let text = body[side].as_str().unwrap();
            assert!(
                text.starts_with("Q: which letter came first? A: "),
                "judged texts carry the question: {text}"
            );
        }
    }
}

#[test]
fn nli_gamma_boundary_is_inclusive() {
    let server = MockServer::start(|_| (200, nli_body(0.5)));
    let judge = NliJudge::new(format!("{}/nli", server.url()), 0.5);
    let verdict = judge.judge_pair("a", "b", "q").unwrap();
    assert!(verdict.equivalent, "scores exactly at gamma count");
}

#[test]
fn nli_caches_directed_scores_across_orderings() {
    let server = MockServer::start(|_| (200, nli_body(0.8)));
    let judge = NliJudge::new(format!("{}/nli", server.url()), 0.5);

    assert!(judge.judge_pair("x", "y", "q").unwrap().equivalent);
    assert!(judge.judge_pair("y", "x", "q").unwrap().equivalent);
    assert!(judge.judge_pair("x", "y", "q").unwrap().equivalent);
    assert_eq!(
        server.hits(),
        2,
        "both orderings reuse the two cached directed scores"
    );
}

#[test]
fn nli_rejects_out_of_range_probability() {
    let server = MockServer::start(|_| (200, nli_body(1.5)));
    let judge = NliJudge::new(format!("{}/nli", server.url()), 0.5);
    match judge.judge_pair("a", "b", "q") {
        Err(JudgeError::Protocol(msg)) => assert!(msg.contains("1.5"), "names the value: {msg}"),
        other => panic!("expected protocol error, got {other:?}"),
    }
}

#[test]
fn nli_surfaces_server_failures() {
    let server = MockServer::start(|_| (500, "{}".into()));
    let judge = NliJudge::new(format!("{}/nli", server.url()), 0.5);
    assert!(matches!(
        judge.judge_pair("a", "b", "q"),
        Err(JudgeError::Transport(_))
    ));
}

#[test]
fn live_retries_rate_limits_then_succeeds() {
    let attempts = Arc::new(AtomicUsize::new(0));
    let server = {
        let attempts = Arc::clone(&attempts);
        MockServer::start(move |_| {
            match attempts.fetch_add(1, Ordering::SeqCst) {
                0 | 1 => (429, json!({"error": "slow down"}).to_string()),
                _ => (200, completion_body("Paris", Some(&[-0.1, -0.25]))),
            }
        })
    };

    let backend = LiveBackend::new("live", live_config(&server)).unwrap();
    let record = backend
        .generate(&live_request(DecodingPolicy::greedy(), true))
        .unwrap();
    assert_eq!(record.text, "Paris");
    assert_eq!(record.token_logprobs, Some(vec![-0.1, -0.25]));
    assert_eq!(server.hits(), 3, "two rate-limited attempts plus success");
}

#[test]
fn live_retries_server_errors_then_succeeds() {
    let attempts = Arc::new(AtomicUsize::new(0));
    let server = {
        let attempts = Arc::clone(&attempts);
        MockServer::start(move |_| {
            if attempts.fetch_add(1, Ordering::SeqCst) == 0 {
                (503, "{}".into())
            } else {
                (200, completion_body("Paris", None))
            }
        })
    };

    let backend = LiveBackend::new("live", live_config(&server)).unwrap();
    let record = backend
        .generate(&live_request(DecodingPolicy::greedy(), false))
        .unwrap();
    assert_eq!(record.text, "Paris");
    assert_eq!(record.token_logprobs, None);
    assert_eq!(server.hits(), 2);
}

#[test]
fn live_does_not_retry_client_errors() {
    let server = MockServer::start(|_| (400, json!({"error": "bad request"}).to_string()));
    let backend = LiveBackend::new("live", live_config(&server)).unwrap();
    match backend.generate(&live_request(DecodingPolicy::greedy(), false)) {
        Err(BackendError::Http { status, .. }) => assert_eq!(status, 400),
        other => panic!("expected http 400, got {other:?}"),
    }
    assert_eq!(server.hits(), 1, "client errors are final");
}

#[test]
fn live_sends_bearer_token_to_completions_path() {
    let server = MockServer::start(|_| (200, completion_body("Paris", None)));
    let mut config = live_config(&server);
    config.api_key = Some("sk-test".into());
    let backend = LiveBackend::new("live", config).unwrap();
    backend
        .generate(&live_request(DecodingPolicy::greedy(), false))
        .unwrap();

    let requests = server.requests();
    assert_eq!(requests.len(), 1);
    assert_eq!(requests[0].method, "POST");
    assert_eq!(requests[0].path, "/v1/chat/completions");
    assert_eq!(requests[0].authorization.as_deref(), Some("Bearer sk-test"));
    assert_eq!(
        requests[0].body,
        "{\"max_tokens\":64,\"messages\":[{\"content\":\"What is the capital of France?\",\
         \"role\":\"user\"}],\"model\":\"test-model\",\"n\":1,\"temperature\":0.0}"
    );
}

#[test]
fn live_rejects_beam_without_any_request() {
    let server = MockServer::start(|_| (200, completion_body("never", None)));
    let backend = LiveBackend::new("live", live_config(&server)).unwrap();
    match backend.generate(&live_request(DecodingPolicy::beam_default(), false)) {
        Err(BackendError::UnsupportedPolicy { reason, .. }) => {
            assert!(reason.contains("chat-completions"), "documented reason: {reason}");
        }
        other => panic!("expected unsupported-policy error, got {other:?}"),
    }
    assert_eq!(server.hits(), 0, "rejected before any wire traffic");
}
