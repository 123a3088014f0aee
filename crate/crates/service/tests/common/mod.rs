#![allow(dead_code)]

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use trigserve::bench::oracle_answer;
use trigserve::registry::Repository;
use trigserve::selection::{RerankerChoice, SelectionConfig, SelectionState, SystemContext};
use trigserve::synth::{CandidatePool, RepoPromptInstance};

pub async fn call(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(v) => Body::from(v.to_string()),
            None => Body::empty(),
        })
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes)
            .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

pub fn select_body(inst: &RepoPromptInstance) -> Value {
    match &inst.candidate_pool {
        CandidatePool::All => json!({ "prompt": inst.query }),
        CandidatePool::Ids(ids) => json!({ "prompt": inst.query, "pool": ids }),
    }
}

pub struct Driven {
    pub last: Value,
    /// Clarification questions answered.
    pub rounds: usize,
}

/// Runs one instance through the HTTP protocol, answering each question as
/// a user who wants the ground-truth checkpoint would. A local mirror of
/// the dialogue supplies the option partitions, which the wire omits.
pub async fn drive(app: &Router, repo: &Repository, inst: &RepoPromptInstance) -> Driven {
    let config = SelectionConfig::default();
    let pool = match &inst.candidate_pool {
        CandidatePool::All => None,
        CandidatePool::Ids(ids) => Some(ids.as_slice()),
    };
    let mut mirror =
        SelectionState::start(&inst.query, repo, pool, &SystemContext::default(), &config).unwrap();
    let mut local = mirror
        .evaluate(repo, &config, RerankerChoice::RuleBased)
        .unwrap();

    let (status, mut last) = call(app, "POST", "/v1/select", Some(select_body(inst))).await;
    assert_eq!(status, StatusCode::OK, "{last}");
    let mut rounds = 0;
    while last["status"] == "needs_clarification" {
        let question = local
            .question
            .as_ref()
            .expect("mirror agrees on clarification");
        assert_eq!(last["question"]["text"], question.text.as_str());
        let option =
            oracle_answer(question, inst.ground_truth.checkpoint_id.as_deref()).to_string();
        let session = last["session_id"].as_str().expect("session id").to_string();
        let uri = format!("/v1/select/{session}/answer");
        let (status, next) = call(app, "POST", &uri, Some(json!({ "option": option }))).await;
        assert_eq!(status, StatusCode::OK, "{next}");
        local = mirror
            .apply_answer(&option, repo, &config, RerankerChoice::RuleBased)
            .unwrap();
        last = next;
        rounds += 1;
        assert!(
            rounds <= 3,
            "more than three clarification rounds for {}",
            inst.instance_id
        );
    }
    Driven { last, rounds }
}
