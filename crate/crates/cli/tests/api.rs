use std::collections::BTreeSet;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use dialret::corpus::{build_corpus, CorpusConfig, VideoRecord};
use dialret::service::{ServiceConfig, SessionManager};
use dialret::{ModelConfig, RetrievalModel};
use dialret_cli::server::router;
use serde_json::{json, Value};
use tower::ServiceExt;

fn schema() -> Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../api/schema.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Checks `value` against a schema definition: same key set, declared types.
fn conforms(schema: &Value, def: &str, value: &Value) {
    let d = &schema["$defs"][def];
    assert!(d.is_object(), "no definition {def}");
    check(schema, d, value, def);
}

fn check(schema: &Value, d: &Value, value: &Value, at: &str) {
    if let Some(r) = d.get("$ref").and_then(Value::as_str) {
        let name = r.trim_start_matches("#/$defs/");
        return check(schema, &schema["$defs"][name], value, at);
    }
    if let Some(allowed) = d.get("enum").and_then(Value::as_array) {
        assert!(allowed.contains(value), "{at}: {value} not in {allowed:?}");
    }
    let types: Vec<&str> = match &d["type"] {
        Value::String(s) => vec![s.as_str()],
        Value::Array(a) => a.iter().filter_map(Value::as_str).collect(),
        _ => vec![],
    };
    let matches = |t: &str| match t {
        "object" => value.is_object(),
        "array" => value.is_array(),
        "string" => value.is_string(),
        "integer" => value.is_u64() || value.is_i64(),
        "number" => value.is_number(),
        "boolean" => value.is_boolean(),
        "null" => value.is_null(),
        _ => false,
    };
    assert!(
        types.is_empty() || types.iter().any(|t| matches(t)),
        "{at}: {value} is not {types:?}"
    );
    if let Some(obj) = value.as_object() {
        let declared: BTreeSet<&str> = d["properties"]
            .as_object()
            .unwrap()
            .keys()
            .map(String::as_str)
            .collect();
        let required: BTreeSet<&str> = d["required"]
            .as_array()
            .unwrap()
            .iter()
            .filter_map(Value::as_str)
            .collect();
        let got: BTreeSet<&str> = obj.keys().map(String::as_str).collect();
        assert_eq!(got, declared, "{at}: field names");
        assert!(required.is_subset(&got), "{at}: missing required");
        for (k, v) in obj {
            check(schema, &d["properties"][k], v, &format!("{at}.{k}"));
        }
    }
    if let (Some(items), Some(arr)) = (d.get("items"), value.as_array()) {
        for v in arr {
            check(schema, items, v, &format!("{at}[]"));
        }
    }
}

fn fixture(gt_questions: bool) -> (Router, Vec<VideoRecord>) {
    let corpus = build_corpus(&CorpusConfig {
        train: 40,
        val: 4,
        test: 20,
        ..CorpusConfig::default()
    })
    .unwrap();
    let vocab = corpus.vocabulary().unwrap();
    let model = RetrievalModel::new(ModelConfig::default(), vocab, 1).unwrap();
    let manager = SessionManager::new(
        model,
        corpus.test.clone(),
        ServiceConfig {
            gt_questions,
            ..ServiceConfig::default()
        },
    )
    .unwrap();
    (router(Arc::new(manager), None), corpus.test)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::Null)
    };
    (status, v)
}

#[tokio::test]
async fn full_session_over_http() {
    let s = schema();
    let (app, records) = fixture(false);
    let target = &records[0];

    let (st, health) = call(&app, "GET", "/health", None).await;
    assert_eq!(st, StatusCode::OK);
    conforms(&s, "HealthPayload", &health);

    let (st, card) = call(&app, "GET", &format!("/videos/{}/card", target.id), None).await;
    assert_eq!(st, StatusCode::OK);
    conforms(&s, "VideoCard", &card);
    assert_eq!(card["caption"], json!(target.caption));

    let (st, start) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({"caption": target.caption, "target_id": target.id})),
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{start}");
    conforms(&s, "SessionPayload", &start);
    assert_eq!(start["candidates"].as_array().unwrap().len(), 10);
    let id = start["session_id"].as_str().unwrap().to_string();

    let mut ranks = vec![start["gt_rank"].as_u64().unwrap()];
    for t in 1..=10u64 {
        let (st, round) = call(
            &app,
            "POST",
            &format!("/sessions/{id}/answers"),
            Some(json!({"text": "two people, i think"})),
        )
        .await;
        assert_eq!(st, StatusCode::OK, "{round}");
        conforms(&s, "RoundPayload", &round);
        assert_eq!(round["round"], json!(t));
        ranks.push(round["gt_rank"].as_u64().unwrap());
    }
    let (st, view) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(st, StatusCode::OK);
    conforms(&s, "SessionView", &view);
    assert_eq!(view["status"], json!("exhausted"));
    assert_eq!(view["candidate_history"].as_array().unwrap().len(), 11);
    let server_ranks: Vec<u64> = view["gt_ranks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(server_ranks, ranks);

    let (st, err) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/answers"),
        Some(json!({"text": "yes"})),
    )
    .await;
    assert_eq!(st, StatusCode::CONFLICT);
    conforms(&s, "ErrorPayload", &err);
}

#[tokio::test]
async fn error_statuses() {
    let s = schema();
    let (app, records) = fixture(false);

    let (st, err) = call(&app, "GET", "/sessions/nope", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    conforms(&s, "ErrorPayload", &err);
    let (st, _) = call(&app, "POST", "/sessions/nope/answers", Some(json!({"text": "yes"}))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(&app, "GET", "/videos/nope/card", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({"caption": "a man", "target_id": "nope"})),
    )
    .await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, err) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({"caption": "", "target_id": records[0].id})),
    )
    .await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    conforms(&s, "ErrorPayload", &err);
    // malformed body is rejected by the extractor
    let (st, _) = call(&app, "POST", "/sessions", Some(json!({"text": "x"}))).await;
    assert!(st.is_client_error());
}

#[tokio::test]
async fn found_ends_the_session() {
    let s = schema();
    let (app, records) = fixture(true);
    let target = &records[1];
    let (_, start) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({"caption": target.caption, "target_id": target.id})),
    )
    .await;
    // stored questions are shown verbatim
    assert_eq!(start["question"], json!(target.dialog[0].q));
    let id = start["session_id"].as_str().unwrap();
    let pick = start["candidates"][0]["video_id"].clone();
    let (st, found) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/found"),
        Some(json!({"video_id": pick})),
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{found}");
    conforms(&s, "FoundPayload", &found);
    assert_eq!(found["status"], json!("found"));
    assert_eq!(found["is_target"], json!(pick == json!(target.id)));
    let (st, _) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/found"),
        Some(json!({"video_id": pick})),
    )
    .await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (_, view) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    conforms(&s, "SessionView", &view);
    assert_eq!(view["status"], json!("found"));
}

#[tokio::test]
async fn schema_lists_every_route() {
    let s = schema();
    let paths: BTreeSet<String> = s["endpoints"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| format!("{} {}", e["method"].as_str().unwrap(), e["path"].as_str().unwrap()))
        .collect();
    let expected: BTreeSet<String> = [
        "GET /health",
        "POST /sessions",
        "GET /sessions/{id}",
        "POST /sessions/{id}/answers",
        "POST /sessions/{id}/found",
        "GET /videos/{id}/card",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    assert_eq!(paths, expected);
    for e in s["endpoints"].as_array().unwrap() {
        for key in ["request", "response"] {
            if let Some(name) = e.get(key).and_then(Value::as_str) {
                assert!(s["$defs"][name].is_object(), "{name}");
            }
        }
    }
}

#[tokio::test]
async fn static_assets_are_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>ui</html>").unwrap();
    let corpus = build_corpus(&CorpusConfig {
        train: 20,
        val: 2,
        test: 6,
        ..CorpusConfig::default()
    })
    .unwrap();
    let model = RetrievalModel::new(ModelConfig::default(), corpus.vocabulary().unwrap(), 1).unwrap();
    let manager = SessionManager::new(model, corpus.test, ServiceConfig::default()).unwrap();
    let app = router(Arc::new(manager), Some(dir.path().to_path_buf()));
    let resp = app
        .oneshot(Request::builder().uri("/index.html").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let body = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    assert_eq!(&body[..], b"<html>ui</html>");
}
