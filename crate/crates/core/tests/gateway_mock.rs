//! Gateway behaviour against an in-process mock completion server.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use evisynth::corpus::StudyRecord;
use evisynth::gateway::{
    build_prompt, complete, run_batch, Completer, GatewayConfig, GatewayError, HttpCompleter,
    Secret,
};
use evisynth::outcome::{BinaryArms, OutcomeData};
use serde_json::{json, Value};

#[derive(Default)]
struct Mock {
    attempts: Mutex<HashMap<String, usize>>,
    auth_headers: Mutex<Vec<String>>,
}

/// Behaviour is keyed on the outcome name inside the prompt:
/// `fail-N` fails N times with 503 first, `slow-MS` sleeps, `bad` returns
/// malformed JSON, `deny` returns 401.
async fn handler(
    State(mock): State<Arc<Mock>>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> (StatusCode, String) {
    if let Some(auth) = headers.get("authorization") {
        mock.auth_headers
            .lock()
            .unwrap()
            .push(auth.to_str().unwrap().to_string());
    }
    let prompt = body["messages"][0]["content"].as_str().unwrap_or_default();
    let outcome = prompt
        .lines()
        .find_map(|l| l.strip_prefix("Outcome: "))
        .unwrap_or_default()
        .to_string();
    let attempt = {
        let mut map = mock.attempts.lock().unwrap();
        let n = map.entry(outcome.clone()).or_default();
        *n += 1;
        *n
    };
    assert_eq!(body["temperature"], json!(0.7));
    assert_eq!(body["max_tokens"], json!(2048));
    if let Some(n) = outcome.strip_prefix("fail-") {
        if attempt <= n.parse::<usize>().unwrap() {
            return (StatusCode::SERVICE_UNAVAILABLE, "busy".into());
        }
    }
    if let Some(ms) = outcome.strip_prefix("slow-") {
        tokio::time::sleep(Duration::from_millis(ms.parse().unwrap())).await;
    }
    match outcome.as_str() {
        "bad" => return (StatusCode::OK, "{not json".into()),
        "deny" => return (StatusCode::UNAUTHORIZED, "no".into()),
        _ => {}
    }
    let reply = json!({
        "choices": [{"message": {"role": "assistant", "content": format!("answer for {outcome}")}}]
    });
    (StatusCode::OK, reply.to_string())
}

async fn serve() -> (String, Arc<Mock>) {
    let mock = Arc::new(Mock::default());
    let app = Router::new()
        .route("/v1/chat/completions", post(handler))
        .with_state(mock.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}/v1"), mock)
}

fn config(url: &str) -> GatewayConfig {
    GatewayConfig {
        endpoint_url: url.to_string(),
        model_name: "test-model".into(),
        timeout_s: 5,
        max_retries: 3,
        backoff_base_ms: 1,
        ..GatewayConfig::default()
    }
}

fn record(id: &str, outcome: &str) -> StudyRecord {
    StudyRecord::from_gold(
        id,
        "study text",
        "A versus B",
        outcome,
        OutcomeData::Binary(BinaryArms::new(8, 23, 2, 22).unwrap()),
    )
    .unwrap()
}

#[tokio::test]
async fn single_completion_with_auth() {
    let (url, mock) = serve().await;
    let mut cfg = config(&url);
    cfg.auth_token = Some(Secret::new("tok"));
    let text = complete(&cfg, &build_prompt(&record("a", "remission")).unwrap())
        .await
        .unwrap();
    assert_eq!(text, "answer for remission");
    assert_eq!(mock.auth_headers.lock().unwrap().as_slice(), ["Bearer tok"]);
}

#[tokio::test]
async fn transient_failures_are_retried() {
    let (url, mock) = serve().await;
    let client = HttpCompleter::new(config(&url)).unwrap();
    let prompt = build_prompt(&record("a", "fail-2")).unwrap();
    assert_eq!(client.complete(&prompt).await.unwrap(), "answer for fail-2");
    assert_eq!(mock.attempts.lock().unwrap()["fail-2"], 3);
}

#[tokio::test]
async fn retries_are_bounded() {
    let (url, mock) = serve().await;
    let mut cfg = config(&url);
    cfg.max_retries = 1;
    let err = complete(&cfg, &build_prompt(&record("a", "fail-5")).unwrap())
        .await
        .unwrap_err();
    assert_eq!(err.kind(), "status");
    assert!(matches!(err, GatewayError::Status { status: 503, .. }));
    assert_eq!(mock.attempts.lock().unwrap()["fail-5"], 2);
}

#[tokio::test]
async fn permanent_errors_are_not_retried() {
    let (url, mock) = serve().await;
    let err = complete(&config(&url), &build_prompt(&record("a", "deny")).unwrap())
        .await
        .unwrap_err();
    assert!(matches!(err, GatewayError::Status { status: 401, .. }));
    assert_eq!(mock.attempts.lock().unwrap()["deny"], 1);

    let err = complete(&config(&url), &build_prompt(&record("a", "bad")).unwrap())
        .await
        .unwrap_err();
    assert_eq!(err.kind(), "malformed_response");
}

#[tokio::test]
async fn timeouts_and_refused_connections_are_distinct() {
    let (url, _mock) = serve().await;
    let mut cfg = config(&url);
    cfg.timeout_s = 1;
    cfg.max_retries = 0;
    let err = complete(&cfg, &build_prompt(&record("a", "slow-2500")).unwrap())
        .await
        .unwrap_err();
    assert_eq!(err.kind(), "timeout");

    // Bind and drop to get a port nobody listens on.
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let mut cfg = config(&format!("http://127.0.0.1:{port}/v1"));
    cfg.max_retries = 0;
    let err = complete(&cfg, "x").await.unwrap_err();
    assert_eq!(err.kind(), "network");
}

#[tokio::test]
async fn batch_preserves_order_under_delays_and_failures() {
    let (url, _mock) = serve().await;
    let mut cfg = config(&url);
    cfg.max_retries = 2;
    let client = HttpCompleter::new(cfg).unwrap();
    let outcomes = [
        "slow-120", "fast", "fail-1", "slow-60", "deny", "slow-10", "fail-9", "plain", "slow-90",
        "",
    ];
    let corpus: Vec<StudyRecord> = outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let mut r = record(&format!("s{i}"), if o.is_empty() { "x" } else { o });
            r.outcome_name = o.to_string();
            r
        })
        .collect();
    for concurrency in [1, 3, 16] {
        let preds = run_batch(&client, &corpus, concurrency).await;
        let ids: Vec<&str> = preds.iter().map(|p| p.id.as_str()).collect();
        let expected: Vec<String> = (0..outcomes.len()).map(|i| format!("s{i}")).collect();
        assert_eq!(ids, expected);
        for (p, o) in preds.iter().zip(outcomes) {
            match o {
                "deny" | "fail-9" | "" => {
                    assert!(p.error.is_some(), "{o}");
                    assert!(p.raw_response.is_empty());
                }
                _ => {
                    assert_eq!(p.error, None, "{o}");
                    assert_eq!(p.raw_response, format!("answer for {o}"));
                }
            }
        }
    }
}

/// Counts concurrent calls to check the bound.
struct Gauge {
    current: Mutex<usize>,
    peak: Mutex<usize>,
}

impl Completer for Gauge {
    async fn complete(&self, prompt: &str) -> Result<String, GatewayError> {
        {
            let mut c = self.current.lock().unwrap();
            *c += 1;
            let mut p = self.peak.lock().unwrap();
            *p = (*p).max(*c);
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
        *self.current.lock().unwrap() -= 1;
        Ok(prompt.len().to_string())
    }
}

#[tokio::test]
async fn concurrency_is_bounded() {
    let gauge = Gauge {
        current: Mutex::new(0),
        peak: Mutex::new(0),
    };
    let corpus: Vec<StudyRecord> = (0..20).map(|i| record(&format!("s{i}"), "o")).collect();
    let preds = run_batch(&gauge, &corpus, 4).await;
    assert_eq!(preds.len(), 20);
    let peak = *gauge.peak.lock().unwrap();
    assert!((2..=4).contains(&peak), "peak {peak}");
}
