#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use evisynth::corpus::StudyRecord;
use evisynth::outcome::{BinaryArms, ContinuousArms, OutcomeData};
use evisynth::schema::serialize;
use serde_json::{json, Value};

pub const BIN: &str = env!("CARGO_BIN_EXE_evisynth");

pub fn evisynth(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("EVISYNTH_ENDPOINT")
        .env_remove("EVISYNTH_MODEL")
        .env_remove("EVISYNTH_TOKEN")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

pub fn hawkey() -> StudyRecord {
    StudyRecord::from_gold(
        "hawkey2015",
        "Autologous HSCT in refractory Crohn disease. ...",
        "Stem cells versus Control",
        "Clinical remission",
        OutcomeData::Binary(BinaryArms::new(8, 23, 2, 22).unwrap()),
    )
    .unwrap()
}

pub fn dicker() -> StudyRecord {
    StudyRecord::from_gold(
        "dicker1992",
        "Dietary counselling trial. ...",
        "Intervention versus Control",
        "Change in score",
        OutcomeData::Continuous(ContinuousArms::new(5.22, 2.22, 48, 3.08, 1.81, 51).unwrap()),
    )
    .unwrap()
}

/// `n` deterministic records alternating binary and continuous data, each
/// with a distinct outcome name.
pub fn sample_corpus(n: usize) -> Vec<StudyRecord> {
    (0..n)
        .map(|i| {
            let k = i as u64;
            let data = if i % 2 == 0 {
                OutcomeData::Binary(
                    BinaryArms::new(3 + k % 7, 20 + k, 2 + (k * 3) % 5, 22 + k).unwrap(),
                )
            } else {
                let m = i as f64;
                OutcomeData::Continuous(
                    ContinuousArms::new(5.0 + m * 0.1, 2.0, 40 + k, 4.5, 1.5 + m * 0.05, 42)
                        .unwrap(),
                )
            };
            StudyRecord::from_gold(
                format!("study{i:02}"),
                format!("Trial number {i}. ..."),
                "Treatment versus Placebo",
                format!("outcome-{i:02}"),
                data,
            )
            .unwrap()
        })
        .collect()
}

/// A response extracting `data`, wrapped in a thought block.
pub fn answer(data: &OutcomeData) -> String {
    format!(
        "<think>\nReading the tables.\n</think>\n{}",
        serialize(data)
    )
}

/// Canned responses keyed by outcome name.
pub type Replies = HashMap<String, String>;

async fn reply(
    State(replies): State<Arc<Replies>>,
    Json(body): Json<Value>,
) -> (StatusCode, String) {
    let prompt = body["messages"][0]["content"].as_str().unwrap_or_default();
    let outcome = prompt
        .lines()
        .find_map(|l| l.strip_prefix("Outcome: "))
        .unwrap_or_default();
    match replies.get(outcome) {
        Some(text) => (
            StatusCode::OK,
            json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string(),
        ),
        None => (StatusCode::NOT_FOUND, "no canned reply".into()),
    }
}

/// Starts a mock completion server on `runtime`; returns its base URL.
pub fn mock_endpoint(runtime: &tokio::runtime::Runtime, replies: Replies) -> String {
    let app = Router::new()
        .route("/v1/chat/completions", post(reply))
        .with_state(Arc::new(replies));
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
        .unwrap();
    let addr = listener.local_addr().unwrap();
    runtime.spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}/v1")
}

pub fn write_lines(path: &Path, lines: &[String]) {
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}
