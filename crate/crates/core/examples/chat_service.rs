//! The HTTP API in-process: create a session, upload features, talk, and read
//! back the transcript. Uses small untrained models, so the wording is noise.
//!
//!     cargo run --example chat_service

use std::sync::Arc;
use std::time::Duration;

use elisabot::chatbot::{dialogue_vocabulary, ChatbotConfig, ChatbotModel};
use elisabot::data::{pseudo_encoder, DialoguePair};
use elisabot::dialogue::Models;
use elisabot::service::{router, AppState};
use elisabot::vqg::{question_vocabulary, VqgConfig, VqgModel};
use serde_json::{json, Value};

const COLS: usize = 16;

fn models() -> elisabot::Result<Models> {
    let questions = ["who is this ?", "where is this ?", "when was this ?", "what is that ?"];
    let vqg_config = VqgConfig {
        annotation_dim: COLS,
        attention_dim: 8,
        embedding_dim: 8,
        lstm_dim: 8,
        beam_width: 7,
        outputs_per_image: 6,
        ..VqgConfig::default()
    };
    let vqg = VqgModel::new(vqg_config, question_vocabulary(&questions, 1)?, 0)?;
    let pairs = [DialoguePair { context: "that is my mother".into(), reply: "she looks kind".into() }];
    let chat_config = ChatbotConfig { hidden_dim: 8, embedding_dim: 8, ..ChatbotConfig::default() };
    let chat = ChatbotModel::new(chat_config, dialogue_vocabulary(&pairs, 1)?, 0)?;
    Ok(Models::new(Arc::new(vqg), Arc::new(chat)))
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let data = tempfile::tempdir()?;
    let state = AppState::new(
        models()?,
        Some(COLS),
        data.path().join("photos"),
        data.path().join("transcripts"),
        Duration::from_secs(1800),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let base = format!("http://{}", listener.local_addr()?);
    tokio::spawn(async move { axum::serve(listener, router(Arc::new(state))).await });

    let http = reqwest::Client::new();
    let created: Value = http
        .post(format!("{base}/sessions"))
        .json(&json!({"photos": ["garden"], "seed": 5}))
        .send()
        .await?
        .json()
        .await?;
    let id = created["session_id"].as_str().unwrap().to_string();
    println!("session {id}");

    let feat = pseudo_encoder("garden", 9, COLS)?.to_bytes();
    let resp = http.post(format!("{base}/sessions/{id}/photos?photo_id=garden")).body(feat).send().await?;
    println!("upload -> {}", resp.status());

    for (kind, payload) in [("command", "/start"), ("command", "/yes"), ("user_text", "my father planted it"), ("command", "/exit")] {
        let body: Value = http
            .post(format!("{base}/sessions/{id}/events"))
            .json(&json!({"kind": kind, "payload": payload}))
            .send()
            .await?
            .json()
            .await?;
        println!("{payload:>22} -> {}", body["actions"]);
    }

    let transcript: Value = http.get(format!("{base}/sessions/{id}/transcript")).send().await?.json().await?;
    println!("{} transcript entries", transcript["entries"].as_array().map_or(0, Vec::len));
    Ok(())
}
