mod common;

use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::http::{Method, StatusCode};
use common::{app, app_with, call, create, tiny_responder};
use empathy_core::corpus::{serialize_context, Polarity, Role, Turn};
use empathy_core::decoder::DecodingConfig;
use empathy_service::api::{router, AppState};
use empathy_service::session::{exchange, ChatSession, Responder};
use empathy_service::store::SessionStore;
use serde_json::{json, Value};

#[tokio::test]
async fn health_reports_checkpoint() {
    let (status, v) = call(&app(), Method::GET, "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v, json!({"status": "ok", "checkpoint": "tiny-test"}));
}

#[tokio::test]
async fn session_defaults_and_overrides() {
    let app = app();
    let (status, v) = call(&app, Method::POST, "/sessions", None).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(v["decoding"]["top_p"], json!(0.9));
    assert_eq!(v["decoding"]["top_k"], json!(10));
    assert_eq!(v["decoding"]["max_length"], json!(40));

    let (_, v) = call(&app, Method::POST, "/sessions", Some(json!({"decoding": {"top_k": 1}}))).await;
    assert_eq!(v["decoding"]["top_k"], json!(1));

    for bad in [
        json!({"decoding": {"top_p": 1.5}}),
        json!({"decoding": {"top_k": 0}}),
        json!({"decoding": {"nucleus": 0.5}}),
    ] {
        let (status, v) = call(&app, Method::POST, "/sessions", Some(bad)).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(v["code"], "invalid_request");
        assert!(v["message"].is_string());
    }
}

#[tokio::test]
async fn transcript_round_trip() {
    let app = app();
    let id = create(&app, None).await;
    let (status, v) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["turns"], json!([]));

    let responder = tiny_responder();
    let mut replies = Vec::new();
    for text in ["i passed my driving test this morning", "my dog passed away last night"] {
        let (status, reply) = call(
            &app,
            Method::POST,
            &format!("/sessions/{id}/messages"),
            Some(json!({ "text": text })),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{reply}");
        let confidence = reply["confidence"].as_f64().unwrap();
        assert!((0.5..=1.0).contains(&confidence));
        assert!(matches!(reply["polarity"].as_str(), Some("positive" | "negative")));
        assert_eq!(reply["session_id"], json!(id));
        let tokens = responder
            .bundle()
            .tokenizer()
            .encode(reply["text"].as_str().unwrap())
            .unwrap();
        assert!(tokens.len() <= 40);
        replies.push(reply);
    }
    assert_eq!(replies[0]["turn_index"], json!(1));
    assert_eq!(replies[1]["turn_index"], json!(3));

    let (_, v) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    let turns = v["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 4);
    for (i, turn) in turns.iter().enumerate() {
        let user = i % 2 == 0;
        assert_eq!(turn["role"], if user { "user" } else { "bot" });
        assert_eq!(turn.get("polarity").is_some(), user);
        if user {
            assert_eq!(turn["polarity"], replies[i / 2]["polarity"]);
            assert_eq!(turn["confidence"], replies[i / 2]["confidence"]);
        } else {
            assert_eq!(turn["text"], replies[i / 2]["text"]);
        }
    }
    assert_eq!(turns[0]["text"], "i passed my driving test this morning");
}

#[tokio::test]
async fn unknown_and_deleted_sessions_are_not_found() {
    let app = app();
    for (method, uri, body) in [
        (Method::GET, "/sessions/nope", None),
        (Method::POST, "/sessions/nope/messages", Some(json!({"text": "hi"}))),
        (Method::DELETE, "/sessions/nope", None),
    ] {
        let (status, v) = call(&app, method, uri, body).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
        assert_eq!(v["code"], "not_found");
    }
    let id = create(&app, None).await;
    let (status, _) = call(&app, Method::DELETE, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, _) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn invalid_messages_are_rejected_without_changing_the_session() {
    let app = app();
    let id = create(&app, None).await;
    let uri = format!("/sessions/{id}/messages");
    for body in [json!({"text": "   "}), json!({"message": "hi"}), json!("hi")] {
        let (status, v) = call(&app, Method::POST, &uri, Some(body)).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(v["code"], "invalid_request");
    }
    let (_, v) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(v["turns"], json!([]));
}

#[tokio::test]
async fn same_session_posts_are_serialized() {
    let app = app();
    let id = create(&app, None).await;
    let uri = format!("/sessions/{id}/messages");
    let mut tasks = Vec::new();
    for i in 0..6 {
        let (app, uri) = (app.clone(), uri.clone());
        tasks.push(tokio::spawn(async move {
            let text = format!("message number {i}");
            let (status, reply) = call(&app, Method::POST, &uri, Some(json!({ "text": text }))).await;
            assert_eq!(status, StatusCode::OK);
            (text, reply)
        }));
    }
    let mut results = Vec::new();
    for t in tasks {
        results.push(t.await.unwrap());
    }
    let (_, v) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    let turns = v["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 12);
    for (text, reply) in &results {
        let idx = reply["turn_index"].as_u64().unwrap() as usize;
        assert_eq!(turns[idx]["role"], "bot");
        assert_eq!(turns[idx]["text"], reply["text"]);
        assert_eq!(turns[idx - 1]["text"], json!(text));
    }
}

#[tokio::test]
async fn sessions_survive_a_restart_when_persisted() {
    let dir = tempfile::tempdir().unwrap();
    let store = SessionStore::persistent(DecodingConfig::default(), dir.path()).unwrap();
    let app = app_with(store);
    let id = create(&app, Some(json!({"decoding": {"seed": 5}}))).await;
    for text in ["hello there", "i lost my wallet on the train"] {
        call(&app, Method::POST, &format!("/sessions/{id}/messages"), Some(json!({ "text": text }))).await;
    }
    let (_, before) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;

    let restarted = app_with(SessionStore::persistent(DecodingConfig::default(), dir.path()).unwrap());
    let (status, after) = call(&restarted, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(before, after);
    assert_eq!(after["decoding"]["seed"], json!(5));

    call(&restarted, Method::DELETE, &format!("/sessions/{id}"), None).await;
    assert!(!dir.path().join(format!("{id}.jsonl")).exists());
}

#[tokio::test]
async fn idle_sessions_expire() {
    let store = SessionStore::in_memory(DecodingConfig::default()).with_ttl(Duration::from_millis(50));
    let app = app_with(store);
    let id = create(&app, None).await;
    let (status, _) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    tokio::time::sleep(Duration::from_millis(120)).await;
    let (status, _) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

/// Records every context it is asked about.
#[derive(Default)]
struct Recorder {
    contexts: Mutex<Vec<String>>,
}

impl Responder for Recorder {
    fn checkpoint(&self) -> &str {
        "recorder"
    }

    fn predict_polarity(&self, context: &str) -> empathy_core::Result<(Polarity, f64)> {
        self.contexts.lock().unwrap().push(context.to_string());
        Ok((Polarity::Negative, 0.75))
    }

    fn generate(&self, context: &str, _: &DecodingConfig) -> empathy_core::Result<String> {
        Ok(format!("reply {}", context.len()))
    }
}

#[test]
fn decoder_context_uses_training_serialization() {
    let recorder = Recorder::default();
    let mut session = ChatSession::new("s".into(), DecodingConfig::default());
    let messages = ["first message", "second message", "third"];
    for m in messages {
        exchange(&recorder, &mut session, m).unwrap();
    }
    let contexts = recorder.contexts.lock().unwrap().clone();
    for (t, context) in contexts.iter().enumerate() {
        // Everything before the bot turn being generated: 2t prior turns plus the new user turn.
        let turns: Vec<Turn> = session.turns[..=2 * t]
            .iter()
            .enumerate()
            .map(|(i, turn)| Turn {
                role: if i % 2 == 0 { Role::Speaker } else { Role::Listener },
                text: turn.text.clone(),
            })
            .collect();
        assert_eq!(context, &serialize_context(&turns));
    }
    assert_eq!(session.turns[4].polarity, Some(Polarity::Negative));
    assert_eq!(session.turns[5].polarity, None);
}

#[tokio::test]
async fn health_reflects_any_responder() {
    let app = router(AppState {
        store: Arc::new(SessionStore::in_memory(DecodingConfig::default())),
        responder: Arc::new(Recorder::default()),
    });
    let (_, v): (StatusCode, Value) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(v["checkpoint"], "recorder");
}
