//! The HTTP backend against a local stub speaking the chat-completions wire
//! format. The stub answers from a script, so a live-backend conversation
//! must reproduce the scripted transcript exactly.

mod common;

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use fcflow_core::backend::{LiveBackend, LiveConfig, ScriptedBackend};
use fcflow_core::conversation::{run_instruction, ConversationOptions, FunctionCall, Message, Role};
use fcflow_core::transcript::normalize_output;
use fcflow_core::{default_preamble, Backend, BackendError, BackendRequest, BackendResponse};
use serde::Deserialize;
use serde_json::{json, Value};

#[derive(Deserialize)]
struct WireMessage {
    role: Role,
    content: Option<String>,
    function_call: Option<FunctionCall>,
}

#[derive(Deserialize)]
struct WireRequest {
    messages: Vec<WireMessage>,
}

#[derive(Default)]
struct Stub {
    script: Option<ScriptedBackend>,
    /// Canned `(status, body)` replies served before the script is consulted.
    canned: Mutex<VecDeque<(u16, Value)>>,
    requests: Mutex<Vec<(HeaderMap, Value)>>,
    tool_calls: bool,
}

async fn completions(State(stub): State<Arc<Stub>>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    stub.requests.lock().unwrap().push((headers, body.clone()));
    if let Some((status, body)) = stub.canned.lock().unwrap().pop_front() {
        return (StatusCode::from_u16(status).unwrap(), Json(body));
    }
    let wire: WireRequest = serde_json::from_value(body).unwrap();
    let messages = wire
        .messages
        .into_iter()
        .map(|m| Message {
            role: m.role,
            content: m.content.unwrap_or_default(),
            function_call: m.function_call,
        })
        .collect();
    let request = BackendRequest::new(messages, Vec::new());
    let reply = match stub.script.as_ref().unwrap().complete(&request).await {
        Ok(BackendResponse::FunctionCall(call)) if stub.tool_calls => json!({
            "choices": [{"message": {"role": "assistant", "content": null, "tool_calls": [
                {"id": "call_1", "type": "function", "function": {"name": call.name, "arguments": call.arguments}}
            ]}, "finish_reason": "tool_calls"}]
        }),
        Ok(BackendResponse::FunctionCall(call)) => json!({
            "choices": [{"message": {"role": "assistant", "content": null,
                "function_call": {"name": call.name, "arguments": call.arguments}},
                "finish_reason": "function_call"}]
        }),
        Ok(BackendResponse::Final { content }) => json!({
            "choices": [{"message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]
        }),
        Err(err) => return (StatusCode::BAD_REQUEST, Json(json!({"error": err.to_string()}))),
    };
    (StatusCode::OK, Json(reply))
}

async fn start(stub: Stub) -> (Arc<Stub>, LiveBackend) {
    let stub = Arc::new(stub);
    let app = Router::new()
        .route("/v1/chat/completions", post(completions))
        .with_state(stub.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    let backend = LiveBackend::new(LiveConfig {
        base_url: format!("http://{addr}/v1/"),
        api_key: Some("test-key".into()),
        model: "stub-model".into(),
        timeout: Duration::from_secs(10),
        max_retries: 2,
        backoff: Duration::from_millis(10),
    })
    .unwrap();
    (stub, backend)
}

async fn reference_run(tool_calls: bool) {
    let (stub, backend) = start(Stub {
        script: Some(common::script("reference_script.json")),
        tool_calls,
        ..Stub::default()
    })
    .await;
    let runs = common::scratch();
    let engine = common::engine(common::demo_registry(), runs.path(), 5);
    let transcript = run_instruction(
        default_preamble(),
        &common::reference_instruction(),
        &engine,
        &backend,
        16_384,
        ConversationOptions::default(),
    )
    .await
    .unwrap();
    assert_eq!(normalize_output(&transcript.render()), common::golden("reference_transcript.txt"));
    engine.await_all(Duration::from_secs(30)).await.unwrap();

    let requests = stub.requests.lock().unwrap();
    assert_eq!(requests.len(), 3);
    for (headers, body) in requests.iter() {
        assert_eq!(headers["authorization"], "Bearer test-key");
        assert_eq!(body["model"], "stub-model");
        assert_eq!(body["functions"].as_array().unwrap().len(), 8);
        assert_eq!(body["messages"][0]["role"], "system");
    }
    // The second request carries the dispatch and its acknowledgement.
    let second = requests[1].1["messages"].as_array().unwrap();
    assert_eq!(second.len(), 4);
    assert_eq!(second[2]["function_call"]["name"], "fcall_vcf_transform_from_files");
    assert!(second[2]["content"].is_null());
    assert_eq!(second[3]["content"], "Task scheduled with AppFuture id: future_5_run_vcf_transform");
}

#[tokio::test(flavor = "multi_thread")]
async fn live_backend_reproduces_the_scripted_transcript() {
    reference_run(false).await;
}

#[tokio::test(flavor = "multi_thread")]
async fn tool_call_responses_are_accepted() {
    reference_run(true).await;
}

fn simple_request() -> BackendRequest {
    BackendRequest::new(vec![Message::system("ctx"), Message::user("hello")], Vec::new())
}

fn stop(content: &str) -> Value {
    json!({"choices": [{"message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]})
}

#[tokio::test(flavor = "multi_thread")]
async fn rate_limits_and_server_errors_are_retried() {
    let canned = VecDeque::from([
        (429, json!({"error": "slow down"})),
        (503, json!({"error": "unavailable"})),
        (200, stop("DONE")),
    ]);
    let (stub, backend) = start(Stub {
        canned: Mutex::new(canned),
        ..Stub::default()
    })
    .await;
    let response = backend.complete(&simple_request()).await.unwrap();
    assert_eq!(response, BackendResponse::final_message("DONE"));
    assert_eq!(stub.requests.lock().unwrap().len(), 3);
}

#[tokio::test(flavor = "multi_thread")]
async fn retries_are_bounded() {
    let canned = (0..5).map(|_| (500, json!({"error": "boom"}))).collect();
    let (stub, backend) = start(Stub {
        canned: Mutex::new(canned),
        ..Stub::default()
    })
    .await;
    let err = backend.complete(&simple_request()).await.unwrap_err();
    assert!(matches!(err, BackendError::Status { status: 500, .. }), "{err}");
    assert_eq!(stub.requests.lock().unwrap().len(), 3);
}

#[tokio::test(flavor = "multi_thread")]
async fn client_errors_are_not_retried() {
    let canned = VecDeque::from([(401, json!({"error": "bad key"}))]);
    let (stub, backend) = start(Stub {
        canned: Mutex::new(canned),
        ..Stub::default()
    })
    .await;
    let err = backend.complete(&simple_request()).await.unwrap_err();
    assert!(matches!(err, BackendError::Status { status: 401, .. }));
    assert_eq!(stub.requests.lock().unwrap().len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn truncated_answers_are_protocol_errors() {
    let canned = VecDeque::from([(
        200,
        json!({"choices": [{"message": {"content": "DO"}, "finish_reason": "length"}]}),
    )]);
    let (_stub, backend) = start(Stub {
        canned: Mutex::new(canned),
        ..Stub::default()
    })
    .await;
    let err = backend.complete(&simple_request()).await.unwrap_err();
    assert!(matches!(err, BackendError::Protocol(_)), "{err}");
}

#[tokio::test(flavor = "multi_thread")]
async fn unreachable_endpoint_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let backend = LiveBackend::new(LiveConfig {
        base_url: format!("http://{addr}"),
        max_retries: 0,
        ..LiveConfig::default()
    })
    .unwrap();
    let err = backend.complete(&simple_request()).await.unwrap_err();
    assert!(matches!(err, BackendError::Transport(_)), "{err}");
}

#[test]
fn request_model_overrides_configuration() {
    let runtime = tokio::runtime::Runtime::new().unwrap();
    runtime.block_on(async {
        let (stub, backend) = start(Stub {
            canned: Mutex::new(VecDeque::from([(200, stop("ok"))])),
            ..Stub::default()
        })
        .await;
        let mut request = simple_request();
        request.model = Some("other-model".into());
        request.temperature = 0.5;
        backend.complete(&request).await.unwrap();
        let requests = stub.requests.lock().unwrap();
        assert_eq!(requests[0].1["model"], "other-model");
        assert_eq!(requests[0].1["temperature"], 0.5);
        assert!(requests[0].1.get("functions").is_none());
    });
}
