//! HTTP backend tests against a local scripted server: request shapes,
//! authentication, retry behavior, logprob recovery, and log redaction.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use tipsy::gateway::{build_backend, BackendConfig, ChatExchange, GatewayError, Role};

struct CapturedRequest {
    path: String,
    auth: Option<String>,
    body: serde_json::Value,
}

struct TestServer {
    endpoint: String,
    requests: Arc<Mutex<Vec<CapturedRequest>>>,
}

impl TestServer {
    /// Serves the scripted `(status, body)` responses in order, one request
    /// per connection, capturing what arrived. Extra requests get a 500.
    fn spawn(responses: Vec<(u16, &str)>) -> TestServer {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind test server");
        let addr = listener.local_addr().unwrap();
        let requests: Arc<Mutex<Vec<CapturedRequest>>> = Arc::new(Mutex::new(Vec::new()));
        let captured = Arc::clone(&requests);
        let mut queue: VecDeque<(u16, String)> =
            responses.into_iter().map(|(s, b)| (s, b.to_string())).collect();

        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let Some(request) = read_request(&mut stream) else { continue };
                captured.lock().unwrap().push(request);
                let (status, payload) =
                    queue.pop_front().unwrap_or((500, "{\"error\":\"script exhausted\"}".into()));
                let reason = if status < 400 { "OK" } else { "ERROR" };
                let response = format!(
                    "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}",
                    payload.len()
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });

        TestServer { endpoint: format!("http://{addr}/v1"), requests }
    }

    fn requests(&self) -> Vec<CapturedRequest> {
        std::mem::take(&mut self.requests.lock().unwrap())
    }
}

fn read_request(stream: &mut TcpStream) -> Option<CapturedRequest> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let path = line.split_whitespace().nth(1)?.to_string();

    let mut content_length = 0usize;
    let mut auth = None;
    loop {
        let mut header = String::new();
        reader.read_line(&mut header).ok()?;
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        let lower = header.to_ascii_lowercase();
        if let Some(rest) = lower.strip_prefix("content-length:") {
            content_length = rest.trim().parse().unwrap_or(0);
        } else if lower.starts_with("authorization:") {
            auth = Some(header["authorization:".len()..].trim().to_string());
        }
    }

    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body).ok()?;
    let body = serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
    Some(CapturedRequest { path, auth, body })
}

fn http_config(endpoint: &str) -> BackendConfig {
    let mut cfg = BackendConfig::mock(Role::Auxiliary, 7);
    cfg.endpoint = endpoint.to_string();
    cfg.model_name = "test-model".to_string();
    cfg.retry_limit = 2;
    cfg
}

const CHAT_OK: &str = r#"{"choices":[{"message":{"content":"a fine answer"}}]}"#;

#[test]
fn generation_round_trips_with_the_expected_request_shape() {
    let server = TestServer::spawn(vec![(200, CHAT_OK)]);
    let backend = build_backend(&http_config(&server.endpoint)).unwrap();

    let answer = backend.generate(&ChatExchange::system("Say something nice.")).unwrap();
    assert_eq!(answer, "a fine answer");

    let requests = server.requests();
    assert_eq!(requests.len(), 1);
    let request = &requests[0];
    assert_eq!(request.path, "/v1/chat/completions");
    assert_eq!(request.auth, None);
    assert_eq!(request.body["model"], "test-model");
    assert_eq!(request.body["messages"][0]["role"], "system");
    assert_eq!(request.body["messages"][0]["content"], "Say something nice.");
    assert_eq!(request.body["temperature"], 0.0);
    // The config seed rides along so compatible servers can pin sampling.
    assert_eq!(request.body["seed"], 7);
}

#[test]
fn bearer_token_comes_from_the_named_environment_variable() {
    let server = TestServer::spawn(vec![(200, CHAT_OK)]);
    std::env::set_var("TIPSY_TEST_API_KEY", "secret-value");
    let mut cfg = http_config(&server.endpoint);
    cfg.api_key_env = Some("TIPSY_TEST_API_KEY".to_string());

    let backend = build_backend(&cfg).unwrap();
    backend.generate(&ChatExchange::system("hello")).unwrap();

    let requests = server.requests();
    assert_eq!(requests[0].auth.as_deref(), Some("Bearer secret-value"));

    // An unset variable is a configuration error before any request is sent.
    let mut missing = http_config(&server.endpoint);
    missing.api_key_env = Some("TIPSY_TEST_API_KEY_THAT_IS_NOT_SET".to_string());
    assert!(matches!(build_backend(&missing), Err(GatewayError::InvalidConfig(_))));
}

#[test]
fn server_errors_are_retried_and_client_errors_are_not() {
    // Two 500s, then success: within the retry budget of 2.
    let server = TestServer::spawn(vec![(500, "{}"), (500, "{}"), (200, CHAT_OK)]);
    let backend = build_backend(&http_config(&server.endpoint)).unwrap();
    let answer = backend.generate(&ChatExchange::system("hello")).unwrap();
    assert_eq!(answer, "a fine answer");
    assert_eq!(server.requests().len(), 3);

    // Three 500s exhaust the budget (one attempt plus two retries).
    let server = TestServer::spawn(vec![(500, "{}"), (500, "{}"), (500, "{}")]);
    let backend = build_backend(&http_config(&server.endpoint)).unwrap();
    let err = backend.generate(&ChatExchange::system("hello")).unwrap_err();
    assert!(matches!(err, GatewayError::Transport(_)), "{err}");
    assert_eq!(server.requests().len(), 3);

    // A 404 is not transport trouble; it surfaces immediately, unretried.
    let server = TestServer::spawn(vec![(404, "{}")]);
    let backend = build_backend(&http_config(&server.endpoint)).unwrap();
    let err = backend.generate(&ChatExchange::system("hello")).unwrap_err();
    assert!(matches!(err, GatewayError::MalformedResponse(_)), "{err}");
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn scoring_sums_nll_over_tokens_inside_the_target_span() {
    // Prompt "Hello " is 6 bytes; tokens at offsets 6 and 8 are the target.
    let completion = r#"{"choices":[{"logprobs":{
        "token_logprobs": [null, -0.5, -0.25],
        "text_offset": [0, 6, 8]
    }}]}"#;
    let server = TestServer::spawn(vec![(200, completion)]);
    let backend = build_backend(&http_config(&server.endpoint)).unwrap();

    let score = backend.score_sequence("Hello ", "world").unwrap();
    assert_eq!(score.token_count, 2);
    assert!((score.total_nll - 0.75).abs() < 1e-12, "total {}", score.total_nll);
    assert_eq!(score.per_token_nll, vec![0.5, 0.25]);

    let requests = server.requests();
    let request = &requests[0];
    assert_eq!(request.path, "/v1/completions");
    assert_eq!(request.body["prompt"], "Hello world");
    assert_eq!(request.body["echo"], true);
    assert_eq!(request.body["max_tokens"], 0);
}

#[test]
fn missing_logprobs_fail_loudly_instead_of_degrading() {
    let server = TestServer::spawn(vec![(200, r#"{"choices":[{}]}"#)]);
    let backend = build_backend(&http_config(&server.endpoint)).unwrap();
    let err = backend.score_sequence("Hello ", "world").unwrap_err();
    assert!(matches!(err, GatewayError::LogprobsUnsupported), "{err}");
}

#[test]
fn malformed_json_is_reported_with_context() {
    let server = TestServer::spawn(vec![(200, "this is not json")]);
    let backend = build_backend(&http_config(&server.endpoint)).unwrap();
    let err = backend.generate(&ChatExchange::system("hello")).unwrap_err();
    assert!(matches!(err, GatewayError::MalformedResponse(_)), "{err}");
}

#[test]
fn request_logs_never_contain_the_api_key() {
    let server = TestServer::spawn(vec![(200, CHAT_OK)]);
    std::env::set_var("TIPSY_TEST_LOGGED_KEY", "super-secret-token");
    let log_dir = tempfile::tempdir().unwrap();
    let log_path = log_dir.path().join("requests.jsonl");

    let mut cfg = http_config(&server.endpoint);
    cfg.api_key_env = Some("TIPSY_TEST_LOGGED_KEY".to_string());
    cfg.log_requests = Some(log_path.clone());

    let backend = build_backend(&cfg).unwrap();
    backend.generate(&ChatExchange::system("hello")).unwrap();

    let log = std::fs::read_to_string(&log_path).unwrap();
    assert!(!log.is_empty());
    assert!(!log.contains("super-secret-token"), "api key leaked into the request log");
    assert!(log.contains("<redacted>"));
    let record: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(record["kind"], "generate");
    assert_eq!(record["outcome"]["ok"], "a fine answer");
}
