//! Integration tests against a minimal in-process HTTP responder.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread::JoinHandle;

use sigllm_client::{HttpBackend, RetryConfig};
use sigllm_core::backend::{Backend, BackendDescriptor, BackendError, CompletionRequest};

/// Serve one canned (status, body) pair per incoming connection and
/// forward each raw request to the receiver.
fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>, JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind test listener");
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    let handle = std::thread::spawn(move || {
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().expect("accept");
            let raw = read_request(&mut stream);
            let _ = tx.send(raw);
            let reason = match status {
                200 => "OK",
                400 => "Bad Request",
                429 => "Too Many Requests",
                500 => "Internal Server Error",
                _ => "Unknown",
            };
            let response = format!(
                "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\n\
                 content-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(response.as_bytes()).expect("write response");
        }
    });
    (format!("http://{addr}"), rx, handle)
}

fn read_request(stream: &mut std::net::TcpStream) -> String {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 1024];
    loop {
        let n = stream.read(&mut chunk).expect("read request");
        buf.extend_from_slice(&chunk[..n]);
        if let Some(header_end) = find_header_end(&buf) {
            let headers = String::from_utf8_lossy(&buf[..header_end]).to_string();
            let content_length: usize = headers
                .lines()
                .find_map(|l| {
                    let (name, value) = l.split_once(':')?;
                    name.eq_ignore_ascii_case("content-length")
                        .then(|| value.trim().parse().ok())?
                })
                .unwrap_or(0);
            let body_start = header_end + 4;
            while buf.len() < body_start + content_length {
                let n = stream.read(&mut chunk).expect("read body");
                buf.extend_from_slice(&chunk[..n]);
            }
            return String::from_utf8_lossy(&buf).to_string();
        }
        if n == 0 {
            return String::from_utf8_lossy(&buf).to_string();
        }
    }
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}

fn fast_retry() -> RetryConfig {
    RetryConfig {
        max_retries: 2,
        initial_delay_ms: 1,
        max_delay_ms: 4,
    }
}

fn backend_for(url: &str) -> HttpBackend {
    HttpBackend::with_retry(BackendDescriptor::http(url, "test-model"), fast_retry())
        .unwrap()
        .with_api_key("test-key")
}

#[test]
fn successful_completion_carries_samples_and_auth() {
    let ok_body = r#"{"choices":[{"text":"7,8"},{"text":"7,9"}],
        "usage":{"prompt_tokens":12,"completion_tokens":4}}"#;
    let (url, rx, handle) = serve(vec![(200, ok_body.to_string())]);
    let backend = backend_for(&url);

    let response = backend
        .complete(&CompletionRequest::new("5,6,7", 2, 16))
        .unwrap();
    handle.join().unwrap();

    assert_eq!(response.samples, vec!["7,8".to_string(), "7,9".to_string()]);
    assert_eq!(response.usage.prompt, 12);
    assert_eq!(response.usage.completion, 4);

    let raw = rx.recv().unwrap().to_ascii_lowercase();
    assert!(raw.starts_with("post /v1/completions"));
    assert!(raw.contains("authorization: bearer test-key"));
    assert!(raw.contains("logit_bias"));
    assert!(raw.contains("\"prompt\":\"5,6,7\""));
}

#[test]
fn rate_limit_is_retried_until_success() {
    let ok_body = r#"{"choices":[{"text":"1"}]}"#;
    let (url, rx, handle) = serve(vec![
        (429, r#"{"error":"slow down"}"#.to_string()),
        (200, ok_body.to_string()),
    ]);
    let backend = backend_for(&url);

    let response = backend
        .complete(&CompletionRequest::new("5", 1, 4))
        .unwrap();
    handle.join().unwrap();
    assert_eq!(response.samples, vec!["1".to_string()]);
    assert_eq!(rx.iter().count(), 2);
}

#[test]
fn exhausted_retries_become_unavailable() {
    let (url, rx, handle) = serve(vec![
        (500, "oops".to_string()),
        (500, "oops".to_string()),
        (500, "oops".to_string()),
    ]);
    let backend = backend_for(&url);

    let err = backend
        .complete(&CompletionRequest::new("5", 1, 4))
        .unwrap_err();
    handle.join().unwrap();
    match err {
        BackendError::Unavailable { attempts, .. } => assert_eq!(attempts, 3),
        other => panic!("expected Unavailable, got {other}"),
    }
    assert_eq!(rx.iter().count(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, rx, handle) = serve(vec![(400, r#"{"error":"bad model"}"#.to_string())]);
    let backend = backend_for(&url);

    let err = backend
        .complete(&CompletionRequest::new("5", 1, 4))
        .unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, BackendError::Rejected(_)));
    assert_eq!(rx.iter().count(), 1);
}

#[test]
fn repetitive_prompt_rejection_is_distinct() {
    let body = r#"{"error":{"message":"repetitive prompt detected"}}"#;
    let (url, _rx, handle) = serve(vec![(400, body.to_string())]);
    let backend = backend_for(&url);

    let err = backend
        .complete(&CompletionRequest::new("4,4,4,4", 1, 4))
        .unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, BackendError::RepetitiveInput(_)));
}

#[test]
fn sample_count_mismatch_is_rejected() {
    let body = r#"{"choices":[{"text":"1"}]}"#;
    let (url, _rx, handle) = serve(vec![(200, body.to_string())]);
    let backend = backend_for(&url);

    let err = backend
        .complete(&CompletionRequest::new("5", 3, 4))
        .unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, BackendError::Rejected(_)));
}

#[test]
fn chat_endpoint_path_and_message_shape() {
    let body = r#"{"choices":[{"message":{"role":"assistant","content":"9"}}]}"#;
    let (url, rx, handle) = serve(vec![(200, body.to_string())]);
    let mut descriptor = BackendDescriptor::http(&url, "test-model");
    descriptor.chat_style = true;
    let backend = HttpBackend::with_retry(descriptor, fast_retry())
        .unwrap()
        .with_api_key("test-key");

    let response = backend
        .complete(&CompletionRequest::new("prompted text", 1, 4))
        .unwrap();
    handle.join().unwrap();
    assert_eq!(response.samples, vec!["9".to_string()]);

    let raw = rx.recv().unwrap();
    assert!(raw.to_ascii_lowercase().starts_with("post /v1/chat/completions"));
    assert!(raw.contains(r#""messages":[{"role":"user","content":"prompted text"}]"#));
}
