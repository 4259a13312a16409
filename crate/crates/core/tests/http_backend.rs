use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use genctx::context::{ContextError, ContextGenerator, GenerationRequest, HttpGenerator, PromptId, MAX_TOKENS};

/// Serves canned responses on a local port, one connection per request, and
/// records every request body.
struct Stub {
    url: String,
    bodies: Arc<Mutex<Vec<serde_json::Value>>>,
}

fn stub(responses: Vec<(u16, String)>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/complete", listener.local_addr().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let seen = bodies.clone();
    thread::spawn(move || {
        for (status, body) in responses {
            let Ok((mut stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let l = line.trim_end();
                if l.is_empty() {
                    break;
                }
                if let Some(v) = l.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            if let Ok(v) = serde_json::from_slice(&buf) {
                seen.lock().unwrap().push(v);
            }
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    Stub { url, bodies }
}

fn client(url: &str, retries: usize) -> HttpGenerator {
    HttpGenerator::new(url.to_string(), "stub".into(), Duration::from_secs(5), retries, 7_000_000)
}

fn request() -> GenerationRequest {
    GenerationRequest {
        segment: "eval-000/3".into(),
        topic: None,
        prompt: PromptId::P1,
        prev_text: "the harbor at dawn".into(),
    }
}

#[test]
fn returns_completion_text_and_sends_rendered_prompt() {
    let s = stub(vec![(200, r#"{"text": "abc"}"#.into())]);
    let out = client(&s.url, 0).generate(&request()).unwrap();
    assert_eq!(out.text, "abc");
    assert_eq!(out.tokens, 1);
    let bodies = s.bodies.lock().unwrap();
    let sent = &bodies[0];
    assert_eq!(sent["max_tokens"], MAX_TOKENS);
    assert_eq!(sent["temperature"], 0);
    let prompt = sent["prompt"].as_str().unwrap();
    assert_eq!(prompt, format!("{} the harbor at dawn", PromptId::P1.template()));
}

#[test]
fn long_completions_are_capped() {
    let long: Vec<String> = (0..300).map(|i| format!("w{i}")).collect();
    let body = serde_json::json!({ "text": long.join(" ") }).to_string();
    let s = stub(vec![(200, body)]);
    let out = client(&s.url, 0).generate(&request()).unwrap();
    assert_eq!(out.tokens, 256);
    assert_eq!(out.text.split_whitespace().count(), 256);
    assert!(out.text.ends_with("w255"));
}

#[test]
fn server_errors_are_retried_then_reported() {
    let s = stub(vec![(500, "{}".into()), (500, "{}".into()), (500, "{}".into())]);
    let err = client(&s.url, 2).generate(&request()).unwrap_err();
    match err {
        ContextError::Transport { attempts, last } => {
            assert_eq!(attempts, 3);
            assert!(last.contains("500"), "{last}");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(s.bodies.lock().unwrap().len(), 3);
}

#[test]
fn a_retry_can_succeed() {
    let s = stub(vec![(503, "{}".into()), (200, r#"{"text": "ok then"}"#.into())]);
    let out = client(&s.url, 1).generate(&request()).unwrap();
    assert_eq!(out.text, "ok then");
}

#[test]
fn malformed_bodies_are_parse_errors() {
    let s = stub(vec![(200, "not json".into()), (200, r#"{"completion": "x"}"#.into())]);
    let g = client(&s.url, 0);
    assert!(matches!(g.generate(&request()), Err(ContextError::Parse(_))));
    assert!(matches!(g.generate(&request()), Err(ContextError::Parse(_))));
}

#[test]
fn unreachable_server_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = client(&format!("http://127.0.0.1:{port}/x"), 1).generate(&request()).unwrap_err();
    assert!(matches!(err, ContextError::Transport { attempts: 2, .. }));
}

#[test]
fn declared_parameters_and_fingerprint() {
    let g = client("http://localhost:1/x", 0);
    assert_eq!(g.parameter_count(), 7_000_000);
    assert!(g.fingerprint().contains("stub"));
}
