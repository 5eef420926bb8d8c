//! RemoteGenerator against a local stub speaking the chat-completions schema.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use corag::gateway::{GatewayError, Generator, RemoteConfig, RemoteGenerator};
use serde_json::{json, Value};

struct Reply {
    status: u16,
    body: String,
}

fn ok(text: &str, usage: Option<(usize, usize)>) -> Reply {
    let mut body = json!({ "choices": [{ "message": { "role": "assistant", "content": text } }] });
    if let Some((prompt, completion)) = usage {
        body["usage"] = json!({ "prompt_tokens": prompt, "completion_tokens": completion });
    }
    Reply {
        status: 200,
        body: body.to_string(),
    }
}

fn status(code: u16) -> Reply {
    Reply {
        status: code,
        body: json!({ "error": "stub" }).to_string(),
    }
}

#[derive(Default)]
struct Seen {
    bodies: Mutex<Vec<Value>>,
    headers: Mutex<Vec<Vec<String>>>,
    active: AtomicUsize,
    peak: AtomicUsize,
}

/// Serves `replies` in order (the last one repeats), one thread per connection.
fn stub(replies: Vec<Reply>, delay: Duration) -> (String, Arc<Seen>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Seen::default());
    let replies = Arc::new(replies);
    let next = Arc::new(AtomicUsize::new(0));
    let s = Arc::clone(&seen);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let stream = stream.unwrap();
            let (seen, replies, next) = (Arc::clone(&s), Arc::clone(&replies), Arc::clone(&next));
            thread::spawn(move || handle(stream, &seen, &replies, &next, delay));
        }
    });
    (format!("http://{addr}/v1"), seen)
}

fn handle(stream: TcpStream, seen: &Seen, replies: &[Reply], next: &AtomicUsize, delay: Duration) {
    let now = seen.active.fetch_add(1, Ordering::SeqCst) + 1;
    seen.peak.fetch_max(now, Ordering::SeqCst);
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut headers = Vec::new();
    let mut length = 0;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let line = line.trim_end().to_string();
        if line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            length = v.trim().parse().unwrap();
        }
        headers.push(line);
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    seen.bodies
        .lock()
        .unwrap()
        .push(serde_json::from_slice(&body).unwrap());
    seen.headers.lock().unwrap().push(headers);
    thread::sleep(delay);
    seen.active.fetch_sub(1, Ordering::SeqCst);

    let i = next.fetch_add(1, Ordering::SeqCst).min(replies.len() - 1);
    let reply = &replies[i];
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {} STUB\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        reply.status,
        reply.body.len(),
        reply.body
    )
    .unwrap();
    stream.flush().unwrap();
}

fn client(endpoint: String) -> RemoteGenerator {
    RemoteGenerator::new(RemoteConfig {
        endpoint,
        model: "stub-model".into(),
        timeout: Duration::from_secs(5),
        max_retries: 2,
        ..RemoteConfig::default()
    })
}

#[test]
fn canned_response_and_reported_tokens() {
    let (endpoint, seen) = stub(
        vec![ok("Paris is the capital.", Some((40, 7)))],
        Duration::ZERO,
    );
    let completion = client(endpoint)
        .generate("Question: capital?\nAnswer:", 64)
        .unwrap();
    assert_eq!(completion.text, "Paris is the capital.");
    assert_eq!(completion.completion_tokens, 7);
    assert_eq!(completion.prompt_tokens, 40);

    let body = &seen.bodies.lock().unwrap()[0];
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(
        body["messages"][0]["content"],
        "Question: capital?\nAnswer:"
    );
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["max_tokens"], 64);
}

#[test]
fn tokens_counted_locally_without_usage() {
    let (endpoint, _) = stub(vec![ok("one two three", None)], Duration::ZERO);
    let completion = client(endpoint).generate("a b", 8).unwrap();
    assert_eq!(completion.completion_tokens, 3);
    assert_eq!(completion.prompt_tokens, 2);
}

#[test]
fn server_errors_are_retried() {
    let (endpoint, seen) = stub(
        vec![status(503), status(429), ok("fine", None)],
        Duration::ZERO,
    );
    assert_eq!(client(endpoint).generate("p", 8).unwrap().text, "fine");
    assert_eq!(seen.bodies.lock().unwrap().len(), 3);
}

#[test]
fn retry_budget_is_bounded() {
    let (endpoint, seen) = stub(vec![status(500)], Duration::ZERO);
    match client(endpoint).generate("p", 8) {
        Err(GatewayError::Backend { retries, .. }) => assert_eq!(retries, 2),
        other => panic!("expected backend error, got {other:?}"),
    }
    assert_eq!(seen.bodies.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (endpoint, seen) = stub(vec![status(400), ok("never", None)], Duration::ZERO);
    assert!(matches!(
        client(endpoint).generate("p", 8),
        Err(GatewayError::Backend { retries: 0, .. })
    ));
    assert_eq!(seen.bodies.lock().unwrap().len(), 1);
}

#[test]
fn malformed_body_is_reported() {
    let (endpoint, _) = stub(
        vec![Reply {
            status: 200,
            body: "{\"choices\": 5}".into(),
        }],
        Duration::ZERO,
    );
    assert!(matches!(
        client(endpoint).generate("p", 8),
        Err(GatewayError::Malformed { .. })
    ));
}

#[test]
fn timeout_is_enforced() {
    let (endpoint, _) = stub(vec![ok("late", None)], Duration::from_millis(800));
    let generator = RemoteGenerator::new(RemoteConfig {
        endpoint,
        timeout: Duration::from_millis(200),
        max_retries: 0,
        ..RemoteConfig::default()
    });
    assert!(matches!(
        generator.generate("p", 8),
        Err(GatewayError::Backend { .. })
    ));
}

#[test]
fn bearer_token_comes_from_the_named_variable() {
    std::env::set_var("CORAG_STUB_KEY", "sekrit");
    let (endpoint, seen) = stub(vec![ok("x", None)], Duration::ZERO);
    let generator = RemoteGenerator::new(RemoteConfig {
        endpoint,
        api_key_env: Some("CORAG_STUB_KEY".into()),
        ..RemoteConfig::default()
    });
    generator.generate("p", 8).unwrap();
    let headers = &seen.headers.lock().unwrap()[0];
    assert!(headers
        .iter()
        .any(|h| h.eq_ignore_ascii_case("authorization: Bearer sekrit")));
}

#[test]
fn in_flight_requests_are_capped() {
    let (endpoint, seen) = stub(vec![ok("x", None)], Duration::from_millis(50));
    let generator = Arc::new(RemoteGenerator::new(RemoteConfig {
        endpoint,
        max_in_flight: 2,
        ..RemoteConfig::default()
    }));
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let g = Arc::clone(&generator);
            thread::spawn(move || g.generate("p", 8).unwrap())
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap().text, "x");
    }
    assert_eq!(seen.bodies.lock().unwrap().len(), 8);
    assert!(seen.peak.load(Ordering::SeqCst) <= 2);
}
