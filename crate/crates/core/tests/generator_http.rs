//! The HTTP adapter against a small in-process server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};
use visual_rag::generator::GeneratorError;
use visual_rag::prompt::{PromptDocument, PromptPart};
use visual_rag::{Generator, GeneratorConfig, HttpGenerator};

struct Request {
    authorization: Option<String>,
    body: Value,
}

fn read_request(stream: &mut TcpStream) -> Option<Request> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    if line.is_empty() {
        return None;
    }
    let mut length = 0;
    let mut authorization = None;
    loop {
        line.clear();
        reader.read_line(&mut line).ok()?;
        let header = line.trim_end();
        if header.is_empty() {
            break;
        }
        let (name, value) = header.split_once(':')?;
        match name.to_ascii_lowercase().as_str() {
            "content-length" => length = value.trim().parse().ok()?,
            "authorization" => authorization = Some(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).ok()?;
    Some(Request {
        authorization,
        body: serde_json::from_slice(&body).ok()?,
    })
}

fn respond(stream: &mut TcpStream, status: u16, body: &str) {
    let reply = format!(
        "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.write_all(reply.as_bytes());
}

/// Serves each connection on its own thread; `handler` gets the request and
/// its 0-based arrival index and returns (status, body).
fn serve<F>(handler: F) -> (String, Arc<Mutex<Vec<Request>>>)
where
    F: Fn(&Request, usize) -> (u16, String) + Send + Sync + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/generate", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let handler = Arc::new(handler);
    let counter = Arc::new(AtomicUsize::new(0));
    let log = seen.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let (handler, counter, log) = (handler.clone(), counter.clone(), log.clone());
            thread::spawn(move || {
                if let Some(req) = read_request(&mut stream) {
                    let n = counter.fetch_add(1, Ordering::SeqCst);
                    let (status, body) = handler(&req, n);
                    // Log before replying so the client never observes a
                    // response whose request is not yet recorded.
                    log.lock().unwrap().push(req);
                    respond(&mut stream, status, &body);
                }
            });
        }
    });
    (url, seen)
}

fn config(url: &str, key_env: &str) -> GeneratorConfig {
    std::env::set_var(key_env, "secret-token");
    GeneratorConfig {
        endpoint_url: url.to_string(),
        model_name: "test-model".into(),
        api_key_env: key_env.into(),
        max_retries: 3,
        timeout_secs: 10.0,
        backoff_base_ms: 5,
        ..GeneratorConfig::default()
    }
}

fn text_doc() -> PromptDocument {
    PromptDocument {
        parts: vec![PromptPart::Text("hello".into())],
    }
}

fn ok_body(text: &str) -> String {
    json!({ "text": text }).to_string()
}

#[test]
fn retries_server_errors_then_succeeds() {
    let (url, seen) = serve(|_, n| {
        if n < 2 {
            (503, "{}".into())
        } else {
            (200, ok_body("Answer Choice: cat"))
        }
    });
    let g = HttpGenerator::new(config(&url, "VRAG_TEST_KEY_RETRY")).unwrap();
    let reply = g.generate(&text_doc()).unwrap();
    assert_eq!(reply.text, "Answer Choice: cat");
    assert_eq!(reply.attempt_count, 3);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(
        seen[0].authorization.as_deref(),
        Some("Bearer secret-token")
    );
    assert_eq!(seen[0].body["model"], "test-model");
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(|_, _| (400, "{\"error\":\"bad\"}".into()));
    let g = HttpGenerator::new(config(&url, "VRAG_TEST_KEY_4XX")).unwrap();
    let err = g.generate(&text_doc()).unwrap_err();
    assert!(matches!(err, GeneratorError::Protocol(_)), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn retries_exhausted() {
    let (url, seen) = serve(|_, _| (429, "{}".into()));
    let g = HttpGenerator::new(config(&url, "VRAG_TEST_KEY_EXHAUST")).unwrap();
    match g.generate(&text_doc()).unwrap_err() {
        GeneratorError::RetriesExhausted { attempts, last } => {
            assert_eq!(attempts, 4);
            assert!(last.contains("429"), "{last}");
        }
        e => panic!("unexpected {e:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 4);
}

#[test]
fn missing_reply_field_is_a_protocol_error() {
    let (url, _) = serve(|_, _| (200, "{\"other\":1}".into()));
    let g = HttpGenerator::new(config(&url, "VRAG_TEST_KEY_FIELD")).unwrap();
    assert!(matches!(
        g.generate(&text_doc()),
        Err(GeneratorError::Protocol(_))
    ));
}

#[test]
fn request_preserves_part_order_and_encodes_images() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.png"), b"\x89PNG-one").unwrap();
    std::fs::write(dir.path().join("b.jpg"), b"\xff\xd8two").unwrap();
    let (url, seen) = serve(|_, _| (200, ok_body("ok")));
    let mut cfg = config(&url, "VRAG_TEST_KEY_PARTS");
    cfg.image_root = Some(dir.path().to_path_buf());
    cfg.sampling = Some(json!({"temperature": 0.0}));
    let g = HttpGenerator::new(cfg).unwrap();
    let doc = PromptDocument {
        parts: vec![
            PromptPart::ImageRef("a.png".into()),
            PromptPart::Text("first".into()),
            PromptPart::ImageRef("b.jpg".into()),
            PromptPart::Text("second".into()),
        ],
    };
    g.generate(&doc).unwrap();
    let seen = seen.lock().unwrap();
    let body = &seen[0].body;
    let b64 = |b: &[u8]| base64::engine::general_purpose::STANDARD.encode(b);
    assert_eq!(
        body["parts"],
        json!([
            {"type": "image", "mime_type": "image/png", "data": b64(b"\x89PNG-one")},
            {"type": "text", "text": "first"},
            {"type": "image", "mime_type": "image/jpeg", "data": b64(b"\xff\xd8two")},
            {"type": "text", "text": "second"},
        ])
    );
    assert_eq!(body["generation_config"], json!({"temperature": 0.0}));
}

#[test]
fn unreadable_image_fails_before_sending() {
    let (url, seen) = serve(|_, _| (200, ok_body("ok")));
    let g = HttpGenerator::new(config(&url, "VRAG_TEST_KEY_IMG")).unwrap();
    let doc = PromptDocument {
        parts: vec![PromptPart::ImageRef("/nonexistent/x.png".into())],
    };
    assert!(matches!(
        g.generate(&doc),
        Err(GeneratorError::UnreadableImage { .. })
    ));
    assert!(seen.lock().unwrap().is_empty());
}

#[test]
fn in_flight_requests_never_exceed_max_parallel() {
    let active = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let (a, p) = (active.clone(), peak.clone());
    let (url, seen) = serve(move |_, _| {
        let now = a.fetch_add(1, Ordering::SeqCst) + 1;
        p.fetch_max(now, Ordering::SeqCst);
        thread::sleep(Duration::from_millis(40));
        a.fetch_sub(1, Ordering::SeqCst);
        (200, ok_body("ok"))
    });
    let mut cfg = config(&url, "VRAG_TEST_KEY_PAR");
    cfg.max_parallel = 2;
    let g = Arc::new(HttpGenerator::new(cfg).unwrap());
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let g = g.clone();
            thread::spawn(move || g.generate(&text_doc()).unwrap())
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(seen.lock().unwrap().len(), 8);
    assert_eq!(peak.load(Ordering::SeqCst), 2);
}
