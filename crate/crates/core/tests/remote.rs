use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use procprog::annotation::EpisodeRef;
use procprog::pipeline::backend::{AnnotatorBackend, BackendError, FrameInput, PlanRequest};
use procprog::pipeline::remote::{build_request_body, RemoteBackend, RemoteConfig};
use regex::Regex;

enum Reply {
    Status(u16, &'static str),
    Hang(Duration),
}

struct Captured {
    authorization: String,
    body: String,
}

fn read_request(stream: &mut TcpStream) -> Captured {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0;
    let mut authorization = String::new();
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
        if lower.starts_with("authorization:") {
            authorization = line["authorization:".len()..].trim().to_string();
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    Captured {
        authorization,
        body: String::from_utf8(body).unwrap(),
    }
}

/// Serves one scripted reply per connection and records what it received.
fn stub_server(script: Vec<Reply>) -> (String, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!(
        "http://{}/v1/chat/completions",
        listener.local_addr().unwrap()
    );
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for reply in script {
            let (mut stream, _) = listener.accept().unwrap();
            let req = read_request(&mut stream);
            log.lock().unwrap().push(req);
            // a hanging reply must not hold up the next connection
            thread::spawn(move || match reply {
                Reply::Status(code, body) => {
                    let resp = format!(
                        "HTTP/1.1 {code} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                        body.len()
                    );
                    let _ = stream.write_all(resp.as_bytes());
                }
                Reply::Hang(d) => thread::sleep(d),
            });
        }
    });
    (url, seen)
}

const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"1. Grasp the cup"}}]}"#;

fn config(url: &str) -> RemoteConfig {
    RemoteConfig {
        timeout: Duration::from_millis(300),
        backoff_base: Duration::from_millis(5),
        ..RemoteConfig::new(url, "annotator-test", "secret")
    }
}

fn frames() -> Vec<FrameInput> {
    [0usize, 5]
        .iter()
        .map(|&t| FrameInput {
            frame_id: t,
            image: Some(Arc::new(vec![t as u8; 16])),
            features: None,
        })
        .collect()
}

fn episode() -> EpisodeRef {
    EpisodeRef {
        dataset_name: "d".into(),
        episode_id: "e".into(),
        camera_key: "c".into(),
        num_frames: 6,
        instruction: "move the cup".into(),
    }
}

fn mask(body: &str) -> String {
    Regex::new(r"base64,[A-Za-z0-9+/=]+")
        .unwrap()
        .replace_all(body, "base64,<payload>")
        .into_owned()
}

fn golden() -> String {
    std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/remote_request.json"
    ))
    .unwrap()
    .trim_end()
    .to_string()
}

#[test]
fn request_body_matches_golden_fixture() {
    let body = build_request_body("annotator-test", "Describe the scene.", &frames()).unwrap();
    assert_eq!(mask(&body.to_string()), golden());
}

#[test]
fn wire_capture_matches_golden_fixture() {
    let (url, seen) = stub_server(vec![Reply::Status(200, OK)]);
    let backend = RemoteBackend::new(config(&url)).unwrap();
    let ep = episode();
    let fr = frames();
    let text = backend
        .plan(&PlanRequest {
            episode: &ep,
            prompt: "Describe the scene.",
            frames: &fr,
            attempt: 0,
        })
        .unwrap();
    assert_eq!(text, "1. Grasp the cup");
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].authorization, "Bearer secret");
    assert_eq!(mask(&seen[0].body), golden());
}

#[test]
fn rate_limit_then_success_retries_once() {
    let (url, seen) = stub_server(vec![Reply::Status(429, "{}"), Reply::Status(200, OK)]);
    let backend = RemoteBackend::new(config(&url)).unwrap();
    let ep = episode();
    let fr = frames();
    let req = PlanRequest {
        episode: &ep,
        prompt: "p",
        frames: &fr,
        attempt: 0,
    };
    assert_eq!(backend.plan(&req).unwrap(), "1. Grasp the cup");
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn three_timeouts_give_unavailable() {
    let hang = Duration::from_millis(800);
    let (url, seen) = stub_server(vec![
        Reply::Hang(hang),
        Reply::Hang(hang),
        Reply::Hang(hang),
    ]);
    let backend = RemoteBackend::new(config(&url)).unwrap();
    let ep = episode();
    let fr = frames();
    let req = PlanRequest {
        episode: &ep,
        prompt: "p",
        frames: &fr,
        attempt: 0,
    };
    assert!(matches!(
        backend.plan(&req),
        Err(BackendError::Unavailable(_))
    ));
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn unauthorized_is_auth_error() {
    let (url, _) = stub_server(vec![Reply::Status(401, "{}")]);
    let backend = RemoteBackend::new(config(&url)).unwrap();
    let ep = episode();
    let fr = frames();
    let req = PlanRequest {
        episode: &ep,
        prompt: "p",
        frames: &fr,
        attempt: 0,
    };
    assert!(matches!(backend.plan(&req), Err(BackendError::Auth(_))));
}

#[test]
fn server_errors_exhaust_retries() {
    let (url, seen) = stub_server(vec![
        Reply::Status(503, "{}"),
        Reply::Status(500, "{}"),
        Reply::Status(502, "{}"),
    ]);
    let backend = RemoteBackend::new(config(&url)).unwrap();
    let ep = episode();
    let fr = frames();
    let req = PlanRequest {
        episode: &ep,
        prompt: "p",
        frames: &fr,
        attempt: 0,
    };
    assert!(matches!(
        backend.plan(&req),
        Err(BackendError::Unavailable(_))
    ));
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn missing_token_is_auth_error() {
    assert!(matches!(
        RemoteBackend::new(RemoteConfig::new("http://127.0.0.1:1", "m", "")),
        Err(BackendError::Auth(_))
    ));
}

#[test]
fn frames_without_images_are_rejected() {
    let f = vec![FrameInput {
        frame_id: 0,
        image: None,
        features: Some(vec![0.0]),
    }];
    assert!(matches!(
        build_request_body("m", "p", &f),
        Err(BackendError::Unsupported(_))
    ));
}
