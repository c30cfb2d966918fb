use std::cell::{Cell, RefCell};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::time::Duration;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sow_core::planner::{
    plan, validate_boxes, ChatRequest, HttpMllmClient, MllmClient, PlannerConfig, PlannerMode, PlannerRequest,
    PlannerResult, PromptTemplates,
};
use sow_core::{LatentGrid, RegionBox, Result, SowError};

fn request() -> PlannerRequest {
    PlannerRequest::new(LatentGrid::zeros(3, 4, 4), "a cat on a sofa", 512).unwrap()
}

fn mllm_config() -> PlannerConfig {
    PlannerConfig {
        mode: PlannerMode::Mllm,
        ..PlannerConfig::default()
    }
}

/// Replies from a fixed script, one per call.
struct Scripted {
    replies: RefCell<Vec<Result<String>>>,
    calls: Cell<usize>,
}

impl Scripted {
    fn new(replies: Vec<Result<String>>) -> Self {
        Self {
            replies: RefCell::new(replies.into_iter().rev().collect()),
            calls: Cell::new(0),
        }
    }
}

impl MllmClient for Scripted {
    fn complete(&self, _request: &ChatRequest) -> Result<String> {
        self.calls.set(self.calls.get() + 1);
        self.replies
            .borrow_mut()
            .pop()
            .unwrap_or_else(|| Err(SowError::invalid("script exhausted")))
    }
}

fn malformed_box(rng: &mut ChaCha8Rng) -> String {
    let junk: String = (0..rng.random_range(0..40))
        .map(|_| char::from_u32(rng.random_range(0x20..0x2FF)).unwrap_or('?'))
        .filter(|c| *c != '[')
        .collect();
    match rng.random_range(0..9) {
        0 => String::new(),
        1 => junk,
        2 => format!("[{}, {}, {}]", rng.random_range(0..500), rng.random_range(0..500), rng.random_range(0..500)),
        3 => format!("[-{}, 10, 200, 200]", rng.random_range(1..500)),
        4 => "[NaN, 1, 2, 3]".into(),
        5 => format!("{{\"box\": [{}, {}", rng.random_range(0..500), rng.random_range(0..500)),
        6 => format!("[{}, {}, 0, {}]", rng.random_range(0..500), rng.random_range(0..500), rng.random_range(1..500)),
        7 => "[1e12, 1, 2, 3]".into(),
        _ => format!("box: x={} y={} w={} h={}", rng.random_range(0..9), 1, 2, 3),
    }
}

#[test]
fn fuzzed_replies_always_fall_back_to_a_valid_stub() {
    let cfg = mllm_config();
    let stride = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut fallbacks = 0;
    for _ in 0..100 {
        let good = |s: &str| Ok::<_, SowError>(s.to_string());
        let script = match rng.random_range(0..4) {
            0 => vec![good(""), good("[150, 80, 220, 220]"), good("[150, 300, 220, 200]")],
            1 => vec![good("a cat"), Ok(malformed_box(&mut rng)), good("[150, 300, 220, 200]")],
            2 => vec![good("a cat"), good("[150, 80, 220, 220]"), Ok(malformed_box(&mut rng))],
            _ => vec![Err(SowError::invalid("connection reset"))],
        };
        let client = Scripted::new(script);
        let outcome = plan(&request(), &cfg, stride, Some(&client), &PromptTemplates::default()).unwrap();
        assert!(outcome.fallback, "{outcome:?}");
        assert!(outcome.diagnostic.is_some());
        let again = validate_boxes(&outcome.result, &cfg, stride).unwrap();
        assert_eq!(again.result, outcome.result);
        fallbacks += 1;
    }
    assert_eq!(fallbacks, 100);
}

#[test]
fn well_formed_replies_are_used() {
    let client = Scripted::new(vec![
        Ok("\"a fluffy cat on a red sofa\"".into()),
        Ok("Sure: [150, 80, 220, 220]".into()),
        Ok("[150, 300, 220, 200]".into()),
    ]);
    let outcome = plan(&request(), &mllm_config(), 1, Some(&client), &PromptTemplates::default()).unwrap();
    assert!(!outcome.fallback);
    assert_eq!(client.calls.get(), 3);
    assert_eq!(outcome.result.intensified_prompt, "a fluffy cat on a red sofa");
    assert_eq!(outcome.result.box_v, RegionBox::new(150, 80, 220, 220));
}

fn pixel_box(canvas: usize) -> impl Strategy<Value = RegionBox> {
    (0..canvas, 0..canvas, 1..canvas, 1..canvas).prop_map(|(x, y, w, h)| RegionBox::new(x, y, w, h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn validation_is_idempotent(box_v in pixel_box(512), box_r in pixel_box(512), stride in prop::sample::select(vec![1usize, 8, 16, 32, 64])) {
        let cfg = PlannerConfig::default();
        let input = PlannerResult { box_v, box_r, intensified_prompt: String::new() };
        if let Ok(once) = validate_boxes(&input, &cfg, stride) {
            let r = &once.result;
            for b in [r.box_v, r.box_r] {
                prop_assert!(b.area() > 0);
                prop_assert!(b.right() <= 512 && b.bottom() <= 512);
                prop_assert!([b.x, b.y, b.w, b.h].iter().all(|v| v % stride == 0));
            }
            let twice = validate_boxes(r, &cfg, stride).unwrap();
            prop_assert_eq!(&twice.result, r);
            prop_assert!(twice.warnings.is_empty());
        }
    }
}

/// Serves `replies` as chat-completion bodies, one connection each, and
/// returns the request bodies it saw.
fn mock_server(replies: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<serde_json::Value>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for (status, content) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            seen.push(serde_json::from_slice(&body).unwrap());
            let payload = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string();
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            )
            .unwrap();
        }
        seen
    });
    (format!("http://{addr}/v1/chat/completions"), handle)
}

fn http_client(endpoint: String) -> HttpMllmClient {
    HttpMllmClient {
        endpoint,
        api_key: Some("k".into()),
        model: "mock".into(),
        timeout: Duration::from_secs(5),
    }
}

#[test]
fn http_client_runs_three_stages() {
    let (endpoint, server) = mock_server(vec![
        (200, "a cat".into()),
        (200, "[150, 80, 220, 220]".into()),
        (200, "[150, 300, 220, 200]".into()),
    ]);
    let client = http_client(endpoint);
    let outcome = plan(&request(), &mllm_config(), 1, Some(&client), &PromptTemplates::default()).unwrap();
    assert!(!outcome.fallback, "{outcome:?}");
    assert_eq!(outcome.result.box_r, RegionBox::new(150, 300, 220, 200));
    let seen = server.join().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[0]["model"], "mock");
    let content = seen[0]["messages"][0]["content"].as_array().unwrap();
    assert!(content.iter().any(|c| c["type"] == "image_url"));
    // the third stage carries no image
    assert_eq!(seen[2]["messages"][0]["content"].as_array().unwrap().len(), 1);
}

#[test]
fn http_error_status_falls_back() {
    let (endpoint, server) = mock_server(vec![(500, "oops".into())]);
    let client = http_client(endpoint);
    let outcome = plan(&request(), &mllm_config(), 64, Some(&client), &PromptTemplates::default()).unwrap();
    assert!(outcome.fallback);
    server.join().unwrap();
}

#[test]
fn unreachable_endpoint_falls_back() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let client = http_client(format!("http://{addr}/"));
    let outcome = plan(&request(), &mllm_config(), 64, Some(&client), &PromptTemplates::default()).unwrap();
    assert!(outcome.fallback);
}
