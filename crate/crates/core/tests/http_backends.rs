//! Live clients against an in-process HTTP stub: exact request bodies,
//! response decoding, retry and failure behaviour.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use augagent::detector::{DetectorKind, DetectorMap, HttpPose, PoseBackend};
use augagent::generation::{generate, GenerationParams, GenerationRequest, HttpGeneration};
use augagent::http::{Endpoint, RetryPolicy};
use augagent::imageio;
use augagent::prompt::{HttpLlm, LlmBackend};
use augagent::scorer::{EmbeddingBackend, HttpEmbedder};
use augagent::Error;
use image::{GrayImage, Luma, Rgb, RgbImage};

#[derive(Debug, Clone)]
struct Seen {
    headers: Vec<String>,
    body: Vec<u8>,
}

/// Answers each connection with the next scripted `(status, body)`; the
/// last entry repeats.
struct Stub {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

impl Stub {
    fn new(replies: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        thread::spawn(move || {
            for (i, stream) in listener.incoming().enumerate() {
                let Ok(mut stream) = stream else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut headers = Vec::new();
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    headers.push(line.trim_end().to_ascii_lowercase());
                }
                let len = headers
                    .iter()
                    .find_map(|h| h.strip_prefix("content-length:"))
                    .map(|v| v.trim().parse::<usize>().unwrap())
                    .unwrap_or(0);
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                log.lock().unwrap().push(Seen { headers, body });
                let (status, reply) = &replies[i.min(replies.len() - 1)];
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                    reply.len()
                );
            }
        });
        Self { url, seen }
    }

    fn endpoint(&self) -> Endpoint {
        Endpoint::new(&self.url).with_retry(fast_retry(3))
    }

    fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

fn fast_retry(attempts: u32) -> RetryPolicy {
    RetryPolicy {
        attempts,
        base_delay: Duration::from_millis(1),
        max_delay: Duration::from_millis(4),
    }
}

fn golden(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .trim_end()
        .to_string()
}

fn source() -> RgbImage {
    RgbImage::from_fn(2, 2, |x, y| Rgb([(x * 200) as u8, (y * 100) as u8, 50]))
}

fn edge_map() -> DetectorMap {
    let mut image = GrayImage::new(2, 2);
    image.put_pixel(1, 0, Luma([255]));
    DetectorMap {
        kind: DetectorKind::Canny,
        image,
    }
}

#[test]
fn generation_request_is_byte_exact() {
    let out = RgbImage::from_pixel(2, 2, Rgb([9, 8, 7]));
    let reply = format!(r#"{{"image":"{}"}}"#, imageio::rgb_to_base64_png(&out).unwrap());
    let stub = Stub::new(vec![(200, reply)]);
    let client = HttpGeneration::new(stub.endpoint().with_api_key(Some("secret".into())));
    let (src, map) = (source(), edge_map());
    let req = GenerationRequest {
        source: &src,
        map: &map,
        prompt: "a harbor at dusk",
        seed: 42,
        params: GenerationParams::default(),
    };
    let img = generate(&client, &req).unwrap();
    assert_eq!(img, out);

    let seen = stub.requests();
    assert_eq!(seen.len(), 1);
    assert_eq!(String::from_utf8(seen[0].body.clone()).unwrap(), golden("generate_request.json"));
    assert!(seen[0].headers.iter().any(|h| h == "authorization: bearer secret"));
    assert!(seen[0].headers[0].starts_with("post /v1/endpoint"));

    // the PNG payloads decode back to the inputs
    let body: serde_json::Value = serde_json::from_slice(&seen[0].body).unwrap();
    assert_eq!(imageio::rgb_from_base64_png(body["image"].as_str().unwrap()).unwrap(), src);
    assert_eq!(imageio::gray_from_base64_png(body["map"].as_str().unwrap()).unwrap(), map.image);
}

#[test]
fn generation_output_of_wrong_size_is_a_contract_error() {
    let big = RgbImage::new(3, 3);
    let reply = format!(r#"{{"image":"{}"}}"#, imageio::rgb_to_base64_png(&big).unwrap());
    let stub = Stub::new(vec![(200, reply)]);
    let client = HttpGeneration::new(stub.endpoint());
    let (src, map) = (source(), edge_map());
    let req = GenerationRequest {
        source: &src,
        map: &map,
        prompt: "p",
        seed: 0,
        params: GenerationParams::default(),
    };
    let err = generate(&client, &req).unwrap_err();
    assert!(matches!(err, Error::Contract { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn chat_request_is_byte_exact() {
    let stub = Stub::new(vec![(200, r#"{"content":"a foggy pier"}"#.into())]);
    let llm = HttpLlm::new(stub.endpoint(), "gpt-4o");
    assert_eq!(llm.complete("hello", 7).unwrap(), "a foggy pier");
    let body = String::from_utf8(stub.requests()[0].body.clone()).unwrap();
    assert_eq!(body, golden("chat_request.json"));
    // no credential configured, no header sent
    assert!(!stub.requests()[0].headers.iter().any(|h| h.starts_with("authorization")));
}

#[test]
fn chat_transcript_records_exchanges() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("llm.jsonl");
    let stub = Stub::new(vec![(200, r#"{"content":"x"}"#.into())]);
    let llm = HttpLlm::new(stub.endpoint(), "m").with_transcript(&path).unwrap();
    llm.complete("one", 1).unwrap();
    llm.complete("two", 2).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["request"]["messages"][0]["content"], "one");
    assert_eq!(first["response"]["content"], "x");
}

#[test]
fn pose_round_trip() {
    let skeleton = GrayImage::from_fn(2, 2, |x, _| Luma([if x == 0 { 255 } else { 0 }]));
    let reply = format!(r#"{{"map":"{}"}}"#, imageio::gray_to_base64_png(&skeleton).unwrap());
    let stub = Stub::new(vec![(200, reply)]);
    let pose = HttpPose::new(stub.endpoint());
    assert_eq!(pose.pose(&source()).unwrap(), skeleton);
    let body = String::from_utf8(stub.requests()[0].body.clone()).unwrap();
    assert_eq!(body, golden("pose_request.json"));
}

#[test]
fn embedding_response_shape_is_checked() {
    let stub = Stub::new(vec![(200, r#"{"shape":[2,3],"data":[1,2,3,4,5,6]}"#.into())]);
    let f = HttpEmbedder::new(stub.endpoint()).embed(&source()).unwrap();
    assert_eq!((f.patches(), f.dim()), (2, 3));
    assert_eq!(f.matrix().row(1), &[4.0, 5.0, 6.0]);
    let body = String::from_utf8(stub.requests()[0].body.clone()).unwrap();
    assert_eq!(body, golden("embed_request.json"));

    let stub = Stub::new(vec![(200, r#"{"shape":[2,3],"data":[1,2,3]}"#.into())]);
    let err = HttpEmbedder::new(stub.endpoint()).embed(&source()).unwrap_err();
    assert!(matches!(err, Error::Contract { .. }), "{err}");
}

#[test]
fn server_errors_are_retried() {
    let stub = Stub::new(vec![
        (503, "{}".into()),
        (429, "{}".into()),
        (200, r#"{"content":"ok"}"#.into()),
    ]);
    let llm = HttpLlm::new(stub.endpoint(), "m");
    assert_eq!(llm.complete("hi", 0).unwrap(), "ok");
    assert_eq!(stub.requests().len(), 3);
}

#[test]
fn client_errors_fail_without_retry() {
    let stub = Stub::new(vec![(422, r#"{"detail":"map size mismatch"}"#.into())]);
    let llm = HttpLlm::new(stub.endpoint(), "m");
    match llm.complete("hi", 0).unwrap_err() {
        Error::Backend { attempts, message, .. } => {
            assert_eq!(attempts, 1);
            assert!(message.contains("422") && message.contains("map size mismatch"), "{message}");
        }
        other => panic!("{other}"),
    }
    assert_eq!(stub.requests().len(), 1);
}

#[test]
fn persistent_outage_gives_up_after_policy_attempts() {
    let stub = Stub::new(vec![(500, "{}".into())]);
    let llm = HttpLlm::new(Endpoint::new(&stub.url).with_retry(fast_retry(4)), "m");
    let err = llm.complete("hi", 0).unwrap_err();
    assert!(matches!(err, Error::Backend { attempts: 4, .. }), "{err}");
    assert_eq!(stub.requests().len(), 4);
}

#[test]
fn unreachable_endpoint_is_a_backend_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint = Endpoint::new(format!("http://127.0.0.1:{port}/v1/chat")).with_retry(fast_retry(3));
    let err = HttpLlm::new(endpoint, "m").complete("hi", 0).unwrap_err();
    assert!(matches!(err, Error::Backend { attempts: 3, .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn malformed_response_is_rejected() {
    let stub = Stub::new(vec![(200, r#"{"text":"wrong field"}"#.into())]);
    let err = HttpLlm::new(stub.endpoint(), "m").complete("hi", 0).unwrap_err();
    assert!(matches!(err, Error::Backend { attempts: 1, .. }), "{err}");
}
