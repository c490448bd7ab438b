//! Caption backends: an in-process mock, an HTTP endpoint, and a subprocess.

use std::fs;
use std::io::Cursor;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::{fnv1a64, Fnv1a};
use crate::ingest::Frame;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("backend timed out after {0:?}")]
    Timeout(Duration),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned an empty caption")]
    EmptyResponse,
    #[error("malformed backend payload: {0}")]
    Malformed(String),
    #[error("caption command exited with {code:?}: {stderr}")]
    Process { code: Option<i32>, stderr: String },
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<BackendError> },
    #[error("backend misconfigured: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    ClipInitial,
    ClipContextual,
    Aggregate,
}

/// One backend call. `images` holds keyframes in order: the previous clip's
/// two (contextual requests only), then the current clip's two.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRequest {
    pub kind: RequestKind,
    pub prompt: String,
    pub images: Vec<Frame>,
    pub clip_id: Option<usize>,
    pub captions: Vec<String>,
}

/// JSON body shared by the remote and subprocess transports.
#[derive(Debug, Serialize, Deserialize)]
pub struct WireRequest {
    pub prompt: String,
    pub images: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireResponse {
    pub text: String,
}

pub fn encode_png(frame: &Frame) -> Vec<u8> {
    use image::ImageEncoder;
    let mut buf = Cursor::new(Vec::new());
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(&frame.data, frame.width, frame.height, image::ExtendedColorType::Rgb8)
        .expect("encoding an in-memory RGB buffer cannot fail");
    buf.into_inner()
}

impl CaptionRequest {
    pub fn to_wire(&self) -> WireRequest {
        let b64 = base64::engine::general_purpose::STANDARD;
        WireRequest {
            prompt: self.prompt.clone(),
            images: self.images.iter().map(|f| b64.encode(encode_png(f))).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_wire()).expect("wire request serialises")
    }
}

pub trait CaptionBackend: Send + Sync {
    fn complete(&self, req: &CaptionRequest) -> Result<String, BackendError>;

    fn name(&self) -> &'static str;
}

fn parse_response(body: &str) -> Result<String, BackendError> {
    let resp: WireResponse = serde_json::from_str(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
    if resp.text.trim().is_empty() {
        return Err(BackendError::EmptyResponse);
    }
    Ok(resp.text)
}

/// Deterministic stand-in: clip captions fingerprint the current clip's
/// keyframes, aggregation concatenates.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockBackend;

impl MockBackend {
    pub fn clip_caption(clip_id: usize, keyframes: &[Frame]) -> String {
        let mut h = Fnv1a::new();
        for f in keyframes {
            h.update(&f.data);
        }
        format!("clip {clip_id}: {:08x}", h.finish() >> 32)
    }

    pub fn summary(captions: &[String]) -> String {
        format!("summary[{}]", captions.join("; "))
    }
}

impl CaptionBackend for MockBackend {
    fn complete(&self, req: &CaptionRequest) -> Result<String, BackendError> {
        match req.kind {
            RequestKind::Aggregate => Ok(Self::summary(&req.captions)),
            RequestKind::ClipInitial | RequestKind::ClipContextual => {
                let id = req
                    .clip_id
                    .ok_or_else(|| BackendError::Malformed("clip request without clip id".into()))?;
                let cur = &req.images[req.images.len().saturating_sub(2)..];
                Ok(Self::clip_caption(id, cur))
            }
        }
    }

    fn name(&self) -> &'static str {
        "mock"
    }
}

/// POSTs `{"prompt", "images"}` and expects `{"text"}`.
pub struct RemoteBackend {
    endpoint: String,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            agent,
        }
    }
}

impl CaptionBackend for RemoteBackend {
    fn complete(&self, req: &CaptionRequest) -> Result<String, BackendError> {
        let resp = self
            .agent
            .post(&self.endpoint)
            .header("content-type", "application/json")
            .send(req.to_json())
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => BackendError::Timeout(Duration::ZERO),
                other => BackendError::Transport(other.to_string()),
            })?;
        let status = resp.status().as_u16();
        let body = resp
            .into_body()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if status != 200 {
            return Err(BackendError::Status { status, body });
        }
        parse_response(&body)
    }

    fn name(&self) -> &'static str {
        "remote"
    }
}

/// Runs a shell command template with `{request}` and `{response}`
/// placeholders; the command reads the request JSON and writes the response JSON.
pub struct SubprocessBackend {
    template: String,
    timeout: Duration,
    scratch: PathBuf,
}

impl SubprocessBackend {
    pub fn new(template: impl Into<String>, timeout: Duration) -> Self {
        Self {
            template: template.into(),
            timeout,
            scratch: std::env::temp_dir(),
        }
    }
}

impl CaptionBackend for SubprocessBackend {
    fn complete(&self, req: &CaptionRequest) -> Result<String, BackendError> {
        let body = req.to_json();
        let tag = format!(
            "temple-forge-{}-{:?}-{:016x}",
            std::process::id(),
            thread::current().id(),
            fnv1a64(body.as_bytes())
        )
        .replace(['(', ')'], "");
        let req_path = self.scratch.join(format!("{tag}.request.json"));
        let resp_path = self.scratch.join(format!("{tag}.response.json"));
        fs::write(&req_path, &body).map_err(|e| BackendError::Transport(e.to_string()))?;
        let _ = fs::remove_file(&resp_path);
        let cmd = self
            .template
            .replace("{request}", &req_path.to_string_lossy())
            .replace("{response}", &resp_path.to_string_lossy());
        let result = run_with_timeout(&cmd, self.timeout).and_then(|()| {
            let text = fs::read_to_string(&resp_path).map_err(|e| BackendError::Malformed(format!("no response file: {e}")))?;
            parse_response(&text)
        });
        let _ = fs::remove_file(&req_path);
        let _ = fs::remove_file(&resp_path);
        result
    }

    fn name(&self) -> &'static str {
        "subprocess"
    }
}

fn run_with_timeout(cmd: &str, timeout: Duration) -> Result<(), BackendError> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(cmd)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| BackendError::Transport(e.to_string()))?;
    let start = Instant::now();
    loop {
        match child.try_wait().map_err(|e| BackendError::Transport(e.to_string()))? {
            Some(status) => {
                if status.success() {
                    return Ok(());
                }
                let out = child.wait_with_output().map_err(|e| BackendError::Transport(e.to_string()))?;
                return Err(BackendError::Process {
                    code: status.code(),
                    stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
                });
            }
            None if start.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(BackendError::Timeout(timeout));
            }
            None => thread::sleep(Duration::from_millis(5)),
        }
    }
}

/// Exponential backoff: waits `initial`, `2 * initial`, ... between attempts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

pub struct Retrying<B> {
    inner: B,
    policy: RetryPolicy,
}

impl<B: CaptionBackend> Retrying<B> {
    pub fn new(inner: B, policy: RetryPolicy) -> Self {
        Self { inner, policy }
    }
}

impl<B: CaptionBackend> CaptionBackend for Retrying<B> {
    fn complete(&self, req: &CaptionRequest) -> Result<String, BackendError> {
        let mut delay = self.policy.initial_backoff;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let err = match self.inner.complete(req) {
                Ok(text) if !text.trim().is_empty() => return Ok(text),
                Ok(_) => BackendError::EmptyResponse,
                Err(BackendError::Config(m)) => return Err(BackendError::Config(m)),
                Err(e) => e,
            };
            if attempt > self.policy.max_retries {
                return Err(BackendError::Exhausted {
                    attempts: attempt,
                    last: Box::new(err),
                });
            }
            log::warn!("{} backend attempt {attempt} failed: {err}; retrying in {delay:?}", self.inner.name());
            thread::sleep(delay);
            delay *= 2;
        }
    }

    fn name(&self) -> &'static str {
        self.inner.name()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Arc;

    fn clip_req(images: Vec<Frame>) -> CaptionRequest {
        CaptionRequest {
            kind: RequestKind::ClipInitial,
            prompt: "p".into(),
            images,
            clip_id: Some(3),
            captions: vec![],
        }
    }

    #[test]
    fn mock_definitions() {
        let kf = vec![Frame::solid(4, 4, [1, 2, 3]), Frame::solid(4, 4, [4, 5, 6])];
        let text = MockBackend.complete(&clip_req(kf.clone())).unwrap();
        assert!(text.starts_with("clip 3: "));
        assert_eq!(text.len(), "clip 3: ".len() + 8);
        // Context frames do not change the caption of the current clip.
        let mut ctx = vec![Frame::solid(4, 4, [9, 9, 9]); 2];
        ctx.extend(kf);
        let mut req = clip_req(ctx);
        req.kind = RequestKind::ClipContextual;
        assert_eq!(MockBackend.complete(&req).unwrap(), text);

        let agg = CaptionRequest {
            kind: RequestKind::Aggregate,
            prompt: String::new(),
            images: vec![],
            clip_id: None,
            captions: vec!["a".into(), "b".into()],
        };
        assert_eq!(MockBackend.complete(&agg).unwrap(), "summary[a; b]");
    }

    struct Flaky {
        calls: AtomicU32,
        fail_first: u32,
        reply: &'static str,
    }

    impl CaptionBackend for Flaky {
        fn complete(&self, _: &CaptionRequest) -> Result<String, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err(BackendError::Timeout(Duration::from_secs(1)))
            } else {
                Ok(self.reply.to_string())
            }
        }
        fn name(&self) -> &'static str {
            "flaky"
        }
    }

    fn fast(max_retries: u32) -> RetryPolicy {
        RetryPolicy {
            max_retries,
            initial_backoff: Duration::from_millis(1),
        }
    }

    #[test]
    fn retries_then_succeeds() {
        let b = Retrying::new(
            Flaky {
                calls: AtomicU32::new(0),
                fail_first: 2,
                reply: "ok",
            },
            fast(3),
        );
        assert_eq!(b.complete(&clip_req(vec![])).unwrap(), "ok");
        assert_eq!(b.inner.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn empty_reply_exhausts_retries() {
        let b = Retrying::new(
            Flaky {
                calls: AtomicU32::new(0),
                fail_first: 0,
                reply: "",
            },
            fast(3),
        );
        match b.complete(&clip_req(vec![])).unwrap_err() {
            BackendError::Exhausted { attempts, last } => {
                assert_eq!(attempts, 4);
                assert_eq!(*last, BackendError::EmptyResponse);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn backoff_doubles() {
        let b = Retrying::new(
            Flaky {
                calls: AtomicU32::new(0),
                fail_first: 3,
                reply: "ok",
            },
            RetryPolicy {
                max_retries: 3,
                initial_backoff: Duration::from_millis(20),
            },
        );
        let t = Instant::now();
        b.complete(&clip_req(vec![])).unwrap();
        // 20 + 40 + 80 ms
        assert!(t.elapsed() >= Duration::from_millis(140));
    }

    /// Minimal HTTP server: answers each connection with the next canned response.
    fn serve(responses: Vec<(u16, String)>) -> (String, Arc<std::sync::Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/caption", listener.local_addr().unwrap());
        let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        thread::spawn(move || {
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                seen2.lock().unwrap().push(String::from_utf8(buf).unwrap());
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (url, seen)
    }

    #[test]
    fn remote_wire_format_and_retry_on_status() {
        let (url, seen) = serve(vec![
            (503, "busy".into()),
            (200, r#"{"text": "a dog runs"}"#.into()),
        ]);
        let b = Retrying::new(RemoteBackend::new(url, Duration::from_secs(5)), fast(2));
        let req = clip_req(vec![Frame::solid(3, 3, [10, 20, 30])]);
        assert_eq!(b.complete(&req).unwrap(), "a dog runs");
        let bodies = seen.lock().unwrap();
        assert_eq!(bodies.len(), 2);
        let wire: WireRequest = serde_json::from_str(&bodies[1]).unwrap();
        assert_eq!(wire.prompt, "p");
        let png = base64::engine::general_purpose::STANDARD.decode(&wire.images[0]).unwrap();
        let img = image::load_from_memory(&png).unwrap().into_rgb8();
        assert_eq!(img.get_pixel(1, 1).0, [10, 20, 30]);
    }

    #[test]
    fn remote_malformed_payload() {
        let (url, _) = serve(vec![(200, "{\"nope\": 1}".into())]);
        let b = RemoteBackend::new(url, Duration::from_secs(5));
        assert!(matches!(b.complete(&clip_req(vec![])), Err(BackendError::Malformed(_))));
    }

    #[test]
    fn remote_unreachable_is_transport_error() {
        let b = RemoteBackend::new("http://127.0.0.1:9/none", Duration::from_millis(500));
        assert!(b.complete(&clip_req(vec![])).is_err());
    }

    #[test]
    fn subprocess_roundtrip() {
        // Echo the prompt back through the response file.
        let cmd = r#"python3 -c "import json,sys; r=json.load(open(sys.argv[1])); json.dump({'text': 'saw ' + r['prompt'] + ' with ' + str(len(r['images']))}, open(sys.argv[2],'w'))" {request} {response}"#;
        let b = SubprocessBackend::new(cmd, Duration::from_secs(20));
        let text = b.complete(&clip_req(vec![Frame::solid(3, 3, [0; 3]); 2])).unwrap();
        assert_eq!(text, "saw p with 2");
    }

    #[test]
    fn subprocess_failure_and_timeout() {
        let b = SubprocessBackend::new("echo oops >&2; exit 4", Duration::from_secs(5));
        assert_eq!(
            b.complete(&clip_req(vec![])),
            Err(BackendError::Process {
                code: Some(4),
                stderr: "oops".into()
            })
        );
        let b = SubprocessBackend::new("sleep 5", Duration::from_millis(100));
        assert!(matches!(b.complete(&clip_req(vec![])), Err(BackendError::Timeout(_))));
    }
}
