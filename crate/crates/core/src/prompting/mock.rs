//! A local chat-completion endpoint for tests and dry runs.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use serde_json::{json, Value};

#[derive(Clone, Debug, PartialEq)]
pub struct MockReply {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl MockReply {
    pub fn caption(text: &str) -> Self {
        Self {
            status: 200,
            headers: Vec::new(),
            body: json!({
                "model": "mock",
                "choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]
            })
            .to_string(),
        }
    }

    pub fn status(status: u16) -> Self {
        Self {
            status,
            headers: Vec::new(),
            body: json!({"error": {"message": format!("mock status {status}")}}).to_string(),
        }
    }

    pub fn with_header(mut self, k: &str, v: &str) -> Self {
        self.headers.push((k.into(), v.into()));
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordedRequest {
    pub authorization: Option<String>,
    pub body: String,
}

type Responder = dyn Fn(&Value) -> MockReply + Send + Sync;

struct Shared {
    script: Mutex<VecDeque<MockReply>>,
    requests: Mutex<Vec<RecordedRequest>>,
    responder: Box<Responder>,
    stop: AtomicBool,
}

/// Serves scripted replies first, then falls back to the responder.
pub struct MockServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    handle: Option<JoinHandle<()>>,
}

/// Deterministic caption built from the bag-of-words lines of a prompt.
pub fn echo_caption(request: &Value) -> MockReply {
    let prompt = request
        .pointer("/messages/0/content")
        .and_then(Value::as_str)
        .unwrap_or("");
    let words: Vec<&str> = prompt
        .rsplit_once("BoW tokens with scores:\n")
        .map(|(_, block)| block)
        .unwrap_or("")
        .lines()
        .filter_map(|l| l.split_whitespace().next())
        .take(5)
        .collect();
    let caption = if words.is_empty() {
        "An indistinct scene with nothing clearly visible in the picture.".to_string()
    } else {
        format!("A photo showing {} together in one simple scene.", words.join(" and "))
    };
    MockReply::caption(&caption)
}

impl MockServer {
    pub fn start() -> std::io::Result<Self> {
        Self::with_responder(echo_caption)
    }

    pub fn with_responder(
        responder: impl Fn(&Value) -> MockReply + Send + Sync + 'static,
    ) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            script: Mutex::new(VecDeque::new()),
            requests: Mutex::new(Vec::new()),
            responder: Box::new(responder),
            stop: AtomicBool::new(false),
        });
        let s = Arc::clone(&shared);
        let handle = thread::spawn(move || {
            for stream in listener.incoming() {
                if s.stop.load(Ordering::SeqCst) {
                    break;
                }
                if let Ok(stream) = stream {
                    let s = Arc::clone(&s);
                    thread::spawn(move || {
                        let _ = serve(stream, &s);
                    });
                }
            }
        });
        Ok(Self {
            addr,
            shared,
            handle: Some(handle),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }

    pub fn push(&self, reply: MockReply) {
        self.shared.script.lock().unwrap().push_back(reply);
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.shared.requests.lock().unwrap().clone()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        401 => "Unauthorized",
        403 => "Forbidden",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    }
}

fn serve(stream: TcpStream, shared: &Shared) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.is_empty() {
        return Ok(());
    }
    let mut len = 0usize;
    let mut authorization = None;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            let k = k.trim().to_ascii_lowercase();
            if k == "content-length" {
                len = v.trim().parse().unwrap_or(0);
            } else if k == "authorization" {
                authorization = Some(v.trim().to_string());
            }
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    let body = String::from_utf8_lossy(&body).into_owned();
    let parsed: Value = serde_json::from_str(&body).unwrap_or(Value::Null);
    shared.requests.lock().unwrap().push(RecordedRequest {
        authorization,
        body,
    });
    let scripted = shared.script.lock().unwrap().pop_front();
    let reply = scripted.unwrap_or_else(|| (shared.responder)(&parsed));
    let mut out = format!(
        "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n",
        reply.status,
        reason(reply.status),
        reply.body.len()
    );
    for (k, v) in &reply.headers {
        out.push_str(&format!("{k}: {v}\r\n"));
    }
    out.push_str("\r\n");
    out.push_str(&reply.body);
    let mut stream = stream;
    stream.write_all(out.as_bytes())?;
    stream.flush()?;
    stream.shutdown(Shutdown::Write)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::prompting::{generate_all, generate_caption, CaptionJob, LLMConfig};

    const X: [f32; 4] = [0.11, 0.22, 0.33, 0.44];

    fn cfg(server: &MockServer, env: &str) -> LLMConfig {
        std::env::set_var(env, "test-token");
        LLMConfig {
            endpoint: server.url(),
            model: "mock-model".into(),
            credential_env: env.into(),
            backoff_ms: 1,
            max_retries: 2,
            timeout_secs: 10.0,
            ..Default::default()
        }
    }

    #[test]
    fn echo_and_length_check() {
        let server = MockServer::with_responder(|_| {
            MockReply::caption("A black grand piano on a wooden floor.")
        })
        .unwrap();
        let c = generate_caption("prompt", &cfg(&server, "MOCK_T1"), &X, None).unwrap();
        assert_eq!((c.word_count, c.length_ok, c.attempts), (8, true, 1));
        assert_eq!(c.model, "mock");
        let req = &server.requests()[0];
        assert_eq!(req.authorization.as_deref(), Some("Bearer test-token"));
        let v: Value = serde_json::from_str(&req.body).unwrap();
        assert_eq!(v["temperature"], 0.2);
        assert_eq!(v["model"], "mock-model");
    }

    #[test]
    fn short_caption_is_soft() {
        let server = MockServer::with_responder(|_| MockReply::caption("a black piano")).unwrap();
        let c = generate_caption("p", &cfg(&server, "MOCK_T2"), &X, None).unwrap();
        assert_eq!(c.text, "a black piano");
        assert!(!c.length_ok);
    }

    #[test]
    fn rate_limit_then_success() {
        let server = MockServer::start().unwrap();
        server.push(MockReply::status(429).with_header("Retry-After", "0"));
        let c = generate_caption("p", &cfg(&server, "MOCK_T3"), &X, None).unwrap();
        assert_eq!(c.attempts, 2);
        assert_eq!(server.requests().len(), 2);
    }

    #[test]
    fn failures_map_to_errors() {
        let server = MockServer::start().unwrap();
        let c = cfg(&server, "MOCK_T4");
        server.push(MockReply::status(401));
        assert!(matches!(generate_caption("p", &c, &X, None), Err(Error::Auth { status: 401 })));
        for _ in 0..3 {
            server.push(MockReply::status(503));
        }
        let e = generate_caption("p", &c, &X, None).unwrap_err();
        assert!(matches!(e, Error::Network(_)) && e.exit_code() == 3);
        server.push(MockReply {
            status: 200,
            headers: vec![],
            body: "{\"choices\":[]}".into(),
        });
        assert!(matches!(generate_caption("p", &c, &X, None), Err(Error::MalformedResponse(_))));
        let missing = LLMConfig { credential_env: "MOCK_UNSET_VAR".into(), ..c.clone() };
        assert!(matches!(generate_caption("p", &missing, &X, None), Err(Error::MissingCredential(_))));
    }

    #[test]
    fn leaking_prompt_never_leaves() {
        let server = MockServer::start().unwrap();
        let leak = "piano (0.9000)\n0.1100 0.2200 0.3300";
        let e = generate_caption(leak, &cfg(&server, "MOCK_T5"), &X, None).unwrap_err();
        assert!(matches!(&e, Error::Privacy(m) if m.contains("raw embedding x")));
        let z = [0.5f32, 0.6, 0.7];
        let leak = "0.5000 0.6000 0.7000";
        let e = generate_caption(leak, &cfg(&server, "MOCK_T5"), &X, Some(&z)).unwrap_err();
        assert!(matches!(&e, Error::Privacy(m) if m.contains("latent z")));
        assert!(server.requests().is_empty());
    }

    #[test]
    fn concurrent_jobs_keep_order() {
        let server = MockServer::start().unwrap();
        let prompts: Vec<String> = (0..10)
            .map(|i| format!("BoW tokens with scores:\nw{i} (0.5000)"))
            .collect();
        let jobs: Vec<CaptionJob> = prompts
            .iter()
            .map(|p| CaptionJob { prompt: p, x: &X, z: None })
            .collect();
        let out = generate_all(&jobs, &cfg(&server, "MOCK_T6"));
        for (i, r) in out.iter().enumerate() {
            assert!(r.as_ref().unwrap().text.contains(&format!("w{i}")));
        }
        assert_eq!(server.requests().len(), 10);
    }
}
