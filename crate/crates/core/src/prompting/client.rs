use std::ops::RangeInclusive;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::assert_privacy;
use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_CONCURRENCY: usize = 4;
pub const LENGTH_RANGE: RangeInclusive<usize> = 8..=20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LLMConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    /// Must be set for any temperature other than the default.
    pub temperature_override: bool,
    pub max_retries: u32,
    pub timeout_secs: f64,
    /// Environment variable holding the bearer token.
    pub credential_env: String,
    pub concurrency: usize,
    pub backoff_ms: u64,
    /// Upper bound on any single wait, including server Retry-After.
    pub max_wait_ms: u64,
}

impl Default for LLMConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            temperature: DEFAULT_TEMPERATURE,
            temperature_override: false,
            max_retries: 3,
            timeout_secs: 60.0,
            credential_env: "LLM_API_KEY".into(),
            concurrency: DEFAULT_CONCURRENCY,
            backoff_ms: 500,
            max_wait_ms: 60_000,
        }
    }
}

impl LLMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature != DEFAULT_TEMPERATURE && !self.temperature_override {
            return Err(Error::Usage(format!(
                "temperature {} differs from {DEFAULT_TEMPERATURE} without the override flag",
                self.temperature
            )));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::Usage("temperature must be a finite non-negative number".into()));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(Error::Usage("timeout must be positive".into()));
        }
        if self.concurrency == 0 {
            return Err(Error::Usage("concurrency must be at least 1".into()));
        }
        if self.endpoint.is_empty() || self.model.is_empty() {
            return Err(Error::Usage("endpoint and model must be set".into()));
        }
        Ok(())
    }

    fn token(&self) -> Result<String> {
        std::env::var(&self.credential_env)
            .ok()
            .filter(|t| !t.is_empty())
            .ok_or_else(|| Error::MissingCredential(self.credential_env.clone()))
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.backoff_ms.saturating_mul(1u64 << attempt.min(20));
        Duration::from_millis(ms.min(self.max_wait_ms))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn new(prompt: &str, cfg: &LLMConfig) -> Self {
        Self {
            model: cfg.model.clone(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: prompt.into(),
            }],
            temperature: cfg.temperature,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCaption {
    pub text: String,
    pub word_count: usize,
    pub length_ok: bool,
    pub model: String,
    pub latency_ms: u64,
    pub attempts: u32,
}

pub fn count_words(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Parsed `Retry-After` in whole seconds; HTTP dates are not honored.
fn retry_after(resp: &ureq::http::Response<ureq::Body>) -> Option<Duration> {
    let v = resp.headers().get("retry-after")?.to_str().ok()?;
    v.trim().parse::<u64>().ok().map(Duration::from_secs)
}

fn parse_completion(body: &str, cfg: &LLMConfig) -> Result<(String, String)> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| Error::MalformedResponse(format!("response is not JSON: {e}")))?;
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::MalformedResponse("missing choices[0].message.content".into()))?;
    let model = v
        .get("model")
        .and_then(Value::as_str)
        .unwrap_or(&cfg.model)
        .to_string();
    Ok((text.trim().to_string(), model))
}

/// Sends one prompt. The serialized request is checked against the
/// sample's raw embedding `x` and latent `z` before anything leaves the
/// process.
pub fn generate_caption(
    prompt: &str,
    cfg: &LLMConfig,
    x: &[f32],
    z: Option<&[f32]>,
) -> Result<GeneratedCaption> {
    cfg.validate()?;
    let payload = serde_json::to_vec(&ChatRequest::new(prompt, cfg))?;
    assert_privacy(&payload, x, z).map_err(|v| Error::Privacy(v.to_string()))?;
    let token = cfg.token()?;
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
        .http_status_as_error(false)
        .build()
        .into();
    let start = Instant::now();
    let mut attempt = 0u32;
    loop {
        let sent = agent
            .post(&cfg.endpoint)
            .header("Authorization", format!("Bearer {token}"))
            .header("Content-Type", "application/json")
            .send(&payload[..]);
        let wait = match sent {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                match status {
                    200..=299 => {
                        let body = resp
                            .body_mut()
                            .read_to_string()
                            .map_err(|e| Error::Network(format!("reading response: {e}")))?;
                        let (text, model) = parse_completion(&body, cfg)?;
                        let word_count = count_words(&text);
                        return Ok(GeneratedCaption {
                            length_ok: LENGTH_RANGE.contains(&word_count),
                            word_count,
                            text,
                            model,
                            latency_ms: start.elapsed().as_millis() as u64,
                            attempts: attempt + 1,
                        });
                    }
                    401 | 403 => return Err(Error::Auth { status }),
                    429 | 500..=599 => (
                        retry_after(&resp).map(|d| d.min(Duration::from_millis(cfg.max_wait_ms))),
                        format!("HTTP {status}"),
                    ),
                    _ => {
                        let body = resp.body_mut().read_to_string().unwrap_or_default();
                        return Err(Error::Network(format!("HTTP {status}: {}", body.trim())));
                    }
                }
            }
            Err(e) => (None, e.to_string()),
        };
        if attempt >= cfg.max_retries {
            return Err(Error::Network(format!(
                "{} after {} attempts",
                wait.1,
                attempt + 1
            )));
        }
        thread::sleep(wait.0.unwrap_or_else(|| cfg.backoff(attempt)));
        attempt += 1;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CaptionJob<'a> {
    pub prompt: &'a str,
    pub x: &'a [f32],
    pub z: Option<&'a [f32]>,
}

/// Runs jobs with at most `cfg.concurrency` requests in flight; results
/// keep job order.
pub fn generate_all(jobs: &[CaptionJob<'_>], cfg: &LLMConfig) -> Vec<Result<GeneratedCaption>> {
    if let Err(e) = cfg.validate() {
        let msg = e.to_string();
        return jobs.iter().map(|_| Err(Error::Usage(msg.clone()))).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<GeneratedCaption>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|s| {
        for _ in 0..cfg.concurrency.min(jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = generate_caption(job.prompt, cfg, job.x, job.z);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every job is claimed"))
        .collect()
}
