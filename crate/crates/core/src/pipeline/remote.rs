//! HTTP chat-completions annotator client.

use std::env;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{json, Value};

use super::backend::{
    AnnotatorBackend, BackendError, FrameInput, PlanRequest, ReasonRequest, SegmentRequest,
};

pub const ENDPOINT_VAR: &str = "ANNOTATOR_ENDPOINT";
pub const MODEL_VAR: &str = "ANNOTATOR_MODEL";
pub const TOKEN_VAR: &str = "ANNOTATOR_TOKEN";

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    pub token: String,
    pub timeout: Duration,
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub max_in_flight: usize,
}

impl RemoteConfig {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        token: impl Into<String>,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            token: token.into(),
            timeout: Duration::from_secs(120),
            max_attempts: 3,
            backoff_base: Duration::from_millis(500),
            max_in_flight: 8,
        }
    }

    /// Reads endpoint, model and token from the environment.
    pub fn from_env() -> Result<Self, BackendError> {
        let token = env::var(TOKEN_VAR)
            .ok()
            .filter(|t| !t.is_empty())
            .ok_or_else(|| BackendError::Auth(format!("{TOKEN_VAR} is not set")))?;
        let endpoint = env::var(ENDPOINT_VAR)
            .map_err(|_| BackendError::Unavailable(format!("{ENDPOINT_VAR} is not set")))?;
        let model = env::var(MODEL_VAR)
            .map_err(|_| BackendError::Unavailable(format!("{MODEL_VAR} is not set")))?;
        Ok(Self::new(endpoint, model, token))
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    slots: Semaphore,
}

/// Chat-completions body: each frame as a `Frame <id>` text part followed by
/// its image as a PNG data URL, then the prompt.
pub fn build_request_body(
    model: &str,
    prompt: &str,
    frames: &[FrameInput],
) -> Result<Value, BackendError> {
    let mut content = Vec::with_capacity(frames.len() * 2 + 1);
    for f in frames {
        let image = f.image.as_ref().ok_or_else(|| {
            BackendError::Unsupported(format!("frame {} has no image", f.frame_id))
        })?;
        content.push(json!({"type": "text", "text": format!("Frame {}", f.frame_id)}));
        content.push(json!({
            "type": "image_url",
            "image_url": {"url": format!("data:image/png;base64,{}", STANDARD.encode(image.as_slice()))},
        }));
    }
    content.push(json!({"type": "text", "text": prompt}));
    Ok(json!({
        "model": model,
        "messages": [{"role": "user", "content": content}],
        "temperature": 0,
    }))
}

fn response_text(body: &str) -> Result<String, BackendError> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| BackendError::Unavailable(format!("response is not JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| {
            BackendError::Unavailable(format!("response has no message content: {body}"))
        })
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        if config.token.is_empty() {
            return Err(BackendError::Auth("empty token".into()));
        }
        if config.max_attempts == 0 || config.max_in_flight == 0 {
            return Err(BackendError::Unsupported(
                "max_attempts and max_in_flight must be >= 1".into(),
            ));
        }
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        let slots = Semaphore::new(config.max_in_flight);
        Ok(Self {
            config,
            agent,
            slots,
        })
    }

    pub fn from_env() -> Result<Self, BackendError> {
        Self::new(RemoteConfig::from_env()?)
    }

    fn complete(&self, prompt: &str, frames: &[FrameInput]) -> Result<String, BackendError> {
        let body = build_request_body(&self.config.model, prompt, frames)?.to_string();
        let _permit = self.slots.acquire();
        let mut last = String::new();
        for attempt in 0..self.config.max_attempts {
            if attempt > 0 {
                thread::sleep(self.config.backoff_base * 2u32.saturating_pow(attempt - 1));
            }
            let sent = self
                .agent
                .post(&self.config.endpoint)
                .set("Authorization", &format!("Bearer {}", self.config.token))
                .set("Content-Type", "application/json")
                .send_string(&body);
            match sent {
                Ok(resp) => {
                    let text = resp
                        .into_string()
                        .map_err(|e| BackendError::Unavailable(format!("reading response: {e}")));
                    match text {
                        Ok(t) => return response_text(&t),
                        Err(e) => last = e.to_string(),
                    }
                }
                Err(ureq::Error::Status(code @ (401 | 403), _)) => {
                    return Err(BackendError::Auth(format!("HTTP {code}")));
                }
                Err(ureq::Error::Status(code, _)) if code == 429 || code >= 500 => {
                    last = format!("HTTP {code}");
                }
                Err(ureq::Error::Status(code, resp)) => {
                    let detail = resp.into_string().unwrap_or_default();
                    return Err(BackendError::Unavailable(format!("HTTP {code}: {detail}")));
                }
                Err(ureq::Error::Transport(t)) => last = t.to_string(),
            }
            log::debug!("annotator request attempt {} failed: {last}", attempt + 1);
        }
        Err(BackendError::Unavailable(format!(
            "{} attempts failed, last: {last}",
            self.config.max_attempts
        )))
    }
}

impl AnnotatorBackend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn plan(&self, req: &PlanRequest<'_>) -> Result<String, BackendError> {
        self.complete(req.prompt, req.frames)
    }

    fn segment(&self, req: &SegmentRequest<'_>) -> Result<String, BackendError> {
        self.complete(req.prompt, req.frames)
    }

    fn reason(&self, req: &ReasonRequest<'_>) -> Result<String, BackendError> {
        self.complete(req.prompt, std::slice::from_ref(req.frame))
    }
}
