//! Chat-completions client for OpenAI-compatible endpoints.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use dissent_core::synthesis::{Provider, ProviderError, ProviderRequest};

pub struct HttpProvider {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    min_interval: Option<Duration>,
    next_slot: Mutex<Instant>,
}

impl HttpProvider {
    /// `requests_per_minute = 0` disables client-side pacing.
    pub fn new(endpoint: &str, model: &str, api_key: Option<String>, timeout: Duration, requests_per_minute: u32) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            min_interval: (requests_per_minute > 0).then(|| Duration::from_secs_f64(60.0 / requests_per_minute as f64)),
            next_slot: Mutex::new(Instant::now()),
        }
    }

    fn pace(&self) {
        let Some(interval) = self.min_interval else { return };
        let wait = {
            let mut next = self.next_slot.lock().expect("pacing lock");
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + interval;
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }

    pub fn body(&self, request: &ProviderRequest) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_tokens,
        })
    }
}

fn excerpt(s: &str) -> String {
    s.chars().take(200).collect()
}

impl Provider for HttpProvider {
    fn id(&self) -> String {
        format!("openai:{}", self.model)
    }

    fn complete(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        self.pace();
        let mut call = self.agent.post(&self.endpoint).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        let response = match call.send_string(&self.body(request).to_string()) {
            Ok(r) => r,
            Err(ureq::Error::Status(429, _)) => return Err(ProviderError::RateLimited),
            Err(ureq::Error::Status(code, _)) if code >= 500 => return Err(ProviderError::Timeout),
            Err(ureq::Error::Status(code, r)) => {
                let body = r.into_string().unwrap_or_default();
                return Err(ProviderError::Permanent(format!("HTTP {code}: {}", excerpt(&body))));
            }
            Err(ureq::Error::Transport(_)) => return Err(ProviderError::Timeout),
        };
        let text = response.into_string().map_err(|_| ProviderError::Timeout)?;
        let json: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| ProviderError::Permanent(format!("response is not JSON: {e}")))?;
        json.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Permanent(format!("no message content in response: {}", excerpt(&text))))
    }
}
