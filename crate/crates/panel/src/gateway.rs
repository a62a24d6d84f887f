//! OpenAI-compatible HTTP completion provider.
//!
//! Wire format, `POST {base_url}/v1/chat/completions`:
//!
//! ```json
//! {"model":"m","messages":[{"role":"system","content":"..."}],"temperature":0.0,"max_tokens":512,"seed":7}
//! ```
//!
//! `seed` is omitted when the request carries none. The reply must contain
//! `choices[0].message.content`; `choices[0].finish_reason` is passed through.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use fmea_panel_core::error::GatewayError;
use fmea_panel_core::llm::{ChatMessage, Completer, CompletionRequest, CompletionResult, ProviderKind};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const API_KEY_ENV: &str = "LLM_API_KEY";
pub const BASE_URL_ENV: &str = "LLM_BASE_URL";
pub const MAX_ATTEMPTS: u32 = 3;
pub const CHAT_PATH: &str = "/v1/chat/completions";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl From<&CompletionRequest> for WireRequest {
    fn from(r: &CompletionRequest) -> Self {
        Self {
            model: r.model_name.clone(),
            messages: r.messages.clone(),
            temperature: r.temperature,
            max_tokens: r.max_tokens,
            seed: r.request_seed,
        }
    }
}

impl From<WireRequest> for CompletionRequest {
    fn from(w: WireRequest) -> Self {
        Self {
            messages: w.messages,
            temperature: w.temperature,
            max_tokens: w.max_tokens,
            model_name: w.model,
            request_seed: w.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    #[serde(default)]
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireChoice {
    pub message: WireMessage,
    #[serde(default)]
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub choices: Vec<WireChoice>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpSettings {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// First retry delay; later retries double it.
    pub backoff_base: Duration,
    /// Each delay is scaled by a uniform factor in `1 ± jitter`.
    pub jitter: f64,
}

impl HttpSettings {
    /// `base_url` falls back to `LLM_BASE_URL`; the key comes from `LLM_API_KEY`.
    pub fn from_env(base_url: Option<&str>) -> Result<Self, GatewayError> {
        let base_url = base_url
            .map(str::to_string)
            .or_else(|| std::env::var(BASE_URL_ENV).ok())
            .filter(|u| !u.trim().is_empty())
            .ok_or_else(|| GatewayError::Protocol(format!("no base_url configured and {BASE_URL_ENV} unset")))?;
        Ok(Self {
            base_url,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            timeout: Duration::from_secs(120),
            backoff_base: Duration::from_millis(500),
            jitter: 0.1,
        })
    }
}

/// Delay before retry number `retry` (1-based), without jitter.
pub fn backoff_delay(base: Duration, retry: u32) -> Duration {
    base * 2u32.pow(retry.saturating_sub(1))
}

pub struct HttpProvider {
    settings: HttpSettings,
    // created on first use so construction is safe inside an async runtime
    client: OnceLock<reqwest::blocking::Client>,
}

impl HttpProvider {
    pub fn new(settings: HttpSettings) -> Self {
        Self { settings, client: OnceLock::new() }
    }

    pub fn settings(&self) -> &HttpSettings {
        &self.settings
    }

    fn client(&self) -> Result<&reqwest::blocking::Client, GatewayError> {
        if let Some(c) = self.client.get() {
            return Ok(c);
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(self.settings.timeout)
            .build()
            .map_err(|e| GatewayError::Protocol(format!("http client: {e}")))?;
        Ok(self.client.get_or_init(|| client))
    }

    fn url(&self) -> String {
        format!("{}{CHAT_PATH}", self.settings.base_url.trim_end_matches('/'))
    }

    fn sleep_before(&self, retry: u32) {
        let base = backoff_delay(self.settings.backoff_base, retry);
        let j = self.settings.jitter.clamp(0.0, 1.0);
        let factor = if j > 0.0 { rand::rng().random_range(1.0 - j..=1.0 + j) } else { 1.0 };
        std::thread::sleep(base.mul_f64(factor));
    }
}

impl Drop for HttpProvider {
    fn drop(&mut self) {
        // the blocking client must not be dropped on an async worker thread
        if let Some(client) = self.client.take() {
            let _ = std::thread::spawn(move || drop(client)).join();
        }
    }
}

enum Attempt {
    Done(CompletionResult),
    Retry { status: Option<u16>, message: String },
    Fatal(GatewayError),
}

impl HttpProvider {
    fn attempt(&self, body: &WireRequest) -> Attempt {
        let client = match self.client() {
            Ok(c) => c,
            Err(e) => return Attempt::Fatal(e),
        };
        let started = Instant::now();
        let mut request = client.post(self.url()).json(body);
        if let Some(key) = &self.settings.api_key {
            request = request.bearer_auth(key);
        }
        let response = match request.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry { status: None, message: e.to_string() },
        };
        let status = response.status().as_u16();
        let text = response.text().unwrap_or_default();
        if status == 429 || (500..600).contains(&status) {
            return Attempt::Retry { status: Some(status), message: text };
        }
        if !(200..300).contains(&status) {
            return Attempt::Fatal(GatewayError::RequestRejected { status, body: text });
        }
        let parsed: WireResponse = match serde_json::from_str(&text) {
            Ok(p) => p,
            Err(e) => return Attempt::Fatal(GatewayError::Protocol(format!("response body: {e}"))),
        };
        let Some(choice) = parsed.choices.into_iter().next() else {
            return Attempt::Fatal(GatewayError::Protocol("response has no choices".into()));
        };
        Attempt::Done(CompletionResult {
            text: choice.message.content,
            provider: ProviderKind::Http,
            latency_ms: started.elapsed().as_millis() as u64,
            raw_finish_reason: choice.finish_reason.unwrap_or_default(),
        })
    }
}

impl Completer for HttpProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        request.validate().map_err(|e| GatewayError::RequestRejected { status: 0, body: e.to_string() })?;
        let body = WireRequest::from(request);
        let mut last_status = None;
        let mut last_message = String::new();
        for attempt in 1..=MAX_ATTEMPTS {
            if attempt > 1 {
                self.sleep_before(attempt - 1);
            }
            match self.attempt(&body) {
                Attempt::Done(result) => return Ok(result),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry { status, message } => {
                    tracing::warn!(attempt, status, "completion attempt failed");
                    last_status = status;
                    last_message = message;
                }
            }
        }
        Err(GatewayError::BackendUnavailable { attempts: MAX_ATTEMPTS, last_status, message: last_message })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Serves one canned `(status, body)` per connection and records requests.
    fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<(String, String)>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut headers = String::new();
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
                    headers.push_str(&line);
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push((headers, String::from_utf8(buf).unwrap()));
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}"), seen)
    }

    fn provider(base_url: String) -> HttpProvider {
        HttpProvider::new(HttpSettings {
            base_url,
            api_key: Some("sekrit".into()),
            timeout: Duration::from_secs(5),
            backoff_base: Duration::from_millis(1),
            jitter: 0.0,
        })
    }

    fn request() -> CompletionRequest {
        CompletionRequest {
            messages: vec![ChatMessage::system("You are the Reliability Engineer."), ChatMessage::user("Why?")],
            temperature: 0.0,
            max_tokens: 64,
            model_name: "m1".into(),
            request_seed: Some(7),
        }
    }

    fn ok_body(text: &str) -> String {
        serde_json::json!({"choices":[{"message":{"role":"assistant","content":text},"finish_reason":"stop"}]}).to_string()
    }

    #[test]
    fn wire_request_round_trips() {
        let req = request();
        let json = serde_json::to_string(&WireRequest::from(&req)).unwrap();
        assert!(json.contains("\"seed\":7"));
        let back: WireRequest = serde_json::from_str(&json).unwrap();
        assert_eq!(CompletionRequest::from(back), req);
        let mut unseeded = req.clone();
        unseeded.request_seed = None;
        assert!(!serde_json::to_string(&WireRequest::from(&unseeded)).unwrap().contains("seed"));
    }

    #[test]
    fn retries_transient_failures() {
        let (url, seen) = serve(vec![(503, "busy".into()), (429, "slow down".into()), (200, ok_body("hello"))]);
        let result = provider(url).complete(&request()).unwrap();
        assert_eq!(result.text, "hello");
        assert_eq!(result.raw_finish_reason, "stop");
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 3);
        assert!(seen[0].0.to_ascii_lowercase().contains("authorization: bearer sekrit"));
        assert!(seen[0].0.starts_with("POST /v1/chat/completions"));
        let sent: WireRequest = serde_json::from_str(&seen[2].1).unwrap();
        assert_eq!(CompletionRequest::from(sent), request());
    }

    #[test]
    fn exhausted_retries_carry_last_status() {
        let (url, seen) = serve(vec![(500, "a".into()), (502, "b".into()), (503, "c".into())]);
        match provider(url).complete(&request()) {
            Err(GatewayError::BackendUnavailable { attempts, last_status, .. }) => {
                assert_eq!((attempts, last_status), (3, Some(503)));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, seen) = serve(vec![(400, "bad model".into())]);
        match provider(url).complete(&request()) {
            Err(GatewayError::RequestRejected { status, body }) => assert_eq!((status, body.as_str()), (400, "bad model")),
            other => panic!("{other:?}"),
        }
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn malformed_json_is_a_protocol_error() {
        let (url, _) = serve(vec![(200, "{not json".into())]);
        assert!(matches!(provider(url).complete(&request()), Err(GatewayError::Protocol(_))));
    }

    #[test]
    fn unreachable_endpoint() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        match provider(format!("http://127.0.0.1:{port}")).complete(&request()) {
            Err(GatewayError::BackendUnavailable { attempts: 3, last_status: None, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn backoff_doubles() {
        let base = Duration::from_millis(500);
        let delays: Vec<Duration> = (1..=3).map(|r| backoff_delay(base, r)).collect();
        assert_eq!(delays, [Duration::from_millis(500), Duration::from_secs(1), Duration::from_secs(2)]);
    }
}
