//! OpenAI-compatible chat-completions client.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ChatBackend, ChatRequest, ChatResponse, FinishReason, GatewayError, Usage};

pub const API_KEY_ENV: &str = "REPROMPT_API_KEY";
pub const BASE_URL_ENV: &str = "REPROMPT_BASE_URL";

#[derive(Clone, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl std::fmt::Debug for HttpConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpConfig")
            .field("base_url", &self.base_url)
            .field("has_api_key", &self.api_key.is_some())
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
        }
    }

    /// Takes the key from `REPROMPT_API_KEY`; `REPROMPT_BASE_URL`, when set,
    /// overrides `base_url`.
    pub fn from_env(base_url: impl Into<String>) -> Self {
        let mut cfg = Self::new(std::env::var(BASE_URL_ENV).unwrap_or_else(|_| base_url.into()));
        cfg.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        cfg
    }
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    config: HttpConfig,
}

#[derive(Deserialize)]
struct ApiResponse {
    choices: Vec<ApiChoice>,
    #[serde(default)]
    usage: Option<ApiUsage>,
}

#[derive(Deserialize)]
struct ApiChoice {
    message: ApiMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ApiMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ApiUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::Transport(format!("failed to build HTTP client: {e}")))?;
        Ok(Self { client, config })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let messages: Vec<_> = request
            .messages
            .iter()
            .map(|m| json!({ "role": m.role.as_str(), "content": m.content }))
            .collect();
        let mut body = json!({
            "model": request.model,
            "messages": messages,
            "temperature": request.temperature,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        if let Some(max) = request.max_output {
            body["max_tokens"] = json!(max);
        }

        let mut builder = self.client.post(self.endpoint()).json(&body);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder
            .send()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        if status.as_u16() == 429 {
            return Err(GatewayError::RateLimited(text));
        }
        if status.is_server_error() {
            return Err(GatewayError::Transport(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(GatewayError::Rejected(format!("HTTP {status}: {text}")));
        }

        let parsed: ApiResponse = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Transport(format!("malformed response body: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::Transport("response has no choices".into()))?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("stop") => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            _ => FinishReason::Other,
        };
        let usage = parsed
            .usage
            .map(|u| Usage {
                prompt_units: u.prompt_tokens,
                output_units: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok(ChatResponse {
            content: choice.message.content.unwrap_or_default(),
            finish_reason,
            usage,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatMessage, Gateway, RetryPolicy};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    /// Serves the canned (status, body) replies in order, one per connection,
    /// and forwards each received request (headers + body) to the channel.
    fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap();
                    }
                    head.push_str(&line);
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut buf = vec![0u8; content_length];
                reader.read_exact(&mut buf).unwrap();
                tx.send(head + &String::from_utf8(buf).unwrap()).unwrap();
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1"), rx)
    }

    fn ok_body(content: &str) -> String {
        json!({
            "choices": [{"message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": 7, "completion_tokens": 3}
        })
        .to_string()
    }

    fn request() -> ChatRequest {
        ChatRequest::new("gpt-test", vec![ChatMessage::system("sys"), ChatMessage::user("hi")])
    }

    #[test]
    fn sends_openai_shape_and_reads_first_choice() {
        let (url, rx) = serve(vec![(200, ok_body("hello back"))]);
        let mut cfg = HttpConfig::new(url);
        cfg.api_key = Some("sk-test".into());
        let gw = Gateway::with_retry(HttpBackend::new(cfg).unwrap(), RetryPolicy::no_delay(3));
        let resp = gw.complete(&request()).unwrap();
        assert_eq!(resp.content, "hello back");
        assert_eq!(resp.finish_reason, FinishReason::Stop);
        assert_eq!(resp.usage, Usage { prompt_units: 7, output_units: 3 });

        let sent = rx.recv().unwrap();
        assert!(sent.starts_with("POST /v1/chat/completions"));
        assert!(sent.to_ascii_lowercase().contains("authorization: bearer sk-test"));
        let body: serde_json::Value = serde_json::from_str(sent.split("\r\n\r\n").nth(1).unwrap()).unwrap();
        assert_eq!(body["model"], "gpt-test");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["seed"], 42);
        assert_eq!(body["messages"][1]["role"], "user");
        assert_eq!(body["messages"][1]["content"], "hi");
    }

    #[test]
    fn server_errors_are_retried_then_succeed() {
        let (url, _rx) = serve(vec![
            (500, "{}".into()),
            (429, "{}".into()),
            (200, ok_body("third time")),
        ]);
        let gw = Gateway::with_retry(HttpBackend::new(HttpConfig::new(url)).unwrap(), RetryPolicy::no_delay(3));
        assert_eq!(gw.complete(&request()).unwrap().content, "third time");
        assert_eq!(gw.calls(), 1);
    }

    #[test]
    fn client_errors_are_rejected_without_retry() {
        let (url, _rx) = serve(vec![(400, "{\"error\":\"bad\"}".into())]);
        let gw = Gateway::with_retry(HttpBackend::new(HttpConfig::new(url)).unwrap(), RetryPolicy::no_delay(3));
        assert!(matches!(gw.complete(&request()), Err(GatewayError::Rejected(_))));
    }

    #[test]
    fn persistent_rate_limit_surfaces() {
        let (url, _rx) = serve(vec![(429, "{}".into()), (429, "{}".into()), (429, "{}".into())]);
        let gw = Gateway::with_retry(HttpBackend::new(HttpConfig::new(url)).unwrap(), RetryPolicy::no_delay(3));
        assert!(matches!(gw.complete(&request()), Err(GatewayError::RateLimited(_))));
    }

    #[test]
    fn length_finish_and_missing_content() {
        let body = json!({"choices": [{"message": {"content": null}, "finish_reason": "length"}]}).to_string();
        let (url, _rx) = serve(vec![(200, body)]);
        let gw = Gateway::with_retry(HttpBackend::new(HttpConfig::new(url)).unwrap(), RetryPolicy::no_delay(1));
        let resp = gw.complete(&request()).unwrap();
        assert_eq!(resp.finish_reason, FinishReason::Length);
        assert_eq!(resp.content, "");
    }
}
