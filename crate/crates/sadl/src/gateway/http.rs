//! Chat-completions HTTP backend.
//!
//! Posts the rendered prompt as one user message whose content parts
//! interleave image references and text, with temperature 0. Retries
//! transient failures (connect errors, 5xx, 429) with exponential backoff;
//! everything else is fatal on first sight.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{InFlightLimiter, ModelBackend, ModelReply, ModelRequest};
use crate::net::{retry_with_backoff, Attempt};
use crate::prompt::Segment;

pub const API_KEY_ENV: &str = "SADL_API_KEY";
const DEFAULT_MAX_TOKENS: u32 = 256;

pub struct HttpBackend {
    id: String,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    limiter: InFlightLimiter,
    max_tokens: u32,
    attempts: u32,
    base_delay: Duration,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    max_tokens: u32,
    messages: Vec<Message<'a>>,
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'a str,
    content: MessageContent<'a>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum MessageContent<'a> {
    Text(&'a str),
    Parts(Vec<Part<'a>>),
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Part<'a> {
    Text { text: &'a str },
    ImageUrl { image_url: ImageUrl<'a> },
}

#[derive(Serialize)]
struct ImageUrl<'a> {
    url: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: String,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Result<Self> {
        let endpoint = endpoint.into();
        let model = model.into();
        if endpoint.trim().is_empty() {
            return Err(Error::config("http backend endpoint must not be empty"));
        }
        if model.trim().is_empty() {
            return Err(Error::config("http backend model must not be empty"));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(super::DEFAULT_TIMEOUT)
            .build()
            .map_err(|e| Error::transport("http", e.to_string()))?;
        Ok(HttpBackend {
            id: format!("http:{model}"),
            endpoint,
            model,
            api_key: std::env::var(API_KEY_ENV).ok(),
            client,
            limiter: InFlightLimiter::new(super::DEFAULT_IN_FLIGHT_LIMIT),
            max_tokens: DEFAULT_MAX_TOKENS,
            attempts: 3,
            base_delay: Duration::from_millis(200),
        })
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn with_in_flight_limit(mut self, limit: usize) -> Self {
        self.limiter = InFlightLimiter::new(limit);
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_retry_policy(mut self, attempts: u32, base_delay: Duration) -> Self {
        self.attempts = attempts.max(1);
        self.base_delay = base_delay;
        self
    }

    fn post(&self, body: &ChatRequest) -> Result<String> {
        let _permit = self.limiter.acquire();
        retry_with_backoff(self.attempts, self.base_delay, |_| {
            let mut builder = self.client.post(&self.endpoint).json(body);
            if let Some(key) = &self.api_key {
                builder = builder.bearer_auth(key);
            }
            let response = match builder.send() {
                Ok(r) => r,
                Err(e) => return Attempt::Retry(Error::transport(&self.id, e.to_string())),
            };
            let status = response.status();
            if status.is_server_error() || status.as_u16() == 429 {
                return Attempt::Retry(Error::transport(&self.id, format!("status {status}")));
            }
            if !status.is_success() {
                return Attempt::Fatal(Error::transport(&self.id, format!("status {status}")));
            }
            match response.json::<ChatResponse>() {
                Ok(parsed) => match parsed.choices.into_iter().next() {
                    Some(choice) => Attempt::Done(choice.message.content),
                    None => Attempt::Fatal(Error::transport(&self.id, "empty choices array")),
                },
                Err(e) => Attempt::Fatal(Error::transport(&self.id, e.to_string())),
            }
        })
    }
}

impl ModelBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn answer(&self, request: &ModelRequest) -> Result<ModelReply> {
        request.validate()?;
        let segments = request.context.segments();
        let parts: Vec<Part> = segments
            .iter()
            .map(|segment| match segment {
                Segment::Image(reference) => Part::ImageUrl {
                    image_url: ImageUrl { url: reference },
                },
                Segment::Text(text) => Part::Text { text },
            })
            .collect();
        let body = ChatRequest {
            model: &self.model,
            temperature: 0.0,
            max_tokens: self.max_tokens,
            messages: vec![Message {
                role: "user",
                content: MessageContent::Parts(parts),
            }],
        };
        let started = Instant::now();
        let content = self.post(&body)?;
        Ok(ModelReply {
            raw_text: content,
            latency: started.elapsed(),
            backend_id: self.id.clone(),
        })
    }

    fn complete(&self, prompt: &str, _request_id: &str) -> Result<ModelReply> {
        if prompt.trim().is_empty() {
            return Err(Error::validation("completion prompt must not be empty"));
        }
        let body = ChatRequest {
            model: &self.model,
            temperature: 0.0,
            max_tokens: self.max_tokens,
            messages: vec![Message {
                role: "user",
                content: MessageContent::Text(prompt),
            }],
        };
        let started = Instant::now();
        let content = self.post(&body)?;
        Ok(ModelReply {
            raw_text: content,
            latency: started.elapsed(),
            backend_id: self.id.clone(),
        })
    }
}
