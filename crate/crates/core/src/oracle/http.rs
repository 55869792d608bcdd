use std::collections::HashMap;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

use super::rate_limit::{estimate_tokens, Clock, RateLimitPolicy, RateLimiter, RetryPolicy};
use super::{Oracle, OracleError};

/// An OpenAI-style chat-completions endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Base URL up to and including the API version, e.g. `https://host/v1`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding a bearer token, if the endpoint needs one.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    60
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system: String,
    /// Must contain `{query}` and `{document}`.
    pub user: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            system: "You decide whether a document satisfies a condition. \
                     Reply with exactly one word: YES or NO."
                .into(),
            user: "Query: {query}\nDocument: {document}\nAnswer YES or NO.".into(),
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), String> {
        for slot in ["{query}", "{document}"] {
            if !self.user.contains(slot) {
                return Err(format!("user prompt template lacks {slot}"));
            }
        }
        Ok(())
    }

    pub fn render(&self, query: &str, document: &str) -> String {
        self.user.replace("{query}", query).replace("{document}", document)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HttpOracleConfig {
    pub endpoint: EndpointConfig,
    #[serde(default)]
    pub template: PromptTemplate,
    #[serde(default)]
    pub limits: RateLimitPolicy,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            api_key_env: None,
            temperature: 0.0,
            timeout_secs: default_timeout_secs(),
        }
    }
}

/// YES/NO from the first word of a reply, ignoring case and punctuation.
pub fn parse_reply(text: &str) -> Option<bool> {
    let word = text.split_whitespace().next()?;
    let word = word.trim_matches(|c: char| !c.is_alphanumeric());
    if word.eq_ignore_ascii_case("yes") {
        Some(true)
    } else if word.eq_ignore_ascii_case("no") {
        Some(false)
    } else {
        None
    }
}

enum Attempt {
    Reply(String),
    Retryable(String),
    Fatal(String),
}

/// Labels documents by asking a chat model, with retries, bounded
/// concurrency and a per-minute token budget.
pub struct HttpOracle {
    client: reqwest::Client,
    endpoint: EndpointConfig,
    template: PromptTemplate,
    api_key: Option<String>,
    texts: HashMap<String, String>,
    permits: Semaphore,
    limiter: RateLimiter,
    retry: RetryPolicy,
    clock: Arc<dyn Clock>,
}

impl HttpOracle {
    /// `texts` maps doc_id to the document text shown to the model.
    pub fn new(
        config: HttpOracleConfig,
        texts: HashMap<String, String>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, OracleError> {
        let transport = |message: String| OracleError::Transport { message, attempts: 0 };
        config.template.validate().map_err(transport)?;
        if config.limits.max_concurrent == 0 || config.limits.retry.max_attempts == 0 {
            return Err(transport("max_concurrent and max_attempts must be at least 1".into()));
        }
        let api_key = match &config.endpoint.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| OracleError::MissingApiKey(var.clone()))?),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(std::time::Duration::from_secs(config.endpoint.timeout_secs))
            .build()
            .map_err(|e| transport(e.to_string()))?;
        Ok(Self {
            client,
            permits: Semaphore::new(config.limits.max_concurrent),
            limiter: RateLimiter::new(config.limits.tokens_per_minute, clock.clone()),
            retry: config.limits.retry,
            endpoint: config.endpoint,
            template: config.template,
            api_key,
            texts,
            clock,
        })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.endpoint.base_url.trim_end_matches('/'))
    }

    async fn send(&self, body: &serde_json::Value) -> Attempt {
        let mut request = self.client.post(self.url()).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = match request.send().await {
            Ok(r) => r,
            Err(e) => return Attempt::Retryable(e.to_string()),
        };
        let status = response.status();
        if !status.is_success() {
            let message = format!("HTTP {status}");
            return if status.as_u16() == 429 || status.is_server_error() {
                Attempt::Retryable(message)
            } else {
                Attempt::Fatal(message)
            };
        }
        match response.json::<serde_json::Value>().await {
            Ok(v) => match v["choices"][0]["message"]["content"].as_str() {
                Some(content) => Attempt::Reply(content.to_string()),
                None => Attempt::Retryable("response has no choices[0].message.content".into()),
            },
            Err(e) => Attempt::Retryable(e.to_string()),
        }
    }
}

#[async_trait]
impl Oracle for HttpOracle {
    async fn label(&self, query: &str, doc_id: &str) -> Result<bool, OracleError> {
        let document = self
            .texts
            .get(doc_id)
            .ok_or_else(|| OracleError::MissingText(doc_id.to_string()))?;
        let user = self.template.render(query, document);
        let tokens = estimate_tokens(&self.template.system) + estimate_tokens(&user);
        let body = json!({
            "model": self.endpoint.model,
            "temperature": self.endpoint.temperature,
            "messages": [
                {"role": "system", "content": self.template.system},
                {"role": "user", "content": user},
            ],
        });
        let max = self.retry.max_attempts;
        let mut last = OracleError::Transport {
            message: "no attempt made".into(),
            attempts: 0,
        };
        for attempt in 1..=max {
            let outcome = {
                let _permit = self.permits.acquire().await.expect("semaphore never closed");
                self.limiter.acquire(tokens).await?;
                self.send(&body).await
            };
            match outcome {
                Attempt::Reply(text) => match parse_reply(&text) {
                    Some(label) => return Ok(label),
                    None => {
                        last = OracleError::Unparseable {
                            reply: text,
                            attempts: attempt,
                        }
                    }
                },
                Attempt::Retryable(message) => {
                    last = OracleError::Transport {
                        message,
                        attempts: attempt,
                    }
                }
                Attempt::Fatal(message) => {
                    return Err(OracleError::Transport {
                        message,
                        attempts: attempt,
                    })
                }
            }
            if attempt < max {
                self.clock.sleep(self.retry.backoff(attempt)).await;
            }
        }
        Err(last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::VirtualClock;
    use axum::extract::State;
    use axum::routing::post;
    use axum::{Json, Router};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    #[test]
    fn reply_parsing() {
        assert_eq!(parse_reply("YES"), Some(true));
        assert_eq!(parse_reply("  no."), Some(false));
        assert_eq!(parse_reply("Yes, it does."), Some(true));
        assert_eq!(parse_reply("\n**NO**"), Some(false));
        assert_eq!(parse_reply("maybe"), None);
        assert_eq!(parse_reply("nope"), None);
        assert_eq!(parse_reply(""), None);
    }

    #[test]
    fn template_rendering() {
        let t = PromptTemplate::default();
        assert!(t.validate().is_ok());
        let text = t.render("about cats", "a cat sat");
        assert!(text.contains("Query: about cats"));
        assert!(text.contains("Document: a cat sat"));
        let bad = PromptTemplate {
            system: String::new(),
            user: "{query}".into(),
        };
        assert!(bad.validate().is_err());
    }

    #[derive(Clone)]
    struct Stub {
        replies: Arc<Mutex<Vec<(u16, String)>>>,
        bodies: Arc<Mutex<Vec<serde_json::Value>>>,
        hits: Arc<AtomicUsize>,
    }

    async fn handler(
        State(stub): State<Stub>,
        Json(body): Json<serde_json::Value>,
    ) -> (axum::http::StatusCode, Json<serde_json::Value>) {
        stub.hits.fetch_add(1, Ordering::SeqCst);
        stub.bodies.lock().unwrap().push(body);
        let (status, text) = {
            let mut replies = stub.replies.lock().unwrap();
            if replies.len() > 1 {
                replies.remove(0)
            } else {
                replies[0].clone()
            }
        };
        (
            axum::http::StatusCode::from_u16(status).unwrap(),
            Json(json!({"choices": [{"message": {"role": "assistant", "content": text}}]})),
        )
    }

    async fn serve(replies: Vec<(u16, &str)>) -> (String, Stub) {
        let stub = Stub {
            replies: Arc::new(Mutex::new(replies.into_iter().map(|(s, t)| (s, t.to_string())).collect())),
            bodies: Arc::default(),
            hits: Arc::default(),
        };
        let app = Router::new()
            .route("/v1/chat/completions", post(handler))
            .with_state(stub.clone());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
        (format!("http://{addr}/v1"), stub)
    }

    fn oracle(base_url: String, clock: Arc<VirtualClock>) -> HttpOracle {
        let config = HttpOracleConfig {
            endpoint: EndpointConfig {
                base_url,
                model: "judge".into(),
                ..EndpointConfig::default()
            },
            template: PromptTemplate::default(),
            limits: RateLimitPolicy {
                tokens_per_minute: 10_000,
                max_concurrent: 2,
                retry: RetryPolicy {
                    max_attempts: 3,
                    backoff_base_ms: 1000,
                },
            },
        };
        let texts = [("d1".to_string(), "the text".to_string())].into_iter().collect();
        HttpOracle::new(config, texts, clock).unwrap()
    }

    #[tokio::test]
    async fn sends_chat_request_and_parses_reply() {
        let (url, stub) = serve(vec![(200, "Yes.")]).await;
        let clock = Arc::new(VirtualClock::new());
        let o = oracle(url, clock);
        assert!(o.label("is it a test", "d1").await.unwrap());
        let body = stub.bodies.lock().unwrap()[0].clone();
        assert_eq!(body["model"], "judge");
        assert_eq!(body["temperature"], 0.0);
        let user = body["messages"][1]["content"].as_str().unwrap();
        assert!(user.contains("is it a test") && user.contains("the text"));
        assert!(matches!(o.label("q", "missing").await, Err(OracleError::MissingText(_))));
    }

    #[tokio::test]
    async fn retries_with_exponential_backoff() {
        let (url, stub) = serve(vec![(500, ""), (200, "garbled"), (200, "NO")]).await;
        let clock = Arc::new(VirtualClock::new());
        let o = oracle(url, clock.clone());
        assert!(!o.label("q", "d1").await.unwrap());
        assert_eq!(stub.hits.load(Ordering::SeqCst), 3);
        // 1 s after the first failure, 2 s after the second.
        assert_eq!(clock.now(), std::time::Duration::from_secs(3));
    }

    #[tokio::test]
    async fn gives_up_after_max_attempts() {
        let (url, stub) = serve(vec![(200, "perhaps")]).await;
        let o = oracle(url, Arc::new(VirtualClock::new()));
        let err = o.label("q", "d1").await.unwrap_err();
        assert!(matches!(err, OracleError::Unparseable { attempts: 3, .. }), "{err}");
        assert_eq!(stub.hits.load(Ordering::SeqCst), 3);
    }

    #[tokio::test]
    async fn client_errors_are_not_retried() {
        let (url, stub) = serve(vec![(400, "")]).await;
        let o = oracle(url, Arc::new(VirtualClock::new()));
        assert!(matches!(o.label("q", "d1").await, Err(OracleError::Transport { attempts: 1, .. })));
        assert_eq!(stub.hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn missing_api_key_is_reported() {
        let config = HttpOracleConfig {
            endpoint: EndpointConfig {
                api_key_env: Some("DOCSIEVE_TEST_KEY_THAT_IS_NOT_SET".into()),
                ..EndpointConfig::default()
            },
            ..HttpOracleConfig::default()
        };
        let err = HttpOracle::new(config, HashMap::new(), Arc::new(VirtualClock::new())).err().unwrap();
        assert!(err.to_string().contains("DOCSIEVE_TEST_KEY_THAT_IS_NOT_SET"));
    }
}
