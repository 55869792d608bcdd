//! Typed client for the docsieve HTTP service. Request and response bodies
//! are the `docsieve_core::api` types, so paths in them refer to the
//! service's filesystem.

use serde::de::DeserializeOwned;
use serde::Serialize;

use docsieve_core::api::{
    CalibrateRequest, CalibrateResponse, ErrorBody, EvalRequest, Health, ScoreRequest, ScoreResponse, SynthRequest,
    SynthResponse, TrainRequest, TrainResponse,
};
use docsieve_core::pipeline::{Metrics, PipelineConfig, RunFiles, TradeoffPoint};

pub const DEFAULT_SERVER: &str = "http://127.0.0.1:7878";

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("cannot reach {url}: {message}")]
    Transport { url: String, message: String },

    /// The service answered with a non-2xx status.
    #[error("server returned {status}: {message}")]
    Api { status: u16, message: String },

    #[error("unreadable response from {url}: {message}")]
    Decode { url: String, message: String },
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base_url` is the service root, e.g. `http://127.0.0.1:7878`.
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base: base_url.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn decode<T: DeserializeOwned>(url: &str, response: reqwest::Response) -> Result<T> {
        let status = response.status();
        let bytes = response.bytes().await.map_err(|e| ClientError::Transport {
            url: url.to_string(),
            message: e.to_string(),
        })?;
        if !status.is_success() {
            let message = match serde_json::from_slice::<ErrorBody>(&bytes) {
                Ok(body) => body.error,
                Err(_) => String::from_utf8_lossy(&bytes).into_owned(),
            };
            return Err(ClientError::Api {
                status: status.as_u16(),
                message,
            });
        }
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode {
            url: url.to_string(),
            message: e.to_string(),
        })
    }

    async fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp> {
        let url = format!("{}{path}", self.base);
        let response = self.http.post(&url).json(body).send().await.map_err(|e| ClientError::Transport {
            url: url.clone(),
            message: e.to_string(),
        })?;
        Self::decode(&url, response).await
    }

    pub async fn health(&self) -> Result<Health> {
        let url = format!("{}/health", self.base);
        let response = self.http.get(&url).send().await.map_err(|e| ClientError::Transport {
            url: url.clone(),
            message: e.to_string(),
        })?;
        Self::decode(&url, response).await
    }

    pub async fn synth(&self, req: &SynthRequest) -> Result<SynthResponse> {
        self.post("/v1/synth", req).await
    }

    pub async fn train(&self, req: &TrainRequest) -> Result<TrainResponse> {
        self.post("/v1/train", req).await
    }

    pub async fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse> {
        self.post("/v1/score", req).await
    }

    pub async fn calibrate(&self, req: &CalibrateRequest) -> Result<CalibrateResponse> {
        self.post("/v1/calibrate", req).await
    }

    pub async fn run(&self, config: &PipelineConfig) -> Result<RunFiles> {
        self.post("/v1/run", config).await
    }

    pub async fn eval(&self, req: &EvalRequest) -> Result<Metrics> {
        self.post("/v1/eval", req).await
    }

    pub async fn sweep(&self, config: &PipelineConfig) -> Result<Vec<TradeoffPoint>> {
        self.post("/v1/sweep", config).await
    }
}
