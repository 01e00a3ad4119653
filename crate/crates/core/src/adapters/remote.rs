//! HTTP/JSON client for adapter services.
//!
//! Endpoints: `POST /caption`, `POST /embed`, `POST /propose`,
//! `POST /classify`, `POST /scenarios`, and `GET /meta` for the embedding
//! dimension. Every call is treated as idempotent: transport failures, 5xx
//! and 429 responses are retried `retries` times with exponential backoff
//! before surfacing [`Error::AdapterUnavailable`].

use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    AdapterKind, CaptionerAdapter, CropClassifierAdapter, EmbedderAdapter, ProposerAdapter,
    RawProposal, ScenarioGeneratorAdapter, UsageMeter,
};
use crate::error::{Error, Result};
use crate::feeder::EmbeddingVector;
use crate::geometry::BoundingBox;

/// Prompt sent along with `/scenarios` requests; `{category}` is substituted.
pub const SCENARIO_PROMPT_TEMPLATE: &str = "You are helping test an autonomous-driving object \
detector. Write {n} short, distinct descriptions of street scenes that each contain a \
{category}. Vary the appearance of the {category}, the surrounding objects, the time of day, \
and the weather. Return one description per line and mention \"{category}\" in every line.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteAdapterConfig {
    pub base_url: String,
    pub timeout_secs: f64,
    pub retries: u32,
    /// Name of the environment variable holding a bearer token, if any.
    pub token_env: Option<String>,
    pub backoff_ms: u64,
}

impl Default for RemoteAdapterConfig {
    fn default() -> Self {
        RemoteAdapterConfig {
            base_url: "http://127.0.0.1:8700".into(),
            timeout_secs: 30.0,
            retries: 3,
            token_env: None,
            backoff_ms: 100,
        }
    }
}

impl RemoteAdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::Config("remote timeout must be > 0".into()));
        }
        if self.base_url.is_empty() {
            return Err(Error::Config("remote base_url is empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct RemoteClient {
    agent: ureq::Agent,
    config: RemoteAdapterConfig,
    token: Option<String>,
    meter: Arc<UsageMeter>,
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl RemoteClient {
    pub fn new(config: RemoteAdapterConfig, meter: Arc<UsageMeter>) -> Result<Self> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let token = config
            .token_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok());
        Ok(RemoteClient {
            agent,
            config,
            token,
            meter,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn attempt<T: DeserializeOwned>(&self, path: &str, body: Option<&[u8]>) -> std::result::Result<T, Attempt> {
        let url = self.url(path);
        let result = match body {
            Some(bytes) => {
                let mut req = self.agent.post(&url).header("content-type", "application/json");
                if let Some(t) = &self.token {
                    req = req.header("authorization", &format!("Bearer {t}"));
                }
                req.send(bytes)
            }
            None => {
                let mut req = self.agent.get(&url);
                if let Some(t) = &self.token {
                    req = req.header("authorization", &format!("Bearer {t}"));
                }
                req.call()
            }
        };
        let mut resp = result.map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("http status {status}")));
        }
        if status >= 400 {
            return Err(Attempt::Fatal(format!("http status {status}")));
        }
        resp.body_mut()
            .read_json::<T>()
            .map_err(|e| Attempt::Fatal(format!("bad response body: {e}")))
    }

    fn call<T: DeserializeOwned>(&self, kind: AdapterKind, name: &str, path: &str, body: Option<Vec<u8>>) -> Result<T> {
        let started = Instant::now();
        let mut last = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                let wait = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt::<T>(path, body.as_deref()) {
                Ok(v) => {
                    self.meter.record(kind, started.elapsed(), body.as_ref().map_or(0, Vec::len));
                    return Ok(v);
                }
                Err(Attempt::Fatal(reason)) => return Err(Error::adapter(name, reason)),
                Err(Attempt::Retry(reason)) => last = reason,
            }
        }
        Err(Error::adapter(
            name,
            format!("{} attempts failed: {last}", self.config.retries + 1),
        ))
    }

    fn post<Req: Serialize, T: DeserializeOwned>(&self, kind: AdapterKind, name: &str, path: &str, req: &Req) -> Result<T> {
        let body = serde_json::to_vec(req)?;
        self.call(kind, name, path, Some(body))
    }

    /// `GET /meta`.
    pub fn meta(&self) -> Result<Meta> {
        self.call(AdapterKind::Embedder, "meta", "/meta", None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub dimension: usize,
}

#[derive(Serialize, Deserialize)]
pub struct CaptionRequest {
    pub image_id: String,
}

#[derive(Serialize, Deserialize)]
pub struct CaptionResponse {
    pub caption: String,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedKind {
    Text,
    Image,
}

#[derive(Serialize, Deserialize)]
pub struct EmbedRequest {
    pub kind: EmbedKind,
    pub payload: String,
}

#[derive(Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vector: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct ProposeRequest {
    pub image_id: String,
    pub prompts: Vec<String>,
}

#[derive(Serialize, Deserialize)]
pub struct ProposeResponse {
    pub boxes: Vec<RawProposal>,
}

#[derive(Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub scores: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct ScenariosRequest {
    pub category: String,
    pub n: usize,
    pub prompt: String,
}

#[derive(Serialize, Deserialize)]
pub struct ScenariosResponse {
    pub descriptions: Vec<String>,
}

pub struct RemoteCaptioner(pub RemoteClient);

impl CaptionerAdapter for RemoteCaptioner {
    fn describe(&self, image_id: &str) -> Result<String> {
        let r: CaptionResponse = self.0.post(
            AdapterKind::Captioner,
            "captioner",
            "/caption",
            &CaptionRequest {
                image_id: image_id.into(),
            },
        )?;
        Ok(r.caption)
    }
}

pub struct RemoteEmbedder {
    client: RemoteClient,
    dimension: usize,
}

impl RemoteEmbedder {
    /// Negotiates the vector dimension through `GET /meta`.
    pub fn connect(client: RemoteClient) -> Result<Self> {
        let meta = client.meta()?;
        Ok(RemoteEmbedder {
            client,
            dimension: meta.dimension,
        })
    }

    fn embed(&self, kind: EmbedKind, payload: &str) -> Result<EmbeddingVector> {
        let r: EmbedResponse = self.client.post(
            AdapterKind::Embedder,
            "embedder",
            "/embed",
            &EmbedRequest {
                kind,
                payload: payload.into(),
            },
        )?;
        if r.vector.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                actual: r.vector.len(),
            });
        }
        EmbeddingVector::new(r.vector)
    }
}

impl EmbedderAdapter for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        self.embed(EmbedKind::Text, text)
    }

    fn embed_image(&self, image_id: &str) -> Result<EmbeddingVector> {
        self.embed(EmbedKind::Image, image_id)
    }
}

pub struct RemoteProposer(pub RemoteClient);

impl ProposerAdapter for RemoteProposer {
    fn propose(&self, image_id: &str, prompts: &[String]) -> Result<Vec<RawProposal>> {
        let r: ProposeResponse = self.0.post(
            AdapterKind::Proposer,
            "proposer",
            "/propose",
            &ProposeRequest {
                image_id: image_id.into(),
                prompts: prompts.to_vec(),
            },
        )?;
        Ok(r.boxes)
    }
}

pub struct RemoteClassifier(pub RemoteClient);

impl CropClassifierAdapter for RemoteClassifier {
    fn classify(&self, image_id: &str, bbox: &BoundingBox, labels: &[String]) -> Result<Vec<f64>> {
        let r: ClassifyResponse = self.0.post(
            AdapterKind::CropClassifier,
            "classifier",
            "/classify",
            &ClassifyRequest {
                image_id: image_id.into(),
                bbox: *bbox,
                labels: labels.to_vec(),
            },
        )?;
        if r.scores.len() != labels.len() || r.scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::adapter(
                "classifier",
                format!("expected {} scores in [0,1], got {:?}", labels.len(), r.scores),
            ));
        }
        Ok(r.scores)
    }
}

pub struct RemoteScenarioGenerator(pub RemoteClient);

impl ScenarioGeneratorAdapter for RemoteScenarioGenerator {
    fn generate(&self, category: &str, n: usize) -> Result<Vec<String>> {
        let prompt = SCENARIO_PROMPT_TEMPLATE
            .replace("{category}", category)
            .replace("{n}", &n.to_string());
        let r: ScenariosResponse = self.0.post(
            AdapterKind::ScenarioGenerator,
            "scenarios",
            "/scenarios",
            &ScenariosRequest {
                category: category.into(),
                n,
                prompt,
            },
        )?;
        Ok(r.descriptions)
    }
}

/// Build the five perception adapters against one service.
pub fn connect_all(config: RemoteAdapterConfig, meter: Arc<UsageMeter>) -> Result<super::AdapterSet> {
    let client = RemoteClient::new(config, meter)?;
    Ok(super::AdapterSet {
        captioner: Box::new(RemoteCaptioner(client.clone())),
        embedder: Box::new(RemoteEmbedder::connect(client.clone())?),
        proposer: Box::new(RemoteProposer(client.clone())),
        classifier: Box::new(RemoteClassifier(client.clone())),
        scenarios: Box::new(RemoteScenarioGenerator(client)),
    })
}
