//! Adapters that call remote services over JSON/HTTP.

use std::io;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{AdapterFailure, Backend, FailureCause, ObjectSpec, PerceivedObject, Stage};
use crate::graph::RelationEdge;

pub const BASE_URL_ENV: &str = "HIGS_ADAPTER_URL";
pub const TIMEOUT_ENV: &str = "HIGS_ADAPTER_TIMEOUT_MS";
pub const DEFAULT_TOKEN_ENV: &str = "HIGS_ADAPTER_TOKEN";
pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Endpoint {
    pub url: String,
    pub timeout_ms: u64,
    /// Name of the env var holding a bearer token, read per call.
    #[serde(default)]
    pub auth_token_env: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RemoteConfig {
    pub object_lister: Endpoint,
    pub scene_prompter: Endpoint,
    pub image_generator: Endpoint,
    pub reconstructor: Endpoint,
    pub relation_estimator: Endpoint,
}

impl RemoteConfig {
    /// All five stages under one base URL: `/objects`, `/prompt`, `/image`,
    /// `/reconstruct`, `/relations`.
    pub fn with_base_url(base: &str, timeout_ms: u64, auth_token_env: Option<&str>) -> Self {
        let base = base.trim_end_matches('/');
        let ep = |path: &str| Endpoint {
            url: format!("{base}/{path}"),
            timeout_ms,
            auth_token_env: auth_token_env.map(str::to_string),
        };
        RemoteConfig {
            object_lister: ep("objects"),
            scene_prompter: ep("prompt"),
            image_generator: ep("image"),
            reconstructor: ep("reconstruct"),
            relation_estimator: ep("relations"),
        }
    }

    /// Reads `HIGS_ADAPTER_URL` and optionally `HIGS_ADAPTER_TIMEOUT_MS`.
    pub fn from_env() -> Option<Self> {
        let base = std::env::var(BASE_URL_ENV).ok()?;
        let timeout = std::env::var(TIMEOUT_ENV)
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(DEFAULT_TIMEOUT_MS);
        Some(Self::with_base_url(&base, timeout, Some(DEFAULT_TOKEN_ENV)))
    }

    fn endpoint(&self, stage: Stage) -> &Endpoint {
        match stage {
            Stage::ObjectLister => &self.object_lister,
            Stage::ScenePrompter => &self.scene_prompter,
            Stage::ImageGenerator => &self.image_generator,
            Stage::Reconstructor => &self.reconstructor,
            Stage::RelationEstimator => &self.relation_estimator,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteBackend {
    config: RemoteConfig,
}

pub fn external_adapter_config(config: RemoteConfig) -> RemoteBackend {
    RemoteBackend { config }
}

#[derive(Deserialize)]
struct ObjectsReply<T> {
    objects: Vec<T>,
}

#[derive(Deserialize)]
struct PromptReply {
    prompt: String,
}

#[derive(Deserialize)]
struct ImageReply {
    artifact: String,
}

#[derive(Deserialize)]
struct EdgesReply {
    edges: Vec<RelationEdge>,
}

fn failure(stage: Stage, cause: FailureCause) -> AdapterFailure {
    AdapterFailure { stage, cause }
}

fn map_err(stage: Stage, e: ureq::Error) -> AdapterFailure {
    let cause = match e {
        ureq::Error::Timeout(_) => FailureCause::Timeout,
        ureq::Error::Io(ref io) if matches!(io.kind(), io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock) => {
            FailureCause::Timeout
        }
        ureq::Error::Json(e) => FailureCause::BadSchema(e.to_string()),
        other => FailureCause::Remote(other.to_string()),
    };
    failure(stage, cause)
}

impl RemoteBackend {
    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn call<T: DeserializeOwned>(&self, stage: Stage, body: serde_json::Value) -> Result<T, AdapterFailure> {
        let ep = self.config.endpoint(stage);
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(ep.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(&ep.url);
        if let Some(token) = ep.auth_token_env.as_deref().and_then(|v| std::env::var(v).ok()) {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| map_err(stage, e))?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(failure(stage, FailureCause::Remote(format!("HTTP {status}: {text}"))));
        }
        let bytes = resp.body_mut().read_to_vec().map_err(|e| map_err(stage, e))?;
        serde_json::from_slice(&bytes).map_err(|e| failure(stage, FailureCause::BadSchema(e.to_string())))
    }
}

impl Backend for RemoteBackend {
    fn list_objects(&self, scene_text: &str, global_text: &str, seed: u64) -> Result<Vec<ObjectSpec>, AdapterFailure> {
        let r: ObjectsReply<ObjectSpec> = self.call(
            Stage::ObjectLister,
            json!({"sceneText": scene_text, "globalText": global_text, "seed": seed}),
        )?;
        Ok(r.objects)
    }

    fn scene_prompt(&self, objects: &[ObjectSpec], constraints: &str, seed: u64) -> Result<String, AdapterFailure> {
        let r: PromptReply = self.call(
            Stage::ScenePrompter,
            json!({"objects": objects, "constraints": constraints, "seed": seed}),
        )?;
        Ok(r.prompt)
    }

    fn generate_image(&self, prompt: &str, seed: u64) -> Result<String, AdapterFailure> {
        let r: ImageReply = self.call(Stage::ImageGenerator, json!({"prompt": prompt, "seed": seed}))?;
        Ok(r.artifact)
    }

    fn reconstruct(&self, artifact: &str, objects: &[ObjectSpec], seed: u64) -> Result<Vec<PerceivedObject>, AdapterFailure> {
        let r: ObjectsReply<PerceivedObject> = self.call(
            Stage::Reconstructor,
            json!({"artifact": artifact, "objects": objects, "seed": seed}),
        )?;
        Ok(r.objects)
    }

    fn estimate_relations(
        &self,
        artifact: &str,
        objects: &[PerceivedObject],
        seed: u64,
    ) -> Result<Vec<RelationEdge>, AdapterFailure> {
        let r: EdgesReply = self.call(
            Stage::RelationEstimator,
            json!({"artifact": artifact, "objects": objects, "seed": seed}),
        )?;
        Ok(r.edges)
    }
}
