//! Blocking HTTP client for a remote DEI.

use std::time::Duration;

use reqwest::blocking::{multipart, Client, RequestBuilder, Response};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use sloop_core::ensemble::{EnsembleWeights, RankedList};
use sloop_core::experiment::IterationMetrics;
use sloop_core::feedback::{CohortPartition, Label, PairKey, SubmitOutcome, VerificationTask};
use sloop_core::workflow::{WorkflowDef, WorkflowState};
use sloop_core::{Error, Result};

use crate::api::DeiApi;
use crate::server::{AuthRequest, CreateTaskBody, ErrorBody, GoldBody, ResponseBody, SkipBody, UploadMetadata};
use crate::store::{ImageMetadata, ImageRecord, MetricsView, Session, TransitionRequest, WorkItem};

#[derive(Clone)]
pub struct HttpDei {
    base: String,
    client: Client,
}

fn transport(e: reqwest::Error) -> Error {
    Error::Unavailable(e.to_string())
}

fn into_error(kind: &str, message: String) -> Error {
    match kind {
        "validation" => Error::Validation(message),
        "not_found" => Error::NotFound(message),
        "conflict" => Error::Conflict(message),
        "authentication" => Error::Authentication(message),
        "authorization" => Error::Authorization(message),
        "unavailable" => Error::Unavailable(message),
        _ => Error::Corrupt(message),
    }
}

fn decode<T: DeserializeOwned>(r: Response) -> Result<T> {
    let status = r.status();
    let bytes = r.bytes().map_err(transport)?;
    if status.is_success() {
        return serde_json::from_slice(&bytes).map_err(Error::from);
    }
    match serde_json::from_slice::<ErrorBody>(&bytes) {
        Ok(b) => Err(into_error(&b.error, b.message)),
        Err(_) => Err(Error::Unavailable(format!("status {status}"))),
    }
}

#[derive(Deserialize)]
struct TokenReply {
    session: Session,
}

#[derive(Deserialize)]
struct IdReply {
    image_id: String,
}

#[derive(Deserialize)]
struct StateReply {
    state: WorkflowState,
}

#[derive(Deserialize)]
struct RefReply {
    ranking_ref: String,
}

#[derive(Deserialize)]
struct TaskIdReply {
    task_id: u64,
}

#[derive(Deserialize)]
struct Ok_ {}

impl HttpDei {
    pub fn new(base: &str) -> Result<Self> {
        let client = Client::builder().timeout(Duration::from_secs(600)).build().map_err(transport)?;
        Ok(Self {
            base: base.trim_end_matches('/').to_string(),
            client,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/api/v1{path}", self.base)
    }

    fn send<T: DeserializeOwned>(&self, rb: RequestBuilder) -> Result<T> {
        decode(rb.send().map_err(transport)?)
    }

    fn authed(&self, rb: RequestBuilder, token: &str) -> RequestBuilder {
        rb.bearer_auth(token)
    }
}

impl DeiApi for HttpDei {
    fn authenticate(&self, principal: &str, secret: &str, capabilities: &[String]) -> Result<Session> {
        let body = AuthRequest {
            principal: principal.into(),
            secret: secret.into(),
            capabilities: capabilities.to_vec(),
        };
        let r: TokenReply = self.send(self.client.post(self.url("/auth")).json(&body))?;
        Ok(r.session)
    }

    fn workflow(&self, name: &str) -> Result<WorkflowDef> {
        self.send(self.client.get(self.url(&format!("/workflows/{name}"))))
    }

    fn put_image(&self, token: &str, blob: &[u8], species: &str, metadata: &ImageMetadata) -> Result<String> {
        let meta = UploadMetadata {
            species: species.into(),
            metadata: metadata.clone(),
        };
        let form = multipart::Form::new()
            .part("blob", multipart::Part::bytes(blob.to_vec()).file_name("image"))
            .text("metadata", serde_json::to_string(&meta)?);
        let r: IdReply = self.send(self.authed(self.client.post(self.url("/images")), token).multipart(form))?;
        Ok(r.image_id)
    }

    fn get_image(&self, id: &str) -> Result<ImageRecord> {
        self.send(self.client.get(self.url(&format!("/images/{id}"))))
    }

    fn get_blob(&self, id: &str) -> Result<Vec<u8>> {
        let r = self.client.get(self.url(&format!("/images/{id}/blob"))).send().map_err(transport)?;
        if !r.status().is_success() {
            return decode::<Ok_>(r).map(|_| Vec::new());
        }
        Ok(r.bytes().map_err(transport)?.to_vec())
    }

    fn list_images(&self, species: Option<&str>) -> Result<Vec<ImageRecord>> {
        let mut rb = self.client.get(self.url("/images"));
        if let Some(s) = species {
            rb = rb.query(&[("species", s)]);
        }
        self.send(rb)
    }

    fn poll_work(&self, token: &str, max: usize) -> Result<Vec<WorkItem>> {
        self.send(self.authed(self.client.get(self.url("/work")).query(&[("max", max)]), token))
    }

    fn commit_transition(&self, token: &str, req: &TransitionRequest) -> Result<WorkflowState> {
        let r: StateReply = self.send(self.authed(self.client.post(self.url("/transitions")), token).json(req))?;
        Ok(r.state)
    }

    fn put_scores(&self, token: &str, ranking: &RankedList) -> Result<String> {
        let r: RefReply = self.send(self.authed(self.client.put(self.url(&format!("/rankings/{}", ranking.query))), token).json(ranking))?;
        Ok(r.ranking_ref)
    }

    fn rankings(&self, id: &str, k: Option<usize>, base: bool) -> Result<RankedList> {
        let mut rb = self.client.get(self.url(&format!("/rankings/{id}")));
        if let Some(k) = k {
            rb = rb.query(&[("k", k)]);
        }
        if base {
            rb = rb.query(&[("view", "base")]);
        }
        self.send(rb)
    }

    fn weights(&self) -> Result<Option<EnsembleWeights>> {
        self.send(self.client.get(self.url("/weights")))
    }

    fn put_weights(&self, token: &str, weights: &EnsembleWeights) -> Result<()> {
        self.send::<Ok_>(self.authed(self.client.put(self.url("/weights")), token).json(weights)).map(|_| ())
    }

    fn add_gold(&self, token: &str, pair: &PairKey, label: Label) -> Result<()> {
        let b = GoldBody { pair: pair.clone(), label };
        self.send::<Ok_>(self.authed(self.client.post(self.url("/gold")), token).json(&b)).map(|_| ())
    }

    fn create_task(&self, token: &str, pair: &PairKey) -> Result<u64> {
        let b = CreateTaskBody { pair: pair.clone() };
        let r: TaskIdReply = self.send(self.authed(self.client.post(self.url("/tasks")), token).json(&b))?;
        Ok(r.task_id)
    }

    fn get_tasks(&self, token: &str, annotator: &str, max: usize) -> Result<Vec<VerificationTask>> {
        let q = [("annotator", annotator.to_string()), ("max", max.to_string())];
        self.send(self.authed(self.client.get(self.url("/tasks")).query(&q), token))
    }

    fn submit_response(&self, token: &str, task_id: u64, annotator: &str, label: Label) -> Result<SubmitOutcome> {
        let b = ResponseBody {
            annotator: annotator.into(),
            label,
        };
        self.send(self.authed(self.client.post(self.url(&format!("/tasks/{task_id}/response"))), token).json(&b))
    }

    fn skip_task(&self, token: &str, task_id: u64, annotator: &str) -> Result<()> {
        let b = SkipBody { annotator: annotator.into() };
        self.send::<Ok_>(self.authed(self.client.post(self.url(&format!("/tasks/{task_id}/skip"))), token).json(&b)).map(|_| ())
    }

    fn list_tasks(&self) -> Result<Vec<VerificationTask>> {
        self.send(self.client.get(self.url("/tasks")))
    }

    fn cohorts(&self) -> Result<CohortPartition> {
        self.send(self.client.get(self.url("/cohorts")))
    }

    fn put_cohorts(&self, token: &str, partition: &CohortPartition) -> Result<()> {
        self.send::<Ok_>(self.authed(self.client.put(self.url("/cohorts")), token).json(partition)).map(|_| ())
    }

    fn push_metrics(&self, token: &str, row: &IterationMetrics) -> Result<()> {
        self.send::<Ok_>(self.authed(self.client.post(self.url("/metrics")), token).json(row)).map(|_| ())
    }

    fn metrics(&self) -> Result<MetricsView> {
        self.send(self.client.get(self.url("/metrics")))
    }
}
