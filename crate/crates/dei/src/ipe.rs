//! Image-processing engine: a worker that leases machine steps from a DEI,
//! runs them, and commits the resulting transitions.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sloop_core::ensemble::{cascade_match, CascadeConfig, EnsembleWeights};
use sloop_core::experiment::default_cascade;
use sloop_core::matchers::classical::{MethodId, PreparedImage};
use sloop_core::matchers::cnn::PrimedCnnModel;
use sloop_core::matchers::features::Point;
use sloop_core::scoring::PoolScorer;
use sloop_core::workflow::{ViewPolicy, WorkflowDef};
use sloop_core::{imageio, Error, Result};

use crate::api::DeiApi;
use crate::store::{ImageRecord, TransitionRequest, WorkItem, MATCH_STEP};

pub const MACHINE_STEPS: [&str; 4] = ["preprocess", "extract_features", MATCH_STEP, "assign_identity"];

#[derive(Clone)]
pub struct IpeConfig {
    pub principal: String,
    pub secret: String,
    pub capabilities: Vec<String>,
    /// Items leased per poll.
    pub batch: usize,
    /// Cascade for the match step; defaults to descriptor, deformation at
    /// 20% survivors, and the primed CNN when a model is present.
    pub cascade: Option<CascadeConfig>,
    pub model: Option<PrimedCnnModel>,
}

impl IpeConfig {
    pub fn new(principal: &str, secret: &str) -> Self {
        Self {
            principal: principal.into(),
            secret: secret.into(),
            capabilities: MACHINE_STEPS.iter().map(|s| s.to_string()).collect(),
            batch: 16,
            cascade: None,
            model: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IpeStats {
    pub completed: BTreeMap<String, usize>,
    /// Items lost to a concurrent commit.
    pub conflicts: usize,
    pub failures: usize,
}

struct SpeciesPool {
    ids: Vec<String>,
    scorer: Arc<PoolScorer>,
}

pub struct Ipe<A: DeiApi> {
    api: A,
    token: Mutex<String>,
    config: IpeConfig,
    cascade: CascadeConfig,
    workflows: Mutex<HashMap<String, WorkflowDef>>,
    prepared: Mutex<HashMap<String, PreparedImage>>,
    pools: Mutex<HashMap<String, SpeciesPool>>,
    stats: Mutex<IpeStats>,
}

fn points(f: &[[f64; 2]]) -> Vec<Point> {
    f.iter().map(|p| Point::new(p[0], p[1])).collect()
}

impl<A: DeiApi> Ipe<A> {
    pub fn connect(api: A, config: IpeConfig) -> Result<Self> {
        let session = api.authenticate(&config.principal, &config.secret, &config.capabilities)?;
        let cascade = match &config.cascade {
            Some(c) => c.clone(),
            None => default_cascade(0.2, config.model.is_some())?,
        };
        if cascade.methods().contains(&MethodId::PrimedCnn) && config.model.is_none() {
            return Err(Error::validation("cascade uses primed_cnn but no model was given"));
        }
        cascade.validate()?;
        Ok(Self {
            api,
            token: Mutex::new(session.session_id),
            config,
            cascade,
            workflows: Mutex::new(HashMap::new()),
            prepared: Mutex::new(HashMap::new()),
            pools: Mutex::new(HashMap::new()),
            stats: Mutex::new(IpeStats::default()),
        })
    }

    pub fn stats(&self) -> IpeStats {
        self.stats.lock().clone()
    }

    fn token(&self) -> String {
        self.token.lock().clone()
    }

    fn reauthenticate(&self) -> Result<()> {
        let s = self.api.authenticate(&self.config.principal, &self.config.secret, &self.config.capabilities)?;
        *self.token.lock() = s.session_id;
        Ok(())
    }

    fn workflow(&self, species: &str) -> Result<WorkflowDef> {
        if let Some(w) = self.workflows.lock().get(species) {
            return Ok(w.clone());
        }
        let w = self.api.workflow(species)?;
        self.workflows.lock().insert(species.to_string(), w.clone());
        Ok(w)
    }

    fn prepare(&self, rec: &ImageRecord) -> Result<PreparedImage> {
        if let Some(p) = self.prepared.lock().get(&rec.image_id) {
            return Ok(p.clone());
        }
        let grid = imageio::decode(&self.api.get_blob(&rec.image_id)?)?;
        let params = self.workflow(&rec.species)?.match_params();
        let p = PreparedImage::new(rec.image_id.clone(), &grid, &points(&rec.fiducials), &params)?;
        self.prepared.lock().insert(rec.image_id.clone(), p.clone());
        Ok(p)
    }

    /// Pool scorer over every featured image of `species`, rebuilt when the
    /// set of featured images changes.
    fn pool(&self, species: &str) -> Result<Arc<PoolScorer>> {
        let mut featured: Vec<ImageRecord> = self
            .api
            .list_images(Some(species))?
            .into_iter()
            .filter(|r| r.feature_set.is_some())
            .collect();
        featured.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let ids: Vec<String> = featured.iter().map(|r| r.image_id.clone()).collect();
        if let Some(p) = self.pools.lock().get(species) {
            if p.ids == ids {
                return Ok(p.scorer.clone());
            }
        }
        let prepared: Vec<PreparedImage> = featured.par_iter().map(|r| self.prepare(r)).collect::<Result<_>>()?;
        let params = self.workflow(species)?.match_params();
        let scorer = Arc::new(PoolScorer::new(prepared, params, self.config.model.clone()));
        self.pools.lock().insert(
            species.to_string(),
            SpeciesPool {
                ids,
                scorer: scorer.clone(),
            },
        );
        Ok(scorer)
    }

    fn weights(&self) -> Result<EnsembleWeights> {
        let methods = self.cascade.methods();
        match self.api.weights()? {
            Some(w) if methods.iter().all(|m| w.get(*m).is_some()) => Ok(w),
            _ => EnsembleWeights::uniform(&methods),
        }
    }

    fn run_item(&self, item: &WorkItem) -> Result<()> {
        let rec = self.api.get_image(&item.image_id)?;
        let def = self.workflow(&rec.species)?;
        let edge = def.edge(&rec.state, &item.step)?.clone();
        let payload = match item.step.as_str() {
            "preprocess" => {
                imageio::decode(&self.api.get_blob(&rec.image_id)?)?;
                json!({ "fiducials": rec.fiducials })
            }
            "extract_features" => {
                let p = self.prepare(&rec)?;
                json!({ "feature_set": {
                    "image_id": rec.image_id,
                    "fiducials": p.features.positions.len(),
                    "descriptors": p.features.usable(),
                }})
            }
            MATCH_STEP => {
                let scorer = self.pool(&rec.species)?;
                let pool: Vec<String> = self
                    .api
                    .list_images(Some(&rec.species))?
                    .into_iter()
                    .filter(|r| r.image_id != rec.image_id && r.feature_set.is_some())
                    .filter(|r| def.view_policy == ViewPolicy::AcrossViews || r.metadata.view == rec.metadata.view)
                    .map(|r| r.image_id)
                    .collect();
                let list = cascade_match(&rec.image_id, &pool, &self.cascade, &self.weights()?, scorer.as_ref())?;
                let r = self.api.put_scores(&self.token(), &list)?;
                json!({ "ranking_ref": r })
            }
            "assign_identity" => {
                let cohorts = self.api.cohorts()?;
                let id = cohorts
                    .membership()
                    .get(&rec.image_id)
                    .cloned()
                    .unwrap_or_else(|| format!("cohort-{}", rec.image_id));
                json!({ "cohort_id": id })
            }
            _ => json!({}),
        };
        self.api.commit_transition(
            &self.token(),
            &TransitionRequest {
                image_id: rec.image_id.clone(),
                from: edge.from,
                to: edge.to,
                step: Some(edge.step),
                payload,
            },
        )?;
        Ok(())
    }

    /// Leases one batch and runs it. Returns the number of items leased.
    pub fn step_once(&self) -> Result<usize> {
        let items = match self.api.poll_work(&self.token(), self.config.batch) {
            Err(Error::Authentication(_)) => {
                self.reauthenticate()?;
                self.api.poll_work(&self.token(), self.config.batch)?
            }
            other => other?,
        };
        let results: Vec<(String, Result<()>)> = items.par_iter().map(|it| (it.step.clone(), self.run_item(it))).collect();
        let mut stats = self.stats.lock();
        for (step, r) in results {
            match r {
                Ok(()) => *stats.completed.entry(step).or_insert(0) += 1,
                Err(Error::Conflict(m)) => {
                    log::info!("{step}: {m}");
                    stats.conflicts += 1;
                }
                Err(e) => {
                    log::warn!("{step} failed: {e}");
                    stats.failures += 1;
                }
            }
        }
        Ok(items.len())
    }

    /// Works until a poll comes back empty.
    pub fn run_until_idle(&self) -> Result<IpeStats> {
        while self.step_once()? > 0 {}
        Ok(self.stats())
    }

    /// Works until `stop` is set, sleeping `idle` between empty polls.
    pub fn run(&self, stop: &AtomicBool, idle: Duration) -> Result<IpeStats> {
        while !stop.load(Ordering::Relaxed) {
            if self.step_once()? == 0 {
                std::thread::sleep(idle);
            }
        }
        Ok(self.stats())
    }
}
