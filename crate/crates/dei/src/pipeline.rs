//! End-to-end experiment: build or load a population, ingest it into a DEI,
//! index it with an IPE, run relevance-feedback rounds, and finish indexing.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sloop_core::ensemble::CascadeConfig;
use sloop_core::experiment::{
    default_cascade, metrics_csv, synthetic_match_params, train_primed_cnn, CnnTraining, FeedbackConfig, IterationMetrics,
};
use sloop_core::matchers::cnn::PrimedCnnModel;
use sloop_core::metrics::{cmc_curve, QueryRanking};
use sloop_core::synthpop::{generate_population, read_population, Population, SyntheticSpec};
use sloop_core::{Error, Result};

use crate::api::DeiApi;
use crate::coordinator::{Coordinator, CoordinatorConfig};
use crate::ipe::{Ipe, IpeConfig, IpeStats, MACHINE_STEPS};
use crate::store::{Dei, ImageMetadata, CAP_ANNOTATE, CAP_COORDINATE, CAP_UPLOAD};

pub const IPE_PRINCIPAL: &str = "ipe";
pub const COORDINATOR_PRINCIPAL: &str = "coordinator";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Generated when `dataset_dir` is absent.
    pub synthetic: SyntheticSpec,
    pub dataset_dir: Option<PathBuf>,
    pub workflow: String,
    /// Survivor fraction of the deformation stage in the default cascade.
    pub rho: f64,
    pub use_cnn: bool,
    /// Replaces the default cascade when given.
    pub cascade: Option<CascadeConfig>,
    pub cnn: CnnTraining,
    pub feedback: FeedbackConfig,
    /// Attach to a running DEI instead of starting one in-process.
    pub dei_url: Option<String>,
    /// Credentials used against a remote DEI.
    pub principal: String,
    pub secret: String,
    pub view: String,
    /// Seconds to wait for live annotators; absent waits indefinitely.
    pub live_timeout_secs: Option<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synthetic = SyntheticSpec::default();
        Self {
            feedback: FeedbackConfig {
                seed: synthetic.seed,
                ..FeedbackConfig::default()
            },
            synthetic,
            dataset_dir: None,
            workflow: "synthetic".into(),
            rho: 0.2,
            use_cnn: true,
            cascade: None,
            cnn: CnnTraining::default(),
            dei_url: None,
            principal: "operator".into(),
            secret: "sloop".into(),
            view: "dorsal".into(),
            live_timeout_secs: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
    }

    /// One seed drives the population and the feedback rounds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synthetic.seed = seed;
        self.feedback.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.feedback.budget_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::validation(format!("budget fraction {f} outside (0, 1]")));
        }
        self.synthetic.validate()?;
        self.cascade()?.validate()
    }

    pub fn cascade(&self) -> Result<CascadeConfig> {
        match &self.cascade {
            Some(c) => Ok(c.clone()),
            None => default_cascade(self.rho, self.use_cnn),
        }
    }

    fn needs_model(&self) -> Result<bool> {
        Ok(self.cascade()?.methods().contains(&sloop_core::matchers::classical::MethodId::PrimedCnn))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<IterationMetrics>,
    /// `cmc[k-1]` is recall@k of the final rankings.
    pub cmc: Vec<f64>,
    pub images_total: usize,
    pub images_indexed: usize,
    pub ipe: IpeStats,
    pub seconds: f64,
}

impl ExperimentReport {
    pub fn all_indexed(&self) -> bool {
        self.images_total > 0 && self.images_indexed == self.images_total
    }

    pub fn cmc_csv(&self) -> String {
        let mut s = String::from("k,recall\n");
        for (i, r) in self.cmc.iter().enumerate() {
            s.push_str(&format!("{},{r:.6}\n", i + 1));
        }
        s
    }

    /// Writes metrics.csv, cmc.csv and summary.json into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), metrics_csv(&self.rows))?;
        fs::write(dir.join("cmc.csv"), self.cmc_csv())?;
        fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

pub fn load_population(cfg: &ExperimentConfig) -> Result<Population> {
    match &cfg.dataset_dir {
        Some(dir) => read_population(dir),
        None => generate_population(&cfg.synthetic),
    }
}

/// Trains the primed CNN on a population disjoint from `spec`'s.
pub fn train_model(cfg: &ExperimentConfig, spec: &SyntheticSpec) -> Result<Option<PrimedCnnModel>> {
    if !cfg.needs_model()? {
        return Ok(None);
    }
    let t = Instant::now();
    let report = train_primed_cnn(spec, &synthetic_match_params(), &cfg.cnn)?;
    log::info!("primed CNN trained in {:.1}s", t.elapsed().as_secs_f64());
    Ok(Some(report.model))
}

/// Full run against a fresh in-process DEI.
pub fn run_local(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let dei = Arc::new(Dei::in_memory());
    let def = sloop_core::workflow::builtin_workflow(&cfg.workflow)?;
    let human: Vec<String> = def.human_edges().map(|e| e.step.clone()).collect();
    dei.register_workflow(def)?;
    dei.add_principal(IPE_PRINCIPAL, &cfg.secret, &MACHINE_STEPS)?;
    let mut caps = vec![CAP_UPLOAD, CAP_COORDINATE, CAP_ANNOTATE];
    caps.extend(human.iter().map(String::as_str));
    dei.add_principal(COORDINATOR_PRINCIPAL, &cfg.secret, &caps)?;
    run_against(dei, cfg, IPE_PRINCIPAL, COORDINATOR_PRINCIPAL)
}

/// Full run against the DEI at `cfg.dei_url`.
pub fn run_remote(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let url = cfg.dei_url.as_deref().ok_or_else(|| Error::validation("no DEI url"))?;
    let api = crate::client::HttpDei::new(url)?;
    run_against(api, cfg, &cfg.principal, &cfg.principal)
}

pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    match cfg.dei_url {
        Some(_) => run_remote(cfg),
        None => run_local(cfg),
    }
}

fn capabilities(caps: &[&str]) -> Vec<String> {
    caps.iter().map(|c| c.to_string()).collect()
}

pub fn run_against<A: DeiApi + Clone>(api: A, cfg: &ExperimentConfig, ipe_principal: &str, coordinator: &str) -> Result<ExperimentReport> {
    let start = Instant::now();
    let pop = load_population(cfg)?;
    let truth = pop.truth();
    let model = train_model(cfg, &pop.spec)?;

    let mut caps = capabilities(&[CAP_UPLOAD, CAP_COORDINATE, CAP_ANNOTATE]);
    caps.extend(api.workflow(&cfg.workflow)?.human_edges().map(|e| e.step.clone()));
    let session = api.authenticate(coordinator, &cfg.secret, &caps)?;
    let token = session.session_id;
    for im in &pop.images {
        let meta = ImageMetadata {
            image_id: Some(im.id.clone()),
            view: Some(cfg.view.clone()),
            fiducials: im.fiducials.iter().map(|p| [p.x, p.y]).collect(),
            ..ImageMetadata::default()
        };
        api.put_image(&token, &im.pgm(), &cfg.workflow, &meta)?;
    }
    log::info!("uploaded {} images", pop.images.len());

    let mut icfg = IpeConfig::new(ipe_principal, &cfg.secret);
    icfg.cascade = Some(cfg.cascade()?);
    icfg.model = model;
    let ipe = Ipe::connect(api.clone(), icfg)?;
    ipe.run_until_idle()?;
    log::info!("matching done after {:.1}s", start.elapsed().as_secs_f64());

    let mut ccfg = CoordinatorConfig::new(&cfg.workflow, cfg.feedback.clone());
    ccfg.live_timeout = cfg.live_timeout_secs.map(Duration::from_secs);
    let coord = Coordinator::new(&api, token, ccfg, Some(&truth));
    let mut rows = vec![coord.baseline()?];
    for it in 1..=cfg.feedback.iterations {
        let row = coord.iteration(it)?;
        log::info!("iteration {it}: {}", row.csv_row());
        rows.push(row);
    }
    coord.close_verification()?;
    let stats = ipe.run_until_idle()?;

    let images = api.list_images(Some(&cfg.workflow))?;
    let indexed = images.iter().filter(|r| r.state == "indexed").count();
    let rankings = images
        .iter()
        .map(|r| {
            api.rankings(&r.image_id, None, false).map(|l| QueryRanking {
                query: l.query.clone(),
                candidates: l.candidates(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport {
        rows,
        cmc: cmc_curve(&rankings, &truth),
        images_total: images.len(),
        images_indexed: indexed,
        ipe: stats,
        seconds: start.elapsed().as_secs_f64(),
    })
}
