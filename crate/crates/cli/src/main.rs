use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use sloop_core::experiment::{default_cascade, synthetic_match_params, train_primed_cnn, AnnotatorMode, CnnTraining};
use sloop_core::matchers::cnn::PrimedCnnModel;
use sloop_core::synthpop::{generate_population, write_population, SyntheticSpec};
use sloop_core::workflow::{builtin_workflow, load_workflow_file, WorkflowDef};
use sloop_core::{Error, Result};
use sloop_dei::clock::SystemClock;
use sloop_dei::ipe::{Ipe, IpeConfig};
use sloop_dei::nameservice::{self, Backoff, DeiDescriptor, NameService};
use sloop_dei::pipeline::{self, ExperimentConfig};
use sloop_dei::store::{CAP_ANNOTATE, CAP_COORDINATE, CAP_UPLOAD};
use sloop_dei::{server, Dei, DeiApi, DeiConfig, HttpDei};

#[derive(Parser)]
#[command(name = "sloop", version, about = "Individual-animal identification by image retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Data exchange server.
    Dei {
        #[command(subcommand)]
        command: DeiCommand,
    },
    /// Image-processing worker.
    Ipe {
        #[command(subcommand)]
        command: IpeCommand,
    },
    /// Registry of running DEIs.
    Nameservice {
        #[command(subcommand)]
        command: NameserviceCommand,
    },
    /// Synthetic populations.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
    /// End-to-end indexing and feedback runs.
    Experiment {
        #[command(subcommand)]
        command: ExperimentCommand,
    },
    /// Metrics of a running DEI.
    Metrics {
        #[command(subcommand)]
        command: MetricsCommand,
    },
}

#[derive(Subcommand)]
enum DeiCommand {
    Serve(DeiServe),
}

#[derive(Args)]
struct DeiServe {
    #[arg(long, env = "DEI_LISTEN_ADDR", default_value = "127.0.0.1:8080")]
    listen: String,
    #[arg(long, env = "DEI_DATA_DIR", default_value = "dei-data")]
    data_dir: PathBuf,
    #[arg(long, env = "DEI_NAMESERVICE_URL")]
    nameservice_url: Option<String>,
    #[arg(long, env = "DEI_LEASE_TTL", default_value_t = 300)]
    lease_ttl: u64,
    /// Name announced to the name service.
    #[arg(long, default_value = "dei")]
    name: String,
    /// Extra workflow definitions; the built-in ones are always served.
    #[arg(long = "workflow")]
    workflows: Vec<PathBuf>,
    /// `name:secret:cap,cap,...`; repeatable.
    #[arg(long = "principal")]
    principals: Vec<String>,
    /// Secret of the built-in `operator` principal, which holds every capability.
    #[arg(long, env = "DEI_OPERATOR_SECRET", default_value = "sloop")]
    operator_secret: String,
    #[arg(long)]
    fsync: bool,
}

#[derive(Subcommand)]
enum IpeCommand {
    /// Work on a DEI until stopped, or until idle with --once.
    Run(IpeRun),
    /// Train the primed CNN on a synthetic population and save it.
    Train {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct IpeRun {
    #[arg(long, env = "DEI_URL")]
    dei_url: Option<String>,
    /// Look the DEI up here when --dei-url is absent.
    #[arg(long, env = "DEI_NAMESERVICE_URL")]
    nameservice_url: Option<String>,
    #[arg(long, default_value = "synthetic")]
    workflow: String,
    #[arg(long, default_value = "operator")]
    principal: String,
    #[arg(long, env = "DEI_OPERATOR_SECRET", default_value = "sloop")]
    secret: String,
    /// Primed CNN weights; without them the cascade stops at deformation.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    rho: f64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    once: bool,
}

#[derive(Subcommand)]
enum NameserviceCommand {
    Serve {
        #[arg(long, env = "NAMESERVICE_LISTEN_ADDR", default_value = "127.0.0.1:8070")]
        listen: String,
    },
}

#[derive(Subcommand)]
enum SynthCommand {
    Generate {
        /// TOML synthetic spec; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        individuals: Option<usize>,
        #[arg(long)]
        sightings: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ExperimentCommand {
    Run(ExperimentRun),
}

#[derive(Args)]
struct ExperimentRun {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dei_url: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Fraction of the pool verified per iteration.
    #[arg(long)]
    budget: Option<f64>,
    /// `oracle`, `simulated:ACCURACY:COUNT`, or `live`.
    #[arg(long)]
    annotators: Option<String>,
    /// Dataset written by `synth generate`, used instead of generating one.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum MetricsCommand {
    Report {
        #[arg(long, env = "DEI_URL")]
        dei_url: String,
        #[arg(long, default_value = "csv")]
        format: String,
    },
}

fn parse_annotators(s: &str) -> Result<AnnotatorMode> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["oracle"] => Ok(AnnotatorMode::Oracle),
        ["live"] => Ok(AnnotatorMode::Live),
        ["simulated", acc, n] => Ok(AnnotatorMode::Simulated {
            accuracy: acc.parse().map_err(|_| Error::validation(format!("bad accuracy {acc}")))?,
            annotators: n.parse().map_err(|_| Error::validation(format!("bad annotator count {n}")))?,
        }),
        _ => Err(Error::validation(format!("unknown annotator mode {s}"))),
    }
}

fn parse_principal(s: &str) -> Result<(String, String, Vec<String>)> {
    let mut it = s.splitn(3, ':');
    match (it.next(), it.next(), it.next()) {
        (Some(n), Some(sec), Some(caps)) if !n.is_empty() => Ok((n.into(), sec.into(), caps.split(',').map(str::to_string).collect())),
        _ => Err(Error::validation(format!("principal {s} is not name:secret:caps"))),
    }
}

fn all_capabilities(defs: &[WorkflowDef]) -> Vec<String> {
    let mut caps: Vec<String> = [CAP_UPLOAD, CAP_COORDINATE, CAP_ANNOTATE].iter().map(|c| c.to_string()).collect();
    for d in defs {
        caps.extend(d.edges.iter().map(|e| e.step.clone()));
    }
    caps.sort();
    caps.dedup();
    caps
}

fn dei_serve(a: DeiServe) -> Result<()> {
    let mut defs = vec![builtin_workflow("default")?, builtin_workflow("synthetic")?];
    for p in &a.workflows {
        defs.push(load_workflow_file(p)?);
    }
    let config = DeiConfig {
        data_dir: Some(a.data_dir.clone()),
        lease_ttl: a.lease_ttl,
        fsync: a.fsync,
        ..DeiConfig::default()
    };
    let dei = Arc::new(Dei::open(config, Arc::new(SystemClock))?);
    for d in &defs {
        dei.register_workflow(d.clone())?;
    }
    let caps = all_capabilities(&defs);
    dei.add_principal("operator", &a.operator_secret, &caps.iter().map(String::as_str).collect::<Vec<_>>())?;
    for p in &a.principals {
        let (name, secret, caps) = parse_principal(p)?;
        dei.add_principal(&name, &secret, &caps.iter().map(String::as_str).collect::<Vec<_>>())?;
    }
    let handle = server::spawn(server::router(dei), &a.listen)?;
    log::info!("DEI listening on {}", handle.url());
    if let Some(ns) = a.nameservice_url {
        let d = DeiDescriptor {
            name: a.name.clone(),
            address: handle.url(),
            workflows: defs.iter().map(|d| d.name.clone()).collect(),
        };
        std::thread::spawn(move || {
            match nameservice::register_dei(&ns, &d, Backoff::default()) {
                Ok(_) => log::info!("registered with {ns}"),
                Err(e) => {
                    log::warn!("running unlisted: {e}");
                    return;
                }
            }
            let client = reqwest::blocking::Client::new();
            loop {
                std::thread::sleep(Duration::from_secs(30));
                let url = format!("{}/api/v1/heartbeat/{}", ns.trim_end_matches('/'), d.name);
                if let Err(e) = client.post(&url).send() {
                    log::warn!("heartbeat failed: {e}");
                }
            }
        });
    }
    handle.wait();
    Ok(())
}

fn resolve_dei(dei_url: Option<String>, ns: Option<String>, workflow: &str) -> Result<String> {
    if let Some(u) = dei_url {
        return Ok(u);
    }
    let ns = ns.ok_or_else(|| Error::validation("need --dei-url or --nameservice-url"))?;
    nameservice::list_deis(&ns)?
        .into_iter()
        .find(|r| r.descriptor.workflows.iter().any(|w| w == workflow))
        .map(|r| r.descriptor.address)
        .ok_or_else(|| Error::not_found(format!("no DEI serves {workflow}")))
}

fn ipe_run(a: IpeRun) -> Result<()> {
    let url = resolve_dei(a.dei_url, a.nameservice_url, &a.workflow)?;
    let model: Option<PrimedCnnModel> = match &a.model {
        Some(p) => Some(serde_json::from_slice(&std::fs::read(p)?)?),
        None => None,
    };
    let mut cfg = IpeConfig::new(&a.principal, &a.secret);
    cfg.cascade = Some(default_cascade(a.rho, model.is_some())?);
    cfg.model = model;
    let stop = Arc::new(AtomicBool::new(false));
    let workers: Vec<_> = (0..a.workers.max(1))
        .map(|_| {
            let ipe = Ipe::connect(HttpDei::new(&url)?, cfg.clone())?;
            let stop = stop.clone();
            let once = a.once;
            Ok(std::thread::spawn(move || {
                if once {
                    ipe.run_until_idle()
                } else {
                    ipe.run(&stop, Duration::from_secs(2))
                }
            }))
        })
        .collect::<Result<_>>()?;
    for w in workers {
        let stats = w.join().map_err(|_| Error::Corrupt("worker panicked".into()))??;
        println!("{}", serde_json::to_string(&stats)?);
    }
    Ok(())
}

fn ipe_train(seed: u64, out: &Path) -> Result<()> {
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    };
    let report = train_primed_cnn(&spec, &synthetic_match_params(), &CnnTraining::default())?;
    std::fs::write(out, serde_json::to_vec(&report.model)?)?;
    Ok(())
}

fn synth_generate(config: Option<PathBuf>, seed: Option<u64>, individuals: Option<usize>, sightings: Option<usize>, out: &Path) -> Result<()> {
    let mut spec: SyntheticSpec = match config {
        Some(p) => toml::from_str(&std::fs::read_to_string(&p)?).map_err(|e| Error::validation(format!("{}: {e}", p.display())))?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(n) = individuals {
        spec.n_individuals = n;
    }
    if let Some(n) = sightings {
        spec.sightings_per_individual = n;
    }
    let pop = generate_population(&spec)?;
    write_population(&pop, out)?;
    println!("{} images written to {}", pop.images.len(), out.display());
    Ok(())
}

fn experiment_run(a: ExperimentRun) -> Result<bool> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(n) = a.iterations {
        cfg.feedback.iterations = n;
    }
    if let Some(f) = a.budget {
        cfg.feedback.budget_fraction = f;
    }
    if let Some(m) = &a.annotators {
        cfg.feedback.annotators = parse_annotators(m)?;
    }
    if a.dei_url.is_some() {
        cfg.dei_url = a.dei_url;
    }
    if a.dataset.is_some() {
        cfg.dataset_dir = a.dataset;
    }
    let report = pipeline::run(&cfg)?;
    report.write(&a.out)?;
    for r in &report.rows {
        println!("{}", r.csv_row());
    }
    println!("indexed {}/{} in {:.1}s", report.images_indexed, report.images_total, report.seconds);
    Ok(report.all_indexed())
}

fn metrics_report(url: &str, format: &str) -> Result<()> {
    let m = HttpDei::new(url)?.metrics()?;
    match format {
        "csv" => print!("{}", m.csv()),
        "json" => println!("{}", serde_json::to_string_pretty(&m)?),
        other => return Err(Error::validation(format!("unknown format {other}"))),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Dei {
            command: DeiCommand::Serve(a),
        } => dei_serve(a).map(|_| true),
        Command::Ipe {
            command: IpeCommand::Run(a),
        } => ipe_run(a).map(|_| true),
        Command::Ipe {
            command: IpeCommand::Train { seed, out },
        } => ipe_train(seed, &out).map(|_| true),
        Command::Nameservice {
            command: NameserviceCommand::Serve { listen },
        } => server::spawn(nameservice::router(Arc::new(NameService::new(Arc::new(SystemClock)))), &listen).map(|h| {
            log::info!("name service listening on {}", h.url());
            h.wait();
            true
        }),
        Command::Synth {
            command: SynthCommand::Generate {
                config,
                seed,
                individuals,
                sightings,
                out,
            },
        } => synth_generate(config, seed, individuals, sightings, &out).map(|_| true),
        Command::Experiment {
            command: ExperimentCommand::Run(a),
        } => experiment_run(a),
        Command::Metrics {
            command: MetricsCommand::Report { dei_url, format },
        } => metrics_report(&dei_url, &format).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: not every image reached the indexed state");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
