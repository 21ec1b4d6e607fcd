use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use bikelane::config::{CheckpointMode, Config, StreetViewKind, DEFAULT_CONFIG};
use bikelane::core::domain::{scenario, scenario_catalog, CandidateDesign, CandidateMeta, CandidateStage, Verdict};
use bikelane::evaluator::{evaluate_pool, EvalSettings};
use bikelane::imaging::{decode_image, encode_png};
use bikelane::ingest::{self, GoogleStreetView, IngestSettings, MockStreetView, QcStore, StreetViewSource};
use bikelane::orchestrator::{Engine, RunOverrides};
use bikelane::providers::ThreadSleeper;
use bikelane::service::{self, AppState};
use bikelane::{report, synth};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bikelane",
    version,
    about = "Bike-lane design pipeline: ingest street views, run design runs, evaluate and report"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace every model provider with its offline mock.
    #[arg(long, global = true)]
    mock: bool,
    /// Runs directory (overrides pipeline.runs_dir).
    #[arg(long, global = true)]
    runs: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fetch street views for a locations manifest and queue them for QC.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated headings in degrees.
        #[arg(long, value_delimiter = ',')]
        headings: Option<Vec<f64>>,
        #[arg(long)]
        size: Option<u32>,
        #[command(flatten)]
        common: Common,
    },
    /// Create a run for a scene and drive it headlessly.
    Run {
        #[arg(long)]
        scene: PathBuf,
        /// Design scenario, 1 to 8.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=8))]
        scenario: u8,
        /// Final candidates per round, 5 to 10.
        #[arg(long, value_parser = clap::value_parser!(u32).range(5..=10))]
        pool_size: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        /// Design request handed to the prompt optimizer.
        #[arg(long)]
        prompt: Option<String>,
        /// Stop at every checkpoint instead of approving it.
        #[arg(long)]
        interactive: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Retry the failed stage of an errored run and continue.
    Resume {
        #[arg(long)]
        run: String,
        #[command(flatten)]
        common: Common,
    },
    /// Rank and judge a directory of candidate PNGs against a scenario.
    Eval {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=8))]
        scenario: u8,
        #[arg(long)]
        candidates: PathBuf,
        /// Final prompt shown to the compliance judge.
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 1)]
        round: u32,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluator accuracy per scenario against gold labels.
    Report {
        #[arg(long)]
        labels: PathBuf,
        /// Machine-readable copy of the report.
        #[arg(long, default_value = "accuracy.json")]
        json: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Write the design-scenario catalog as JSON.
    Scenarios {
        #[arg(long, default_value = "scenarios.json")]
        out: PathBuf,
    },
    /// Write the built-in reference design images (ds1.png .. ds8.png).
    ExportReferences {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        size: u32,
    },
}

fn load_config(common: &Common) -> anyhow::Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => {
            let mut cfg = Config::parse(DEFAULT_CONFIG)?;
            cfg.resolve_paths(&std::env::current_dir()?);
            cfg
        }
    };
    if common.mock {
        cfg = cfg.with_mocks();
    }
    if let Some(runs) = &common.runs {
        cfg.pipeline.runs_dir = runs.clone();
    }
    Ok(cfg)
}

fn street_view_source(cfg: &Config) -> anyhow::Result<Box<dyn StreetViewSource>> {
    Ok(match cfg.ingest.source {
        StreetViewKind::Mock => Box::new(MockStreetView::default()),
        StreetViewKind::Google => {
            let var = &cfg.ingest.credential_ref;
            let key = std::env::var(var).with_context(|| format!("environment variable {var} is not set"))?;
            Box::new(GoogleStreetView::new(
                url::Url::parse(&cfg.ingest.endpoint)?,
                key,
                std::time::Duration::try_from_secs_f64(cfg.ingest.timeout_secs)?,
            )?)
        }
    })
}

fn ingest_settings(cfg: &Config) -> IngestSettings {
    IngestSettings {
        headings: cfg.ingest.headings.clone(),
        pitch: cfg.ingest.pitch,
        fov: cfg.ingest.fov,
        size: cfg.ingest.size,
    }
}

fn print_json(v: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run_summary(engine: &Engine, run: &bikelane::core::PipelineRun) -> serde_json::Value {
    serde_json::json!({
        "run_id": run.run_id(),
        "dir": engine.store().run_dir(run.run_id()),
        "state": run.state,
        "version": run.version,
        "round": run.round,
        "agent_selection": run.agent_selection,
        "final_selection": run.final_selection,
        "last_error": run.last_error,
    })
}

fn candidate_dir(dir: &Path) -> anyhow::Result<Vec<CandidateDesign>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| dir.display().to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no PNG candidates in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| {
            let image = decode_image(&std::fs::read(p)?).with_context(|| p.display().to_string())?;
            Ok(CandidateDesign {
                meta: CandidateMeta {
                    candidate_id: p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                    run_id: "eval".into(),
                    stage: CandidateStage::Final,
                    parent: Some("external".into()),
                    prompt_hash: String::new(),
                    similarity: None,
                    verdict: Verdict::Pending,
                },
                image,
                mask: None,
            })
        })
        .collect()
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest {
            manifest,
            headings,
            size,
            common,
        } => {
            let cfg = load_config(&common)?;
            let mut settings = ingest_settings(&cfg);
            if let Some(h) = headings {
                settings.headings = h;
            }
            if let Some(s) = size {
                settings.size = s;
            }
            let locations = ingest::read_manifest(&manifest)?;
            let source = street_view_source(&cfg)?;
            let summary = ingest::ingest_locations(
                source.as_ref(),
                &locations,
                &settings,
                cfg.default_retry()?,
                &ThreadSleeper,
                &cfg.ingest.scenes_dir,
                &QcStore::new(&cfg.ingest.qc_store),
            );
            print_json(&summary)?;
            if !summary.failed.is_empty() {
                bail!("{} location(s) failed", summary.failed.len());
            }
        }
        Command::Run {
            scene,
            scenario,
            pool_size,
            seed,
            prompt,
            interactive,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            if interactive {
                cfg.pipeline.checkpoint_mode = CheckpointMode::Human;
            }
            let engine = Engine::from_config(cfg)?;
            let scene = ingest::load_scene(&scene)?;
            let overrides = RunOverrides {
                pool_size,
                seed,
                user_prompt: prompt,
            };
            let (run, _) = engine.create_run(&scene, scenario, &overrides)?;
            let run = engine.drive(run.run_id())?;
            print_json(&run_summary(&engine, &run))?;
        }
        Command::Resume { run, common } => {
            let engine = Engine::from_config(load_config(&common)?)?;
            let current = engine.get(&run)?;
            if current.state == bikelane::core::RunState::Errored {
                engine.execute_stage(&run, Some(current.version))?;
            }
            let run = engine.drive(&run)?;
            print_json(&run_summary(&engine, &run))?;
        }
        Command::Eval {
            scenario: id,
            candidates,
            prompt,
            round,
            common,
        } => {
            let cfg = load_config(&common)?;
            let engine = Engine::from_config(cfg)?;
            let scen = scenario(id).context("unknown scenario")?;
            let pool = candidate_dir(&candidates)?;
            let reference = engine.reference_image(&scen)?;
            let p = &engine.config().pipeline;
            let settings = EvalSettings {
                fill: engine.config().mask_fill(),
                top_k: std::num::NonZeroUsize::new(p.top_k).context("top_k is zero")?,
                mode: p.verdict_mode()?,
                max_rounds: p.max_rounds,
            };
            let eval = evaluate_pool(
                engine.providers(),
                engine.templates(),
                &scen,
                &pool,
                &reference,
                &prompt,
                &settings,
                round,
            )?;
            print_json(&eval.report)?;
        }
        Command::Report { labels, json, common } => {
            let cfg = load_config(&common)?;
            let report = report::report_from_paths(&labels, &cfg.pipeline.runs_dir)?;
            print!("{}", report.text);
            std::fs::write(&json, serde_json::to_vec_pretty(&report)?).with_context(|| json.display().to_string())?;
        }
        Command::Serve { bind, common } => {
            let mut cfg = load_config(&common)?;
            cfg.pipeline.checkpoint_mode = CheckpointMode::Human;
            let token = match &cfg.service.token_env {
                Some(var) => {
                    Some(std::env::var(var).with_context(|| format!("environment variable {var} is not set"))?)
                }
                None => None,
            };
            let bind = bind.unwrap_or_else(|| cfg.service.bind.clone());
            let source = street_view_source(&cfg)?;
            let state = Arc::new(AppState {
                qc: QcStore::new(&cfg.ingest.qc_store),
                ingest: ingest_settings(&cfg),
                source,
                token,
                engine: Engine::from_config(cfg)?,
            });
            let rt = tokio::runtime::Runtime::new()?;
            eprintln!("listening on {bind}");
            rt.block_on(service::serve(state, &bind))?;
        }
        Command::Scenarios { out } => {
            let mut bytes = serde_json::to_vec_pretty(&scenario_catalog())?;
            bytes.push(b'\n');
            std::fs::write(&out, bytes).with_context(|| out.display().to_string())?;
        }
        Command::ExportReferences { out, size } => {
            std::fs::create_dir_all(&out)?;
            for s in scenario_catalog() {
                let path = out.join(format!("{}.png", s.reference_image_id));
                std::fs::write(&path, encode_png(&synth::reference_design(&s, size)))
                    .with_context(|| path.display().to_string())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
