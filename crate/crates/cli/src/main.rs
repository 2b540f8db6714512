use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kflow::{port_from_env, serve, AppState, STATE_FILE};
use kflow_core::eval::{simulate_sessions, Scenario};
use kflow_core::pipeline::{build_engine, run_pipeline_until, PipelineConfig, PipelineOutput, Stage, StageState};
use kflow_core::shareflow::{render_scrollytelling, ShareFlow};
use kflow_core::trace::write_trace_log;

#[derive(Parser)]
#[command(name = "kflow", version, about = "Knowledge-workflow mining, recommendation and analysis")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, env = "KFLOW_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Reject malformed trace records instead of skipping them.
    #[arg(long, global = true)]
    strict: bool,
    /// Output directory (overrides the configured one).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Every stage, ending with the report.
    Run,
    /// Parse, validate and normalize traces.
    Ingest,
    /// Code traces into KM sub-processes.
    Code,
    /// Mine expert sessions into per-task main flows.
    Mine,
    /// ShareFlow documents.
    Shareflow {
        #[command(subcommand)]
        command: ShareflowCommand,
    },
    /// Build the epistemic network model.
    Ena,
    /// Per-session evaluation metrics.
    Metrics,
    /// Condition comparisons and survey scoring.
    Stats,
    /// Tables and the HTML summary.
    Report,
    /// Generate a synthetic annotated corpus from a scenario.
    Simulate {
        /// Scenario file (TOML); defaults to the config's inputs.scenario.
        scenario: Option<PathBuf>,
    },
    /// Host the recommendation service (port from KFLOW_PORT).
    Serve,
}

#[derive(Subcommand)]
enum ShareflowCommand {
    /// Render ShareFlow records to scrollytelling HTML; without files, build
    /// them from the configured traces.
    Render { records: Vec<PathBuf> },
}

struct Failure {
    stage: String,
    message: String,
}

impl Failure {
    fn new(stage: impl Into<String>, message: impl Into<String>) -> Self {
        Failure {
            stage: stage.into(),
            message: message.into(),
        }
    }
}

impl From<kflow_core::pipeline::PipelineError> for Failure {
    fn from(e: kflow_core::pipeline::PipelineError) -> Self {
        Failure::new(e.stage.as_str(), e.message)
    }
}

fn load_config(g: &Global) -> Result<PipelineConfig, Failure> {
    let path = g
        .config
        .as_deref()
        .ok_or_else(|| Failure::new("config", "--config is required for this command"))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if g.strict {
        cfg.strict = true;
    }
    if let Some(out) = &g.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run_to(g: &Global, last: Stage) -> Result<(PipelineConfig, PipelineOutput), Failure> {
    let cfg = load_config(g)?;
    let out = run_pipeline_until(&cfg, last)?;
    for s in out.manifest.stages.iter().filter(|s| s.state == StageState::Ok) {
        for w in &s.warnings {
            eprintln!("warning: [{}] {w}", s.stage);
        }
    }
    println!(
        "{} artifacts written to {}",
        out.manifest.artifacts.len(),
        cfg.out_dir.display()
    );
    Ok((cfg, out))
}

fn write(stage: &str, path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Failure::new(stage, format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::new(stage, format!("{}: {e}", path.display())))
}

fn render(g: &Global, records: &[PathBuf]) -> Result<(), Failure> {
    if records.is_empty() {
        run_to(g, Stage::Shareflows)?;
        return Ok(());
    }
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("."));
    for p in records {
        let text =
            std::fs::read_to_string(p).map_err(|e| Failure::new("shareflows", format!("{}: {e}", p.display())))?;
        let sf = ShareFlow::from_record(&text).map_err(|e| Failure::new("shareflows", format!("{}: {e}", p.display())))?;
        let stem = p.file_stem().map_or_else(|| sf.id.clone(), |s| s.to_string_lossy().into_owned());
        let dest = out.join(format!("{stem}.html"));
        write("shareflows", &dest, &render_scrollytelling(&sf))?;
        println!("{}", dest.display());
    }
    Ok(())
}

fn simulate(g: &Global, scenario: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = g.config.as_deref().map(PipelineConfig::load).transpose()?;
    let path = scenario
        .or_else(|| cfg.as_ref().and_then(|c| c.inputs.scenario.clone()))
        .ok_or_else(|| Failure::new("config", "inputs.scenario: no scenario given"))?;
    let seed = g.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(42);
    let out = g
        .out
        .clone()
        .or(cfg.map(|c| c.out_dir))
        .ok_or_else(|| Failure::new("config", "--out is required without --config"))?;
    let text =
        std::fs::read_to_string(&path).map_err(|e| Failure::new("ingest", format!("{}: {e}", path.display())))?;
    let sc = Scenario::from_toml(&text).map_err(|e| Failure::new("ingest", e.to_string()))?;
    let sim = simulate_sessions(&sc, seed).map_err(|e| Failure::new("ingest", e.to_string()))?;
    write("ingest", &out.join("traces.jsonl"), write_trace_log(&sim.corpus).as_bytes())?;
    write("ingest", &out.join("annotations.csv"), sim.annotations.to_csv().as_bytes())?;
    let truth = serde_json::to_string_pretty(&sim.truth).expect("truth serializes");
    write("ingest", &out.join("truth.json"), truth.as_bytes())?;
    println!(
        "{} sessions, {} events written to {}",
        sim.corpus.sessions.len(),
        sim.corpus.event_count(),
        out.display()
    );
    Ok(())
}

fn run_service(g: &Global) -> Result<(), Failure> {
    let port = port_from_env().map_err(|m| Failure::new("serve", m))?;
    let (cfg, out) = run_to(g, Stage::Shareflows)?;
    let engine = build_engine(&cfg, out.shareflows, &out.tasks)?;
    let state =
        AppState::new(engine, Some(cfg.out_dir.join(STATE_FILE))).map_err(|e| Failure::new("serve", e.to_string()))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::new("serve", e.to_string()))?;
    eprintln!("listening on 127.0.0.1:{port}");
    let flushed = rt
        .block_on(serve(state, port, async {
            let _ = tokio::signal::ctrl_c().await;
        }))
        .map_err(|e| Failure::new("serve", e.to_string()))?;
    if let Some(p) = flushed {
        eprintln!("session state written to {}", p.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    let stage = match cli.command {
        Command::Run | Command::Report => Stage::Report,
        Command::Ingest => Stage::Ingest,
        Command::Code => Stage::Code,
        Command::Mine => Stage::Mine,
        Command::Ena => Stage::Ena,
        Command::Metrics => Stage::Metrics,
        Command::Stats => Stage::Stats,
        Command::Shareflow {
            command: ShareflowCommand::Render { records },
        } => return render(g, &records),
        Command::Simulate { scenario } => return simulate(g, scenario),
        Command::Serve => return run_service(g),
    };
    run_to(g, stage).map(|_| ())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: [{}] {}", f.stage, f.message);
            ExitCode::FAILURE
        }
    }
}
