//! `mergesim`: run merging experiments, replay them from cassettes, import
//! human reference data and render analysis reports.

mod config;
mod data;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mergesim_core::agents::{AgentKind, AgentSetup, LlmBackend};
use mergesim_core::llm_client::{
    record_and_replay, CassetteMode, GeminiTransport, LlmClient, MockTransport, OpenAiTransport, RetryPolicy,
    Transport,
};
use mergesim_core::metrics::write_metrics;
use mergesim_core::prompting::TemplateSet;
use mergesim_core::report::{analyze, render_reports};
use mergesim_core::runner::{run_experiment, ExperimentSpec, Provenance, TRIALS_FILE};
use mergesim_core::PromptVariant;
use tracing_subscriber::EnvFilter;

use crate::config::{FileConfig, Overrides, RunConfig, RESOLVED_CONFIG};
use crate::data::METRICS_FILE;

#[derive(Parser, Debug)]
#[command(name = "mergesim", version, about = "Closed-loop two-vehicle merging experiments and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment and write trials.jsonl, manifest.json and run_config.toml.
    Simulate(SimulateArgs),
    /// Compute metrics, regressions and indicator scores for one dataset.
    Analyze(AnalyzeArgs),
    /// Render cross-variant reports from several run directories.
    Ablate(AblateArgs),
    /// Re-run a recorded experiment from its cassette and check the trials match.
    Replay(ReplayArgs),
    /// Normalize a human-trial CSV into a metrics dataset.
    ImportHuman(ImportArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// TOML configuration file (flags override its values).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prompt variant: baseline or a1..a7.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<PromptVariant>,
    /// Repetitions per condition.
    #[arg(long)]
    reps: Option<u32>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Agent for both sides: heuristic, const:<u>, scripted:<file> or llm:<provider>/<model>.
    #[arg(long)]
    agent: Option<String>,
    /// Agent for the left vehicle only.
    #[arg(long)]
    left_agent: Option<String>,
    /// Agent for the right vehicle only.
    #[arg(long)]
    right_agent: Option<String>,
    /// Trials run concurrently.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Directory of prompt template files (defaults to the built-in set).
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Record every LLM completion to this cassette file.
    #[arg(long, conflicts_with = "replay")]
    record: Option<PathBuf>,
    /// Serve LLM completions from this cassette instead of the network.
    #[arg(long)]
    replay: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Run directory, trials.jsonl, metrics.csv or human summary CSV.
    #[arg(long)]
    data: PathBuf,
    /// Optional per-step CSV (trial_id,t,v_left,v_right) for a human summary CSV.
    #[arg(long)]
    steps: Option<PathBuf>,
    /// Report directory; also receives the normalized metrics.csv.
    #[arg(long, default_value = "reports")]
    out: PathBuf,
    /// Row label in the reports (defaults to the variant or file name).
    #[arg(long)]
    label: Option<String>,
    /// Step length used for velocity-derived accelerations (defaults to the run's dt).
    #[arg(long)]
    dt: Option<f64>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Glob patterns selecting run directories or dataset files.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<String>,
    /// Human reference dataset added as an extra row.
    #[arg(long)]
    human: Option<PathBuf>,
    /// Report directory.
    #[arg(long, default_value = "reports")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    /// Recorded run directory (with run_config.toml and trials.jsonl).
    #[arg(long)]
    run: PathBuf,
    /// Cassette file (defaults to <run>/cassette.jsonl).
    #[arg(long)]
    cassette: Option<PathBuf>,
    /// Output directory for the replayed run (defaults to <run>/replay).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ImportArgs {
    /// Summary CSV: trial_id,h,dv,outcome,gap_at_merge,rmse_left,rmse_right,collided.
    #[arg(long)]
    csv: PathBuf,
    /// Per-step CSV: trial_id,t,v_left,v_right.
    #[arg(long)]
    steps: Option<PathBuf>,
    /// Output directory for metrics.csv.
    #[arg(long)]
    out: PathBuf,
    /// Sample interval of the step CSV (s).
    #[arg(long, default_value_t = 0.2)]
    dt: f64,
}

fn parse_variant(s: &str) -> Result<PromptVariant, String> {
    s.parse().map_err(|e: mergesim_core::ConfigError| e.to_string())
}

fn build_transport(provider: &str, plan_len: usize) -> Result<Arc<dyn Transport>, mergesim_core::llm_client::TransportError> {
    Ok(match provider {
        "openai" => Arc::new(OpenAiTransport::from_env()?),
        "gemini" => Arc::new(GeminiTransport::from_env()?),
        "mock" => Arc::new(MockTransport::new(plan_len)),
        other => {
            return Err(mergesim_core::llm_client::TransportError::InvalidRequest(format!(
                "unknown provider {other:?} (expected openai, gemini or mock)"
            )))
        }
    })
}

fn llm_provider(cfg: &RunConfig) -> Result<Option<String>> {
    let providers: Vec<&str> = [&cfg.left_agent, &cfg.right_agent]
        .iter()
        .filter_map(|k| match k {
            AgentKind::Llm { provider, .. } => Some(provider.as_str()),
            _ => None,
        })
        .collect();
    match providers.as_slice() {
        [] => Ok(None),
        [p] => Ok(Some(p.to_string())),
        [a, b] if a == b => Ok(Some(a.to_string())),
        _ => bail!("both LLM agents must use the same provider"),
    }
}

fn execute(cfg: &RunConfig, out: &Path, cassette: Option<(CassetteMode, &Path)>) -> Result<()> {
    let templates = match &cfg.templates {
        Some(dir) => TemplateSet::from_dir(dir)?,
        None => TemplateSet::builtin(),
    };
    let plan_len = cfg.params.derive_counts()?.plan_len;
    let mut setup = AgentSetup {
        left: cfg.left_agent.clone(),
        right: cfg.right_agent.clone(),
        variant: cfg.variant,
        params: cfg.params,
        heuristic: cfg.heuristic,
        llm: None,
    };
    let mut transport_name = None;
    if let Some(provider) = llm_provider(cfg)? {
        let transport = match cassette {
            Some((mode, path)) => record_and_replay(mode, path, || build_transport(&provider, plan_len))?,
            None => build_transport(&provider, plan_len)?,
        };
        transport_name = Some(transport.name());
        let policy = RetryPolicy {
            max_attempts: cfg.llm.max_attempts,
            base_delay: Duration::from_millis(cfg.llm.base_delay_ms),
            max_delay: Duration::from_millis(cfg.llm.max_delay_ms),
        };
        setup.llm = Some(LlmBackend {
            client: Arc::new(LlmClient::new(transport, policy, cfg.llm.max_in_flight)),
            templates: Arc::new(templates.clone()),
            max_output_tokens: cfg.llm.max_output_tokens,
        });
    } else if cassette.is_some() {
        tracing::warn!("no LLM agent configured; cassette ignored");
    }
    let spec = ExperimentSpec {
        conditions: cfg.conditions.clone(),
        repetitions: cfg.repetitions,
        variant: cfg.variant,
        agents: [cfg.left_agent.to_string(), cfg.right_agent.to_string()],
        params: cfg.params,
        track: cfg.track,
        parallelism: cfg.parallelism,
    };
    spec.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(RESOLVED_CONFIG), toml::to_string(&cfg.to_file_config())?)?;
    let provenance = Provenance {
        template_version: templates.version.clone(),
        template_hash: templates.content_hash(),
        transport: transport_name,
    };
    let manifest = run_experiment(&spec, &setup, &provenance, out)?;
    let collisions = manifest
        .trials
        .iter()
        .filter(|t| t.outcome == mergesim_core::Outcome::Collision)
        .count();
    println!(
        "{} trials written to {} ({} collisions, {} aborted)",
        manifest.trial_count,
        out.join(TRIALS_FILE).display(),
        collisions,
        manifest.failures
    );
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let file = match &args.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let cfg = RunConfig::resolve(
        file,
        Overrides {
            variant: args.variant,
            repetitions: args.reps,
            agent: args.agent,
            left_agent: args.left_agent,
            right_agent: args.right_agent,
            parallelism: args.parallelism,
            templates: args.templates,
        },
    )?;
    let cassette = match (&args.record, &args.replay) {
        (Some(p), _) => Some((CassetteMode::Record, p.as_path())),
        (_, Some(p)) => Some((CassetteMode::Replay, p.as_path())),
        _ => None,
    };
    execute(&cfg, &args.out, cassette)
}

fn replay(args: ReplayArgs) -> Result<()> {
    let config_path = args.run.join(RESOLVED_CONFIG);
    if !config_path.exists() {
        bail!("file not found: {}", config_path.display());
    }
    let cfg = RunConfig::resolve(FileConfig::load(&config_path)?, Overrides::default())?;
    let cassette = args.cassette.unwrap_or_else(|| args.run.join("cassette.jsonl"));
    if !cassette.exists() {
        bail!("file not found: {}", cassette.display());
    }
    let out = args.out.unwrap_or_else(|| args.run.join("replay"));
    execute(&cfg, &out, Some((CassetteMode::Replay, &cassette)))?;
    let original = fs::read(args.run.join(TRIALS_FILE)).context("reading recorded trials")?;
    let replayed = fs::read(out.join(TRIALS_FILE))?;
    if original != replayed {
        bail!("replayed trials differ from {}", args.run.join(TRIALS_FILE).display());
    }
    println!("replay identical: {}", out.join(TRIALS_FILE).display());
    Ok(())
}

fn print_quantitative(out: &Path) -> Result<()> {
    print!("{}", fs::read_to_string(out.join("quantitative.txt"))?);
    print!("{}", fs::read_to_string(out.join("indicators.txt"))?);
    Ok(())
}

fn analyze_cmd(args: AnalyzeArgs) -> Result<()> {
    let ds = data::load(&args.data, args.steps.as_deref(), args.dt)?;
    if ds.metrics.is_empty() {
        bail!("dataset {} holds no trials", args.data.display());
    }
    let label = args.label.unwrap_or(ds.label);
    let analysis = analyze(&label, &ds.metrics)?;
    render_reports(&[analysis], &args.out)?;
    write_metrics(&ds.metrics, fs::File::create(args.out.join(METRICS_FILE))?)?;
    print_quantitative(&args.out)?;
    println!("reports written to {}", args.out.display());
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let mut paths = Vec::new();
    for pattern in &args.runs {
        let matches: Vec<PathBuf> = glob::glob(pattern)
            .with_context(|| format!("bad glob {pattern:?}"))?
            .collect::<Result<_, _>>()?;
        if matches.is_empty() {
            bail!("file not found: no match for {pattern:?}");
        }
        paths.extend(matches);
    }
    paths.sort();
    paths.dedup();
    let mut datasets = Vec::new();
    for p in paths {
        if p.is_dir() && !p.join(TRIALS_FILE).exists() && !p.join(METRICS_FILE).exists() {
            tracing::warn!(path = %p.display(), "skipping directory without a dataset");
            continue;
        }
        datasets.push(data::load(&p, None, None)?);
    }
    datasets.sort_by(|a, b| a.order.cmp(&b.order));
    if let Some(h) = &args.human {
        let mut human = data::load(h, None, None)?;
        human.label = "Human".into();
        datasets.push(human);
    }
    if datasets.is_empty() {
        bail!("no datasets found");
    }
    let analyses = datasets
        .iter()
        .map(|d| analyze(&d.label, &d.metrics))
        .collect::<Result<Vec<_>, _>>()?;
    render_reports(&analyses, &args.out)?;
    print_quantitative(&args.out)?;
    println!("reports for {} datasets written to {}", analyses.len(), args.out.display());
    Ok(())
}

fn import(args: ImportArgs) -> Result<()> {
    for p in std::iter::once(&args.csv).chain(args.steps.as_ref()) {
        if !p.exists() {
            bail!("file not found: {}", p.display());
        }
    }
    let steps = args.steps.as_ref().map(fs::File::open).transpose()?;
    let metrics = mergesim_core::metrics::import_human(fs::File::open(&args.csv)?, steps, args.dt)
        .with_context(|| format!("importing {}", args.csv.display()))?;
    fs::create_dir_all(&args.out)?;
    let path = args.out.join(METRICS_FILE);
    write_metrics(&metrics, fs::File::create(&path)?)?;
    if metrics.is_empty() {
        eprintln!("warning: {} holds no trials", args.csv.display());
    }
    println!("{} trials imported to {}", metrics.len(), path.display());
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Replay(a) => replay(a),
        Command::ImportHuman(a) => import(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
