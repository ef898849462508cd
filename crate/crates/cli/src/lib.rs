//! Subcommand implementations behind the `followup` binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use followup_core::metrics::{run_ablation, AblationSetting, MetricsTable};
use followup_core::provider::{ChatProvider, HttpChatProvider, ProviderConfig, ProviderError, ProviderSet};
use followup_core::report::{render_report, write_atomic, ReportFormat};
use followup_core::session::{read_event_log, EngineConfig, Session};
use followup_core::simulator::{generate_dataset, mean_coverage, run_dataset, Dataset, SimError, SimResult, SimStack};
use followup_core::template::{parse_template, Template};
use followup_core::verification::{EntailmentScorer, HttpNliScorer, LexicalScorer};
use followup_service::{AppState, ServiceConfig};
use thiserror::Error;
use tracing::info;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Provider(String),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Provider(_) => 4,
            CliError::Run(_) => 1,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Io(m) => CliError::Io(m),
            SimError::Dataset(m) => CliError::Usage(m),
            SimError::Provider(p) => CliError::Provider(p.to_string()),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<ProviderError> for CliError {
    fn from(e: ProviderError) -> Self {
        CliError::Provider(e.to_string())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "followup", version, about = "Postoperative follow-up interviews, simulations and reports")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service until interrupted.
    Serve(ServeArgs),
    /// Generate a synthetic case dataset.
    GenDataset(GenArgs),
    /// Run every case of a dataset against simulated patients.
    Simulate(SimulateArgs),
    /// Compare the ablation settings over repeated runs.
    Ablate(AblateArgs),
    /// Rebuild a session from its event log.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    #[default]
    Scripted,
    Http,
}

#[derive(Debug, Args)]
pub struct EngineFlags {
    /// Model backend. `http` reads FOLLOWUP_LLM_ENDPOINT / FOLLOWUP_LLM_MODEL
    /// and, if set, FOLLOWUP_NLI_ENDPOINT.
    #[arg(long, value_enum, default_value_t = BackendArg::Scripted)]
    pub backend: BackendArg,
    /// Ask everything in one open conversation instead of field by field.
    #[arg(long)]
    pub disable_field_tracking: bool,
    /// Accept only literally valid extractions.
    #[arg(long)]
    pub disable_nli: bool,
}

impl EngineFlags {
    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            field_tracking: !self.disable_field_tracking,
            verification: !self.disable_nli,
            ..EngineConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "FOLLOWUP_BIND_ADDR", default_value = followup_service::DEFAULT_BIND_ADDR)]
    pub bind: String,
    #[arg(long, env = "FOLLOWUP_DATA_DIR", default_value = "followup-data")]
    pub data_dir: PathBuf,
    /// Require this bearer token on every route except /healthz.
    #[arg(long, env = "FOLLOWUP_API_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    /// Poll this directory for task files.
    #[arg(long)]
    pub watch_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[command(flatten)]
    pub engine: EngineFlags,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Built-in template id or a template file.
    #[arg(long, default_value = "demo-v1")]
    pub template: String,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Output dataset file.
    #[arg(long, default_value = "dataset.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Defaults to the dataset's built-in template.
    #[arg(long)]
    pub template: Option<String>,
    /// Output directory; results go to results.ndjson.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Skip the satisfaction judge.
    #[arg(long)]
    pub no_judge: bool,
    #[command(flatten)]
    pub engine: EngineFlags,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub template: Option<String>,
    /// Output directory; writes ablation.json and ablation.txt.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Comma-separated subset of desc_only, desc_plus_nli, full.
    #[arg(long, value_delimiter = ',', default_value = "desc_only,desc_plus_nli,full")]
    pub settings: Vec<String>,
    #[arg(long, value_enum, default_value_t = BackendArg::Scripted)]
    pub backend: BackendArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReplayOutput {
    /// The rebuilt session as JSON.
    Session,
    /// The structured report, if the session finished.
    Structured,
    HumanReadable,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Event log file (one event per line).
    pub log: PathBuf,
    #[arg(long, value_enum, default_value_t = ReplayOutput::Session)]
    pub format: ReplayOutput,
}

/// A built-in template id or a path to a template file.
pub fn load_template(spec: &str) -> Result<Arc<Template>, CliError> {
    for t in [Template::demo(), Template::demo_mini()] {
        if t.template_id == spec {
            return Ok(Arc::new(t));
        }
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "template \"{spec}\" is neither a built-in id (demo-v1, demo-mini-v1) nor a file"
        )));
    }
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    parse_template(&bytes)
        .map(Arc::new)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn http_provider() -> Result<Arc<dyn ChatProvider>, CliError> {
    Ok(Arc::new(HttpChatProvider::new(ProviderConfig::from_env()?)?))
}

fn sim_stack(backend: BackendArg, judge: bool) -> Result<SimStack, CliError> {
    let mut stack = SimStack {
        judge,
        ..SimStack::scripted()
    };
    if backend == BackendArg::Http {
        let p = http_provider()?;
        stack.question = Some(p.clone());
        stack.report = Some(p);
        if let Some(nli) = HttpNliScorer::from_env() {
            stack.scorer = Arc::new(nli);
        }
    }
    Ok(stack)
}

pub fn gen_dataset(args: &GenArgs) -> Result<Dataset, CliError> {
    if args.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let template = load_template(&args.template)?;
    let ds = generate_dataset(&template, args.n, args.seed)?;
    ds.save(&args.out).map_err(io_err(&args.out))?;
    info!(path = %args.out.display(), cases = ds.cases.len(), "dataset written");
    Ok(ds)
}

fn dataset_and_template(dataset: &Path, template: Option<&str>) -> Result<(Dataset, Arc<Template>), CliError> {
    let ds = Dataset::load(dataset)?;
    let template = load_template(template.unwrap_or(&ds.template_id))?;
    ds.validate(&template)?;
    Ok((ds, template))
}

/// Aggregate simulation summary, one `key: value` line each.
pub fn summary_lines(results: &[SimResult]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "cases: {}", results.len());
    let _ = writeln!(out, "coverage: {:.3}", mean_coverage(results));
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in results {
        for (aspect, v) in r.satisfaction.iter().flatten() {
            let e = sums.entry(aspect).or_default();
            e.0 += f64::from(*v);
            e.1 += 1;
        }
    }
    for (aspect, (sum, n)) in sums {
        let _ = writeln!(out, "satisfaction.{aspect}: {:.2}", sum / n as f64);
    }
    out
}

pub fn simulate(args: &SimulateArgs) -> Result<String, CliError> {
    let (ds, template) = dataset_and_template(&args.dataset, args.template.as_deref())?;
    let stack = sim_stack(args.engine.backend, !args.no_judge)?;
    let results = run_dataset(&ds, &template, &args.engine.engine_config(), &stack, args.seed)?;
    let mut ndjson = Vec::new();
    for r in &results {
        serde_json::to_writer(&mut ndjson, r).expect("result serializes");
        ndjson.push(b'\n');
    }
    let path = args.out.join("results.ndjson");
    write_atomic(&path, &ndjson).map_err(io_err(&path))?;
    Ok(summary_lines(&results))
}

pub fn parse_settings(names: &[String]) -> Result<Vec<AblationSetting>, CliError> {
    if names.is_empty() {
        return Err(CliError::Usage("no settings given".into()));
    }
    names.iter().map(|n| n.trim().parse().map_err(CliError::Usage)).collect()
}

pub fn ablate(args: &AblateArgs) -> Result<MetricsTable, CliError> {
    let settings = parse_settings(&args.settings)?;
    if args.repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    let (ds, template) = dataset_and_template(&args.dataset, args.template.as_deref())?;
    let stack = sim_stack(args.backend, false)?;
    let table = run_ablation(&ds, &template, &settings, args.repeats, args.seed, &stack)?;
    let json = args.out.join("ablation.json");
    write_atomic(&json, &table.to_json()).map_err(io_err(&json))?;
    let txt = args.out.join("ablation.txt");
    write_atomic(&txt, table.render_text().as_bytes()).map_err(io_err(&txt))?;
    Ok(table)
}

pub fn replay(args: &ReplayArgs) -> Result<Vec<u8>, CliError> {
    let events = read_event_log(&args.log)
        .map_err(io_err(&args.log))?
        .map_err(|e| CliError::Run(format!("{}: {e}", args.log.display())))?;
    let session = Session::replay(&events).map_err(|e| CliError::Run(format!("{}: {e}", args.log.display())))?;
    let format = match args.format {
        ReplayOutput::Session => {
            let mut out = serde_json::to_vec_pretty(&session).expect("session serializes");
            out.push(b'\n');
            return Ok(out);
        }
        ReplayOutput::Structured => ReportFormat::Structured,
        ReplayOutput::HumanReadable => ReportFormat::HumanReadable,
    };
    let report = session
        .report
        .as_ref()
        .ok_or_else(|| CliError::Run(format!("session {} has no report yet", session.session_id)))?;
    Ok(render_report(report, format))
}

pub fn serve(args: &ServeArgs) -> Result<(), CliError> {
    let mut config = ServiceConfig::scripted(&args.data_dir);
    config.engine = args.engine.engine_config();
    config.bearer_token = args.token.clone().filter(|t| !t.is_empty());
    config.seed = args.seed;
    if args.engine.backend == BackendArg::Http {
        config.providers = ProviderSet::uniform(http_provider()?);
        config.scorer = match HttpNliScorer::from_env() {
            Some(s) => Arc::new(s) as Arc<dyn EntailmentScorer>,
            None => Arc::new(LexicalScorer),
        };
    }
    let state = AppState::open(config).map_err(io_err(&args.data_dir))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.bind)
            .await
            .map_err(|e| CliError::Io(format!("cannot bind {}: {e}", args.bind)))?;
        if let Some(dir) = &args.watch_dir {
            followup_service::spawn_task_watcher(state.clone(), dir.clone(), Duration::from_secs(2));
        }
        followup_service::serve(listener, state, followup_service::shutdown_signal())
            .await
            .map_err(|e| CliError::Io(e.to_string()))
    })
}

/// Run a parsed command; returns what goes to stdout.
pub fn run(cli: &Cli) -> Result<Vec<u8>, CliError> {
    match &cli.command {
        Command::Serve(a) => serve(a).map(|_| Vec::new()),
        Command::GenDataset(a) => {
            gen_dataset(a).map(|ds| format!("cases: {}\nwrote: {}\n", ds.cases.len(), a.out.display()).into_bytes())
        }
        Command::Simulate(a) => simulate(a).map(String::into_bytes),
        Command::Ablate(a) => ablate(a).map(|t| t.render_text().into_bytes()),
        Command::Replay(a) => replay(a),
    }
}
