use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use clap::{Args, Parser, Subcommand};
use forge_core::catalog::http::router as catalog_router;
use forge_core::catalog::mock::{MockProvider, Scenario};
use forge_core::pipeline::{run_full_auto, run_stage, ConfigError, PipelineConfig, PipelineError, StageOutcome};
use forge_core::sampler::load_points;
use forge_core::service::{router, run_blocking, AppState};
use forge_core::stage::{Progress, Stage};
use forge_core::store::POINTS_FILE;

#[derive(Parser)]
#[command(name = "forge", version, about = "Build Earth-observation datasets from satellite time series")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// INI config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dataset root directory.
    #[arg(long, global = true, value_name = "DIR")]
    root: Option<String>,
    /// Any config key, e.g. `--set clean.cloud_max=0.2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage, skipping those already done.
    All,
    /// Sample land points and scene footprints.
    Generate(GenerateArgs),
    /// Download the monthly candidates of every scene.
    Download(DownloadArgs),
    /// Normalize downloaded rasters into images.
    Convert(ConvertArgs),
    /// Score candidates and select the best image per month.
    Clean(CleanArgs),
    /// Cut selected images into patches and render previews.
    Extract(ExtractArgs),
    /// Serve the HTTP API and, when configured, the web UI.
    Serve(ServeArgs),
    /// Serve a synthetic catalog over HTTP.
    MockCatalog(MockCatalogArgs),
    /// Print the effective configuration as INI.
    Config,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    lat_min: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    lat_max: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    lon_min: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    lon_max: Option<String>,
    #[arg(long)]
    scene_px: Option<String>,
    #[arg(long)]
    gsd: Option<String>,
    /// Water mask file; the bundled 1° mask is used otherwise.
    #[arg(long)]
    mask: Option<String>,
    /// Also copy the generated points to this CSV file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DownloadArgs {
    /// Import scene centers from a CSV before downloading.
    #[arg(long)]
    points: Option<String>,
    #[arg(long, value_name = "YYYY-MM")]
    from: Option<String>,
    #[arg(long)]
    months: Option<String>,
    /// Comma-separated, e.g. `s1,s2`.
    #[arg(long)]
    satellites: Option<String>,
    #[arg(long)]
    candidates: Option<String>,
    /// `mock` or a catalog base URL.
    #[arg(long)]
    provider: Option<String>,
    /// Dataset root; same as `--root`.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct ConvertArgs {
    /// minmax, std, max or tiff.
    #[arg(long)]
    mode: Option<String>,
    /// image or band.
    #[arg(long)]
    stats_scope: Option<String>,
}

#[derive(Args)]
struct CleanArgs {
    #[arg(long)]
    missing_max: Option<String>,
    #[arg(long)]
    cloud_max: Option<String>,
    /// Leave every decision to the review queue.
    #[arg(long)]
    manual: bool,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    patch: Option<String>,
    #[arg(long)]
    stride: Option<String>,
}

#[derive(Args)]
struct ServeArgs {
    /// Address to listen on; port 0 picks a free one.
    #[arg(long)]
    bind: Option<String>,
    /// Directory with the built web UI.
    #[arg(long)]
    static_dir: Option<String>,
}

#[derive(Args)]
struct MockCatalogArgs {
    #[arg(long, default_value = "127.0.0.1:8081")]
    bind: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON scenario with injected defects.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Scene centers, so scene-specific scenario rules apply.
    #[arg(long)]
    points: Option<PathBuf>,
}

/// Config key overrides from the stage-specific flags.
fn flag_overrides(command: &Command) -> Vec<(&'static str, String)> {
    fn keep(pairs: Vec<(&'static str, Option<&String>)>) -> Vec<(&'static str, String)> {
        pairs.into_iter().filter_map(|(k, v)| v.map(|v| (k, v.clone()))).collect()
    }
    match command {
        Command::Generate(a) => keep(vec![
            ("sampler.n_points", a.n.as_ref()),
            ("sampler.seed", a.seed.as_ref()),
            ("sampler.lat_min", a.lat_min.as_ref()),
            ("sampler.lat_max", a.lat_max.as_ref()),
            ("sampler.lon_min", a.lon_min.as_ref()),
            ("sampler.lon_max", a.lon_max.as_ref()),
            ("sampler.scene_px", a.scene_px.as_ref()),
            ("sampler.gsd", a.gsd.as_ref()),
            ("sampler.mask", a.mask.as_ref()),
        ]),
        Command::Download(a) => keep(vec![
            ("sampler.points", a.points.as_ref()),
            ("download.from", a.from.as_ref()),
            ("download.months", a.months.as_ref()),
            ("download.satellites", a.satellites.as_ref()),
            ("download.candidates", a.candidates.as_ref()),
            ("download.provider", a.provider.as_ref()),
            ("output.root", a.out.as_ref()),
        ]),
        Command::Convert(a) => {
            keep(vec![("convert.mode", a.mode.as_ref()), ("convert.stats_scope", a.stats_scope.as_ref())])
        }
        Command::Clean(a) => {
            let mut out = keep(vec![("clean.missing_max", a.missing_max.as_ref()), ("clean.cloud_max", a.cloud_max.as_ref())]);
            if a.manual {
                out.push(("clean.manual", "true".into()));
            }
            out
        }
        Command::Extract(a) => keep(vec![("extract.patch", a.patch.as_ref()), ("extract.stride", a.stride.as_ref())]),
        Command::Serve(a) => keep(vec![("service.bind", a.bind.as_ref()), ("service.static_dir", a.static_dir.as_ref())]),
        _ => vec![],
    }
}

/// Settings of the last stage command run on a dataset root.
const SAVED_CONFIG: &str = "forge.ini";

fn apply_overrides(cli: &Cli, cfg: &mut PipelineConfig) -> Result<(), ConfigError> {
    if let Some(root) = &cli.common.root {
        cfg.set("output.root", root)?;
    }
    for assignment in &cli.common.set {
        cfg.apply_assignment(assignment)?;
    }
    for (key, value) in flag_overrides(&cli.command) {
        cfg.set(key, &value)?;
    }
    Ok(())
}

/// Defaults (or the root's saved settings when no file is given), then the
/// config file, then `--root`/`--set`, then stage flags.
fn effective_config(cli: &Cli) -> Result<PipelineConfig, ConfigError> {
    let mut cfg = match &cli.common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    apply_overrides(cli, &mut cfg)?;
    let saved = cfg.output_root.join(SAVED_CONFIG);
    if cli.common.config.is_none() && saved.is_file() {
        log::info!("using settings saved in {}", saved.display());
        cfg = PipelineConfig::load(&saved)?;
        apply_overrides(cli, &mut cfg)?;
    }
    Ok(cfg)
}

fn save_config(cfg: &PipelineConfig) {
    let path = cfg.output_root.join(SAVED_CONFIG);
    if cfg.output_root.is_dir() {
        if let Err(e) = std::fs::write(&path, cfg.to_ini()) {
            log::warn!("cannot save settings to {}: {e}", path.display());
        }
    }
}

/// Logs stage progress in 10% steps.
#[derive(Default)]
struct LogProgress {
    counts: Mutex<BTreeMap<Stage, (u64, u64)>>,
}

impl Progress for LogProgress {
    fn set_total(&self, stage: Stage, total: u64) {
        self.counts.lock().unwrap().insert(stage, (0, total));
    }

    fn advance(&self, stage: Stage, n: u64) {
        let mut counts = self.counts.lock().unwrap();
        let (done, total) = counts.entry(stage).or_insert((0, 0));
        let before = *done;
        *done += n;
        if *total > 0 && (before * 10 / *total != *done * 10 / *total || *done == *total) {
            log::info!("{stage}: {done}/{total}");
        }
    }

    fn log(&self, line: &str) {
        log::info!("{line}");
    }
}

enum Failure {
    Config(String),
    Pipeline(PipelineError),
    Other(anyhow::Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Pipeline(e) => e.exit_code() as u8,
            Failure::Other(_) => 3,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::Pipeline(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn report(outcomes: &[StageOutcome]) {
    for o in outcomes {
        if o.ran {
            println!("{}: {}", o.stage, o.summary);
        } else {
            println!("{}: already done", o.stage);
        }
    }
}

fn run_one(cfg: &PipelineConfig, stage: Stage) -> Result<(), Failure> {
    let outcome = run_stage(cfg, stage, &LogProgress::default());
    save_config(cfg);
    report(&[outcome?]);
    Ok(())
}

fn copy_points(cfg: &PipelineConfig, out: &Path) -> anyhow::Result<()> {
    use anyhow::Context;
    std::fs::copy(cfg.output_root.join(POINTS_FILE), out).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn serve_mock_catalog(a: &MockCatalogArgs) -> anyhow::Result<()> {
    use anyhow::Context;
    let scenario = match &a.scenario {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let s: Scenario = serde_json::from_str::<Scenario>(&text).with_context(|| format!("parsing {}", path.display()))?;
            s.validate().map_err(anyhow::Error::msg)?;
            s
        }
        None => Scenario::default(),
    };
    let mut provider = MockProvider::new(a.seed, scenario);
    if let Some(points) = &a.points {
        provider = provider.with_scenes(load_points(points)?);
    }
    run_blocking(catalog_router(Arc::new(provider)), &a.bind, |addr| println!("mock catalog on http://{addr}"))?;
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Command::MockCatalog(a) = &cli.command {
        return Ok(serve_mock_catalog(a)?);
    }
    let cfg = effective_config(cli)?;
    cfg.validate()?;
    match &cli.command {
        Command::All => {
            let outcomes = run_full_auto(&cfg, &LogProgress::default());
            save_config(&cfg);
            report(&outcomes?);
        }
        Command::Generate(a) => {
            run_one(&cfg, Stage::Generate)?;
            if let Some(out) = &a.out {
                copy_points(&cfg, out)?;
            }
        }
        Command::Download(a) => {
            if a.points.is_some() {
                run_one(&cfg, Stage::Generate)?;
            }
            run_one(&cfg, Stage::Download)?;
        }
        Command::Convert(_) => run_one(&cfg, Stage::Convert)?,
        Command::Clean(_) => run_one(&cfg, Stage::Clean)?,
        Command::Extract(_) => run_one(&cfg, Stage::Extract)?,
        Command::Serve(_) => {
            let bind = cfg.bind.clone();
            let app = router(AppState::new(cfg));
            run_blocking(app, &bind, |addr| println!("listening on http://{addr}")).map_err(anyhow::Error::from)?;
        }
        Command::Config => print!("{}", cfg.to_ini()),
        Command::MockCatalog(_) => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(e) => eprintln!("config error: {e}"),
                Failure::Pipeline(e) => eprintln!("error: {e}"),
                Failure::Other(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
