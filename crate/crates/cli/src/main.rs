//! `debias` command-line tool.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors. Logs go to standard error; their verbosity is set
//! by the `DEBIAS_LOG` environment variable (`warn` by default).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use debias_core::estimation::{ParamMode, Strategy};
use debias_core::evaluation;
use debias_core::model::TimeSlot;
use debias_core::pipeline::{self, PipelineError, RunConfig};
use debias_core::synthgen::SceneSpec;
use debias_core::zoning::ZoningMode;

#[derive(Parser)]
#[command(name = "debias", version, about = "Zone-wise bias correction of air-quality maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with known truth.
    Simulate(SimulateArgs),
    /// Fit one model per strategy.
    Fit(DataArgs),
    /// Write corrected maps for given slots.
    Correct(CorrectArgs),
    /// Score the initial map and the corrected maps on the test period.
    Evaluate(DataArgs),
    /// Leave-one-out cross-validation over the reference stations.
    Cv(DataArgs),
    /// Serve the HTTP/JSON API.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ZoningArg {
    Stations,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamModeArg {
    Hourly,
    Global,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    #[value(name = "no_ms")]
    NoMs,
    #[value(name = "ms_as_sta")]
    MsAsSta,
    #[value(name = "pool")]
    Pool,
    #[value(name = "all")]
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Two truth zones, three stations, four sensors.
    TwoZone,
    /// Nine stations and twelve sensors on a coarse hourly grid.
    City,
}

#[derive(Args)]
struct InputArgs {
    /// Directory of a generated scene; fills in the three input paths.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    devices: Option<PathBuf>,
    #[arg(long)]
    measurements: Option<PathBuf>,
    /// Map stack manifest.
    #[arg(long)]
    maps: Option<PathBuf>,
    /// Offset of local time from UTC for timestamps with an explicit zone.
    #[arg(long, default_value_t = debias_core::ingest::DEFAULT_UTC_OFFSET_MINUTES, allow_hyphen_values = true)]
    utc_offset_minutes: i32,
}

#[derive(Args)]
struct DataArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    out: PathBuf,
    /// Strategy to run; repeatable.
    #[arg(long = "strategy", value_enum, default_values_t = [StrategyArg::All])]
    strategies: Vec<StrategyArg>,
    /// Zoning of the pool strategy.
    #[arg(long, value_enum, default_value_t = ZoningArg::Stations)]
    zoning: ZoningArg,
    /// `all`, or a comma-separated list of hours and ranges such as `6,9,15-18`.
    #[arg(long, default_value = "all")]
    hours: String,
    /// Last slot of the learning period, `YYYY-MM-DDTHH`.
    #[arg(long)]
    learn_until: Option<TimeSlot>,
    /// Truncate negative corrected values to zero.
    #[arg(long)]
    clamp: bool,
    #[arg(long, value_enum, default_value_t = ParamModeArg::Hourly)]
    param_mode: ParamModeArg,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene specification (JSON).
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// Built-in scene used when no spec file is given.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Noise standard deviation of the preset scene.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Number of days of the preset scene.
    #[arg(long, default_value_t = 30)]
    days: u32,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorrectArgs {
    #[arg(long)]
    maps: Option<PathBuf>,
    /// Directory of a generated scene; fills in `--maps`.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Fitted model file.
    #[arg(long)]
    model: PathBuf,
    /// Slot to correct, `YYYY-MM-DDTHH`; repeatable.
    #[arg(long = "slot", required = true)]
    slots: Vec<TimeSlot>,
    #[arg(long)]
    clamp: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Directory of a client bundle served at `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

fn parse_hours(text: &str) -> Result<Vec<u8>, PipelineError> {
    if text.trim() == "all" {
        return Ok((0..24).collect());
    }
    let bad = || PipelineError::Config(format!("invalid --hours '{text}'"));
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: u8 = a.trim().parse().map_err(|_| bad())?;
                let b: u8 = b.trim().parse().map_err(|_| bad())?;
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn strategies(args: &[StrategyArg]) -> Vec<Strategy> {
    let mut out: Vec<Strategy> = args
        .iter()
        .flat_map(|a| match a {
            StrategyArg::NoMs => vec![Strategy::NoMs],
            StrategyArg::MsAsSta => vec![Strategy::MsAsSta],
            StrategyArg::Pool => vec![Strategy::Pool],
            StrategyArg::All => Strategy::ALL.to_vec(),
        })
        .collect();
    out.sort();
    out.dedup();
    out
}

fn apply_inputs(cfg: &mut RunConfig, input: &InputArgs) {
    if let Some(dir) = &input.scene {
        *cfg = cfg.clone().with_scene(dir);
    }
    if input.devices.is_some() {
        cfg.devices = input.devices.clone();
    }
    if input.measurements.is_some() {
        cfg.measurements = input.measurements.clone();
    }
    if input.maps.is_some() {
        cfg.maps = input.maps.clone();
    }
    cfg.utc_offset_minutes = input.utc_offset_minutes;
}

fn data_config(command: &str, args: &DataArgs) -> Result<RunConfig, PipelineError> {
    let mut cfg = RunConfig::new(command, &args.out);
    apply_inputs(&mut cfg, &args.input);
    cfg.strategies = strategies(&args.strategies);
    cfg.zoning = match args.zoning {
        ZoningArg::Stations => ZoningMode::StationsOnly,
        ZoningArg::All => ZoningMode::AllDevices,
    };
    cfg.hours = parse_hours(&args.hours)?;
    cfg.learn_until = args.learn_until;
    cfg.clamp = args.clamp;
    cfg.param_mode = match args.param_mode {
        ParamModeArg::Hourly => ParamMode::Hourly,
        ParamModeArg::Global => ParamMode::Global,
    };
    cfg.validate(true)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Simulate(a) => {
            let mut cfg = RunConfig::new("simulate", &a.out);
            cfg.seed = a.seed;
            let spec_path = match (&a.spec, a.preset) {
                (Some(p), _) => p.clone(),
                (None, Some(preset)) => {
                    let seed = a.seed.unwrap_or(1);
                    let spec = match preset {
                        Preset::TwoZone => SceneSpec::two_zone(seed, a.sigma, a.days),
                        Preset::City => SceneSpec::city(seed, a.sigma, a.days),
                    };
                    std::fs::create_dir_all(&a.out).map_err(|source| PipelineError::Io {
                        path: a.out.display().to_string(),
                        source,
                    })?;
                    let p = a.out.join("spec.json");
                    std::fs::write(&p, serde_json_pretty(&spec)).map_err(|source| PipelineError::Io {
                        path: p.display().to_string(),
                        source,
                    })?;
                    p
                }
                (None, None) => {
                    return Err(PipelineError::Config("either --spec or --preset is required".into()))
                }
            };
            pipeline::cmd_simulate(&spec_path, &cfg)?;
            println!("scene written to {}", a.out.display());
        }
        Command::Fit(a) => {
            let cfg = data_config("fit", &a)?;
            let out = pipeline::cmd_fit(&cfg)?;
            print!("{}", out.summary);
            for f in out.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Correct(a) => {
            let mut cfg = RunConfig::new("correct", &a.out);
            cfg.maps = a.maps.or_else(|| a.scene.map(|d| d.join("maps/maps.json")));
            cfg.clamp = a.clamp;
            let out = pipeline::cmd_correct(&cfg, &a.model, &a.slots)?;
            for (f, n) in out.files.iter().zip(out.clamp_counts) {
                println!("wrote {} (clamped cells: {n})", f.display());
            }
        }
        Command::Evaluate(a) => {
            let cfg = data_config("evaluate", &a)?;
            let report = pipeline::cmd_evaluate(&cfg)?;
            print!("{}", pipeline::render_hourly(&report));
        }
        Command::Cv(a) => {
            let cfg = data_config("cv", &a)?;
            let report = pipeline::cmd_cv(&cfg)?;
            print!("{}", evaluation::render_report(&report));
        }
        Command::Serve(a) => {
            let mut cfg = RunConfig::new("serve", ".");
            apply_inputs(&mut cfg, &a.input);
            cfg.validate(true)?;
            let ds = cfg.load_dataset()?;
            let mut state = debias_server::AppState::new(Some(ds));
            if let Some(dir) = a.static_dir {
                state = state.with_static_dir(dir);
            }
            let rt = tokio::runtime::Runtime::new().map_err(|source| PipelineError::Io {
                path: "runtime".into(),
                source,
            })?;
            rt.block_on(debias_server::serve(state, a.port))
                .map_err(|source| PipelineError::Io {
                    path: format!("port {}", a.port),
                    source,
                })?;
        }
    }
    Ok(())
}

fn serde_json_pretty(spec: &SceneSpec) -> String {
    debias_core::synthgen::spec_to_json(spec)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_env("DEBIAS_LOG").unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
