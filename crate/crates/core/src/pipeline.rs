//! Command implementations shared by the command-line tool and the tests.
//!
//! Each command validates its configuration, writes `run_config.json` into
//! the output directory, then writes its artifacts. Artifacts contain no
//! timestamps, so identical inputs give byte-identical outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::Datelike;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::info;

use crate::estimation::{fit, EstimationError, FitConfig, FittedModel, ParamMode, Strategy};
use crate::evaluation::{self, CvReport, EvalError, EvaluationReport};
use crate::ingest::{self, Dataset, IngestError, DEFAULT_UTC_OFFSET_MINUTES};
use crate::mapops::{self, MapError};
use crate::model::TimeSlot;
use crate::synthgen::{self, SceneManifest, SceneSpec, SynthError};
use crate::zoning::ZoningMode;

pub const PROVENANCE_FILE: &str = "run_config.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input file not found: {0}")]
    MissingInput(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Evaluation(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("model {model} has no parameters for hour {hour}")]
    UnknownHour { model: String, hour: u8 },
    #[error("the test period holds no station measurement")]
    EmptyTestPeriod,
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// 2 for usage and configuration problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::MissingInput(_) => 2,
            PipelineError::Synth(SynthError::InvalidSpec(_)) => 2,
            _ => 1,
        }
    }
}

fn eval_err(e: EvalError) -> PipelineError {
    match e {
        EvalError::EmptyTestPeriod => PipelineError::EmptyTestPeriod,
        other => PipelineError::Evaluation(other),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub devices: Option<PathBuf>,
    pub measurements: Option<PathBuf>,
    pub maps: Option<PathBuf>,
    pub out: PathBuf,
    pub strategies: Vec<Strategy>,
    /// Zoning of the pool strategy.
    pub zoning: ZoningMode,
    pub hours: Vec<u8>,
    pub learn_until: Option<TimeSlot>,
    pub clamp: bool,
    pub param_mode: ParamMode,
    pub seed: Option<u64>,
    pub utc_offset_minutes: i32,
}

impl RunConfig {
    pub fn new(command: impl Into<String>, out: impl Into<PathBuf>) -> Self {
        Self {
            command: command.into(),
            devices: None,
            measurements: None,
            maps: None,
            out: out.into(),
            strategies: Strategy::ALL.to_vec(),
            zoning: ZoningMode::StationsOnly,
            hours: (0..24).collect(),
            learn_until: None,
            clamp: false,
            param_mode: ParamMode::Hourly,
            seed: None,
            utc_offset_minutes: DEFAULT_UTC_OFFSET_MINUTES,
        }
    }

    /// Same configuration reading the files of a generated scene.
    pub fn with_scene(mut self, dir: &Path) -> Self {
        self.devices = Some(dir.join("devices.csv"));
        self.measurements = Some(dir.join("measurements.csv"));
        self.maps = Some(dir.join("maps/maps.json"));
        self
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            param_mode: self.param_mode,
            hours: self.hours.clone(),
            pool_zoning: self.zoning,
        }
    }

    fn input(&self, name: &str, p: &Option<PathBuf>) -> Result<PathBuf, PipelineError> {
        let p = p
            .as_ref()
            .ok_or_else(|| PipelineError::Config(format!("--{name} is required")))?;
        if !p.is_file() {
            return Err(PipelineError::MissingInput(p.display().to_string()));
        }
        Ok(p.clone())
    }

    /// Checks everything that can be checked before touching the data.
    pub fn validate(&self, needs_data: bool) -> Result<(), PipelineError> {
        if self.strategies.is_empty() {
            return Err(PipelineError::Config("no strategy selected".into()));
        }
        if self.hours.is_empty() {
            return Err(PipelineError::Config("no hour selected".into()));
        }
        if let Some(h) = self.hours.iter().find(|h| **h > 23) {
            return Err(PipelineError::Config(format!("hour {h} is not in 0..=23")));
        }
        if needs_data {
            self.input("devices", &self.devices)?;
            self.input("measurements", &self.measurements)?;
            self.input("maps", &self.maps)?;
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset, PipelineError> {
        let devices = self.input("devices", &self.devices)?;
        let measurements = self.input("measurements", &self.measurements)?;
        let maps = self.input("maps", &self.maps)?;
        let ds = Dataset::load(&devices, &measurements, &maps, self.utc_offset_minutes)?;
        for o in &ds.omitted {
            info!(device = %o.id, reason = %o.reason, "device omitted");
        }
        Ok(ds)
    }

    fn write_provenance(&self) -> Result<(), PipelineError> {
        create_dir(&self.out)?;
        write_text(
            &self.out.join(PROVENANCE_FILE),
            &serde_json::to_string_pretty(self).expect("config serializes"),
        )
    }
}

fn create_dir(p: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(p).map_err(|source| PipelineError::Io {
        path: p.display().to_string(),
        source,
    })
}

fn write_text(p: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(p, text).map_err(|source| PipelineError::Io {
        path: p.display().to_string(),
        source,
    })
}

/// Learning cut-off: the configured one, or the last slot of the first
/// calendar month of the data.
pub fn resolve_learn_until(config: &RunConfig, ds: &Dataset) -> Result<TimeSlot, PipelineError> {
    if let Some(t) = config.learn_until {
        return Ok(t);
    }
    let (first, last) = ds.slot_range().ok_or(IngestError::EmptyDataset)?;
    let d = first.date();
    let next_month = if d.month() == 12 {
        chrono::NaiveDate::from_ymd_opt(d.year() + 1, 1, 1)
    } else {
        chrono::NaiveDate::from_ymd_opt(d.year(), d.month() + 1, 1)
    }
    .expect("valid date");
    let end = TimeSlot::new(next_month, 0).expect("hour 0").add_hours(-1);
    Ok(end.min(last))
}

/// Generates a scene from a spec file into `config.out`.
pub fn cmd_simulate(spec_path: &Path, config: &RunConfig) -> Result<SceneManifest, PipelineError> {
    if !spec_path.is_file() {
        return Err(PipelineError::MissingInput(spec_path.display().to_string()));
    }
    let text = fs::read_to_string(spec_path).map_err(|source| PipelineError::Io {
        path: spec_path.display().to_string(),
        source,
    })?;
    let mut spec: SceneSpec = serde_json::from_str(&text)
        .map_err(|e| SynthError::InvalidSpec(format!("{}: {e}", spec_path.display())))?;
    if let Some(seed) = config.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    config.write_provenance()?;
    let scene = synthgen::generate_scene(&spec)?;
    info!(devices = scene.devices.len(), slots = scene.truth.slots.len(), "scene generated");
    Ok(synthgen::write_scene(&scene, &config.out)?)
}

/// Human-readable summary of a fit.
pub fn degeneracy_summary(model: &FittedModel) -> String {
    let mut out = format!(
        "{}: {} zones, {} zone-hour estimates, {} degenerate",
        model.strategy,
        model.zoning.len(),
        model.zones.len(),
        model.degenerate_zone_count()
    );
    for (flag, n) in model.flag_summary() {
        let _ = write!(out, "; {}={n}", serde_json::to_value(flag).expect("flag").as_str().unwrap_or("?"));
    }
    for o in &model.omitted {
        let _ = write!(out, "; omitted {} ({})", o.id, o.reason);
    }
    out
}

pub fn model_file(out: &Path, strategy: Strategy) -> PathBuf {
    out.join(format!("model_{}.json", strategy.token()))
}

fn fit_models(config: &RunConfig, learn: &Dataset) -> Result<Vec<FittedModel>, PipelineError> {
    let obs = ingest::build_observations(learn);
    info!(
        rows = obs.rows.len(),
        missing_values = obs.missing_values,
        missing_map = obs.missing_map,
        "observations built"
    );
    let devices = learn.usable_devices();
    let fc = config.fit_config();
    let mut strategies = config.strategies.clone();
    strategies.sort();
    strategies.dedup();
    strategies
        .iter()
        .map(|s| Ok(fit(*s, &obs.rows, &devices, &fc)?))
        .collect()
}

pub struct FitOutput {
    pub models: Vec<FittedModel>,
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// Fits every selected strategy on the learning period (all data when no
/// cut-off is configured) and writes one model file per strategy.
pub fn cmd_fit(config: &RunConfig) -> Result<FitOutput, PipelineError> {
    config.validate(true)?;
    config.write_provenance()?;
    let ds = config.load_dataset()?;
    let learn = match config.learn_until {
        Some(t) => ingest::split_periods(&ds, t)?.learn,
        None => ds,
    };
    let models = fit_models(config, &learn)?;
    let mut files = Vec::new();
    let mut summary = String::new();
    for m in &models {
        let path = model_file(&config.out, m.strategy);
        write_text(&path, &m.to_json())?;
        files.push(path);
        summary.push_str(&degeneracy_summary(m));
        summary.push('\n');
    }
    Ok(FitOutput {
        models,
        files,
        summary,
    })
}

pub struct CorrectOutput {
    pub files: Vec<PathBuf>,
    /// Clamp events per output file.
    pub clamp_counts: Vec<usize>,
}

/// Corrects the initial map of every slot with a fitted model.
pub fn cmd_correct(
    config: &RunConfig,
    model_path: &Path,
    slots: &[TimeSlot],
) -> Result<CorrectOutput, PipelineError> {
    if slots.is_empty() {
        return Err(PipelineError::Config("at least one --slot is required".into()));
    }
    let maps = config.input("maps", &config.maps)?;
    if !model_path.is_file() {
        return Err(PipelineError::MissingInput(model_path.display().to_string()));
    }
    let text = fs::read_to_string(model_path).map_err(|source| PipelineError::Io {
        path: model_path.display().to_string(),
        source,
    })?;
    let model = FittedModel::from_json(&text)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", model_path.display())))?;
    for s in slots {
        if !model.covers_hour(s.hour()) {
            return Err(PipelineError::UnknownHour {
                model: model_path.display().to_string(),
                hour: s.hour(),
            });
        }
    }
    config.write_provenance()?;
    let stack = ingest::load_map_stack(&maps)?;
    let mut out = CorrectOutput {
        files: Vec::new(),
        clamp_counts: Vec::new(),
    };
    for s in slots {
        let initial = mapops::combine_initial(&stack, s)?;
        let corrected = mapops::correct_map(&initial, &model, s.hour(), config.clamp);
        let path = config
            .out
            .join(format!("corrected_{}_{}.asc", model.strategy.token(), s.compact()));
        mapops::write_grid(&corrected.grid, &path)?;
        out.files.push(path);
        out.clamp_counts.push(corrected.total_clamped());
    }
    Ok(out)
}

/// Per-hour table of pooled station RMSE.
pub fn render_hourly(report: &EvaluationReport) -> String {
    let mut out = String::from("| hour |");
    for m in &report.methods {
        let _ = write!(out, " {} |", m.method);
    }
    out.push_str("\n|---|");
    for _ in &report.methods {
        out.push_str("---|");
    }
    out.push('\n');
    for (i, h) in report.hours.iter().enumerate() {
        let _ = write!(out, "| {h} |");
        for m in &report.methods {
            match m.by_hour[i] {
                Some(v) => {
                    let _ = write!(out, " {v:.3} |");
                }
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

/// Fits on the learning period and scores the test period.
pub fn cmd_evaluate(config: &RunConfig) -> Result<EvaluationReport, PipelineError> {
    config.validate(true)?;
    config.write_provenance()?;
    let ds = config.load_dataset()?;
    let cut = resolve_learn_until(config, &ds)?;
    let split = ingest::split_periods(&ds, cut)?;
    if split.test.measurements.iter().all(|m| m.value.is_none()) {
        return Err(PipelineError::EmptyTestPeriod);
    }
    let models = fit_models(config, &split.learn)?;
    let report = evaluation::evaluate(&split.test, &models, &config.hours, config.clamp).map_err(eval_err)?;
    write_text(&config.out.join("evaluation.json"), &report.to_json())?;
    write_text(&config.out.join("evaluation.md"), &render_hourly(&report))?;
    Ok(report)
}

/// Leave-one-out cross-validation over the stations.
pub fn cmd_cv(config: &RunConfig) -> Result<CvReport, PipelineError> {
    config.validate(true)?;
    config.write_provenance()?;
    let ds = config.load_dataset()?;
    let cut = resolve_learn_until(config, &ds)?;
    let report = evaluation::loocv(&ds, &config.strategies, &config.fit_config(), cut, config.clamp)
        .map_err(eval_err)?;
    write_text(&config.out.join("cv.json"), &report.to_json())?;
    write_text(&config.out.join("cv.md"), &evaluation::render_report(&report))?;
    Ok(report)
}

/// Every file below `dir` with its bytes, keyed by relative path.
pub fn snapshot_dir(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let Ok(entries) = fs::read_dir(dir) else { return };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if let Ok(bytes) = fs::read(&p) {
                out.insert(p.strip_prefix(root).unwrap_or(&p).to_path_buf(), bytes);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
