//! Synthetic scenes with known truth.
//!
//! A scene draws a smooth positive concentration field, biases it zone by
//! zone into the initial map, splits the initial map into a static fine map
//! and an hourly map whose mean reproduces it, and simulates station and
//! sensor readings with Gaussian noise. Everything is driven by one seed.
//!
//! Truth zones are unions of stations-only Voronoi cells, so the zonings used
//! for fitting refine them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{self, CoarseEntry, MapManifest};
use crate::mapops::{self, GridMap, MapError, MapStack};
use crate::model::{
    self, Device, Measurement, Point, SensorCalibration, TimeSlot, ZoneParameters,
};
use crate::zoning::Zoning;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Map(#[from] MapError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("normal matrix is singular")]
    SingularNormalMatrix,
    #[error("matrix has {0} rows but response has {1}")]
    ShapeMismatch(usize, usize),
}

/// Least squares through the normal equations `A^T A theta = A^T b`, solved
/// by Gaussian elimination with partial pivoting. Independent of the SVD
/// route used by the estimator; meant for cross-checks only.
pub fn oracle_ls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, OracleError> {
    let (n, p) = a.shape();
    if n != b.len() {
        return Err(OracleError::ShapeMismatch(n, b.len()));
    }
    // augmented [A^T A | A^T b]
    let mut m = vec![vec![0.0f64; p + 1]; p];
    for i in 0..p {
        for j in 0..p {
            let mut s = 0.0;
            for r in 0..n {
                s += a[(r, i)] * a[(r, j)];
            }
            m[i][j] = s;
        }
        let mut s = 0.0;
        for r in 0..n {
            s += a[(r, i)] * b[r];
        }
        m[i][p] = s;
    }
    let scale = (0..p).map(|i| m[i][i].abs()).fold(0.0f64, f64::max);
    if scale == 0.0 {
        return Err(OracleError::SingularNormalMatrix);
    }
    for col in 0..p {
        let pivot = (col..p)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .expect("non-empty range");
        if m[pivot][col].abs() <= 1e-12 * scale {
            return Err(OracleError::SingularNormalMatrix);
        }
        m.swap(col, pivot);
        for r in col + 1..p {
            let f = m[r][col] / m[col][col];
            if f != 0.0 {
                for c in col..=p {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let mut s = m[i][p];
        for j in i + 1..p {
            s -= m[i][j] * x[j];
        }
        x[i] = s / m[i][i];
    }
    Ok(DVector::from_vec(x))
}

/// Source of standard-normal draws.
pub trait NoiseModel {
    fn standard(&mut self) -> f64;
}

/// Box-Muller transform over a ChaCha8 stream: two uniforms in `(0, 1]`
/// give `sqrt(-2 ln u1) cos(2 pi u2)`. The sine branch is discarded so every
/// draw consumes exactly two uniforms.
pub struct GaussianNoise {
    rng: ChaCha8Rng,
}

impl GaussianNoise {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }
}

impl NoiseModel for GaussianNoise {
    fn standard(&mut self) -> f64 {
        let u1 = 1.0 - self.rng.gen::<f64>();
        let u2 = self.rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub ncols: usize,
    pub nrows: usize,
    pub xllcorner: f64,
    pub yllcorner: f64,
    pub cellsize: f64,
}

impl GridSpec {
    fn grid(&self, values: Vec<f64>) -> Result<GridMap, MapError> {
        GridMap::new(self.ncols, self.nrows, self.xllcorner, self.yllcorner, self.cellsize, -9999.0, values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoarseMode {
    /// The hourly map shares the fine geometry and the mean of both maps is
    /// the biased truth exactly.
    #[default]
    Aligned,
    /// The hourly map lives on a coarser grid; the truth is derived from the
    /// initial map by inverting the bias.
    Coarse { cellsize: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationSpec {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhiteNoise {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Readings ignore the concentration altogether.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub white_noise: Option<WhiteNoise>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HourParams {
    #[serde(rename = "C")]
    pub c: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueZone {
    /// Stations whose Voronoi cells form the zone.
    pub stations: Vec<String>,
    #[serde(rename = "C")]
    pub c: f64,
    pub rho: f64,
    /// Noise standard deviation of devices in the zone.
    pub sigma: f64,
    /// Optional per-hour override, 24 entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hourly: Option<Vec<HourParams>>,
}

impl TrueZone {
    pub fn params_at(&self, hour: u8) -> ZoneParameters {
        match &self.hourly {
            Some(h) => ZoneParameters::new(h[hour as usize].c, h[hour as usize].rho),
            None => ZoneParameters::new(self.c, self.rho),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub base: f64,
    pub bumps: usize,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            base: 10.0,
            bumps: 6,
            amplitude_min: 20.0,
            amplitude_max: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub grid: GridSpec,
    #[serde(default)]
    pub coarse: CoarseMode,
    pub start_date: NaiveDate,
    pub days: u32,
    pub stations: Vec<StationSpec>,
    pub sensors: Vec<SensorSpec>,
    pub zones: Vec<TrueZone>,
    #[serde(default)]
    pub field: FieldSpec,
    /// Probability that a measurement is missing.
    #[serde(default)]
    pub missing_rate: f64,
}

impl SceneSpec {
    pub fn devices(&self) -> Vec<Device> {
        self.stations
            .iter()
            .map(|s| Device::station(s.id.clone(), s.x, s.y))
            .chain(self.sensors.iter().map(|s| Device::sensor(s.id.clone(), s.x, s.y)))
            .collect()
    }

    pub fn slots(&self) -> Vec<TimeSlot> {
        let mut out = Vec::with_capacity(self.days as usize * 24);
        for d in 0..self.days {
            let date = self.start_date + chrono::Duration::days(d as i64);
            for h in 0..24 {
                out.push(TimeSlot::new(date, h).expect("hour < 24"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.stations.is_empty() {
            return bad("at least one station is required".into());
        }
        if self.days == 0 {
            return bad("days must be positive".into());
        }
        if !(self.grid.cellsize > 0.0) || self.grid.ncols == 0 || self.grid.nrows == 0 {
            return bad("invalid grid".into());
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing_rate must lie in [0, 1)".into());
        }
        let mut ids = BTreeSet::new();
        for d in self.devices() {
            if !ids.insert(d.id.clone()) {
                return bad(format!("duplicate device id {}", d.id));
            }
        }
        let station_ids: BTreeSet<&str> = self.stations.iter().map(|s| s.id.as_str()).collect();
        let mut covered = BTreeSet::new();
        for z in &self.zones {
            if !(z.sigma >= 0.0) {
                return bad("sigma must be non-negative".into());
            }
            if let Some(h) = &z.hourly {
                if h.len() != 24 {
                    return bad("hourly parameters need 24 entries".into());
                }
            }
            let rhos: Vec<f64> = match &z.hourly {
                Some(h) => h.iter().map(|p| p.rho).collect(),
                None => vec![z.rho],
            };
            if rhos.iter().any(|r| *r <= -1.0 + model::EPSILON_DEN) {
                return bad("rho must exceed -1".into());
            }
            for s in &z.stations {
                if !station_ids.contains(s.as_str()) {
                    return bad(format!("zone references unknown station {s}"));
                }
                if !covered.insert(s.clone()) {
                    return bad(format!("station {s} belongs to two zones"));
                }
            }
        }
        if covered.len() != station_ids.len() {
            return bad("every station must belong to exactly one zone".into());
        }
        if let CoarseMode::Coarse { cellsize } = self.coarse {
            if !(cellsize > 0.0) {
                return bad("coarse cellsize must be positive".into());
            }
        }
        Zoning::stations_only(&self.devices()).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        Ok(())
    }

    /// Two truth zones, three stations, four sensors, all on the line
    /// `y = 500` so that every Voronoi zoning refines the truth zones.
    pub fn two_zone(seed: u64, sigma: f64, days: u32) -> Self {
        let st = |id: &str, x: f64| StationSpec { id: id.into(), x, y: 500.0 };
        let se = |id: &str, x: f64, alpha: f64, beta: f64| SensorSpec {
            id: id.into(),
            x,
            y: 500.0,
            alpha,
            beta,
            white_noise: None,
        };
        SceneSpec {
            seed,
            grid: GridSpec {
                ncols: 40,
                nrows: 20,
                xllcorner: 0.0,
                yllcorner: 0.0,
                cellsize: 50.0,
            },
            coarse: CoarseMode::Aligned,
            start_date: NaiveDate::from_ymd_opt(2017, 1, 1).expect("valid date"),
            days,
            stations: vec![st("S1", 290.0), st("S2", 700.0), st("S3", 1300.0)],
            sensors: vec![
                se("M1", 550.0, 1.8, 4.0),
                se("M2", 900.0, 0.7, -2.0),
                se("M3", 1100.0, 1.2, 6.0),
                se("M4", 1600.0, 2.5, -3.0),
            ],
            zones: vec![
                TrueZone {
                    stations: vec!["S1".into(), "S2".into()],
                    c: 10.0,
                    rho: 0.5,
                    sigma,
                    hourly: None,
                },
                TrueZone {
                    stations: vec!["S3".into()],
                    c: -5.0,
                    rho: -0.2,
                    sigma,
                    hourly: None,
                },
            ],
            field: FieldSpec::default(),
            missing_rate: 0.0,
        }
    }

    /// Network shaped like a mid-size city deployment: 9 stations and 12
    /// sensors scattered over a 12 km x 10 km domain.
    pub fn city(seed: u64, sigma: f64, days: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut place = |prefix: &str, n: usize| -> Vec<(String, f64, f64)> {
            (0..n)
                .map(|i| {
                    (
                        format!("{prefix}{:02}", i + 1),
                        500.0 + rng.gen_range(0.0..11_000.0),
                        500.0 + rng.gen_range(0.0..9_000.0),
                    )
                })
                .collect()
        };
        let stations: Vec<StationSpec> = place("STA", 9)
            .into_iter()
            .map(|(id, x, y)| StationSpec { id, x, y })
            .collect();
        let sensors: Vec<SensorSpec> = place("MS", 12)
            .into_iter()
            .enumerate()
            .map(|(i, (id, x, y))| SensorSpec {
                id,
                x,
                y,
                alpha: 0.6 + 0.1 * i as f64,
                beta: -4.0 + i as f64,
                white_noise: None,
            })
            .collect();
        let zones = stations
            .iter()
            .enumerate()
            .map(|(i, s)| TrueZone {
                stations: vec![s.id.clone()],
                c: -6.0 + 2.0 * i as f64,
                rho: -0.3 + 0.1 * i as f64,
                sigma,
                hourly: None,
            })
            .collect();
        SceneSpec {
            seed,
            grid: GridSpec {
                ncols: 60,
                nrows: 50,
                xllcorner: 0.0,
                yllcorner: 0.0,
                cellsize: 200.0,
            },
            coarse: CoarseMode::Coarse { cellsize: 3000.0 },
            start_date: NaiveDate::from_ymd_opt(2017, 1, 5).expect("valid date"),
            days,
            stations,
            sensors,
            zones,
            field: FieldSpec::default(),
            missing_rate: 0.0,
        }
    }
}

/// Pretty JSON form of a spec, as read back by the scene generator.
pub fn spec_to_json(spec: &SceneSpec) -> String {
    serde_json::to_string_pretty(spec).expect("spec serializes")
}

/// True concentration on the fine grid, one field per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub grid: GridSpec,
    pub slots: Vec<TimeSlot>,
    pub fields: Vec<Vec<f64>>,
}

impl Truth {
    pub fn field(&self, slot: &TimeSlot) -> Option<GridMap> {
        let i = self.slots.binary_search(slot).ok()?;
        self.grid.grid(self.fields[i].clone()).ok()
    }

    pub fn value_at(&self, slot: &TimeSlot, p: Point) -> Option<f64> {
        let i = self.slots.binary_search(slot).ok()?;
        let probe = GridMap::filled(self.grid.ncols, self.grid.nrows, self.grid.xllcorner, self.grid.yllcorner, self.grid.cellsize, 0.0);
        let (r, c) = probe.cell_of(p).ok()?;
        Some(self.fields[i][r * self.grid.ncols + c])
    }
}

/// Scene generated in memory.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub devices: Vec<Device>,
    pub measurements: Vec<Measurement>,
    pub stack: MapStack,
    pub truth: Truth,
    /// Truth-zone index of every device.
    pub device_zone: BTreeMap<String, usize>,
}

impl Scene {
    pub fn true_zone_params(&self, device: &str, hour: u8) -> Option<ZoneParameters> {
        let z = *self.device_zone.get(device)?;
        Some(self.spec.zones[z].params_at(hour))
    }

    pub fn true_calibration(&self, sensor: &str) -> Option<SensorCalibration> {
        self.spec
            .sensors
            .iter()
            .find(|s| s.id == sensor)
            .map(|s| SensorCalibration::new(s.alpha, s.beta))
    }
}

struct Bump {
    cx: f64,
    cy: f64,
    radius: f64,
    amplitude: f64,
}

/// Truth-zone lookup: stations-only Voronoi cell, then the zone owning it.
struct ZoneLookup {
    zoning: Zoning,
    zone_of_station: Vec<usize>,
}

impl ZoneLookup {
    fn new(spec: &SceneSpec) -> Self {
        let zoning = Zoning::stations_only(&spec.devices()).expect("validated");
        let zone_of_station = zoning
            .generators
            .iter()
            .map(|g| {
                spec.zones
                    .iter()
                    .position(|z| z.stations.contains(&g.id))
                    .expect("validated")
            })
            .collect();
        Self {
            zoning,
            zone_of_station,
        }
    }

    fn zone(&self, p: Point) -> usize {
        self.zone_of_station[self.zoning.assign(p) - 1]
    }
}

fn hour_profile(hour: u8) -> f64 {
    // morning and evening peaks
    let h = hour as f64;
    1.0 + 0.35 * (2.0 * std::f64::consts::PI * (h - 9.0) / 24.0).cos()
        + 0.25 * (4.0 * std::f64::consts::PI * (h - 8.0) / 24.0).cos()
}

/// Seeded smooth field: `base + sum_m w_m(slot) K_m(s)` with Gaussian bumps
/// `K_m` and per-slot weights.
struct FieldModel {
    base: f64,
    bumps: Vec<Bump>,
    /// `weights[slot][m]`
    weights: Vec<Vec<f64>>,
}

impl FieldModel {
    fn new(spec: &SceneSpec, slots: &[TimeSlot]) -> Self {
        let mut rng = GaussianNoise::new(spec.seed, 0);
        let g = &spec.grid;
        let w = g.ncols as f64 * g.cellsize;
        let h = g.nrows as f64 * g.cellsize;
        let diag = (w * w + h * h).sqrt();
        let bumps = (0..spec.field.bumps)
            .map(|_| Bump {
                cx: g.xllcorner + rng.uniform() * w,
                cy: g.yllcorner + rng.uniform() * h,
                radius: diag * (0.1 + 0.3 * rng.uniform()),
                amplitude: spec.field.amplitude_min
                    + (spec.field.amplitude_max - spec.field.amplitude_min) * rng.uniform(),
            })
            .collect::<Vec<_>>();
        let weights = slots
            .iter()
            .map(|s| {
                let prof = hour_profile(s.hour());
                bumps.iter().map(|_| prof * (0.5 + rng.uniform())).collect()
            })
            .collect();
        Self {
            base: spec.field.base,
            bumps,
            weights,
        }
    }

    fn kernels(&self, p: Point) -> Vec<f64> {
        self.bumps
            .iter()
            .map(|b| {
                let d2 = (p.x - b.cx).powi(2) + (p.y - b.cy).powi(2);
                b.amplitude * (-d2 / (2.0 * b.radius * b.radius)).exp()
            })
            .collect()
    }

    fn value(&self, slot_index: usize, kernels: &[f64]) -> f64 {
        self.base
            + self.weights[slot_index]
                .iter()
                .zip(kernels)
                .map(|(w, k)| w * k)
                .sum::<f64>()
    }

    fn static_value(&self, kernels: &[f64]) -> f64 {
        self.base + kernels.iter().sum::<f64>()
    }
}

fn grid_centers(g: &GridSpec) -> Vec<Point> {
    let probe = GridMap::filled(g.ncols, g.nrows, g.xllcorner, g.yllcorner, g.cellsize, 0.0);
    (0..g.nrows)
        .flat_map(|r| (0..g.ncols).map(move |c| (r, c)))
        .map(|(r, c)| probe.cell_center(r, c))
        .collect()
}

fn build(spec: &SceneSpec) -> Result<(Truth, MapStack), SynthError> {
    spec.validate()?;
    let slots = spec.slots();
    let field = FieldModel::new(spec, &slots);
    let lookup = ZoneLookup::new(spec);
    let centers = grid_centers(&spec.grid);
    let cell_zone: Vec<usize> = centers.iter().map(|p| lookup.zone(*p)).collect();
    let kernels: Vec<Vec<f64>> = centers.iter().map(|p| field.kernels(*p)).collect();
    let static_map: Vec<f64> = kernels.iter().map(|k| field.static_value(k)).collect();

    let mut fields = Vec::with_capacity(slots.len());
    let mut coarse = BTreeMap::new();
    match spec.coarse {
        CoarseMode::Aligned => {
            for (i, slot) in slots.iter().enumerate() {
                let truth: Vec<f64> = kernels.iter().map(|k| field.value(i, k)).collect();
                // hourly map chosen so that the mean with the static map is
                // the biased truth
                let hourly: Vec<f64> = truth
                    .iter()
                    .zip(&cell_zone)
                    .zip(&static_map)
                    .map(|((p, z), s)| {
                        let biased = model::apply_bias(&spec.zones[*z].params_at(slot.hour()), *p);
                        2.0 * biased - s
                    })
                    .collect();
                coarse.insert(*slot, spec.grid.grid(hourly)?);
                fields.push(truth);
            }
        }
        CoarseMode::Coarse { cellsize } => {
            let g = &spec.grid;
            let ncols = ((g.ncols as f64 * g.cellsize) / cellsize).ceil() as usize;
            let nrows = ((g.nrows as f64 * g.cellsize) / cellsize).ceil() as usize;
            // coarse grid anchored at the top-left corner of the fine grid
            let top = g.yllcorner + g.nrows as f64 * g.cellsize;
            let cgrid = GridSpec {
                ncols,
                nrows,
                xllcorner: g.xllcorner,
                yllcorner: top - nrows as f64 * cellsize,
                cellsize,
            };
            let ccenters = grid_centers(&cgrid);
            let ckernels: Vec<Vec<f64>> = ccenters.iter().map(|p| field.kernels(*p)).collect();
            let max_c = spec
                .zones
                .iter()
                .flat_map(|z| (0..24).map(move |h| z.params_at(h).c))
                .fold(f64::NEG_INFINITY, f64::max);
            // keeps the initial map above every intercept
            let shift = (max_c + 5.0 - field.base).max(0.0);
            let fine_static: Vec<f64> = static_map.iter().map(|s| s + 2.0 * shift).collect();
            let fine_static_grid = spec.grid.grid(fine_static.clone())?;
            for (i, slot) in slots.iter().enumerate() {
                let hourly: Vec<f64> = ckernels.iter().map(|k| field.value(i, k)).collect();
                let hourly_grid = cgrid.grid(hourly)?;
                let resampled = mapops::resample_nearest(&hourly_grid, &fine_static_grid)?;
                let initial = mapops::mean_of(&fine_static_grid, &resampled)?;
                let truth: Vec<f64> = initial
                    .values
                    .iter()
                    .zip(&cell_zone)
                    .map(|(pt, z)| {
                        model::correct(&spec.zones[*z].params_at(slot.hour()), *pt, false)
                            .map(|c| c.value)
                            .unwrap_or(*pt)
                    })
                    .collect();
                coarse.insert(*slot, hourly_grid);
                fields.push(truth);
            }
            let stack = MapStack {
                fine: fine_static_grid,
                coarse,
            };
            return Ok((
                Truth {
                    grid: spec.grid,
                    slots,
                    fields,
                },
                stack,
            ));
        }
    }
    let stack = MapStack {
        fine: spec.grid.grid(static_map)?,
        coarse,
    };
    Ok((
        Truth {
            grid: spec.grid,
            slots,
            fields,
        },
        stack,
    ))
}

/// True concentration field per slot.
pub fn generate_truth(spec: &SceneSpec) -> Result<Truth, SynthError> {
    Ok(build(spec)?.0)
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene, SynthError> {
    let (truth, stack) = build(spec)?;
    let devices = spec.devices();
    let lookup = ZoneLookup::new(spec);
    let probe = &stack.fine;
    let mut measurements = Vec::with_capacity(devices.len() * truth.slots.len());
    let mut device_zone = BTreeMap::new();
    for (di, dev) in devices.iter().enumerate() {
        let zone = lookup.zone(dev.location);
        device_zone.insert(dev.id.clone(), zone);
        let sigma = spec.zones[zone].sigma;
        let sensor = spec.sensors.iter().find(|s| s.id == dev.id);
        let cell = probe.cell_of(dev.location).ok();
        let mut noise = GaussianNoise::new(spec.seed, di as u64 + 1);
        for (i, slot) in truth.slots.iter().enumerate() {
            let eps = noise.standard();
            let gap = noise.uniform() < spec.missing_rate;
            // devices outside the grid still get readings, from the nearest edge value
            let p = match cell {
                Some((r, c)) => truth.fields[i][r * spec.grid.ncols + c],
                None => spec.field.base,
            };
            let value = match sensor {
                None => p + sigma * eps,
                Some(s) => match s.white_noise {
                    Some(w) => w.mean + w.sd * eps,
                    None => {
                        model::sensor_expected(&SensorCalibration::new(s.alpha, s.beta), p)
                            + sigma * eps
                    }
                },
            };
            measurements.push(Measurement {
                device_id: dev.id.clone(),
                slot: *slot,
                value: (!gap).then_some(value),
            });
        }
    }
    Ok(Scene {
        spec: spec.clone(),
        devices,
        measurements,
        stack,
        truth,
        device_zone,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub spec: SceneSpec,
    /// Truth-zone index of each device.
    pub device_zone: BTreeMap<String, usize>,
    pub devices: PathBuf,
    pub measurements: PathBuf,
    pub maps: PathBuf,
}

pub const SCENE_MANIFEST: &str = "scene.json";

fn write_file(path: &Path, contents: &str) -> Result<(), SynthError> {
    fs::write(path, contents).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes devices, measurements, maps and manifests under `dir`.
pub fn write_scene(scene: &Scene, dir: &Path) -> Result<SceneManifest, SynthError> {
    let mkdir = |p: &Path| {
        fs::create_dir_all(p).map_err(|source| SynthError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    mkdir(dir)?;
    mkdir(&dir.join("maps/coarse"))?;
    write_file(&dir.join("devices.csv"), &ingest::devices_to_csv(&scene.devices))?;
    write_file(
        &dir.join("measurements.csv"),
        &ingest::measurements_to_csv(&scene.measurements),
    )?;
    mapops::write_grid(&scene.stack.fine, &dir.join("maps/fine.asc"))?;
    let mut coarse = Vec::with_capacity(scene.stack.coarse.len());
    for (slot, grid) in &scene.stack.coarse {
        let rel = PathBuf::from(format!("coarse/{}.asc", slot.compact()));
        mapops::write_grid(grid, &dir.join("maps").join(&rel))?;
        coarse.push(CoarseEntry { slot: *slot, path: rel });
    }
    let manifest = MapManifest {
        fine: PathBuf::from("fine.asc"),
        coarse,
    };
    write_file(
        &dir.join("maps/maps.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    let scene_manifest = SceneManifest {
        spec: scene.spec.clone(),
        device_zone: scene.device_zone.clone(),
        devices: PathBuf::from("devices.csv"),
        measurements: PathBuf::from("measurements.csv"),
        maps: PathBuf::from("maps/maps.json"),
    };
    write_file(
        &dir.join(SCENE_MANIFEST),
        &serde_json::to_string_pretty(&scene_manifest).expect("manifest serializes"),
    )?;
    Ok(scene_manifest)
}
