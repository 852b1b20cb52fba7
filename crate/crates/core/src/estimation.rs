//! Zone-wise estimation of the bias parameters and sensor calibrations.
//!
//! In a zone `k`, a station measurement satisfies
//! `X = P~ / (1 + rho_k) - C_k / (1 + rho_k) + eps` and a sensor measurement
//! `X = alpha_j / (1 + rho_k) * P~ + beta_j - alpha_j C_k / (1 + rho_k) + eps`,
//! which is linear in
//! `theta = (1/(1+rho), C/(1+rho), alpha_j/(1+rho).., beta_j - alpha_j C/(1+rho)..)`.
//!
//! Three strategies build on this:
//! * `pool`: one joint system per zone with stations and sensors;
//! * `no_ms`: stations only, then sensors calibrated against the corrected map;
//! * `ms_as_sta`: calibrated sensors become pseudo-stations on a finer zoning.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lstsq::{self, LstsqError, LstsqSolution};
use crate::model::{
    self, Concentration, Corrected, Device, DeviceKind, ModelError, Point, SensorCalibration,
    TimeSlot, ZoneParameters, EPSILON_ALPHA, EPSILON_DEN,
};
use crate::zoning::{validate_identifiability, ZoneId, Zoning, ZoningError, ZoningMode};

/// A gain is degenerate when it lies within this many standard errors of 0.
pub const GAIN_SIGNIFICANCE: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("zone has no reference-station observation")]
    NoStationInZone,
    #[error("no observations")]
    NoObservations,
    #[error(transparent)]
    Lstsq(#[from] LstsqError),
    #[error("degenerate map slope: |theta_1| = {0:e}")]
    DegenerateSlope(f64),
    #[error("zero residual degrees of freedom")]
    ZeroDof,
    #[error("parameter vector has length {0}, expected {1}")]
    ThetaLength(usize, usize),
    #[error(transparent)]
    Zoning(#[from] ZoningError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "no_ms")]
    NoMs,
    #[serde(rename = "ms_as_sta")]
    MsAsSta,
    #[serde(rename = "pool")]
    Pool,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::NoMs, Strategy::MsAsSta, Strategy::Pool];

    pub fn token(&self) -> &'static str {
        match self {
            Strategy::NoMs => "no_ms",
            Strategy::MsAsSta => "ms_as_sta",
            Strategy::Pool => "pool",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "no_ms" => Ok(Strategy::NoMs),
            "ms_as_sta" => Ok(Strategy::MsAsSta),
            "pool" => Ok(Strategy::Pool),
            other => Err(format!("unknown strategy '{other}' (expected no_ms, ms_as_sta or pool)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ParamMode {
    /// One parameter set per hour of the day.
    #[default]
    Hourly,
    /// One parameter set for all selected hours.
    Global,
}

impl FromStr for ParamMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hourly" => Ok(ParamMode::Hourly),
            "global" => Ok(ParamMode::Global),
            other => Err(format!("unknown parameter mode '{other}' (expected hourly or global)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub param_mode: ParamMode,
    /// Hours of the day taken into account.
    pub hours: Vec<u8>,
    /// Zoning used by the pool strategy.
    pub pool_zoning: ZoningMode,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            param_mode: ParamMode::Hourly,
            hours: (0..24).collect(),
            pool_zoning: ZoningMode::StationsOnly,
        }
    }
}

impl FitConfig {
    /// Parameter keys: one per hour, or a single `None` in global mode.
    pub fn keys(&self) -> Vec<Option<u8>> {
        match self.param_mode {
            ParamMode::Hourly => {
                let set: BTreeSet<u8> = self.hours.iter().copied().collect();
                set.into_iter().map(Some).collect()
            }
            ParamMode::Global => vec![None],
        }
    }

    fn selects(&self, hour: u8) -> bool {
        self.hours.contains(&hour)
    }
}

/// A measurement paired with the initial-map value at the device and slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub device_id: String,
    pub kind: DeviceKind,
    pub location: Point,
    pub slot: TimeSlot,
    pub x: Concentration,
    pub p_tilde: Concentration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Column {
    MapSlope,
    MapIntercept,
    SensorGain(String),
    SensorOffset(String),
}

/// Linear system of one zone and one parameter key.
#[derive(Debug, Clone)]
pub struct DesignSystem {
    pub matrix: DMatrix<f64>,
    pub response: DVector<f64>,
    pub columns: Vec<Column>,
    /// Sensors of the zone in column order.
    pub sensors: Vec<String>,
}

/// Builds the design matrix of a zone. Station rows read `(P~, -1, 0.., 0..)`,
/// rows of the `j`-th sensor `(0, 0, P~ e_j, e_j)`.
pub fn assemble_design(observations: &[Observation]) -> Result<DesignSystem, EstimationError> {
    if !observations
        .iter()
        .any(|o| o.kind == DeviceKind::ReferenceStation)
    {
        return Err(EstimationError::NoStationInZone);
    }
    let sensors: Vec<String> = observations
        .iter()
        .filter(|o| o.kind == DeviceKind::MicroSensor)
        .map(|o| o.device_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let j = sensors.len();
    let cols = 2 + 2 * j;
    let n = observations.len();
    let mut matrix = DMatrix::zeros(n, cols);
    let mut response = DVector::zeros(n);
    for (l, o) in observations.iter().enumerate() {
        response[l] = o.x;
        match o.kind {
            DeviceKind::ReferenceStation => {
                matrix[(l, 0)] = o.p_tilde;
                matrix[(l, 1)] = -1.0;
            }
            DeviceKind::MicroSensor => {
                let s = sensors
                    .binary_search(&o.device_id)
                    .expect("sensor collected above");
                matrix[(l, 2 + s)] = o.p_tilde;
                matrix[(l, 2 + j + s)] = 1.0;
            }
        }
    }
    let mut columns = vec![Column::MapSlope, Column::MapIntercept];
    columns.extend(sensors.iter().cloned().map(Column::SensorGain));
    columns.extend(sensors.iter().cloned().map(Column::SensorOffset));
    Ok(DesignSystem {
        matrix,
        response,
        columns,
        sensors,
    })
}

pub fn solve_ls(ds: &DesignSystem) -> Result<LstsqSolution, EstimationError> {
    Ok(lstsq::solve(&ds.matrix, &ds.response)?)
}

/// Inverts the parameterization: `rho = 1/theta_1 - 1`, `C = theta_2/theta_1`,
/// `alpha_j = theta_{2+j}/theta_1`, `beta_j = theta_{2+J+j} + theta_{2+j} C`.
pub fn recover_parameters(
    theta: &[f64],
    n_sensors: usize,
) -> Result<(ZoneParameters, Vec<SensorCalibration>), EstimationError> {
    if theta.len() != 2 + 2 * n_sensors {
        return Err(EstimationError::ThetaLength(theta.len(), 2 + 2 * n_sensors));
    }
    let t1 = theta[0];
    if t1.abs() < EPSILON_ALPHA || !t1.is_finite() {
        return Err(EstimationError::DegenerateSlope(t1.abs()));
    }
    // 1 + rho = 1 / theta_1
    if (1.0 / t1).abs() < EPSILON_DEN {
        return Err(ModelError::SingularZone((1.0 / t1).abs()).into());
    }
    let rho = 1.0 / t1 - 1.0;
    let c = theta[1] / t1;
    let cals = (0..n_sensors)
        .map(|j| {
            let g = theta[2 + j];
            SensorCalibration::new(g / t1, theta[2 + n_sensors + j] + g * c)
        })
        .collect();
    Ok((ZoneParameters::new(c, rho), cals))
}

/// `RSS / dof`.
pub fn estimate_variance(residuals: &[f64], dof: usize) -> Result<f64, EstimationError> {
    if dof == 0 {
        return Err(EstimationError::ZeroDof);
    }
    Ok(residuals.iter().map(|r| r * r).sum::<f64>() / dof as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitFlag {
    NoObservations,
    NoStationInZone,
    Underdetermined,
    RankDeficient,
    DegenerateSlope,
    SingularZone,
    ZeroDof,
    DegenerateGain,
    /// Zone parameters taken from the stations-only fit.
    InheritedFromBase,
    /// The stations-only zone used to calibrate this sensor is degenerate.
    BaseDegenerate,
    /// Device dropped from fitting (zone without reference station).
    Omitted,
    Uncalibrated,
}

impl FitFlag {
    /// Flags that replace the zone estimate by the identity fallback.
    pub fn forces_fallback(&self) -> bool {
        matches!(
            self,
            FitFlag::NoObservations
                | FitFlag::NoStationInZone
                | FitFlag::Underdetermined
                | FitFlag::RankDeficient
                | FitFlag::DegenerateSlope
                | FitFlag::SingularZone
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneEstimate {
    #[serde(flatten)]
    pub params: ZoneParameters,
    pub flags: Vec<FitFlag>,
    /// Standard error of `C` (delta method).
    #[serde(rename = "se_C")]
    pub se_c: Option<f64>,
    pub se_rho: Option<f64>,
    pub n_obs: usize,
    pub rank: usize,
    pub dof: usize,
    pub condition: Option<f64>,
}

impl ZoneEstimate {
    fn fallback(flag: FitFlag, n_obs: usize) -> Self {
        Self {
            params: ZoneParameters::IDENTITY,
            flags: vec![flag],
            se_c: None,
            se_rho: None,
            n_obs,
            rank: 0,
            dof: 0,
            condition: None,
        }
    }

    /// Parameters were not estimated (identity fallback).
    pub fn is_degenerate(&self) -> bool {
        self.flags.iter().any(FitFlag::forces_fallback)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorEstimate {
    #[serde(flatten)]
    pub calibration: SensorCalibration,
    pub flags: Vec<FitFlag>,
    pub se_alpha: Option<f64>,
    pub n_obs: usize,
}

impl SensorEstimate {
    fn flagged(flag: FitFlag, n_obs: usize) -> Self {
        Self {
            calibration: SensorCalibration::PERFECT,
            flags: vec![flag],
            se_alpha: None,
            n_obs,
        }
    }

    /// Calibration usable to invert the sensor's readings.
    pub fn is_usable(&self) -> bool {
        !self.flags.iter().any(|f| {
            matches!(
                f,
                FitFlag::DegenerateGain
                    | FitFlag::Uncalibrated
                    | FitFlag::BaseDegenerate
                    | FitFlag::Omitted
                    | FitFlag::NoObservations
                    | FitFlag::RankDeficient
                    | FitFlag::Underdetermined
            )
        }) && !self.calibration.is_degenerate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneRecord {
    pub id: ZoneId,
    pub generator: String,
    /// `None` in global parameter mode.
    pub hour: Option<u8>,
    #[serde(flatten)]
    pub estimate: ZoneEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub id: String,
    pub hour: Option<u8>,
    #[serde(flatten)]
    pub estimate: SensorEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmittedDevice {
    pub id: String,
    pub reason: String,
}

/// Parameters of one strategy over all fitted hours. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub strategy: Strategy,
    pub param_mode: ParamMode,
    pub hours: Vec<u8>,
    pub zoning: Zoning,
    /// Sorted by `(hour, id)`.
    pub zones: Vec<ZoneRecord>,
    /// Sorted by `(id, hour)`.
    pub sensors: Vec<SensorRecord>,
    pub omitted: Vec<OmittedDevice>,
}

impl FittedModel {
    fn key(&self, hour: u8) -> Option<u8> {
        match self.param_mode {
            ParamMode::Hourly => Some(hour),
            ParamMode::Global => None,
        }
    }

    /// Whether parameters exist for `hour`.
    pub fn covers_hour(&self, hour: u8) -> bool {
        self.hours.contains(&hour)
    }

    pub fn zone_estimate(&self, zone: ZoneId, hour: u8) -> Option<&ZoneEstimate> {
        let key = (self.key(hour), zone);
        self.zones
            .binary_search_by(|r| (r.hour, r.id).cmp(&key))
            .ok()
            .map(|i| &self.zones[i].estimate)
    }

    /// Zone parameters, identity when the hour was not fitted.
    pub fn zone_parameters(&self, zone: ZoneId, hour: u8) -> ZoneParameters {
        self.zone_estimate(zone, hour)
            .map(|e| e.params)
            .unwrap_or(ZoneParameters::IDENTITY)
    }

    pub fn sensor_estimate(&self, id: &str, hour: u8) -> Option<&SensorEstimate> {
        let key = self.key(hour);
        self.sensors
            .iter()
            .find(|s| s.id == id && s.hour == key)
            .map(|s| &s.estimate)
    }

    /// Corrects an initial-map value located at `point`.
    pub fn correct_at(
        &self,
        point: Point,
        hour: u8,
        p_tilde: Concentration,
        clamp: bool,
    ) -> Result<Corrected, ModelError> {
        let zone = self.zoning.assign(point);
        model::correct(&self.zone_parameters(zone, hour), p_tilde, clamp)
    }

    /// Number of zone and sensor records carrying each flag.
    pub fn flag_summary(&self) -> BTreeMap<FitFlag, usize> {
        let mut out = BTreeMap::new();
        for f in self
            .zones
            .iter()
            .flat_map(|z| &z.estimate.flags)
            .chain(self.sensors.iter().flat_map(|s| &s.estimate.flags))
        {
            *out.entry(*f).or_insert(0) += 1;
        }
        out
    }

    pub fn degenerate_zone_count(&self) -> usize {
        self.zones.iter().filter(|z| z.estimate.is_degenerate()).count()
    }

    /// Sensors that took part in the fit: for `pool` those not omitted, for
    /// `ms_as_sta` those promoted to pseudo-stations, none for `no_ms`.
    pub fn contributing_sensors(&self) -> BTreeSet<String> {
        match self.strategy {
            Strategy::NoMs => BTreeSet::new(),
            Strategy::MsAsSta => self
                .zoning
                .generators
                .iter()
                .filter(|g| !g.is_station())
                .map(|g| g.id.clone())
                .collect(),
            Strategy::Pool => {
                let omitted: BTreeSet<&str> = self.omitted.iter().map(|o| o.id.as_str()).collect();
                self.sensors
                    .iter()
                    .filter(|s| !omitted.contains(s.id.as_str()))
                    .map(|s| s.id.clone())
                    .collect()
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Rows bucketed by parameter key.
fn bucket_by_key<'a>(
    rows: &'a [Observation],
    config: &FitConfig,
) -> BTreeMap<Option<u8>, Vec<&'a Observation>> {
    let mut out: BTreeMap<Option<u8>, Vec<&Observation>> =
        config.keys().into_iter().map(|k| (k, Vec::new())).collect();
    for o in rows {
        let h = o.slot.hour();
        if !config.selects(h) {
            continue;
        }
        let key = match config.param_mode {
            ParamMode::Hourly => Some(h),
            ParamMode::Global => None,
        };
        if let Some(v) = out.get_mut(&key) {
            v.push(o);
        }
    }
    out
}

/// Fits one zone from its rows. Sensor estimates follow the order of the
/// design's sensor columns.
fn fit_zone(rows: &[Observation]) -> (ZoneEstimate, Vec<(String, SensorEstimate)>) {
    let n = rows.len();
    let sensor_ids: BTreeSet<String> = rows
        .iter()
        .filter(|o| o.kind == DeviceKind::MicroSensor)
        .map(|o| o.device_id.clone())
        .collect();
    let uncalibrated = |flag: FitFlag| -> Vec<(String, SensorEstimate)> {
        sensor_ids
            .iter()
            .map(|id| {
                let n_obs = rows.iter().filter(|o| &o.device_id == id).count();
                let mut e = SensorEstimate::flagged(FitFlag::Uncalibrated, n_obs);
                e.flags.push(flag);
                (id.clone(), e)
            })
            .collect()
    };
    if n == 0 {
        return (ZoneEstimate::fallback(FitFlag::NoObservations, 0), Vec::new());
    }
    let ds = match assemble_design(rows) {
        Ok(ds) => ds,
        Err(_) => {
            return (
                ZoneEstimate::fallback(FitFlag::NoStationInZone, n),
                uncalibrated(FitFlag::NoStationInZone),
            )
        }
    };
    let sol = match solve_ls(&ds) {
        Ok(s) => s,
        Err(_) => {
            return (
                ZoneEstimate::fallback(FitFlag::Underdetermined, n),
                uncalibrated(FitFlag::Underdetermined),
            )
        }
    };
    if sol.rank_deficient {
        let mut e = ZoneEstimate::fallback(FitFlag::RankDeficient, n);
        e.rank = sol.rank;
        e.dof = sol.dof();
        e.condition = Some(sol.condition).filter(|c| c.is_finite());
        return (e, uncalibrated(FitFlag::RankDeficient));
    }
    let j = ds.sensors.len();
    let theta: Vec<f64> = sol.theta.iter().copied().collect();
    let (mut params, cals) = match recover_parameters(&theta, j) {
        Ok(p) => p,
        Err(err) => {
            let flag = match err {
                EstimationError::Model(ModelError::SingularZone(_)) => FitFlag::SingularZone,
                _ => FitFlag::DegenerateSlope,
            };
            let mut e = ZoneEstimate::fallback(flag, n);
            e.rank = sol.rank;
            e.dof = sol.dof();
            return (e, uncalibrated(flag));
        }
    };

    let mut flags = Vec::new();
    let dof = sol.dof();
    let residuals: Vec<f64> = sol.residuals.iter().copied().collect();
    let sigma2 = match estimate_variance(&residuals, dof) {
        Ok(s) => Some(s),
        Err(_) => {
            flags.push(FitFlag::ZeroDof);
            None
        }
    };
    params.sigma2 = sigma2.unwrap_or(0.0);

    let cov = |a: usize, b: usize| sigma2.map(|s2| s2 * sol.cov_unscaled[(a, b)]);
    let t1 = theta[0];
    let t2 = theta[1];
    let se_rho = cov(0, 0).map(|v| v.max(0.0).sqrt() / (t1 * t1));
    let se_c = sigma2.map(|_| {
        let g0 = -t2 / (t1 * t1);
        let g1 = 1.0 / t1;
        let var = g0 * g0 * cov(0, 0).unwrap()
            + 2.0 * g0 * g1 * cov(0, 1).unwrap()
            + g1 * g1 * cov(1, 1).unwrap();
        var.max(0.0).sqrt()
    });

    let sensors = ds
        .sensors
        .iter()
        .zip(cals)
        .enumerate()
        .map(|(s, (id, mut cal))| {
            cal.sigma2 = params.sigma2;
            let gain = theta[2 + s];
            let se_gain = cov(2 + s, 2 + s).map(|v| v.max(0.0).sqrt());
            let mut sflags = Vec::new();
            if gain_is_degenerate(cal.alpha, gain, se_gain) {
                sflags.push(FitFlag::DegenerateGain);
            }
            let n_obs = rows.iter().filter(|o| &o.device_id == id).count();
            (
                id.clone(),
                SensorEstimate {
                    calibration: cal,
                    flags: sflags,
                    se_alpha: se_gain.map(|s| s / t1.abs()),
                    n_obs,
                },
            )
        })
        .collect();

    (
        ZoneEstimate {
            params,
            flags,
            se_c,
            se_rho,
            n_obs: n,
            rank: sol.rank,
            dof,
            condition: Some(sol.condition).filter(|c| c.is_finite()),
        },
        sensors,
    )
}

fn gain_is_degenerate(alpha: f64, gain: f64, se_gain: Option<f64>) -> bool {
    alpha.abs() < EPSILON_ALPHA
        || se_gain.is_some_and(|se| gain.abs() < GAIN_SIGNIFICANCE * se)
}

/// Fits every zone of `zoning` for every parameter key, from rows already
/// restricted to the devices allowed in the fit.
fn fit_zones(
    rows: &[Observation],
    zoning: &Zoning,
    config: &FitConfig,
) -> (Vec<ZoneRecord>, Vec<SensorRecord>) {
    let buckets = bucket_by_key(rows, config);
    let per_key: Vec<(Vec<ZoneRecord>, Vec<SensorRecord>)> = buckets
        .par_iter()
        .map(|(key, rows)| {
            let mut by_zone: Vec<Vec<Observation>> = vec![Vec::new(); zoning.len()];
            for o in rows {
                by_zone[zoning.assign(o.location) - 1].push((*o).clone());
            }
            let mut zones = Vec::with_capacity(zoning.len());
            let mut sensors = Vec::new();
            for (i, zone_rows) in by_zone.iter().enumerate() {
                let (estimate, sens) = fit_zone(zone_rows);
                zones.push(ZoneRecord {
                    id: i + 1,
                    generator: zoning.zones[i].generator.clone(),
                    hour: *key,
                    estimate,
                });
                sensors.extend(sens.into_iter().map(|(id, estimate)| SensorRecord {
                    id,
                    hour: *key,
                    estimate,
                }));
            }
            (zones, sensors)
        })
        .collect();
    let mut zones = Vec::new();
    let mut sensors = Vec::new();
    for (z, s) in per_key {
        zones.extend(z);
        sensors.extend(s);
    }
    sort_records(&mut zones, &mut sensors);
    (zones, sensors)
}

fn sort_records(zones: &mut [ZoneRecord], sensors: &mut [SensorRecord]) {
    zones.sort_by_key(|z| (z.hour, z.id));
    sensors.sort_by(|a, b| (&a.id, a.hour).cmp(&(&b.id, b.hour)));
}

fn hours_of(config: &FitConfig) -> Vec<u8> {
    let set: BTreeSet<u8> = config.hours.iter().copied().collect();
    set.into_iter().collect()
}

/// Joint fit of stations and sensors in each zone (strategy `pool`).
///
/// Sensors in zones without a reference station are omitted.
pub fn fit_pool(
    rows: &[Observation],
    devices: &[Device],
    config: &FitConfig,
) -> Result<FittedModel, EstimationError> {
    let zoning = Zoning::for_mode(devices, config.pool_zoning)?;
    let report = validate_identifiability(&zoning, devices);
    let omitted_ids: BTreeSet<&str> = report.omitted_devices.iter().map(String::as_str).collect();
    let kept: Vec<Observation> = rows
        .iter()
        .filter(|o| !omitted_ids.contains(o.device_id.as_str()))
        .cloned()
        .collect();
    let (zones, mut sensors) = fit_zones(&kept, &zoning, config);
    for id in &report.omitted_devices {
        for key in config.keys() {
            sensors.push(SensorRecord {
                id: id.clone(),
                hour: key,
                estimate: SensorEstimate::flagged(FitFlag::Omitted, 0),
            });
        }
    }
    let mut zones = zones;
    sort_records(&mut zones, &mut sensors);
    Ok(FittedModel {
        strategy: Strategy::Pool,
        param_mode: config.param_mode,
        hours: hours_of(config),
        zoning,
        zones,
        sensors,
        omitted: report
            .omitted_devices
            .iter()
            .map(|id| OmittedDevice {
                id: id.clone(),
                reason: "zone without reference station".into(),
            })
            .collect(),
    })
}

/// Stations-only regression per zone of the stations-only zoning, with no
/// sensor calibrations attached.
pub fn fit_stations_only(
    rows: &[Observation],
    devices: &[Device],
    config: &FitConfig,
) -> Result<FittedModel, EstimationError> {
    let zoning = Zoning::stations_only(devices)?;
    let stations: Vec<Observation> = rows
        .iter()
        .filter(|o| o.kind == DeviceKind::ReferenceStation)
        .cloned()
        .collect();
    let (zones, sensors) = fit_zones(&stations, &zoning, config);
    Ok(FittedModel {
        strategy: Strategy::NoMs,
        param_mode: config.param_mode,
        hours: hours_of(config),
        zoning,
        zones,
        sensors,
        omitted: Vec::new(),
    })
}

/// Calibrates each sensor against the corrected map of `base`: with `C` and
/// `rho` fixed, regresses the sensor readings on `(P~ - C) / (1 + rho)`.
pub fn fit_sensor_calibrations(
    rows: &[Observation],
    devices: &[Device],
    base: &FittedModel,
    config: &FitConfig,
) -> Vec<SensorRecord> {
    let sensors: Vec<&Device> = devices.iter().filter(|d| !d.is_station()).collect();
    let buckets = bucket_by_key(rows, config);
    let mut out: Vec<SensorRecord> = sensors
        .par_iter()
        .flat_map_iter(|dev| {
            let zone = base.zoning.assign(dev.location);
            buckets
                .iter()
                .map(|(key, rows)| {
                    let own: Vec<&Observation> =
                        rows.iter().copied().filter(|o| o.device_id == dev.id).collect();
                    let estimate = calibrate_sensor(&own, base, zone, *key);
                    SensorRecord {
                        id: dev.id.clone(),
                        hour: *key,
                        estimate,
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    out.sort_by(|a, b| (&a.id, a.hour).cmp(&(&b.id, b.hour)));
    out
}

fn calibrate_sensor(
    rows: &[&Observation],
    base: &FittedModel,
    zone: ZoneId,
    key: Option<u8>,
) -> SensorEstimate {
    let n = rows.len();
    let base_est = base
        .zones
        .iter()
        .find(|r| r.id == zone && r.hour == key)
        .map(|r| &r.estimate);
    let params = match base_est {
        Some(e) if !e.is_degenerate() => e.params,
        _ => {
            let mut e = SensorEstimate::flagged(FitFlag::Uncalibrated, n);
            e.flags.push(FitFlag::BaseDegenerate);
            return e;
        }
    };
    if n == 0 {
        return SensorEstimate::flagged(FitFlag::NoObservations, 0);
    }
    let mut a = DMatrix::zeros(n, 2);
    let mut b = DVector::zeros(n);
    for (l, o) in rows.iter().enumerate() {
        let p_hat = match model::correct(&params, o.p_tilde, false) {
            Ok(c) => c.value,
            Err(_) => return SensorEstimate::flagged(FitFlag::Uncalibrated, n),
        };
        a[(l, 0)] = p_hat;
        a[(l, 1)] = 1.0;
        b[l] = o.x;
    }
    let sol = match lstsq::solve(&a, &b) {
        Ok(s) => s,
        Err(_) => {
            let mut e = SensorEstimate::flagged(FitFlag::Uncalibrated, n);
            e.flags.push(FitFlag::Underdetermined);
            return e;
        }
    };
    if sol.rank_deficient {
        let mut e = SensorEstimate::flagged(FitFlag::Uncalibrated, n);
        e.flags.push(FitFlag::RankDeficient);
        return e;
    }
    let mut flags = Vec::new();
    let residuals: Vec<f64> = sol.residuals.iter().copied().collect();
    let sigma2 = match estimate_variance(&residuals, sol.dof()) {
        Ok(s) => Some(s),
        Err(_) => {
            flags.push(FitFlag::ZeroDof);
            None
        }
    };
    let alpha = sol.theta[0];
    let se_alpha = sigma2.map(|s2| (s2 * sol.cov_unscaled[(0, 0)]).max(0.0).sqrt());
    if gain_is_degenerate(alpha, alpha, se_alpha) {
        flags.push(FitFlag::DegenerateGain);
    }
    SensorEstimate {
        calibration: SensorCalibration {
            alpha,
            beta: sol.theta[1],
            sigma2: sigma2.unwrap_or(0.0),
        },
        flags,
        se_alpha,
        n_obs: n,
    }
}

/// Strategy `no_ms`: stations-only zone parameters plus sensor calibrations
/// against the resulting corrected map.
pub fn fit_no_ms(
    rows: &[Observation],
    devices: &[Device],
    config: &FitConfig,
) -> Result<FittedModel, EstimationError> {
    let mut model = fit_stations_only(rows, devices, config)?;
    model.sensors = fit_sensor_calibrations(rows, devices, &model, config);
    Ok(model)
}

/// Strategy `ms_as_sta`: sensors calibrated against the `no_ms` fit are
/// inverted and used as pseudo-stations on the all-devices zoning.
///
/// Sensors whose gain is degenerate at every fitted key are not zone
/// generators. A sensor zone whose calibration is unusable at some key takes
/// the stations-only parameters of the zone containing it.
pub fn fit_ms_as_sta(
    rows: &[Observation],
    devices: &[Device],
    config: &FitConfig,
) -> Result<FittedModel, EstimationError> {
    let base = fit_stations_only(rows, devices, config)?;
    let cals = fit_sensor_calibrations(rows, devices, &base, config);

    let usable_somewhere: BTreeSet<&str> = cals
        .iter()
        .filter(|r| r.estimate.is_usable())
        .map(|r| r.id.as_str())
        .collect();
    let mut omitted = Vec::new();
    let mut generators: Vec<Device> = Vec::new();
    for d in devices {
        if !d.is_station() && !usable_somewhere.contains(d.id.as_str()) {
            omitted.push(OmittedDevice {
                id: d.id.clone(),
                reason: "no usable calibration".into(),
            });
            continue;
        }
        if let Some(g) = generators.iter().find(|g| g.location == d.location) {
            omitted.push(OmittedDevice {
                id: d.id.clone(),
                reason: format!("shares its location with {}", g.id),
            });
            continue;
        }
        generators.push(d.clone());
    }
    let zoning = Zoning::build(generators, ZoningMode::AllDevices)?;

    let usable: BTreeMap<(&str, Option<u8>), SensorCalibration> = cals
        .iter()
        .filter(|r| r.estimate.is_usable())
        .map(|r| ((r.id.as_str(), r.hour), r.estimate.calibration))
        .collect();
    let in_zoning: BTreeSet<&str> = zoning.generators.iter().map(|g| g.id.as_str()).collect();
    let key_of = |o: &Observation| match config.param_mode {
        ParamMode::Hourly => Some(o.slot.hour()),
        ParamMode::Global => None,
    };
    let pseudo: Vec<Observation> = rows
        .iter()
        .filter(|o| in_zoning.contains(o.device_id.as_str()) && config.selects(o.slot.hour()))
        .filter_map(|o| match o.kind {
            DeviceKind::ReferenceStation => Some(o.clone()),
            DeviceKind::MicroSensor => {
                let cal = usable.get(&(o.device_id.as_str(), key_of(o)))?;
                let x = model::sensor_invert(cal, o.x).ok()?;
                Some(Observation {
                    kind: DeviceKind::ReferenceStation,
                    x,
                    ..o.clone()
                })
            }
        })
        .collect();

    let (mut zones, _) = fit_zones(&pseudo, &zoning, config);
    for z in zones.iter_mut() {
        let gen = zoning.generator(z.id);
        if gen.is_station() {
            continue;
        }
        let base_zone = base.zoning.assign(gen.location);
        let Some(b) = base
            .zones
            .iter()
            .find(|r| r.id == base_zone && r.hour == z.hour)
        else {
            continue;
        };
        if z.estimate.flags.contains(&FitFlag::NoObservations) {
            let mut e = b.estimate.clone();
            e.flags.push(FitFlag::InheritedFromBase);
            z.estimate = e;
        } else if !z.estimate.is_degenerate() {
            // Pseudo-observations carry the error of the calibration, which
            // in turn carries the error of the stations-only fit; the plain
            // regression standard errors ignore it.
            let combine = |own: Option<f64>, inherited: Option<f64>| match (own, inherited) {
                (Some(a), Some(b)) => Some(a.hypot(b)),
                _ => None,
            };
            z.estimate.se_c = combine(z.estimate.se_c, b.estimate.se_c);
            z.estimate.se_rho = combine(z.estimate.se_rho, b.estimate.se_rho);
        }
    }
    let mut sensors = cals;
    sort_records(&mut zones, &mut sensors);
    Ok(FittedModel {
        strategy: Strategy::MsAsSta,
        param_mode: config.param_mode,
        hours: hours_of(config),
        zoning,
        zones,
        sensors,
        omitted,
    })
}

pub fn fit(
    strategy: Strategy,
    rows: &[Observation],
    devices: &[Device],
    config: &FitConfig,
) -> Result<FittedModel, EstimationError> {
    match strategy {
        Strategy::Pool => fit_pool(rows, devices, config),
        Strategy::NoMs => fit_no_ms(rows, devices, config),
        Strategy::MsAsSta => fit_ms_as_sta(rows, devices, config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::apply_bias;

    fn slot(day: u32, hour: u32) -> TimeSlot {
        TimeSlot::from_ymdh(2017, 1, day, hour).unwrap()
    }

    fn obs(id: &str, kind: DeviceKind, loc: (f64, f64), s: TimeSlot, p_tilde: f64, x: f64) -> Observation {
        Observation {
            device_id: id.into(),
            kind,
            location: Point::new(loc.0, loc.1),
            slot: s,
            x,
            p_tilde,
        }
    }

    #[test]
    fn assemble_design_row_patterns() {
        let rows = vec![
            obs("S1", DeviceKind::ReferenceStation, (0.0, 0.0), slot(5, 6), 40.0, 35.0),
            obs("m1", DeviceKind::MicroSensor, (1.0, 0.0), slot(5, 6), 42.0, 90.0),
        ];
        let ds = assemble_design(&rows).unwrap();
        let expected = DMatrix::from_row_slice(2, 4, &[40.0, -1.0, 0.0, 0.0, 0.0, 0.0, 42.0, 1.0]);
        assert_eq!(ds.matrix, expected);
        assert_eq!(ds.response.as_slice(), &[35.0, 90.0]);
        assert_eq!(ds.columns[2], Column::SensorGain("m1".into()));

        let ds = assemble_design(&rows[..1]).unwrap();
        assert_eq!(ds.matrix.ncols(), 2);

        assert_eq!(
            assemble_design(&rows[1..]).unwrap_err(),
            EstimationError::NoStationInZone
        );
    }

    #[test]
    fn recover_parameters_examples() {
        let (zp, cals) = recover_parameters(&[0.5, 5.0, 1.0, -7.0], 1).unwrap();
        assert_eq!((zp.rho, zp.c), (1.0, 10.0));
        assert_eq!((cals[0].alpha, cals[0].beta), (2.0, 3.0));

        let (zp, cals) = recover_parameters(&[1.0, 0.0], 0).unwrap();
        assert_eq!((zp.rho, zp.c), (0.0, 0.0));
        assert!(cals.is_empty());

        assert!(matches!(
            recover_parameters(&[1e-12, 0.0], 0),
            Err(EstimationError::DegenerateSlope(_))
        ));
        assert!(matches!(
            recover_parameters(&[1.0, 0.0, 1.0], 1),
            Err(EstimationError::ThetaLength(3, 4))
        ));
    }

    #[test]
    fn estimate_variance_examples() {
        assert_eq!(estimate_variance(&[0.0, 0.0, 0.0], 1).unwrap(), 0.0);
        assert_eq!(estimate_variance(&[1.0, -1.0, 1.0, -1.0], 2).unwrap(), 2.0);
        assert_eq!(estimate_variance(&[1.0], 0), Err(EstimationError::ZeroDof));
    }

    #[test]
    fn solve_ls_recovers_theta_without_noise() {
        let theta = [0.5, 5.0, 1.0, -7.0];
        let mut rows = Vec::new();
        for d in 1..=6 {
            let p = 20.0 + 3.0 * d as f64;
            rows.push(obs("S", DeviceKind::ReferenceStation, (0.0, 0.0), slot(d, 6), p, theta[0] * p - theta[1]));
            let q = 25.0 + 2.0 * d as f64;
            rows.push(obs("m", DeviceKind::MicroSensor, (1.0, 0.0), slot(d, 6), q, theta[2] * q + theta[3]));
        }
        let sol = solve_ls(&assemble_design(&rows).unwrap()).unwrap();
        for (a, b) in sol.theta.iter().zip(theta) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(sol.residuals.norm() < 1e-9);
    }

    fn station_scene(c: f64, rho: f64, hours: &[u32]) -> (Vec<Observation>, Vec<Device>) {
        let devices = vec![Device::station("S1", 0.0, 0.0), Device::sensor("m1", 5.0, 0.0)];
        let zp = ZoneParameters::new(c, rho);
        let cal = SensorCalibration::new(2.0, 3.0);
        let mut rows = Vec::new();
        for &h in hours {
            for d in 1..=10 {
                let p = 15.0 + 2.5 * d as f64 + h as f64;
                rows.push(obs("S1", DeviceKind::ReferenceStation, (0.0, 0.0), slot(d, h), apply_bias(&zp, p), p));
                let q = 30.0 - d as f64 + 0.5 * h as f64;
                rows.push(obs("m1", DeviceKind::MicroSensor, (5.0, 0.0), slot(d, h), apply_bias(&zp, q), model::sensor_expected(&cal, q)));
            }
        }
        (rows, devices)
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * b.abs().max(1.0)
    }

    #[test]
    fn stations_only_exact_recovery() {
        let (rows, devices) = station_scene(8.0, 0.5, &[6, 9]);
        let cfg = FitConfig::default();
        let m = fit_stations_only(&rows, &devices, &cfg).unwrap();
        for h in [6, 9] {
            let p = m.zone_parameters(1, h);
            assert!(close(p.c, 8.0) && close(p.rho, 0.5), "{p:?}");
        }
        // hours without data fall back to identity with a flag
        let e = m.zone_estimate(1, 3).unwrap();
        assert!(e.flags.contains(&FitFlag::NoObservations));
        assert!(e.params.is_identity());
    }

    #[test]
    fn identity_data_gives_identity_parameters() {
        let (rows, devices) = station_scene(0.0, 0.0, &[12]);
        let m = fit_stations_only(&rows, &devices, &FitConfig::default()).unwrap();
        let p = m.zone_parameters(1, 12);
        assert!(p.c.abs() < 1e-9 && p.rho.abs() < 1e-9);
    }

    #[test]
    fn constant_initial_map_is_rank_deficient() {
        let rows: Vec<Observation> = (1..=10)
            .map(|d| obs("S1", DeviceKind::ReferenceStation, (0.0, 0.0), slot(d, 1), 11.0, 20.0 + d as f64))
            .collect();
        let devices = vec![Device::station("S1", 0.0, 0.0)];
        let m = fit_stations_only(&rows, &devices, &FitConfig::default()).unwrap();
        let e = m.zone_estimate(1, 1).unwrap();
        assert!(e.flags.contains(&FitFlag::RankDeficient));
        assert!(e.params.is_identity());
    }

    #[test]
    fn sensor_calibration_recovery() {
        let (rows, devices) = station_scene(10.0, 1.0, &[8]);
        let m = fit_no_ms(&rows, &devices, &FitConfig::default()).unwrap();
        let s = m.sensor_estimate("m1", 8).unwrap();
        assert!(close(s.calibration.alpha, 2.0) && close(s.calibration.beta, 3.0), "{s:?}");
        assert!(s.is_usable());

        let pool = fit_pool(&rows, &devices, &FitConfig::default()).unwrap();
        let s = pool.sensor_estimate("m1", 8).unwrap();
        assert!(close(s.calibration.alpha, 2.0) && close(s.calibration.beta, 3.0), "{s:?}");
    }

    #[test]
    fn global_mode_pools_hours() {
        let (rows, devices) = station_scene(4.0, 0.2, &[0, 5, 17]);
        let cfg = FitConfig {
            param_mode: ParamMode::Global,
            ..Default::default()
        };
        let m = fit_pool(&rows, &devices, &cfg).unwrap();
        assert_eq!(m.zones.len(), 1);
        assert_eq!(m.zones[0].hour, None);
        assert_eq!(m.zones[0].estimate.n_obs, 60);
        let p = m.zone_parameters(1, 17);
        assert!(close(p.c, 4.0) && close(p.rho, 0.2));
    }

    #[test]
    fn model_json_shape() {
        let (rows, devices) = station_scene(10.0, 1.0, &[8]);
        let m = fit_pool(&rows, &devices, &FitConfig { hours: vec![8], ..Default::default() }).unwrap();
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(v["strategy"], "pool");
        assert_eq!(v["zones"][0]["generator"], "S1");
        assert!(v["zones"][0]["C"].is_f64());
        assert!(v["zones"][0]["rho"].is_f64());
        assert!(v["zones"][0]["sigma2"].is_f64());
        assert!(v["zones"][0]["flags"].is_array());
        assert!(v["sensors"][0]["alpha"].is_f64());
        assert!(v["sensors"][0]["beta"].is_f64());
        let back = FittedModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }
}
