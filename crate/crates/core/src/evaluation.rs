//! RMSE scores, leave-one-out cross-validation and report tables.
//!
//! Scores only use reference-station measurements. Missing slots are dropped
//! pairwise and counted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::{fit, EstimationError, FitConfig, FitFlag, FittedModel, Strategy};
use crate::ingest::{self, build_observations, Dataset, IngestError};
use crate::model::{Device, TimeSlot};
use crate::zoning::ZoneId;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no pair of predicted and observed values")]
    EmptySeries,
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no eligible device left to stand in for {0}")]
    NoEligibleDevice(String),
    #[error("cross-validation needs at least two reference stations, found {0}")]
    TooFewStations(usize),
    #[error("the test period holds no station measurement")]
    EmptyTestPeriod,
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// Root mean square difference over the slots where both series hold a
/// value.
pub fn rmse(pred: &[Option<f64>], obs: &[Option<f64>]) -> Result<f64, EvalError> {
    if pred.len() != obs.len() {
        return Err(EvalError::LengthMismatch(pred.len(), obs.len()));
    }
    let pairs: Vec<(f64, f64)> = pred
        .iter()
        .zip(obs)
        .filter_map(|(p, o)| Some(((*p)?, (*o)?)))
        .collect();
    rmse_pairs(&pairs)
}

pub fn rmse_pairs(pairs: &[(f64, f64)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptySeries);
    }
    let sse: f64 = pairs.iter().map(|(p, o)| (p - o) * (p - o)).sum();
    Ok((sse / pairs.len() as f64).sqrt())
}

/// What produces the predictions being scored.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    /// The uncorrected initial map.
    Initial,
    Corrected(&'a FittedModel),
}

impl Predictor<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            Predictor::Initial => "initial",
            Predictor::Corrected(m) => m.strategy.token(),
        }
    }
}

/// Predicted/observed pairs at one station, bucketed by hour.
#[derive(Debug, Clone, Default)]
struct StationPairs {
    by_hour: BTreeMap<u8, Vec<(f64, f64)>>,
    clamp_events: usize,
    missing: usize,
}

/// Pairs at station `target`, using the parameters of `zone` when given
/// (parameter transfer) and the zone containing the station otherwise.
fn station_pairs(
    test: &Dataset,
    target: &Device,
    predictor: Predictor<'_>,
    zone: Option<ZoneId>,
    hours: &BTreeSet<u8>,
    clamp: bool,
) -> StationPairs {
    let mut out = StationPairs::default();
    for m in test.measurements.iter().filter(|m| m.device_id == target.id) {
        let h = m.slot.hour();
        if !hours.contains(&h) {
            continue;
        }
        let (Some(obs), Some(p_tilde)) = (
            m.value,
            ingest::initial_value(&test.stack, &m.slot, target.location),
        ) else {
            out.missing += 1;
            continue;
        };
        let pred = match predictor {
            Predictor::Initial => Some(p_tilde),
            Predictor::Corrected(model) => {
                let zone = zone.unwrap_or_else(|| model.zoning.assign(target.location));
                match crate::model::correct(&model.zone_parameters(zone, h), p_tilde, clamp) {
                    Ok(c) => {
                        out.clamp_events += c.clamped as usize;
                        Some(c.value)
                    }
                    Err(_) => None,
                }
            }
        };
        match pred {
            Some(p) => out.by_hour.entry(h).or_default().push((p, obs)),
            None => out.missing += 1,
        }
    }
    out
}

fn hour_set(hours: &[u8]) -> BTreeSet<u8> {
    hours.iter().copied().collect()
}

/// Usable reference stations in registry order.
fn scored_stations(ds: &Dataset) -> Vec<Device> {
    ds.usable_devices().into_iter().filter(|d| d.is_station()).collect()
}

/// RMSE table of one predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub method: String,
    /// Pooled over stations, aligned with `EvaluationReport::hours`; `None`
    /// when the hour has no test pair.
    pub by_hour: Vec<Option<f64>>,
    /// Overall RMSE per station, aligned with `EvaluationReport::stations`.
    pub by_station: Vec<Option<f64>>,
    /// `by_station_hour[station][hour]`.
    pub by_station_hour: Vec<Vec<Option<f64>>>,
    pub missing_hours: Vec<u8>,
    pub clamp_events: usize,
    pub pairs: usize,
    pub dropped: usize,
}

/// Test-period scores of the initial map and of each fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub hours: Vec<u8>,
    pub stations: Vec<String>,
    pub methods: Vec<MethodScores>,
}

impl EvaluationReport {
    pub fn method(&self, label: &str) -> Option<&MethodScores> {
        self.methods.iter().find(|m| m.method == label)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn score(
    test: &Dataset,
    stations: &[Device],
    predictor: Predictor<'_>,
    hours: &[u8],
    clamp: bool,
) -> MethodScores {
    let set = hour_set(hours);
    let per_station: Vec<StationPairs> = stations
        .iter()
        .map(|s| station_pairs(test, s, predictor, None, &set, clamp))
        .collect();
    let by_hour: Vec<Option<f64>> = hours
        .iter()
        .map(|h| {
            let pooled: Vec<(f64, f64)> = per_station
                .iter()
                .flat_map(|p| p.by_hour.get(h).into_iter().flatten().copied())
                .collect();
            rmse_pairs(&pooled).ok()
        })
        .collect();
    let by_station_hour: Vec<Vec<Option<f64>>> = per_station
        .iter()
        .map(|p| {
            hours
                .iter()
                .map(|h| p.by_hour.get(h).and_then(|v| rmse_pairs(v).ok()))
                .collect()
        })
        .collect();
    let by_station = per_station
        .iter()
        .map(|p| {
            let all: Vec<(f64, f64)> = p.by_hour.values().flatten().copied().collect();
            rmse_pairs(&all).ok()
        })
        .collect();
    let missing_hours = hours
        .iter()
        .zip(&by_hour)
        .filter(|(_, v)| v.is_none())
        .map(|(h, _)| *h)
        .collect();
    MethodScores {
        method: predictor.label().to_string(),
        by_hour,
        by_station,
        by_station_hour,
        missing_hours,
        clamp_events: per_station.iter().map(|p| p.clamp_events).sum(),
        pairs: per_station
            .iter()
            .map(|p| p.by_hour.values().map(Vec::len).sum::<usize>())
            .sum(),
        dropped: per_station.iter().map(|p| p.missing).sum(),
    }
}

/// Per-hour and per-station RMSE of one predictor on the test view.
pub fn rmse_by_hour(test: &Dataset, predictor: Predictor<'_>, hours: &[u8], clamp: bool) -> MethodScores {
    score(test, &scored_stations(test), predictor, hours, clamp)
}

/// Scores the initial map and every model on the test view.
pub fn evaluate(
    test: &Dataset,
    models: &[FittedModel],
    hours: &[u8],
    clamp: bool,
) -> Result<EvaluationReport, EvalError> {
    let stations = scored_stations(test);
    let hours: Vec<u8> = hour_set(hours).into_iter().collect();
    let initial = score(test, &stations, Predictor::Initial, &hours, clamp);
    if initial.pairs == 0 {
        return Err(EvalError::EmptyTestPeriod);
    }
    let mut methods = vec![initial];
    methods.extend(
        models
            .iter()
            .map(|m| score(test, &stations, Predictor::Corrected(m), &hours, clamp)),
    );
    Ok(EvaluationReport {
        hours,
        stations: stations.into_iter().map(|s| s.id).collect(),
        methods,
    })
}

/// Device whose zone parameters stand in for the held-out `target`.
///
/// `no_ms` only transfers from other reference stations; the other
/// strategies may also use any sensor in `usable_sensors`. Ties go to the
/// smallest id.
pub fn nearest_same_type<'a>(
    devices: &'a [Device],
    target: &Device,
    strategy: Strategy,
    usable_sensors: &BTreeSet<String>,
) -> Result<&'a Device, EvalError> {
    devices
        .iter()
        .filter(|d| d.id != target.id)
        .filter(|d| match strategy {
            Strategy::NoMs => d.is_station(),
            Strategy::MsAsSta | Strategy::Pool => {
                d.is_station() || usable_sensors.contains(&d.id)
            }
        })
        .min_by(|a, b| {
            a.location
                .dist2(&target.location)
                .total_cmp(&b.location.dist2(&target.location))
                .then_with(|| a.id.cmp(&b.id))
        })
        .ok_or_else(|| EvalError::NoEligibleDevice(target.id.clone()))
}

/// Learning data of the fold that holds out `station`.
pub fn fold_dataset(learn: &Dataset, station: &str) -> Dataset {
    learn.without_device(station)
}

/// One held-out station under one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvFold {
    pub station: String,
    pub strategy: Strategy,
    /// Device whose zone parameters were transferred.
    pub nearest: String,
    pub zone: ZoneId,
    /// `Err^(-i)(h)`, aligned with `CvReport::hours`.
    pub err_by_hour: Vec<Option<f64>>,
    /// RMSE over every test pair of the station.
    pub overall: Option<f64>,
    pub flags: BTreeMap<FitFlag, usize>,
    pub clamp_events: usize,
    pub pairs: usize,
    pub dropped: usize,
}

/// Initial-map scores of one station over the test period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialScores {
    pub station: String,
    pub err_by_hour: Vec<Option<f64>>,
    pub overall: Option<f64>,
}

/// Hour-wise aggregate over folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvAggregate {
    pub method: String,
    /// `Err(h)`: sum over held-out stations.
    pub err_sum: Vec<Option<f64>>,
    /// Same sum divided by the number of contributing stations.
    pub err_mean: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub hours: Vec<u8>,
    pub stations: Vec<String>,
    pub strategies: Vec<Strategy>,
    pub learn_until: TimeSlot,
    /// Ordered by station (registry order), then strategy.
    pub folds: Vec<CvFold>,
    pub initial: Vec<InitialScores>,
    pub aggregates: Vec<CvAggregate>,
}

/// Sum and mean over the available entries; `None` when there are none.
fn sum_and_mean<'a>(values: impl Iterator<Item = &'a Option<f64>>) -> (Option<f64>, Option<f64>) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    if n == 0 {
        (None, None)
    } else {
        (Some(sum), Some(sum / n as f64))
    }
}

impl CvReport {
    pub fn fold(&self, station: &str, strategy: Strategy) -> Option<&CvFold> {
        self.folds
            .iter()
            .find(|f| f.station == station && f.strategy == strategy)
    }

    pub fn folds_of(&self, strategy: Strategy) -> impl Iterator<Item = &CvFold> {
        self.folds.iter().filter(move |f| f.strategy == strategy)
    }

    pub fn aggregate(&self, method: &str) -> Option<&CvAggregate> {
        self.aggregates.iter().find(|a| a.method == method)
    }

    /// `Err(h)` recomputed from the folds.
    pub fn err_sum(&self, strategy: Strategy) -> Vec<Option<f64>> {
        (0..self.hours.len())
            .map(|i| sum_and_mean(self.folds_of(strategy).map(|f| &f.err_by_hour[i])).0)
            .collect()
    }

    /// Mean over stations of the overall CV RMSE.
    pub fn mean_overall(&self, strategy: Strategy) -> Option<f64> {
        sum_and_mean(self.folds_of(strategy).map(|f| &f.overall)).1
    }

    pub fn mean_initial(&self) -> Option<f64> {
        sum_and_mean(self.initial.iter().map(|i| &i.overall)).1
    }

    pub fn rows(&self) -> Vec<TableRow> {
        self.initial
            .iter()
            .map(|init| TableRow {
                station: init.station.clone(),
                initial: init.overall,
                scores: self
                    .strategies
                    .iter()
                    .map(|s| (*s, self.fold(&init.station, *s).and_then(|f| f.overall)))
                    .collect(),
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Leave-one-out cross-validation over the reference stations.
///
/// For each station the learning period is refitted without any of its
/// measurements; the station is then predicted over the test period with
/// the parameters of the zone containing the nearest eligible device.
pub fn loocv(
    dataset: &Dataset,
    strategies: &[Strategy],
    config: &FitConfig,
    learn_until: TimeSlot,
    clamp: bool,
) -> Result<CvReport, EvalError> {
    let split = ingest::split_periods(dataset, learn_until)?;
    let stations = scored_stations(dataset);
    if stations.len() < 2 {
        return Err(EvalError::TooFewStations(stations.len()));
    }
    let hours: Vec<u8> = hour_set(&config.hours).into_iter().collect();
    let set = hour_set(&hours);
    let mut strategies: Vec<Strategy> = strategies.to_vec();
    strategies.sort();
    strategies.dedup();

    let initial: Vec<InitialScores> = stations
        .iter()
        .map(|s| {
            let p = station_pairs(&split.test, s, Predictor::Initial, None, &set, clamp);
            scores_of(&p, &hours).into_initial(s.id.clone())
        })
        .collect();
    if initial.iter().all(|i| i.overall.is_none()) {
        return Err(EvalError::EmptyTestPeriod);
    }

    let folds: Vec<Vec<CvFold>> = stations
        .par_iter()
        .map(|held_out| -> Result<Vec<CvFold>, EvalError> {
            let learn = fold_dataset(&split.learn, &held_out.id);
            let obs = build_observations(&learn);
            let devices = learn.usable_devices();
            strategies
                .iter()
                .map(|strategy| {
                    let model = fit(*strategy, &obs.rows, &devices, config)?;
                    let stand_in =
                        nearest_same_type(&devices, held_out, *strategy, &model.contributing_sensors())?;
                    let zone = model.zoning.assign(stand_in.location);
                    let p = station_pairs(
                        &split.test,
                        held_out,
                        Predictor::Corrected(&model),
                        Some(zone),
                        &set,
                        clamp,
                    );
                    let s = scores_of(&p, &hours);
                    Ok(CvFold {
                        station: held_out.id.clone(),
                        strategy: *strategy,
                        nearest: stand_in.id.clone(),
                        zone,
                        err_by_hour: s.by_hour,
                        overall: s.overall,
                        flags: model.flag_summary(),
                        clamp_events: p.clamp_events,
                        pairs: s.pairs,
                        dropped: p.missing,
                    })
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let folds: Vec<CvFold> = folds.into_iter().flatten().collect();

    let mut report = CvReport {
        hours,
        stations: stations.iter().map(|s| s.id.clone()).collect(),
        strategies,
        learn_until,
        folds,
        initial,
        aggregates: Vec::new(),
    };
    let mut aggregates = Vec::new();
    let agg = |cols: Vec<Vec<&Option<f64>>>| -> (Vec<Option<f64>>, Vec<Option<f64>>) {
        cols.into_iter().map(|c| sum_and_mean(c.into_iter())).unzip()
    };
    let (s, m) = agg(
        (0..report.hours.len())
            .map(|i| report.initial.iter().map(|x| &x.err_by_hour[i]).collect())
            .collect(),
    );
    aggregates.push(CvAggregate {
        method: "initial".into(),
        err_sum: s,
        err_mean: m,
    });
    for strategy in &report.strategies {
        let (s, m) = agg(
            (0..report.hours.len())
                .map(|i| report.folds_of(*strategy).map(|f| &f.err_by_hour[i]).collect())
                .collect(),
        );
        aggregates.push(CvAggregate {
            method: strategy.token().into(),
            err_sum: s,
            err_mean: m,
        });
    }
    report.aggregates = aggregates;
    Ok(report)
}

struct PairScores {
    by_hour: Vec<Option<f64>>,
    overall: Option<f64>,
    pairs: usize,
}

impl PairScores {
    fn into_initial(self, station: String) -> InitialScores {
        InitialScores {
            station,
            err_by_hour: self.by_hour,
            overall: self.overall,
        }
    }
}

fn scores_of(p: &StationPairs, hours: &[u8]) -> PairScores {
    let all: Vec<(f64, f64)> = p.by_hour.values().flatten().copied().collect();
    PairScores {
        by_hour: hours
            .iter()
            .map(|h| p.by_hour.get(h).and_then(|v| rmse_pairs(v).ok()))
            .collect(),
        overall: rmse_pairs(&all).ok(),
        pairs: all.len(),
    }
}

/// Decimals shown in the station table.
pub const DISPLAY_DECIMALS: usize = 2;

/// One line of the station table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub station: String,
    pub initial: Option<f64>,
    pub scores: Vec<(Strategy, Option<f64>)>,
}

impl TableRow {
    /// Strategies reaching the row minimum at the displayed precision; the
    /// initial map never competes.
    pub fn best(&self) -> Vec<Strategy> {
        let shown = |v: f64| (v * 10f64.powi(DISPLAY_DECIMALS as i32)).round();
        let min = self
            .scores
            .iter()
            .filter_map(|(_, v)| v.map(shown))
            .fold(f64::INFINITY, f64::min);
        self.scores
            .iter()
            .filter(|(_, v)| v.map(shown) == Some(min))
            .map(|(s, _)| *s)
            .collect()
    }
}

/// Strategy with the lowest score in the row, smallest column on ties.
pub fn best_method(row: &TableRow) -> Option<Strategy> {
    row.best().into_iter().next()
}

/// Markdown table with columns `station, initial, no_ms, ms_as_sta, pool`
/// (absent strategies dropped); the best strategy of each row in bold.
pub fn render_rows(rows: &[TableRow]) -> String {
    let mut columns: Vec<Strategy> = rows
        .iter()
        .flat_map(|r| r.scores.iter().map(|(s, _)| *s))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    columns.sort();
    let mut out = String::from("| station | initial |");
    for c in &columns {
        let _ = write!(out, " {c} |");
    }
    out.push_str("\n|---|---|");
    for _ in &columns {
        out.push_str("---|");
    }
    out.push('\n');
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.*}", DISPLAY_DECIMALS));
    for row in rows {
        let best = row.best();
        let _ = write!(out, "| {} | {} |", row.station, fmt(row.initial));
        for c in &columns {
            let v = row.scores.iter().find(|(s, _)| s == c).and_then(|(_, v)| *v);
            if v.is_some() && best.contains(c) {
                let _ = write!(out, " **{}** |", fmt(v));
            } else {
                let _ = write!(out, " {} |", fmt(v));
            }
        }
        out.push('\n');
    }
    out
}

pub fn render_report(cv: &CvReport) -> String {
    render_rows(&cv.rows())
}
