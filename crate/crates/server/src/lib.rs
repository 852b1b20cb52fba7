//! HTTP/JSON service over a loaded dataset.
//!
//! Readers work on immutable snapshots: a handler clones the current
//! `Arc<Snapshot>` once and answers from it, so a response never mixes two
//! fits. A single background job may run at a time; when it completes the
//! snapshot pointer is replaced in one step. Every JSON response carries the
//! `fit_id` of the snapshot it was computed from (0 before the first fit).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tower_http::services::ServeDir;
use tracing::{info, warn};

use debias_core::estimation::{fit, FitConfig, FittedModel, ParamMode, Strategy};
use debias_core::evaluation::{self, EvaluationReport};
use debias_core::ingest::{self, build_observations, Dataset};
use debias_core::mapops;
use debias_core::model::{Device, TimeSlot};
use debias_core::zoning::{Zoning, ZoningMode};

/// Status of the background fit job.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum FitStatus {
    Idle,
    Running { fit_id: u64 },
    Failed { fit_id: u64, message: String },
}

/// Parameters of a fit, as requested by the client.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitPlan {
    pub learn_until: TimeSlot,
    pub strategies: Vec<Strategy>,
    pub param_mode: ParamMode,
    pub zoning: ZoningMode,
    pub hours: Vec<u8>,
}

/// Everything a reader may look at, replaced as a whole.
#[derive(Debug, Default)]
pub struct Snapshot {
    pub fit_id: u64,
    pub dataset: Option<Arc<Dataset>>,
    pub plan: Option<FitPlan>,
    pub models: BTreeMap<Strategy, Arc<FittedModel>>,
    /// Test-period scores; `None` when the test period is empty.
    pub evaluation: Option<Arc<EvaluationReport>>,
}

struct Shared {
    snapshot: RwLock<Arc<Snapshot>>,
    status: Mutex<FitStatus>,
    running: AtomicBool,
    last_id: AtomicU64,
    fit_delay: Option<Duration>,
    static_dir: Option<PathBuf>,
}

#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

impl AppState {
    pub fn new(dataset: Option<Dataset>) -> Self {
        let snapshot = Snapshot {
            dataset: dataset.map(Arc::new),
            ..Default::default()
        };
        Self {
            shared: Arc::new(Shared {
                snapshot: RwLock::new(Arc::new(snapshot)),
                status: Mutex::new(FitStatus::Idle),
                running: AtomicBool::new(false),
                last_id: AtomicU64::new(0),
                fit_delay: None,
                static_dir: None,
            }),
        }
    }

    fn configure(&mut self) -> &mut Shared {
        Arc::get_mut(&mut self.shared).expect("state is configured before it is shared")
    }

    /// Holds every fit job for `delay` before it starts; lets tests observe
    /// the running state.
    pub fn with_fit_delay(mut self, delay: Duration) -> Self {
        self.configure().fit_delay = Some(delay);
        self
    }

    /// Serves the files of `dir` at `/` instead of the built-in page.
    pub fn with_static_dir(mut self, dir: PathBuf) -> Self {
        self.configure().static_dir = Some(dir);
        self
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        Arc::clone(&self.shared.snapshot.read().expect("snapshot lock"))
    }

    pub fn status(&self) -> FitStatus {
        self.shared.status.lock().expect("status lock").clone()
    }

    /// Claims the single writer slot and returns the id of the new fit.
    fn claim(&self) -> Option<u64> {
        self.shared
            .running
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .ok()?;
        let id = self.shared.last_id.fetch_add(1, Ordering::AcqRel) + 1;
        *self.shared.status.lock().expect("status lock") = FitStatus::Running { fit_id: id };
        Some(id)
    }

    fn finish(&self, id: u64, result: Result<Snapshot, String>) {
        match result {
            Ok(mut snap) => {
                snap.fit_id = id;
                *self.shared.snapshot.write().expect("snapshot lock") = Arc::new(snap);
                *self.shared.status.lock().expect("status lock") = FitStatus::Idle;
                info!(fit_id = id, "fit completed");
            }
            Err(message) => {
                warn!(fit_id = id, %message, "fit failed");
                *self.shared.status.lock().expect("status lock") = FitStatus::Failed { fit_id: id, message };
            }
        }
        self.shared.running.store(false, Ordering::Release);
    }

    /// Runs a fit on the calling thread; returns its id.
    pub fn fit_now(&self, plan: FitPlan) -> Result<u64, String> {
        let dataset = self.snapshot().dataset.clone().ok_or("no dataset loaded")?;
        let id = self.claim().ok_or("a fit is already running")?;
        let result = run_fit(&dataset, plan);
        let failed = result.as_ref().err().cloned();
        self.finish(id, result);
        match failed {
            Some(m) => Err(m),
            None => Ok(id),
        }
    }
}

fn run_fit(dataset: &Arc<Dataset>, plan: FitPlan) -> Result<Snapshot, String> {
    let split = ingest::split_periods(dataset, plan.learn_until).map_err(|e| e.to_string())?;
    let obs = build_observations(&split.learn);
    let devices = split.learn.usable_devices();
    let config = FitConfig {
        param_mode: plan.param_mode,
        hours: plan.hours.clone(),
        pool_zoning: plan.zoning,
    };
    let mut models = BTreeMap::new();
    for s in &plan.strategies {
        let m = fit(*s, &obs.rows, &devices, &config).map_err(|e| e.to_string())?;
        models.insert(*s, m);
    }
    let fitted: Vec<FittedModel> = models.values().cloned().collect();
    let evaluation = evaluation::evaluate(&split.test, &fitted, &plan.hours, false)
        .ok()
        .map(Arc::new);
    Ok(Snapshot {
        fit_id: 0,
        dataset: Some(Arc::clone(dataset)),
        plan: Some(plan),
        models: models.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
        evaluation,
    })
}

/// JSON error body tagged with the snapshot's fit id.
fn error(status: StatusCode, fit_id: u64, message: impl Into<String>) -> Response {
    (
        status,
        Json(json!({ "fit_id": fit_id, "error": message.into() })),
    )
        .into_response()
}

fn ok(fit_id: u64, mut body: Map<String, Value>) -> Response {
    body.insert("fit_id".into(), json!(fit_id));
    Json(Value::Object(body)).into_response()
}

fn obj(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/api/devices", get(devices))
        .route("/api/fit", axum::routing::post(post_fit))
        .route("/api/fit/status", get(fit_status))
        .route("/api/parameters", get(parameters))
        .route("/api/map", get(map))
        .route("/api/series", get(series))
        .route("/api/rmse", get(rmse));
    let app = match &state.shared.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(index)),
    };
    app.with_state(state)
}

/// Binds `port` on all interfaces and serves until the process stops.
pub async fn serve(state: AppState, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    info!(port, "listening");
    axum::serve(listener, router(state)).await
}

async fn index() -> Html<&'static str> {
    Html(concat!(
        "<!doctype html><html><head><meta charset=\"utf-8\"><title>debias</title></head>",
        "<body><h1>debias</h1><p>The JSON API is served under <code>/api/</code>. ",
        "Start the server with <code>--static-dir</code> to serve a client bundle here.</p>",
        "</body></html>"
    ))
}

fn device_zone(models: &BTreeMap<Strategy, Arc<FittedModel>>, d: &Device) -> Map<String, Value> {
    models
        .iter()
        .map(|(s, m)| (s.token().to_string(), json!(m.zoning.assign(d.location))))
        .collect()
}

async fn devices(State(st): State<AppState>) -> Response {
    let snap = st.snapshot();
    let Some(ds) = &snap.dataset else {
        return error(StatusCode::CONFLICT, snap.fit_id, "no dataset loaded");
    };
    let base = Zoning::stations_only(&ds.usable_devices()).ok();
    let list: Vec<Value> = ds
        .devices
        .iter()
        .map(|d| {
            let omitted = ds.omitted.iter().find(|o| o.id == d.id);
            json!({
                "id": d.id,
                "kind": d.kind.token(),
                "x": d.location.x,
                "y": d.location.y,
                "zone": if omitted.is_some() { None } else { base.as_ref().map(|z| z.assign(d.location)) },
                "zones": device_zone(&snap.models, d),
                "omitted": omitted.is_some(),
                "reason": omitted.map(|o| o.reason.clone()),
            })
        })
        .collect();
    ok(snap.fit_id, obj(json!({ "devices": list })))
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum StrategyChoice {
    One(String),
    Many(Vec<String>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitRequest {
    learn_until: Option<String>,
    strategy: Option<StrategyChoice>,
    param_mode: Option<String>,
    zoning: Option<String>,
    hours: Option<Vec<u8>>,
}

fn parse_plan(body: &Value, ds: &Dataset) -> Result<FitPlan, String> {
    let req: FitRequest = serde_json::from_value(body.clone()).map_err(|e| e.to_string())?;
    let (first, last) = ds.slot_range().ok_or("dataset holds no measurement")?;
    let learn_until = match &req.learn_until {
        Some(s) => s
            .parse::<TimeSlot>()
            .map_err(|e| format!("learn_until: {e}"))?,
        None => last,
    };
    if learn_until < first || learn_until > last {
        return Err(format!("learn_until {learn_until} is outside {first} .. {last}"));
    }
    let tokens: Vec<String> = match req.strategy {
        None => vec!["all".into()],
        Some(StrategyChoice::One(s)) => vec![s],
        Some(StrategyChoice::Many(v)) => v,
    };
    let mut strategies = Vec::new();
    for t in tokens {
        if t == "all" {
            strategies.extend(Strategy::ALL);
        } else {
            strategies.push(t.parse::<Strategy>()?);
        }
    }
    strategies.sort();
    strategies.dedup();
    if strategies.is_empty() {
        return Err("no strategy selected".into());
    }
    let param_mode = match req.param_mode.as_deref() {
        None => ParamMode::Hourly,
        Some(s) => s.parse::<ParamMode>()?,
    };
    let zoning = match req.zoning.as_deref() {
        None => ZoningMode::StationsOnly,
        Some(s) => ZoningMode::from_token(s).ok_or_else(|| format!("unknown zoning '{s}'"))?,
    };
    let hours = req.hours.unwrap_or_else(|| (0..24).collect());
    if hours.is_empty() || hours.iter().any(|h| *h > 23) {
        return Err("hours must be a non-empty subset of 0..=23".into());
    }
    Ok(FitPlan {
        learn_until,
        strategies,
        param_mode,
        zoning,
        hours,
    })
}

async fn post_fit(State(st): State<AppState>, body: axum::body::Bytes) -> Response {
    let snap = st.snapshot();
    let Some(ds) = snap.dataset.clone() else {
        return error(StatusCode::CONFLICT, snap.fit_id, "no dataset loaded");
    };
    let body: Value = if body.is_empty() {
        json!({})
    } else {
        match serde_json::from_slice(&body) {
            Ok(v) => v,
            Err(e) => return error(StatusCode::BAD_REQUEST, snap.fit_id, e.to_string()),
        }
    };
    let plan = match parse_plan(&body, &ds) {
        Ok(p) => p,
        Err(m) => return error(StatusCode::BAD_REQUEST, snap.fit_id, m),
    };
    let Some(id) = st.claim() else {
        return error(StatusCode::CONFLICT, snap.fit_id, "FitInProgress");
    };
    let job = st.clone();
    let delay = st.shared.fit_delay;
    tokio::task::spawn_blocking(move || {
        if let Some(d) = delay {
            std::thread::sleep(d);
        }
        let result = run_fit(&ds, plan);
        job.finish(id, result);
    });
    (
        StatusCode::ACCEPTED,
        Json(json!({
            "fit_id": snap.fit_id,
            "pending_fit_id": id,
            "status_url": "/api/fit/status",
        })),
    )
        .into_response()
}

async fn fit_status(State(st): State<AppState>) -> Response {
    let snap = st.snapshot();
    let status = st.status();
    let mut body = obj(json!({ "status": status }));
    if let Some(plan) = &snap.plan {
        body.insert("plan".into(), json!(plan));
    }
    ok(snap.fit_id, body)
}

fn no_fit(snap: &Snapshot) -> Option<Response> {
    if snap.dataset.is_none() {
        return Some(error(StatusCode::CONFLICT, snap.fit_id, "no dataset loaded"));
    }
    if snap.models.is_empty() {
        return Some(error(StatusCode::CONFLICT, snap.fit_id, "no fit available"));
    }
    None
}

#[derive(Debug, Deserialize)]
struct ParamQuery {
    device: String,
    hour: Option<u8>,
}

async fn parameters(State(st): State<AppState>, Query(q): Query<ParamQuery>) -> Response {
    let snap = st.snapshot();
    if let Some(r) = no_fit(&snap) {
        return r;
    }
    let ds = snap.dataset.as_ref().expect("checked");
    let Some(dev) = ds.device(&q.device) else {
        return error(StatusCode::NOT_FOUND, snap.fit_id, format!("unknown device {}", q.device));
    };
    if let Some(h) = q.hour {
        if h > 23 {
            return error(StatusCode::BAD_REQUEST, snap.fit_id, format!("hour {h} out of range"));
        }
    }
    let mut per_strategy = Map::new();
    for (s, m) in &snap.models {
        let zone = m.zoning.assign(dev.location);
        let records: Vec<Value> = m
            .zones
            .iter()
            .filter(|r| r.id == zone)
            .filter(|r| match (q.hour, r.hour) {
                (Some(h), Some(rh)) => h == rh,
                _ => true,
            })
            .map(|r| json!(r))
            .collect();
        let mut entry = obj(json!({
            "zone": zone,
            "generator": m.zoning.generator(zone).id,
            "param_mode": m.param_mode,
        }));
        entry.insert(
            "params".into(),
            if q.hour.is_some() {
                records.into_iter().next().unwrap_or(Value::Null)
            } else {
                Value::Array(records)
            },
        );
        if !dev.is_station() {
            let cals: Vec<Value> = m
                .sensors
                .iter()
                .filter(|r| r.id == dev.id)
                .filter(|r| match (q.hour, r.hour) {
                    (Some(h), Some(rh)) => h == rh,
                    _ => true,
                })
                .map(|r| json!(r))
                .collect();
            entry.insert(
                "calibration".into(),
                if q.hour.is_some() {
                    cals.into_iter().next().unwrap_or(Value::Null)
                } else {
                    Value::Array(cals)
                },
            );
        }
        per_strategy.insert(s.token().into(), Value::Object(entry));
    }
    ok(
        snap.fit_id,
        obj(json!({
            "device": dev.id,
            "kind": dev.kind.token(),
            "strategies": per_strategy,
        })),
    )
}

/// `initial` or a strategy token.
fn parse_mode(mode: &str) -> Result<Option<Strategy>, String> {
    if mode == "initial" {
        Ok(None)
    } else {
        mode.parse::<Strategy>().map(Some)
    }
}

#[derive(Debug, Deserialize)]
struct MapQuery {
    slot: String,
    mode: Option<String>,
    clamp: Option<u8>,
    stride: Option<usize>,
}

async fn map(State(st): State<AppState>, Query(q): Query<MapQuery>) -> Response {
    let snap = st.snapshot();
    let Some(ds) = &snap.dataset else {
        return error(StatusCode::CONFLICT, snap.fit_id, "no dataset loaded");
    };
    let slot = match q.slot.parse::<TimeSlot>() {
        Ok(s) => s,
        Err(e) => return error(StatusCode::BAD_REQUEST, snap.fit_id, format!("slot: {e}")),
    };
    let mode = match parse_mode(q.mode.as_deref().unwrap_or("initial")) {
        Ok(m) => m,
        Err(e) => return error(StatusCode::BAD_REQUEST, snap.fit_id, e),
    };
    let stride = q.stride.unwrap_or(1);
    if stride == 0 {
        return error(StatusCode::BAD_REQUEST, snap.fit_id, "stride must be positive");
    }
    let clamp = q.clamp.unwrap_or(0) != 0;
    let initial = match mapops::combine_initial(&ds.stack, &slot) {
        Ok(g) => g,
        Err(e) => return error(StatusCode::NOT_FOUND, snap.fit_id, e.to_string()),
    };
    let (grid, clamp_events) = match mode {
        None => {
            let mut g = initial;
            let mut n = 0;
            if clamp {
                for v in g.values.iter_mut() {
                    if *v != g.nodata && *v < 0.0 {
                        *v = 0.0;
                        n += 1;
                    }
                }
            }
            (g, n)
        }
        Some(s) => {
            let Some(m) = snap.models.get(&s) else {
                return error(StatusCode::CONFLICT, snap.fit_id, format!("no {s} fit available"));
            };
            let c = mapops::correct_map(&initial, m, slot.hour(), clamp);
            let n = c.total_clamped();
            (c.grid, n)
        }
    };
    let grid = grid.downsample(stride);
    let rows: Vec<Vec<Option<f64>>> = grid
        .values
        .chunks(grid.ncols)
        .map(|row| row.iter().map(|v| grid.value_of(*v)).collect())
        .collect();
    ok(
        snap.fit_id,
        obj(json!({
            "slot": slot.to_string(),
            "mode": q.mode.as_deref().unwrap_or("initial"),
            "header": {
                "ncols": grid.ncols,
                "nrows": grid.nrows,
                "xllcorner": grid.xllcorner,
                "yllcorner": grid.yllcorner,
                "cellsize": grid.cellsize,
            },
            "values": rows,
            "clamp_events": clamp_events,
        })),
    )
}

trait NodataAware {
    fn value_of(&self, v: f64) -> Option<f64>;
}

impl NodataAware for mapops::GridMap {
    fn value_of(&self, v: f64) -> Option<f64> {
        (!self.is_nodata(v)).then_some(v)
    }
}

#[derive(Debug, Deserialize)]
struct SeriesQuery {
    device: String,
    mode: Option<String>,
    avg24: Option<u8>,
}

fn mean_by_hour(slots: &[TimeSlot], values: &[Option<f64>]) -> Vec<Option<f64>> {
    let mut acc = [(0.0f64, 0usize); 24];
    for (s, v) in slots.iter().zip(values) {
        if let Some(v) = v {
            let a = &mut acc[s.hour() as usize];
            a.0 += v;
            a.1 += 1;
        }
    }
    acc.iter()
        .map(|(sum, n)| (*n > 0).then(|| sum / *n as f64))
        .collect()
}

async fn series(State(st): State<AppState>, Query(q): Query<SeriesQuery>) -> Response {
    let snap = st.snapshot();
    let Some(ds) = &snap.dataset else {
        return error(StatusCode::CONFLICT, snap.fit_id, "no dataset loaded");
    };
    let Some(dev) = ds.device(&q.device) else {
        return error(StatusCode::NOT_FOUND, snap.fit_id, format!("unknown device {}", q.device));
    };
    let mode_token = q.mode.as_deref().unwrap_or("initial");
    let mode = match parse_mode(mode_token) {
        Ok(m) => m,
        Err(e) => return error(StatusCode::BAD_REQUEST, snap.fit_id, e),
    };
    let model = match mode {
        None => None,
        Some(s) => match snap.models.get(&s) {
            Some(m) => Some(Arc::clone(m)),
            None => return error(StatusCode::CONFLICT, snap.fit_id, format!("no {s} fit available")),
        },
    };
    let raw = ds.series(&dev.id);
    let slots: Vec<TimeSlot> = raw.keys().copied().collect();
    let measured: Vec<Option<f64>> = raw.values().copied().collect();
    let initial: Vec<Option<f64>> = slots
        .iter()
        .map(|s| ingest::initial_value(&ds.stack, s, dev.location))
        .collect();
    let corrected: Vec<Option<f64>> = slots
        .iter()
        .zip(&initial)
        .map(|(s, p)| match (&model, p) {
            (_, None) => None,
            (None, Some(p)) => Some(*p),
            (Some(m), Some(p)) => m.correct_at(dev.location, s.hour(), *p, false).ok().map(|c| c.value),
        })
        .collect();
    let body = if q.avg24.unwrap_or(0) != 0 {
        json!({
            "device": dev.id,
            "mode": mode_token,
            "avg24": true,
            "hours": (0..24).collect::<Vec<u8>>(),
            "measured": mean_by_hour(&slots, &measured),
            "initial": mean_by_hour(&slots, &initial),
            "corrected": mean_by_hour(&slots, &corrected),
        })
    } else {
        json!({
            "device": dev.id,
            "mode": mode_token,
            "avg24": false,
            "slots": slots.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            "measured": measured,
            "initial": initial,
            "corrected": corrected,
        })
    };
    ok(snap.fit_id, obj(body))
}

#[derive(Debug, Deserialize)]
struct RmseQuery {
    scope: Option<String>,
    strategy: Option<String>,
}

async fn rmse(State(st): State<AppState>, Query(q): Query<RmseQuery>) -> Response {
    let snap = st.snapshot();
    if let Some(r) = no_fit(&snap) {
        return r;
    }
    let Some(report) = &snap.evaluation else {
        return error(StatusCode::CONFLICT, snap.fit_id, "the test period is empty");
    };
    let scope = q.scope.as_deref().unwrap_or("hour");
    let mut wanted = vec!["initial".to_string()];
    match q.strategy.as_deref() {
        None | Some("all") => wanted.extend(snap.models.keys().map(|s| s.token().to_string())),
        Some(list) => {
            for t in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                match t.parse::<Strategy>() {
                    Ok(s) if snap.models.contains_key(&s) => wanted.push(s.token().into()),
                    Ok(s) => {
                        return error(StatusCode::CONFLICT, snap.fit_id, format!("no {s} fit available"))
                    }
                    Err(e) => return error(StatusCode::BAD_REQUEST, snap.fit_id, e),
                }
            }
        }
    }
    let keys: Value = match scope {
        "hour" => json!(report.hours),
        "station" => json!(report.stations),
        other => {
            return error(StatusCode::BAD_REQUEST, snap.fit_id, format!("unknown scope '{other}'"))
        }
    };
    let mut series = Map::new();
    for w in &wanted {
        if let Some(m) = report.method(w) {
            let values = if scope == "hour" { &m.by_hour } else { &m.by_station };
            series.insert(w.clone(), json!(values));
        }
    }
    ok(
        snap.fit_id,
        obj(json!({ "scope": scope, "keys": keys, "series": series })),
    )
}
