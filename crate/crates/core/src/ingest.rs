//! Device registries, hourly measurement series and map stacks.
//!
//! File formats:
//! * `devices.csv` with header `id,kind,x,y`, kinds `station` or `sensor`;
//! * `measurements.csv` with header `device_id,timestamp,value_ugm3`, where
//!   the timestamp is `YYYY-MM-DDTHH` and an empty value marks a missing slot;
//! * a map manifest `{"fine": path, "coarse": [{"slot": .., "path": ..}]}`
//!   whose paths are relative to the manifest.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::{Observation, OmittedDevice};
use crate::mapops::{self, MapError, MapStack};
use crate::model::{Device, DeviceKind, Measurement, Point, TimeSlot};
use crate::zoning::{ZoneId, Zoning};

/// Default offset of local time from UTC, in minutes.
pub const DEFAULT_UTC_OFFSET_MINUTES: i32 = 60;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error("{path}: duplicate device id '{id}' (line {line})")]
    DuplicateId { path: String, id: String, line: u64 },
    #[error("{path}: unknown device '{id}' (line {line})")]
    UnknownDevice { path: String, id: String, line: u64 },
    #[error("{path}: duplicate measurement for {id} at {slot} (line {line})")]
    DuplicateSlot {
        path: String,
        id: String,
        slot: TimeSlot,
        line: u64,
    },
    #[error("learn_until {0} is outside the data range")]
    OutOfRange(TimeSlot),
    #[error("dataset holds no measurement")]
    EmptyDataset,
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("map manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error(transparent)]
    Map(#[from] MapError),
}

fn read_text(path: &Path) -> Result<String, IngestError> {
    fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> IngestError {
    IngestError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn check_header(path: &Path, rdr: &mut csv::Reader<&[u8]>, expected: &[&str]) -> Result<(), IngestError> {
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    let found: Vec<&str> = header.iter().map(str::trim).collect();
    if found != expected {
        return Err(parse_err(
            path,
            1,
            format!("expected header '{}', found '{}'", expected.join(","), found.join(",")),
        ));
    }
    Ok(())
}

pub fn parse_devices(text: &str, path: &Path) -> Result<Vec<Device>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    check_header(path, &mut rdr, &["id", "kind", "x", "y"])?;
    let mut devices: Vec<Device> = Vec::new();
    let mut seen = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(parse_err(path, line, "empty device id"));
        }
        let kind = DeviceKind::from_token(&rec[1])
            .ok_or_else(|| parse_err(path, line, format!("unknown kind '{}'", &rec[1])))?;
        let coord = |i: usize| -> Result<f64, IngestError> {
            rec[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(path, line, format!("invalid coordinate '{}'", &rec[i])))
        };
        let (x, y) = (coord(2)?, coord(3)?);
        if !seen.insert(id.clone()) {
            return Err(IngestError::DuplicateId {
                path: path.display().to_string(),
                id,
                line,
            });
        }
        devices.push(Device::new(id, kind, x, y));
    }
    Ok(devices)
}

pub fn load_devices(path: &Path) -> Result<Vec<Device>, IngestError> {
    parse_devices(&read_text(path)?, path)
}

/// Parses a timestamp truncated to the hour. Timestamps carrying an explicit
/// offset (`Z` or `+HH:MM`) are converted to the local offset; others are
/// taken as local time already.
pub fn parse_timestamp(s: &str, utc_offset_minutes: i32) -> Option<TimeSlot> {
    let s = s.trim();
    let (body, explicit) = if let Some(b) = s.strip_suffix('Z') {
        (b, Some(0))
    } else if s.len() > 6 && matches!(s.as_bytes()[s.len() - 6], b'+' | b'-') && s.as_bytes()[s.len() - 3] == b':' {
        let (b, off) = s.split_at(s.len() - 6);
        let sign = if off.starts_with('-') { -1 } else { 1 };
        let h: i32 = off[1..3].parse().ok()?;
        let m: i32 = off[4..6].parse().ok()?;
        (b, Some(sign * (h * 60 + m)))
    } else {
        (s, None)
    };
    let slot: TimeSlot = body.parse().ok()?;
    match explicit {
        None => Some(slot),
        Some(off) => {
            let dt: NaiveDateTime = slot.to_datetime()
                + Duration::minutes((utc_offset_minutes - off) as i64);
            Some(TimeSlot::from_datetime(dt))
        }
    }
}

pub fn parse_measurements(
    text: &str,
    path: &Path,
    registry: &[Device],
    utc_offset_minutes: i32,
) -> Result<Vec<Measurement>, IngestError> {
    let known: BTreeSet<&str> = registry.iter().map(|d| d.id.as_str()).collect();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    check_header(path, &mut rdr, &["device_id", "timestamp", "value_ugm3"])?;
    let mut seen: BTreeSet<(String, TimeSlot)> = BTreeSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = &rec[0];
        if !known.contains(id) {
            return Err(IngestError::UnknownDevice {
                path: path.display().to_string(),
                id: id.to_string(),
                line,
            });
        }
        let slot = parse_timestamp(&rec[1], utc_offset_minutes)
            .ok_or_else(|| parse_err(path, line, format!("invalid timestamp '{}'", &rec[1])))?;
        let value = match &rec[2] {
            "" => None,
            v => Some(
                v.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(path, line, format!("invalid value '{v}'")))?,
            ),
        };
        if !seen.insert((id.to_string(), slot)) {
            return Err(IngestError::DuplicateSlot {
                path: path.display().to_string(),
                id: id.to_string(),
                slot,
                line,
            });
        }
        out.push(Measurement {
            device_id: id.to_string(),
            slot,
            value,
        });
    }
    Ok(out)
}

pub fn load_measurements(
    path: &Path,
    registry: &[Device],
    utc_offset_minutes: i32,
) -> Result<Vec<Measurement>, IngestError> {
    parse_measurements(&read_text(path)?, path, registry, utc_offset_minutes)
}

pub fn devices_to_csv(devices: &[Device]) -> String {
    let mut out = String::from("id,kind,x,y\n");
    for d in devices {
        let _ = writeln!(out, "{},{},{},{}", d.id, d.kind.token(), d.location.x, d.location.y);
    }
    out
}

/// Canonical CSV: rows ordered by device id, then slot.
pub fn measurements_to_csv(measurements: &[Measurement]) -> String {
    let mut sorted: Vec<&Measurement> = measurements.iter().collect();
    sorted.sort_by(|a, b| (&a.device_id, a.slot).cmp(&(&b.device_id, b.slot)));
    let mut out = String::from("device_id,timestamp,value_ugm3\n");
    for m in sorted {
        match m.value {
            Some(v) => {
                let _ = writeln!(out, "{},{},{}", m.device_id, m.slot, v);
            }
            None => {
                let _ = writeln!(out, "{},{},", m.device_id, m.slot);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseEntry {
    pub slot: TimeSlot,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapManifest {
    pub fine: PathBuf,
    pub coarse: Vec<CoarseEntry>,
}

pub fn load_map_stack(manifest_path: &Path) -> Result<MapStack, IngestError> {
    let text = read_text(manifest_path)?;
    let manifest: MapManifest = serde_json::from_str(&text).map_err(|e| IngestError::Manifest {
        path: manifest_path.display().to_string(),
        message: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let fine = mapops::read_grid(&base.join(&manifest.fine))?;
    let mut stack = MapStack::new(fine);
    for entry in manifest.coarse {
        let grid = mapops::read_grid(&base.join(&entry.path))?;
        if stack.coarse.insert(entry.slot, grid).is_some() {
            return Err(IngestError::Manifest {
                path: manifest_path.display().to_string(),
                message: format!("slot {} listed twice", entry.slot),
            });
        }
    }
    Ok(stack)
}

/// Devices, their hourly series, and the maps. Immutable once loaded; views
/// share the map stack.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub devices: Vec<Device>,
    /// Ordered by device id, then slot.
    pub measurements: Vec<Measurement>,
    pub stack: Arc<MapStack>,
    pub omitted: Vec<OmittedDevice>,
}

impl Dataset {
    /// Devices outside the fine map extent are recorded as omitted.
    pub fn new(devices: Vec<Device>, mut measurements: Vec<Measurement>, stack: MapStack) -> Self {
        measurements.sort_by(|a, b| (&a.device_id, a.slot).cmp(&(&b.device_id, b.slot)));
        let omitted = devices
            .iter()
            .filter(|d| stack.fine.cell_of(d.location).is_err())
            .map(|d| OmittedDevice {
                id: d.id.clone(),
                reason: "OutOfExtent".into(),
            })
            .collect();
        Self {
            devices,
            measurements,
            stack: Arc::new(stack),
            omitted,
        }
    }

    pub fn load(
        devices: &Path,
        measurements: &Path,
        maps: &Path,
        utc_offset_minutes: i32,
    ) -> Result<Self, IngestError> {
        let devices = load_devices(devices)?;
        let measurements = load_measurements(measurements, &devices, utc_offset_minutes)?;
        let stack = load_map_stack(maps)?;
        Ok(Self::new(devices, measurements, stack))
    }

    pub fn device(&self, id: &str) -> Option<&Device> {
        self.devices.iter().find(|d| d.id == id)
    }

    /// Devices that can take part in fitting (inside the map extent).
    pub fn usable_devices(&self) -> Vec<Device> {
        let omitted: BTreeSet<&str> = self.omitted.iter().map(|o| o.id.as_str()).collect();
        self.devices
            .iter()
            .filter(|d| !omitted.contains(d.id.as_str()))
            .cloned()
            .collect()
    }

    pub fn stations(&self) -> Vec<&Device> {
        self.devices.iter().filter(|d| d.is_station()).collect()
    }

    /// First and last slots holding a measurement row.
    pub fn slot_range(&self) -> Option<(TimeSlot, TimeSlot)> {
        let first = self.measurements.iter().map(|m| m.slot).min()?;
        let last = self.measurements.iter().map(|m| m.slot).max()?;
        Some((first, last))
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    /// Same devices and maps, measurements filtered.
    pub fn filtered(&self, keep: impl Fn(&Measurement) -> bool) -> Dataset {
        Dataset {
            devices: self.devices.clone(),
            measurements: self.measurements.iter().filter(|m| keep(m)).cloned().collect(),
            stack: Arc::clone(&self.stack),
            omitted: self.omitted.clone(),
        }
    }

    /// Dataset with device `id` and all its measurements removed.
    pub fn without_device(&self, id: &str) -> Dataset {
        Dataset {
            devices: self.devices.iter().filter(|d| d.id != id).cloned().collect(),
            measurements: self
                .measurements
                .iter()
                .filter(|m| m.device_id != id)
                .cloned()
                .collect(),
            stack: Arc::clone(&self.stack),
            omitted: self.omitted.iter().filter(|o| o.id != id).cloned().collect(),
        }
    }

    /// Measurements of one device keyed by slot.
    pub fn series(&self, id: &str) -> BTreeMap<TimeSlot, Option<f64>> {
        self.measurements
            .iter()
            .filter(|m| m.device_id == id)
            .map(|m| (m.slot, m.value))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub learn: Dataset,
    pub test: Dataset,
}

/// Learning view: slots up to and including `learn_until`; test view: the rest.
pub fn split_periods(dataset: &Dataset, learn_until: TimeSlot) -> Result<Split, IngestError> {
    let (first, last) = dataset.slot_range().ok_or(IngestError::EmptyDataset)?;
    if learn_until < first || learn_until > last {
        return Err(IngestError::OutOfRange(learn_until));
    }
    Ok(Split {
        learn: dataset.filtered(|m| m.slot <= learn_until),
        test: dataset.filtered(|m| m.slot > learn_until),
    })
}

/// Observations built from a dataset view, with bookkeeping of what was
/// left out.
#[derive(Debug, Clone, Default)]
pub struct ObservationSet {
    pub rows: Vec<Observation>,
    pub omitted: Vec<OmittedDevice>,
    pub missing_values: usize,
    /// Measurements whose slot has no coarse map.
    pub missing_map: usize,
    /// Measurements at a nodata cell of the initial map.
    pub nodata: usize,
}

impl ObservationSet {
    /// Rows grouped by zone and hour of the day.
    pub fn by_zone_hour(&self, zoning: &Zoning) -> BTreeMap<(ZoneId, u8), Vec<Observation>> {
        let mut out: BTreeMap<(ZoneId, u8), Vec<Observation>> = BTreeMap::new();
        for o in &self.rows {
            out.entry((zoning.assign(o.location), o.slot.hour()))
                .or_default()
                .push(o.clone());
        }
        out
    }
}

/// Pairs every available measurement with the initial-map value at the
/// device location and slot.
pub fn build_observations(view: &Dataset) -> ObservationSet {
    let devices: HashMap<&str, &Device> = view.devices.iter().map(|d| (d.id.as_str(), d)).collect();
    let omitted: BTreeSet<&str> = view.omitted.iter().map(|o| o.id.as_str()).collect();
    let mut set = ObservationSet {
        omitted: view.omitted.clone(),
        ..Default::default()
    };
    for m in &view.measurements {
        if omitted.contains(m.device_id.as_str()) {
            continue;
        }
        let Some(dev) = devices.get(m.device_id.as_str()) else {
            continue;
        };
        let Some(x) = m.value else {
            set.missing_values += 1;
            continue;
        };
        match view.stack.initial_at(&m.slot, dev.location) {
            Ok(Some(p_tilde)) => set.rows.push(Observation {
                device_id: dev.id.clone(),
                kind: dev.kind,
                location: dev.location,
                slot: m.slot,
                x,
                p_tilde,
            }),
            Ok(None) => set.nodata += 1,
            Err(MapError::MissingSlot(_)) => set.missing_map += 1,
            Err(_) => set.nodata += 1,
        }
    }
    set
}

/// Initial-map value at a point, `None` when unavailable.
pub fn initial_value(stack: &MapStack, slot: &TimeSlot, p: Point) -> Option<f64> {
    stack.initial_at(slot, p).ok().flatten()
}
