//! Constancy zones as Voronoi cells.
//!
//! Cells are never materialized as polygons: a point belongs to the zone of
//! its nearest generator (Euclidean distance, ties to the smallest device id).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Device, DeviceKind, Point};

/// 1-based zone index.
pub type ZoneId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ZoningError {
    #[error("cannot build zones from an empty set of generators")]
    EmptyNetwork,
    #[error("generators {0} and {1} share the same location")]
    DuplicateLocation(String, String),
    #[error("generator {0} is not a reference station (stations-only zoning)")]
    NotAStation(String),
    #[error("generator {0} has a non-finite location")]
    NonFiniteLocation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZoningMode {
    StationsOnly,
    AllDevices,
}

impl ZoningMode {
    pub fn token(&self) -> &'static str {
        match self {
            ZoningMode::StationsOnly => "stations",
            ZoningMode::AllDevices => "all",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        match s {
            "stations" | "stations_only" => Some(ZoningMode::StationsOnly),
            "all" | "all_devices" => Some(ZoningMode::AllDevices),
            _ => None,
        }
    }
}

/// Point location over a partition of the plane.
///
/// Only the Voronoi partition ships; other partitions (by pollution level,
/// distance to roads) would implement this trait.
pub trait Partition {
    fn zone_count(&self) -> usize;
    fn assign(&self, point: Point) -> ZoneId;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: ZoneId,
    pub generator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zoning {
    pub mode: ZoningMode,
    pub zones: Vec<Zone>,
    pub generators: Vec<Device>,
}

impl Zoning {
    /// Zone `k` is generated by `generators[k - 1]`.
    pub fn build(generators: Vec<Device>, mode: ZoningMode) -> Result<Self, ZoningError> {
        if generators.is_empty() {
            return Err(ZoningError::EmptyNetwork);
        }
        for g in &generators {
            if !g.location.is_finite() {
                return Err(ZoningError::NonFiniteLocation(g.id.clone()));
            }
            if mode == ZoningMode::StationsOnly && g.kind != DeviceKind::ReferenceStation {
                return Err(ZoningError::NotAStation(g.id.clone()));
            }
        }
        for (i, a) in generators.iter().enumerate() {
            for b in &generators[i + 1..] {
                if a.location == b.location {
                    return Err(ZoningError::DuplicateLocation(a.id.clone(), b.id.clone()));
                }
            }
        }
        let zones = generators
            .iter()
            .enumerate()
            .map(|(i, g)| Zone {
                id: i + 1,
                generator: g.id.clone(),
            })
            .collect();
        Ok(Self {
            mode,
            zones,
            generators,
        })
    }

    /// Voronoi of the reference stations in `devices`.
    pub fn stations_only(devices: &[Device]) -> Result<Self, ZoningError> {
        let stations = devices.iter().filter(|d| d.is_station()).cloned().collect();
        Self::build(stations, ZoningMode::StationsOnly)
    }

    /// Voronoi of every device.
    pub fn all_devices(devices: &[Device]) -> Result<Self, ZoningError> {
        Self::build(devices.to_vec(), ZoningMode::AllDevices)
    }

    pub fn for_mode(devices: &[Device], mode: ZoningMode) -> Result<Self, ZoningError> {
        match mode {
            ZoningMode::StationsOnly => Self::stations_only(devices),
            ZoningMode::AllDevices => Self::all_devices(devices),
        }
    }

    pub fn len(&self) -> usize {
        self.zones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zones.is_empty()
    }

    pub fn generator(&self, zone: ZoneId) -> &Device {
        &self.generators[zone - 1]
    }

    /// Zone whose generator is the device `id`, if any.
    pub fn zone_of_generator(&self, id: &str) -> Option<ZoneId> {
        self.generators.iter().position(|g| g.id == id).map(|i| i + 1)
    }

    pub fn assign(&self, point: Point) -> ZoneId {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, g) in self.generators.iter().enumerate() {
            let d = g.location.dist2(&point);
            if d < best_d || (d == best_d && g.id < self.generators[best].id) {
                best = i;
                best_d = d;
            }
        }
        best + 1
    }
}

impl Partition for Zoning {
    fn zone_count(&self) -> usize {
        self.len()
    }

    fn assign(&self, point: Point) -> ZoneId {
        Zoning::assign(self, point)
    }
}

/// Outcome of the "every zone holds a reference station" check.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityReport {
    /// Zones without any reference station.
    pub offending_zones: Vec<ZoneId>,
    /// Devices located in offending zones; they cannot take part in fitting.
    pub omitted_devices: Vec<String>,
}

impl IdentifiabilityReport {
    pub fn is_ok(&self) -> bool {
        self.offending_zones.is_empty()
    }
}

pub fn validate_identifiability(zoning: &Zoning, devices: &[Device]) -> IdentifiabilityReport {
    let with_station: BTreeSet<ZoneId> = devices
        .iter()
        .filter(|d| d.is_station())
        .map(|d| zoning.assign(d.location))
        .collect();
    let offending_zones: Vec<ZoneId> = (1..=zoning.len())
        .filter(|k| !with_station.contains(k))
        .collect();
    let omitted_devices = devices
        .iter()
        .filter(|d| !with_station.contains(&zoning.assign(d.location)))
        .map(|d| d.id.clone())
        .collect();
    IdentifiabilityReport {
        offending_zones,
        omitted_devices,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ZoneRoster {
    pub zone: ZoneId,
    pub stations: Vec<String>,
    pub sensors: Vec<String>,
}

/// Devices grouped by zone, in zone order; `J(k)` is `sensors.len()`.
pub fn device_roster(zoning: &Zoning, devices: &[Device]) -> Vec<ZoneRoster> {
    let mut rosters: Vec<ZoneRoster> = (1..=zoning.len())
        .map(|zone| ZoneRoster {
            zone,
            ..Default::default()
        })
        .collect();
    for d in devices {
        let r = &mut rosters[zoning.assign(d.location) - 1];
        match d.kind {
            DeviceKind::ReferenceStation => r.stations.push(d.id.clone()),
            DeviceKind::MicroSensor => r.sensors.push(d.id.clone()),
        }
    }
    rosters
}
