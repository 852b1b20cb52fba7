//! Measurement and bias algebra.
//!
//! A reference station observes the true concentration plus noise, a
//! micro-sensor observes an affine distortion `alpha * P + beta` plus noise,
//! and the initial map `P~` relates to the truth through a zone-wise affine
//! bias `B = C + rho * P`, so that `P~ = C + (1 + rho) * P`.

use std::fmt;

use chrono::{Duration, NaiveDate, NaiveDateTime, NaiveTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Guard on `|1 + rho|` before dividing by it.
pub const EPSILON_DEN: f64 = 1e-6;
/// Guard on `|alpha|` before inverting a sensor gain.
pub const EPSILON_ALPHA: f64 = 1e-6;

/// Concentration in µg/m³.
pub type Concentration = f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("singular zone: |1 + rho| = {0:e} is below {EPSILON_DEN:e}")]
    SingularZone(f64),
    #[error("degenerate sensor gain: |alpha| = {0:e} is below {EPSILON_ALPHA:e}")]
    DegenerateGain(f64),
    #[error("invalid hour {0}, expected 0..=23")]
    InvalidHour(u32),
    #[error("invalid timestamp '{0}'")]
    InvalidTimestamp(String),
}

/// Planar coordinates in meters (projected CRS).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist2(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    ReferenceStation,
    MicroSensor,
}

impl DeviceKind {
    /// Token used in `devices.csv`.
    pub fn token(&self) -> &'static str {
        match self {
            DeviceKind::ReferenceStation => "station",
            DeviceKind::MicroSensor => "sensor",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        match token {
            "station" => Some(DeviceKind::ReferenceStation),
            "sensor" => Some(DeviceKind::MicroSensor),
            _ => None,
        }
    }
}

/// A fixed measuring unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub id: String,
    pub kind: DeviceKind,
    pub location: Point,
}

impl Device {
    pub fn new(id: impl Into<String>, kind: DeviceKind, x: f64, y: f64) -> Self {
        Self {
            id: id.into(),
            kind,
            location: Point::new(x, y),
        }
    }

    pub fn station(id: impl Into<String>, x: f64, y: f64) -> Self {
        Self::new(id, DeviceKind::ReferenceStation, x, y)
    }

    pub fn sensor(id: impl Into<String>, x: f64, y: f64) -> Self {
        Self::new(id, DeviceKind::MicroSensor, x, y)
    }

    pub fn is_station(&self) -> bool {
        self.kind == DeviceKind::ReferenceStation
    }
}

/// An hourly slot: a calendar day and an hour of that day.
///
/// Serialized as `YYYY-MM-DDTHH`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TimeSlot {
    date: NaiveDate,
    hour: u8,
}

impl TimeSlot {
    pub fn new(date: NaiveDate, hour: u32) -> Result<Self, ModelError> {
        if hour > 23 {
            return Err(ModelError::InvalidHour(hour));
        }
        Ok(Self {
            date,
            hour: hour as u8,
        })
    }

    pub fn from_ymdh(year: i32, month: u32, day: u32, hour: u32) -> Result<Self, ModelError> {
        let date = NaiveDate::from_ymd_opt(year, month, day)
            .ok_or_else(|| ModelError::InvalidTimestamp(format!("{year}-{month}-{day}")))?;
        Self::new(date, hour)
    }

    pub fn date(&self) -> NaiveDate {
        self.date
    }

    pub fn hour(&self) -> u8 {
        self.hour
    }

    pub fn to_datetime(&self) -> NaiveDateTime {
        self.date
            .and_time(NaiveTime::from_hms_opt(self.hour as u32, 0, 0).expect("hour checked"))
    }

    pub fn from_datetime(dt: NaiveDateTime) -> Self {
        use chrono::Timelike;
        Self {
            date: dt.date(),
            hour: dt.hour() as u8,
        }
    }

    /// The slot `hours` hours later.
    pub fn add_hours(&self, hours: i64) -> Self {
        Self::from_datetime(self.to_datetime() + Duration::hours(hours))
    }

    /// Compact form used in file names, `YYYYMMDDTHH`.
    pub fn compact(&self) -> String {
        format!("{}T{:02}", self.date.format("%Y%m%d"), self.hour)
    }
}

impl fmt::Display for TimeSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}T{:02}", self.date.format("%Y-%m-%d"), self.hour)
    }
}

impl std::str::FromStr for TimeSlot {
    type Err = ModelError;

    /// Parses `YYYY-MM-DDTHH`, optionally followed by `:00` or `:00:00`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::InvalidTimestamp(s.to_string());
        let (date, time) = s.split_once('T').ok_or_else(bad)?;
        let date = NaiveDate::parse_from_str(date, "%Y-%m-%d").map_err(|_| bad())?;
        let mut parts = time.split(':');
        let hour: u32 = parts
            .next()
            .filter(|h| h.len() == 2)
            .and_then(|h| h.parse().ok())
            .ok_or_else(bad)?;
        for rest in parts {
            if rest != "00" {
                return Err(bad());
            }
        }
        TimeSlot::new(date, hour).map_err(|_| bad())
    }
}

impl Serialize for TimeSlot {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TimeSlot {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A single hourly measurement. `None` marks a missing value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub device_id: String,
    pub slot: TimeSlot,
    pub value: Option<Concentration>,
}

/// Affine bias parameters of one zone plus its noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneParameters {
    #[serde(rename = "C")]
    pub c: f64,
    pub rho: f64,
    pub sigma2: f64,
}

impl ZoneParameters {
    pub const IDENTITY: ZoneParameters = ZoneParameters {
        c: 0.0,
        rho: 0.0,
        sigma2: 0.0,
    };

    pub fn new(c: f64, rho: f64) -> Self {
        Self { c, rho, sigma2: 0.0 }
    }

    pub fn is_identity(&self) -> bool {
        self.c == 0.0 && self.rho == 0.0
    }
}

/// Gain/offset of a micro-sensor and the variance of its noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorCalibration {
    pub alpha: f64,
    pub beta: f64,
    pub sigma2: f64,
}

impl SensorCalibration {
    pub const PERFECT: SensorCalibration = SensorCalibration {
        alpha: 1.0,
        beta: 0.0,
        sigma2: 0.0,
    };

    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            sigma2: 0.0,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.alpha.abs() < EPSILON_ALPHA
    }
}

/// Result of correcting one value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corrected {
    pub value: Concentration,
    /// The raw corrected value was negative and has been set to zero.
    pub clamped: bool,
}

/// `B = C + rho * P`
pub fn bias_at(zp: &ZoneParameters, p_true: Concentration) -> Concentration {
    zp.c + zp.rho * p_true
}

/// `P~ = P + B = C + (1 + rho) * P`
pub fn apply_bias(zp: &ZoneParameters, p_true: Concentration) -> Concentration {
    p_true + bias_at(zp, p_true)
}

/// Inverts [`apply_bias`]: `P = (P~ - C) / (1 + rho)`.
///
/// With `clamp` set, negative results are replaced by zero and reported
/// through [`Corrected::clamped`].
pub fn correct(
    zp: &ZoneParameters,
    p_tilde: Concentration,
    clamp: bool,
) -> Result<Corrected, ModelError> {
    let den = 1.0 + zp.rho;
    if den.abs() < EPSILON_DEN {
        return Err(ModelError::SingularZone(den.abs()));
    }
    let value = (p_tilde - zp.c) / den;
    if clamp && value < 0.0 {
        Ok(Corrected {
            value: 0.0,
            clamped: true,
        })
    } else {
        Ok(Corrected {
            value,
            clamped: false,
        })
    }
}

/// Noiseless expected sensor reading `alpha * P + beta`.
pub fn sensor_expected(cal: &SensorCalibration, p_true: Concentration) -> Concentration {
    cal.alpha * p_true + cal.beta
}

/// Maps a raw sensor reading back to a concentration: `(x - beta) / alpha`.
pub fn sensor_invert(cal: &SensorCalibration, x: Concentration) -> Result<Concentration, ModelError> {
    if cal.alpha.abs() < EPSILON_ALPHA {
        return Err(ModelError::DegenerateGain(cal.alpha.abs()));
    }
    Ok((x - cal.beta) / cal.alpha)
}
