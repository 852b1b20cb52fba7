//! Bias correction of deterministic air-quality maps.
//!
//! The initial map (mean of a fine static map and a coarse hourly map) is
//! assumed to carry a bias that is affine in the true concentration and
//! constant on Voronoi zones. Reference stations and affinely distorted
//! micro-sensors are used to estimate that bias per zone and hour, which
//! yields corrected maps and, as a by-product, sensor calibrations.

pub mod estimation;
pub mod evaluation;
pub mod ingest;
pub mod lstsq;
pub mod mapops;
pub mod model;
pub mod pipeline;
pub mod synthgen;
pub mod zoning;
