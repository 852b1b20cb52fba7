//! Concentration rasters: ASCII grid I/O, nearest-neighbour resampling,
//! the initial map as the mean of a fine static map and a coarse hourly map,
//! and cell-wise correction with a fitted model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::FittedModel;
use crate::model::{self, Point, TimeSlot};
use crate::zoning::ZoneId;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("malformed grid header: {0}")]
    MalformedHeader(String),
    #[error("grid declares {expected} values but holds {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid value '{0}' in grid body")]
    InvalidValue(String),
    #[error("point ({x}, {y}) is outside the grid extent")]
    OutOfExtent { x: f64, y: f64 },
    #[error("coarse grid does not cover the template extent")]
    ExtentNotCovered,
    #[error("grids do not share the same geometry")]
    GeometryMismatch,
    #[error("no coarse map for slot {0}")]
    MissingSlot(TimeSlot),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A north-up raster, values stored row-major from the top row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMap {
    pub ncols: usize,
    pub nrows: usize,
    pub xllcorner: f64,
    pub yllcorner: f64,
    pub cellsize: f64,
    pub nodata: f64,
    pub values: Vec<f64>,
}

impl GridMap {
    pub fn new(
        ncols: usize,
        nrows: usize,
        xllcorner: f64,
        yllcorner: f64,
        cellsize: f64,
        nodata: f64,
        values: Vec<f64>,
    ) -> Result<Self, MapError> {
        if ncols == 0 || nrows == 0 {
            return Err(MapError::MalformedHeader("empty grid".into()));
        }
        if !(cellsize > 0.0) || !cellsize.is_finite() {
            return Err(MapError::MalformedHeader(format!("cellsize {cellsize}")));
        }
        if values.len() != ncols * nrows {
            return Err(MapError::DimensionMismatch {
                expected: ncols * nrows,
                found: values.len(),
            });
        }
        Ok(Self {
            ncols,
            nrows,
            xllcorner,
            yllcorner,
            cellsize,
            nodata,
            values,
        })
    }

    pub fn filled(
        ncols: usize,
        nrows: usize,
        xllcorner: f64,
        yllcorner: f64,
        cellsize: f64,
        value: f64,
    ) -> Self {
        Self::new(ncols, nrows, xllcorner, yllcorner, cellsize, -9999.0, vec![value; ncols * nrows])
            .expect("valid geometry")
    }

    /// Same geometry, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        Self {
            values,
            ..self.clone()
        }
    }

    pub fn xmax(&self) -> f64 {
        self.xllcorner + self.ncols as f64 * self.cellsize
    }

    pub fn ymax(&self) -> f64 {
        self.yllcorner + self.nrows as f64 * self.cellsize
    }

    pub fn same_geometry(&self, other: &GridMap) -> bool {
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && self.xllcorner == other.xllcorner
            && self.yllcorner == other.yllcorner
            && self.cellsize == other.cellsize
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.nodata || v.is_nan()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.ncols + col]
    }

    /// Value or `None` for a nodata cell.
    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.get(row, col);
        (!self.is_nodata(v)).then_some(v)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Point {
        Point::new(
            self.xllcorner + (col as f64 + 0.5) * self.cellsize,
            self.ymax() - (row as f64 + 0.5) * self.cellsize,
        )
    }

    /// Cell containing `p`, with `x` in `[left, right)` and `y` in `(bottom, top]`.
    pub fn cell_of(&self, p: Point) -> Result<(usize, usize), MapError> {
        let out = || MapError::OutOfExtent { x: p.x, y: p.y };
        if !p.is_finite() || p.x < self.xllcorner || p.y > self.ymax() {
            return Err(out());
        }
        let col = ((p.x - self.xllcorner) / self.cellsize).floor();
        let row = ((self.ymax() - p.y) / self.cellsize).floor();
        if col < 0.0 || row < 0.0 || col >= self.ncols as f64 || row >= self.nrows as f64 {
            return Err(out());
        }
        Ok((row as usize, col as usize))
    }

    /// Raw value of the cell containing `p` (may be the nodata sentinel).
    pub fn sample_at(&self, p: Point) -> Result<f64, MapError> {
        let (r, c) = self.cell_of(p)?;
        Ok(self.get(r, c))
    }

    pub fn min_max(&self) -> Option<(f64, f64)> {
        self.values
            .iter()
            .filter(|v| !self.is_nodata(**v))
            .fold(None, |acc, &v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }

    /// Every `stride`-th cell in both directions, anchored at the top-left.
    pub fn downsample(&self, stride: usize) -> GridMap {
        let stride = stride.max(1);
        if stride == 1 {
            return self.clone();
        }
        let ncols = self.ncols.div_ceil(stride);
        let nrows = self.nrows.div_ceil(stride);
        let mut values = Vec::with_capacity(ncols * nrows);
        for r in (0..self.nrows).step_by(stride) {
            for c in (0..self.ncols).step_by(stride) {
                values.push(self.get(r, c));
            }
        }
        let cellsize = self.cellsize * stride as f64;
        GridMap {
            ncols,
            nrows,
            xllcorner: self.xllcorner,
            yllcorner: self.ymax() - nrows as f64 * cellsize,
            cellsize,
            nodata: self.nodata,
            values,
        }
    }

    pub fn to_ascii(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 8 + 128);
        let _ = writeln!(out, "ncols {}", self.ncols);
        let _ = writeln!(out, "nrows {}", self.nrows);
        let _ = writeln!(out, "xllcorner {}", self.xllcorner);
        let _ = writeln!(out, "yllcorner {}", self.yllcorner);
        let _ = writeln!(out, "cellsize {}", self.cellsize);
        let _ = writeln!(out, "nodata_value {}", self.nodata);
        for row in self.values.chunks(self.ncols) {
            let mut first = true;
            for &v in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                let v = if v.is_nan() { self.nodata } else { v };
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_ascii(text: &str) -> Result<Self, MapError> {
        let mut lines = text.lines();
        let mut header = |key: &str| -> Result<String, MapError> {
            let line = lines
                .next()
                .ok_or_else(|| MapError::MalformedHeader(format!("missing '{key}'")))?;
            let mut it = line.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some(k), Some(v), None) if k.eq_ignore_ascii_case(key) => Ok(v.to_string()),
                _ => Err(MapError::MalformedHeader(format!(
                    "expected '{key} <value>', found '{line}'"
                ))),
            }
        };
        let parse_usize = |key: &str, v: String| {
            v.parse::<usize>()
                .map_err(|_| MapError::MalformedHeader(format!("{key} '{v}'")))
        };
        let parse_f64 = |key: &str, v: String| {
            v.parse::<f64>()
                .map_err(|_| MapError::MalformedHeader(format!("{key} '{v}'")))
        };
        let ncols = parse_usize("ncols", header("ncols")?)?;
        let nrows = parse_usize("nrows", header("nrows")?)?;
        let xll = parse_f64("xllcorner", header("xllcorner")?)?;
        let yll = parse_f64("yllcorner", header("yllcorner")?)?;
        let cellsize = parse_f64("cellsize", header("cellsize")?)?;
        let nodata = parse_f64("nodata_value", header("nodata_value")?)?;

        let mut values = Vec::with_capacity(ncols * nrows);
        for tok in lines.flat_map(str::split_whitespace) {
            values.push(
                tok.parse::<f64>()
                    .map_err(|_| MapError::InvalidValue(tok.to_string()))?,
            );
        }
        GridMap::new(ncols, nrows, xll, yll, cellsize, nodata, values)
    }
}

pub fn read_grid(path: &Path) -> Result<GridMap, MapError> {
    let text = fs::read_to_string(path).map_err(|source| MapError::Io {
        path: path.display().to_string(),
        source,
    })?;
    GridMap::from_ascii(&text)
}

pub fn write_grid(grid: &GridMap, path: &Path) -> Result<(), MapError> {
    fs::write(path, grid.to_ascii()).map_err(|source| MapError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Each template cell takes the coarse value at its center.
pub fn resample_nearest(coarse: &GridMap, template: &GridMap) -> Result<GridMap, MapError> {
    if coarse.same_geometry(template) {
        return Ok(coarse.clone());
    }
    let mut values = Vec::with_capacity(template.values.len());
    for r in 0..template.nrows {
        for c in 0..template.ncols {
            let v = coarse
                .sample_at(template.cell_center(r, c))
                .map_err(|_| MapError::ExtentNotCovered)?;
            values.push(if coarse.is_nodata(v) { template.nodata } else { v });
        }
    }
    Ok(template.with_values(values))
}

/// The static fine map plus hourly coarse maps.
#[derive(Debug, Clone, PartialEq)]
pub struct MapStack {
    pub fine: GridMap,
    pub coarse: BTreeMap<TimeSlot, GridMap>,
}

impl MapStack {
    pub fn new(fine: GridMap) -> Self {
        Self {
            fine,
            coarse: BTreeMap::new(),
        }
    }

    pub fn has_slot(&self, slot: &TimeSlot) -> bool {
        self.coarse.contains_key(slot)
    }

    /// Initial-map value at `p` for `slot`, equal to sampling
    /// [`combine_initial`] at `p`. `Ok(None)` for nodata.
    pub fn initial_at(&self, slot: &TimeSlot, p: Point) -> Result<Option<f64>, MapError> {
        let coarse = self.coarse.get(slot).ok_or(MapError::MissingSlot(*slot))?;
        let (r, c) = self.fine.cell_of(p)?;
        let fine = self.fine.get(r, c);
        if self.fine.is_nodata(fine) {
            return Ok(None);
        }
        let hourly = if coarse.same_geometry(&self.fine) {
            coarse.get(r, c)
        } else {
            coarse
                .sample_at(self.fine.cell_center(r, c))
                .map_err(|_| MapError::ExtentNotCovered)?
        };
        if coarse.is_nodata(hourly) {
            return Ok(None);
        }
        Ok(Some(0.5 * (fine + hourly)))
    }
}

/// Cell-wise mean of two grids on the same geometry; nodata wins.
pub fn mean_of(a: &GridMap, b: &GridMap) -> Result<GridMap, MapError> {
    if !a.same_geometry(b) {
        return Err(MapError::GeometryMismatch);
    }
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| {
            if a.is_nodata(x) || b.is_nodata(y) {
                a.nodata
            } else {
                0.5 * (x + y)
            }
        })
        .collect();
    Ok(a.with_values(values))
}

/// Initial map for `slot`: mean of the fine map and the resampled coarse map.
pub fn combine_initial(stack: &MapStack, slot: &TimeSlot) -> Result<GridMap, MapError> {
    let coarse = stack.coarse.get(slot).ok_or(MapError::MissingSlot(*slot))?;
    let resampled = resample_nearest(coarse, &stack.fine)?;
    mean_of(&stack.fine, &resampled)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedMap {
    pub grid: GridMap,
    /// Clamp events per zone (only zones with at least one event).
    pub clamp_counts: BTreeMap<ZoneId, usize>,
    /// Cells left uncorrected because their zone is singular.
    pub singular_cells: usize,
}

impl CorrectedMap {
    pub fn total_clamped(&self) -> usize {
        self.clamp_counts.values().sum()
    }
}

/// Corrects every cell with the parameters of the zone holding its center.
pub fn correct_map(initial: &GridMap, fitted: &FittedModel, hour: u8, clamp: bool) -> CorrectedMap {
    let zoning = &fitted.zoning;
    let rows: Vec<(Vec<f64>, Vec<(ZoneId, usize)>, usize)> = (0..initial.nrows)
        .into_par_iter()
        .map(|r| {
            let mut out = Vec::with_capacity(initial.ncols);
            let mut clamps: Vec<(ZoneId, usize)> = Vec::new();
            let mut singular = 0;
            for c in 0..initial.ncols {
                let v = initial.get(r, c);
                if initial.is_nodata(v) {
                    out.push(initial.nodata);
                    continue;
                }
                let zone = zoning.assign(initial.cell_center(r, c));
                let params = fitted.zone_parameters(zone, hour);
                match model::correct(&params, v, clamp) {
                    Ok(corr) => {
                        if corr.clamped {
                            match clamps.iter_mut().find(|(z, _)| *z == zone) {
                                Some((_, n)) => *n += 1,
                                None => clamps.push((zone, 1)),
                            }
                        }
                        out.push(corr.value);
                    }
                    Err(_) => {
                        singular += 1;
                        out.push(v);
                    }
                }
            }
            (out, clamps, singular)
        })
        .collect();

    let mut values = Vec::with_capacity(initial.values.len());
    let mut clamp_counts = BTreeMap::new();
    let mut singular_cells = 0;
    for (row, clamps, singular) in rows {
        values.extend(row);
        for (z, n) in clamps {
            *clamp_counts.entry(z).or_insert(0) += n;
        }
        singular_cells += singular;
    }
    CorrectedMap {
        grid: initial.with_values(values),
        clamp_counts,
        singular_cells,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(ncols: usize, nrows: usize, values: Vec<f64>) -> GridMap {
        GridMap::new(ncols, nrows, 0.0, 0.0, 10.0, -9999.0, values).unwrap()
    }

    #[test]
    fn ascii_roundtrip_and_nodata() {
        let g = grid(2, 2, vec![1.5, -9999.0, 3.25, 0.1 + 0.2]);
        let back = GridMap::from_ascii(&g.to_ascii()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.value(0, 1), None);
        assert!(g.to_ascii().starts_with("ncols 2\nnrows 2\nxllcorner 0\n"));
    }

    #[test]
    fn dimension_mismatch_and_bad_header() {
        let text = "ncols 3\nnrows 3\nxllcorner 0\nyllcorner 0\ncellsize 1\nnodata_value -9999\n1 2 3\n4 5 6\n7 8\n";
        assert!(matches!(
            GridMap::from_ascii(text),
            Err(MapError::DimensionMismatch { expected: 9, found: 8 })
        ));
        let text = "ncols 3\nrows 3\n";
        assert!(matches!(GridMap::from_ascii(text), Err(MapError::MalformedHeader(_))));
        let text = "ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 0\nnodata_value -9999\n1\n";
        assert!(matches!(GridMap::from_ascii(text), Err(MapError::MalformedHeader(_))));
    }

    #[test]
    fn sample_at_conventions() {
        // row 0 is the top row: y in (10, 20]
        let g = grid(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.sample_at(Point::new(5.0, 15.0)).unwrap(), 1.0);
        assert_eq!(g.sample_at(g.cell_center(1, 1)).unwrap(), 4.0);
        // shared vertical edge x = 10 belongs to the right cell
        assert_eq!(g.sample_at(Point::new(10.0, 15.0)).unwrap(), 2.0);
        // shared horizontal edge y = 10 belongs to the lower cell
        assert_eq!(g.sample_at(Point::new(5.0, 10.0)).unwrap(), 3.0);
        // top edge inside, bottom and right edges outside
        assert_eq!(g.sample_at(Point::new(0.0, 20.0)).unwrap(), 1.0);
        assert!(matches!(g.sample_at(Point::new(5.0, 0.0)), Err(MapError::OutOfExtent { .. })));
        assert!(g.sample_at(Point::new(20.0, 5.0)).is_err());
        assert!(g.sample_at(Point::new(-1.0, 5.0)).is_err());
    }

    #[test]
    fn resample_examples() {
        let template = grid(4, 4, vec![0.0; 16]);
        let one = GridMap::new(1, 1, 0.0, 0.0, 40.0, -9999.0, vec![7.0]).unwrap();
        let r = resample_nearest(&one, &template).unwrap();
        assert!(r.values.iter().all(|&v| v == 7.0));

        let same = grid(4, 4, (0..16).map(|v| v as f64).collect());
        assert_eq!(resample_nearest(&same, &template).unwrap().values, same.values);

        let quads = GridMap::new(2, 2, 0.0, 0.0, 20.0, -9999.0, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = resample_nearest(&quads, &template).unwrap();
        #[rustfmt::skip]
        let expected = vec![
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(r.values, expected);

        let small = GridMap::new(1, 1, 0.0, 0.0, 15.0, -9999.0, vec![1.0]).unwrap();
        assert!(matches!(resample_nearest(&small, &template), Err(MapError::ExtentNotCovered)));
    }

    #[test]
    fn combine_examples() {
        let slot = TimeSlot::from_ymdh(2017, 1, 5, 6).unwrap();
        let fine = grid(2, 1, vec![40.0, 40.0]);
        let mut stack = MapStack::new(fine.clone());
        stack.coarse.insert(slot, grid(2, 1, vec![20.0, -9999.0]));
        let m = combine_initial(&stack, &slot).unwrap();
        assert_eq!(m.values[0], 30.0);
        assert_eq!(m.value(0, 1), None);

        let other = slot.add_hours(1);
        assert!(matches!(combine_initial(&stack, &other), Err(MapError::MissingSlot(_))));

        stack.coarse.insert(other, fine.clone());
        assert_eq!(combine_initial(&stack, &other).unwrap(), fine);
    }

    #[test]
    fn initial_at_matches_combine_then_sample() {
        let slot = TimeSlot::from_ymdh(2017, 2, 1, 9).unwrap();
        let fine = grid(4, 4, (0..16).map(|v| 10.0 + v as f64).collect());
        let mut stack = MapStack::new(fine);
        let coarse = GridMap::new(2, 2, 0.0, 0.0, 20.0, -9999.0, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        stack.coarse.insert(slot, coarse);
        let combined = combine_initial(&stack, &slot).unwrap();
        for (x, y) in [(1.0, 39.0), (25.0, 25.0), (39.9, 0.1), (10.0, 30.0)] {
            let p = Point::new(x, y);
            assert_eq!(
                stack.initial_at(&slot, p).unwrap(),
                Some(combined.sample_at(p).unwrap())
            );
        }
    }

    #[test]
    fn downsample_keeps_anchor() {
        let g = grid(5, 3, (0..15).map(|v| v as f64).collect());
        let d = g.downsample(2);
        assert_eq!((d.ncols, d.nrows), (3, 2));
        assert_eq!(d.values, vec![0.0, 2.0, 4.0, 10.0, 12.0, 14.0]);
        assert_eq!(d.ymax(), g.ymax());
    }
}
