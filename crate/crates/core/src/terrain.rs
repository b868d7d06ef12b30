//! Terrain-derived flood-driving features.
//!
//! Neighbourhoods follow the row-major, north-up layout of [`Grid`]: row
//! `r - 1` is north of row `r`, column `c + 1` is east of column `c`.
//! Cells on the grid edge or 8-adjacent to a nodata cell are *outlets*:
//! water reaching them without a lower neighbour leaves the domain.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, FeatureId, FeatureStack, Geometry, Grid};

/// Square metres per hectare.
pub const HECTARE: f64 = 10_000.0;
const TWI_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerrainParams {
    /// Focal window radius in metres (DEM_L and the smoothed SLOPE).
    pub focal_radius: f64,
    /// Upper cutoffs in hectares.
    pub flacc_cutoff: f64,
    pub flimp_cutoff: f64,
    pub flslo_cutoff: f64,
    /// Use affine [-1, 1] scaling for CURV/DEM_L instead of symmetric scaling.
    pub affine_signed: bool,
}

impl Default for TerrainParams {
    fn default() -> Self {
        TerrainParams {
            focal_radius: 100.0,
            flacc_cutoff: 1.0,
            flimp_cutoff: 35.0,
            flslo_cutoff: 10.0,
            affine_signed: false,
        }
    }
}

impl TerrainParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("focal_radius", self.focal_radius),
            ("flacc_cutoff", self.flacc_cutoff),
            ("flimp_cutoff", self.flimp_cutoff),
            ("flslo_cutoff", self.flslo_cutoff),
        ] {
            if !(v > 0.0) {
                return Err(Error::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandUse {
    /// Impervious fraction per cell, in [0, 1].
    pub impervious: Grid,
    /// Subcatchment id per cell (ignored at masked cells).
    pub subcatchment: Vec<i64>,
}

impl LandUse {
    pub fn new(impervious: Grid, subcatchment: Vec<i64>) -> Result<Self> {
        if subcatchment.len() != impervious.geometry().len() {
            return Err(Error::Dimension(format!(
                "{} subcatchment ids for {} cells",
                subcatchment.len(),
                impervious.geometry().len()
            )));
        }
        if let Some(v) = impervious.valid_values().find(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid(format!("impervious fraction {v} outside [0, 1]")));
        }
        Ok(LandUse {
            impervious,
            subcatchment,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipeSegment {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub diameter: f64,
}

impl PipeSegment {
    pub fn length(&self) -> f64 {
        (self.x2 - self.x1).hypot(self.y2 - self.y1)
    }

    pub fn cross_section(&self) -> f64 {
        std::f64::consts::PI * (self.diameter / 2.0).powi(2)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipeNetwork {
    pub segments: Vec<PipeSegment>,
}

impl PipeNetwork {
    pub fn new(segments: Vec<PipeSegment>) -> Result<Self> {
        for (i, s) in segments.iter().enumerate() {
            if !(s.diameter > 0.0) {
                return Err(Error::Invalid(format!("pipe {i}: diameter must be positive")));
            }
            if !(s.length() > 0.0) {
                return Err(Error::Invalid(format!("pipe {i}: zero length")));
            }
        }
        Ok(PipeNetwork { segments })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LandUseRow {
    row: usize,
    col: usize,
    impervious_fraction: f64,
    subcatchment_id: i64,
}

/// Reads land use from CSV with columns
/// `row,col,impervious_fraction,subcatchment_id`. Cells absent from the file
/// are nodata.
pub fn read_land_use_csv(path: impl AsRef<Path>, geom: Geometry) -> Result<LandUse> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let mut values = vec![0.0; geom.len()];
    let mut mask = vec![true; geom.len()];
    let mut ids = vec![0i64; geom.len()];
    for rec in rdr.deserialize() {
        let rec: LandUseRow = rec?;
        if rec.row >= geom.rows || rec.col >= geom.cols {
            return Err(Error::Bounds(format!(
                "land-use cell ({}, {}) outside {}x{} grid",
                rec.row, rec.col, geom.rows, geom.cols
            )));
        }
        let i = geom.index(rec.row, rec.col);
        values[i] = rec.impervious_fraction;
        ids[i] = rec.subcatchment_id;
        mask[i] = false;
    }
    LandUse::new(Grid::new(geom, values, mask)?, ids)
}

pub fn write_land_use_csv(land: &LandUse, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let geom = land.impervious.geometry();
    for r in 0..geom.rows {
        for c in 0..geom.cols {
            let i = geom.index(r, c);
            if land.impervious.mask()[i] {
                continue;
            }
            w.serialize(LandUseRow {
                row: r,
                col: c,
                impervious_fraction: land.impervious.values()[i],
                subcatchment_id: land.subcatchment[i],
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

/// Reads pipes from CSV with columns `x1,y1,x2,y2,diameter` (metres).
pub fn read_pipes_csv(path: impl AsRef<Path>) -> Result<PipeNetwork> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let segments = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<PipeSegment>, _>>()?;
    PipeNetwork::new(segments)
}

pub fn write_pipes_csv(pipes: &PipeNetwork, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for s in &pipes.segments {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

/// Mean over unmasked cells whose centres lie within `radius` metres
/// (inclusive) of each unmasked cell.
pub fn focal_mean(g: &Grid, radius: f64) -> Result<Grid> {
    let geom = *g.geometry();
    if radius < geom.cell_size {
        return Err(Error::Invalid(format!(
            "focal radius {radius} is smaller than the cell size {}",
            geom.cell_size
        )));
    }
    let reach = radius / geom.cell_size;
    let span = reach.floor() as isize;
    let limit = reach * reach + 1e-9;
    let offsets: Vec<(isize, isize)> = (-span..=span)
        .flat_map(|dr| (-span..=span).map(move |dc| (dr, dc)))
        .filter(|&(dr, dc)| ((dr * dr + dc * dc) as f64) <= limit)
        .collect();
    let (vals, mask) = (g.values(), g.mask());
    let mut out = vec![0.0; geom.len()];
    for r in 0..geom.rows {
        for c in 0..geom.cols {
            let i = geom.index(r, c);
            if mask[i] {
                continue;
            }
            let (mut sum, mut n) = (0.0, 0usize);
            for &(dr, dc) in &offsets {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= geom.rows as isize || nc >= geom.cols as isize {
                    continue;
                }
                let j = geom.index(nr as usize, nc as usize);
                if !mask[j] {
                    sum += vals[j];
                    n += 1;
                }
            }
            out[i] = sum / n as f64;
        }
    }
    g.with_values(out)
}

/// First derivative along one axis at `i`, using central differences where
/// both neighbours are valid and one-sided differences otherwise.
fn axis_derivative(g: &Grid, i: usize, prev: Option<usize>, next: Option<usize>) -> f64 {
    let valid = |j: Option<usize>| j.filter(|&j| !g.mask()[j]);
    let v = g.values();
    let h = g.cell_size();
    match (valid(prev), valid(next)) {
        (Some(p), Some(n)) => (v[n] - v[p]) / (2.0 * h),
        (None, Some(n)) => (v[n] - v[i]) / h,
        (Some(p), None) => (v[i] - v[p]) / h,
        (None, None) => 0.0,
    }
}

/// Gradient (dz/dx eastward, dz/dy northward) per cell.
fn gradient(g: &Grid) -> Vec<(f64, f64)> {
    let geom = g.geometry();
    let (rows, cols) = (geom.rows, geom.cols);
    (0..geom.len())
        .map(|i| {
            if g.mask()[i] {
                return (0.0, 0.0);
            }
            let (r, c) = (i / cols, i % cols);
            let west = (c > 0).then(|| i - 1);
            let east = (c + 1 < cols).then(|| i + 1);
            let north = (r > 0).then(|| i - cols);
            let south = (r + 1 < rows).then(|| i + cols);
            (
                axis_derivative(g, i, west, east),
                axis_derivative(g, i, south, north),
            )
        })
        .collect()
}

/// Slope (dimensionless gradient magnitude of the focal-mean-smoothed DEM)
/// and aspect (degrees clockwise from north of the steepest-descent
/// direction of the raw DEM; -1 on flat cells).
pub fn slope_aspect(dem: &Grid, params: &TerrainParams) -> Result<(Grid, Grid)> {
    if dem.rows() < 2 || dem.cols() < 2 {
        return Err(Error::Dimension("slope/aspect need at least a 2x2 DEM".into()));
    }
    let smooth = focal_mean(dem, params.focal_radius)?;
    let slope = gradient(&smooth)
        .into_iter()
        .map(|(gx, gy)| gx.hypot(gy))
        .collect();
    let aspect = gradient(dem)
        .into_iter()
        .map(|(gx, gy)| {
            if gx == 0.0 && gy == 0.0 {
                -1.0
            } else {
                (-gx).atan2(-gy).to_degrees().rem_euclid(360.0)
            }
        })
        .collect();
    Ok((dem.with_values(slope)?, dem.with_values(aspect)?))
}

fn second_difference(
    v: &[f64],
    mask: &[bool],
    i: usize,
    pos: usize,
    len: usize,
    stride: usize,
) -> f64 {
    let ok = |k: isize| k >= 0 && (k as usize) < len && !mask[(i as isize + (k - pos as isize) * stride as isize) as usize];
    let at = |k: isize| v[(i as isize + (k - pos as isize) * stride as isize) as usize];
    let p = pos as isize;
    if ok(p - 1) && ok(p + 1) {
        at(p - 1) - 2.0 * at(p) + at(p + 1)
    } else if ok(p + 1) && ok(p + 2) {
        at(p) - 2.0 * at(p + 1) + at(p + 2)
    } else if ok(p - 1) && ok(p - 2) {
        at(p - 2) - 2.0 * at(p - 1) + at(p)
    } else {
        0.0
    }
}

/// 4-neighbour Laplacian per squared cell size, before the cube root.
pub fn laplacian(dem: &Grid) -> Result<Grid> {
    let geom = *dem.geometry();
    if geom.rows < 3 || geom.cols < 3 {
        return Err(Error::Dimension("curvature needs at least a 3x3 DEM".into()));
    }
    let h2 = geom.cell_area();
    let (v, m) = (dem.values(), dem.mask());
    let out = (0..geom.len())
        .map(|i| {
            if m[i] {
                return 0.0;
            }
            let (r, c) = (i / geom.cols, i % geom.cols);
            let dxx = second_difference(v, m, i, c, geom.cols, 1);
            let dyy = second_difference(v, m, i, r, geom.rows, geom.cols);
            (dxx + dyy) / h2
        })
        .collect();
    dem.with_values(out)
}

/// Signed cube root of the Laplacian: concave-up cells are positive.
pub fn curvature(dem: &Grid) -> Result<Grid> {
    laplacian(dem)?.map(f64::cbrt)
}

#[derive(Clone, Copy, PartialEq)]
struct HeapKey(f64, usize);

impl Eq for HeapKey {}
impl PartialOrd for HeapKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapKey {
    // Reversed so that BinaryHeap pops the lowest elevation, then lowest index.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

/// Outlet cells: unmasked cells on the grid edge or 8-adjacent to nodata.
pub fn outlet_cells(g: &Grid) -> Vec<bool> {
    let geom = g.geometry();
    let m = g.mask();
    (0..geom.len())
        .map(|i| {
            !m[i] && (geom.on_edge(i) || geom.neighbors8(i).any(|(j, _)| m[j]))
        })
        .collect()
}

/// Priority-flood depression filling (8-connectivity, draining to outlet
/// cells). Returns the filled surface and the sink depth `filled - dem`.
pub fn fill_sinks_sdepth(dem: &Grid) -> Result<(Grid, Grid)> {
    let geom = *dem.geometry();
    let outlets = outlet_cells(dem);
    let v = dem.values();
    let mut filled = v.to_vec();
    let mut done = vec![false; geom.len()];
    let mut heap = BinaryHeap::new();
    for (i, &o) in outlets.iter().enumerate() {
        if o {
            done[i] = true;
            heap.push(HeapKey(v[i], i));
        }
    }
    if heap.is_empty() {
        return Err(Error::Drainage(
            "the DEM has no unmasked edge cell to drain to".into(),
        ));
    }
    while let Some(HeapKey(level, i)) = heap.pop() {
        for (j, _) in geom.neighbors8(i) {
            if done[j] || dem.mask()[j] {
                continue;
            }
            done[j] = true;
            filled[j] = v[j].max(level);
            heap.push(HeapKey(filled[j], j));
        }
    }
    let sdepth = filled.iter().zip(v).map(|(f, d)| f - d).collect();
    Ok((dem.with_values(filled)?, dem.with_values(sdepth)?))
}

/// D8 receivers on a (filled) surface.
///
/// Each cell drains to the neighbour with the steepest strictly positive
/// drop per unit distance (diagonals at sqrt 2); ties go to the lowest
/// row-major index. Cells without a descent drain across equal-elevation
/// cells toward the nearest draining cell by breadth-first distance, again
/// preferring the lowest index. Outlets with no descent, and unresolvable
/// pits, get `None`.
pub fn d8_receivers(surface: &Grid) -> Vec<Option<usize>> {
    let geom = *surface.geometry();
    let (z, mask) = (surface.values(), surface.mask());
    let outlets = outlet_cells(surface);
    let mut recv: Vec<Option<usize>> = vec![None; geom.len()];
    let mut draining = vec![false; geom.len()];
    for i in 0..geom.len() {
        if mask[i] {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for (j, d) in geom.neighbors8(i) {
            if mask[j] || z[j] >= z[i] {
                continue;
            }
            let s = (z[i] - z[j]) / d;
            best = match best {
                Some((bs, bj)) if bs > s || (bs == s && bj < j) => Some((bs, bj)),
                _ => Some((s, j)),
            };
        }
        recv[i] = best.map(|(_, j)| j);
        draining[i] = recv[i].is_some() || outlets[i];
    }

    // Flat resolution by BFS distance from draining cells.
    let mut dist = vec![usize::MAX; geom.len()];
    let mut queue = VecDeque::new();
    for i in 0..geom.len() {
        if !mask[i] && draining[i] {
            dist[i] = 0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for (j, _) in geom.neighbors8(i) {
            if mask[j] || dist[j] != usize::MAX || z[j] != z[i] {
                continue;
            }
            dist[j] = dist[i] + 1;
            queue.push_back(j);
        }
    }
    for i in 0..geom.len() {
        if mask[i] || draining[i] || dist[i] == usize::MAX {
            continue;
        }
        recv[i] = geom
            .neighbors8(i)
            .filter(|&(j, _)| !mask[j] && z[j] == z[i] && dist[j] + 1 == dist[i])
            .map(|(j, _)| j)
            .min();
    }
    recv
}

/// Upstream accumulation of `weights` along D8 receivers, excluding each
/// cell's own weight.
pub fn accumulate(receivers: &[Option<usize>], weights: &[f64], mask: &[bool]) -> Vec<f64> {
    let n = receivers.len();
    let mut indegree = vec![0usize; n];
    for r in receivers.iter().flatten() {
        indegree[*r] += 1;
    }
    let mut acc = vec![0.0; n];
    let mut queue: VecDeque<usize> = (0..n).filter(|&i| !mask[i] && indegree[i] == 0).collect();
    while let Some(i) = queue.pop_front() {
        if let Some(r) = receivers[i] {
            acc[r] += acc[i] + weights[i];
            indegree[r] -= 1;
            if indegree[r] == 0 {
                queue.push_back(r);
            }
        }
    }
    acc
}

/// Unclamped upstream contributing area in m² (own cell excluded). With
/// `weights`, each upstream cell contributes `weight * cell_area`.
pub fn contributing_area(filled: &Grid, weights: Option<&Grid>) -> Result<Grid> {
    let geom = filled.geometry();
    let cell_area = geom.cell_area();
    let w: Vec<f64> = match weights {
        Some(wg) => {
            if !wg.geometry().matches(geom) {
                return Err(Error::Dimension("weight grid geometry differs from DEM".into()));
            }
            wg.values().iter().map(|&x| x * cell_area).collect()
        }
        None => vec![cell_area; geom.len()],
    };
    let recv = d8_receivers(filled);
    filled.with_values(accumulate(&recv, &w, filled.mask()))
}

/// Contributing area clamped at `cutoff_ha` hectares, then cube-rooted.
pub fn flow_accumulation(filled: &Grid, weights: Option<&Grid>, cutoff_ha: f64) -> Result<Grid> {
    let cap = cutoff_ha * HECTARE;
    contributing_area(filled, weights)?.map(|a| a.min(cap).cbrt())
}

/// Topographic wetness index: sqrt(max(ln((a + cell_area) / (tanβ + ε)), 0)).
pub fn twi(slope: &Grid, area: &Grid) -> Result<Grid> {
    if !slope.geometry().matches(area.geometry()) {
        return Err(Error::Dimension("slope and area geometries differ".into()));
    }
    let cell_area = slope.geometry().cell_area();
    let out = slope
        .values()
        .iter()
        .zip(area.values())
        .map(|(&tb, &a)| ((a + cell_area) / (tb + TWI_EPS)).ln().max(0.0).sqrt())
        .collect();
    slope.with_values(out)
}

/// Per-cell, per-subcatchment and area-weighted imperviousness.
pub fn imperviousness(land: &LandUse) -> Result<(Grid, Grid, Grid)> {
    let imp_c = land.impervious.clone();
    let mut groups: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for (i, &v) in imp_c.values().iter().enumerate() {
        if !imp_c.mask()[i] {
            let e = groups.entry(land.subcatchment[i]).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    let max_count = groups.values().map(|g| g.1).max().unwrap_or(1) as f64;
    let lookup = |i: usize| -> (f64, f64) {
        let (sum, n) = groups[&land.subcatchment[i]];
        let mean = sum / n as f64;
        (mean, mean * n as f64 / max_count)
    };
    let n = imp_c.values().len();
    let mut imp_s = vec![0.0; n];
    let mut imp_sa = vec![0.0; n];
    for i in 0..n {
        if !imp_c.mask()[i] {
            (imp_s[i], imp_sa[i]) = lookup(i);
        }
    }
    let imp_s = imp_c.with_values(imp_s)?;
    let imp_sa = imp_c.with_values(imp_sa)?;
    Ok((imp_c, imp_s, imp_sa))
}

/// FLACC weighted by imperviousness (FLIMP) and by slope (FLSLO), each
/// clamped at its cutoff and cube-rooted.
pub fn flimp_flslo(
    filled: &Grid,
    imp_c: &Grid,
    slope: &Grid,
    params: &TerrainParams,
) -> Result<(Grid, Grid)> {
    Ok((
        flow_accumulation(filled, Some(imp_c), params.flimp_cutoff)?,
        flow_accumulation(filled, Some(slope), params.flslo_cutoff)?,
    ))
}

/// Length of the part of segment p0-p1 inside the rectangle (Liang-Barsky).
fn clipped_length(s: &PipeSegment, bounds: (f64, f64, f64, f64)) -> f64 {
    let (xmin, ymin, xmax, ymax) = bounds;
    let (dx, dy) = (s.x2 - s.x1, s.y2 - s.y1);
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for (p, q) in [
        (-dx, s.x1 - xmin),
        (dx, xmax - s.x1),
        (-dy, s.y1 - ymin),
        (dy, ymax - s.y1),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return 0.0;
            }
        } else {
            let t = q / p;
            if p < 0.0 {
                t0 = t0.max(t);
            } else {
                t1 = t1.min(t);
            }
        }
    }
    if t1 > t0 {
        (t1 - t0) * s.length()
    } else {
        0.0
    }
}

/// In-cell pipe volume (m³): clipped length times cross-sectional area,
/// summed over segments.
pub fn pipe_raster(pipes: &PipeNetwork, geom: &Geometry) -> Result<Grid> {
    let mut out = vec![0.0; geom.len()];
    let cs = geom.cell_size;
    for s in &pipes.segments {
        let area = s.cross_section();
        let col_of = |x: f64| ((x - geom.origin_x) / cs).floor();
        let row_of = |y: f64| geom.rows as f64 - 1.0 - ((y - geom.origin_y) / cs).floor();
        let clamp_c = |v: f64| v.clamp(0.0, geom.cols as f64 - 1.0) as usize;
        let clamp_r = |v: f64| v.clamp(0.0, geom.rows as f64 - 1.0) as usize;
        let (c0, c1) = (col_of(s.x1.min(s.x2)), col_of(s.x1.max(s.x2)));
        let (r0, r1) = (row_of(s.y1.max(s.y2)), row_of(s.y1.min(s.y2)));
        if c1 < 0.0 || r1 < 0.0 || c0 > geom.cols as f64 - 1.0 || r0 > geom.rows as f64 - 1.0 {
            continue;
        }
        for r in clamp_r(r0)..=clamp_r(r1) {
            for c in clamp_c(c0)..=clamp_c(c1) {
                let len = clipped_length(s, geom.cell_bounds(r, c));
                if len > 0.0 {
                    out[geom.index(r, c)] += len * area;
                }
            }
        }
    }
    Grid::from_values(*geom, out)
}

/// The fourteen features before normalization, with their transforms applied.
pub fn derive_raw(
    dem: &Grid,
    land: &LandUse,
    pipes: &PipeNetwork,
    params: &TerrainParams,
) -> Result<Vec<(FeatureId, Grid)>> {
    params.validate()?;
    let geom = *dem.geometry();
    if !land.impervious.geometry().matches(&geom) {
        return Err(Error::Dimension("land use and DEM geometries differ".into()));
    }
    let mask: Vec<bool> = dem
        .mask()
        .iter()
        .zip(land.impervious.mask())
        .map(|(a, b)| *a || *b)
        .collect();
    let dem = dem.with_mask(mask.clone())?;

    let (slope, aspect) = slope_aspect(&dem, params)?;
    let curv = curvature(&dem)?;
    let focal = focal_mean(&dem, params.focal_radius)?;
    let dem_l = dem.with_values(
        dem.values()
            .iter()
            .zip(focal.values())
            .map(|(a, b)| a - b)
            .collect(),
    )?;
    let (filled, sdepth) = fill_sinks_sdepth(&dem)?;
    let area = contributing_area(&filled, None)?;
    let flacc = area.map(|a| a.min(params.flacc_cutoff * HECTARE).cbrt())?;
    let twi = twi(&slope, &area)?;
    let land = LandUse::new(land.impervious.with_mask(mask.clone())?, land.subcatchment.clone())?;
    let (imp_c, imp_s, imp_sa) = imperviousness(&land)?;
    let (flimp, flslo) = flimp_flslo(&filled, &imp_c, &slope, params)?;
    let pipe = pipe_raster(pipes, &geom)?.with_mask(mask)?;

    Ok(vec![
        (FeatureId::Dem, dem),
        (FeatureId::Asp, aspect),
        (FeatureId::Curv, curv),
        (FeatureId::DemL, dem_l),
        (FeatureId::Sdepth, sdepth),
        (FeatureId::Slope, slope),
        (FeatureId::Flacc, flacc),
        (FeatureId::Twi, twi),
        (FeatureId::ImpC, imp_c),
        (FeatureId::ImpS, imp_s),
        (FeatureId::ImpSa, imp_sa),
        (FeatureId::Flimp, flimp),
        (FeatureId::Flslo, flslo),
        (FeatureId::Pipe, pipe),
    ])
}

/// All fourteen normalized feature channels in canonical order.
pub fn derive_all(
    dem: &Grid,
    land: &LandUse,
    pipes: &PipeNetwork,
    params: &TerrainParams,
) -> Result<FeatureStack> {
    let channels = derive_raw(dem, land, pipes, params)?
        .into_iter()
        .map(|(id, g)| {
            let g = if !id.is_signed() {
                raster::normalize_unit(&g)?
            } else if params.affine_signed {
                raster::normalize_affine_signed(&g)?
            } else {
                raster::normalize_signed(&g)?
            };
            Ok((id, g))
        })
        .collect::<Result<Vec<_>>>()?;
    raster::stack(channels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: usize, cols: usize, v: Vec<f64>) -> Grid {
        Grid::from_values(Geometry::new(rows, cols, 1.0), v).unwrap()
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn focal_mean_cases() {
        let g = grid(1, 3, vec![0.0, 3.0, 6.0]);
        assert_eq!(focal_mean(&g, 1.0).unwrap().values(), &[1.5, 3.0, 4.5]);
        let c = grid(4, 4, vec![2.5; 16]);
        assert_eq!(focal_mean(&c, 2.0).unwrap().values(), c.values());
        let ramp = grid(5, 5, (0..25).map(|i| (i % 5) as f64 * 2.0 + (i / 5) as f64).collect());
        let f = focal_mean(&ramp, 1.5).unwrap();
        assert_close(f.get(2, 2), ramp.get(2, 2), 1e-12);
        assert!(focal_mean(&c, 0.5).is_err());
    }

    fn plane(rows: usize, cols: usize, cs: f64, a: f64, b: f64) -> Grid {
        // z = a*x + b*y with x east, y north, cell centres.
        let geom = Geometry::new(rows, cols, cs);
        let v = (0..rows * cols)
            .map(|i| {
                let (r, c) = (i / cols, i % cols);
                let x = (c as f64 + 0.5) * cs;
                let y = (rows as f64 - r as f64 - 0.5) * cs;
                a * x + b * y
            })
            .collect();
        Grid::from_values(geom, v).unwrap()
    }

    #[test]
    fn slope_and_aspect_of_east_rising_plane() {
        let dem = plane(12, 12, 10.0, 0.1, 0.0);
        let params = TerrainParams {
            focal_radius: 20.0,
            ..Default::default()
        };
        let (slope, aspect) = slope_aspect(&dem, &params).unwrap();
        for r in 3..9 {
            for c in 3..9 {
                assert_close(slope.get(r, c), 0.1, 1e-12);
            }
        }
        for r in 1..11 {
            for c in 1..11 {
                assert_close(aspect.get(r, c), 270.0, 1e-12);
            }
        }
    }

    #[test]
    fn aspect_points_downhill() {
        // Rising toward the north: water flows south (180 degrees).
        let dem = plane(6, 6, 1.0, 0.0, 1.0);
        let params = TerrainParams {
            focal_radius: 1.0,
            ..Default::default()
        };
        let (_, aspect) = slope_aspect(&dem, &params).unwrap();
        assert_close(aspect.get(2, 2), 180.0, 1e-12);
    }

    #[test]
    fn flat_dem_has_zero_slope_and_no_aspect() {
        let dem = grid(5, 5, vec![3.0; 25]);
        let (slope, aspect) = slope_aspect(&dem, &TerrainParams { focal_radius: 2.0, ..Default::default() }).unwrap();
        assert!(slope.values().iter().all(|&s| s == 0.0));
        assert!(aspect.values().iter().all(|&a| a == -1.0));
    }

    #[test]
    fn curvature_cases() {
        // Integer-valued plane so the Laplacian is exactly zero before the cube root.
        let p = plane(5, 5, 1.0, 3.0, -7.0);
        assert!(curvature(&p).unwrap().values().iter().all(|&v| v == 0.0));
        let mut v = vec![0.0; 9];
        v[4] = -8.0;
        let pit = grid(3, 3, v);
        assert_close(laplacian(&pit).unwrap().get(1, 1), 32.0, 0.0);
        let curv = curvature(&pit).unwrap();
        assert_close(curv.get(1, 1), 32f64.cbrt(), 1e-12);
        assert_close(curv.get(1, 1), 3.1748, 1e-4);
        let neg = curvature(&pit.map(|x| -x).unwrap()).unwrap();
        for (a, b) in curv.values().iter().zip(neg.values()) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn single_pit_fill() {
        let mut v = vec![5.0; 9];
        v[4] = 3.0;
        let (filled, sdepth) = fill_sinks_sdepth(&grid(3, 3, v)).unwrap();
        assert_eq!(sdepth.get(1, 1), 2.0);
        assert_eq!(filled.get(1, 1), 5.0);
        assert_eq!(sdepth.values().iter().filter(|&&d| d != 0.0).count(), 1);
    }

    #[test]
    fn nested_bowl_fill() {
        // 5x5: outer ring 5, middle ring 4, centre 2.
        let v = (0..25)
            .map(|i| {
                let (r, c) = (i / 5 as usize, i % 5);
                match (r as isize - 2).abs().max((c as isize - 2).abs()) {
                    2 => 5.0,
                    1 => 4.0,
                    _ => 2.0,
                }
            })
            .collect();
        let (_, sdepth) = fill_sinks_sdepth(&grid(5, 5, v)).unwrap();
        assert_eq!(sdepth.get(2, 2), 3.0);
        assert_eq!(sdepth.get(1, 1), 1.0);
        assert_eq!(sdepth.get(0, 0), 0.0);
    }

    #[test]
    fn ramp_has_no_sinks() {
        let ramp = grid(4, 4, (0..16).map(|i| i as f64).collect());
        let (_, sdepth) = fill_sinks_sdepth(&ramp).unwrap();
        assert!(sdepth.values().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn fully_masked_dem_has_no_outlet() {
        let g = Grid::new(Geometry::new(2, 2, 1.0), vec![1.0; 4], vec![true; 4]).unwrap();
        assert!(matches!(fill_sinks_sdepth(&g), Err(Error::Drainage(_))));
    }

    #[test]
    fn accumulation_on_a_line() {
        let dem = grid(1, 3, vec![3.0, 2.0, 1.0]);
        let area = contributing_area(&dem, None).unwrap();
        assert_eq!(area.values(), &[0.0, 1.0, 2.0]);
        let single = grid(1, 1, vec![4.0]);
        assert_eq!(flow_accumulation(&single, None, 1.0).unwrap().values(), &[0.0]);
        let imp = grid(1, 3, vec![1.0, 0.0, 1.0]);
        let weighted = contributing_area(&dem, Some(&imp)).unwrap();
        assert_eq!(weighted.values(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn accumulation_respects_cutoff() {
        let dem = grid(1, 40, (0..40).map(|i| 40.0 - i as f64).collect());
        let fa = flow_accumulation(&dem, None, 0.002).unwrap();
        let cap = (0.002 * HECTARE).cbrt();
        assert!(fa.values().iter().all(|&v| v <= cap + 1e-12));
        assert_eq!(*fa.values().last().unwrap(), cap);
    }

    #[test]
    fn flat_after_fill_drains_toward_outlet() {
        // Pit in the centre of a 3x5 strip sloping west; filled flat must
        // route everything out of the west edge.
        let v = vec![
            1.0, 2.0, 3.0, 4.0, 5.0, //
            1.0, 2.0, 0.5, 4.0, 5.0, //
            1.0, 2.0, 3.0, 4.0, 5.0,
        ];
        let dem = grid(3, 5, v);
        let (filled, _) = fill_sinks_sdepth(&dem).unwrap();
        let recv = d8_receivers(&filled);
        // Equal-elevation neighbours (0,1), (1,1), (2,1) all drain west; lowest index wins.
        assert_eq!(recv[7], Some(1));
        let area = contributing_area(&filled, None).unwrap();
        let total: f64 = [0, 5, 10].iter().map(|&i| area.values()[i] + 1.0).sum();
        assert_eq!(total, 15.0);
    }

    #[test]
    fn twi_cases() {
        let s = grid(1, 1, vec![1.0]);
        let a = grid(1, 1, vec![0.0]);
        assert_eq!(twi(&s, &a).unwrap().values(), &[0.0]);
        let flat = grid(1, 1, vec![0.0]);
        let t = twi(&flat, &a).unwrap().values()[0];
        assert_close(t, (1e6f64).ln().sqrt(), 1e-12);
        assert_close(t, 3.7170, 1e-4);
        let mut prev = 0.0;
        for k in 0..20 {
            let ak = grid(1, 1, vec![k as f64 * 7.0]);
            let v = twi(&grid(1, 1, vec![0.3]), &ak).unwrap().values()[0];
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn imperviousness_cases() {
        let geo = Geometry::new(2, 2, 1.0);
        let one = LandUse::new(Grid::filled(geo, 0.4).unwrap(), vec![7; 4]).unwrap();
        let (c, s, sa) = imperviousness(&one).unwrap();
        assert!(c.values().iter().chain(s.values()).chain(sa.values()).all(|&v| (v - 0.4).abs() < 1e-15));

        let two = LandUse::new(
            Grid::from_values(geo, vec![0.1, 0.3, 0.8, 0.8]).unwrap(),
            vec![1, 1, 2, 2],
        )
        .unwrap();
        let (_, s, sa) = imperviousness(&two).unwrap();
        assert_close(s.values()[0], 0.2, 1e-15);
        assert_close(s.values()[1], 0.2, 1e-15);
        assert_close(s.values()[2], 0.8, 1e-15);
        assert_eq!(s.values(), sa.values());

        let zero = LandUse::new(Grid::filled(geo, 0.0).unwrap(), vec![1, 2, 3, 3]).unwrap();
        let (c, s, sa) = imperviousness(&zero).unwrap();
        assert!(c.values().iter().chain(s.values()).chain(sa.values()).all(|&v| v == 0.0));
    }

    #[test]
    fn area_weighting_scales_by_relative_size() {
        let geo = Geometry::new(1, 3, 1.0);
        let land = LandUse::new(Grid::filled(geo, 0.5).unwrap(), vec![1, 1, 2]).unwrap();
        let (_, _, sa) = imperviousness(&land).unwrap();
        assert_eq!(sa.values(), &[0.5, 0.5, 0.25]);
    }

    #[test]
    fn flimp_is_zero_without_imperviousness_and_bounded_by_flacc() {
        let dem = grid(3, 3, vec![9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
        let zero = Grid::filled(*dem.geometry(), 0.0).unwrap();
        let (flimp, _) = flimp_flslo(&dem, &zero, &zero, &TerrainParams::default()).unwrap();
        assert!(flimp.values().iter().all(|&v| v == 0.0));
        let imp = grid(3, 3, vec![0.2, 1.0, 0.5, 0.0, 0.9, 0.3, 1.0, 0.1, 0.7]);
        let weighted = contributing_area(&dem, Some(&imp)).unwrap();
        let unit = contributing_area(&dem, None).unwrap();
        for (w, u) in weighted.values().iter().zip(unit.values()) {
            assert!(w <= u);
        }
    }

    #[test]
    fn pipe_volume_cases() {
        let geom = Geometry::new(4, 4, 5.0);
        let empty = pipe_raster(&PipeNetwork::default(), &geom).unwrap();
        assert!(empty.values().iter().all(|&v| v == 0.0));

        let seg = PipeSegment { x1: 1.0, y1: 1.5, x2: 3.0, y2: 1.5, diameter: 1.0 };
        let one = pipe_raster(&PipeNetwork::new(vec![seg]).unwrap(), &geom).unwrap();
        // Lower-left cell is row 3, col 0.
        assert_close(one.get(3, 0), std::f64::consts::PI / 4.0 * 2.0, 1e-12);
        assert_close(one.values().iter().sum::<f64>(), 1.5708, 1e-4);

        let long = PipeSegment { x1: 0.5, y1: 0.5, x2: 19.0, y2: 13.0, diameter: 0.6 };
        let mid = (long.x1 + long.x2) / 2.0;
        let midy = (long.y1 + long.y2) / 2.0;
        let halves = vec![
            PipeSegment { x2: mid, y2: midy, ..long },
            PipeSegment { x1: mid, y1: midy, ..long },
        ];
        let whole = pipe_raster(&PipeNetwork::new(vec![long]).unwrap(), &geom).unwrap();
        let split = pipe_raster(&PipeNetwork::new(halves).unwrap(), &geom).unwrap();
        for (a, b) in whole.values().iter().zip(split.values()) {
            assert_close(*a, *b, 1e-12);
        }
        assert_close(
            whole.values().iter().sum::<f64>(),
            long.length() * long.cross_section(),
            1e-10,
        );
    }

    #[test]
    fn invalid_pipes_rejected() {
        let zero_d = PipeSegment { x1: 0.0, y1: 0.0, x2: 1.0, y2: 0.0, diameter: 0.0 };
        assert!(PipeNetwork::new(vec![zero_d]).is_err());
        let zero_len = PipeSegment { x1: 1.0, y1: 1.0, x2: 1.0, y2: 1.0, diameter: 1.0 };
        assert!(PipeNetwork::new(vec![zero_len]).is_err());
    }

    #[test]
    fn derive_all_contract() {
        let geom = Geometry::new(8, 8, 10.0);
        let dem = Grid::from_values(
            geom,
            (0..64).map(|i| ((i * 37) % 11) as f64 + (i / 8) as f64 * 0.5).collect(),
        )
        .unwrap();
        let land = LandUse::new(
            Grid::from_values(geom, (0..64).map(|i| (i % 4) as f64 / 4.0).collect()).unwrap(),
            (0..64).map(|i| (i / 16) as i64).collect(),
        )
        .unwrap();
        let pipes = PipeNetwork::new(vec![PipeSegment { x1: 5.0, y1: 5.0, x2: 75.0, y2: 40.0, diameter: 0.8 }]).unwrap();
        let params = TerrainParams { focal_radius: 20.0, ..Default::default() };
        let stack = derive_all(&dem, &land, &pipes, &params).unwrap();
        assert_eq!(stack.ids(), FeatureId::ALL.to_vec());
        for (id, g) in stack.channels() {
            let lo = if id.is_signed() { -1.0 } else { 0.0 };
            assert!(g.values().iter().all(|v| (lo..=1.0).contains(v)), "{id}");
        }
        let again = derive_all(&dem, &land, &pipes, &params).unwrap();
        for ((_, a), (_, b)) in stack.channels().iter().zip(again.channels()) {
            let bits = |g: &Grid| g.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn derive_all_degenerate_inputs() {
        let geom = Geometry::new(6, 6, 10.0);
        let dem = Grid::filled(geom, 12.0).unwrap();
        let land = LandUse::new(Grid::filled(geom, 0.0).unwrap(), vec![0; 36]).unwrap();
        let stack = derive_all(&dem, &land, &PipeNetwork::default(), &TerrainParams::default()).unwrap();
        for id in [FeatureId::Sdepth, FeatureId::Flimp, FeatureId::Flslo, FeatureId::Pipe] {
            assert!(stack.channel(id).unwrap().values().iter().all(|&v| v == 0.0), "{id}");
        }
    }

    #[test]
    fn dem_l_of_plane_vanishes_in_interior() {
        let dem = plane(10, 10, 10.0, 0.05, 0.02);
        let params = TerrainParams { focal_radius: 20.0, ..Default::default() };
        let land = LandUse::new(Grid::filled(*dem.geometry(), 0.5).unwrap(), vec![0; 100]).unwrap();
        let raw = derive_raw(&dem, &land, &PipeNetwork::default(), &params).unwrap();
        let dem_l = &raw[FeatureId::DemL.index()].1;
        for r in 2..8 {
            for c in 2..8 {
                assert_close(dem_l.get(r, c), 0.0, 1e-12);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let geom = Geometry::new(2, 3, 1.0);
        let land = LandUse::new(
            Grid::new(geom, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], vec![false, false, true, false, false, false]).unwrap(),
            vec![1, 1, 0, 2, 2, 2],
        )
        .unwrap();
        let p = dir.path().join("land.csv");
        write_land_use_csv(&land, &p).unwrap();
        let back = read_land_use_csv(&p, geom).unwrap();
        assert_eq!(back.impervious, land.impervious);
        let pipes = PipeNetwork::new(vec![PipeSegment { x1: 0.0, y1: 0.5, x2: 2.0, y2: 1.5, diameter: 0.3 }]).unwrap();
        let pp = dir.path().join("pipes.csv");
        write_pipes_csv(&pipes, &pp).unwrap();
        assert_eq!(read_pipes_csv(&pp).unwrap(), pipes);
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        fn dems() -> impl Strategy<Value = Grid> {
            (2usize..8, 2usize..8)
                .prop_flat_map(|(r, c)| (Just(r), Just(c), proptest::collection::vec(0u8..6, r * c)))
                .prop_map(|(r, c, v)| grid(r, c, v.into_iter().map(f64::from).collect()))
        }

        proptest! {
            #[test]
            fn filling_only_raises(dem in dems()) {
                let (filled, sdepth) = fill_sinks_sdepth(&dem).unwrap();
                for i in 0..dem.values().len() {
                    prop_assert!(filled.values()[i] >= dem.values()[i]);
                    prop_assert!(sdepth.values()[i] >= 0.0);
                }
                // A filled surface has nothing left to fill.
                let (_, again) = fill_sinks_sdepth(&filled).unwrap();
                prop_assert!(again.values().iter().all(|&d| d == 0.0));
            }

            #[test]
            fn every_cell_drains_to_an_outlet(dem in dems()) {
                let (filled, _) = fill_sinks_sdepth(&dem).unwrap();
                let recv = d8_receivers(&filled);
                let outlets = outlet_cells(&filled);
                let area = contributing_area(&filled, None).unwrap();
                let n = recv.len();
                let mut reaching = 0.0;
                for (i, r) in recv.iter().enumerate() {
                    prop_assert!(r.is_some() || outlets[i]);
                    if r.is_none() {
                        reaching += area.values()[i] + 1.0;
                    }
                }
                // Each cell is counted once, at the outlet where its path ends.
                prop_assert_eq!(reaching, n as f64);
            }
        }
    }
}
