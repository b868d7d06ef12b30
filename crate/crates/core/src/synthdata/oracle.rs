//! Fill-and-spill flood oracle.
//!
//! Each rain step is applied instantaneously: per-cell runoff, local pipe
//! capture up to the inlet capacity, then steepest-descent routing of the
//! remainder over the current water surface into its terminal cell, where
//! it is poured. Pouring raises a flat pond over the cheapest boundary cells
//! first (a priority flood keyed by water surface, then index); when the
//! boundary drops below the pond level the rest spills downhill, and when the
//! pond reaches an outlet cell the rest leaves the domain.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Geometry, Grid};
use crate::terrain::{self, LandUse, PipeNetwork};

use super::storm::Hyetograph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    /// Share of rain on pervious ground that still runs off.
    pub phi: f64,
    /// Fraction of in-cell pipe volume captured per step.
    pub kappa: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams {
            phi: 0.2,
            kappa: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloodTruth {
    /// Water depth (m) after each rain step.
    pub depth_series: Vec<Grid>,
    pub maxh: Grid,
}

/// Event volumes in m³.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MassBalance {
    pub rain: f64,
    pub retained: f64,
    pub drained: f64,
    pub ponded: f64,
    pub outflow: f64,
}

impl MassBalance {
    /// `|rain - (ponded + drained + retained + outflow)| / rain`, or the
    /// absolute residual for a dry event.
    pub fn relative_residual(&self) -> f64 {
        let r = (self.rain - (self.ponded + self.drained + self.retained + self.outflow)).abs();
        if self.rain > 0.0 {
            r / self.rain
        } else {
            r
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Key(f64, usize);

impl Eq for Key {}
impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Key {
    // Min-heap on (surface, index).
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

pub struct FloodOracle {
    geom: Geometry,
    z: Vec<f64>,
    mask: Vec<bool>,
    outlet: Vec<bool>,
    runoff_coef: Vec<f64>,
    capacity: Vec<f64>,
}

impl FloodOracle {
    pub fn new(dem: &Grid, land: &LandUse, pipes: &PipeNetwork, p: &OracleParams) -> Result<Self> {
        if !(p.phi >= 0.0 && p.phi <= 1.0) {
            return Err(Error::Invalid(format!("phi must lie in [0, 1], got {}", p.phi)));
        }
        if !(p.kappa >= 0.0) || !p.kappa.is_finite() {
            return Err(Error::Invalid(format!("kappa must be nonnegative, got {}", p.kappa)));
        }
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
        let outlet = terrain::outlet_cells(&dem);
        if !outlet.iter().any(|&o| o) {
            return Err(Error::Drainage("the domain has no outlet cell".into()));
        }
        let imp = land.impervious.values();
        let runoff_coef = imp.iter().map(|&c| c + p.phi * (1.0 - c)).collect();
        let capacity = terrain::pipe_raster(pipes, &geom)?
            .values()
            .iter()
            .map(|v| v * p.kappa)
            .collect();
        Ok(FloodOracle {
            geom,
            z: dem.values().to_vec(),
            mask,
            outlet,
            runoff_coef,
            capacity,
        })
    }

    /// Steepest strictly lower unmasked neighbour on surface `w`.
    fn receiver(&self, w: &[f64], i: usize) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for (j, d) in self.geom.neighbors8(i) {
            if self.mask[j] || w[j] >= w[i] {
                continue;
            }
            let s = (w[i] - w[j]) / d;
            if best.map_or(true, |(bs, bj)| s > bs || (s == bs && j < bj)) {
                best = Some((s, j));
            }
        }
        best.map(|(_, j)| j)
    }

    fn descend(&self, w: &[f64], mut i: usize) -> usize {
        while let Some(j) = self.receiver(w, i) {
            i = j;
        }
        i
    }

    /// Pours `v` m³ at terminal `s`; returns the volume leaving the domain.
    fn pour(&self, w: &mut [f64], stamp: &mut [u64], gen: &mut u64, mut s: usize, mut v: f64) -> f64 {
        let area = self.geom.cell_area();
        loop {
            if self.outlet[s] {
                return v;
            }
            *gen += 1;
            let g = *gen;
            let mut region = vec![s];
            let mut level = w[s];
            let mut heap = BinaryHeap::new();
            stamp[s] = g;
            let push = |i: usize, heap: &mut BinaryHeap<Key>, stamp: &mut [u64], w: &[f64]| {
                for (j, _) in self.geom.neighbors8(i) {
                    if !self.mask[j] && stamp[j] != g {
                        stamp[j] = g;
                        heap.push(Key(w[j], j));
                    }
                }
            };
            push(s, &mut heap, stamp, w);
            let next = loop {
                let Some(Key(wb, b)) = heap.pop() else {
                    // Enclosed by nodata: the pond just rises.
                    level += v / (region.len() as f64 * area);
                    for &r in &region {
                        w[r] = level;
                    }
                    return 0.0;
                };
                if wb < level {
                    for &r in &region {
                        w[r] = level;
                    }
                    break self.descend(w, b);
                }
                let cost = region.len() as f64 * area * (wb - level);
                if v <= cost {
                    level += v / (region.len() as f64 * area);
                    for &r in &region {
                        w[r] = level;
                    }
                    return 0.0;
                }
                v -= cost;
                level = wb;
                if self.outlet[b] {
                    for &r in &region {
                        w[r] = level;
                    }
                    return v;
                }
                region.push(b);
                push(b, &mut heap, stamp, w);
            };
            s = next;
        }
    }

    pub fn run(&self, rain: &Hyetograph) -> (FloodTruth, MassBalance) {
        let n = self.geom.len();
        let area = self.geom.cell_area();
        let mut w = self.z.clone();
        let mut stamp = vec![0u64; n];
        let mut gen = 0u64;
        let mut bal = MassBalance::default();
        let mut series = Vec::with_capacity(rain.steps());
        let mut maxh = vec![0.0f64; n];
        let mut terminal = vec![usize::MAX; n];
        let mut inflow = vec![0.0f64; n];
        for &mm in &rain.intensities {
            terminal.fill(usize::MAX);
            inflow.fill(0.0);
            for i in 0..n {
                if self.mask[i] {
                    continue;
                }
                let fall = mm / 1000.0 * area;
                let run = fall * self.runoff_coef[i];
                let drain = run.min(self.capacity[i]);
                bal.rain += fall;
                bal.retained += fall - run;
                bal.drained += drain;
                let excess = run - drain;
                if excess > 0.0 {
                    let t = self.terminal_of(&w, &mut terminal, i);
                    inflow[t] += excess;
                }
            }
            for t in 0..n {
                if inflow[t] > 0.0 {
                    bal.outflow += self.pour(&mut w, &mut stamp, &mut gen, t, inflow[t]);
                }
            }
            let depth: Vec<f64> = (0..n)
                .map(|i| if self.mask[i] { 0.0 } else { w[i] - self.z[i] })
                .collect();
            for (m, d) in maxh.iter_mut().zip(&depth) {
                *m = m.max(*d);
            }
            series.push(self.grid(depth));
        }
        bal.ponded = (0..n)
            .filter(|&i| !self.mask[i])
            .map(|i| (w[i] - self.z[i]) * area)
            .sum();
        (
            FloodTruth {
                depth_series: series,
                maxh: self.grid(maxh),
            },
            bal,
        )
    }

    /// Memoised terminal lookup along receivers on the step's surface.
    fn terminal_of(&self, w: &[f64], memo: &mut [usize], i: usize) -> usize {
        let mut path = Vec::new();
        let mut k = i;
        let t = loop {
            if memo[k] != usize::MAX {
                break memo[k];
            }
            path.push(k);
            match self.receiver(w, k) {
                Some(j) => k = j,
                None => break k,
            }
        };
        for p in path {
            memo[p] = t;
        }
        t
    }

    fn grid(&self, values: Vec<f64>) -> Grid {
        Grid::new(self.geom, values, self.mask.clone()).expect("oracle geometry is valid")
    }
}

pub fn flood_oracle(
    dem: &Grid,
    land: &LandUse,
    pipes: &PipeNetwork,
    rain: &Hyetograph,
    p: &OracleParams,
) -> Result<(FloodTruth, MassBalance)> {
    Ok(FloodOracle::new(dem, land, pipes, p)?.run(rain))
}
