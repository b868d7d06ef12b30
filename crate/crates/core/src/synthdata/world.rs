//! Seeded synthetic catchments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::{Geometry, Grid};
use crate::terrain::{self, LandUse, PipeNetwork, PipeSegment};

pub const IMPERVIOUS_CLASSES: [f64; 4] = [0.0, 0.3, 0.6, 0.9];
pub const MIN_DEPRESSIONS: usize = 3;
/// North-south fall, metres per metre.
const TILT: f64 = 0.005;
const TRUNK_DIAMETER: f64 = 1.2;
const BRANCH_DIAMETER: f64 = 0.6;
const MAX_ATTEMPTS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub dem: Grid,
    pub land: LandUse,
    pub pipes: PipeNetwork,
}

impl World {
    pub fn geometry(&self) -> &Geometry {
        self.dem.geometry()
    }
}

/// Number of 8-connected regions with positive sink depth.
pub fn count_depressions(dem: &Grid) -> Result<usize> {
    let (_, sdepth) = terrain::fill_sinks_sdepth(dem)?;
    let geom = *dem.geometry();
    let wet: Vec<bool> = sdepth.values().iter().map(|&d| d > 0.0).collect();
    let mut seen = vec![false; geom.len()];
    let mut count = 0;
    for start in 0..geom.len() {
        if !wet[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for (j, _) in geom.neighbors8(i) {
                if wet[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    Ok(count)
}

fn gaussian_field(geom: &Geometry, rng: &mut ChaCha8Rng, count: usize, amp: (f64, f64), sigma: (f64, f64), margin: usize) -> Vec<f64> {
    let mut z = vec![0.0; geom.len()];
    for _ in 0..count {
        let r0 = rng.gen_range(margin..geom.rows - margin) as f64 + rng.gen::<f64>();
        let c0 = rng.gen_range(margin..geom.cols - margin) as f64 + rng.gen::<f64>();
        let a = rng.gen_range(amp.0..amp.1);
        let s = rng.gen_range(sigma.0..sigma.1);
        for r in 0..geom.rows {
            for c in 0..geom.cols {
                let d2 = (r as f64 - r0).powi(2) + (c as f64 - c0).powi(2);
                z[geom.index(r, c)] += a * (-d2 / (2.0 * s * s)).exp();
            }
        }
    }
    z
}

fn gen_dem(geom: &Geometry, rng: &mut ChaCha8Rng) -> Result<Grid> {
    let cs = geom.cell_size;
    let n_bumps = 3 + geom.len() / 1024;
    let n_pits = rng.gen_range(MIN_DEPRESSIONS..=MIN_DEPRESSIONS + 2);
    let margin = (geom.rows.min(geom.cols) / 8).max(2);
    let bumps = gaussian_field(geom, rng, n_bumps, (0.5, 2.0), (2.0, 6.0), 0);
    let pits = gaussian_field(geom, rng, n_pits, (1.0, 2.5), (1.5, 3.5), margin);
    let values = (0..geom.len())
        .map(|i| {
            let r = i / geom.cols;
            TILT * cs * (geom.rows - 1 - r) as f64 + bumps[i] - pits[i]
        })
        .collect();
    Grid::from_values(*geom, values)
}

/// Sorted distinct cut positions on multiples of `len / 16`.
fn cuts(rng: &mut ChaCha8Rng, len: usize, count: usize) -> Vec<usize> {
    let unit = len / 16;
    let mut out: Vec<usize> = rand::seq::index::sample(rng, 15, count)
        .into_iter()
        .map(|k| (k + 1) * unit)
        .collect();
    out.sort_unstable();
    out
}

fn band(cuts: &[usize], x: usize) -> usize {
    cuts.iter().take_while(|&&c| c <= x).count()
}

fn gen_land(geom: &Geometry, rng: &mut ChaCha8Rng) -> Result<LandUse> {
    let k = rng.gen_range(2..=3);
    let rc = cuts(rng, geom.rows, k);
    let k = rng.gen_range(2..=3);
    let cc = cuts(rng, geom.cols, k);
    let blocks = (rc.len() + 1) * (cc.len() + 1);
    let classes: Vec<f64> = (0..blocks)
        .map(|_| IMPERVIOUS_CLASSES[rng.gen_range(0..IMPERVIOUS_CLASSES.len())])
        .collect();
    let mut imp = vec![0.0; geom.len()];
    let mut ids = vec![0i64; geom.len()];
    for r in 0..geom.rows {
        for c in 0..geom.cols {
            let b = band(&rc, r) * (cc.len() + 1) + band(&cc, c);
            imp[geom.index(r, c)] = classes[b];
            ids[geom.index(r, c)] = b as i64 + 1;
        }
    }
    LandUse::new(Grid::from_values(*geom, imp)?, ids)
}

fn centre(geom: &Geometry, r: usize, c: usize) -> (f64, f64) {
    let (x0, y0, x1, y1) = geom.cell_bounds(r, c);
    ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
}

/// A north-south trunk falling with the terrain and east-west laterals
/// joining it.
fn gen_pipes(geom: &Geometry, rng: &mut ChaCha8Rng) -> Result<PipeNetwork> {
    let (rows, cols) = (geom.rows, geom.cols);
    let trunk_col = rng.gen_range(cols / 4..=3 * cols / 4);
    let top = rows / 8;
    let (tx, ty0) = centre(geom, top, trunk_col);
    let (_, ty1) = centre(geom, rows - 1, trunk_col);
    let mut segs = vec![PipeSegment {
        x1: tx,
        y1: ty0,
        x2: tx,
        y2: ty1,
        diameter: TRUNK_DIAMETER,
    }];
    let reach = (cols / 8).max(2);
    for _ in 0..rng.gen_range(2..=4) {
        let r = rng.gen_range(top..rows - 1);
        let c = if rng.gen_bool(0.5) && trunk_col >= reach {
            rng.gen_range(0..=trunk_col - reach)
        } else {
            rng.gen_range((trunk_col + reach).min(cols - 1)..cols)
        };
        if c == trunk_col {
            continue;
        }
        let (x, y) = centre(geom, r, c);
        segs.push(PipeSegment {
            x1: x,
            y1: y,
            x2: tx,
            y2: y,
            diameter: BRANCH_DIAMETER,
        });
    }
    PipeNetwork::new(segs)
}

/// Deterministic world for `seed`. The DEM is redrawn from the same stream
/// until it holds at least [`MIN_DEPRESSIONS`] closed depressions.
pub fn gen_world(seed: u64, rows: usize, cols: usize, cell_size: f64) -> Result<World> {
    if rows < 16 || cols < 16 || rows % 16 != 0 || cols % 16 != 0 {
        return Err(Error::Invalid(format!(
            "world size must be a multiple of 16 and at least 16x16, got {rows}x{cols}"
        )));
    }
    if !(cell_size > 0.0) || !cell_size.is_finite() {
        return Err(Error::Invalid(format!("cell size must be positive, got {cell_size}")));
    }
    let geom = Geometry::new(rows, cols, cell_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dem = None;
    for _ in 0..MAX_ATTEMPTS {
        let d = gen_dem(&geom, &mut rng)?;
        if count_depressions(&d)? >= MIN_DEPRESSIONS {
            dem = Some(d);
            break;
        }
    }
    let dem = dem.ok_or_else(|| {
        Error::Numerical(format!("no DEM with {MIN_DEPRESSIONS} depressions after {MAX_ATTEMPTS} draws"))
    })?;
    let land = gen_land(&geom, &mut rng)?;
    let pipes = gen_pipes(&geom, &mut rng)?;
    Ok(World { dem, land, pipes })
}
