//! Single-band rasters, the ESRI ASCII grid format, normalization and
//! channel stacking.
//!
//! Grids are stored row-major and north-up: row 0 is the northern edge,
//! column 0 the western edge. `origin_x`/`origin_y` locate the lower-left
//! (south-west) corner of the grid, as in the ESRI header.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nodata sentinel used in files. Never stored in memory.
pub const NODATA_SENTINEL: f64 = -9999.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub rows: usize,
    pub cols: usize,
    pub cell_size: f64,
    pub origin_x: f64,
    pub origin_y: f64,
}

impl Geometry {
    pub fn new(rows: usize, cols: usize, cell_size: f64) -> Self {
        Geometry {
            rows,
            cols,
            cell_size,
            origin_x: 0.0,
            origin_y: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_size * self.cell_size
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    /// Projected x/y extent of a cell: (xmin, ymin, xmax, ymax).
    pub fn cell_bounds(&self, row: usize, col: usize) -> (f64, f64, f64, f64) {
        let xmin = self.origin_x + col as f64 * self.cell_size;
        let ymax = self.origin_y + (self.rows - row) as f64 * self.cell_size;
        (xmin, ymax - self.cell_size, xmin + self.cell_size, ymax)
    }

    fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Dimension(format!(
                "grid must be at least 1x1, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !(self.cell_size > 0.0) || !self.cell_size.is_finite() {
            return Err(Error::Invalid(format!(
                "cell size must be positive, got {}",
                self.cell_size
            )));
        }
        Ok(())
    }

    /// Same rows, cols and cell size (origins may differ by rounding).
    pub fn matches(&self, other: &Geometry) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.cell_size == other.cell_size
    }

    /// The 8 neighbours of a cell in fixed order (N, NE, E, SE, S, SW, W, NW)
    /// together with their centre-to-centre distance in cell units.
    pub fn neighbors8(&self, idx: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        const OFFSETS: [(isize, isize, f64); 8] = [
            (-1, 0, 1.0),
            (-1, 1, std::f64::consts::SQRT_2),
            (0, 1, 1.0),
            (1, 1, std::f64::consts::SQRT_2),
            (1, 0, 1.0),
            (1, -1, std::f64::consts::SQRT_2),
            (0, -1, 1.0),
            (-1, -1, std::f64::consts::SQRT_2),
        ];
        let r = (idx / self.cols) as isize;
        let c = (idx % self.cols) as isize;
        OFFSETS.iter().filter_map(move |&(dr, dc, d)| {
            let (nr, nc) = (r + dr, c + dc);
            if nr < 0 || nc < 0 || nr >= self.rows as isize || nc >= self.cols as isize {
                None
            } else {
                Some((nr as usize * self.cols + nc as usize, d))
            }
        })
    }

    pub fn on_edge(&self, idx: usize) -> bool {
        let r = idx / self.cols;
        let c = idx % self.cols;
        r == 0 || c == 0 || r + 1 == self.rows || c + 1 == self.cols
    }
}

/// A single-band raster with an explicit nodata mask (`true` = nodata).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    geom: Geometry,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl Grid {
    pub fn new(geom: Geometry, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        geom.validate()?;
        if values.len() != geom.len() || mask.len() != geom.len() {
            return Err(Error::Dimension(format!(
                "expected {} cells, got {} values and {} mask flags",
                geom.len(),
                values.len(),
                mask.len()
            )));
        }
        let mut values = values;
        for (i, (v, &m)) in values.iter_mut().zip(&mask).enumerate() {
            if m {
                *v = 0.0;
            } else if !v.is_finite() {
                return Err(Error::Invalid(format!(
                    "non-finite value {} at cell ({}, {})",
                    v,
                    i / geom.cols,
                    i % geom.cols
                )));
            }
        }
        Ok(Grid { geom, values, mask })
    }

    pub fn from_values(geom: Geometry, values: Vec<f64>) -> Result<Self> {
        let mask = vec![false; values.len()];
        Grid::new(geom, values, mask)
    }

    pub fn filled(geom: Geometry, value: f64) -> Result<Self> {
        Grid::from_values(geom, vec![value; geom.len()])
    }

    /// Same geometry and mask, new values (masked cells forced to zero).
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Grid::new(self.geom, values, self.mask.clone())
    }

    pub fn with_mask(&self, mask: Vec<bool>) -> Result<Self> {
        Grid::new(self.geom, self.values.clone(), mask)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }
    pub fn rows(&self) -> usize {
        self.geom.rows
    }
    pub fn cols(&self) -> usize {
        self.geom.cols
    }
    pub fn cell_size(&self) -> f64 {
        self.geom.cell_size
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.geom.index(row, col)]
    }
    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.mask[self.geom.index(row, col)]
    }
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Values at unmasked cells, in row-major order.
    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| !m)
            .map(|(&v, _)| v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = self
            .values
            .iter()
            .zip(&self.mask)
            .map(|(&v, &m)| if m { 0.0 } else { f(v) })
            .collect();
        self.with_values(values)
    }

    fn valid_range(&self, what: &str) -> Result<(f64, f64)> {
        let mut it = self.valid_values();
        let first = it
            .next()
            .ok_or_else(|| Error::EmptyDomain(format!("{what}: every cell is masked")))?;
        Ok(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }
}

/// Min-max scaling of unmasked cells into [0, 1]. Constant grids map to 0.
pub fn normalize_unit(g: &Grid) -> Result<Grid> {
    let (lo, hi) = g.valid_range("normalize_unit")?;
    let span = hi - lo;
    if span == 0.0 {
        return g.map(|_| 0.0);
    }
    g.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
}

/// Zero-preserving symmetric scaling into [-1, 1]: v / max(|min|, |max|).
pub fn normalize_signed(g: &Grid) -> Result<Grid> {
    let (lo, hi) = g.valid_range("normalize_signed")?;
    let scale = lo.abs().max(hi.abs());
    if scale == 0.0 {
        return g.map(|_| 0.0);
    }
    g.map(|v| (v / scale).clamp(-1.0, 1.0))
}

/// Affine [-1, 1] mapping, kept as the configurable alternative to
/// [`normalize_signed`].
pub fn normalize_affine_signed(g: &Grid) -> Result<Grid> {
    let (lo, hi) = g.valid_range("normalize_affine_signed")?;
    let span = hi - lo;
    if span == 0.0 {
        return g.map(|_| 0.0);
    }
    g.map(|v| (2.0 * (v - lo) / span - 1.0).clamp(-1.0, 1.0))
}

fn parse_header_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse::<T>()
        .map_err(|_| Error::Format(format!("value of `{key}` is not a number: {raw:?}")))
}

/// Reads an ESRI ASCII grid. Cells equal to the header's `nodata_value`
/// become masked cells holding 0.
pub fn read_grid(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_grid(&text)
}

pub fn parse_grid(text: &str) -> Result<Grid> {
    let mut ncols = None;
    let mut nrows = None;
    let mut xll = None;
    let mut yll = None;
    let mut cellsize = None;
    let mut nodata = None;

    let mut lines = text.lines().peekable();
    while let Some(line) = lines.peek() {
        let mut parts = line.split_whitespace();
        let Some(key) = parts.next() else {
            lines.next();
            continue;
        };
        if key.parse::<f64>().is_ok() {
            break;
        }
        let value = parts
            .next()
            .ok_or_else(|| Error::Format(format!("header key `{key}` has no value")))?;
        match key.to_ascii_lowercase().as_str() {
            "ncols" => ncols = Some(parse_header_value::<usize>("ncols", value)?),
            "nrows" => nrows = Some(parse_header_value::<usize>("nrows", value)?),
            "xllcorner" => xll = Some(parse_header_value::<f64>("xllcorner", value)?),
            "yllcorner" => yll = Some(parse_header_value::<f64>("yllcorner", value)?),
            "cellsize" => cellsize = Some(parse_header_value::<f64>("cellsize", value)?),
            "nodata_value" => nodata = Some(parse_header_value::<f64>("nodata_value", value)?),
            other => return Err(Error::Format(format!("unknown header key `{other}`"))),
        }
        lines.next();
    }

    let missing = |k: &str| Error::Format(format!("missing header key `{k}`"));
    let geom = Geometry {
        cols: ncols.ok_or_else(|| missing("ncols"))?,
        rows: nrows.ok_or_else(|| missing("nrows"))?,
        origin_x: xll.ok_or_else(|| missing("xllcorner"))?,
        origin_y: yll.ok_or_else(|| missing("yllcorner"))?,
        cell_size: cellsize.ok_or_else(|| missing("cellsize"))?,
    };
    geom.validate()?;
    let nodata = nodata.unwrap_or(NODATA_SENTINEL);

    let mut values = Vec::with_capacity(geom.len());
    let mut mask = Vec::with_capacity(geom.len());
    for token in lines.flat_map(|l| l.split_whitespace()) {
        let i = values.len();
        let (row, col) = (i / geom.cols, i % geom.cols);
        if i >= geom.len() {
            return Err(Error::Parse {
                row,
                col,
                token: token.to_string(),
            });
        }
        let v: f64 = token.parse().map_err(|_| Error::Parse {
            row,
            col,
            token: token.to_string(),
        })?;
        if v == nodata {
            values.push(0.0);
            mask.push(true);
        } else if v.is_finite() {
            values.push(v);
            mask.push(false);
        } else {
            return Err(Error::Parse {
                row,
                col,
                token: token.to_string(),
            });
        }
    }
    if values.len() != geom.len() {
        return Err(Error::Dimension(format!(
            "header declares {} cells, body holds {}",
            geom.len(),
            values.len()
        )));
    }
    Grid::new(geom, values, mask)
}

struct CellToken(f64);

impl fmt::Display for CellToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == 0.0 {
            f.write_str("0")
        } else {
            write!(f, "{:.16e}", self.0)
        }
    }
}

/// Writes an ESRI ASCII grid with 17 significant digits per value; masked
/// cells are written as `-9999`.
pub fn write_grid(g: &Grid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_grid_to(g, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_grid_to(g: &Grid, w: &mut impl Write) -> std::io::Result<()> {
    let geo = g.geometry();
    writeln!(w, "ncols {}", geo.cols)?;
    writeln!(w, "nrows {}", geo.rows)?;
    writeln!(w, "xllcorner {:?}", geo.origin_x)?;
    writeln!(w, "yllcorner {:?}", geo.origin_y)?;
    writeln!(w, "cellsize {:?}", geo.cell_size)?;
    writeln!(w, "NODATA_value -9999")?;
    for r in 0..geo.rows {
        for c in 0..geo.cols {
            if c > 0 {
                w.write_all(b" ")?;
            }
            let i = geo.index(r, c);
            if g.mask()[i] {
                w.write_all(b"-9999")?;
            } else {
                write!(w, "{}", CellToken(g.values()[i]))?;
            }
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// The fourteen spatial flood-driving features, in canonical channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureId {
    Dem,
    Asp,
    Curv,
    DemL,
    Sdepth,
    Slope,
    Flacc,
    Twi,
    ImpC,
    ImpS,
    ImpSa,
    Flimp,
    Flslo,
    Pipe,
}

impl FeatureId {
    pub const ALL: [FeatureId; 14] = [
        FeatureId::Dem,
        FeatureId::Asp,
        FeatureId::Curv,
        FeatureId::DemL,
        FeatureId::Sdepth,
        FeatureId::Slope,
        FeatureId::Flacc,
        FeatureId::Twi,
        FeatureId::ImpC,
        FeatureId::ImpS,
        FeatureId::ImpSa,
        FeatureId::Flimp,
        FeatureId::Flslo,
        FeatureId::Pipe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureId::Dem => "DEM",
            FeatureId::Asp => "ASP",
            FeatureId::Curv => "CURV",
            FeatureId::DemL => "DEM_L",
            FeatureId::Sdepth => "SDEPTH",
            FeatureId::Slope => "SLOPE",
            FeatureId::Flacc => "FLACC",
            FeatureId::Twi => "TWI",
            FeatureId::ImpC => "IMP_C",
            FeatureId::ImpS => "IMP_S",
            FeatureId::ImpSa => "IMP_SA",
            FeatureId::Flimp => "FLIMP",
            FeatureId::Flslo => "FLSLO",
            FeatureId::Pipe => "PIPE",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Features scaled into [-1, 1] instead of [0, 1].
    pub fn is_signed(self) -> bool {
        matches!(self, FeatureId::Curv | FeatureId::DemL)
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureId::ALL
            .iter()
            .copied()
            .find(|f| f.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown feature id {s:?}")))
    }
}

/// An ordered multi-channel raster sharing one nodata mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    channels: Vec<(FeatureId, Grid)>,
    mask: Vec<bool>,
}

/// Stacks channels; the shared mask is the union of the channel masks.
pub fn stack(channels: Vec<(FeatureId, Grid)>) -> Result<FeatureStack> {
    let Some((first_id, first)) = channels.first() else {
        return Err(Error::EmptyDomain("stack of zero channels".into()));
    };
    let geom = *first.geometry();
    let mut mask = vec![false; geom.len()];
    for (i, (id, g)) in channels.iter().enumerate() {
        if !g.geometry().matches(&geom) {
            return Err(Error::Dimension(format!(
                "channel {id} is {}x{} @ {} but channel {first_id} is {}x{} @ {}",
                g.rows(),
                g.cols(),
                g.cell_size(),
                geom.rows,
                geom.cols,
                geom.cell_size
            )));
        }
        if channels[..i].iter().any(|(other, _)| other == id) {
            return Err(Error::Invalid(format!("duplicate feature id {id}")));
        }
        for (m, &gm) in mask.iter_mut().zip(g.mask()) {
            *m |= gm;
        }
    }
    Ok(FeatureStack { channels, mask })
}

impl FeatureStack {
    pub fn channels(&self) -> &[(FeatureId, Grid)] {
        &self.channels
    }
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
    pub fn geometry(&self) -> &Geometry {
        self.channels[0].1.geometry()
    }
    pub fn len(&self) -> usize {
        self.channels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }
    pub fn ids(&self) -> Vec<FeatureId> {
        self.channels.iter().map(|(id, _)| *id).collect()
    }
    pub fn channel(&self, id: FeatureId) -> Option<&Grid> {
        self.channels.iter().find(|(f, _)| *f == id).map(|(_, g)| g)
    }

    /// Sub-stack restricted to `ids`, keeping canonical order.
    pub fn select(&self, ids: &[FeatureId]) -> Result<FeatureStack> {
        let picked = self
            .channels
            .iter()
            .filter(|(id, _)| ids.contains(id))
            .cloned()
            .collect::<Vec<_>>();
        if picked.len() != ids.len() {
            return Err(Error::Invalid(format!(
                "requested {} features, stack provides {}",
                ids.len(),
                picked.len()
            )));
        }
        stack(picked)
    }

    /// Channel-major planar data (C x H x W) with masked cells zeroed.
    pub fn to_planar(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.channels.len() * self.mask.len());
        for (_, g) in &self.channels {
            out.extend(
                g.values()
                    .iter()
                    .zip(&self.mask)
                    .map(|(&v, &m)| if m { 0.0 } else { v }),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: usize, cols: usize, v: &[f64]) -> Grid {
        Grid::from_values(Geometry::new(rows, cols, 1.0), v.to_vec()).unwrap()
    }

    #[test]
    fn ingest_masks_nodata_cells_as_zero() {
        let text = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nnodata_value -9999\n1 -9999\n3 4\n";
        let g = parse_grid(text).unwrap();
        assert_eq!(g.masked_count(), 1);
        assert!(g.is_masked(0, 1));
        assert_eq!(g.get(0, 1), 0.0);
        assert_eq!(g.get(1, 1), 4.0);
    }

    #[test]
    fn missing_cellsize_is_format_error() {
        let text = "ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\nnodata_value -9999\n1 2\n";
        match parse_grid(text) {
            Err(Error::Format(msg)) => assert!(msg.contains("cellsize")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_token_reports_position() {
        let text = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2\n3 x\n";
        match parse_grid(text) {
            Err(Error::Parse { row, col, .. }) => assert_eq!((row, col), (1, 1)),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn zero_grid_writes_zero_tokens_and_masked_sentinel() {
        let g = Grid::new(
            Geometry::new(2, 2, 5.0),
            vec![0.0; 4],
            vec![false, false, true, false],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_grid_to(&g, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let body: Vec<&str> = text.lines().skip(6).flat_map(|l| l.split(' ')).collect();
        assert_eq!(body, vec!["0", "0", "-9999", "0"]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.asc");
        let g = Grid::new(
            Geometry {
                rows: 2,
                cols: 3,
                cell_size: 2.5,
                origin_x: 10.25,
                origin_y: -3.0,
            },
            vec![1.0 / 3.0, -2.0e-300, 7.0, 0.0, 1e17, std::f64::consts::PI],
            vec![false, false, false, true, false, false],
        )
        .unwrap();
        write_grid(&g, &path).unwrap();
        assert_eq!(read_grid(&path).unwrap(), g);
    }

    #[test]
    fn unit_normalization() {
        let g = normalize_unit(&grid(1, 3, &[2.0, 4.0, 6.0])).unwrap();
        assert_eq!(g.values(), &[0.0, 0.5, 1.0]);
        let c = normalize_unit(&grid(1, 2, &[5.0, 5.0])).unwrap();
        assert_eq!(c.values(), &[0.0, 0.0]);
        let id = normalize_unit(&grid(1, 3, &[0.0, 0.25, 1.0])).unwrap();
        assert_eq!(id.values(), &[0.0, 0.25, 1.0]);
    }

    #[test]
    fn signed_normalization() {
        let g = normalize_signed(&grid(1, 2, &[-4.0, 2.0])).unwrap();
        assert_eq!(g.values(), &[-1.0, 0.5]);
        let z = normalize_signed(&grid(1, 2, &[0.0, 0.0])).unwrap();
        assert_eq!(z.values(), &[0.0, 0.0]);
        let id = normalize_signed(&grid(1, 2, &[-1.0, 1.0])).unwrap();
        assert_eq!(id.values(), &[-1.0, 1.0]);
    }

    #[test]
    fn normalization_of_fully_masked_grid_fails() {
        let g = Grid::new(Geometry::new(1, 2, 1.0), vec![1.0, 2.0], vec![true, true]).unwrap();
        assert!(matches!(normalize_unit(&g), Err(Error::EmptyDomain(_))));
        assert!(matches!(normalize_signed(&g), Err(Error::EmptyDomain(_))));
    }

    #[test]
    fn masked_cells_stay_zero_after_normalization() {
        let g = Grid::new(Geometry::new(1, 3, 1.0), vec![1.0, 9.0, 3.0], vec![false, true, false])
            .unwrap();
        let n = normalize_unit(&g).unwrap();
        assert_eq!(n.values(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn stack_union_mask_and_errors() {
        let geo = Geometry::new(1, 3, 1.0);
        let a = Grid::new(geo, vec![1.0; 3], vec![true, false, false]).unwrap();
        let b = Grid::new(geo, vec![1.0; 3], vec![false, false, true]).unwrap();
        let one = stack(vec![(FeatureId::Dem, a.clone())]).unwrap();
        assert_eq!(one.mask(), a.mask());
        let s = stack(vec![(FeatureId::Dem, a.clone()), (FeatureId::Asp, b.clone())]).unwrap();
        assert_eq!(s.mask(), &[true, false, true]);
        assert_eq!(s.ids(), vec![FeatureId::Dem, FeatureId::Asp]);
        assert!(stack(vec![(FeatureId::Dem, a.clone()), (FeatureId::Dem, b)]).is_err());
        let other = Grid::filled(Geometry::new(3, 1, 1.0), 0.0).unwrap();
        assert!(matches!(
            stack(vec![(FeatureId::Dem, a), (FeatureId::Pipe, other)]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn feature_ids_parse_and_order() {
        for (i, f) in FeatureId::ALL.iter().enumerate() {
            assert_eq!(f.index(), i);
            assert_eq!(f.as_str().parse::<FeatureId>().unwrap(), *f);
        }
        assert!(FeatureId::Curv.is_signed() && FeatureId::DemL.is_signed());
        assert_eq!(FeatureId::ALL.iter().filter(|f| f.is_signed()).count(), 2);
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        fn cells() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
            (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
                (Just(r), Just(c), proptest::collection::vec(-50.0f64..50.0, r * c))
            })
        }

        proptest! {
            #[test]
            fn normalized_ranges((r, c, v) in cells()) {
                let g = grid(r, c, &v);
                for x in normalize_unit(&g).unwrap().values() {
                    prop_assert!((0.0..=1.0).contains(x));
                }
                for x in normalize_signed(&g).unwrap().values() {
                    prop_assert!((-1.0..=1.0).contains(x));
                }
                for x in normalize_affine_signed(&g).unwrap().values() {
                    prop_assert!((-1.0..=1.0).contains(x));
                }
            }

            #[test]
            fn signed_scaling_keeps_sign_and_zero((r, c, v) in cells()) {
                let out = normalize_signed(&grid(r, c, &v)).unwrap();
                for (a, b) in v.iter().zip(out.values()) {
                    prop_assert!(a.signum() == b.signum() || *a == 0.0 || *b == 0.0);
                    prop_assert!((*a == 0.0) == (*b == 0.0));
                }
            }
        }
    }
}
