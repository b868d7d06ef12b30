//! Building, persisting and loading the synthetic event dataset.
//!
//! Layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/events.csv                 id,return_period,duration,total_mm
//! <root>/world/dem.asc, land_use.csv, pipes.csv
//! <root>/features/<FEATURE>.asc
//! <root>/events/<id>/hyetograph.csv, maxh.asc, depth_<step>.asc
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::{self, FeatureId, FeatureStack, Grid};
use crate::terrain::{self, TerrainParams};

use super::oracle::{FloodOracle, FloodTruth, MassBalance, OracleParams};
use super::storm::{event_set, Hyetograph, StormParams};
use super::world::{gen_world, World};

pub const MANIFEST: &str = "manifest.json";
pub const EVENTS_CSV: &str = "events.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub cell_size: f64,
    pub storm: StormParams,
    pub oracle: OracleParams,
    pub terrain: TerrainParams,
}

impl DatasetConfig {
    pub fn new(seed: u64) -> Self {
        DatasetConfig {
            seed,
            rows: 64,
            cols: 64,
            cell_size: 10.0,
            storm: StormParams::default(),
            oracle: OracleParams::default(),
            terrain: TerrainParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub id: String,
    pub rain: Hyetograph,
    pub truth: FloodTruth,
    pub balance: MassBalance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub world: World,
    /// Normalized stack shared by every event.
    pub features: FeatureStack,
    pub events: Vec<Event>,
}

pub fn event_id(k: usize) -> String {
    format!("ev{k:02}")
}

pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let world = gen_world(cfg.seed, cfg.rows, cfg.cols, cfg.cell_size)?;
    let features = terrain::derive_all(&world.dem, &world.land, &world.pipes, &cfg.terrain)?;
    let oracle = FloodOracle::new(&world.dem, &world.land, &world.pipes, &cfg.oracle)?;
    let events = event_set(&cfg.storm)?
        .into_iter()
        .enumerate()
        .map(|(k, rain)| {
            log::debug!("event {k}: T={:.2} D={}", rain.return_period, rain.duration);
            let (truth, balance) = oracle.run(&rain);
            Event {
                id: event_id(k),
                rain,
                truth,
                balance,
            }
        })
        .collect();
    Ok(Dataset {
        config: *cfg,
        world,
        features,
        events,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub features: Vec<String>,
    pub events: usize,
    pub series_written: bool,
    /// Relative path -> hex SHA-256.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EventRow {
    id: String,
    return_period: f64,
    duration: u32,
    total_mm: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes the dataset under `root`. Per-step depth rasters are optional
/// since they dominate the size on disk.
pub fn write_dataset(ds: &Dataset, root: &Path, with_series: bool) -> Result<Manifest> {
    let mut files = Vec::new();
    let mut put = |rel: String| -> PathBuf {
        let p = root.join(&rel);
        files.push(rel);
        p
    };
    mkdir(&root.join("world"))?;
    mkdir(&root.join("features"))?;
    raster::write_grid(&ds.world.dem, put("world/dem.asc".into()))?;
    terrain::write_land_use_csv(&ds.world.land, put("world/land_use.csv".into()))?;
    terrain::write_pipes_csv(&ds.world.pipes, put("world/pipes.csv".into()))?;
    for (id, g) in ds.features.channels() {
        raster::write_grid(g, put(format!("features/{id}.asc")))?;
    }
    let mut rows = csv::Writer::from_path(put(EVENTS_CSV.into()))?;
    for ev in &ds.events {
        let dir = format!("events/{}", ev.id);
        mkdir(&root.join(&dir))?;
        ev.rain.write_csv(put(format!("{dir}/hyetograph.csv")))?;
        raster::write_grid(&ev.truth.maxh, put(format!("{dir}/maxh.asc")))?;
        if with_series {
            for (k, g) in ev.truth.depth_series.iter().enumerate() {
                raster::write_grid(g, put(format!("{dir}/depth_{k:03}.asc")))?;
            }
        }
        rows.serialize(EventRow {
            id: ev.id.clone(),
            return_period: ev.rain.return_period,
            duration: ev.rain.duration,
            total_mm: ev.rain.total(),
        })?;
    }
    rows.flush().map_err(|e| Error::io(root.join(EVENTS_CSV), e))?;
    drop(rows);

    let mut hashes = BTreeMap::new();
    for rel in files {
        let h = sha256_file(&root.join(&rel))?;
        hashes.insert(rel, h);
    }
    let manifest = Manifest {
        config: ds.config,
        features: ds.features.ids().iter().map(|f| f.to_string()).collect(),
        events: ds.events.len(),
        series_written: with_series,
        files: hashes,
    };
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// One event as needed for training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub id: String,
    pub rain: Hyetograph,
    pub maxh: Grid,
    /// Per-step depths; empty unless loaded with series.
    pub depth_series: Vec<Grid>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub manifest: Manifest,
    pub features: FeatureStack,
    pub events: Vec<EventRecord>,
}

impl LoadedDataset {
    pub fn open(root: &Path) -> Result<Self> {
        Self::open_with(root, false)
    }

    /// Like [`open`](Self::open); `with_series` also reads every
    /// `depth_{k}.asc`, which must then exist.
    pub fn open_with(root: &Path, with_series: bool) -> Result<Self> {
        let mpath = root.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut channels = Vec::new();
        for name in &manifest.features {
            let id: FeatureId = name.parse()?;
            channels.push((id, raster::read_grid(root.join(format!("features/{id}.asc")))?));
        }
        let features = raster::stack(channels)?;
        let mut rdr = csv::Reader::from_path(root.join(EVENTS_CSV))?;
        let mut events = Vec::new();
        for row in rdr.deserialize() {
            let row: EventRow = row?;
            let dir = root.join("events").join(&row.id);
            let rain = Hyetograph::read_csv(dir.join("hyetograph.csv"), row.return_period)?;
            if rain.duration != row.duration {
                return Err(Error::Format(format!(
                    "event {}: hyetograph lasts {} min, index says {}",
                    row.id, rain.duration, row.duration
                )));
            }
            let maxh = raster::read_grid(dir.join("maxh.asc"))?;
            if !maxh.geometry().matches(features.geometry()) {
                return Err(Error::Dimension(format!("event {}: maxH geometry differs", row.id)));
            }
            let mut depth_series = Vec::new();
            if with_series {
                if !manifest.series_written {
                    return Err(Error::Invalid(format!(
                        "{} was written without per-step depths",
                        root.display()
                    )));
                }
                for k in 0..rain.steps() {
                    let g = raster::read_grid(dir.join(format!("depth_{k:03}.asc")))?;
                    if !g.geometry().matches(features.geometry()) {
                        return Err(Error::Dimension(format!("event {}: depth {k} geometry differs", row.id)));
                    }
                    depth_series.push(g);
                }
            }
            events.push(EventRecord {
                id: row.id,
                rain,
                maxh,
                depth_series,
            });
        }
        if events.is_empty() {
            return Err(Error::EmptyDomain(format!("{} lists no events", root.display())));
        }
        Ok(LoadedDataset {
            manifest,
            features,
            events,
        })
    }

    /// Relative paths whose current hash differs from the manifest.
    pub fn verify(&self, root: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for (rel, want) in &self.manifest.files {
            let p = root.join(rel);
            if !p.exists() || &sha256_file(&p)? != want {
                bad.push(rel.clone());
            }
        }
        Ok(bad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DatasetConfig {
        DatasetConfig {
            rows: 16,
            cols: 32,
            terrain: TerrainParams {
                focal_radius: 30.0,
                ..TerrainParams::default()
            },
            ..DatasetConfig::new(seed)
        }
    }

    #[test]
    fn ninety_events_over_one_stack() {
        let ds = build_dataset(&small(3)).unwrap();
        assert_eq!(ds.events.len(), 90);
        assert_eq!(ds.features.len(), 14);
        for ev in &ds.events {
            assert!(ev.balance.relative_residual() < 1e-9);
            assert!(ev.truth.maxh.geometry().matches(ds.features.geometry()));
        }
    }

    #[test]
    fn maxh_sum_grows_with_return_period() {
        let ds = build_dataset(&small(5)).unwrap();
        for chunk in ds.events.chunks(30) {
            let sums: Vec<f64> = chunk.iter().map(|e| e.truth.maxh.values().iter().sum()).collect();
            assert!(sums.windows(2).all(|w| w[0] <= w[1]), "{sums:?}");
        }
    }

    #[test]
    fn write_load_and_verify() {
        let ds = build_dataset(&small(8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&ds, dir.path(), true).unwrap();
        assert!(m.files.contains_key("events/ev00/depth_000.asc"));
        assert_eq!(m.files.len(), 3 + 14 + 1 + 90 * 2 + 30 * (12 + 24 + 36));
        let back = LoadedDataset::open(dir.path()).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.events.len(), 90);
        for (a, b) in back.events.iter().zip(&ds.events) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.rain, b.rain);
            assert_eq!(a.maxh, b.truth.maxh);
        }
        assert!(back.verify(dir.path()).unwrap().is_empty());
        fs::write(dir.path().join("events/ev05/maxh.asc"), "junk").unwrap();
        assert_eq!(back.verify(dir.path()).unwrap(), vec!["events/ev05/maxh.asc".to_string()]);
    }

    #[test]
    fn regeneration_is_bitwise_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = write_dataset(&build_dataset(&small(4)).unwrap(), a.path(), false).unwrap();
        let mb = write_dataset(&build_dataset(&small(4)).unwrap(), b.path(), false).unwrap();
        assert_eq!(ma, mb);
    }
}
