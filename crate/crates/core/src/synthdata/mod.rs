//! Synthetic worlds, design storms and the flood oracle that stands in for a
//! hydrodynamic simulator.

pub mod dataset;
pub mod oracle;
pub mod storm;
pub mod world;

pub use dataset::{build_dataset, write_dataset, Dataset, DatasetConfig, Event, EventRecord, LoadedDataset, Manifest};
pub use oracle::{flood_oracle, FloodOracle, FloodTruth, MassBalance, OracleParams};
pub use storm::{design_storm, event_set, return_periods, Hyetograph, StormParams};
pub use world::{gen_world, World};
