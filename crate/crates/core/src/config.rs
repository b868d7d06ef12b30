//! Run configuration: line-oriented `key = value` text with `#` comments.
//!
//! Every key has a default except `seed`. Unknown keys, duplicates and
//! malformed lines are configuration errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::ClipMode;
use crate::bayesopt::BoConfig;
use crate::error::{Error, Result};
use crate::models::{CnnKind, HeadKind, ModelSpec, RnnKind};
use crate::raster::FeatureId;
use crate::synthdata::DatasetConfig;
use crate::trainer::{TargetMode, TrainConfig};

/// Every accepted key with its default, in the order the resolved config
/// is printed.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", ""),
    ("synth.rows", "64"),
    ("synth.cols", "64"),
    ("synth.cell_size", "10"),
    ("synth.write_series", "true"),
    ("storm.a1", "10"),
    ("storm.c", "0.8"),
    ("storm.b", "10"),
    ("storm.n", "0.7"),
    ("storm.peak_ratio", "0.4"),
    ("storm.step", "10"),
    ("oracle.phi", "0.2"),
    ("oracle.kappa", "0.05"),
    ("terrain.focal_radius", "100"),
    ("terrain.flacc_cutoff", "1"),
    ("terrain.flimp_cutoff", "35"),
    ("terrain.flslo_cutoff", "10"),
    ("terrain.affine_signed", "false"),
    ("model.cnn", "deeplabv3plus"),
    ("model.rnn", "lstm"),
    ("model.features", "all"),
    ("model.base_width", "16"),
    ("model.rnn_hidden", "64"),
    ("model.fusion_channels", "16"),
    ("model.head", "gap_fc"),
    ("model.dropout", "0.2"),
    ("model.leaky_slope", "0.01"),
    ("train.epochs", "100"),
    ("train.batch_size", "8"),
    ("train.lr", "0.01"),
    ("train.clip", "1"),
    ("train.clip_mode", "per_array"),
    ("train.split_fraction", "0.9"),
    ("train.mode", "static"),
    ("train.rain_scale", "10"),
    ("bo.iterations", "100"),
    ("bo.initial", "10"),
    ("bo.pool", "256"),
    ("bo.lambda", "0.5"),
    ("bo.noise", "0.0001"),
    ("bo.fixed_count", "0"),
    ("bo.epochs", "10"),
    ("bo.validation_fraction", "0.2"),
];

/// Raw key/value pairs after defaults, file and overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

fn parse_line(line: &str) -> Option<std::result::Result<(String, String), String>> {
    let body = match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
    .trim();
    if body.is_empty() {
        return None;
    }
    Some(match body.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(format!("expected `key = value`, got {body:?}")),
    })
}

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig {
            values: KEYS
                .iter()
                .filter(|(_, v)| !v.is_empty())
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Parses config text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::defaults();
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let Some(kv) = parse_line(line) else { continue };
            let (k, v) = kv.map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
            if !seen.insert(k.clone()) {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
            cfg.set(&k, &v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("{key} is required")))
    }

    fn typed<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key)? {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            v => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.typed("seed")
    }

    /// Checks that every key parses, so a bad value fails before any work.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.dataset()?;
        self.write_series()?;
        self.model_spec(1, 16, 16)?;
        self.features()?;
        self.train()?.validate()?;
        self.bo()?.validate()?;
        self.bo_epochs()?;
        self.bo_validation_fraction()?;
        Ok(())
    }

    pub fn dataset(&self) -> Result<DatasetConfig> {
        let mut d = DatasetConfig::new(self.seed()?);
        d.rows = self.typed("synth.rows")?;
        d.cols = self.typed("synth.cols")?;
        d.cell_size = self.typed("synth.cell_size")?;
        d.storm.a1 = self.typed("storm.a1")?;
        d.storm.c = self.typed("storm.c")?;
        d.storm.b = self.typed("storm.b")?;
        d.storm.n = self.typed("storm.n")?;
        d.storm.peak_ratio = self.typed("storm.peak_ratio")?;
        d.storm.step = self.typed("storm.step")?;
        d.oracle.phi = self.typed("oracle.phi")?;
        d.oracle.kappa = self.typed("oracle.kappa")?;
        d.terrain.focal_radius = self.typed("terrain.focal_radius")?;
        d.terrain.flacc_cutoff = self.typed("terrain.flacc_cutoff")?;
        d.terrain.flimp_cutoff = self.typed("terrain.flimp_cutoff")?;
        d.terrain.flslo_cutoff = self.typed("terrain.flslo_cutoff")?;
        d.terrain.affine_signed = self.flag("terrain.affine_signed")?;
        Ok(d)
    }

    pub fn write_series(&self) -> Result<bool> {
        self.flag("synth.write_series")
    }

    /// Channels fed to the model, in table order for `all`.
    pub fn features(&self) -> Result<Vec<FeatureId>> {
        let v = self.get("model.features")?;
        if v == "all" {
            return Ok(FeatureId::ALL.to_vec());
        }
        let ids = v
            .split(',')
            .map(|s| s.trim().parse::<FeatureId>())
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Config(format!("model.features: {e}")))?;
        if ids.is_empty() {
            return Err(Error::Config("model.features is empty".into()));
        }
        Ok(ids)
    }

    pub fn model_spec(&self, in_channels: usize, height: usize, width: usize) -> Result<ModelSpec> {
        let cnn: CnnKind = self.get("model.cnn")?.parse().map_err(cfg_err("model.cnn"))?;
        let rnn: RnnKind = self.get("model.rnn")?.parse().map_err(cfg_err("model.rnn"))?;
        let mut s = ModelSpec::new(cnn, rnn, in_channels, height, width);
        s.base_width = self.typed("model.base_width")?;
        s.rnn_hidden = self.typed("model.rnn_hidden")?;
        s.fusion_channels = self.typed("model.fusion_channels")?;
        s.head = self.get("model.head")?.parse::<HeadKind>().map_err(cfg_err("model.head"))?;
        s.dropout = self.typed("model.dropout")?;
        s.leaky_slope = self.typed("model.leaky_slope")?;
        s.validate().map_err(cfg_err("model"))?;
        Ok(s)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let clip_mode = match self.get("train.clip_mode")? {
            "per_array" => ClipMode::PerArray,
            "global" => ClipMode::Global,
            "off" => ClipMode::Off,
            v => {
                return Err(Error::Config(format!(
                    "train.clip_mode: expected per_array, global or off, got {v:?}"
                )))
            }
        };
        let mode: TargetMode = self.get("train.mode")?.parse()?;
        Ok(TrainConfig {
            epochs: self.typed("train.epochs")?,
            batch_size: self.typed("train.batch_size")?,
            lr: self.typed("train.lr")?,
            clip: self.typed("train.clip")?,
            clip_mode,
            split_fraction: self.typed("train.split_fraction")?,
            seed: self.seed()?,
            mode,
            rain_scale: self.typed("train.rain_scale")?,
        })
    }

    pub fn bo(&self) -> Result<BoConfig> {
        let fixed: usize = self.typed("bo.fixed_count")?;
        Ok(BoConfig {
            iterations: self.typed("bo.iterations")?,
            initial: self.typed("bo.initial")?,
            pool: self.typed("bo.pool")?,
            lambda: self.typed("bo.lambda")?,
            noise: self.typed("bo.noise")?,
            seed: self.seed()?,
            fixed_count: (fixed > 0).then_some(fixed),
        })
    }

    /// Epochs per trial when the optimizer trains models.
    pub fn bo_epochs(&self) -> Result<usize> {
        self.typed("bo.epochs")
    }

    /// Share of the training events held out to score each trial.
    pub fn bo_validation_fraction(&self) -> Result<f64> {
        let f: f64 = self.typed("bo.validation_fraction")?;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("bo.validation_fraction {f} outside (0, 1)")));
        }
        Ok(f)
    }

    /// The fully resolved configuration as parseable text.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            if let Some(v) = self.values.get(*k) {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}

fn cfg_err(key: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Config(m) => Error::Config(format!("{key}: {m}")),
        other => Error::Config(format!("{key}: {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_defaults() {
        let c = RunConfig::parse("# run\nseed = 5  # trailing\n\ntrain.epochs=3\nmodel.features = DEM, SDEPTH\n").unwrap();
        assert_eq!(c.seed().unwrap(), 5);
        assert_eq!(c.train().unwrap().epochs, 3);
        assert_eq!(c.train().unwrap().lr, 0.01);
        assert_eq!(c.features().unwrap(), vec![FeatureId::Dem, FeatureId::Sdepth]);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::parse("seed = 1\nbogus = 2"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("just words"), Err(Error::Config(_))));
        let c = RunConfig::parse("train.epochs = 2").unwrap();
        assert!(matches!(c.seed(), Err(Error::Config(_))));
        let c = RunConfig::parse("seed = 1\ntrain.lr = fast").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = RunConfig::parse("seed = 1\nmodel.cnn = resnet").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_and_round_trip() {
        let mut c = RunConfig::parse("seed = 1").unwrap();
        c.apply_override("bo.fixed_count=7").unwrap();
        c.apply_override("train.clip_mode = global").unwrap();
        assert!(c.apply_override("nope=1").is_err());
        assert!(c.apply_override("novalue").is_err());
        assert_eq!(c.bo().unwrap().fixed_count, Some(7));
        assert_eq!(c.train().unwrap().clip_mode, ClipMode::Global);
        let again = RunConfig::parse(&c.resolved()).unwrap();
        assert_eq!(again, c);
        assert_eq!(c.resolved().lines().count(), KEYS.len());
    }
}
