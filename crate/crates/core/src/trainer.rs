//! Splitting, training, evaluation, timing and the 12-combination benchmark.
//!
//! Every random stream in a run derives from the single run seed through
//! [`sub_seed`]: stream 1 shuffles the split, 2 initializes weights, 3 orders
//! mini-batches and 4 draws dropout masks.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{apply_updates, Adam, ClipMode, Mode, Tape, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{self, PairedSeries, Scores, TaggedSeries};
use crate::models::{all_combos, CnnKind, HybridModel, ModelSpec, RnnKind};
use crate::raster::{FeatureId, FeatureStack};
use crate::synthdata::dataset::event_id;
use crate::synthdata::{design_storm, flood_oracle, gen_world, EventRecord, OracleParams, StormParams};
use crate::terrain::{self, TerrainParams};

pub const STREAM_SPLIT: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_SHUFFLE: u64 = 3;
pub const STREAM_DROPOUT: u64 = 4;

/// SplitMix64 of `seed + stream * golden`.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetMode {
    /// One sample per event, full hyetograph, target maxH.
    Static,
    /// One sample per (event, step): rain prefix up to the step, target the
    /// depth after it.
    Dynamic,
}

impl std::str::FromStr for TargetMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(TargetMode::Static),
            "dynamic" => Ok(TargetMode::Dynamic),
            _ => Err(Error::Config(format!("unknown mode {s:?} (static or dynamic)"))),
        }
    }
}

impl std::fmt::Display for TargetMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TargetMode::Static => "static",
            TargetMode::Dynamic => "dynamic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub clip_mode: ClipMode,
    pub split_fraction: f64,
    pub seed: u64,
    pub mode: TargetMode,
    /// mm per step that maps to a model input of 1.
    pub rain_scale: f64,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            lr: 0.01,
            clip: 1.0,
            clip_mode: ClipMode::PerArray,
            split_fraction: 0.9,
            seed,
            mode: TargetMode::Static,
            rain_scale: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split_fraction {} outside (0, 1)",
                self.split_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr {} must be a nonnegative number", self.lr)));
        }
        if !(self.rain_scale > 0.0) || !self.rain_scale.is_finite() {
            return Err(Error::Config(format!("rain_scale {} must be positive", self.rain_scale)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip {} must be positive", self.clip)));
        }
        Ok(())
    }

    /// Stable description used to decide whether cached runs still apply.
    pub fn fingerprint(&self) -> String {
        format!(
            "epochs={} batch_size={} lr={} clip={} clip_mode={:?} split_fraction={} seed={} mode={} rain_scale={}",
            self.epochs,
            self.batch_size,
            self.lr,
            self.clip,
            self.clip_mode,
            self.split_fraction,
            self.seed,
            self.mode,
            self.rain_scale
        )
    }
}

/// Items that may only be trained on.
#[derive(Debug, Clone)]
pub struct TrainSet<T>(Vec<T>);
/// Items that may only be evaluated on.
#[derive(Debug, Clone)]
pub struct TestSet<T>(Vec<T>);

macro_rules! set_impl {
    ($t:ident) => {
        impl<T> $t<T> {
            pub fn new(items: Vec<T>) -> Self {
                $t(items)
            }
            pub fn items(&self) -> &[T] {
                &self.0
            }
            pub fn len(&self) -> usize {
                self.0.len()
            }
            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }
            pub fn try_map<U>(self, f: impl FnOnce(Vec<T>) -> Result<Vec<U>>) -> Result<$t<U>> {
                Ok($t(f(self.0)?))
            }
        }
    };
}
set_impl!(TrainSet);
set_impl!(TestSet);

/// Seeded shuffle; the first `ceil(fraction * n)` items train.
pub fn split_dataset<T>(mut items: Vec<T>, fraction: f64, seed: u64) -> Result<(TrainSet<T>, TestSet<T>)> {
    let n = items.len();
    if n < 2 {
        return Err(Error::Invalid(format!("cannot split {n} events")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, STREAM_SPLIT));
    items.shuffle(&mut rng);
    // The tolerance keeps 0.9 * 90 at 81 despite rounding.
    let k = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
    let test = items.split_off(k);
    Ok((TrainSet(items), TestSet(test)))
}

/// One model input/target pair. Inputs and masks are shared between samples
/// of the same stack.
#[derive(Debug, Clone)]
pub struct Sample {
    pub event: String,
    pub return_period: f64,
    /// Dynamic-mode step index.
    pub step: Option<usize>,
    /// Planar `[C, H, W]`.
    pub x: Arc<Vec<f64>>,
    pub valid: Arc<Vec<bool>>,
    pub rain: Vec<f64>,
    pub target: Vec<f64>,
}

/// Turns events into samples over the shared feature stack.
/// Rain enters the model as mm per step divided by `rain_scale`.
pub fn build_samples(
    stack: &FeatureStack,
    events: &[EventRecord],
    mode: TargetMode,
    rain_scale: f64,
) -> Result<Vec<Sample>> {
    if !(rain_scale > 0.0) || !rain_scale.is_finite() {
        return Err(Error::Config(format!("rain_scale {rain_scale} must be positive")));
    }
    let scaled = |r: &[f64]| r.iter().map(|v| v / rain_scale).collect::<Vec<f64>>();
    let x = Arc::new(stack.to_planar());
    let valid: Arc<Vec<bool>> = Arc::new(stack.mask().iter().map(|m| !m).collect());
    let mut out = Vec::new();
    for ev in events {
        if !ev.maxh.geometry().matches(stack.geometry()) {
            return Err(Error::Dimension(format!("event {}: target geometry differs from stack", ev.id)));
        }
        match mode {
            TargetMode::Static => out.push(Sample {
                event: ev.id.clone(),
                return_period: ev.rain.return_period,
                step: None,
                x: x.clone(),
                valid: valid.clone(),
                rain: scaled(&ev.rain.intensities),
                target: ev.maxh.values().to_vec(),
            }),
            TargetMode::Dynamic => {
                if ev.depth_series.len() != ev.rain.steps() {
                    return Err(Error::Invalid(format!(
                        "event {}: dynamic mode needs {} depth rasters, found {}",
                        ev.id,
                        ev.rain.steps(),
                        ev.depth_series.len()
                    )));
                }
                for (t, g) in ev.depth_series.iter().enumerate() {
                    out.push(Sample {
                        event: ev.id.clone(),
                        return_period: ev.rain.return_period,
                        step: Some(t),
                        x: x.clone(),
                        valid: valid.clone(),
                        rain: scaled(&ev.rain.intensities[..=t]),
                        target: g.values().to_vec(),
                    });
                }
            }
        }
    }
    Ok(out)
}

struct Batch<'a> {
    x: Tensor,
    rain: Vec<&'a [f64]>,
    target: Vec<f64>,
    valid: Vec<bool>,
}

fn batch<'a>(spec: &ModelSpec, samples: &[&'a Sample]) -> Result<Batch<'a>> {
    let plane = spec.in_channels * spec.height * spec.width;
    let mut x = Vec::with_capacity(plane * samples.len());
    let mut target = Vec::new();
    let mut valid = Vec::new();
    for s in samples {
        if s.x.len() != plane {
            return Err(Error::Dimension(format!(
                "sample {} has {} input values, model expects {plane}",
                s.event,
                s.x.len()
            )));
        }
        x.extend_from_slice(&s.x);
        target.extend_from_slice(&s.target);
        valid.extend_from_slice(&s.valid);
    }
    Ok(Batch {
        x: Tensor::new(&[samples.len(), spec.in_channels, spec.height, spec.width], x)?,
        rain: samples.iter().map(|s| s.rain.as_slice()).collect(),
        target,
        valid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Sample-weighted mean training loss per epoch.
    pub loss_trace: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
}

/// Trains for `cfg.epochs` epochs. `on_epoch(epoch, mean_loss, model)` runs
/// after each epoch; returning `true` stops early.
pub fn train_with(
    model: &mut HybridModel,
    set: &TrainSet<Sample>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64, &HybridModel) -> bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::EmptyDomain("empty training set".into()));
    }
    let spec = model.spec().clone();
    let mut adam = Adam::new(model.store(), cfg.lr);
    adam.clip_norm = cfg.clip;
    adam.clip = cfg.clip_mode;
    let mut order_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, STREAM_SHUFFLE));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, STREAM_DROPOUT));
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut out = TrainOutcome {
        loss_trace: Vec::with_capacity(cfg.epochs),
        epoch_seconds: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let picked: Vec<&Sample> = chunk.iter().map(|&i| &set.items()[i]).collect();
            let b = batch(&spec, &picked)?;
            let (grads, updates, loss) = {
                let (net, store) = model.split_mut();
                let mut tape = Tape::new(store);
                let x = tape.input(b.x);
                let y = net.forward(&mut tape, x, &b.rain, Mode::Train, &mut drop_rng)?;
                let loss = tape.masked_mse(y, &b.target, &b.valid)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss {value} at epoch {} batch {}",
                        epoch + 1,
                        bi + 1
                    )));
                }
                let grads = tape.backward(loss)?.into_param_grads();
                (grads, tape.take_updates(), value)
            };
            apply_updates(model.store_mut(), updates);
            adam.step(model.store_mut(), &grads);
            total += loss * chunk.len() as f64;
        }
        let mean = total / set.len() as f64;
        out.loss_trace.push(mean);
        out.epoch_seconds.push(start.elapsed().as_secs_f64());
        log::debug!("epoch {} loss {mean:.6e}", epoch + 1);
        if on_epoch(epoch, mean, model) {
            break;
        }
    }
    Ok(out)
}

pub fn train(model: &mut HybridModel, set: &TrainSet<Sample>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, set, cfg, |_, _, _| false)
}

/// Evaluation-mode predictions for each sample, in order.
pub fn predict_samples(model: &HybridModel, samples: &[Sample], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let spec = model.spec().clone();
    let hw = spec.height * spec.width;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let picked: Vec<&Sample> = chunk.iter().collect();
        let b = batch(&spec, &picked)?;
        let y = model.predict(&b.x, &b.rain)?;
        out.extend(y.data().chunks(hw).map(|c| c.to_vec()));
    }
    Ok(out)
}

/// Masked-MSE of evaluation-mode predictions.
pub fn eval_loss(model: &HybridModel, samples: &[Sample]) -> Result<f64> {
    let preds = predict_samples(model, samples, 8)?;
    let (mut s, mut n) = (0.0, 0usize);
    for (p, smp) in preds.iter().zip(samples) {
        for i in 0..p.len() {
            if smp.valid[i] {
                s += (p[i] - smp.target[i]).powi(2);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyDomain("every pixel is masked".into()));
    }
    Ok(s / n as f64)
}

#[derive(Debug, Clone)]
pub struct EventScores {
    pub label: String,
    pub return_period: f64,
    pub scores: Scores,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Valid pixels of all test samples, pooled.
    pub pooled: Scores,
    pub pooled_series: PairedSeries,
    pub per_event: Vec<EventScores>,
    pub tagged: Vec<TaggedSeries>,
}

fn sample_label(s: &Sample) -> String {
    match s.step {
        Some(t) => format!("{}@{t}", s.event),
        None => s.event.clone(),
    }
}

fn report_from(samples: &[Sample], preds: &[Vec<f64>]) -> Result<EvalReport> {
    let (mut obs, mut sim) = (Vec::new(), Vec::new());
    let mut per_event = Vec::new();
    let mut tagged = Vec::new();
    for (s, p) in samples.iter().zip(preds) {
        let (mut o, mut q) = (Vec::new(), Vec::new());
        for i in 0..p.len() {
            if s.valid[i] {
                o.push(s.target[i]);
                q.push(p[i]);
            }
        }
        obs.extend_from_slice(&o);
        sim.extend_from_slice(&q);
        let series = PairedSeries::new(o, q)?;
        per_event.push(EventScores {
            label: sample_label(s),
            return_period: s.return_period,
            scores: Scores::compute_lenient(&series),
        });
        tagged.push(TaggedSeries {
            return_period: s.return_period,
            series,
        });
    }
    let pooled_series = PairedSeries::new(obs, sim)?;
    Ok(EvalReport {
        pooled: Scores::compute(&pooled_series)?,
        pooled_series,
        per_event,
        tagged,
    })
}

pub fn evaluate(model: &HybridModel, set: &TestSet<Sample>) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::EmptyDomain("empty test set".into()));
    }
    let preds = predict_samples(model, set.items(), 8)?;
    report_from(set.items(), &preds)
}

/// Scores a constant per-pixel prediction (e.g. a train-set mean map).
pub fn evaluate_constant(map: &[f64], set: &TestSet<Sample>) -> Result<EvalReport> {
    let preds = vec![map.to_vec(); set.len()];
    report_from(set.items(), &preds)
}

/// Per-pixel mean target over the training set.
pub fn mean_map(set: &TrainSet<Sample>) -> Result<Vec<f64>> {
    let first = set
        .items()
        .first()
        .ok_or_else(|| Error::EmptyDomain("empty training set".into()))?;
    let mut m = vec![0.0; first.target.len()];
    for s in set.items() {
        for (a, b) in m.iter_mut().zip(&s.target) {
            *a += b;
        }
    }
    let n = set.len() as f64;
    Ok(m.into_iter().map(|v| v / n).collect())
}

/// Median wall-clock seconds of `runs` single-sample forwards after
/// `warmup` discarded ones.
pub fn inference_seconds(model: &HybridModel, sample: &Sample, warmup: usize, runs: usize) -> Result<f64> {
    let b = batch(model.spec(), &[sample])?;
    for _ in 0..warmup {
        model.predict(&b.x, &b.rain)?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let t0 = Instant::now();
        std::hint::black_box(model.predict(&b.x, &b.rain)?);
        times.push(t0.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let m = times.len();
    Ok(if m % 2 == 1 {
        times[m / 2]
    } else {
        (times[m / 2 - 1] + times[m / 2]) / 2.0
    })
}

/// Channels of the small overfitting fixture.
pub const FIXTURE_FEATURES: [FeatureId; 7] = [
    FeatureId::Dem,
    FeatureId::Sdepth,
    FeatureId::Slope,
    FeatureId::Flacc,
    FeatureId::ImpC,
    FeatureId::Flimp,
    FeatureId::Pipe,
];
pub const FIXTURE_RETURN_PERIODS: [f64; 4] = [2.0, 10.0, 25.0, 100.0];
/// Four 10-minute steps.
pub const FIXTURE_DURATION: u32 = 40;

/// Four 16x16 samples, each its own seeded world with seven channels and
/// one oracle event. Distinct terrain per sample keeps batch statistics
/// at the 1x1 bottleneck from collapsing to a single value.
pub fn overfit_fixture(seed: u64, rain_scale: f64) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (k, &t) in FIXTURE_RETURN_PERIODS.iter().enumerate() {
        let world = gen_world(seed.wrapping_add(k as u64), 16, 16, 10.0)?;
        let stack = terrain::derive_all(&world.dem, &world.land, &world.pipes, &TerrainParams::default())?
            .select(&FIXTURE_FEATURES)?;
        let rain = design_storm(t, FIXTURE_DURATION, &StormParams::default())?;
        let (truth, _) = flood_oracle(&world.dem, &world.land, &world.pipes, &rain, &OracleParams::default())?;
        let ev = EventRecord {
            id: event_id(k),
            rain,
            maxh: truth.maxh,
            depth_series: truth.depth_series,
        };
        out.extend(build_samples(&stack, &[ev], TargetMode::Static, rain_scale)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub cnn: String,
    pub rnn: String,
    pub loss_trace: Vec<f64>,
    pub mae: f64,
    pub rmse: f64,
    pub nse: f64,
    pub kge: f64,
    pub train_seconds_per_epoch: f64,
    pub train_seconds_total: f64,
    pub inference_seconds_per_image: f64,
    pub parameter_count: usize,
    pub fingerprint: String,
}

impl RunReport {
    pub fn combo(&self) -> String {
        format!("{}+{}", self.rnn, self.cnn)
    }
    pub fn metric(&self, name: &str) -> f64 {
        match name {
            "MAE" => self.mae,
            "RMSE" => self.rmse,
            "NSE" => self.nse,
            _ => self.kge,
        }
    }
}

pub const MATRIX_COLUMNS: [&str; 8] = [
    "combo",
    "MAE",
    "RMSE",
    "NSE",
    "KGE",
    "train_s_per_epoch",
    "infer_s_per_image",
    "params",
];

/// Best combo per metric: lowest MAE/RMSE, highest NSE/KGE; ties go to the
/// lexicographically first combo name.
pub fn best_markers(rows: &[RunReport]) -> Vec<(String, String)> {
    ["MAE", "RMSE", "NSE", "KGE"]
        .iter()
        .filter_map(|&m| {
            let lower = matches!(m, "MAE" | "RMSE");
            let mut best: Option<&RunReport> = None;
            for r in rows {
                let v = r.metric(m);
                if v.is_nan() {
                    continue;
                }
                best = match best {
                    None => Some(r),
                    Some(b) => {
                        let bv = b.metric(m);
                        let better = if lower { v < bv } else { v > bv };
                        if better || (v == bv && r.combo() < b.combo()) {
                            Some(r)
                        } else {
                            Some(b)
                        }
                    }
                };
            }
            best.map(|b| (m.to_string(), b.combo()))
        })
        .collect()
}

pub fn write_matrix_csv(path: &Path, rows: &[RunReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MATRIX_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.combo(),
            metrics::fmt_real(r.mae),
            metrics::fmt_real(r.rmse),
            metrics::fmt_real(r.nse),
            metrics::fmt_real(r.kge),
            metrics::fmt_real(r.train_seconds_per_epoch),
            metrics::fmt_real(r.inference_seconds_per_image),
            r.parameter_count.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The timing-free part of the matrix, for reproducibility checks.
pub fn write_metric_table_csv(path: &Path, rows: &[RunReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["combo", "MAE", "RMSE", "NSE", "KGE", "params"])?;
    for r in rows {
        w.write_record([
            r.combo(),
            metrics::fmt_real(r.mae),
            metrics::fmt_real(r.rmse),
            metrics::fmt_real(r.nse),
            metrics::fmt_real(r.kge),
            r.parameter_count.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_best_csv(path: &Path, rows: &[RunReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "best_combo"])?;
    for (m, c) in best_markers(rows) {
        w.write_record([m, c])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_loss_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "mean_loss"])?;
    for (e, l) in trace.iter().enumerate() {
        w.write_record([(e + 1).to_string(), metrics::fmt_real(*l)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains and scores one hybrid; the model is initialized from the init
/// stream of `cfg.seed`.
pub fn run_one(
    spec: ModelSpec,
    train_set: &TrainSet<Sample>,
    test_set: &TestSet<Sample>,
    cfg: &TrainConfig,
) -> Result<(HybridModel, RunReport)> {
    let mut model = HybridModel::new(spec.clone(), sub_seed(cfg.seed, STREAM_INIT))?;
    let outcome = train(&mut model, train_set, cfg)?;
    let report = evaluate(&model, test_set)?;
    let infer = inference_seconds(&model, &test_set.items()[0], 3, 20)?;
    let total: f64 = outcome.epoch_seconds.iter().sum();
    let epochs = outcome.epoch_seconds.len().max(1) as f64;
    let run = RunReport {
        cnn: spec.cnn.to_string(),
        rnn: spec.rnn.to_string(),
        loss_trace: outcome.loss_trace,
        mae: report.pooled.mae,
        rmse: report.pooled.rmse,
        nse: report.pooled.nse,
        kge: report.pooled.kge,
        train_seconds_per_epoch: total / epochs,
        train_seconds_total: total,
        inference_seconds_per_image: infer,
        parameter_count: model.param_count(),
        fingerprint: format!("{} {}", spec.to_meta(), cfg.fingerprint()),
    };
    Ok((model, run))
}

/// All 12 combos with one shared seed, in benchmark order. With `cache`,
/// each combo's checkpoint and report are stored there and reused when the
/// stored fingerprint matches.
pub fn benchmark_matrix(
    template: &ModelSpec,
    train_set: &TrainSet<Sample>,
    test_set: &TestSet<Sample>,
    cfg: &TrainConfig,
    cache: Option<&Path>,
) -> Result<Vec<RunReport>> {
    let mut rows = Vec::with_capacity(12);
    for (cnn, rnn) in all_combos() {
        let spec = ModelSpec {
            cnn,
            rnn,
            ..template.clone()
        };
        let want = format!("{} {}", spec.to_meta(), cfg.fingerprint());
        if let Some(dir) = cache {
            if let Some(r) = cached_run(dir, cnn, rnn, &want)? {
                log::info!("{}: reusing cached run", r.combo());
                rows.push(r);
                continue;
            }
        }
        log::info!("training {rnn}+{cnn}");
        let (model, run) = run_one(spec, train_set, test_set, cfg)?;
        if let Some(dir) = cache {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let stem = dir.join(format!("{rnn}+{cnn}"));
            model.save(stem.with_extension("ckpt"), &format!("fingerprint={}", hash_str(&want)))?;
            let p = stem.with_extension("json");
            fs::write(&p, serde_json::to_string_pretty(&run)?).map_err(|e| Error::io(&p, e))?;
        }
        rows.push(run);
    }
    Ok(rows)
}

fn hash_str(s: &str) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(s.as_bytes()))
}

fn cached_run(dir: &Path, cnn: CnnKind, rnn: RnnKind, want: &str) -> Result<Option<RunReport>> {
    let stem = dir.join(format!("{rnn}+{cnn}"));
    let (json, ckpt) = (stem.with_extension("json"), stem.with_extension("ckpt"));
    if !json.exists() || !ckpt.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let run: RunReport = serde_json::from_str(&text)?;
    Ok((run.fingerprint == want).then_some(run))
}
