//! Bayesian optimization over feature-inclusion subsets with a Hamming-kernel
//! Gaussian process and expected improvement, plus the per-count and
//! per-feature contribution reports.
//!
//! Ledger format: one JSON object per line,
//! `{"iteration":0,"features":["DEM","SLOPE"],"count":2,"objective":0.031,
//!   "mae":0.01,"nse":0.8,"kge":0.7,"wall_clock":1.2,"failed":false}`.
//! Non-finite values are written as `null`; a failed trial has
//! `"failed":true` and `"objective":null`.

use std::collections::HashSet;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::metrics::fmt_real;
use crate::raster::FeatureId;
use crate::models::{HybridModel, ModelSpec};
use crate::raster::FeatureStack;
use crate::synthdata::EventRecord;
use crate::trainer::{
    build_samples, evaluate, split_dataset, sub_seed, train, TestSet, TrainConfig, TrainSet, STREAM_INIT,
};

pub const N_FEATURES: usize = 14;

/// Feature inclusion flags in table order. Never empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Subset {
    bits: u16,
}

impl Subset {
    pub fn from_bits(bits: u16) -> Result<Self> {
        let bits = bits & ((1 << N_FEATURES) - 1);
        if bits == 0 {
            return Err(Error::Invalid("a subset must include at least one feature".into()));
        }
        Ok(Subset { bits })
    }

    pub fn from_flags(include: &[bool]) -> Result<Self> {
        if include.len() != N_FEATURES {
            return Err(Error::Dimension(format!("expected {N_FEATURES} flags, got {}", include.len())));
        }
        let bits = include
            .iter()
            .enumerate()
            .fold(0u16, |b, (i, &f)| if f { b | (1 << i) } else { b });
        Subset::from_bits(bits)
    }

    pub fn from_features(ids: &[FeatureId]) -> Result<Self> {
        let bits = ids.iter().fold(0u16, |b, id| b | (1 << feature_index(*id)));
        Subset::from_bits(bits)
    }

    pub fn full() -> Self {
        Subset {
            bits: (1 << N_FEATURES) - 1,
        }
    }

    pub fn bits(&self) -> u16 {
        self.bits
    }

    pub fn includes(&self, i: usize) -> bool {
        self.bits >> i & 1 == 1
    }

    pub fn contains(&self, id: FeatureId) -> bool {
        self.includes(feature_index(id))
    }

    pub fn is_superset_of(&self, other: &Subset) -> bool {
        self.bits & other.bits == other.bits
    }

    pub fn count(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn flags(&self) -> [bool; N_FEATURES] {
        std::array::from_fn(|i| self.includes(i))
    }

    pub fn features(&self) -> Vec<FeatureId> {
        FeatureId::ALL
            .iter()
            .enumerate()
            .filter(|(i, _)| self.includes(*i))
            .map(|(_, f)| *f)
            .collect()
    }

    pub fn hamming(&self, other: &Subset) -> u32 {
        (self.bits ^ other.bits).count_ones()
    }

    /// Flips bit `i`; `None` if that would empty the subset.
    pub fn flipped(&self, i: usize) -> Option<Subset> {
        Subset::from_bits(self.bits ^ (1 << i)).ok()
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.features().iter().map(|id| id.as_str()).collect();
        f.write_str(&names.join("+"))
    }
}

fn feature_index(id: FeatureId) -> usize {
    FeatureId::ALL.iter().position(|f| *f == id).expect("feature in table")
}

/// `exp(-lambda * hamming(u, v))`.
pub fn kernel(u: &Subset, v: &Subset, lambda: f64) -> f64 {
    (-lambda * u.hamming(v) as f64).exp()
}

/// Zero-mean, unit-prior-variance GP regression on subsets.
#[derive(Debug, Clone)]
pub struct GpSurrogate {
    pub lambda: f64,
    pub noise: f64,
    points: Vec<Subset>,
    chol: Vec<f64>,
    alpha: Vec<f64>,
}

impl GpSurrogate {
    pub fn fit(points: &[Subset], targets: &[f64], lambda: f64, noise: f64) -> Result<Self> {
        if !(lambda > 0.0) || !(noise > 0.0) {
            return Err(Error::Config(format!(
                "kernel length-scale {lambda} and noise {noise} must be positive"
            )));
        }
        if points.is_empty() || points.len() != targets.len() {
            return Err(Error::Invalid(format!(
                "GP needs matching nonempty data, got {} points and {} targets",
                points.len(),
                targets.len()
            )));
        }
        let n = points.len();
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = kernel(&points[i], &points[j], lambda);
            }
            k[i * n + i] += noise;
        }
        let mut jitter = 0.0;
        let chol = loop {
            match cholesky(&k, n, jitter) {
                Some(l) => break l,
                None if jitter < 1e-2 => jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 },
                None => {
                    return Err(Error::Numerical(format!(
                        "GP kernel matrix not positive definite after jitter {jitter:e}"
                    )))
                }
            }
        };
        let alpha = solve_upper_t(&chol, n, &solve_lower(&chol, n, targets));
        Ok(GpSurrogate {
            lambda,
            noise,
            points: points.to_vec(),
            chol,
            alpha,
        })
    }

    /// Posterior mean and variance of the latent function.
    pub fn posterior(&self, q: &Subset) -> (f64, f64) {
        let n = self.points.len();
        let ks: Vec<f64> = self.points.iter().map(|p| kernel(p, q, self.lambda)).collect();
        let mean = ks.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let v = solve_lower(&self.chol, n, &ks);
        let var = 1.0 - v.iter().map(|x| x * x).sum::<f64>();
        (mean, var.max(0.0))
    }
}

fn cholesky(a: &[f64], n: usize, jitter: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            if i == j {
                s += jitter;
            }
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn solve_lower(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * x[k]).sum();
        x[i] = (b[i] - s) / l[i * n + i];
    }
    x
}

fn solve_upper_t(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (b[i] - s) / l[i * n + i];
    }
    x
}

/// Expected improvement below `best` for a normal posterior.
pub fn expected_improvement(mean: f64, sd: f64, best: f64) -> f64 {
    let gain = best - mean;
    if !(sd > 0.0) {
        return gain.max(0.0);
    }
    let z = gain / sd;
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    (gain * n.cdf(z) + sd * n.pdf(z)).max(0.0)
}

/// Index of the maximal EI; ties go to the lowest index.
pub fn acquire(gp: &GpSurrogate, best: f64, candidates: &[Subset]) -> Option<usize> {
    let mut pick: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let (m, v) = gp.posterior(c);
        let ei = expected_improvement(m, v.sqrt(), best);
        if pick.map_or(true, |(_, b)| ei > b) {
            pick = Some((i, ei));
        }
    }
    pick.map(|(i, _)| i)
}

/// What one objective evaluation reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Validation RMSE, minimized.
    pub objective: f64,
    pub mae: f64,
    pub nse: f64,
    pub kge: f64,
}

impl Evaluation {
    pub fn objective_only(objective: f64) -> Self {
        Evaluation {
            objective,
            mae: f64::NAN,
            nse: f64::NAN,
            kge: f64::NAN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub iteration: usize,
    pub features: Vec<String>,
    pub count: usize,
    pub objective: Option<f64>,
    pub mae: Option<f64>,
    pub nse: Option<f64>,
    pub kge: Option<f64>,
    pub wall_clock: f64,
    pub failed: bool,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl TrialRecord {
    pub fn subset(&self) -> Result<Subset> {
        let ids = self
            .features
            .iter()
            .map(|s| s.parse::<FeatureId>())
            .collect::<Result<Vec<_>>>()?;
        Subset::from_features(&ids)
    }

    /// Objective with failures mapped to `+inf`.
    pub fn value(&self) -> f64 {
        match (self.failed, self.objective) {
            (false, Some(v)) => v,
            _ => f64::INFINITY,
        }
    }

    /// `MAE`, `RMSE`, `NSE` or `KGE` of a successful trial.
    pub fn metric(&self, m: Metric) -> Option<f64> {
        if self.failed {
            return None;
        }
        match m {
            Metric::Mae => self.mae,
            Metric::Rmse => self.objective,
            Metric::Nse => self.nse,
            Metric::Kge => self.kge,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Mae,
    Rmse,
    Nse,
    Kge,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Mae, Metric::Rmse, Metric::Nse, Metric::Kge];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Mae => "MAE",
            Metric::Rmse => "RMSE",
            Metric::Nse => "NSE",
            Metric::Kge => "KGE",
        }
    }

    pub fn lower_is_better(&self) -> bool {
        matches!(self, Metric::Mae | Metric::Rmse)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoConfig {
    pub iterations: usize,
    pub initial: usize,
    pub pool: usize,
    pub lambda: f64,
    pub noise: f64,
    pub seed: u64,
    /// Restricts every proposal to exactly this many features.
    pub fixed_count: Option<usize>,
}

impl BoConfig {
    pub fn new(seed: u64) -> Self {
        BoConfig {
            iterations: 100,
            initial: 10,
            pool: 256,
            lambda: 0.5,
            noise: 1e-4,
            seed,
            fixed_count: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.lambda > 0.0) || !(self.noise > 0.0) {
            return Err(Error::Config("bo lambda and noise must be positive".into()));
        }
        if let Some(k) = self.fixed_count {
            if k == 0 || k > N_FEATURES {
                return Err(Error::Config(format!("fixed count {k} outside 1..={N_FEATURES}")));
            }
        }
        Ok(())
    }
}

const STREAM_BO: u64 = 0x0B0;
const STREAM_VALIDATION: u64 = 5;

fn random_subset(rng: &mut ChaCha8Rng, fixed: Option<usize>) -> Subset {
    match fixed {
        Some(k) => {
            let mut idx: Vec<usize> = (0..N_FEATURES).collect();
            idx.shuffle(rng);
            let bits = idx[..k].iter().fold(0u16, |b, &i| b | (1 << i));
            Subset { bits }
        }
        None => loop {
            let bits = rng.gen::<u16>() & ((1 << N_FEATURES) - 1);
            if bits != 0 {
                return Subset { bits };
            }
        },
    }
}

/// One-step neighbours of `s`: bit flips, or swaps in fixed-count mode.
fn neighbours(s: &Subset, fixed: Option<usize>) -> Vec<Subset> {
    match fixed {
        None => (0..N_FEATURES).filter_map(|i| s.flipped(i)).collect(),
        Some(_) => {
            let mut out = Vec::new();
            for i in (0..N_FEATURES).filter(|&i| s.includes(i)) {
                for j in (0..N_FEATURES).filter(|&j| !s.includes(j)) {
                    out.push(Subset {
                        bits: s.bits ^ (1 << i) ^ (1 << j),
                    });
                }
            }
            out
        }
    }
}

fn space_size(fixed: Option<usize>) -> u64 {
    match fixed {
        None => (1u64 << N_FEATURES) - 1,
        Some(k) => (0..k as u64).fold(1u64, |c, i| c * (N_FEATURES as u64 - i) / (i + 1)),
    }
}

/// Proposal for `iteration` given the trials so far. Depends only on the
/// seed, the iteration and the ledger, which is what makes resumed runs
/// replay exactly.
pub fn propose(cfg: &BoConfig, iteration: usize, ledger: &[TrialRecord]) -> Result<Option<Subset>> {
    let seen: HashSet<Subset> = ledger.iter().map(|r| r.subset()).collect::<Result<_>>()?;
    if seen.len() as u64 >= space_size(cfg.fixed_count) {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, STREAM_BO + iteration as u64));
    let fresh = |rng: &mut ChaCha8Rng| loop {
        let s = random_subset(rng, cfg.fixed_count);
        if !seen.contains(&s) {
            return s;
        }
    };
    let ok: Vec<(Subset, f64)> = ledger
        .iter()
        .filter(|r| r.value().is_finite())
        .map(|r| Ok((r.subset()?, r.value())))
        .collect::<Result<_>>()?;
    if iteration < cfg.initial || ok.is_empty() {
        return Ok(Some(fresh(&mut rng)));
    }
    let ys: Vec<f64> = ok.iter().map(|p| p.1).collect();
    let mu = ys.iter().sum::<f64>() / ys.len() as f64;
    let sd = {
        let v = ys.iter().map(|y| (y - mu).powi(2)).sum::<f64>() / ys.len() as f64;
        if v.sqrt() > 0.0 {
            v.sqrt()
        } else {
            1.0
        }
    };
    let z: Vec<f64> = ys.iter().map(|y| (y - mu) / sd).collect();
    let pts: Vec<Subset> = ok.iter().map(|p| p.0).collect();
    let gp = GpSurrogate::fit(&pts, &z, cfg.lambda, cfg.noise)?;
    let (inc, best) = ok
        .iter()
        .fold((ok[0].0, f64::INFINITY), |acc, p| if p.1 < acc.1 { *p } else { acc });
    let best_z = (best - mu) / sd;

    let mut pool: Vec<Subset> = (0..cfg.pool).map(|_| random_subset(&mut rng, cfg.fixed_count)).collect();
    pool.extend(neighbours(&inc, cfg.fixed_count));
    let mut uniq = HashSet::new();
    pool.retain(|s| !seen.contains(s) && uniq.insert(*s));
    match acquire(&gp, best_z, &pool) {
        Some(i) => Ok(Some(pool[i])),
        None => Ok(Some(fresh(&mut rng))),
    }
}

/// Reads a ledger; a missing file is an empty ledger.
pub fn read_ledger(path: &Path) -> Result<Vec<TrialRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<TrialRecord> = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrialRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if rec.iteration != out.len() {
            return Err(Error::Format(format!(
                "{}:{}: iteration {} out of sequence",
                path.display(),
                n + 1,
                rec.iteration
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

fn append_record(path: &Path, rec: &TrialRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct BoOutcome {
    pub best: Option<Subset>,
    pub ledger: Vec<TrialRecord>,
    /// Best finite objective after each trial.
    pub incumbent_trace: Vec<f64>,
}

/// Runs the optimization. With `ledger_path`, existing records are
/// replayed (and checked against the proposals this seed makes) before new
/// trials are appended one line at a time.
pub fn optimize(
    cfg: &BoConfig,
    mut objective: impl FnMut(&Subset) -> Result<Evaluation>,
    ledger_path: Option<&Path>,
) -> Result<BoOutcome> {
    cfg.validate()?;
    let mut ledger = match ledger_path {
        Some(p) => read_ledger(p)?,
        None => Vec::new(),
    };
    if ledger.len() > cfg.iterations {
        return Err(Error::Config(format!(
            "ledger holds {} trials, more than the budget of {}",
            ledger.len(),
            cfg.iterations
        )));
    }
    for i in 0..ledger.len() {
        let want = propose(cfg, i, &ledger[..i])?;
        if want != Some(ledger[i].subset()?) {
            return Err(Error::Config(format!(
                "ledger trial {i} does not match this configuration's proposal; it was written with other settings"
            )));
        }
    }
    if !ledger.is_empty() {
        log::info!("resuming at iteration {}", ledger.len());
    }
    if let Some(p) = ledger_path {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    for it in ledger.len()..cfg.iterations {
        let Some(s) = propose(cfg, it, &ledger)? else {
            break;
        };
        let t0 = Instant::now();
        let eval = match objective(&s) {
            Ok(e) => e,
            Err(Error::Numerical(msg)) => {
                log::warn!("trial {it} ({s}) failed: {msg}");
                Evaluation::objective_only(f64::INFINITY)
            }
            Err(e) => return Err(e),
        };
        let failed = !eval.objective.is_finite();
        let rec = TrialRecord {
            iteration: it,
            features: s.features().iter().map(|f| f.as_str().to_string()).collect(),
            count: s.count(),
            objective: finite(eval.objective),
            mae: finite(eval.mae),
            nse: finite(eval.nse),
            kge: finite(eval.kge),
            wall_clock: t0.elapsed().as_secs_f64(),
            failed,
        };
        log::info!("trial {it}: {s} -> {:?}", rec.objective);
        if let Some(p) = ledger_path {
            append_record(p, &rec)?;
        }
        ledger.push(rec);
    }
    let mut trace = Vec::with_capacity(ledger.len());
    let mut best: Option<(Subset, f64)> = None;
    for r in &ledger {
        let v = r.value();
        if v.is_finite() && best.map_or(true, |b| v < b.1) {
            best = Some((r.subset()?, v));
        }
        trace.push(best.map_or(f64::INFINITY, |b| b.1));
    }
    Ok(BoOutcome {
        best: best.map(|b| b.0),
        ledger,
        incumbent_trace: trace,
    })
}

/// Baseline: distinct uniform random subsets, same budget.
pub fn random_search(
    iterations: usize,
    seed: u64,
    fixed_count: Option<usize>,
    mut objective: impl FnMut(&Subset) -> Result<Evaluation>,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, STREAM_BO - 1));
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(iterations);
    while out.len() < iterations && (seen.len() as u64) < space_size(fixed_count) {
        let s = random_subset(&mut rng, fixed_count);
        if seen.insert(s) {
            let v = objective(&s)?.objective;
            out.push(if v.is_finite() { v } else { f64::INFINITY });
        }
    }
    Ok(out)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

fn stat(vals: &[f64]) -> Option<Stat> {
    if vals.is_empty() {
        return None;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(Stat { mean, std: var.sqrt() })
}

fn stats_of<'a>(trials: impl Iterator<Item = &'a TrialRecord> + Clone) -> [Option<Stat>; 4] {
    Metric::ALL.map(|m| stat(&trials.clone().filter_map(|r| r.metric(m)).collect::<Vec<_>>()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountRow {
    pub count: usize,
    pub trials: usize,
    /// In [`Metric::ALL`] order; `None` when no trial reported the metric.
    pub stats: [Option<Stat>; 4],
    pub best_for: Vec<Metric>,
}

/// Groups trials by subset size.
pub fn report_by_count(ledger: &[TrialRecord]) -> Result<Vec<CountRow>> {
    if ledger.is_empty() {
        return Err(Error::EmptyDomain("empty ledger".into()));
    }
    let mut counts: Vec<usize> = ledger.iter().map(|r| r.count).collect();
    counts.sort_unstable();
    counts.dedup();
    let mut rows: Vec<CountRow> = counts
        .into_iter()
        .map(|k| {
            let group = ledger.iter().filter(move |r| r.count == k);
            CountRow {
                count: k,
                trials: group.clone().count(),
                stats: stats_of(group),
                best_for: Vec::new(),
            }
        })
        .collect();
    for (mi, m) in Metric::ALL.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (ri, r) in rows.iter().enumerate() {
            if let Some(s) = r.stats[mi] {
                let better = best.map_or(true, |(_, b)| {
                    if m.lower_is_better() {
                        s.mean < b
                    } else {
                        s.mean > b
                    }
                });
                if better {
                    best = Some((ri, s.mean));
                }
            }
        }
        if let Some((ri, _)) = best {
            rows[ri].best_for.push(*m);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub feature: FeatureId,
    /// Trials (failed ones included) whose subset contains the feature.
    pub trials: usize,
    pub stats: [Option<Stat>; 4],
    /// 1-based rank per metric; `None` when unsampled.
    pub rank: [Option<usize>; 4],
}

impl FeatureRow {
    pub fn top7(&self, m: Metric) -> bool {
        let i = Metric::ALL.iter().position(|x| *x == m).expect("metric");
        self.rank[i].map_or(false, |r| r <= 7)
    }

    pub fn unsampled(&self) -> bool {
        self.stats.iter().all(|s| s.is_none())
    }
}

/// Per-feature aggregates over trials that include the feature, ranked
/// best-first per metric (ties go to table order).
pub fn report_by_feature(ledger: &[TrialRecord]) -> Result<Vec<FeatureRow>> {
    if ledger.is_empty() {
        return Err(Error::EmptyDomain("empty ledger".into()));
    }
    let subsets: Vec<Subset> = ledger.iter().map(|r| r.subset()).collect::<Result<_>>()?;
    let mut rows: Vec<FeatureRow> = FeatureId::ALL
        .iter()
        .enumerate()
        .map(|(fi, &feature)| {
            let with = ledger
                .iter()
                .zip(&subsets)
                .filter(move |(_, s)| s.includes(fi))
                .map(|(r, _)| r);
            FeatureRow {
                feature,
                trials: with.clone().count(),
                stats: stats_of(with),
                rank: [None; 4],
            }
        })
        .collect();
    for (mi, m) in Metric::ALL.iter().enumerate() {
        let mut order: Vec<(usize, f64)> = rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.stats[mi].map(|s| (i, s.mean)))
            .collect();
        order.sort_by(|a, b| {
            let c = if m.lower_is_better() {
                a.1.total_cmp(&b.1)
            } else {
                b.1.total_cmp(&a.1)
            };
            c.then(a.0.cmp(&b.0))
        });
        for (rank, (i, _)) in order.into_iter().enumerate() {
            rows[i].rank[mi] = Some(rank + 1);
        }
    }
    Ok(rows)
}

fn stat_cells(stats: &[Option<Stat>; 4]) -> Vec<String> {
    stats
        .iter()
        .flat_map(|s| match s {
            Some(s) => [fmt_real(s.mean), fmt_real(s.std)],
            None => [String::new(), String::new()],
        })
        .collect()
}

fn stat_header() -> Vec<String> {
    Metric::ALL
        .iter()
        .flat_map(|m| [format!("{}_mean", m.name()), format!("{}_std", m.name())])
        .collect()
}

pub fn write_by_count_csv(path: &Path, rows: &[CountRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut head = vec!["count".to_string(), "trials".to_string()];
    head.extend(stat_header());
    head.push("best_for".into());
    w.write_record(&head)?;
    for r in rows {
        let mut rec = vec![r.count.to_string(), r.trials.to_string()];
        rec.extend(stat_cells(&r.stats));
        rec.push(r.best_for.iter().map(|m| m.name()).collect::<Vec<_>>().join(";"));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_by_feature_csv(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut head = vec!["feature".to_string(), "trials".to_string()];
    head.extend(stat_header());
    for m in Metric::ALL {
        head.push(format!("rank_{}", m.name()));
    }
    for m in Metric::ALL {
        head.push(format!("top7_{}", m.name()));
    }
    w.write_record(&head)?;
    for r in rows {
        let mut rec = vec![r.feature.as_str().to_string(), r.trials.to_string()];
        rec.extend(stat_cells(&r.stats));
        for k in r.rank {
            rec.push(k.map_or_else(|| "unsampled".to_string(), |k| k.to_string()));
        }
        for m in Metric::ALL {
            rec.push(if r.top7(m) { "1" } else { "0" }.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Synthetic objective with a known minimum: zero exactly when `planted`
/// is included, otherwise `1 + noise` with noise in `[0, 0.1)` fixed per
/// subset and seed.
pub fn planted_objective(planted: Subset, seed: u64) -> impl FnMut(&Subset) -> Result<Evaluation> {
    move |s: &Subset| {
        if s.is_superset_of(&planted) {
            return Ok(Evaluation::objective_only(0.0));
        }
        let h = sub_seed(seed ^ 0x5EED, s.bits() as u64);
        Ok(Evaluation::objective_only(1.0 + 0.1 * (h >> 11) as f64 / (1u64 << 53) as f64))
    }
}

/// Objective equal to the number of included features.
pub fn count_objective(s: &Subset) -> Result<Evaluation> {
    Ok(Evaluation::objective_only(s.count() as f64))
}

/// Trial objective that trains a small run on the chosen channels and
/// scores it on held-out training events. Test events never enter.
pub struct TrainingObjective<'a> {
    stack: &'a FeatureStack,
    fit: TrainSet<EventRecord>,
    validation: Vec<EventRecord>,
    template: ModelSpec,
    cfg: TrainConfig,
}

impl<'a> TrainingObjective<'a> {
    /// `cfg.epochs` is the per-trial budget; `validation_fraction` of the
    /// training events is held out with its own split stream.
    pub fn new(
        stack: &'a FeatureStack,
        train: &TrainSet<EventRecord>,
        template: ModelSpec,
        cfg: TrainConfig,
        validation_fraction: f64,
    ) -> Result<Self> {
        let (fit, val) = split_dataset(
            train.items().to_vec(),
            1.0 - validation_fraction,
            sub_seed(cfg.seed, STREAM_VALIDATION),
        )?;
        Ok(TrainingObjective {
            stack,
            fit,
            validation: val.items().to_vec(),
            template,
            cfg,
        })
    }

    pub fn evaluate(&self, s: &Subset) -> Result<Evaluation> {
        let stack = self.stack.select(&s.features())?;
        let fit = TrainSet::new(build_samples(&stack, self.fit.items(), self.cfg.mode, self.cfg.rain_scale)?);
        let val = TestSet::new(build_samples(&stack, &self.validation, self.cfg.mode, self.cfg.rain_scale)?);
        let spec = ModelSpec {
            in_channels: s.count(),
            ..self.template.clone()
        };
        let mut model = HybridModel::new(spec, sub_seed(self.cfg.seed, STREAM_INIT))?;
        train(&mut model, &fit, &self.cfg)?;
        let r = evaluate(&model, &val)?;
        Ok(Evaluation {
            objective: r.pooled.rmse,
            mae: r.pooled.mae,
            nse: r.pooled.nse,
            kge: r.pooled.kge,
        })
    }
}
