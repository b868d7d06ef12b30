//! Command-line front end. Each subcommand is a plain function so it can be
//! driven from tests as well as from the binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bayesopt::{self, Subset, TrainingObjective};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, Scores};
use crate::models::{meta_pairs, HybridModel};
use crate::raster::{self, FeatureId, FeatureStack, Grid};
use crate::synthdata::{build_dataset, write_dataset, EventRecord, LoadedDataset};
use crate::terrain;
use crate::trainer::{
    self, build_samples, split_dataset, sub_seed, TargetMode, TestSet, TrainConfig, TrainSet, STREAM_INIT,
};

#[derive(Debug, Parser)]
#[command(name = "urbanflood", version, about = "Urban flood surrogate pipeline")]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world, its features and the 90-event set.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Derive the 14 normalized feature rasters from raw inputs.
    Features {
        #[arg(long)]
        dem: PathBuf,
        #[arg(long)]
        land: PathBuf,
        #[arg(long)]
        pipes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured hybrid on the training split.
    Train(DataOut),
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        io: DataOut,
        #[arg(long)]
        model: PathBuf,
    },
    /// Write predicted depth rasters for one event.
    Predict {
        #[command(flatten)]
        io: DataOut,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        event: String,
    },
    /// Train and score all 12 hybrids.
    Benchmark(DataOut),
    /// Bayesian search over feature subsets; resumes from the ledger.
    Optimize(DataOut),
}

#[derive(Debug, Args)]
pub struct DataOut {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Builds the resolved configuration from file, `--seed` and `--set`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::defaults(),
    };
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    for line in cfg.resolved().lines() {
        log::info!("config {line}");
    }
    match &cli.command {
        Command::Synth { out, force } => cmd_synth(&cfg, out, *force).map(|p| println!("{}", p.display())),
        Command::Features { dem, land, pipes, out } => cmd_features(&cfg, dem, land, pipes, out).map(|_| ()),
        Command::Train(io) => cmd_train(&cfg, &io.data, &io.out).map(|p| println!("{}", p.display())),
        Command::Eval { io, model } => cmd_eval(&cfg, &io.data, model, &io.out).map(|s| {
            println!(
                "MAE {} RMSE {} NSE {} KGE {}",
                metrics::fmt_real(s.mae),
                metrics::fmt_real(s.rmse),
                metrics::fmt_real(s.nse),
                metrics::fmt_real(s.kge)
            )
        }),
        Command::Predict { io, model, event } => {
            cmd_predict(&io.data, model, event, &io.out).map(|files| files.iter().for_each(|f| println!("{}", f.display())))
        }
        Command::Benchmark(io) => cmd_benchmark(&cfg, &io.data, &io.out).map(|p| println!("{}", p.display())),
        Command::Optimize(io) => cmd_optimize(&cfg, &io.data, &io.out).map(|b| match b {
            Some(s) => println!("{s}"),
            None => println!("no successful trial"),
        }),
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_resolved(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let p = out.join("resolved.cfg");
    fs::write(&p, cfg.resolved()).map_err(|e| Error::io(&p, e))
}

/// Writes a dataset; returns the manifest path.
pub fn cmd_synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<PathBuf> {
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
        }
    }
    ensure_dir(out)?;
    let ds = build_dataset(&cfg.dataset()?)?;
    for e in &ds.events {
        log::debug!("{}: mass residual {:.3e}", e.id, e.balance.relative_residual());
    }
    write_dataset(&ds, out, cfg.write_series()?)?;
    Ok(out.join(crate::synthdata::dataset::MANIFEST))
}

/// Writes `<ID>.asc` for all 14 channels; returns the paths.
pub fn cmd_features(cfg: &RunConfig, dem: &Path, land: &Path, pipes: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let dem = raster::read_grid(dem)?;
    let land = terrain::read_land_use_csv(land, *dem.geometry())?;
    let pipes = terrain::read_pipes_csv(pipes)?;
    let stack = terrain::derive_all(&dem, &land, &pipes, &cfg.dataset()?.terrain)?;
    ensure_dir(out)?;
    let mut files = Vec::new();
    for (id, g) in stack.channels() {
        let p = out.join(format!("{id}.asc"));
        raster::write_grid(g, &p)?;
        files.push(p);
    }
    Ok(files)
}

/// Training context stored next to the model spec in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub features: Vec<FeatureId>,
    pub mode: TargetMode,
    pub rain_scale: f64,
    pub split_fraction: f64,
    pub seed: u64,
}

impl RunMeta {
    pub fn from_train(features: &[FeatureId], t: &TrainConfig) -> Self {
        RunMeta {
            features: features.to_vec(),
            mode: t.mode,
            rain_scale: t.rain_scale,
            split_fraction: t.split_fraction,
            seed: t.seed,
        }
    }

    pub fn to_meta(&self) -> String {
        let names: Vec<&str> = self.features.iter().map(|f| f.as_str()).collect();
        format!(
            "features={} mode={} rain_scale={} split_fraction={} seed={}",
            names.join(","),
            self.mode,
            self.rain_scale,
            self.split_fraction,
            self.seed
        )
    }

    pub fn parse(meta: &str) -> Result<Self> {
        let kv = meta_pairs(meta);
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint was not written by train: no {k}")))
        };
        let bad = |k: &str| Error::Checkpoint(format!("bad {k} in checkpoint meta"));
        Ok(RunMeta {
            features: get("features")?
                .split(',')
                .map(|s| s.parse())
                .collect::<Result<Vec<FeatureId>>>()
                .map_err(|_| bad("features"))?,
            mode: get("mode")?.parse().map_err(|_| bad("mode"))?,
            rain_scale: get("rain_scale")?.parse().map_err(|_| bad("rain_scale"))?,
            split_fraction: get("split_fraction")?.parse().map_err(|_| bad("split_fraction"))?,
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
        })
    }
}

fn open_data(data: &Path, mode: TargetMode) -> Result<LoadedDataset> {
    LoadedDataset::open_with(data, mode == TargetMode::Dynamic)
}

type Split = (TrainSet<EventRecord>, TestSet<EventRecord>);

fn split_events(ds: &LoadedDataset, fraction: f64, seed: u64) -> Result<Split> {
    split_dataset(ds.events.clone(), fraction, seed)
}

fn write_split_csv(path: &Path, split: &Split) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["event", "set"])?;
    for e in split.0.items() {
        w.write_record([e.id.as_str(), "train"])?;
    }
    for e in split.1.items() {
        w.write_record([e.id.as_str(), "test"])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains one model; writes `model.ckpt`, `loss.csv` and `split.csv`.
/// Returns the checkpoint path.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<PathBuf> {
    let tc = cfg.train()?;
    let ds = open_data(data, tc.mode)?;
    let features = cfg.features()?;
    let stack = ds.features.select(&features)?;
    let split = split_events(&ds, tc.split_fraction, tc.seed)?;
    let train_set = TrainSet::new(build_samples(&stack, split.0.items(), tc.mode, tc.rain_scale)?);
    let g = stack.geometry();
    let spec = cfg.model_spec(features.len(), g.rows, g.cols)?;
    let mut model = HybridModel::new(spec, sub_seed(tc.seed, STREAM_INIT))?;
    log::info!(
        "training {}+{} on {} samples, {} parameters",
        model.spec().rnn,
        model.spec().cnn,
        train_set.len(),
        model.param_count()
    );
    let outcome = trainer::train(&mut model, &train_set, &tc)?;
    write_resolved(cfg, out)?;
    let ckpt = out.join("model.ckpt");
    model.save(&ckpt, &RunMeta::from_train(&features, &tc).to_meta())?;
    trainer::write_loss_csv(&out.join("loss.csv"), &outcome.loss_trace)?;
    write_split_csv(&out.join("split.csv"), &split)?;
    Ok(ckpt)
}

/// Loads a checkpoint and checks it against the dataset it is applied to.
fn load_checked(model: &Path, ds: &LoadedDataset) -> Result<(HybridModel, RunMeta, FeatureStack)> {
    let (m, meta) = HybridModel::load(model)?;
    let run = RunMeta::parse(&meta)?;
    let stack = ds.features.select(&run.features).map_err(|e| {
        Error::Checkpoint(format!("checkpoint features are not in the dataset: {e}"))
    })?;
    let g = stack.geometry();
    let s = m.spec();
    if s.in_channels != run.features.len() || s.height != g.rows || s.width != g.cols {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {}x{}x{} inputs, dataset gives {}x{}x{}",
            s.in_channels,
            s.height,
            s.width,
            run.features.len(),
            g.rows,
            g.cols
        )));
    }
    Ok((m, run, stack))
}

/// Scores the checkpoint on its own test split; writes `metrics.csv`
/// (per event plus `pooled`), `return_periods.csv` and `scatter.csv`.
pub fn cmd_eval(cfg: &RunConfig, data: &Path, model: &Path, out: &Path) -> Result<Scores> {
    let probe = LoadedDataset::open(data)?;
    let (_, meta) = HybridModel::load(model)?;
    let run = RunMeta::parse(&meta)?;
    let ds = if run.mode == TargetMode::Dynamic {
        open_data(data, run.mode)?
    } else {
        probe
    };
    let (m, run, stack) = load_checked(model, &ds)?;
    let split = split_events(&ds, run.split_fraction, run.seed)?;
    let test = TestSet::new(build_samples(&stack, split.1.items(), run.mode, run.rain_scale)?);
    let report = trainer::evaluate(&m, &test)?;
    write_resolved(cfg, out)?;
    let mut rows: Vec<(String, Scores)> = report.per_event.iter().map(|e| (e.label.clone(), e.scores)).collect();
    rows.push(("pooled".to_string(), report.pooled));
    metrics::write_scores_csv(&out.join("metrics.csv"), &rows)?;
    metrics::write_return_period_csv(&out.join("return_periods.csv"), &metrics::per_return_period(&report.tagged)?)?;
    metrics::write_scatter_csv(&out.join("scatter.csv"), &report.pooled_series)?;
    Ok(report.pooled)
}

/// Writes `<event>_maxh.asc` (static) or `<event>_depth_<k>.asc` per step
/// (dynamic).
pub fn cmd_predict(data: &Path, model: &Path, event: &str, out: &Path) -> Result<Vec<PathBuf>> {
    let ds = LoadedDataset::open(data)?;
    let (m, run, stack) = load_checked(model, &ds)?;
    let ev = ds
        .events
        .iter()
        .find(|e| e.id == event)
        .ok_or_else(|| Error::Invalid(format!("no event {event:?} in {}", data.display())))?;
    let x = stack.to_planar();
    let g = *stack.geometry();
    let hw = g.rows * g.cols;
    let rain: Vec<f64> = ev.rain.intensities.iter().map(|v| v / run.rain_scale).collect();
    let input = crate::autodiff::Tensor::new(&[1, stack.len(), g.rows, g.cols], x)?;
    ensure_dir(out)?;
    let write = |vals: &[f64], name: String| -> Result<PathBuf> {
        let grid = Grid::new(g, vals.to_vec(), stack.mask().to_vec())?;
        let p = out.join(name);
        raster::write_grid(&grid, &p)?;
        Ok(p)
    };
    let mut files = Vec::new();
    match run.mode {
        TargetMode::Static => {
            let y = m.predict(&input, &[&rain])?;
            files.push(write(&y.data()[..hw], format!("{event}_maxh.asc"))?);
        }
        TargetMode::Dynamic => {
            for t in 0..rain.len() {
                let y = m.predict(&input, &[&rain[..=t]])?;
                files.push(write(&y.data()[..hw], format!("{event}_depth_{t:03}.asc"))?);
            }
        }
    }
    Ok(files)
}

/// Runs the 12-combo matrix; writes `matrix.csv` (with timings),
/// `metrics_table.csv` (without), `best.csv` and per-combo loss traces.
/// Checkpoints under `out/runs` are reused when their settings match.
pub fn cmd_benchmark(cfg: &RunConfig, data: &Path, out: &Path) -> Result<PathBuf> {
    let tc = cfg.train()?;
    let ds = open_data(data, tc.mode)?;
    let features = cfg.features()?;
    let stack = ds.features.select(&features)?;
    let split = split_events(&ds, tc.split_fraction, tc.seed)?;
    let train_set = TrainSet::new(build_samples(&stack, split.0.items(), tc.mode, tc.rain_scale)?);
    let test_set = TestSet::new(build_samples(&stack, split.1.items(), tc.mode, tc.rain_scale)?);
    let g = stack.geometry();
    let template = cfg.model_spec(features.len(), g.rows, g.cols)?;
    write_resolved(cfg, out)?;
    let rows = trainer::benchmark_matrix(&template, &train_set, &test_set, &tc, Some(&out.join("runs")))?;
    let matrix = out.join("matrix.csv");
    trainer::write_matrix_csv(&matrix, &rows)?;
    trainer::write_metric_table_csv(&out.join("metrics_table.csv"), &rows)?;
    trainer::write_best_csv(&out.join("best.csv"), &rows)?;
    for r in &rows {
        trainer::write_loss_csv(&out.join(format!("loss_{}.csv", r.combo())), &r.loss_trace)?;
    }
    Ok(matrix)
}

/// Runs (or resumes) the subset search; writes `ledger.jsonl`,
/// `by_count.csv` and `by_feature.csv`.
pub fn cmd_optimize(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Option<Subset>> {
    let mut tc = cfg.train()?;
    tc.epochs = cfg.bo_epochs()?;
    let ds = open_data(data, tc.mode)?;
    let split = split_events(&ds, tc.split_fraction, tc.seed)?;
    let g = ds.features.geometry();
    let template = cfg.model_spec(1, g.rows, g.cols)?;
    let objective = TrainingObjective::new(&ds.features, &split.0, template, tc, cfg.bo_validation_fraction()?)?;
    write_resolved(cfg, out)?;
    let outcome = bayesopt::optimize(&cfg.bo()?, |s| objective.evaluate(s), Some(&out.join("ledger.jsonl")))?;
    bayesopt::write_by_count_csv(&out.join("by_count.csv"), &bayesopt::report_by_count(&outcome.ledger)?)?;
    bayesopt::write_by_feature_csv(&out.join("by_feature.csv"), &bayesopt::report_by_feature(&outcome.ledger)?)?;
    Ok(outcome.best)
}
