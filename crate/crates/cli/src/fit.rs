//! `fit-density` and `fit-energy`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use nafkit::flow::FlowStack;
use nafkit::targets::{count_modes, histogram, histogram_peaks, TargetSpec};
use nafkit::training::{fit, mean_nll, LossKind, Source, TracePoint, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::config::{self, GridWindow, HistWindow, ModelConfig, RunConfig};
use crate::exit::{DataError, UsageError};
use crate::io;

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Resolved config of an earlier run; replaces every other flag except --out.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named target (grid-k2, grid-k5, grid-k10, four-mode, sine-posterior).
    #[arg(long)]
    pub target: Option<String>,
    /// CSV of training points, one per row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// The data CSV starts with a header row.
    #[arg(long)]
    pub header: bool,
    /// dsf, ddsf, affine or affine-gate.
    #[arg(long, default_value = "dsf")]
    pub model: String,
    /// Sigmoid units per transformer (DSF and DDSF).
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    /// Hidden layers of each DDSF transformer.
    #[arg(long, default_value_t = 2)]
    pub ddsf_layers: usize,
    /// Flow layers [default: 6 for affine models, 1 otherwise].
    #[arg(long)]
    pub stack: Option<usize>,
    /// Conditioner hidden widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "64")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Gradient-norm cap; 0 disables clipping.
    #[arg(long, default_value_t = 10.0)]
    pub grad_clip: f64,
    /// Decay of a Polyak parameter average installed after training.
    #[arg(long)]
    pub polyak: Option<f64>,
    /// Energy fitting: ramp the target log-density in over this many steps.
    #[arg(long)]
    pub anneal: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 2_000)]
    pub n_valid: usize,
    #[arg(long, default_value_t = 0.1)]
    pub valid_fraction: f64,
    /// Model samples drawn after training.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    /// Radius of the mode-coverage count.
    #[arg(long, default_value_t = 1.5)]
    pub radius: f64,
    /// Density grid `xmin,xmax,ymin,ymax,nx,ny` (2-D models).
    #[arg(long, value_parser = GridWindow::parse, allow_hyphen_values = true)]
    pub grid: Option<GridWindow>,
    /// Histogram `lo,hi,bins` for 1-D samples [default: 0,2,100].
    #[arg(long, value_parser = HistWindow::parse, allow_hyphen_values = true)]
    pub hist: Option<HistWindow>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Histogram peaks below this share of the tallest bin are noise.
pub const PEAK_MIN_SHARE: f64 = 0.1;

fn resolve(args: &FitArgs, command: &str) -> Result<RunConfig> {
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| DataError(format!("{}: {e}", path.display())))?;
        if cfg.command != command {
            bail!(UsageError(format!("{} holds a `{}` run", path.display(), cfg.command)));
        }
        cfg.target_spec = cfg.target.as_deref().map(config::target).transpose()?.map(|t| t.describe());
        return Ok(cfg);
    }
    match (&args.target, &args.data) {
        (Some(_), Some(_)) => bail!(UsageError("give either --target or --data, not both".into())),
        (None, None) => bail!(UsageError("one of --target or --data is required".into())),
        (None, Some(_)) if command == "fit-energy" => bail!(UsageError("energy fitting needs --target".into())),
        _ => {}
    }
    let affine = args.model.starts_with("affine");
    let model = ModelConfig {
        kind: args.model.clone(),
        d: args.d,
        ddsf_layers: args.ddsf_layers,
        stack: args.stack.unwrap_or(if affine { 6 } else { 1 }),
        hidden: args.hidden.clone(),
    };
    model.transformer()?;
    let train = TrainConfig {
        loss: if command == "fit-energy" { LossKind::Energy } else { LossKind::Mle },
        steps: args.steps,
        batch: args.batch,
        lr: args.lr,
        seed: args.seed.wrapping_add(2),
        grad_clip: (args.grad_clip > 0.0).then_some(args.grad_clip),
        polyak: args.polyak,
        anneal: args.anneal,
        ..TrainConfig::default()
    };
    train.validate().map_err(|e| UsageError(e.to_string()))?;
    let spec = args.target.as_deref().map(config::target).transpose()?;
    if !(0.0..1.0).contains(&args.valid_fraction) {
        bail!(UsageError("--valid-fraction must lie in [0, 1)".into()));
    }
    let hist = match (args.hist, &spec) {
        (Some(h), _) => Some(h),
        (None, Some(t)) if t.dim() == 1 => Some(HistWindow { lo: 0.0, hi: 2.0, bins: 100 }),
        _ => None,
    };
    Ok(RunConfig {
        command: command.to_string(),
        target: args.target.clone(),
        data: args.data.clone(),
        header: args.header,
        model,
        train,
        seed: args.seed,
        n_train: args.n_train,
        n_valid: args.n_valid,
        valid_fraction: args.valid_fraction,
        samples: args.samples,
        radius: args.radius,
        peak_min_share: PEAK_MIN_SHARE,
        grid: args.grid,
        hist,
        target_spec: spec.map(|t| t.describe()),
    })
}

fn rng(seed: u64, offset: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(offset))
}

fn trace_rows(trace: &[TracePoint]) -> String {
    let mut out = String::from("step,loss\n");
    for p in trace {
        out.push_str(&format!("{},{}\n", p.step, io::fmt_f64(p.loss)));
    }
    out
}

fn column_names(m: usize) -> Vec<String> {
    (1..=m).map(|i| format!("x{i}")).collect()
}

/// Writes `samples.csv`, the coverage and histogram files, and returns
/// their summaries for the metrics.
fn sample_outputs(out: &Path, cfg: &RunConfig, stack: &FlowStack, spec: Option<&TargetSpec>, metrics: &mut Map<String, Value>) -> Result<()> {
    if cfg.samples == 0 {
        return Ok(());
    }
    let samples = stack.model_sample(cfg.samples, &mut rng(cfg.seed, 3))?;
    io::write_csv(&out.join("samples.csv"), Some(&column_names(stack.dims())), &samples)?;
    if let Some(t) = spec.filter(|t| t.modes().is_some()) {
        let fractions = count_modes(&samples, t, cfg.radius)?;
        let coverage = json!({
            "target": t.name(),
            "radius": cfg.radius,
            "samples": cfg.samples,
            "modes": t.modes(),
            "fractions": fractions,
        });
        io::write_json(&out.join("coverage.json"), &coverage)?;
        metrics.insert("mode_coverage".into(), json!(fractions));
    }
    if let (Some(h), 1) = (cfg.hist, stack.dims()) {
        let values: Vec<f64> = samples.iter().map(|r| r[0]).collect();
        let counts = histogram(&values, h.lo, h.hi, h.bins);
        let width = (h.hi - h.lo) / h.bins as f64;
        let mut text = String::from("lo,hi,count\n");
        for (i, c) in counts.iter().enumerate() {
            let lo = h.lo + width * i as f64;
            text.push_str(&format!("{},{},{c}\n", io::fmt_f64(lo), io::fmt_f64(lo + width)));
        }
        io::write_atomic(&out.join("histogram.csv"), text.as_bytes())?;
        metrics.insert("histogram_peaks".into(), json!(histogram_peaks(&counts, h.lo, h.hi, cfg.peak_min_share)));
    }
    Ok(())
}

fn grid_output(out: &Path, grid: Option<GridWindow>, stack: &FlowStack) -> Result<()> {
    let Some(grid) = grid else { return Ok(()) };
    if stack.dims() != 2 {
        bail!(UsageError(format!("--grid needs a 2-D model, this one has {} dimensions", stack.dims())));
    }
    let points = grid.points();
    let lp = stack.model_log_prob(&points)?;
    let rows: Vec<Vec<f64>> = points.iter().zip(lp).map(|(p, l)| vec![p[0], p[1], l]).collect();
    io::write_csv(&out.join("density_grid.csv"), Some(&io::header(&["x", "y", "logp"])), &rows)
}

fn finish(out: &Path, cfg: &RunConfig, stack: &FlowStack, trace: &[TracePoint], metrics: &Map<String, Value>) -> Result<()> {
    io::write_json(&out.join("config.json"), cfg)?;
    io::write_atomic(&out.join("checkpoint.json"), (stack.to_json() + "\n").as_bytes())?;
    io::write_atomic(&out.join("trace.csv"), trace_rows(trace).as_bytes())?;
    io::write_json(&out.join("metrics.json"), metrics)
}

fn split_rows(cfg: &RunConfig, spec: Option<&TargetSpec>) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut data_rng = rng(cfg.seed, 0);
    if let Some(t) = spec {
        if !t.has_sampler() {
            bail!(UsageError(format!("target `{}` has no exact sampler; use fit-energy", t.name())));
        }
        if cfg.n_train == 0 {
            bail!(UsageError("--n-train must be positive".into()));
        }
        let train = t.sample(cfg.n_train, &mut data_rng)?;
        let valid = t.sample(cfg.n_valid, &mut data_rng)?;
        return Ok((train, valid));
    }
    let path = cfg.data.as_ref().expect("checked when resolving");
    let mut rows = io::read_points(path, cfg.header)?.rows;
    rows.shuffle(&mut data_rng);
    let held = ((rows.len() as f64) * cfg.valid_fraction).floor() as usize;
    let held = held.min(rows.len() - 1);
    let valid = rows.split_off(rows.len() - held);
    Ok((rows, valid))
}

pub fn fit_density(args: &FitArgs) -> Result<()> {
    let cfg = resolve(args, "fit-density")?;
    let spec = cfg.target.as_deref().map(config::target).transpose()?;
    let (train, valid) = split_rows(&cfg, spec.as_ref())?;
    let m = train[0].len();
    let mut stack = cfg.model.build(m)?;
    stack.identity_init(&mut rng(cfg.seed, 1));
    let trace = fit(&mut stack, Source::Data(&train), &cfg.train)?;

    let mut metrics = Map::new();
    metrics.insert("command".into(), json!(cfg.command));
    metrics.insert("model".into(), json!(cfg.model.kind));
    metrics.insert("steps".into(), json!(cfg.train.steps));
    metrics.insert("final_loss".into(), json!(trace.last().map(|p| p.loss)));
    metrics.insert("train_nll".into(), json!(mean_nll(&stack, &train)?));
    if !valid.is_empty() {
        metrics.insert("valid_nll".into(), json!(mean_nll(&stack, &valid)?));
        if let Some(t) = spec.as_ref().filter(|t| t.is_normalized()) {
            let exact = -valid.iter().map(|r| t.log_density(r)).sum::<f64>() / valid.len() as f64;
            metrics.insert("target_valid_nll".into(), json!(exact));
        }
    }
    sample_outputs(&args.out, &cfg, &stack, spec.as_ref(), &mut metrics)?;
    grid_output(&args.out, cfg.grid, &stack)?;
    finish(&args.out, &cfg, &stack, &trace, &metrics)
}

pub fn fit_energy(args: &FitArgs) -> Result<()> {
    let cfg = resolve(args, "fit-energy")?;
    let Some(name) = cfg.target.as_deref() else {
        bail!(UsageError("energy fitting needs --target".into()));
    };
    let spec = config::target(name)?;
    let mut stack = cfg.model.build(spec.dim())?;
    stack.identity_init(&mut rng(cfg.seed, 1));
    let trace = fit(&mut stack, Source::Target(&spec), &cfg.train)?;

    let tail = &trace[trace.len().saturating_sub(100)..];
    let mut metrics = Map::new();
    metrics.insert("command".into(), json!(cfg.command));
    metrics.insert("model".into(), json!(cfg.model.kind));
    metrics.insert("steps".into(), json!(cfg.train.steps));
    metrics.insert("final_loss".into(), json!(trace.last().map(|p| p.loss)));
    if !tail.is_empty() {
        metrics.insert("tail_mean_loss".into(), json!(tail.iter().map(|p| p.loss).sum::<f64>() / tail.len() as f64));
    }
    sample_outputs(&args.out, &cfg, &stack, Some(&spec), &mut metrics)?;
    grid_output(&args.out, cfg.grid, &stack)?;
    finish(&args.out, &cfg, &stack, &trace, &metrics)
}
