//! `sample`, `logpdf` and `grid-export`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use nafkit::flow::FlowStack;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{self, GridWindow};
use crate::exit::{DataError, UsageError};
use crate::io;

fn load(path: &Path) -> Result<FlowStack> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    FlowStack::from_json(&text).with_context(|| format!("loading {}", path.display()))
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn sample(args: &SampleArgs) -> Result<()> {
    let stack = load(&args.checkpoint)?;
    let rows = stack.model_sample(args.n, &mut ChaCha8Rng::seed_from_u64(args.seed))?;
    let names: Vec<String> = (1..=stack.dims()).map(|i| format!("x{i}")).collect();
    io::write_csv(&args.out, Some(&names), &rows)
}

#[derive(Debug, Args)]
pub struct LogpdfArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV of points, one per row.
    #[arg(long)]
    pub input: PathBuf,
    /// The input starts with a header row (kept in the output).
    #[arg(long)]
    pub header: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn logpdf(args: &LogpdfArgs) -> Result<()> {
    let stack = load(&args.checkpoint)?;
    let points = io::read_points(&args.input, args.header)?;
    let cols = points.rows[0].len();
    if cols != stack.dims() {
        bail!(DataError(format!(
            "dimension mismatch: {} has {cols} columns, the model has {} dimensions",
            args.input.display(),
            stack.dims()
        )));
    }
    let lp = stack.model_log_prob(&points.rows)?;
    let rows: Vec<Vec<f64>> = points
        .rows
        .iter()
        .zip(lp)
        .map(|(r, l)| r.iter().copied().chain([l]).collect())
        .collect();
    let header = points.header.map(|mut h| {
        h.push("logp".into());
        h
    });
    io::write_csv(&args.out, header.as_deref(), &rows)
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Evaluate a trained model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate a named target's log-density instead.
    #[arg(long)]
    pub target: Option<String>,
    /// Window `xmin,xmax,ymin,ymax,nx,ny`.
    #[arg(long, value_parser = GridWindow::parse, allow_hyphen_values = true)]
    pub grid: GridWindow,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn grid_export(args: &GridArgs) -> Result<()> {
    let points = args.grid.points();
    let lp = match (&args.checkpoint, &args.target) {
        (Some(path), None) => {
            let stack = load(path)?;
            if stack.dims() != 2 {
                bail!(DataError(format!("dimension mismatch: the grid is 2-D, the model has {} dimensions", stack.dims())));
            }
            stack.model_log_prob(&points)?
        }
        (None, Some(name)) => {
            let t = config::target(name)?;
            if t.dim() != 2 {
                bail!(UsageError(format!("target `{name}` is {}-D; the grid is 2-D", t.dim())));
            }
            points.iter().map(|p| t.log_density(p)).collect()
        }
        _ => bail!(UsageError("give exactly one of --checkpoint or --target".into())),
    };
    let rows: Vec<Vec<f64>> = points.iter().zip(lp).map(|(p, l)| vec![p[0], p[1], l]).collect();
    io::write_csv(&args.out, Some(&io::header(&["x", "y", "logp"])), &rows)
}
