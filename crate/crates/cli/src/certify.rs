//! `certify-universal`: step and sigmoid approximations of a monotone CDF.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use nafkit::universal::{self, MonotoneTarget};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::exit::{CheckFailed, UsageError};
use crate::io;

#[derive(Debug, Args)]
pub struct CertifyArgs {
    /// identity, normal (truncated to [-radius, radius]) or random.
    #[arg(long, default_value = "normal")]
    pub target: String,
    #[arg(long, default_value_t = 4.0)]
    pub radius: f64,
    /// Seed of the random target and of the KS demo.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of steps.
    #[arg(long, default_value_t = 9)]
    pub n: usize,
    /// Sigmoid tail mass [default: 1/(2(n+1))].
    #[arg(long)]
    pub eps0: Option<f64>,
    /// Evaluation points, ends included.
    #[arg(long, default_value_t = 10_001)]
    pub grid: usize,
    /// Also push this many logistic draws through the inverse and report
    /// their Kolmogorov-Smirnov distance to the target.
    #[arg(long, default_value_t = 0)]
    pub ks_samples: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn build_target(args: &CertifyArgs) -> Result<MonotoneTarget> {
    Ok(match args.target.as_str() {
        "identity" => MonotoneTarget::identity(),
        "normal" => MonotoneTarget::truncated_normal(args.radius).map_err(|e| UsageError(e.to_string()))?,
        "random" => MonotoneTarget::random(&mut ChaCha8Rng::seed_from_u64(args.seed), -args.radius, args.radius)?,
        other => bail!(UsageError(format!("unknown target `{other}`; available: identity, normal, random"))),
    })
}

pub fn certify(args: &CertifyArgs) -> Result<()> {
    if args.grid < 101 {
        bail!(UsageError(format!("--grid {} is below the minimum of 101 points", args.grid)));
    }
    if args.n == 0 {
        bail!(UsageError("--n must be at least 1".into()));
    }
    let target = build_target(args)?;
    let steps = universal::build_step_approx(&target, args.n)?;
    let eps0 = args.eps0.unwrap_or_else(|| universal::default_eps0(args.n));
    let sigmoid = if args.n >= 2 {
        Some(universal::build_sigmoid_approx(&target, args.n, eps0).map_err(|e| UsageError(e.to_string()))?)
    } else {
        None
    };

    let (r0, r1) = target.bounds();
    let mut rows = Vec::with_capacity(args.grid);
    for i in 0..args.grid {
        let x = r0 + (r1 - r0) * i as f64 / (args.grid - 1) as f64;
        let s = sigmoid.as_ref().map_or(f64::NAN, |p| p.prelogit(x));
        rows.push(vec![x, target.eval(x), steps.eval(x), s]);
    }
    let header = io::header(&["x", "S", "step", "sigmoid"]);
    io::write_csv(&args.out.join("approx.csv"), Some(&header), &rows)?;

    let levels = (args.n + 1) as f64;
    let bound = 1.0 / levels;
    let achieved = universal::certify(&target, |x| steps.eval(x), args.grid)?;
    let sigmoid_achieved = match &sigmoid {
        Some(p) => Some(universal::certify(&target, |x| p.prelogit(x), args.grid)?),
        None => None,
    };
    let ks = if args.ks_samples > 0 && args.n >= 2 {
        Some(universal::ks_demo(&target, args.n, args.ks_samples, args.seed)?.statistic)
    } else {
        None
    };
    let holds = achieved <= bound + 1e-9;
    let certificate = json!({
        "target": args.target,
        "interval": [r0, r1],
        "n": args.n,
        "grid": args.grid,
        "bound": bound,
        "achieved": achieved,
        "holds": holds,
        "eps0": eps0,
        "sigmoid_bound": sigmoid.as_ref().map(|_| 3.0 / levels),
        "sigmoid_achieved": sigmoid_achieved,
        "ks_samples": args.ks_samples,
        "ks_statistic": ks,
    });
    io::write_json(&args.out.join("certificate.json"), &certificate)?;
    if !holds {
        bail!(CheckFailed(format!("step error {achieved:e} exceeds the bound {bound:e}")));
    }
    Ok(())
}
