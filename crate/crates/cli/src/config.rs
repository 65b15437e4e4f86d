//! Resolved experiment configuration, written next to every run.

use std::path::PathBuf;

use anyhow::{bail, Result};
use nafkit::flow::{Base, FlowStack};
use nafkit::targets::{self, TargetSpec};
use nafkit::training::TrainConfig;
use nafkit::transformer::TransformerKind;
use serde::{Deserialize, Serialize};

use crate::exit::UsageError;

/// Flow architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `dsf`, `ddsf`, `affine` (exp-scale affine) or `affine-gate`.
    pub kind: String,
    pub d: usize,
    pub ddsf_layers: usize,
    /// Number of flow layers; odd layers use the reversed order.
    pub stack: usize,
    pub hidden: Vec<usize>,
}

impl ModelConfig {
    pub fn transformer(&self) -> Result<TransformerKind> {
        let kind = match self.kind.as_str() {
            "dsf" => TransformerKind::Dsf { d: self.d },
            "ddsf" => TransformerKind::Ddsf {
                d: self.d,
                layers: self.ddsf_layers,
            },
            "affine" | "affine-exp" => TransformerKind::AffineExp,
            "affine-gate" => TransformerKind::AffineGate,
            other => bail!(UsageError(format!(
                "unknown model `{other}`; available: dsf, ddsf, affine, affine-gate"
            ))),
        };
        kind.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(kind)
    }

    pub fn build(&self, m: usize) -> Result<FlowStack> {
        if self.stack == 0 {
            bail!(UsageError("the stack needs at least one layer".into()));
        }
        let kind = self.transformer()?;
        Ok(FlowStack::new(m, &self.hidden, &vec![kind; self.stack], Base::StandardNormal)?)
    }
}

/// A 2-D evaluation window, `nx` by `ny` points with the ends included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridWindow {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridWindow {
    /// Parses `xmin,xmax,ymin,ymax,nx,ny`.
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 6 {
            return Err("expected xmin,xmax,ymin,ymax,nx,ny".into());
        }
        let f = |i: usize| parts[i].parse::<f64>().map_err(|e| format!("`{}`: {e}", parts[i]));
        let n = |i: usize| parts[i].parse::<usize>().map_err(|e| format!("`{}`: {e}", parts[i]));
        let g = GridWindow {
            xmin: f(0)?,
            xmax: f(1)?,
            ymin: f(2)?,
            ymax: f(3)?,
            nx: n(4)?,
            ny: n(5)?,
        };
        if !(g.xmin < g.xmax && g.ymin < g.ymax) || g.nx < 2 || g.ny < 2 {
            return Err("the window must be non-empty with at least 2 points per axis".into());
        }
        Ok(g)
    }

    /// Points in row-major order: `y` outer, `x` inner.
    pub fn points(&self) -> Vec<Vec<f64>> {
        let at = |lo: f64, hi: f64, n: usize, i: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
        let mut out = Vec::with_capacity(self.nx * self.ny);
        for j in 0..self.ny {
            let y = at(self.ymin, self.ymax, self.ny, j);
            for i in 0..self.nx {
                out.push(vec![at(self.xmin, self.xmax, self.nx, i), y]);
            }
        }
        out
    }
}

/// Histogram window for 1-D samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistWindow {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl HistWindow {
    /// Parses `lo,hi,bins`.
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err("expected lo,hi,bins".into());
        }
        let lo = parts[0].parse::<f64>().map_err(|e| e.to_string())?;
        let hi = parts[1].parse::<f64>().map_err(|e| e.to_string())?;
        let bins = parts[2].parse::<usize>().map_err(|e| e.to_string())?;
        if !(lo < hi) || bins == 0 {
            return Err("need lo < hi and at least one bin".into());
        }
        Ok(HistWindow { lo, hi, bins })
    }
}

/// Everything a fit needs; re-running from this file reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// `fit-density` or `fit-energy`.
    pub command: String,
    pub target: Option<String>,
    pub data: Option<PathBuf>,
    pub header: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Data draws use `seed`, initialization `seed + 1`, training noise and
    /// shuffling `train.seed`, model samples `seed + 3`.
    pub seed: u64,
    /// Training and validation sizes when sampling a named target.
    pub n_train: usize,
    pub n_valid: usize,
    /// Share of CSV rows held out for validation.
    pub valid_fraction: f64,
    /// Model samples drawn after training.
    pub samples: usize,
    /// Radius of the mode-coverage count.
    pub radius: f64,
    /// Histogram peaks must reach this share of the tallest bin.
    pub peak_min_share: f64,
    pub grid: Option<GridWindow>,
    pub hist: Option<HistWindow>,
    /// Description of the target (read back but not used).
    #[serde(default)]
    pub target_spec: Option<serde_json::Value>,
}

pub fn target(name: &str) -> Result<TargetSpec> {
    targets::by_name(name).map_err(|e| UsageError(e.to_string()).into())
}
