//! Acceptance suite: one test per criterion, each printing a single
//! `PASS`/`FAIL` line (visible with `--nocapture`) before asserting.
//!
//! The experiment criteria drive the `nafkit` binary end to end and judge
//! its output files with oracles written here, not with library helpers.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use nafkit::diffgraph::{check_gradients, Graph, ParamStore};
use nafkit::flow::{Base, FlowStack};
use nafkit::targets::gaussian_mixture;
use nafkit::training::{energy_loss_with_noise, fit, mle_loss, LossKind, Source, TrainConfig};
use nafkit::transformer::{random_transformer, TransformerKind};
use nafkit::universal::{build_step_approx, MonotoneTarget};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KINDS: [TransformerKind; 4] = [
    TransformerKind::AffineExp,
    TransformerKind::AffineGate,
    TransformerKind::Dsf { d: 16 },
    TransformerKind::Ddsf { d: 16, layers: 2 },
];

fn report(criterion: u32, name: &str, pass: bool, detail: String) {
    println!("criterion {criterion:>2} {name}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

fn random_stack(m: usize, kinds: &[TransformerKind], seed: u64) -> FlowStack {
    let mut stack = FlowStack::new(m, &[16], kinds, Base::StandardNormal).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in stack.layers().to_vec() {
        layer.conditioner().init_uniform(stack.store_mut(), &mut rng, 0.5, 0.5);
    }
    stack
}

#[test]
fn criterion_01_monotonicity() {
    let start = Instant::now();
    let xs = grid(-5.0, 5.0, 201);
    let mut violations = 0;
    for kind in KINDS {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..1000 {
            let t = random_transformer(kind, &mut rng);
            let ys: Vec<f64> = xs.iter().map(|&x| t.forward(x).unwrap().0).collect();
            if ys.windows(2).any(|p| !(p[1] > p[0])) {
                violations += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(1, "monotonicity", violations == 0 && secs < 30.0, format!("{violations} violations in 4000 maps, {secs:.1}s"));
}

#[test]
fn criterion_02_logdet_exactness() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for kind in KINDS {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_transformer(kind, &mut rng);
            let x = rng.random_range(-3.0..3.0);
            let h = 1e-5;
            let fd = (t.forward(x + h).unwrap().0 - t.forward(x - h).unwrap().0) / (2.0 * h);
            let exact = t.forward(x).unwrap().1.exp();
            worst = worst.max((fd - exact).abs() / exact);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(2, "logdet exactness", worst <= 1e-4 && secs < 30.0, format!("worst relative error {worst:.2e}, {secs:.1}s"));
}

#[test]
fn criterion_03_gradient_exactness() {
    let start = Instant::now();
    let mut stack = random_stack(2, &[TransformerKind::Dsf { d: 4 }; 2], 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data: Vec<Vec<f64>> = (0..16).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
    let target = gaussian_mixture("pair", vec![vec![-1.0, 1.0], vec![1.0, 0.5]], 0.8).unwrap();
    let noise = stack.base_draws(16, &mut rng);
    let ids: Vec<_> = stack.store().ids().collect();
    let template = stack.clone();
    let with = |store: &ParamStore| {
        let mut s = template.clone();
        *s.store_mut() = store.clone();
        s
    };
    let mle = |store: &ParamStore| {
        let mut g = Graph::new();
        let v = mle_loss(&mut g, &with(store), &data)?;
        Ok((g, v))
    };
    let energy = |store: &ParamStore| {
        let mut g = Graph::new();
        let v = energy_loss_with_noise(&mut g, &with(store), &target, &noise)?;
        Ok((g, v))
    };
    let a = check_gradients(mle, stack.store_mut(), &ids, 1e-5).unwrap();
    let b = check_gradients(energy, stack.store_mut(), &ids, 1e-5).unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        "gradient exactness",
        a <= 1e-3 && b <= 1e-3 && secs < 60.0,
        format!("mle {a:.2e}, energy {b:.2e}, {secs:.1}s"),
    );
}

#[test]
fn criterion_04_invertibility() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for kind in KINDS {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for _ in 0..1000 {
            let t = random_transformer(kind, &mut rng);
            let x = rng.random_range(-4.0..4.0);
            let back = t.invert(t.forward(x).unwrap().0).unwrap();
            worst = worst.max((back - x).abs());
        }
    }
    let stack = random_stack(3, &[TransformerKind::DSF, TransformerKind::AffineExp, TransformerKind::DSF], 5);
    let samples = stack.sample(10_000, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let lp = stack.log_density_batch(&samples).unwrap();
    let finite = lp.iter().all(|v| v.is_finite());
    let secs = start.elapsed().as_secs_f64();
    report(
        4,
        "invertibility",
        worst <= 1e-8 && finite && secs < 60.0,
        format!("worst round trip {worst:.2e}, 10^4 stack log-densities finite: {finite}, {secs:.1}s"),
    );
}

#[test]
fn criterion_05_triangular_jacobian() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for m in [2, 3, 4] {
        let stack = random_stack(m, &[TransformerKind::DSF, TransformerKind::DDSF], 50 + m as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(m as u64);
        for (i, layer) in stack.layers().iter().enumerate() {
            let rank: Vec<usize> = {
                let mut r = vec![0; m];
                for (pos, &dim) in layer.order().iter().enumerate() {
                    r[dim] = pos;
                }
                r
            };
            for _ in 0..5 {
                let x: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
                for j in 0..m {
                    let mut up = x.clone();
                    let mut down = x.clone();
                    up[j] += h;
                    down[j] -= h;
                    let (yu, _) = stack.layer_forward(i, &up).unwrap();
                    let (yd, _) = stack.layer_forward(i, &down).unwrap();
                    for out in 0..m {
                        // output `out` may only depend on inputs up to its own position
                        if rank[j] > rank[out] {
                            worst = worst.max(((yu[out] - yd[out]) / (2.0 * h)).abs());
                        }
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(5, "triangular jacobian", worst <= 1e-9 && secs < 30.0, format!("largest off-triangle entry {worst:.2e}, {secs:.1}s"));
}

#[test]
fn criterion_06_step_certificate() {
    let start = Instant::now();
    let sup_error = |target: &MonotoneTarget, n: usize| {
        let steps = build_step_approx(target, n).unwrap();
        let (r0, r1) = target.bounds();
        grid(r0, r1, 20_001).into_iter().map(|x| (steps.eval(x) - target.eval(x)).abs()).fold(0.0, f64::max)
    };
    let identity = sup_error(&MonotoneTarget::identity(), 6);
    let mut ok = identity <= 1.0 / 7.0 + 1e-9;
    let mut worst_ratio: f64 = 0.0;
    for seed in 0..20u64 {
        let target = MonotoneTarget::random(&mut ChaCha8Rng::seed_from_u64(600 + seed), -3.0, 3.0).unwrap();
        for n in [1, 4, 9, 19, 49] {
            let e = sup_error(&target, n);
            ok &= e <= 1.0 / (n + 1) as f64 + 1e-9;
            worst_ratio = worst_ratio.max(e * (n + 1) as f64);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        6,
        "step certificate",
        ok && secs < 30.0,
        format!("identity n=6 error {identity:.6} (bound {:.6}), worst error*(n+1) {worst_ratio:.6}, {secs:.1}s", 1.0 / 7.0),
    );
}

// ---------------------------------------------------------------------------
// experiments through the binary
// ---------------------------------------------------------------------------

fn run_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = fs::remove_dir_all(&dir);
    dir
}

/// Runs one `nafkit` command writing into a fresh directory, returning the
/// directory and the wall time in seconds.
fn nafkit(name: &str, args: &[&str]) -> (PathBuf, f64) {
    let dir = run_dir(name);
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_nafkit"))
        .args(args)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    (dir, start.elapsed().as_secs_f64())
}

const GRID_DSF: &[&str] = &[
    "fit-density", "--target", "grid-k2", "--model", "dsf", "--d", "16", "--stack", "1", "--steps", "5000", "--lr", "1e-2",
    "--n-train", "10000", "--n-valid", "2000", "--samples", "10000", "--radius", "1.5", "--seed", "7",
];
const GRID_AFFINE: &[&str] = &[
    "fit-density", "--target", "grid-k2", "--model", "affine", "--stack", "6", "--steps", "5000", "--lr", "1e-2",
    "--n-train", "10000", "--n-valid", "2000", "--samples", "10000", "--radius", "1.5", "--seed", "7",
];
const FOUR_DSF: &[&str] = &[
    "fit-energy", "--target", "four-mode", "--model", "dsf", "--d", "16", "--stack", "1", "--steps", "5000", "--lr", "1e-2",
    "--samples", "10000", "--seed", "8",
];
const FOUR_AFFINE: &[&str] = &[
    "fit-energy", "--target", "four-mode", "--model", "affine", "--stack", "6", "--steps", "5000", "--lr", "1e-2",
    "--samples", "10000", "--seed", "8",
];
const SINE_DSF: &[&str] = &[
    "fit-energy", "--target", "sine-posterior", "--model", "dsf", "--d", "16", "--stack", "1", "--steps", "5000", "--lr",
    "1e-2", "--samples", "10000", "--hist", "0,2,100", "--seed", "9",
];

macro_rules! first_run {
    ($name:literal, $args:expr) => {{
        static RUN: OnceLock<(PathBuf, f64)> = OnceLock::new();
        RUN.get_or_init(|| nafkit($name, $args))
    }};
}

fn grid_dsf() -> &'static (PathBuf, f64) {
    first_run!("grid-dsf", GRID_DSF)
}
fn grid_affine() -> &'static (PathBuf, f64) {
    first_run!("grid-affine", GRID_AFFINE)
}
fn four_dsf() -> &'static (PathBuf, f64) {
    first_run!("four-dsf", FOUR_DSF)
}
fn four_affine() -> &'static (PathBuf, f64) {
    first_run!("four-affine", FOUR_AFFINE)
}
fn sine_dsf() -> &'static (PathBuf, f64) {
    first_run!("sine-dsf", SINE_DSF)
}

fn metrics(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join("metrics.json")).unwrap()).unwrap()
}

fn read_samples(dir: &Path) -> Vec<Vec<f64>> {
    let text = fs::read_to_string(dir.join("samples.csv")).unwrap();
    text.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect()
}

fn fractions_near(samples: &[Vec<f64>], modes: &[[f64; 2]], radius: f64) -> Vec<f64> {
    modes
        .iter()
        .map(|m| {
            let hits = samples.iter().filter(|s| (s[0] - m[0]).hypot(s[1] - m[1]) <= radius).count();
            hits as f64 / samples.len() as f64
        })
        .collect()
}

/// Differential entropy of the grid-k2 mixture, the expected NLL of a
/// perfect model. The density factorizes into two copies of the 1-D mixture
/// `(N(-5, 0.25) + N(5, 0.25)) / 2`, so one fine 1-D quadrature suffices.
fn grid_k2_entropy() -> f64 {
    let sd: f64 = 0.5;
    let pdf = |x: f64| {
        let g = |m: f64| (-(x - m).powi(2) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
        0.5 * (g(-5.0) + g(5.0))
    };
    let xs = grid(-12.0, 12.0, 240_001);
    let h = xs[1] - xs[0];
    let one_d: f64 = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let p = pdf(x);
            let w = if i == 0 || i + 1 == xs.len() { 0.5 } else { 1.0 };
            if p > 0.0 { -w * p * p.ln() } else { 0.0 }
        })
        .sum::<f64>()
        * h;
    2.0 * one_d
}

#[test]
fn criterion_07_gaussian_grid_fit() {
    let (dsf_dir, t1) = grid_dsf();
    let (aff_dir, t2) = grid_affine();
    let exact = grid_k2_entropy();
    let dsf = metrics(dsf_dir)["valid_nll"].as_f64().unwrap();
    let aff = metrics(aff_dir)["valid_nll"].as_f64().unwrap();
    let modes = [[-5.0, -5.0], [-5.0, 5.0], [5.0, -5.0], [5.0, 5.0]];
    let coverage = fractions_near(&read_samples(dsf_dir), &modes, 1.5);
    let cover_ok = coverage.iter().all(|&f| f >= 0.15);
    let secs = t1 + t2;
    report(
        7,
        "gaussian grid fit",
        dsf <= exact + 0.3 && aff >= dsf + 0.2 && cover_ok && secs < 600.0,
        format!("exact {exact:.4}, dsf {dsf:.4}, affine {aff:.4}, dsf coverage {coverage:.3?}, {secs:.0}s"),
    );
}

#[test]
fn criterion_08_four_mode_energy() {
    let (dsf_dir, t1) = four_dsf();
    let (aff_dir, t2) = four_affine();
    let modes = [[-2.0, -2.0], [-2.0, 2.0], [2.0, -2.0], [2.0, 2.0]];
    let dsf = fractions_near(&read_samples(dsf_dir), &modes, 1.5);
    let aff = fractions_near(&read_samples(aff_dir), &modes, 1.5);
    let dsf_ok = dsf.iter().all(|&f| f >= 0.10);
    let aff_fails = aff.iter().any(|&f| f < 0.05);
    let secs = t1 + t2;
    report(
        8,
        "four-mode energy",
        dsf_ok && aff_fails && secs < 600.0,
        format!("dsf {dsf:.3?}, affine {aff:.3?} (radius 1.5), {secs:.0}s"),
    );
}

/// Centers of 100-bin histogram local maxima over `[0, 2]` holding at least
/// a tenth of the tallest bin. A plateau counts once, at its left bin.
fn histogram_maxima(values: &[f64]) -> Vec<f64> {
    let mut counts = [0usize; 100];
    for &v in values {
        if (0.0..=2.0).contains(&v) {
            counts[((v / 0.02) as usize).min(99)] += 1;
        }
    }
    let top = *counts.iter().max().unwrap();
    (0..100)
        .filter(|&i| {
            let left = i == 0 || counts[i] >= counts[i - 1];
            let right = i == 99 || counts[i] > counts[i + 1];
            left && right && counts[i] > 0 && counts[i] as f64 >= 0.1 * top as f64
        })
        .map(|i| 0.02 * (i as f64 + 0.5))
        .collect()
}

#[test]
fn criterion_09_sine_posterior() {
    let (dir, secs) = sine_dsf();
    let values: Vec<f64> = read_samples(dir).into_iter().map(|r| r[0]).collect();
    let peaks = histogram_maxima(&values);
    let found: Vec<f64> =
        [0.0, 0.6, 1.2, 1.8].into_iter().filter(|m| peaks.iter().any(|p| (p - m).abs() <= 0.1)).collect();
    report(
        9,
        "sine posterior",
        found.len() >= 3 && *secs < 300.0,
        format!("maxima at {peaks:.2?}, modes matched {found:?}, {secs:.0}s"),
    );
}

#[test]
fn criterion_10_normalization() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let data: Vec<Vec<f64>> = (0..2000)
        .map(|i| vec![if i % 2 == 0 { -2.0 } else { 1.5 } + 0.4 * rng.random_range(-1.0..1.0)])
        .collect();
    let xs = grid(-10.0, 10.0, 4001);
    let h = xs[1] - xs[0];
    let mut masses = Vec::new();
    for kind in KINDS {
        let mut stack = FlowStack::new(1, &[16], &[kind], Base::StandardNormal).unwrap();
        stack.identity_init(&mut rng);
        let cfg = TrainConfig { steps: 300, batch: 128, lr: 1e-2, seed: 11, ..TrainConfig::default() };
        fit(&mut stack, Source::Data(&data), &cfg).unwrap();
        masses.push(trapezoid(&stack, &xs, h));
    }
    let sine = nafkit::targets::sine_posterior();
    let mut energy = FlowStack::new(1, &[16], &[TransformerKind::DSF], Base::StandardNormal).unwrap();
    energy.identity_init(&mut rng);
    let cfg = TrainConfig { loss: LossKind::Energy, steps: 300, batch: 128, lr: 1e-2, seed: 12, ..TrainConfig::default() };
    fit(&mut energy, Source::Target(&sine), &cfg).unwrap();
    masses.push(trapezoid(&energy, &xs, h));
    let worst = masses.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    report(10, "normalization", worst <= 0.01, format!("masses {masses:.5?}, {secs:.1}s (training included)"));
}

fn trapezoid(stack: &FlowStack, xs: &[f64], h: f64) -> f64 {
    let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
    let p: Vec<f64> = stack.model_log_prob(&rows).unwrap().into_iter().map(f64::exp).collect();
    h * (p.iter().sum::<f64>() - 0.5 * (p[0] + p[p.len() - 1]))
}

#[test]
fn criterion_11_determinism() {
    let runs: [(&str, &(PathBuf, f64), &[&str]); 5] = [
        ("grid-dsf-again", grid_dsf(), GRID_DSF),
        ("grid-affine-again", grid_affine(), GRID_AFFINE),
        ("four-dsf-again", four_dsf(), FOUR_DSF),
        ("four-affine-again", four_affine(), FOUR_AFFINE),
        ("sine-dsf-again", sine_dsf(), SINE_DSF),
    ];
    let mut differing = Vec::new();
    for (name, (first, _), args) in runs {
        let (second, _) = nafkit(name, args);
        if fs::read(first.join("metrics.json")).unwrap() != fs::read(second.join("metrics.json")).unwrap() {
            differing.push(name);
        }
    }
    report(11, "determinism", differing.is_empty(), format!("5 reruns, metrics differing: {differing:?}"));
}
