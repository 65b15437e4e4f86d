//! `selftest`: fast property suites with a pass/fail table.

use anyhow::{bail, Result};
use clap::Args;
use nafkit::diffgraph::{check_gradients, Graph, ParamStore};
use nafkit::flow::{Base, FlowStack};
use nafkit::stablemath::{logit, logsigmoid, logsumexp, sigmoid, softplus};
use nafkit::targets::gaussian_mixture;
use nafkit::training::{energy_loss_with_noise, mle_loss};
use nafkit::transformer::{check_monotone, random_transformer, TransformerKind};
use nafkit::universal::{build_step_approx, certify, MonotoneTarget};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::exit::{CheckFailed, UsageError};

pub const SUITES: [&str; 6] = ["stablemath", "monotone", "logdet", "gradients", "inversion", "lemma1"];

const KINDS: [TransformerKind; 4] = [
    TransformerKind::AffineExp,
    TransformerKind::AffineGate,
    TransformerKind::DSF,
    TransformerKind::DDSF,
];

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Run only these suites (repeatable).
    #[arg(long)]
    pub suite: Vec<String>,
}

/// `Ok(detail)` or `Err(failure naming the seed)`.
type Outcome = std::result::Result<String, String>;

struct Check {
    suite: &'static str,
    property: String,
    outcome: Outcome,
}

fn stablemath_suite() -> Vec<(String, Outcome)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut shift = Ok("1000 vectors".to_string());
    let mut odd = Ok("1000 points".to_string());
    for case in 0..1000 {
        let v: Vec<f64> = (0..rng.random_range(1..20)).map(|_| rng.random_range(-50.0..50.0)).collect();
        let c = rng.random_range(-1e3..1e3);
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let (a, b) = (logsumexp(&v).unwrap(), logsumexp(&shifted).unwrap());
        if shift.is_ok() && ((b - c) - a).abs() > 1e-12 * a.abs().max(1.0) + 1e-10 {
            shift = Err(format!("case {case} (seed 11): {a} vs {}", b - c));
        }
        let x = rng.random_range(-30.0..30.0);
        let err = (logsigmoid(x) - logsigmoid(-x) - x).abs() + (softplus(x) - softplus(-x) - x).abs();
        if odd.is_ok() && err > 1e-12 {
            odd = Err(format!("x = {x} (seed 11): residual {err:e}"));
        }
    }
    let big = logsumexp(&[1e6, 1e6]).map(|v| (v - 1e6 - 2f64.ln()).abs() < 1e-9).unwrap_or(false);
    let round = (1..1000).all(|i| {
        let p = i as f64 / 1000.0;
        (sigmoid(logit(p)) - p).abs() <= 1e-15
    });
    vec![
        ("logsumexp shift invariance".into(), shift),
        ("logsigmoid and softplus odd parts".into(), odd),
        ("logsumexp at 1e6".into(), if big { Ok("finite".into()) } else { Err("overflow".into()) }),
        ("sigmoid(logit(p)) = p".into(), if round { Ok("999 levels".into()) } else { Err("round trip off".into()) }),
    ]
}

fn monotone_suite() -> Vec<(String, Outcome)> {
    let grid: Vec<f64> = (0..201).map(|i| -5.0 + 0.05 * i as f64).collect();
    KINDS
        .iter()
        .map(|&kind| {
            let mut outcome = Ok("1000 parameterizations".to_string());
            for seed in 0..1000u64 {
                let t = random_transformer(kind, &mut ChaCha8Rng::seed_from_u64(seed));
                if !check_monotone(|x| t.forward(x).map_or(f64::NAN, |r| r.0), &grid) {
                    outcome = Err(format!("not increasing for seed {seed}"));
                    break;
                }
            }
            (format!("strictly increasing: {}", kind.name()), outcome)
        })
        .collect()
}

fn logdet_suite() -> Vec<(String, Outcome)> {
    KINDS
        .iter()
        .map(|&kind| {
            let mut outcome = Ok("100 seeds".to_string());
            for seed in 0..100u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let t = random_transformer(kind, &mut rng);
                let x = rng.random_range(-3.0..3.0);
                let h = 1e-5;
                let fd = match (t.forward(x + h), t.forward(x - h), t.forward(x)) {
                    (Ok(p), Ok(m), Ok(c)) => Some(((p.0 - m.0) / (2.0 * h), c.1.exp())),
                    _ => None,
                };
                match fd {
                    Some((num, ana)) if (num - ana).abs() <= 1e-4 * ana.abs().max(1e-8) => {}
                    Some((num, ana)) => {
                        outcome = Err(format!("seed {seed}, x = {x}: exp(logdet) {ana} vs difference {num}"));
                        break;
                    }
                    None => {
                        outcome = Err(format!("seed {seed}, x = {x}: forward failed"));
                        break;
                    }
                }
            }
            (format!("logdet matches finite differences: {}", kind.name()), outcome)
        })
        .collect()
}

fn gradient_suite() -> Vec<(String, Outcome)> {
    let seed = 7;
    let mut stack = match FlowStack::new(2, &[8], &[TransformerKind::Dsf { d: 4 }; 2], Base::StandardNormal) {
        Ok(s) => s,
        Err(e) => return vec![("stack construction".into(), Err(e.to_string()))],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in stack.layers().to_vec() {
        layer.conditioner().init_uniform(stack.store_mut(), &mut rng, 0.5, 0.5);
    }
    let data: Vec<Vec<f64>> = (0..16).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
    let target = gaussian_mixture("pair", vec![vec![-1.0, 1.0], vec![1.0, 0.5]], 0.8).expect("valid mixture");
    let noise = stack.base_draws(16, &mut rng);
    let ids: Vec<_> = stack.store().ids().collect();
    let template = stack.clone();
    let with = |store: &ParamStore| {
        let mut s = template.clone();
        *s.store_mut() = store.clone();
        s
    };
    let mle = |store: &ParamStore| {
        let s = with(store);
        let mut g = Graph::new();
        let v = mle_loss(&mut g, &s, &data)?;
        Ok((g, v))
    };
    let energy = |store: &ParamStore| {
        let s = with(store);
        let mut g = Graph::new();
        let v = energy_loss_with_noise(&mut g, &s, &target, &noise)?;
        Ok((g, v))
    };
    let judge = |worst: nafkit::Result<f64>| match worst {
        Ok(w) if w <= 1e-3 => Ok(format!("worst relative error {w:.1e}")),
        Ok(w) => Err(format!("seed {seed}: relative error {w:e}")),
        Err(e) => Err(format!("seed {seed}: {e}")),
    };
    let a = judge(check_gradients(mle, stack.store_mut(), &ids, 1e-5));
    let b = judge(check_gradients(energy, stack.store_mut(), &ids, 1e-5));
    vec![
        ("mle gradient, DSF stack m = 2".into(), a),
        ("energy gradient, DSF stack m = 2".into(), b),
    ]
}

fn inversion_suite() -> Vec<(String, Outcome)> {
    KINDS
        .iter()
        .map(|&kind| {
            let mut outcome = Ok("1000 points".to_string());
            for seed in 0..1000u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let t = random_transformer(kind, &mut rng);
                let x = rng.random_range(-4.0..4.0);
                let back = t.forward(x).and_then(|(y, _)| t.invert(y));
                match back {
                    Ok(b) if (b - x).abs() <= 1e-8 => {}
                    Ok(b) => {
                        outcome = Err(format!("seed {seed}: x = {x} came back as {b}"));
                        break;
                    }
                    Err(e) => {
                        outcome = Err(format!("seed {seed}: {e}"));
                        break;
                    }
                }
            }
            (format!("invert after forward: {}", kind.name()), outcome)
        })
        .collect()
}

fn step_bound_suite() -> Vec<(String, Outcome)> {
    let mut out = Vec::new();
    let identity = MonotoneTarget::identity();
    let n6 = build_step_approx(&identity, 6).and_then(|s| certify(&identity, |x| s.eval(x), 10_000));
    out.push((
        "identity, n = 6, error <= 1/7".to_string(),
        match n6 {
            Ok(e) if e <= 1.0 / 7.0 + 1e-9 => Ok(format!("error {e:.6}")),
            Ok(e) => Err(format!("error {e}")),
            Err(e) => Err(e.to_string()),
        },
    ));
    let mut outcome = Ok("20 targets x 5 sizes".to_string());
    'targets: for seed in 0..20u64 {
        let target = match MonotoneTarget::random(&mut ChaCha8Rng::seed_from_u64(seed), -3.0, 3.0) {
            Ok(t) => t,
            Err(e) => {
                outcome = Err(format!("seed {seed}: {e}"));
                break;
            }
        };
        for n in [1, 4, 9, 19, 49] {
            let err = build_step_approx(&target, n).and_then(|s| certify(&target, |x| s.eval(x), 2001));
            match err {
                Ok(e) if e <= 1.0 / (n + 1) as f64 + 1e-9 => {}
                Ok(e) => {
                    outcome = Err(format!("seed {seed}, n = {n}: error {e}"));
                    break 'targets;
                }
                Err(e) => {
                    outcome = Err(format!("seed {seed}, n = {n}: {e}"));
                    break 'targets;
                }
            }
        }
    }
    out.push(("step error <= 1/(n+1)".to_string(), outcome));
    out
}

fn run_suite(name: &'static str) -> Vec<Check> {
    let results = match name {
        "stablemath" => stablemath_suite(),
        "monotone" => monotone_suite(),
        "logdet" => logdet_suite(),
        "gradients" => gradient_suite(),
        "inversion" => inversion_suite(),
        "lemma1" => step_bound_suite(),
        _ => unreachable!("suite names are checked"),
    };
    results
        .into_iter()
        .map(|(property, outcome)| Check {
            suite: name,
            property,
            outcome,
        })
        .collect()
}

pub fn selftest(args: &SelftestArgs) -> Result<()> {
    for s in &args.suite {
        if !SUITES.contains(&s.as_str()) {
            bail!(UsageError(format!("unknown suite `{s}`; available: {}", SUITES.join(", "))));
        }
    }
    let chosen: Vec<&'static str> =
        SUITES.iter().copied().filter(|s| args.suite.is_empty() || args.suite.iter().any(|a| a == s)).collect();
    let checks: Vec<Check> = chosen.into_iter().flat_map(run_suite).collect();

    let width = checks.iter().map(|c| c.property.len()).max().unwrap_or(0);
    let mut failures = Vec::new();
    for c in &checks {
        let (status, detail) = match &c.outcome {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        println!("{:<10}  {:<width$}  {status}  {detail}", c.suite, c.property);
        if c.outcome.is_err() {
            failures.push(format!("{}: {} ({detail})", c.suite, c.property));
        }
    }
    if !failures.is_empty() {
        bail!(CheckFailed(format!("{} check(s) failed: {}", failures.len(), failures.join("; "))));
    }
    Ok(())
}
