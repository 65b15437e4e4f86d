use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Scalarizes `out` with fixed weights so every output entry is exercised.
fn weighted_sum(g: &mut Graph, out: Value, weights: &Tensor) -> Value {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w).unwrap();
    g.sum(p).unwrap()
}

type Builder = dyn Fn(&mut Graph, &[Value]) -> Result<Value>;

/// Max relative deviation between backward and central differences of
/// `sum(weights * build(inputs))` with respect to every input entry.
fn fd_deviation(inputs: &[Tensor], build: &Builder, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let mut g = Graph::new();
    let leaves: Vec<Value> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &leaves).unwrap();
    let weights = rand_tensor(&mut rng, g.shape(out), 0.5, 1.5);
    let root = weighted_sum(&mut g, out, &weights);
    let grads = g.backward(root).unwrap();

    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let leaves: Vec<Value> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &leaves).unwrap();
        let root = weighted_sum(&mut g, out, &weights);
        g.item(root).unwrap()
    };

    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(&g, *leaf);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

#[test]
fn record_examples() {
    let mut g = Graph::new();
    let a = g.scalar(2.0);
    let b = g.scalar(3.0);
    let c = g.record(Op::Add(a, b)).unwrap();
    assert_eq!(g.item(c).unwrap(), 5.0);

    let z = g.scalar(0.0);
    let s = g.record(Op::Sigmoid(z)).unwrap();
    assert_eq!(g.item(s).unwrap(), 0.5);

    let v = g.constant(Tensor::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap());
    let l = g.record(Op::LogSumExp(v, 1)).unwrap();
    assert_eq!(g.shape(l), &[1]);
    assert!((g.data(l).data()[0] - 4f64.ln()).abs() < 1e-15);
}

#[test]
fn record_rejects_bad_shapes_and_poles() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let b = g.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    let m = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(m, m), Err(Error::Shape { .. })));

    let zero = g.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(g.log(zero), Err(Error::Numeric { .. })));
    assert!(matches!(g.div(b, zero), Err(Error::Numeric { .. })));

    let inf = g.scalar(f64::INFINITY);
    assert!(matches!(g.sub(inf, inf), Err(Error::Numeric { .. })));
}

fn param_graph(store: &mut ParamStore, init: &[f64]) -> Vec<ParamId> {
    init.iter()
        .enumerate()
        .map(|(i, &v)| store.register(format!("p{i}"), Tensor::scalar(v)).unwrap())
        .collect()
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::new();
    let ids = param_graph(&mut store, &[3.0, 0.0, 0.0, 3f64.ln()]);

    let mut g = Graph::new();
    let p = g.param(&store, ids[0]);
    let sq = g.mul(p, p).unwrap();
    g.backward_into(sq, &mut store).unwrap();
    assert_eq!(store.grad(ids[0]).data(), &[6.0]);

    let mut g = Graph::new();
    let p = g.param(&store, ids[1]);
    let s = g.sigmoid(p).unwrap();
    g.backward_into(s, &mut store).unwrap();
    assert_eq!(store.grad(ids[1]).data(), &[0.25]);

    let mut g = Graph::new();
    let p = g.param(&store, ids[2]);
    let q = g.param(&store, ids[3]);
    let p = g.reshape(p, &[1]).unwrap();
    let q = g.reshape(q, &[1]).unwrap();
    let v = g.concat(&[p, q], 0).unwrap();
    let l = g.logsumexp(v, 0).unwrap();
    g.backward_into(l, &mut store).unwrap();
    assert!((store.grad(ids[2]).data()[0] - 0.25).abs() < 1e-15);
    assert!((store.grad(ids[3]).data()[0] - 0.75).abs() < 1e-15);
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::new();
    let v = g.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(v), Err(Error::Domain(_))));
}

#[test]
fn gradients_accumulate_until_zeroed() {
    let mut store = ParamStore::new();
    let ids = param_graph(&mut store, &[3.0, 1.0]);
    let run = |store: &mut ParamStore| {
        let mut g = Graph::new();
        let p = g.param(store, ids[0]);
        let sq = g.mul(p, p).unwrap();
        g.backward_into(sq, store).unwrap();
    };
    run(&mut store);
    run(&mut store);
    assert_eq!(store.grad(ids[0]).data(), &[12.0]);
    // unreachable parameter stays at zero
    assert_eq!(store.grad(ids[1]).data(), &[0.0]);
    store.zero_grad();
    run(&mut store);
    assert_eq!(store.grad(ids[0]).data(), &[6.0]);
}

#[test]
fn check_gradients_on_quadratic() {
    let mut store = ParamStore::new();
    let id = store.register("theta", Tensor::vector(vec![0.7, -1.3, 2.1])).unwrap();
    let coef = Tensor::vector(vec![1.0, 2.5, 0.3]);
    let loss = |s: &ParamStore| {
        let mut g = Graph::new();
        let p = g.param(s, id);
        let c = g.constant(coef.clone());
        let sq = g.mul(p, p)?;
        let w = g.mul(sq, c)?;
        let root = g.sum(w)?;
        Ok((g, root))
    };
    let dev = check_gradients(loss, &mut store, &[id], 1e-5).unwrap();
    assert!(dev < 1e-7, "deviation {dev}");
    assert_eq!(store.value(id).data(), &[0.7, -1.3, 2.1]);
    assert!(check_gradients(loss, &mut store, &[id], 1e-2).is_err());
}

#[test]
fn check_gradients_detects_nondeterminism() {
    use std::cell::Cell;
    let mut store = ParamStore::new();
    let id = store.register("theta", Tensor::scalar(1.0)).unwrap();
    let calls = Cell::new(0.0);
    let loss = |s: &ParamStore| {
        calls.set(calls.get() + 1.0);
        let mut g = Graph::new();
        let p = g.param(s, id);
        let c = g.scalar(calls.get());
        let root = g.mul(p, c)?;
        Ok((g, root))
    };
    assert!(matches!(check_gradients(loss, &mut store, &[id], 1e-5), Err(Error::Inconsistent(_))));
}

#[test]
fn every_op_matches_finite_differences() {
    type Case = (&'static str, Vec<(Vec<usize>, f64, f64)>, Box<Builder>);
    let cases: Vec<Case> = vec![
        ("add", vec![(vec![2, 3], -3.0, 3.0), (vec![3], -3.0, 3.0)], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![(vec![2, 1], -3.0, 3.0), (vec![1, 4], -3.0, 3.0)], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![(vec![2, 3], -3.0, 3.0), (vec![2, 3], -3.0, 3.0)], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("mul-self", vec![(vec![4], -3.0, 3.0)], Box::new(|g, v| g.mul(v[0], v[0]))),
        ("div", vec![(vec![2, 3], -3.0, 3.0), (vec![3], 0.5, 3.0)], Box::new(|g, v| g.div(v[0], v[1]))),
        ("neg", vec![(vec![5], -3.0, 3.0)], Box::new(|g, v| g.neg(v[0]))),
        ("exp", vec![(vec![5], -3.0, 3.0)], Box::new(|g, v| g.exp(v[0]))),
        ("log", vec![(vec![5], 0.5, 3.0)], Box::new(|g, v| g.log(v[0]))),
        ("sigmoid", vec![(vec![5], -3.0, 3.0)], Box::new(|g, v| g.sigmoid(v[0]))),
        ("tanh", vec![(vec![5], -3.0, 3.0)], Box::new(|g, v| g.tanh(v[0]))),
        ("sin", vec![(vec![5], -3.0, 3.0)], Box::new(|g, v| g.sin(v[0]))),
        ("relu", vec![(vec![5], 0.1, 3.0)], Box::new(|g, v| g.relu(v[0]))),
        ("softplus", vec![(vec![5], -3.0, 3.0)], Box::new(|g, v| g.softplus(v[0]))),
        ("logsigmoid", vec![(vec![5], -3.0, 3.0)], Box::new(|g, v| g.logsigmoid(v[0]))),
        ("matmul", vec![(vec![2, 3], -3.0, 3.0), (vec![3, 4], -3.0, 3.0)], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("sum", vec![(vec![2, 3], -3.0, 3.0)], Box::new(|g, v| g.sum(v[0]))),
        ("mean", vec![(vec![2, 3], -3.0, 3.0)], Box::new(|g, v| g.mean(v[0]))),
        ("sum_axis", vec![(vec![2, 3, 4], -3.0, 3.0)], Box::new(|g, v| g.sum_axis(v[0], 1))),
        ("logsumexp0", vec![(vec![3, 4], -3.0, 3.0)], Box::new(|g, v| g.logsumexp(v[0], 0))),
        ("logsumexp2", vec![(vec![2, 3, 4], -3.0, 3.0)], Box::new(|g, v| g.logsumexp(v[0], 2))),
        ("logsoftmax", vec![(vec![2, 5], -3.0, 3.0)], Box::new(|g, v| g.logsoftmax(v[0], 1))),
        ("broadcast", vec![(vec![3], -3.0, 3.0)], Box::new(|g, v| g.broadcast_to(v[0], &[2, 3]))),
        ("reshape", vec![(vec![2, 3], -3.0, 3.0)], Box::new(|g, v| g.reshape(v[0], &[3, 2]))),
        ("slice", vec![(vec![2, 5, 2], -3.0, 3.0)], Box::new(|g, v| g.slice(v[0], 1, 1, 3))),
        (
            "concat",
            vec![(vec![2, 2], -3.0, 3.0), (vec![2, 3], -3.0, 3.0)],
            Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
        ),
        (
            "log_matmul",
            vec![(vec![2, 3, 4], -3.0, 3.0), (vec![2, 4, 2], -3.0, 3.0)],
            Box::new(|g, v| g.log_matmul(v[0], v[1])),
        ),
        (
            "log_matmul2d",
            vec![(vec![3, 4], -3.0, 3.0), (vec![4, 2], -3.0, 3.0)],
            Box::new(|g, v| g.log_matmul(v[0], v[1])),
        ),
    ];
    for (name, specs, build) in &cases {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = specs.iter().map(|(s, lo, hi)| rand_tensor(&mut rng, s, *lo, *hi)).collect();
            let dev = fd_deviation(&inputs, build.as_ref(), seed);
            assert!(dev <= 1e-4, "{name} seed {seed}: relative deviation {dev}");
        }
    }
}

#[test]
fn gradient_of_sum_is_sum_of_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[6], -3.0, 3.0);
    let mut store = ParamStore::new();
    let id = store.register("x", x).unwrap();

    let loss_a = |g: &mut Graph, p: Value| {
        let e = g.exp(p).unwrap();
        g.sum(e).unwrap()
    };
    let loss_b = |g: &mut Graph, p: Value| {
        let s = g.sigmoid(p).unwrap();
        let l = g.logsumexp(s, 0).unwrap();
        g.sum(l).unwrap()
    };

    let grad_of = |f: &dyn Fn(&mut Graph, Value) -> Value| {
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let r = f(&mut g, p);
        g.backward(r).unwrap().param(id).unwrap()
    };
    let ga = grad_of(&loss_a);
    let gb = grad_of(&loss_b);
    let gsum = grad_of(&|g: &mut Graph, p: Value| {
        let a = loss_a(g, p);
        let b = loss_b(g, p);
        g.add(a, b).unwrap()
    });
    for i in 0..6 {
        assert!((gsum[i] - (ga[i] + gb[i])).abs() <= 1e-12);
    }
}

#[test]
fn rerun_after_zeroing_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let w = store.register("w", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0)).unwrap();
    let x = rand_tensor(&mut rng, &[5, 3], -3.0, 3.0);
    let run = |store: &mut ParamStore| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.param(store, w);
        let h = g.matmul(xv, wv).unwrap();
        let t = g.tanh(h).unwrap();
        let l = g.logsumexp(t, 1).unwrap();
        let r = g.mean(l).unwrap();
        g.backward_into(r, store).unwrap();
        store.flat_grad()
    };
    let first = run(&mut store);
    store.zero_grad();
    let second = run(&mut store);
    assert!(first.iter().zip(&second).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn masked_log_matmul_gradient_is_finite() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![1, 2], vec![f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap());
    let b = g.constant(Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap());
    let p = g.log_matmul(a, b).unwrap();
    assert_eq!(g.data(p).data()[0], f64::NEG_INFINITY);
    let c = g.constant(Tensor::new(vec![1, 2], vec![0.0, f64::NEG_INFINITY]).unwrap());
    let q = g.log_matmul(c, b).unwrap();
    let r = g.sum(q).unwrap();
    let grads = g.backward(r).unwrap();
    assert_eq!(grads.wrt(&g, b).data(), &[1.0, 0.0]);
}
