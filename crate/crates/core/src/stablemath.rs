//! Log-space primitives.
//!
//! Every product of probabilities or Jacobian factors in the flows is carried
//! as a sum of logarithms. `softplus` carries a floor `DELTA` so that
//! `logsigmoid` and `log(softplus(..))` stay finite; `logsumexp` shifts by the
//! maximum before exponentiating.

use crate::error::{Error, Result};

/// Additive floor inside `softplus`.
pub const DELTA: f64 = 1e-6;

/// `softplus^{-1}(1) = ln(e - 1)`, the pre-activation giving unit softness.
pub const SOFTPLUS_INV_ONE: f64 = 0.541_324_854_612_918_1;

/// `log sum_i exp(v_i)`, shifted by the maximum entry.
///
/// All-`-inf` input returns `-inf` (structural zeros in masked chains).
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::domain("logsumexp of an empty vector"));
    }
    Ok(logsumexp_unchecked(v))
}

pub(crate) fn logsumexp_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    sum.ln() + max
}

/// `log(1 + exp(x)) + DELTA`, computed as `max(x, 0) + log1p(exp(-|x|)) + DELTA`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p() + DELTA
}

/// `-softplus(-x)`; equals `log sigmoid(x) - DELTA`.
#[inline]
pub fn logsigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Plain logistic function, evaluated without overflow on either side.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(p / (1 - p))`.
#[inline]
pub fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

/// `v - logsumexp(v)`.
pub fn logsoftmax(v: &[f64]) -> Result<Vec<f64>> {
    let lse = logsumexp(v)?;
    Ok(v.iter().map(|&x| x - lse).collect())
}

/// Row-major matrix of natural logarithms of a nonnegative matrix.
///
/// Entries may be `-inf` (log of an exact zero) but never NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl LogMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::domain(format!(
                "log-matrix of shape {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        if entries.iter().any(|e| e.is_nan() || *e == f64::INFINITY) {
            return Err(Error::domain("log-matrix entries must be finite or -inf"));
        }
        Ok(LogMatrix {
            rows,
            cols,
            entries,
        })
    }

    /// Takes the entry-wise logarithm of a nonnegative matrix given by rows.
    pub fn from_nonnegative(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut entries = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::domain("ragged matrix rows"));
            }
            for &v in row {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::domain(format!("entry {v} is not a finite nonnegative number")));
                }
                entries.push(v.ln());
            }
        }
        LogMatrix::new(r, c, entries)
    }

    /// Log of the identity matrix: zeros on the diagonal, `-inf` elsewhere.
    pub fn log_identity(n: usize) -> Self {
        let mut entries = vec![f64::NEG_INFINITY; n * n];
        for i in 0..n {
            entries[i * n + i] = 0.0;
        }
        LogMatrix {
            rows: n,
            cols: n,
            entries,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Entry-wise exponential, by rows.
    pub fn exp(&self) -> Vec<Vec<f64>> {
        self.entries
            .chunks(self.cols.max(1))
            .map(|r| r.iter().map(|v| v.exp()).collect())
            .collect()
    }
}

/// Logarithmic matrix product: `out[i][k] = logsumexp_j(a[i][j] + b[j][k])`,
/// i.e. `log(exp(a) . exp(b))`.
pub fn log_matmul(a: &LogMatrix, b: &LogMatrix) -> Result<LogMatrix> {
    if a.cols != b.rows {
        return Err(Error::domain(format!(
            "log_matmul inner dimensions differ: {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Vec::with_capacity(a.rows * b.cols);
    let mut terms = vec![0.0; a.cols];
    for i in 0..a.rows {
        for k in 0..b.cols {
            for (j, t) in terms.iter_mut().enumerate() {
                *t = a.get(i, j) + b.get(j, k);
            }
            out.push(if terms.is_empty() {
                f64::NEG_INFINITY
            } else {
                logsumexp_unchecked(&terms)
            });
        }
    }
    Ok(LogMatrix {
        rows: a.rows,
        cols: b.cols,
        entries: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn logsumexp_examples() {
        assert!(close(logsumexp(&[0.0, 0.0]).unwrap(), LN2, 1e-15));
        assert!(close(logsumexp(&[1000.0, 1000.0]).unwrap(), 1000.0 + LN2, 1e-12));
        // direct summation oracle: exp(0) + exp(ln 3) = 4
        let oracle = (0f64.exp() + 3f64.ln().exp()).ln();
        assert!(close(logsumexp(&[0.0, 3f64.ln()]).unwrap(), oracle, 1e-15));
        assert!(close(oracle, 1.386_294_361_119_890_6, 1e-15));
    }

    #[test]
    fn logsumexp_edge_cases() {
        assert!(matches!(logsumexp(&[]), Err(Error::Domain(_))));
        let all_masked = [f64::NEG_INFINITY; 3];
        assert_eq!(logsumexp(&all_masked).unwrap(), f64::NEG_INFINITY);
        assert!(close(logsumexp(&[f64::NEG_INFINITY, 2.0]).unwrap(), 2.0, 0.0));
        assert!(logsumexp(&[1e6, -1e6]).unwrap().is_finite());
        assert!(close(logsumexp(&[-1e6, -1e6]).unwrap(), -1e6 + LN2, 1e-9));
    }

    #[test]
    fn softplus_examples() {
        assert!(close(softplus(0.0), LN2 + 1e-6, 1e-15));
        let s = softplus(100.0);
        assert!(((s - (100.0 + 1e-6)) / s).abs() < 1e-12);
        // exp(-100) = 3.720075976020836e-44 is below f64 resolution at 1e-6
        assert!(close(softplus(-100.0), 3.720_075_976_020_836e-44 + 1e-6, 1e-20));
        assert!(softplus(-800.0) > 0.0);
    }

    #[test]
    fn logsigmoid_examples() {
        assert!(close(logsigmoid(0.0), -(LN2 + 1e-6), 1e-15));
        assert!(close(logsigmoid(50.0), -1e-6, 1e-15));
        // log sigmoid(-50) = -50 - log1p(exp(-50)) ~ -50 - 1.93e-22
        assert!(close(logsigmoid(-50.0), -50.0 - 1e-6, 1e-13));
    }

    #[test]
    fn logsoftmax_examples() {
        let v = logsoftmax(&[0.0, 0.0]).unwrap();
        assert!(v.iter().all(|&x| close(x, -LN2, 1e-15)));
        for c in [-7.5, 0.0, 3.0, 1e4] {
            let v = logsoftmax(&[c; 4]).unwrap();
            assert!(v.iter().all(|&x| close(x, -(4f64.ln()), 1e-12)), "{c}");
        }
        // softmax oracle (0.25, 0.75)
        let v = logsoftmax(&[0.0, 3f64.ln()]).unwrap();
        assert!(close(v[0], 0.25f64.ln(), 1e-15));
        assert!(close(v[1], 0.75f64.ln(), 1e-15));
        assert!(close(v[0], -1.386_294, 1e-6) && close(v[1], -0.287_682, 1e-6));
        assert!(logsoftmax(&[]).is_err());
    }

    #[test]
    fn log_matmul_examples() {
        let m = LogMatrix::from_nonnegative(&[vec![0.3, 2.0], vec![5.0, 0.1]]).unwrap();
        let id = LogMatrix::log_identity(2);
        let p = log_matmul(&id, &m).unwrap();
        for (x, y) in p.entries().iter().zip(m.entries()) {
            assert!(close(*x, *y, 1e-15));
        }

        let a = LogMatrix::from_nonnegative(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let b = LogMatrix::from_nonnegative(&[vec![1.0], vec![1.0]]).unwrap();
        let p = log_matmul(&a, &b).unwrap();
        assert_eq!((p.rows(), p.cols()), (2, 1));
        assert!(close(p.get(0, 0), LN2, 1e-15) && close(p.get(1, 0), LN2, 1e-15));

        let a = LogMatrix::from_nonnegative(&[vec![2.0, 3.0]]).unwrap();
        let b = LogMatrix::from_nonnegative(&[vec![5.0], vec![7.0]]).unwrap();
        let p = log_matmul(&a, &b).unwrap();
        // 2*5 + 3*7 = 31
        assert!(close(p.get(0, 0), 31f64.ln(), 1e-14));
        assert!(close(p.get(0, 0), 3.433_987, 1e-6));

        assert!(log_matmul(&b, &b).is_err());
    }

    #[test]
    fn log_matrix_rejects_nan() {
        assert!(LogMatrix::new(1, 1, vec![f64::NAN]).is_err());
        assert!(LogMatrix::new(1, 2, vec![0.0]).is_err());
        assert!(LogMatrix::from_nonnegative(&[vec![-1.0]]).is_err());
        assert!(LogMatrix::new(1, 1, vec![f64::NEG_INFINITY]).is_ok());
    }

    #[test]
    fn log_matmul_stable_at_large_magnitude() {
        let a = LogMatrix::new(1, 2, vec![1000.0, 999.0]).unwrap();
        let b = LogMatrix::new(2, 1, vec![-1000.0, -999.0]).unwrap();
        let p = log_matmul(&a, &b).unwrap();
        assert!(close(p.get(0, 0), 2f64.ln(), 1e-12));
    }

    fn direct_product(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let k = b[0].len();
        (0..n)
            .map(|i| {
                (0..k)
                    .map(|c| (0..b.len()).map(|j| a[i][j] * b[j][c]).sum())
                    .collect()
            })
            .collect()
    }

    proptest! {
        #[test]
        fn logsumexp_shift_invariance(v in prop::collection::vec(-100.0f64..100.0, 1..12), c in -500.0f64..500.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let lhs = logsumexp(&shifted).unwrap();
            let rhs = logsumexp(&v).unwrap() + c;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }

        #[test]
        fn logsoftmax_normalizes(v in prop::collection::vec(-100.0f64..100.0, 1..20)) {
            let s: f64 = logsoftmax(&v).unwrap().iter().map(|x| x.exp()).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn softplus_antisymmetry(x in -30.0f64..30.0) {
            // the DELTA offsets cancel in the difference
            prop_assert!((softplus(x) - softplus(-x) - x).abs() <= 1e-9);
        }

        #[test]
        fn log_matmul_associative(
            a in prop::collection::vec(-5.0f64..5.0, 9),
            b in prop::collection::vec(-5.0f64..5.0, 9),
            c in prop::collection::vec(-5.0f64..5.0, 9),
        ) {
            let a = LogMatrix::new(3, 3, a).unwrap();
            let b = LogMatrix::new(3, 3, b).unwrap();
            let c = LogMatrix::new(3, 3, c).unwrap();
            let left = log_matmul(&log_matmul(&a, &b).unwrap(), &c).unwrap();
            let right = log_matmul(&a, &log_matmul(&b, &c).unwrap()).unwrap();
            for (l, r) in left.entries().iter().zip(right.entries()) {
                prop_assert!((l - r).abs() <= 1e-9);
            }
        }

        #[test]
        fn log_matmul_matches_direct_product(
            a in prop::collection::vec(0.001f64..10.0, 6),
            b in prop::collection::vec(0.001f64..10.0, 8),
        ) {
            let am: Vec<Vec<f64>> = a.chunks(2).map(<[f64]>::to_vec).collect();
            let bm: Vec<Vec<f64>> = b.chunks(4).map(<[f64]>::to_vec).collect();
            let direct = direct_product(&am, &bm);
            let p = log_matmul(
                &LogMatrix::from_nonnegative(&am).unwrap(),
                &LogMatrix::from_nonnegative(&bm).unwrap(),
            ).unwrap();
            for i in 0..3 {
                for k in 0..4 {
                    let rel = (p.get(i, k).exp() - direct[i][k]).abs() / direct[i][k];
                    prop_assert!(rel <= 1e-9);
                }
            }
        }
    }
}
