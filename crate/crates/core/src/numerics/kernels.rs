use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower clamp applied to arguments of `log`.
pub const LOG_FLOOR: f64 = 1e-12;

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Row-wise log-softmax, computed as `x - max - log Σ exp(x - max)`.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v = *v - max - lse;
        }
    }
    out
}

/// `KL(p ‖ q) = Σ p_c log(p_c / q_c)` with `0 · log(0/q) = 0` and `q`
/// clamped below at [`LOG_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(
            "kl_divergence",
            format!("lengths {} and {}", p.len(), q.len()),
        ));
    }
    for (name, v) in [("p", p), ("q", q)] {
        if v.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::Invalid(format!("{name} has a negative or non-finite entry")));
        }
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("{name} sums to {s}, not 1")));
        }
    }
    let kl = p
        .iter()
        .zip(q)
        .filter(|(&pc, _)| pc > 0.0)
        .map(|(&pc, &qc)| pc * (pc / qc.max(LOG_FLOOR)).ln())
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// `D[i][j] = ‖a_i − b_j‖₂`.
pub fn pairwise_euclidean(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "pairwise_euclidean",
            format!("{} vs {} columns", a.cols(), b.cols()),
        ));
    }
    let (n, m) = (a.rows(), b.rows());
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let ai = a.row(i);
        for j in 0..m {
            let d2: f64 = ai
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            out.set(i, j, d2.sqrt());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
        assert!(kl_divergence(&[1.5, -0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn euclidean_examples() {
        let a = Tensor::matrix(2, 1, vec![0.0, 3.0]).unwrap();
        let d = pairwise_euclidean(&a, &a).unwrap();
        assert_eq!(d.data(), &[0.0, 3.0, 3.0, 0.0]);
        let same = Tensor::matrix(2, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        assert!(pairwise_euclidean(&same, &same).unwrap().data().iter().all(|&v| v == 0.0));
        let b = Tensor::zeros(&[2, 3]);
        assert!(pairwise_euclidean(&a, &b).is_err());
    }

    #[test]
    fn euclidean_matches_naive_loop() {
        use rand::Rng;
        let mut rng = crate::numerics::SeedStream::new(5).rng("euclid");
        let a: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ta = Tensor::matrix(5, 3, a.clone()).unwrap();
        let tb = Tensor::matrix(5, 3, b.clone()).unwrap();
        let d = pairwise_euclidean(&ta, &tb).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..3 {
                    let diff = a[i * 3 + k] - b[j * 3 + k];
                    acc += diff * diff;
                }
                assert_eq!(d.get(i, j), acc.sqrt());
            }
        }
    }

    #[test]
    fn perfect_prediction_has_tiny_cross_entropy() {
        let logits = Tensor::matrix(1, 3, vec![40.0, 0.0, 0.0]).unwrap();
        let ls = log_softmax_rows(&logits);
        assert!(-ls.get(0, 0) < 1e-6);
    }

    fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, len).prop_filter_map("nonzero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative((p, q) in (2usize..6).prop_flat_map(|n| (distribution(n), distribution(n)))) {
            prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        }

        #[test]
        fn softmax_rows_are_stochastic(v in prop::collection::vec(-50.0f64..50.0, 12)) {
            let t = Tensor::matrix(3, 4, v).unwrap();
            let s = softmax_rows(&t);
            for r in 0..3 {
                prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
