use crate::{Error, Result};

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// `KL(p || q) = sum p ln(p / q)` with `0 ln(0/q) = 0`.
///
/// Returns `f64::INFINITY` when `p` puts mass where `q` has none.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension {
            context: "categorical KL",
            expected: p.len(),
            actual: q.len(),
        });
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi <= 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}

/// Closed-form KL between diagonal Gaussians given means and log standard deviations.
pub fn kl_diag_gaussian(mean_p: &[f64], log_std_p: &[f64], mean_q: &[f64], log_std_q: &[f64]) -> Result<f64> {
    let d = mean_p.len();
    for (context, len) in [("gaussian log-std", log_std_p.len()), ("gaussian mean", mean_q.len()), ("gaussian log-std", log_std_q.len())] {
        if len != d {
            return Err(Error::Dimension {
                context,
                expected: d,
                actual: len,
            });
        }
    }
    let all = mean_p.iter().chain(log_std_p).chain(mean_q).chain(log_std_q);
    if all.clone().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "gaussian parameter",
            detail: "KL inputs must be finite".into(),
        });
    }
    let mut kl = 0.0;
    for i in 0..d {
        let var_p = (2.0 * log_std_p[i]).exp();
        let var_q = (2.0 * log_std_q[i]).exp();
        let diff = mean_p[i] - mean_q[i];
        kl += log_std_q[i] - log_std_p[i] + (var_p + diff * diff) / (2.0 * var_q) - 0.5;
    }
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kl_of_identical_is_zero() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_categorical(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_worked_value() {
        // 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1) = 0.5 ln(25/9)
        let kl = kl_categorical(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((kl - 0.5 * (25.0_f64 / 9.0).ln()).abs() < 1e-12);
        assert!((kl - 0.510826).abs() < 1e-6);
    }

    #[test]
    fn support_violation_is_infinite_not_nan() {
        let kl = kl_categorical(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert_eq!(kl, f64::INFINITY);
        // Zero mass in p is ignored regardless of q.
        assert_eq!(kl_categorical(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_worked_values() {
        assert_eq!(kl_diag_gaussian(&[0.3, 1.0], &[0.1, -0.2], &[0.3, 1.0], &[0.1, -0.2]).unwrap(), 0.0);
        let kl = kl_diag_gaussian(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
        assert!(kl_diag_gaussian(&[0.0], &[0.0], &[0.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn softmax_normalizes_extreme_logits() {
        let p = softmax(&[1000.0, 0.0, -1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lp = log_softmax(&[1.0, 2.0, 3.0]);
        let p = softmax(&[1.0, 2.0, 3.0]);
        for (a, b) in lp.iter().zip(&p) {
            assert!((a.exp() - b).abs() < 1e-15);
        }
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn gibbs_inequality(p in simplex(4), q in simplex(4)) {
            let kl = kl_categorical(&p, &q).unwrap();
            prop_assert!(kl >= 0.0);
            let same = p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-12);
            if !same {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn gaussian_kl_shift_invariant(
            mp in prop::collection::vec(-2.0f64..2.0, 3),
            mq in prop::collection::vec(-2.0f64..2.0, 3),
            sp in prop::collection::vec(-1.0f64..1.0, 3),
            sq in prop::collection::vec(-1.0f64..1.0, 3),
            shift in -5.0f64..5.0,
        ) {
            let a = kl_diag_gaussian(&mp, &sp, &mq, &sq).unwrap();
            let mp2: Vec<f64> = mp.iter().map(|x| x + shift).collect();
            let mq2: Vec<f64> = mq.iter().map(|x| x + shift).collect();
            let b = kl_diag_gaussian(&mp2, &sp, &mq2, &sq).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
