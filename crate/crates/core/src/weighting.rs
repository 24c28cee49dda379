//! Per-person importance-score weights and the per-image effectiveness weight.

use std::io::Write;

use crate::{Error, Result, Scalar};

/// Weights applied to one unlabelled image's sampled persons.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabelledWeights<T> {
    /// Per-person weights, positive and summing to one.
    pub w: Vec<T>,
    /// Image gate in `[0, 1]`.
    pub epsilon: T,
}

impl<T: Scalar> UnlabelledWeights<T> {
    /// Uniform `1/K` weights with the gate fully open.
    pub fn uniform(k: usize) -> Self {
        Self {
            w: vec![T::one() / T::lit(k as f64); k],
            epsilon: T::one(),
        }
    }

    /// Weights for the sampled scores with either component optionally disabled
    /// (disabled ISW means `1/K`, disabled EW means `epsilon = 1`).
    pub fn from_scores(sampled: &[T], use_isw: bool, use_ew: bool) -> Result<Self> {
        let w = if use_isw {
            importance_score_weights(sampled)?
        } else {
            Self::uniform(sampled.len()).w
        };
        let epsilon = if use_ew {
            effectiveness_weight(sampled)?
        } else {
            T::one()
        };
        Ok(Self { w, epsilon })
    }
}

/// Softmax over the sampled persons' importance scores.
pub fn importance_score_weights<T: Scalar>(sampled: &[T]) -> Result<Vec<T>> {
    if sampled.is_empty() {
        return Err(Error::invalid("importance score weights need at least one score"));
    }
    if sampled.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("importance score".into()));
    }
    let m = sampled.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = sampled.iter().map(|&v| (v - m).exp()).collect();
    let s: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / s).collect())
}

/// `1 - H(p) / ln K` with `p` the scores normalised to sum to one and
/// `0 ln 0 = 0`; clamped to `[0, 1]`.
pub fn effectiveness_weight<T: Scalar>(sampled: &[T]) -> Result<T> {
    let k = sampled.len();
    if k < 2 {
        return Err(Error::invalid(format!(
            "effectiveness weight needs at least two scores, got {k}"
        )));
    }
    if sampled.iter().any(|v| !v.is_finite() || *v < T::zero()) {
        return Err(Error::invalid("importance scores must be finite and non-negative"));
    }
    let total: T = sampled.iter().copied().sum();
    if total <= T::zero() {
        return Err(Error::Degenerate("all importance scores are zero".into()));
    }
    let entropy = sampled
        .iter()
        .map(|&v| v / total)
        .filter(|&p| p > T::zero())
        .fold(T::zero(), |acc, p| acc - p * p.ln());
    let max_entropy = T::lit(k as f64).ln();
    let eps = T::one() - entropy / max_entropy;
    Ok(eps.max(T::zero()).min(T::one()))
}

/// EW audit rows: `image_id,epsilon,is_noise` (empty flag when unknown).
pub fn write_ew_csv<T: Scalar, W: Write>(mut w: W, rows: &[(String, T, Option<bool>)]) -> Result<()> {
    writeln!(w, "image_id,epsilon,is_noise")?;
    for (id, eps, noise) in rows {
        let flag = noise.map_or(String::new(), |b| u8::from(b).to_string());
        writeln!(w, "{id},{eps},{flag}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_scores_give_uniform_weights() {
        for k in 1..9 {
            let w = importance_score_weights(&vec![0.37f64; k]).unwrap();
            for v in w {
                assert!((v - 1.0 / k as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_score_softmax() {
        let w = importance_score_weights(&[1.0f64, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((w[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn isw_rejects_bad_input() {
        assert!(importance_score_weights::<f64>(&[]).is_err());
        assert!(importance_score_weights(&[f64::NAN, 0.1]).is_err());
    }

    #[test]
    fn uniform_scores_have_zero_effectiveness() {
        assert_eq!(effectiveness_weight(&[0.2f64; 4]).unwrap(), 0.0);
    }

    #[test]
    fn one_hot_scores_have_full_effectiveness() {
        assert_eq!(effectiveness_weight(&[1.0f64, 0.0, 0.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn two_score_effectiveness() {
        let h = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((h - 0.5623).abs() < 1e-4);
        let expected = 1.0 - h / 2f64.ln();
        let eps = effectiveness_weight(&[0.75f64, 0.25]).unwrap();
        assert!((eps - expected).abs() < 1e-12);
        assert!((eps - 0.1887).abs() < 1e-4);
    }

    #[test]
    fn ew_errors() {
        assert!(effectiveness_weight(&[0.5f64]).is_err());
        assert!(matches!(effectiveness_weight(&[0.0f64, 0.0]), Err(Error::Degenerate(_))));
        assert!(effectiveness_weight(&[-0.1f64, 0.5]).is_err());
    }

    #[test]
    fn disabled_components_fall_back() {
        let u = UnlabelledWeights::<f64>::from_scores(&[0.9, 0.1, 0.1], false, false).unwrap();
        assert_eq!(u, UnlabelledWeights::uniform(3));
    }

    #[test]
    fn ew_csv_layout() {
        let mut buf = Vec::new();
        write_ew_csv(&mut buf, &[("a".into(), 0.5f64, Some(true)), ("b".into(), 0.25, None)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "image_id,epsilon,is_noise\na,0.5,1\nb,0.25,\n");
    }

    proptest! {
        #[test]
        fn isw_is_a_distribution_preserving_argmax(z in prop::collection::vec(0.0f64..1.0, 1..12)) {
            let w = importance_score_weights(&z).unwrap();
            let s: f64 = w.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|&v| v > 0.0));
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            prop_assert_eq!(argmax(&w), argmax(&z));
        }

        #[test]
        fn ew_is_bounded_and_scale_invariant(
            z in prop::collection::vec(0.0f64..1.0, 2..12),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(z.iter().sum::<f64>() > 1e-6);
            let e = effectiveness_weight(&z).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            let scaled: Vec<f64> = z.iter().map(|v| v * c).collect();
            prop_assert!((effectiveness_weight(&scaled).unwrap() - e).abs() < 1e-12);
        }
    }
}
