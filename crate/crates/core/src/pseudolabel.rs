//! Ranking-based sampling: hard pseudo-labels from per-image ranking scores.
//!
//! Scores are divided by the per-image maximum, so the best-scoring person
//! always has ranking score exactly one and every image receives at least one
//! "important" pseudo-label, however low the raw scores are.

use std::io::Write;

use rand::seq::index;
use rand::Rng;

use crate::dataset::EventImage;
use crate::model::RelationModel;
use crate::{Error, Result, Scalar};

/// Ranking, thresholding and sampling result for one score vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedSample<T> {
    /// Scores divided by their maximum.
    pub ranking_scores: Vec<T>,
    /// Persons whose ranking score reaches the threshold, ascending.
    pub important_set: Vec<usize>,
    /// Highest-ranked person (lowest index among ties).
    pub top: usize,
    /// `K` person indices; the first is `top`.
    pub sample_indices: Vec<usize>,
    /// Hard pseudo-label per sampled slot; only the first is `true`.
    pub pseudo_labels: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelAssignment<T> {
    pub image_id: String,
    /// Important-class probability of every person, from the full group.
    pub scores: Vec<T>,
    pub ranked: RankedSample<T>,
}

impl<T: Scalar> PseudoLabelAssignment<T> {
    pub fn important_count(&self) -> usize {
        self.ranked.important_set.len()
    }

    /// Scores of the sampled persons, in sample order.
    pub fn sampled_scores(&self) -> Vec<T> {
        self.ranked.sample_indices.iter().map(|&i| self.scores[i]).collect()
    }
}

/// Important-class probability of every person, scored over the whole group.
pub fn importance_scores<T: Scalar>(model: &RelationModel<T>, img: &EventImage<T>) -> Result<Vec<T>> {
    if img.is_empty() {
        return Err(Error::EmptyImage(img.id.clone()));
    }
    Ok(model.forward(&img.features())?.into_iter().map(|r| r[1]).collect())
}

/// Ranks `scores`, marks persons with ranking score `>= alpha` as important,
/// and samples the top-1 plus `k - 1` others.
///
/// The other `k - 1` slots are drawn uniformly without replacement from the
/// non-important persons. When there are too few, the remaining members of the
/// important set (other than the top-1) are drawn next, and only then are
/// slots filled with replacement, from the non-important persons if any exist,
/// otherwise from every non-top person, otherwise by repeating the top-1.
pub fn rank_and_label<T: Scalar, R: Rng + ?Sized>(
    scores: &[T],
    alpha: T,
    k: usize,
    rng: &mut R,
) -> Result<RankedSample<T>> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot rank an empty person list"));
    }
    if !(alpha > T::zero() && alpha <= T::one()) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if k < 2 {
        return Err(Error::invalid(format!("sample size K must be at least 2, got {k}")));
    }
    if scores.iter().any(|v| !v.is_finite() || *v < T::zero()) {
        return Err(Error::invalid("scores must be finite and non-negative"));
    }
    let mut top = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[top] {
            top = i;
        }
    }
    let max = scores[top];
    if max <= T::zero() {
        return Err(Error::Degenerate("all scores are zero".into()));
    }
    let ranking_scores: Vec<T> = scores.iter().map(|&v| v / max).collect();
    let important_set: Vec<usize> = (0..scores.len()).filter(|&i| ranking_scores[i] >= alpha).collect();
    let non_important: Vec<usize> = (0..scores.len()).filter(|&i| ranking_scores[i] < alpha).collect();
    let other_important: Vec<usize> = important_set.iter().copied().filter(|&i| i != top).collect();

    let mut sample = Vec::with_capacity(k);
    sample.push(top);
    for pool in [&non_important, &other_important] {
        let need = k - sample.len();
        let take = need.min(pool.len());
        sample.extend(index::sample(rng, pool.len(), take).into_iter().map(|i| pool[i]));
    }
    if sample.len() < k {
        let fallback: Vec<usize> = if !non_important.is_empty() {
            non_important
        } else if !other_important.is_empty() {
            other_important
        } else {
            vec![top]
        };
        while sample.len() < k {
            sample.push(fallback[rng.random_range(0..fallback.len())]);
        }
    }
    let mut pseudo_labels = vec![false; k];
    pseudo_labels[0] = true;

    Ok(RankedSample {
        ranking_scores,
        important_set,
        top,
        sample_indices: sample,
        pseudo_labels,
    })
}

/// Scores an unlabelled image with `model` and runs [`rank_and_label`].
pub fn assign<T: Scalar, R: Rng + ?Sized>(
    model: &RelationModel<T>,
    img: &EventImage<T>,
    alpha: T,
    k: usize,
    rng: &mut R,
) -> Result<PseudoLabelAssignment<T>> {
    let scores = importance_scores(model, img)?;
    assign_from_scores(&img.id, scores, alpha, k, rng)
}

pub fn assign_from_scores<T: Scalar, R: Rng + ?Sized>(
    image_id: &str,
    scores: Vec<T>,
    alpha: T,
    k: usize,
    rng: &mut R,
) -> Result<PseudoLabelAssignment<T>> {
    let ranked = rank_and_label(&scores, alpha, k, rng)?;
    Ok(PseudoLabelAssignment {
        image_id: image_id.to_string(),
        scores,
        ranked,
    })
}

/// Per-person audit rows:
/// `image_id,person_index,score,ranking_score,sampled,pseudo_label`.
///
/// `pseudo_label` is empty for persons that were not sampled. A person
/// sampled more than once reports the label of its first slot.
pub fn write_audit_csv<T: Scalar, W: Write>(mut w: W, assignments: &[PseudoLabelAssignment<T>]) -> Result<()> {
    writeln!(w, "image_id,person_index,score,ranking_score,sampled,pseudo_label")?;
    for a in assignments {
        for (j, (&s, &r)) in a.scores.iter().zip(&a.ranked.ranking_scores).enumerate() {
            let slot = a.ranked.sample_indices.iter().position(|&i| i == j);
            let label = slot.map_or(String::new(), |p| u8::from(a.ranked.pseudo_labels[p]).to_string());
            writeln!(
                w,
                "{},{j},{s},{r},{},{label}",
                a.image_id,
                u8::from(slot.is_some())
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PersonInstance;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn ranking_and_threshold() {
        let r = rank_and_label(&[0.6f64, 0.3, 0.59], 0.99, 2, &mut rng(0)).unwrap();
        assert_eq!(r.ranking_scores[0], 1.0);
        assert!((r.ranking_scores[1] - 0.5).abs() < 1e-15);
        assert!((r.ranking_scores[2] - 0.59 / 0.6).abs() < 1e-15);
        assert!((r.ranking_scores[2] - 0.9833).abs() < 1e-4);
        assert_eq!(r.important_set, vec![0]);
        assert_eq!(r.top, 0);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let r = rank_and_label(&[0.5f64, 0.5], 0.99, 2, &mut rng(0)).unwrap();
        assert_eq!(r.ranking_scores, vec![1.0, 1.0]);
        assert_eq!(r.important_set, vec![0, 1]);
        assert_eq!(r.top, 0);
        // The other tied person fills the remaining slot with label 0.
        assert_eq!(r.sample_indices, vec![0, 1]);
        assert_eq!(r.pseudo_labels, vec![true, false]);
    }

    #[test]
    fn single_person_is_important() {
        let r = rank_and_label(&[0.01f64], 0.99, 4, &mut rng(1)).unwrap();
        assert_eq!(r.important_set, vec![0]);
        assert_eq!(r.sample_indices, vec![0; 4]);
        assert_eq!(r.pseudo_labels.iter().filter(|&&b| b).count(), 1);
    }

    #[test]
    fn samples_are_distinct_when_group_is_large_enough() {
        let z = [0.9f64, 0.1, 0.2, 0.89, 0.3, 0.05, 0.4, 0.6, 0.15, 0.7];
        let r = rank_and_label(&z, 0.98, 8, &mut rng(5)).unwrap();
        assert_eq!(r.important_set, vec![0, 3]);
        let mut s = r.sample_indices.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 8);
        assert_eq!(r.sample_indices[0], 0);
        assert!(!r.sample_indices.contains(&3));
    }

    #[test]
    fn small_group_fills_with_replacement_from_non_important() {
        let r = rank_and_label(&[0.2f64, 0.9, 0.1], 0.99, 8, &mut rng(2)).unwrap();
        assert_eq!(r.sample_indices.len(), 8);
        assert_eq!(r.sample_indices[0], 1);
        assert!(r.sample_indices[1..].iter().all(|&i| i == 0 || i == 2));
        assert!(r.sample_indices.contains(&0) && r.sample_indices.contains(&2));
    }

    #[test]
    fn errors() {
        assert!(rank_and_label::<f64, _>(&[], 0.99, 2, &mut rng(0)).is_err());
        assert!(matches!(
            rank_and_label(&[0.0f64, 0.0], 0.99, 2, &mut rng(0)),
            Err(Error::Degenerate(_))
        ));
        assert!(rank_and_label(&[0.1f64], 0.0, 2, &mut rng(0)).is_err());
        assert!(rank_and_label(&[0.1f64], 1.5, 2, &mut rng(0)).is_err());
        assert!(rank_and_label(&[0.1f64], 0.5, 1, &mut rng(0)).is_err());
        assert!(rank_and_label(&[f64::NAN], 0.5, 2, &mut rng(0)).is_err());
    }

    #[test]
    fn model_scores_are_reproducible_and_symmetric() {
        let m = RelationModel::<f64>::init(2, 3, 4).unwrap();
        let img = EventImage {
            id: "x".into(),
            labelled: false,
            persons: vec![
                PersonInstance::unlabelled(vec![0.5, 0.1]),
                PersonInstance::unlabelled(vec![0.5, 0.1]),
                PersonInstance::unlabelled(vec![-1.0, 0.3]),
            ],
        };
        let a = importance_scores(&m, &img).unwrap();
        assert_eq!(a, importance_scores(&m, &img).unwrap());
        assert_eq!(a[0], a[1]);
        let single = EventImage {
            id: "y".into(),
            labelled: false,
            persons: vec![PersonInstance::unlabelled(vec![0.2, 0.2])],
        };
        let s = importance_scores(&m, &single).unwrap();
        assert!(s[0] > 0.0 && s[0] < 1.0);
    }

    #[test]
    fn audit_csv_layout() {
        let a = assign_from_scores("img", vec![0.2f64, 0.8, 0.4], 0.99, 2, &mut rng(9)).unwrap();
        let mut buf = Vec::new();
        write_audit_csv(&mut buf, std::slice::from_ref(&a)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "image_id,person_index,score,ranking_score,sampled,pseudo_label");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[2], "img,1,0.8,1,1,1");
        let other = a.ranked.sample_indices[1];
        assert!(lines[1 + other].ends_with(",1,0"));
    }

    proptest! {
        #[test]
        fn invariants(
            z in prop::collection::vec(0.0f64..1.0, 1..14),
            alpha in 0.05f64..=1.0,
            k in 2usize..10,
            seed in 0u64..1000,
        ) {
            prop_assume!(z.iter().any(|&v| v > 0.0));
            let r = rank_and_label(&z, alpha, k, &mut rng(seed)).unwrap();
            prop_assert!(!r.important_set.is_empty());
            prop_assert!(r.ranking_scores.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(r.ranking_scores.contains(&1.0));
            prop_assert_eq!(r.sample_indices.len(), k);
            prop_assert_eq!(r.pseudo_labels.iter().filter(|&&b| b).count(), 1);
            prop_assert!(r.pseudo_labels[0]);
            if z.len() >= k {
                let mut s = r.sample_indices.clone();
                s.sort_unstable();
                s.dedup();
                prop_assert_eq!(s.len(), k);
            }
            prop_assert_eq!(&r, &rank_and_label(&z, alpha, k, &mut rng(seed)).unwrap());
        }

        #[test]
        fn important_set_shrinks_with_alpha(
            z in prop::collection::vec(0.01f64..1.0, 1..14),
            a in 0.05f64..=1.0,
            b in 0.05f64..=1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let r_lo = rank_and_label(&z, lo, 2, &mut rng(0)).unwrap();
            let r_hi = rank_and_label(&z, hi, 2, &mut rng(0)).unwrap();
            prop_assert!(r_hi.important_set.len() <= r_lo.important_set.len());
        }
    }
}
