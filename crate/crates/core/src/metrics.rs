//! Per-image ranking metrics and pseudo-label statistics.
//!
//! Persons are ranked by descending score with ties broken by ascending
//! index. mAP is the mean of per-image average precision.

use std::io::Write;

use serde_json::json;

use crate::dataset::{Dataset, EventImage};
use crate::model::RelationModel;
use crate::pseudolabel::importance_scores;
use crate::{Error, Result, Scalar};

/// Person indices from best to worst.
pub fn ranking_order<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Mean over positives of precision at the positive's rank.
pub fn average_precision<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<T> {
    if scores.len() != labels.len() {
        return Err(Error::dims(scores.len(), labels.len(), "labels"));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::invalid("average precision needs at least one positive"));
    }
    let mut hits = 0usize;
    let mut sum = T::zero();
    for (rank0, &i) in ranking_order(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += T::lit(hits as f64) / T::lit((rank0 + 1) as f64);
        }
    }
    Ok(sum / T::lit(positives as f64))
}

/// Mean of per-image AP over `(scores, labels)` pairs.
pub fn mean_ap_from_scores<T: Scalar>(items: &[(Vec<T>, Vec<bool>)]) -> Result<T> {
    if items.is_empty() {
        return Err(Error::invalid("mAP over an empty set"));
    }
    let mut sum = T::zero();
    for (s, l) in items {
        sum += average_precision(s, l)?;
    }
    Ok(sum / T::lit(items.len() as f64))
}

/// Fraction of images with a positive within the top `r`, for `r = 1..=max_rank`.
pub fn cmc_from_scores<T: Scalar>(items: &[(Vec<T>, Vec<bool>)], max_rank: usize) -> Result<Vec<T>> {
    if max_rank < 1 {
        return Err(Error::invalid("CMC needs at least rank 1"));
    }
    if items.is_empty() {
        return Err(Error::invalid("CMC over an empty set"));
    }
    let mut hits_at = vec![0usize; max_rank];
    for (s, l) in items {
        if s.len() != l.len() {
            return Err(Error::dims(s.len(), l.len(), "labels"));
        }
        if let Some(first) = ranking_order(s).iter().position(|&i| l[i]) {
            if first < max_rank {
                hits_at[first] += 1;
            }
        }
    }
    let total = T::lit(items.len() as f64);
    let mut acc = 0usize;
    Ok(hits_at
        .into_iter()
        .map(|h| {
            acc += h;
            T::lit(acc as f64) / total
        })
        .collect())
}

fn scored_images<T: Scalar>(model: &RelationModel<T>, test: &Dataset<T>) -> Result<Vec<(Vec<T>, Vec<bool>)>> {
    test.images().iter().map(|img| scored_image(model, img)).collect()
}

fn scored_image<T: Scalar>(model: &RelationModel<T>, img: &EventImage<T>) -> Result<(Vec<T>, Vec<bool>)> {
    let labels = img
        .labels()
        .ok_or_else(|| Error::invalid(format!("test image {:?} is unlabelled", img.id)))?;
    Ok((importance_scores(model, img)?, labels))
}

/// mAP of full-group importance scores over a labelled test set.
pub fn mean_ap<T: Scalar>(model: &RelationModel<T>, test: &Dataset<T>) -> Result<T> {
    mean_ap_from_scores(&scored_images(model, test)?)
}

pub fn cmc<T: Scalar>(model: &RelationModel<T>, test: &Dataset<T>, max_rank: usize) -> Result<Vec<T>> {
    if max_rank < 1 {
        return Err(Error::invalid("CMC needs at least rank 1"));
    }
    cmc_from_scores(&scored_images(model, test)?, max_rank)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport<T> {
    pub map: T,
    pub cmc: Vec<T>,
    pub per_image_ap: Vec<(String, T)>,
}

pub fn evaluate<T: Scalar>(model: &RelationModel<T>, test: &Dataset<T>, max_rank: usize) -> Result<EvaluationReport<T>> {
    let scored = scored_images(model, test)?;
    let per_image_ap = test
        .images()
        .iter()
        .zip(&scored)
        .map(|(img, (s, l))| Ok((img.id.clone(), average_precision(s, l)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluationReport {
        map: mean_ap_from_scores(&scored)?,
        cmc: cmc_from_scores(&scored, max_rank)?,
        per_image_ap,
    })
}

impl<T: Scalar> EvaluationReport<T> {
    pub fn write_per_image_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "image_id,ap")?;
        for (id, ap) in &self.per_image_ap {
            writeln!(w, "{id},{ap}")?;
        }
        Ok(())
    }

    pub fn write_cmc_csv<W: Write>(&self, w: W) -> Result<()> {
        write_cmc_csv(w, &self.cmc)
    }

    pub fn summary_json(&self) -> serde_json::Value {
        json!({
            "mAP": self.map.as_f64(),
            "cmc": self.cmc.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
            "images": self.per_image_ap.len(),
        })
    }
}

pub fn write_cmc_csv<T: Scalar, W: Write>(mut w: W, cmc: &[T]) -> Result<()> {
    writeln!(w, "rank,cmc")?;
    for (r, v) in cmc.iter().enumerate() {
        writeln!(w, "{},{v}", r + 1)?;
    }
    Ok(())
}

/// Images bucketed by how many persons carry an "important" pseudo-label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PseudoLabelHistogram {
    /// Counts for 0, 1, 2 and 3+ important persons.
    pub counts: [usize; 4],
}

impl PseudoLabelHistogram {
    pub const KEYS: [&'static str; 4] = ["0", "1", "2", "3+"];

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Share of images with no important pseudo-label.
    pub fn none_rate(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.counts[0] as f64 / self.total() as f64
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        for (k, c) in Self::KEYS.iter().zip(self.counts) {
            m.insert((*k).to_string(), json!(c));
        }
        serde_json::Value::Object(m)
    }
}

/// Histogram of per-image important counts.
pub fn pseudo_label_histogram<I: IntoIterator<Item = usize>>(important_counts: I) -> PseudoLabelHistogram {
    let mut h = PseudoLabelHistogram::default();
    for c in important_counts {
        h.counts[c.min(3)] += 1;
    }
    h
}

/// Histogram over per-image hard label sets.
pub fn label_set_histogram<'a, I: IntoIterator<Item = &'a [bool]>>(label_sets: I) -> PseudoLabelHistogram {
    pseudo_label_histogram(label_sets.into_iter().map(|l| l.iter().filter(|&&b| b).count()))
}

/// Rows `method,bucket,count` for each named histogram.
pub fn write_histogram_csv<W: Write>(mut w: W, named: &[(&str, PseudoLabelHistogram)]) -> Result<()> {
    writeln!(w, "method,important_per_image,images")?;
    for (name, h) in named {
        for (k, c) in PseudoLabelHistogram::KEYS.iter().zip(h.counts) {
            writeln!(w, "{name},{k},{c}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ap_examples() {
        let s = [0.9f64, 0.8, 0.1];
        assert_eq!(average_precision(&s, &[true, false, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&s, &[false, true, false]).unwrap(), 0.5);
        let v = average_precision(&s, &[true, false, true]).unwrap();
        assert!((v - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!(average_precision(&s, &[false; 3]).is_err());
    }

    #[test]
    fn ties_rank_lower_index_first() {
        assert_eq!(ranking_order(&[0.5f64, 0.7, 0.5]), vec![1, 0, 2]);
        assert_eq!(average_precision(&[0.5f64, 0.5], &[false, true]).unwrap(), 0.5);
    }

    #[test]
    fn map_is_mean_of_image_ap() {
        let items = vec![
            (vec![0.9f64, 0.1], vec![true, false]),
            (vec![0.9f64, 0.8, 0.1], vec![false, true, false]),
        ];
        assert_eq!(mean_ap_from_scores(&items).unwrap(), 0.75);
    }

    #[test]
    fn cmc_definition() {
        let items = vec![
            (vec![0.9f64, 0.1, 0.2], vec![true, false, false]),
            (vec![0.9f64, 0.8, 0.1], vec![false, true, false]),
        ];
        let c = cmc_from_scores(&items, 3).unwrap();
        assert_eq!(c, vec![0.5, 1.0, 1.0]);
        assert!(cmc_from_scores(&items, 0).is_err());
    }

    #[test]
    fn histogram_buckets() {
        let h = label_set_histogram([&[false, false][..], &[false, false], &[true, false]]);
        assert_eq!(h.counts, [2, 1, 0, 0]);
        let h = pseudo_label_histogram([1, 1, 5, 2, 3]);
        assert_eq!(h.counts, [0, 2, 1, 2]);
        let j = PseudoLabelHistogram::default().to_json();
        for k in PseudoLabelHistogram::KEYS {
            assert_eq!(j[k], 0);
        }
    }

    #[test]
    fn histogram_csv_layout() {
        let mut buf = Vec::new();
        write_histogram_csv(&mut buf, &[("RankS", pseudo_label_histogram([1, 2]))]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.contains("RankS,0,0\nRankS,1,1\nRankS,2,1\nRankS,3+,0"));
    }

    proptest! {
        #[test]
        fn ap_depends_only_on_order(
            rows in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..12),
        ) {
            prop_assume!(rows.iter().any(|r| r.1));
            let s: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let l: Vec<bool> = rows.iter().map(|r| r.1).collect();
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() + 1.0).collect();
            prop_assert_eq!(average_precision(&s, &l).unwrap(), average_precision(&t, &l).unwrap());
        }

        #[test]
        fn cmc_monotone_and_terminal(
            imgs in prop::collection::vec(prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..9), 1..20),
        ) {
            let items: Vec<(Vec<f64>, Vec<bool>)> = imgs
                .into_iter()
                .map(|mut rows| {
                    rows[0].1 = true;
                    (rows.iter().map(|r| r.0).collect(), rows.iter().map(|r| r.1).collect())
                })
                .collect();
            let c = cmc_from_scores(&items, 9).unwrap();
            prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(c[8], 1.0);
        }
    }
}
