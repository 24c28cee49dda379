//! Pseudo-label audits of a trained model over an unlabelled pool.
//!
//! One pass produces the ranking-based assignment, its effectiveness weight,
//! and the hard labels the PL, MT and LP baselines would assign, so their
//! statistics can be compared image by image.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{pl_labels, LpParams, ScoreEstimator, ScoreSource};
use crate::dataset::{Dataset, EventImage};
use crate::metrics::{label_set_histogram, pseudo_label_histogram, PseudoLabelHistogram};
use crate::model::RelationModel;
use crate::pseudolabel::{assign_from_scores, importance_scores, PseudoLabelAssignment};
use crate::weighting::{effectiveness_weight, write_ew_csv};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditConfig {
    pub alpha: f64,
    pub k: usize,
    pub seed: u64,
    pub lp: LpParams,
    /// Unlabelled images per propagation graph (and labelled anchor images joined to it).
    pub lp_batch: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            alpha: 0.99,
            k: 8,
            seed: 0,
            lp: LpParams::default(),
            lp_batch: 8,
        }
    }
}

/// Hard labels of one baseline, per image, with the scores they threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDump<T> {
    pub scores: Vec<Vec<T>>,
    pub labels: Vec<Vec<bool>>,
}

impl<T: Scalar> LabelDump<T> {
    fn from_scores(scores: Vec<Vec<T>>) -> Self {
        let labels = scores.iter().map(|s| pl_labels(s)).collect();
        Self { scores, labels }
    }

    pub fn histogram(&self) -> PseudoLabelHistogram {
        label_set_histogram(self.labels.iter().map(Vec::as_slice))
    }

    pub fn write_csv<W: Write>(&self, mut w: W, ids: &[String]) -> Result<()> {
        writeln!(w, "image_id,person_index,score,pseudo_label")?;
        for ((id, s), l) in ids.iter().zip(&self.scores).zip(&self.labels) {
            for (j, (v, b)) in s.iter().zip(l).enumerate() {
                writeln!(w, "{id},{j},{v},{}", u8::from(*b))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport<T> {
    pub image_ids: Vec<String>,
    pub ranking: Vec<PseudoLabelAssignment<T>>,
    /// Effectiveness weight of each image's ranking sample.
    pub epsilon: Vec<T>,
    pub pl: LabelDump<T>,
    pub mt: LabelDump<T>,
    /// Absent when no labelled anchors were supplied.
    pub lp: Option<LabelDump<T>>,
}

/// Audits `model` on every unlabelled image.
///
/// MT labels threshold `teacher` scores, or the model's own scores when no
/// teacher is given. LP needs labelled `anchors`.
pub fn audit<T: Scalar>(
    model: &RelationModel<T>,
    teacher: Option<&RelationModel<T>>,
    unlabelled: &Dataset<T>,
    anchors: Option<&Dataset<T>>,
    cfg: &AuditConfig,
) -> Result<AuditReport<T>> {
    if unlabelled.is_empty() {
        return Err(Error::invalid("audit needs at least one unlabelled image"));
    }
    if cfg.lp_batch == 0 {
        return Err(Error::invalid("lp_batch must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let alpha = T::lit(cfg.alpha);
    let mut ranking = Vec::with_capacity(unlabelled.len());
    let mut epsilon = Vec::with_capacity(unlabelled.len());
    let mut student_scores = Vec::with_capacity(unlabelled.len());
    for img in unlabelled.images() {
        let z = importance_scores(model, img)?;
        let a = assign_from_scores(&img.id, z.clone(), alpha, cfg.k, &mut rng)?;
        epsilon.push(effectiveness_weight(&a.sampled_scores())?);
        ranking.push(a);
        student_scores.push(z);
    }
    let mt_scores = match teacher {
        Some(t) => unlabelled
            .images()
            .iter()
            .map(|img| importance_scores(t, img))
            .collect::<Result<Vec<_>>>()?,
        None => student_scores.clone(),
    };
    let lp = match anchors {
        Some(a) => Some(LabelDump::from_scores(lp_pool_scores(model, unlabelled, a, cfg)?)),
        None => None,
    };
    Ok(AuditReport {
        image_ids: unlabelled.images().iter().map(|i| i.id.clone()).collect(),
        ranking,
        epsilon,
        pl: LabelDump::from_scores(student_scores),
        mt: LabelDump::from_scores(mt_scores),
        lp,
    })
}

/// LP scores for the whole pool, one graph per chunk of `lp_batch` images
/// with a rotating chunk of labelled anchor images.
fn lp_pool_scores<T: Scalar>(
    model: &RelationModel<T>,
    unlabelled: &Dataset<T>,
    anchors: &Dataset<T>,
    cfg: &AuditConfig,
) -> Result<Vec<Vec<T>>> {
    let labelled: Vec<&EventImage<T>> = anchors.images().iter().filter(|i| i.labelled).collect();
    if labelled.is_empty() {
        return Err(Error::invalid("LP audit needs labelled anchor images"));
    }
    let mut out = Vec::with_capacity(unlabelled.len());
    for (c, chunk) in unlabelled.images().chunks(cfg.lp_batch).enumerate() {
        let anchor_chunk: Vec<&EventImage<T>> = (0..cfg.lp_batch.min(labelled.len()))
            .map(|i| labelled[(c * cfg.lp_batch + i) % labelled.len()])
            .collect();
        let est = ScoreEstimator {
            source: ScoreSource::LabelPropagation,
            student: model,
            teacher: None,
            anchors: &anchor_chunk,
            lp: cfg.lp,
        };
        let batch: Vec<&EventImage<T>> = chunk.iter().collect();
        out.extend(est.scores(&batch)?);
    }
    Ok(out)
}

impl<T: Scalar> AuditReport<T> {
    pub fn ranking_histogram(&self) -> PseudoLabelHistogram {
        pseudo_label_histogram(self.ranking.iter().map(PseudoLabelAssignment::important_count))
    }

    /// Named histograms in a fixed order: RankS, PL, MT, then LP when present.
    pub fn histograms(&self) -> Vec<(&'static str, PseudoLabelHistogram)> {
        let mut out = vec![
            ("RankS", self.ranking_histogram()),
            ("PL", self.pl.histogram()),
            ("MT", self.mt.histogram()),
        ];
        if let Some(lp) = &self.lp {
            out.push(("LP", lp.histogram()));
        }
        out
    }

    /// Mean epsilon over images whose noise flag equals `noise`.
    pub fn mean_epsilon_where(&self, flags: &BTreeMap<String, bool>, noise: bool) -> Option<f64> {
        let picked: Vec<f64> = self
            .image_ids
            .iter()
            .zip(&self.epsilon)
            .filter(|(id, _)| flags.get(*id) == Some(&noise))
            .map(|(_, e)| e.as_f64())
            .collect();
        (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
    }

    pub fn write_ew_csv<W: Write>(&self, w: W, flags: Option<&BTreeMap<String, bool>>) -> Result<()> {
        let rows: Vec<(String, T, Option<bool>)> = self
            .image_ids
            .iter()
            .zip(&self.epsilon)
            .map(|(id, &e)| (id.clone(), e, flags.and_then(|f| f.get(id).copied())))
            .collect();
        write_ew_csv(w, &rows)
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let mut hist = serde_json::Map::new();
        for (name, h) in self.histograms() {
            hist.insert(name.to_string(), h.to_json());
        }
        let n = self.epsilon.len() as f64;
        serde_json::json!({
            "images": self.image_ids.len(),
            "histograms": hist,
            "mean_epsilon": self.epsilon.iter().map(|e| e.as_f64()).sum::<f64>() / n,
            "pl_none_rate": self.pl.histogram().none_rate(),
        })
    }
}
