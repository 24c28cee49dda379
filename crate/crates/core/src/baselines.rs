//! Adapted semi-supervised baselines and the pluggable importance-score source.
//!
//! Pseudo Label thresholds each person independently, Mean Teacher uses an
//! exponential moving average of the student as target generator, and Label
//! Propagation diffuses labels over a person-level k-NN graph. All three treat
//! persons as independent samples.

use std::fmt;
use std::str::FromStr;

use crate::dataset::EventImage;
use crate::model::{ProbRow, RelationModel};
use crate::{Error, Result, Scalar};

/// Pseudo Label: important iff the important-class probability is strictly above 1/2.
pub fn pl_labels<T: Scalar>(scores: &[T]) -> Vec<bool> {
    let half = T::lit(0.5);
    scores.iter().map(|&z| z > half).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState<T> {
    pub model: RelationModel<T>,
    pub decay: T,
}

impl<T: Scalar> TeacherState<T> {
    pub fn new(student: &RelationModel<T>, decay: T) -> Result<Self> {
        check_decay(decay)?;
        Ok(Self {
            model: student.clone(),
            decay,
        })
    }
}

/// `teacher <- decay * teacher + (1 - decay) * student`.
pub fn ema_update<T: Scalar>(teacher: &mut TeacherState<T>, student: &RelationModel<T>) -> Result<()> {
    check_decay(teacher.decay)?;
    if teacher.model.input_dim() != student.input_dim() || teacher.model.hidden() != student.hidden() {
        return Err(Error::dims(
            teacher.model.num_parameters(),
            student.num_parameters(),
            "teacher vs student parameters",
        ));
    }
    let d = teacher.decay;
    let s = T::one() - d;
    for (t, &x) in teacher.model.parameters_mut().iter_mut().zip(student.parameters()) {
        *t = d * *t + s * x;
    }
    Ok(())
}

fn check_decay<T: Scalar>(decay: T) -> Result<()> {
    if !(decay >= T::zero() && decay <= T::one()) {
        return Err(Error::invalid(format!("EMA decay must lie in [0, 1], got {decay}")));
    }
    Ok(())
}

/// Mean over rows of the squared distance between student and teacher rows.
pub fn mt_loss<T: Scalar>(student: &[ProbRow<T>], teacher: &[ProbRow<T>]) -> Result<T> {
    if student.len() != teacher.len() {
        return Err(Error::dims(student.len(), teacher.len(), "teacher rows"));
    }
    if student.is_empty() {
        return Ok(T::zero());
    }
    let s: T = student
        .iter()
        .zip(teacher)
        .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
        .sum();
    Ok(s / T::lit(student.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpParams {
    pub k_nn: usize,
    pub alpha: f64,
    pub iterations: usize,
}

impl Default for LpParams {
    fn default() -> Self {
        Self {
            k_nn: 10,
            alpha: 0.99,
            iterations: 20,
        }
    }
}

/// Label propagation over a symmetric k-NN graph.
///
/// `labels[i]` is `Some(class)` for known nodes and `None` for nodes to infer.
/// Edges connect each node with its `k_nn` nearest neighbours (ties to the
/// lower index), weighted `exp(-d^2 / sigma^2)` with `sigma` the median k-NN
/// distance; rows are normalised and `F <- alpha W F + (1 - alpha) Y` is
/// iterated from `F = Y`. Returns `F_1 / (F_0 + F_1)` for every unknown node
/// in input order, `1/2` where no mass arrived.
pub fn lp_scores<T: Scalar>(embeddings: &[Vec<T>], labels: &[Option<bool>], params: LpParams) -> Result<Vec<T>> {
    let n = embeddings.len();
    if labels.len() != n {
        return Err(Error::dims(n, labels.len(), "label propagation labels"));
    }
    if params.k_nn == 0 {
        return Err(Error::invalid("k_nn must be at least 1"));
    }
    if !(params.alpha > 0.0 && params.alpha < 1.0) {
        return Err(Error::invalid(format!("propagation alpha must lie in (0, 1), got {}", params.alpha)));
    }
    for class in [false, true] {
        if !labels.contains(&Some(class)) {
            return Err(Error::invalid(format!(
                "label propagation needs at least one known node of class {}",
                u8::from(class)
            )));
        }
    }
    let dim = embeddings[0].len();
    if let Some(bad) = embeddings.iter().find(|e| e.len() != dim) {
        return Err(Error::dims(dim, bad.len(), "embedding"));
    }

    let dist = |a: &[T], b: &[T]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y).as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut d = vec![0.0f64; n * n];
    let mut any_positive = false;
    for i in 0..n {
        for j in i + 1..n {
            let v = dist(&embeddings[i], &embeddings[j]);
            d[i * n + j] = v;
            d[j * n + i] = v;
            any_positive |= v > 0.0;
        }
    }
    if !any_positive {
        return Err(Error::Degenerate("all embeddings are identical".into()));
    }

    let k = params.k_nn.min(n - 1);
    let mut adjacent = vec![false; n * n];
    let mut knn_dists = Vec::with_capacity(n * k);
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| d[i * n + a].total_cmp(&d[i * n + b]).then(a.cmp(&b)));
        for &j in &order[..k] {
            adjacent[i * n + j] = true;
            adjacent[j * n + i] = true;
            knn_dists.push(d[i * n + j]);
        }
    }
    knn_dists.sort_by(f64::total_cmp);
    let mut sigma = if knn_dists.is_empty() {
        0.0
    } else {
        knn_dists[knn_dists.len() / 2]
    };
    if sigma <= 0.0 {
        sigma = knn_dists.iter().copied().find(|&v| v > 0.0).unwrap_or_else(|| {
            let pos: Vec<f64> = d.iter().copied().filter(|&v| v > 0.0).collect();
            pos.iter().sum::<f64>() / pos.len() as f64
        });
    }

    // Row-normalised sparse affinity.
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut row: Vec<(usize, f64)> = (0..n)
            .filter(|&j| adjacent[i * n + j])
            .map(|j| (j, (-(d[i * n + j] / sigma).powi(2)).exp()))
            .collect();
        let s: f64 = row.iter().map(|e| e.1).sum();
        if s > 0.0 {
            for e in &mut row {
                e.1 /= s;
            }
        }
        rows.push(row);
    }

    let y: Vec<[f64; 2]> = labels
        .iter()
        .map(|l| match l {
            Some(false) => [1.0, 0.0],
            Some(true) => [0.0, 1.0],
            None => [0.0, 0.0],
        })
        .collect();
    let mut f = y.clone();
    for _ in 0..params.iterations {
        let next: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let mut acc = [0.0; 2];
                for &(j, w) in &rows[i] {
                    acc[0] += w * f[j][0];
                    acc[1] += w * f[j][1];
                }
                [
                    params.alpha * acc[0] + (1.0 - params.alpha) * y[i][0],
                    params.alpha * acc[1] + (1.0 - params.alpha) * y[i][1],
                ]
            })
            .collect();
        f = next;
    }

    Ok(labels
        .iter()
        .zip(&f)
        .filter(|(l, _)| l.is_none())
        .map(|(_, fi)| {
            let s = fi[0] + fi[1];
            T::lit(if s > 0.0 { fi[1] / s } else { 0.5 })
        })
        .collect())
}

/// Where importance scores for ranking-based sampling come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ScoreSource {
    /// Softmax output of the current model over the full group.
    #[default]
    Softmax,
    /// Softmax output of the mean-teacher model.
    MeanTeacher,
    /// Label-propagation class-1 share over relation-aware person embeddings.
    LabelPropagation,
}

impl fmt::Display for ScoreSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreSource::Softmax => "softmax",
            ScoreSource::MeanTeacher => "MT",
            ScoreSource::LabelPropagation => "LP",
        })
    }
}

impl FromStr for ScoreSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "softmax" => Ok(ScoreSource::Softmax),
            "mt" | "mean_teacher" => Ok(ScoreSource::MeanTeacher),
            "lp" | "label_propagation" => Ok(ScoreSource::LabelPropagation),
            _ => Err(Error::Config(format!(
                "unknown score source {s:?} (expected softmax, MT or LP)"
            ))),
        }
    }
}

/// Produces full-group importance scores for a batch of unlabelled images.
///
/// Label propagation scores one unlabelled batch jointly with the persons of
/// `anchors` (labelled images) as known nodes.
pub struct ScoreEstimator<'a, T> {
    pub source: ScoreSource,
    pub student: &'a RelationModel<T>,
    pub teacher: Option<&'a RelationModel<T>>,
    pub anchors: &'a [&'a EventImage<T>],
    pub lp: LpParams,
}

impl<'a, T: Scalar> ScoreEstimator<'a, T> {
    pub fn softmax(student: &'a RelationModel<T>) -> Self {
        Self {
            source: ScoreSource::Softmax,
            student,
            teacher: None,
            anchors: &[],
            lp: LpParams::default(),
        }
    }

    pub fn scores(&self, batch: &[&EventImage<T>]) -> Result<Vec<Vec<T>>> {
        match self.source {
            ScoreSource::Softmax => batch.iter().map(|img| group_scores(self.student, img)).collect(),
            ScoreSource::MeanTeacher => {
                let teacher = self
                    .teacher
                    .ok_or_else(|| Error::Config("MT score source configured without a teacher model".into()))?;
                batch.iter().map(|img| group_scores(teacher, img)).collect()
            }
            ScoreSource::LabelPropagation => self.lp_batch(batch),
        }
    }

    fn lp_batch(&self, batch: &[&EventImage<T>]) -> Result<Vec<Vec<T>>> {
        if self.anchors.is_empty() {
            return Err(Error::Config("LP score source configured without labelled anchor images".into()));
        }
        let mut emb = Vec::new();
        let mut labels = Vec::new();
        for img in self.anchors {
            let rec = self.student.forward_recorded(&img.features())?;
            for (j, p) in img.persons.iter().enumerate() {
                emb.push(rec.embedding(j));
                labels.push(Some(p.label.ok_or_else(|| {
                    Error::invalid(format!("anchor image {:?} is unlabelled", img.id))
                })?));
            }
        }
        let mut sizes = Vec::with_capacity(batch.len());
        for img in batch {
            let rec = self.student.forward_recorded(&img.features())?;
            for j in 0..img.len() {
                emb.push(rec.embedding(j));
                labels.push(None);
            }
            sizes.push(img.len());
        }
        let flat = lp_scores(&emb, &labels, self.lp)?;
        let mut out = Vec::with_capacity(batch.len());
        let mut at = 0;
        for n in sizes {
            out.push(flat[at..at + n].to_vec());
            at += n;
        }
        Ok(out)
    }
}

fn group_scores<T: Scalar>(model: &RelationModel<T>, img: &EventImage<T>) -> Result<Vec<T>> {
    crate::pseudolabel::importance_scores(model, img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PersonInstance;
    use proptest::prelude::*;

    #[test]
    fn pl_threshold() {
        assert_eq!(pl_labels(&[0.3f64, 0.2]), vec![false, false]);
        assert_eq!(pl_labels(&[0.9f64, 0.1]), vec![true, false]);
        assert_eq!(pl_labels(&[0.5f64, 0.5]), vec![false, false]);
    }

    #[test]
    fn ema_extremes_and_midpoint() {
        let student = RelationModel::from_parameters(1, 1, vec![4.0f64; 11]).unwrap();
        let base = RelationModel::from_parameters(1, 1, vec![2.0f64; 11]).unwrap();

        let mut t = TeacherState { model: base.clone(), decay: 1.0 };
        ema_update(&mut t, &student).unwrap();
        assert_eq!(t.model, base);

        let mut t = TeacherState { model: base.clone(), decay: 0.0 };
        ema_update(&mut t, &student).unwrap();
        assert_eq!(t.model, student);

        let mut t = TeacherState { model: base.clone(), decay: 0.5 };
        ema_update(&mut t, &student).unwrap();
        assert!(t.model.parameters().iter().all(|&v| v == 3.0));

        let mut t = TeacherState { model: base, decay: 1.5 };
        assert!(ema_update(&mut t, &student).is_err());
    }

    #[test]
    fn ema_contracts_toward_student() {
        let student = RelationModel::<f64>::init(3, 2, 1).unwrap();
        let mut t = TeacherState::new(&RelationModel::<f64>::init(3, 2, 2).unwrap(), 0.9).unwrap();
        let gap = |t: &TeacherState<f64>| -> f64 {
            t.model
                .parameters()
                .iter()
                .zip(student.parameters())
                .map(|(a, b)| (a - b).abs())
                .sum()
        };
        let before = gap(&t);
        ema_update(&mut t, &student).unwrap();
        assert!(gap(&t) < before);
    }

    #[test]
    fn mt_loss_values() {
        let a = [[0.3f64, 0.7], [0.6, 0.4]];
        assert_eq!(mt_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(mt_loss(&[[1.0f64, 0.0]], &[[0.0, 1.0]]).unwrap(), 2.0);
        let b = [[0.1f64, 0.9], [0.5, 0.5]];
        assert_eq!(mt_loss(&a, &b).unwrap(), mt_loss(&b, &a).unwrap());
        assert!(mt_loss(&a, &b[..1]).is_err());
    }

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x, 0.0]).collect()
    }

    #[test]
    fn lp_inherits_from_coincident_neighbour() {
        let emb = pts(&[0.0, 5.0, 0.0]);
        let labels = [Some(true), Some(false), None];
        let p = LpParams { k_nn: 1, alpha: 0.5, ..LpParams::default() };
        let s = lp_scores(&emb, &labels, p).unwrap();
        assert_eq!(s.len(), 1);
        assert!(s[0] > 0.5, "{s:?}");
    }

    #[test]
    fn lp_without_iterations_is_neutral() {
        let emb = pts(&[0.0, 1.0, 2.0, 3.0]);
        let labels = [Some(true), None, Some(false), None];
        let p = LpParams { iterations: 0, ..LpParams::default() };
        assert_eq!(lp_scores(&emb, &labels, p).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn lp_symmetric_line_is_even() {
        let emb = pts(&[0.0, 1.0, 2.0]);
        let labels = [Some(true), None, Some(false)];
        let p = LpParams { k_nn: 1, ..LpParams::default() };
        let s = lp_scores(&emb, &labels, p).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-12, "{s:?}");
    }

    #[test]
    fn lp_errors() {
        let p = LpParams::default();
        assert!(matches!(
            lp_scores(&pts(&[1.0, 1.0, 1.0]), &[Some(true), Some(false), None], p),
            Err(Error::Degenerate(_))
        ));
        assert!(lp_scores(&pts(&[0.0, 1.0]), &[Some(true), None], p).is_err());
        assert!(lp_scores(&pts(&[0.0, 1.0]), &[Some(true), Some(false)], LpParams { k_nn: 0, ..p }).is_err());
    }

    #[test]
    fn score_source_parsing() {
        assert_eq!("softmax".parse::<ScoreSource>().unwrap(), ScoreSource::Softmax);
        assert_eq!("MT".parse::<ScoreSource>().unwrap(), ScoreSource::MeanTeacher);
        assert_eq!("lp".parse::<ScoreSource>().unwrap(), ScoreSource::LabelPropagation);
        assert!("bogus".parse::<ScoreSource>().is_err());
        for s in [ScoreSource::Softmax, ScoreSource::MeanTeacher, ScoreSource::LabelPropagation] {
            assert_eq!(s.to_string().parse::<ScoreSource>().unwrap(), s);
        }
    }

    fn image(id: &str, labelled: bool, xs: &[[f64; 2]]) -> EventImage<f64> {
        EventImage {
            id: id.into(),
            labelled,
            persons: xs
                .iter()
                .enumerate()
                .map(|(j, x)| PersonInstance {
                    features: x.to_vec(),
                    label: labelled.then_some(j == 0),
                })
                .collect(),
        }
    }

    #[test]
    fn estimator_sources() {
        let m = RelationModel::<f64>::init(2, 4, 3).unwrap();
        let unl = image("u", false, &[[0.1, 0.2], [1.0, -1.0], [0.5, 0.5]]);
        let lab = image("l", true, &[[2.0, 0.0], [0.0, 0.3], [-0.4, 0.1]]);
        let soft = ScoreEstimator::softmax(&m).scores(&[&unl]).unwrap();
        assert_eq!(soft[0], crate::pseudolabel::importance_scores(&m, &unl).unwrap());

        let mut est = ScoreEstimator::softmax(&m);
        est.source = ScoreSource::MeanTeacher;
        assert!(est.scores(&[&unl]).is_err());
        let mut teacher = TeacherState::new(&RelationModel::<f64>::init(2, 4, 9).unwrap(), 0.0).unwrap();
        ema_update(&mut teacher, &m).unwrap();
        est.teacher = Some(&teacher.model);
        assert_eq!(est.scores(&[&unl]).unwrap(), soft);

        let anchors = [&lab];
        let est = ScoreEstimator {
            source: ScoreSource::LabelPropagation,
            student: &m,
            teacher: None,
            anchors: &anchors,
            lp: LpParams { k_nn: 2, ..LpParams::default() },
        };
        let lp = est.scores(&[&unl, &unl]).unwrap();
        assert_eq!(lp.len(), 2);
        assert!(lp.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    proptest! {
        #[test]
        fn lp_translation_invariant(
            xs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 4..12),
            t in (-10.0f64..10.0, -10.0f64..10.0),
        ) {
            let emb: Vec<Vec<f64>> = xs.iter().map(|&(a, b)| vec![a, b]).collect();
            let mut labels = vec![None; emb.len()];
            labels[0] = Some(true);
            labels[1] = Some(false);
            let shifted: Vec<Vec<f64>> = emb.iter().map(|e| vec![e[0] + t.0, e[1] + t.1]).collect();
            let p = LpParams { k_nn: 3, ..LpParams::default() };
            match (lp_scores(&emb, &labels, p), lp_scores(&shifted, &labels, p)) {
                (Ok(a), Ok(b)) => {
                    for (x, y) in a.iter().zip(&b) {
                        prop_assert!((x - y).abs() < 1e-6);
                    }
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false),
            }
        }
    }
}
