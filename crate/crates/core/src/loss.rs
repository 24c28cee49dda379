//! Labelled cross-entropy, weighted unlabelled squared error, and the ramped
//! combination of the two.
//!
//! Per-image terms are computed here; the batch objective is
//! `mean_i CE_i + lambda * mean_i (eps_i * sum_j w_j * ||p_j - t_j||^2)`.

use rand::Rng;

use crate::dataset::EventImage;
use crate::model::ProbRow;
use crate::sampling::draw_fill;
use crate::{Error, Result, Scalar};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub labelled_term: T,
    pub unlabelled_term: T,
    pub lambda: T,
    pub total: T,
}

/// All ground-truth important persons, followed by non-important persons
/// drawn to fill `k` slots (with replacement once the pool is exhausted).
pub fn sample_labelled<T: Scalar, R: Rng + ?Sized>(img: &EventImage<T>, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if !img.labelled {
        return Err(Error::invalid(format!("image {:?} is not labelled", img.id)));
    }
    let important = img.important_indices();
    if important.is_empty() {
        return Err(Error::Validation(format!("image {:?} has no important person", img.id)));
    }
    if k < important.len() {
        return Err(Error::invalid(format!(
            "K = {k} is smaller than the {} important persons of image {:?}",
            important.len(),
            img.id
        )));
    }
    let others: Vec<usize> = (0..img.len()).filter(|i| !important.contains(i)).collect();
    let pool = if others.is_empty() { &important } else { &others };
    let mut out = important.clone();
    out.extend(draw_fill(pool, k - important.len(), rng));
    Ok(out)
}

/// Mean cross-entropy over the rows.
pub fn labelled_loss<T: Scalar>(probs: &[ProbRow<T>], labels: &[bool]) -> Result<T> {
    check_rows(probs.len(), labels.len(), "labels")?;
    let floor = T::lit(PROB_FLOOR);
    let sum: T = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| -p[usize::from(y)].max(floor).ln())
        .sum();
    Ok(sum / T::lit(probs.len() as f64))
}

/// Derivative of `scale * sum_j -ln p_j[y_j]` with respect to each row.
pub fn labelled_loss_grad<T: Scalar>(probs: &[ProbRow<T>], labels: &[bool], scale: T) -> Vec<ProbRow<T>> {
    let floor = T::lit(PROB_FLOOR);
    probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            let c = usize::from(y);
            let mut g = [T::zero(); 2];
            if p[c] > floor {
                g[c] = -scale / p[c];
            }
            g
        })
        .collect()
}

pub fn one_hot<T: Scalar>(label: bool) -> ProbRow<T> {
    if label {
        [T::zero(), T::one()]
    } else {
        [T::one(), T::zero()]
    }
}

/// `eps * sum_j w_j * ||p_j - onehot(pseudo_j)||^2`.
pub fn unlabelled_loss<T: Scalar>(probs: &[ProbRow<T>], pseudo: &[bool], w: &[T], eps: T) -> Result<T> {
    let targets: Vec<ProbRow<T>> = pseudo.iter().map(|&b| one_hot(b)).collect();
    weighted_squared_error(probs, &targets, w, eps)
}

/// Soft-target form of [`unlabelled_loss`].
pub fn weighted_squared_error<T: Scalar>(probs: &[ProbRow<T>], targets: &[ProbRow<T>], w: &[T], eps: T) -> Result<T> {
    check_rows(probs.len(), targets.len(), "targets")?;
    check_rows(probs.len(), w.len(), "weights")?;
    if !(eps >= T::zero() && eps <= T::one()) {
        return Err(Error::invalid(format!("effectiveness weight must lie in [0, 1], got {eps}")));
    }
    let s: T = probs
        .iter()
        .zip(targets)
        .zip(w)
        .map(|((p, t), &wj)| wj * sq_dist(p, t))
        .sum();
    Ok(eps * s)
}

/// Derivative of `scale * eps * sum_j w_j ||p_j - t_j||^2` with respect to each row.
pub fn weighted_squared_error_grad<T: Scalar>(
    probs: &[ProbRow<T>],
    targets: &[ProbRow<T>],
    w: &[T],
    eps: T,
    scale: T,
) -> Vec<ProbRow<T>> {
    let two = T::lit(2.0);
    probs
        .iter()
        .zip(targets)
        .zip(w)
        .map(|((p, t), &wj)| {
            let c = scale * eps * wj * two;
            [c * (p[0] - t[0]), c * (p[1] - t[1])]
        })
        .collect()
}

/// `min(epoch / ramp_epochs, 1) * lambda_max`.
pub fn lambda_schedule(epoch: i64, ramp_epochs: i64, lambda_max: f64) -> Result<f64> {
    if epoch < 0 {
        return Err(Error::invalid(format!("epoch must be non-negative, got {epoch}")));
    }
    if ramp_epochs < 1 {
        return Err(Error::invalid(format!("ramp length must be at least 1, got {ramp_epochs}")));
    }
    Ok((epoch as f64 / ramp_epochs as f64).min(1.0) * lambda_max)
}

/// Assembles the batch objective from per-image terms: each labelled term is
/// an image's mean cross-entropy over its `K` samples, each unlabelled term an
/// image's gated, weighted squared error.
pub fn total_loss<T: Scalar>(labelled: &[T], unlabelled: &[T], lambda: T) -> Result<LossBreakdown<T>> {
    if labelled.is_empty() {
        return Err(Error::invalid("labelled batch is empty"));
    }
    if labelled.iter().chain(unlabelled).any(|v| !v.is_finite()) || !lambda.is_finite() {
        return Err(Error::NonFinite("loss component".into()));
    }
    let labelled_term = labelled.iter().copied().sum::<T>() / T::lit(labelled.len() as f64);
    let unlabelled_term = if unlabelled.is_empty() {
        T::zero()
    } else {
        unlabelled.iter().copied().sum::<T>() / T::lit(unlabelled.len() as f64)
    };
    Ok(LossBreakdown {
        labelled_term,
        unlabelled_term,
        lambda,
        total: labelled_term + lambda * unlabelled_term,
    })
}

fn sq_dist<T: Scalar>(a: &ProbRow<T>, b: &ProbRow<T>) -> T {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    d0 * d0 + d1 * d1
}

fn check_rows(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected != got {
        return Err(Error::dims(expected, got, what));
    }
    Ok(())
}
