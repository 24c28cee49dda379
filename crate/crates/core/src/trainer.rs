//! The iterative semi-supervised training loop and the ablation runner.
//!
//! Every optimisation step combines one labelled batch and one unlabelled
//! batch into a single objective. Pseudo-labels, importance-score weights and
//! effectiveness weights for the unlabelled batch are all computed from the
//! parameters as they stand before the step's update.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baselines::{ema_update, pl_labels, LpParams, ScoreEstimator, ScoreSource, TeacherState};
use crate::config::{parse_value, KeyValueTarget};
use crate::dataset::{split_dataset, Dataset, EventImage};
use crate::loss::{
    labelled_loss, labelled_loss_grad, lambda_schedule, one_hot, sample_labelled, total_loss, weighted_squared_error,
    weighted_squared_error_grad, LossBreakdown,
};
use crate::metrics::{label_set_histogram, mean_ap, pseudo_label_histogram, PseudoLabelHistogram};
use crate::model::{sgd_step, OptimizerState, ProbRow, RelationModel};
use crate::pseudolabel::rank_and_label;
use crate::sampling::draw_fill;
use crate::weighting::UnlabelledWeights;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Method {
    /// Labelled data only.
    Supervised,
    /// Ranking-based sampling with importance-score and effectiveness weights.
    #[default]
    Ours,
    /// Without the effectiveness weight.
    OursNoEw,
    /// Ranking-based sampling only.
    OursNoIswEw,
    /// Plain pseudo-labelling; identical to [`Method::PseudoLabel`].
    OursNoRankSIswEw,
    PseudoLabel,
    MeanTeacher,
    LabelPropagation,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Supervised,
        Method::Ours,
        Method::OursNoEw,
        Method::OursNoIswEw,
        Method::OursNoRankSIswEw,
        Method::PseudoLabel,
        Method::MeanTeacher,
        Method::LabelPropagation,
    ];

    pub fn uses_unlabelled(self) -> bool {
        self != Method::Supervised
    }

    pub fn uses_ranking(self) -> bool {
        matches!(self, Method::Ours | Method::OursNoEw | Method::OursNoIswEw)
    }

    pub fn uses_isw(self) -> bool {
        matches!(self, Method::Ours | Method::OursNoEw)
    }

    pub fn uses_ew(self) -> bool {
        self == Method::Ours
    }

    /// Score source actually used, given the configured one.
    pub fn effective_source(self, configured: ScoreSource) -> ScoreSource {
        match self {
            Method::MeanTeacher => ScoreSource::MeanTeacher,
            Method::LabelPropagation => ScoreSource::LabelPropagation,
            _ => configured,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Supervised => "supervised",
            Method::Ours => "ours",
            Method::OursNoEw => "ours_no_EW",
            Method::OursNoIswEw => "ours_no_ISW_EW",
            Method::OursNoRankSIswEw => "ours_no_RankS_ISW_EW",
            Method::PseudoLabel => "PL",
            Method::MeanTeacher => "MT",
            Method::LabelPropagation => "LP",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<String> = Method::ALL.iter().map(Method::to_string).collect();
                Error::Config(format!("unknown method {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    /// Persons sampled per image for each loss term.
    pub k: usize,
    /// Ranking-score threshold for the important pseudo-label.
    pub alpha: f64,
    pub epochs: usize,
    pub ramp_epochs: usize,
    pub lambda_max: f64,
    pub lr0: f64,
    pub lr_decay_every: usize,
    pub lr_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_labelled: usize,
    pub batch_unlabelled: usize,
    pub seed: u64,
    pub method: Method,
    pub score_source: ScoreSource,
    /// Hidden width of the relation scorer.
    pub hidden: usize,
    pub mt_decay: f64,
    pub lp_k: usize,
    pub lp_alpha: f64,
    pub lp_iterations: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            k: 8,
            alpha: 0.99,
            epochs: 60,
            ramp_epochs: 35,
            lambda_max: 1.0,
            lr0: 0.001,
            lr_decay_every: 20,
            lr_factor: 0.5,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_labelled: 8,
            batch_unlabelled: 8,
            seed: 0,
            method: Method::Ours,
            score_source: ScoreSource::Softmax,
            hidden: 16,
            mt_decay: 0.99,
            lp_k: 10,
            lp_alpha: 0.99,
            lp_iterations: 20,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        for (name, v) in [
            ("ramp_epochs", self.ramp_epochs),
            ("lr_decay_every", self.lr_decay_every),
            ("batch_labelled", self.batch_labelled),
            ("batch_unlabelled", self.batch_unlabelled),
            ("hidden", self.hidden),
            ("lp_k", self.lp_k),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("lr0", self.lr0), ("lr_factor", self.lr_factor)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("lambda_max", self.lambda_max),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.mt_decay) {
            return bad(format!("mt_decay must lie in [0, 1], got {}", self.mt_decay));
        }
        if !(self.lp_alpha > 0.0 && self.lp_alpha < 1.0) {
            return bad(format!("lp_alpha must lie in (0, 1), got {}", self.lp_alpha));
        }
        Ok(())
    }

    /// `lr0 * lr_factor ^ floor(epoch / lr_decay_every)`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_factor.powi((epoch / self.lr_decay_every) as i32)
    }

    pub fn lambda(&self, epoch: usize) -> f64 {
        if self.method == Method::Supervised {
            return 0.0;
        }
        lambda_schedule(epoch as i64, self.ramp_epochs as i64, self.lambda_max).expect("validated schedule")
    }

    pub fn lp_params(&self) -> LpParams {
        LpParams {
            k_nn: self.lp_k,
            alpha: self.lp_alpha,
            iterations: self.lp_iterations,
        }
    }

    fn needs_teacher(&self) -> bool {
        self.method.uses_unlabelled() && self.method.effective_source(self.score_source) == ScoreSource::MeanTeacher
    }
}

impl KeyValueTarget for TrainingConfig {
    const KEYS: &'static [&'static str] = &[
        "k",
        "alpha",
        "epochs",
        "ramp_epochs",
        "lambda_max",
        "lr0",
        "lr_decay_every",
        "lr_factor",
        "momentum",
        "weight_decay",
        "batch_labelled",
        "batch_unlabelled",
        "seed",
        "method",
        "score_source",
        "hidden",
        "mt_decay",
        "lp_k",
        "lp_alpha",
        "lp_iterations",
    ];

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "k" => self.k = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "ramp_epochs" => self.ramp_epochs = parse_value(key, value)?,
            "lambda_max" => self.lambda_max = parse_value(key, value)?,
            "lr0" => self.lr0 = parse_value(key, value)?,
            "lr_decay_every" => self.lr_decay_every = parse_value(key, value)?,
            "lr_factor" => self.lr_factor = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "batch_labelled" => self.batch_labelled = parse_value(key, value)?,
            "batch_unlabelled" => self.batch_unlabelled = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "method" => self.method = value.parse()?,
            "score_source" => self.score_source = value.parse()?,
            "hidden" => self.hidden = parse_value(key, value)?,
            "mt_decay" => self.mt_decay = parse_value(key, value)?,
            "lp_k" => self.lp_k = parse_value(key, value)?,
            "lp_alpha" => self.lp_alpha = parse_value(key, value)?,
            "lp_iterations" => self.lp_iterations = parse_value(key, value)?,
            _ => return Err(Self::unknown_key(key)),
        }
        Ok(())
    }
}

/// Targets and weights for one unlabelled image.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabelledTarget<T> {
    /// `K` person indices into the image.
    pub sample: Vec<usize>,
    /// Target probability row per sampled slot.
    pub targets: Vec<ProbRow<T>>,
    pub weights: UnlabelledWeights<T>,
    /// Persons of the whole image that the method would call important.
    pub important_count: usize,
}

/// Builds the unlabelled targets for one image from its full-group scores.
///
/// Ranking methods sample the top-1 plus `K - 1` non-important persons and
/// use hard ranking pseudo-labels; the others sample `K` persons uniformly
/// and use per-person thresholding (PL, LP) or the teacher's soft rows (MT).
pub fn unlabelled_target<T: Scalar, R: Rng + ?Sized>(
    cfg: &TrainingConfig,
    scores: &[T],
    rng: &mut R,
) -> Result<UnlabelledTarget<T>> {
    let method = cfg.method;
    if method.uses_ranking() {
        let ranked = rank_and_label(scores, T::lit(cfg.alpha), cfg.k, rng)?;
        let sampled: Vec<T> = ranked.sample_indices.iter().map(|&i| scores[i]).collect();
        let weights = UnlabelledWeights::from_scores(&sampled, method.uses_isw(), method.uses_ew())?;
        return Ok(UnlabelledTarget {
            targets: ranked.pseudo_labels.iter().map(|&b| one_hot(b)).collect(),
            sample: ranked.sample_indices,
            weights,
            important_count: ranked.important_set.len(),
        });
    }
    let all: Vec<usize> = (0..scores.len()).collect();
    let sample = draw_fill(&all, cfg.k, rng);
    let sampled: Vec<T> = sample.iter().map(|&i| scores[i]).collect();
    let targets = match method {
        Method::MeanTeacher => sampled.iter().map(|&z| [T::one() - z, z]).collect(),
        _ => pl_labels(&sampled).into_iter().map(one_hot).collect(),
    };
    Ok(UnlabelledTarget {
        sample,
        targets,
        weights: UnlabelledWeights::uniform(cfg.k),
        important_count: pl_labels(scores).iter().filter(|&&b| b).count(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub labelled_term: f64,
    pub unlabelled_term: f64,
    pub total: f64,
    /// Mean effectiveness weight applied to unlabelled images, if any were visited.
    pub mean_epsilon: Option<f64>,
    pub val_map: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabelStats {
    /// Important-set sizes under ranking-based sampling.
    pub ranking: PseudoLabelHistogram,
    /// Important counts under per-person thresholding.
    pub thresholding: PseudoLabelHistogram,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (best validation mAP).
    pub best_epoch: Option<usize>,
    /// Pseudo-label statistics of the final-epoch model on the unlabelled pool.
    pub pseudo_labels: Option<PseudoLabelStats>,
}

impl TrainingHistory {
    pub const CSV_HEADER: &'static str = "epoch,lr,lambda,labelled_term,unlabelled_term,total,mean_epsilon,val_map";

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                r.lr,
                r.lambda,
                r.labelled_term,
                r.unlabelled_term,
                r.total,
                opt(r.mean_epsilon),
                opt(r.val_map)
            )?;
        }
        Ok(())
    }
}

/// What one optimisation step computed.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport<T> {
    pub loss: LossBreakdown<T>,
    /// Effectiveness weight of each unlabelled image in the batch.
    pub epsilons: Vec<T>,
    /// Per-image unlabelled terms (before `lambda`).
    pub unlabelled_terms: Vec<T>,
}

/// Cycles through a pool in reshuffled order.
#[derive(Debug, Clone)]
struct Cursor {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cursor {
    fn new(len: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
            rng,
        }
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        if self.pos >= self.order.len() {
            self.reshuffle();
        }
        let end = (self.pos + size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

/// Stream ids for the independent random sources of one run.
const STREAM_INIT: u64 = 1;
const STREAM_LABELLED_ORDER: u64 = 2;
const STREAM_LABELLED_SAMPLING: u64 = 3;
const STREAM_UNLABELLED_ORDER: u64 = 4;
const STREAM_UNLABELLED_SAMPLING: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One training run's mutable state.
pub struct Trainer<'a, T> {
    cfg: TrainingConfig,
    labelled: &'a Dataset<T>,
    unlabelled: &'a Dataset<T>,
    model: RelationModel<T>,
    optimizer: OptimizerState<T>,
    teacher: Option<TeacherState<T>>,
    lab_cursor: Cursor,
    unl_cursor: Cursor,
    lab_rng: ChaCha8Rng,
    unl_rng: ChaCha8Rng,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(cfg: &TrainingConfig, labelled: &'a Dataset<T>, unlabelled: &'a Dataset<T>) -> Result<Self> {
        cfg.validate()?;
        if labelled.is_empty() {
            return Err(Error::invalid("training needs at least one labelled image"));
        }
        if labelled.images().iter().any(|i| !i.labelled) {
            return Err(Error::invalid("labelled pool contains an unlabelled image"));
        }
        if !unlabelled.is_empty() && unlabelled.feature_dim() != labelled.feature_dim() {
            return Err(Error::dims(labelled.feature_dim(), unlabelled.feature_dim(), "unlabelled pool"));
        }
        let init_seed = stream(cfg.seed, STREAM_INIT).random::<u64>();
        let model = RelationModel::init(labelled.feature_dim(), cfg.hidden, init_seed)?;
        let optimizer = OptimizerState::for_model(&model, T::lit(cfg.momentum), T::lit(cfg.weight_decay));
        let teacher = if cfg.needs_teacher() {
            Some(TeacherState::new(&model, T::lit(cfg.mt_decay))?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            labelled,
            unlabelled,
            model,
            optimizer,
            teacher,
            lab_cursor: Cursor::new(labelled.len(), stream(cfg.seed, STREAM_LABELLED_ORDER)),
            unl_cursor: Cursor::new(unlabelled.len(), stream(cfg.seed, STREAM_UNLABELLED_ORDER)),
            lab_rng: stream(cfg.seed, STREAM_LABELLED_SAMPLING),
            unl_rng: stream(cfg.seed, STREAM_UNLABELLED_SAMPLING),
        })
    }

    pub fn model(&self) -> &RelationModel<T> {
        &self.model
    }

    pub fn teacher(&self) -> Option<&RelationModel<T>> {
        self.teacher.as_ref().map(|t| &t.model)
    }

    pub fn into_model(self) -> RelationModel<T> {
        self.model
    }

    /// Optimisation steps per epoch: enough to visit both pools once.
    pub fn steps_per_epoch(&self) -> usize {
        let lab = self.labelled.len().div_ceil(self.cfg.batch_labelled);
        let unl = self.unlabelled.len().div_ceil(self.cfg.batch_unlabelled);
        lab.max(unl).max(1)
    }

    /// Reshuffles both pools.
    pub fn start_epoch(&mut self) {
        self.lab_cursor.reshuffle();
        self.unl_cursor.reshuffle();
    }

    /// Runs one optimisation step at the given epoch's schedule.
    pub fn step(&mut self, epoch: usize, step: usize) -> Result<StepReport<T>> {
        let diverged = |message: String| Error::Diverged { epoch, step, message };
        let cfg = &self.cfg;
        let k = cfg.k;
        let lambda = cfg.lambda(epoch);
        let lr = cfg.learning_rate(epoch);
        let mut grad = vec![T::zero(); self.model.num_parameters()];

        let lab_batch: Vec<&EventImage<T>> = self
            .lab_cursor
            .next_batch(cfg.batch_labelled)
            .into_iter()
            .map(|i| &self.labelled.images()[i])
            .collect();
        let lab_scale = T::one() / T::lit((lab_batch.len() * k) as f64);
        let mut lab_terms = Vec::with_capacity(lab_batch.len());
        for img in &lab_batch {
            let idx = sample_labelled(img, k, &mut self.lab_rng)?;
            let feats: Vec<&[T]> = idx.iter().map(|&i| img.persons[i].features.as_slice()).collect();
            let labels: Vec<bool> = idx.iter().map(|&i| img.persons[i].label == Some(true)).collect();
            let rec = self.model.forward_recorded(&feats)?;
            lab_terms.push(labelled_loss(rec.probs(), &labels)?);
            let up = labelled_loss_grad(rec.probs(), &labels, lab_scale);
            self.model.backward_into(&rec, &up, &mut grad)?;
        }

        let mut unl_terms = Vec::new();
        let mut epsilons = Vec::new();
        if cfg.method.uses_unlabelled() && !self.unlabelled.is_empty() {
            let unl_batch: Vec<&EventImage<T>> = self
                .unl_cursor
                .next_batch(cfg.batch_unlabelled)
                .into_iter()
                .map(|i| &self.unlabelled.images()[i])
                .collect();
            let estimator = ScoreEstimator {
                source: cfg.method.effective_source(cfg.score_source),
                student: &self.model,
                teacher: self.teacher.as_ref().map(|t| &t.model),
                anchors: &lab_batch,
                lp: cfg.lp_params(),
            };
            let scores = estimator.scores(&unl_batch)?;
            let unl_scale = T::lit(lambda) / T::lit(unl_batch.len() as f64);
            for (img, z) in unl_batch.iter().zip(&scores) {
                // Nothing to rank (e.g. propagation never reached the image):
                // the image carries no signal, as with a fully closed gate.
                if cfg.method.uses_ranking() && z.iter().all(|&v| v <= T::zero()) {
                    unl_terms.push(T::zero());
                    epsilons.push(T::zero());
                    continue;
                }
                let target = unlabelled_target(cfg, z, &mut self.unl_rng)?;
                let feats: Vec<&[T]> = target
                    .sample
                    .iter()
                    .map(|&i| img.persons[i].features.as_slice())
                    .collect();
                let rec = self.model.forward_recorded(&feats)?;
                let w = &target.weights;
                unl_terms.push(weighted_squared_error(rec.probs(), &target.targets, &w.w, w.epsilon)?);
                epsilons.push(w.epsilon);
                if lambda > 0.0 {
                    let up = weighted_squared_error_grad(rec.probs(), &target.targets, &w.w, w.epsilon, unl_scale);
                    self.model.backward_into(&rec, &up, &mut grad)?;
                }
            }
        }

        let loss = total_loss(&lab_terms, &unl_terms, T::lit(lambda)).map_err(|e| diverged(e.to_string()))?;
        sgd_step(&mut self.model, &mut self.optimizer, &grad, T::lit(lr)).map_err(|e| diverged(e.to_string()))?;
        if let Some(t) = self.teacher.as_mut() {
            ema_update(t, &self.model)?;
        }
        Ok(StepReport {
            loss,
            epsilons,
            unlabelled_terms: unl_terms,
        })
    }

    /// Runs one epoch and returns its record (without validation).
    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        self.start_epoch();
        let steps = self.steps_per_epoch();
        let (mut lab, mut unl, mut tot) = (0.0, 0.0, 0.0);
        let (mut eps_sum, mut eps_n) = (0.0, 0usize);
        for s in 0..steps {
            let r = self.step(epoch, s)?;
            lab += r.loss.labelled_term.as_f64();
            unl += r.loss.unlabelled_term.as_f64();
            tot += r.loss.total.as_f64();
            eps_sum += r.epsilons.iter().map(|e| e.as_f64()).sum::<f64>();
            eps_n += r.epsilons.len();
        }
        let n = steps as f64;
        Ok(EpochRecord {
            epoch,
            lr: self.cfg.learning_rate(epoch),
            lambda: self.cfg.lambda(epoch),
            labelled_term: lab / n,
            unlabelled_term: unl / n,
            total: tot / n,
            mean_epsilon: (eps_n > 0).then(|| eps_sum / eps_n as f64),
            val_map: None,
        })
    }
}

/// Pseudo-label statistics of `model` over an unlabelled pool.
pub fn pseudo_label_stats<T: Scalar>(
    model: &RelationModel<T>,
    unlabelled: &Dataset<T>,
    alpha: f64,
    k: usize,
) -> Result<PseudoLabelStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ranking = Vec::with_capacity(unlabelled.len());
    let mut thresholded = Vec::with_capacity(unlabelled.len());
    for img in unlabelled.images() {
        let z = crate::pseudolabel::importance_scores(model, img)?;
        ranking.push(rank_and_label(&z, T::lit(alpha), k, &mut rng)?.important_set.len());
        thresholded.push(pl_labels(&z));
    }
    Ok(PseudoLabelStats {
        ranking: pseudo_label_histogram(ranking),
        thresholding: label_set_histogram(thresholded.iter().map(Vec::as_slice)),
    })
}

/// Trains per `cfg` and returns the parameters with the best validation mAP
/// (the final parameters when `val` is empty).
pub fn train<T: Scalar>(
    cfg: &TrainingConfig,
    labelled: &Dataset<T>,
    unlabelled: &Dataset<T>,
    val: &Dataset<T>,
) -> Result<(RelationModel<T>, TrainingHistory)> {
    let mut trainer = Trainer::new(cfg, labelled, unlabelled)?;
    let mut history = TrainingHistory::default();
    let mut best: Option<(T, RelationModel<T>)> = None;
    for epoch in 0..cfg.epochs {
        let mut rec = trainer.run_epoch(epoch)?;
        if !val.is_empty() {
            let m = mean_ap(trainer.model(), val)?;
            rec.val_map = Some(m.as_f64());
            if best.as_ref().is_none_or(|(b, _)| m > *b) {
                best = Some((m, trainer.model().clone()));
                history.best_epoch = Some(epoch);
            }
        }
        history.epochs.push(rec);
    }
    if !unlabelled.is_empty() {
        history.pseudo_labels = Some(pseudo_label_stats(trainer.model(), unlabelled, cfg.alpha, cfg.k)?);
    }
    let model = match best {
        Some((_, m)) => m,
        None => {
            history.best_epoch = cfg.epochs.checked_sub(1);
            trainer.into_model()
        }
    };
    Ok((model, history))
}

/// A method together with the score source it ranks with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Variant {
    pub method: Method,
    pub score_source: ScoreSource,
}

impl Variant {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            score_source: ScoreSource::Softmax,
        }
    }

    pub fn with_source(method: Method, score_source: ScoreSource) -> Self {
        Self { method, score_source }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.score_source == ScoreSource::Softmax || !self.method.uses_ranking() {
            write!(f, "{}", self.method)
        } else {
            write!(f, "{}@{}", self.method, self.score_source)
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// `method` or `method@score_source`, e.g. `ours@MT`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('@') {
            Some((m, src)) => Ok(Self::with_source(m.trim().parse()?, src.trim().parse()?)),
            None => Ok(Self::new(s.trim().parse()?)),
        }
    }
}

/// Training, validation and test pools for one seed.
#[derive(Debug, Clone)]
pub struct SplitData<T> {
    /// Labelled training images before any fraction split.
    pub labelled: Dataset<T>,
    pub unlabelled: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Dataset<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub variant: Variant,
    pub labelled_fraction: f64,
    /// Test mAP per seed, in seed order.
    pub maps: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (zero for a single seed).
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn cell(&self, variant: Variant, fraction: f64) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.labelled_fraction == fraction)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "variant,method,score_source,labelled_fraction,seeds,mean_map,std_map,per_seed_map")?;
        for c in &self.cells {
            let per: Vec<String> = c.maps.iter().map(f64::to_string).collect();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                c.variant,
                c.variant.method,
                c.variant.score_source,
                c.labelled_fraction,
                c.maps.len(),
                c.mean,
                c.std,
                per.join(";")
            )?;
        }
        Ok(())
    }
}

/// Labelled pool reduced to `fraction`, with the rest merged (unlabelled) into the unlabelled pool.
pub fn fraction_pools<T: Scalar>(data: &SplitData<T>, fraction: f64, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    let (lab, demoted) = split_dataset(&data.labelled, fraction, seed)?;
    let mut images = demoted.into_images();
    images.extend(data.unlabelled.images().iter().cloned());
    let unl = if images.is_empty() {
        Dataset::empty(data.labelled.feature_dim())
    } else {
        Dataset::new(images, data.labelled.feature_dim())?
    };
    Ok((lab, unl))
}

/// Trains every (seed, fraction, variant) combination and tabulates test mAP.
///
/// `data_for_seed` supplies the pools for each seed. Runs execute on the
/// current rayon pool; results do not depend on the thread count.
pub fn run_ablation<T, F>(
    base: &TrainingConfig,
    variants: &[Variant],
    seeds: &[u64],
    fractions: &[f64],
    data_for_seed: F,
) -> Result<AblationTable>
where
    T: Scalar,
    F: Fn(u64) -> Result<SplitData<T>> + Sync,
{
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    if variants.is_empty() || fractions.is_empty() {
        return Err(Error::invalid("ablation needs at least one variant and one labelled fraction"));
    }
    let data: Vec<SplitData<T>> = seeds.par_iter().map(|&s| data_for_seed(s)).collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for (si, &seed) in seeds.iter().enumerate() {
        for &fraction in fractions {
            for &variant in variants {
                jobs.push((si, seed, fraction, variant));
            }
        }
    }
    let results: Vec<f64> = jobs
        .par_iter()
        .map(|&(si, seed, fraction, variant)| {
            let d = &data[si];
            let (lab, unl) = fraction_pools(d, fraction, seed)?;
            let cfg = TrainingConfig {
                seed,
                method: variant.method,
                score_source: variant.score_source,
                ..base.clone()
            };
            let (model, _) = train(&cfg, &lab, &unl, &d.val)?;
            Ok(mean_ap(&model, &d.test)?.as_f64())
        })
        .collect::<Result<_>>()?;

    let mut cells = Vec::new();
    for &fraction in fractions {
        for &variant in variants {
            let maps: Vec<f64> = jobs
                .iter()
                .zip(&results)
                .filter(|((_, _, f, v), _)| *f == fraction && *v == variant)
                .map(|(_, &m)| m)
                .collect();
            let n = maps.len() as f64;
            let mean = maps.iter().sum::<f64>() / n;
            let std = if maps.len() > 1 {
                (maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            cells.push(AblationCell {
                variant,
                labelled_fraction: fraction,
                maps,
                mean,
                std,
            });
        }
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        cells,
    })
}
