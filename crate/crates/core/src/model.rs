//! Permutation-equivariant relation scorer and its optimizer.
//!
//! For a group of `N` persons with features `x_j` (dimension `D`) and hidden
//! width `H`:
//!
//! ```text
//! e_j  = relu(W_e x_j + b_e)                          person encoding     (H)
//! r_jk = relu(W_s e_j + W_o e_k + b_r)                pairwise relation   (H), k != j
//! a_j  = mean_{k != j} r_jk    (zero vector if N = 1) relation aggregate  (H)
//! l_j  = W_c [e_j; a_j] + b_c                         logits              (2)
//! p_j  = softmax(l_j)                                 [non-important, important]
//! ```
//!
//! `W_r = [W_s | W_o]` is stored as one `H x 2H` matrix. Every person goes
//! through the same weights and the aggregate is a symmetric mean, so
//! permuting the input permutes the output rows.
//!
//! # Parameter layout
//!
//! The flat parameter vector holds, in order: `W_e` (`H x D`, row-major),
//! `b_e` (`H`), `W_r` (`H x 2H`, row-major), `b_r` (`H`), `W_c` (`2 x 2H`,
//! row-major), `b_c` (`2`). The checkpoint format writes exactly this order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result, Scalar};

const CHECKPOINT_MAGIC: &str = "ranksemi-relation-model";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    dim: usize,
    hidden: usize,
}

impl Layout {
    fn we(&self) -> std::ops::Range<usize> {
        0..self.hidden * self.dim
    }
    fn be(&self) -> std::ops::Range<usize> {
        let s = self.we().end;
        s..s + self.hidden
    }
    fn wr(&self) -> std::ops::Range<usize> {
        let s = self.be().end;
        s..s + 2 * self.hidden * self.hidden
    }
    fn br(&self) -> std::ops::Range<usize> {
        let s = self.wr().end;
        s..s + self.hidden
    }
    fn wc(&self) -> std::ops::Range<usize> {
        let s = self.br().end;
        s..s + 4 * self.hidden
    }
    fn bc(&self) -> std::ops::Range<usize> {
        let s = self.wc().end;
        s..s + 2
    }
    fn len(&self) -> usize {
        self.bc().end
    }
}

/// Number of parameters for input dimension `dim` and hidden width `hidden`.
pub fn parameter_count(dim: usize, hidden: usize) -> usize {
    Layout { dim, hidden }.len()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationModel<T> {
    layout: Layout,
    params: Vec<T>,
}

/// A probability row: `[p(non-important), p(important)]`.
pub type ProbRow<T> = [T; 2];

impl<T: Scalar> RelationModel<T> {
    /// Weights ~ N(0, 1/fan_in), biases zero.
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::invalid(format!(
                "model dimensions must be positive (D={dim}, H={hidden})"
            )));
        }
        let layout = Layout { dim, hidden };
        let mut params = vec![T::zero(); layout.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (range, fan_in) in [
            (layout.we(), dim),
            (layout.wr(), 2 * hidden),
            (layout.wc(), 2 * hidden),
        ] {
            let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            for p in &mut params[range] {
                *p = T::lit(dist.sample(&mut rng));
            }
        }
        Ok(Self { layout, params })
    }

    pub fn from_parameters(dim: usize, hidden: usize, params: Vec<T>) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        let layout = Layout { dim, hidden };
        if params.len() != layout.len() {
            return Err(Error::dims(layout.len(), params.len(), "parameter vector"));
        }
        Ok(Self { layout, params })
    }

    pub fn input_dim(&self) -> usize {
        self.layout.dim
    }

    pub fn hidden(&self) -> usize {
        self.layout.hidden
    }

    pub fn parameters(&self) -> &[T] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.len()
    }

    /// Width of the per-person representation fed to the classifier head.
    pub fn embedding_dim(&self) -> usize {
        2 * self.layout.hidden
    }

    /// Per-person class probabilities for one group.
    pub fn forward(&self, persons: &[&[T]]) -> Result<Vec<ProbRow<T>>> {
        Ok(self.forward_recorded(persons)?.probs)
    }

    /// Forward pass that keeps every intermediate needed by [`Self::backward`].
    pub fn forward_recorded(&self, persons: &[&[T]]) -> Result<Recording<T>> {
        let n = persons.len();
        if n == 0 {
            return Err(Error::invalid("forward needs at least one person"));
        }
        let (d, h) = (self.layout.dim, self.layout.hidden);
        for (j, x) in persons.iter().enumerate() {
            if x.len() != d {
                return Err(Error::dims(d, x.len(), format!("person {j}")));
            }
        }
        let p = &self.params;
        let (we, be) = (&p[self.layout.we()], &p[self.layout.be()]);
        let (wr, br) = (&p[self.layout.wr()], &p[self.layout.br()]);
        let (wc, bc) = (&p[self.layout.wc()], &p[self.layout.bc()]);

        let mut inputs = Vec::with_capacity(n * d);
        for x in persons {
            inputs.extend_from_slice(x);
        }

        // Encoder.
        let mut enc_pre = vec![T::zero(); n * h];
        let mut enc = vec![T::zero(); n * h];
        for j in 0..n {
            let x = &inputs[j * d..(j + 1) * d];
            for i in 0..h {
                let v = dot(&we[i * d..(i + 1) * d], x) + be[i];
                enc_pre[j * h + i] = v;
                enc[j * h + i] = relu(v);
            }
        }

        // Split relation layer: self and other halves are applied once per person.
        let mut self_part = vec![T::zero(); n * h];
        let mut other_part = vec![T::zero(); n * h];
        for j in 0..n {
            let e = &enc[j * h..(j + 1) * h];
            for i in 0..h {
                let row = &wr[i * 2 * h..(i + 1) * 2 * h];
                self_part[j * h + i] = dot(&row[..h], e) + br[i];
                other_part[j * h + i] = dot(&row[h..], e);
            }
        }
        let mut pair_pre = vec![T::zero(); n * n * h];
        let mut agg = vec![T::zero(); n * h];
        if n > 1 {
            let inv = T::one() / T::lit((n - 1) as f64);
            for j in 0..n {
                let acc = &mut agg[j * h..(j + 1) * h];
                for k in 0..n {
                    if k == j {
                        continue;
                    }
                    let base = (j * n + k) * h;
                    for i in 0..h {
                        let u = self_part[j * h + i] + other_part[k * h + i];
                        pair_pre[base + i] = u;
                        acc[i] += relu(u);
                    }
                }
                for v in acc.iter_mut() {
                    *v *= inv;
                }
            }
        }

        // Classifier head and softmax.
        let mut probs = Vec::with_capacity(n);
        for j in 0..n {
            let (e, a) = (&enc[j * h..(j + 1) * h], &agg[j * h..(j + 1) * h]);
            let mut logits = [T::zero(); 2];
            for (c, l) in logits.iter_mut().enumerate() {
                let row = &wc[c * 2 * h..(c + 1) * 2 * h];
                *l = dot(&row[..h], e) + dot(&row[h..], a) + bc[c];
            }
            probs.push(softmax2(logits));
        }

        Ok(Recording {
            layout: self.layout,
            fingerprint: fingerprint(&self.params),
            n,
            inputs,
            enc_pre,
            enc,
            pair_pre,
            agg,
            probs,
        })
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss's derivative with respect to each output probability row.
    pub fn backward(&self, rec: &Recording<T>, upstream: &[ProbRow<T>]) -> Result<Vec<T>> {
        let mut grad = vec![T::zero(); self.params.len()];
        self.backward_into(rec, upstream, &mut grad)?;
        Ok(grad)
    }

    /// Like [`Self::backward`] but accumulates into `grad`.
    pub fn backward_into(&self, rec: &Recording<T>, upstream: &[ProbRow<T>], grad: &mut [T]) -> Result<()> {
        if rec.layout != self.layout {
            return Err(Error::StaleRecording(format!(
                "recorded with D={}, H={} but model has D={}, H={}",
                rec.layout.dim, rec.layout.hidden, self.layout.dim, self.layout.hidden
            )));
        }
        if rec.fingerprint != fingerprint(&self.params) {
            return Err(Error::StaleRecording(
                "model parameters changed since the forward pass".into(),
            ));
        }
        if upstream.len() != rec.n {
            return Err(Error::dims(rec.n, upstream.len(), "upstream gradient rows"));
        }
        if grad.len() != self.params.len() {
            return Err(Error::dims(self.params.len(), grad.len(), "gradient buffer"));
        }
        let (n, d, h) = (rec.n, self.layout.dim, self.layout.hidden);
        let l = self.layout;
        let p = &self.params;
        let (wr, wc) = (&p[l.wr()], &p[l.wc()]);

        let mut d_enc = vec![T::zero(); n * h];
        let mut d_agg = vec![T::zero(); n * h];
        {
            let (g_wc, rest) = grad[l.wc().start..].split_at_mut(4 * h);
            let g_bc = &mut rest[..2];
            for j in 0..n {
                let pr = rec.probs[j];
                let up = upstream[j];
                let inner = pr[0] * up[0] + pr[1] * up[1];
                let dl = [pr[0] * (up[0] - inner), pr[1] * (up[1] - inner)];
                let (e, a) = (&rec.enc[j * h..(j + 1) * h], &rec.agg[j * h..(j + 1) * h]);
                for c in 0..2 {
                    g_bc[c] += dl[c];
                    let g_row = &mut g_wc[c * 2 * h..(c + 1) * 2 * h];
                    let row = &wc[c * 2 * h..(c + 1) * 2 * h];
                    for i in 0..h {
                        g_row[i] += dl[c] * e[i];
                        g_row[h + i] += dl[c] * a[i];
                        d_enc[j * h + i] += dl[c] * row[i];
                        d_agg[j * h + i] += dl[c] * row[h + i];
                    }
                }
            }
        }

        if n > 1 {
            let inv = T::one() / T::lit((n - 1) as f64);
            // Sum of masked pair gradients by "self" index and by "other" index.
            let mut d_self = vec![T::zero(); n * h];
            let mut d_other = vec![T::zero(); n * h];
            for j in 0..n {
                for k in 0..n {
                    if k == j {
                        continue;
                    }
                    let base = (j * n + k) * h;
                    for i in 0..h {
                        if rec.pair_pre[base + i] > T::zero() {
                            let g = d_agg[j * h + i] * inv;
                            d_self[j * h + i] += g;
                            d_other[k * h + i] += g;
                        }
                    }
                }
            }
            let g_wr_start = l.wr().start;
            let g_br_start = l.br().start;
            for j in 0..n {
                let e = &rec.enc[j * h..(j + 1) * h];
                for i in 0..h {
                    let (gs, go) = (d_self[j * h + i], d_other[j * h + i]);
                    if gs == T::zero() && go == T::zero() {
                        continue;
                    }
                    grad[g_br_start + i] += gs;
                    let row_off = g_wr_start + i * 2 * h;
                    let row = &wr[i * 2 * h..(i + 1) * 2 * h];
                    for m in 0..h {
                        grad[row_off + m] += gs * e[m];
                        grad[row_off + h + m] += go * e[m];
                        d_enc[j * h + m] += gs * row[m] + go * row[h + m];
                    }
                }
            }
        }

        let g_we_start = l.we().start;
        let g_be_start = l.be().start;
        for j in 0..n {
            let x = &rec.inputs[j * d..(j + 1) * d];
            for i in 0..h {
                if rec.enc_pre[j * h + i] <= T::zero() {
                    continue;
                }
                let g = d_enc[j * h + i];
                grad[g_be_start + i] += g;
                let row = &mut grad[g_we_start + i * d..g_we_start + (i + 1) * d];
                for (r, &xv) in row.iter_mut().zip(x) {
                    *r += g * xv;
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Text checkpoint: a header, then one parameter per line in layout order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        writeln!(w, "input_dim {}", self.layout.dim)?;
        writeln!(w, "hidden {}", self.layout.hidden)?;
        writeln!(w, "params {}", self.params.len())?;
        for v in &self.params {
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(BufReader::new(File::open(path)?))
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, l)) => Ok((i + 1, l?)),
                None => Err(Error::Parse {
                    line: 0,
                    message: format!("checkpoint truncated before {what}"),
                }),
            }
        };
        let (ln, header) = next("header")?;
        let expected = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        if header.trim() != expected {
            return Err(Error::Parse {
                line: ln,
                message: format!("expected header {expected:?}, found {:?}", header.trim()),
            });
        }
        let mut field = |name: &str| -> Result<usize> {
            let (ln, line) = next(name)?;
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next().map(str::parse::<usize>), parts.next()) {
                (Some(k), Some(Ok(v)), None) if k == name => Ok(v),
                _ => Err(Error::Parse {
                    line: ln,
                    message: format!("expected `{name} <integer>`"),
                }),
            }
        };
        let dim = field("input_dim")?;
        let hidden = field("hidden")?;
        let count = field("params")?;
        if count != parameter_count(dim, hidden) {
            return Err(Error::dims(parameter_count(dim, hidden), count, "checkpoint parameter count"));
        }
        let mut params = Vec::with_capacity(count);
        for (i, line) in lines {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            let v = t.parse::<T>().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("invalid parameter value {t:?}"),
            })?;
            params.push(v);
        }
        if params.len() != count {
            return Err(Error::dims(count, params.len(), "checkpoint parameter values"));
        }
        Self::from_parameters(dim, hidden, params)
    }
}

/// Intermediates of one forward pass, tied to the exact parameters that produced them.
#[derive(Debug, Clone)]
pub struct Recording<T> {
    layout: Layout,
    fingerprint: u64,
    n: usize,
    inputs: Vec<T>,
    enc_pre: Vec<T>,
    enc: Vec<T>,
    pair_pre: Vec<T>,
    agg: Vec<T>,
    probs: Vec<ProbRow<T>>,
}

impl<T: Scalar> Recording<T> {
    pub fn probs(&self) -> &[ProbRow<T>] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Classifier input `[e_j; a_j]` for person `j`.
    pub fn embedding(&self, j: usize) -> Vec<T> {
        let h = self.layout.hidden;
        let mut v = Vec::with_capacity(2 * h);
        v.extend_from_slice(&self.enc[j * h..(j + 1) * h]);
        v.extend_from_slice(&self.agg[j * h..(j + 1) * h]);
        v
    }
}

/// Momentum buffer for SGD with coupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: Vec<T>,
    pub momentum: T,
    pub weight_decay: T,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(num_parameters: usize, momentum: T, weight_decay: T) -> Self {
        Self {
            velocity: vec![T::zero(); num_parameters],
            momentum,
            weight_decay,
        }
    }

    pub fn for_model(model: &RelationModel<T>, momentum: T, weight_decay: T) -> Self {
        Self::new(model.num_parameters(), momentum, weight_decay)
    }
}

/// `v <- momentum * v + g + weight_decay * theta; theta <- theta - lr * v`.
///
/// Leaves both model and state untouched on error.
pub fn sgd_step<T: Scalar>(
    model: &mut RelationModel<T>,
    state: &mut OptimizerState<T>,
    grad: &[T],
    lr: T,
) -> Result<()> {
    let n = model.params.len();
    if grad.len() != n {
        return Err(Error::dims(n, grad.len(), "gradient"));
    }
    if state.velocity.len() != n {
        return Err(Error::dims(n, state.velocity.len(), "optimizer velocity"));
    }
    if !(lr > T::zero()) || !lr.is_finite() {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} is {}", grad[i])));
    }
    for ((theta, v), &g) in model.params.iter_mut().zip(&mut state.velocity).zip(grad) {
        *v = state.momentum * *v + g + state.weight_decay * *theta;
        *theta -= lr * *v;
    }
    Ok(())
}

#[inline]
fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn softmax2<T: Scalar>(l: [T; 2]) -> ProbRow<T> {
    let m = l[0].max(l[1]);
    let e0 = (l[0] - m).exp();
    let e1 = (l[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

// FNV-1a over the f64 bit patterns.
fn fingerprint<T: Scalar>(params: &[T]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in params {
        h ^= v.as_f64().to_bits();
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
