//! Decoder-only causal transformer with hand-written gradients.
//!
//! Pre-norm blocks (attention, then a GELU MLP), learned absolute position
//! embeddings and an output head tied to the token embedding. Sequences in a
//! batch are packed row-wise, so no compute is spent on padding.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, stream};
use crate::tokenizer::{TokenId, EOS, PAD};

pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
fn lit<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("representable constant")
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Largest position index plus one.
    pub context: usize,
}

impl ModelConfig {
    pub fn toy(vocab: usize) -> Self {
        ModelConfig { vocab, d_model: 128, heads: 4, layers: 2, context: 128 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 || self.heads == 0 || self.context == 0 {
            return Err(Error::config("model", "sizes must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config("model.heads", format!("{} heads do not divide d_model {}", self.heads, self.d_model)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        (self.vocab + self.context) * d + self.layers * (12 * d * d + 9 * d) + 2 * d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    pub ln1_gain: Array1<F>,
    pub ln1_bias: Array1<F>,
    pub w_query: Array2<F>,
    pub w_key: Array2<F>,
    pub w_value: Array2<F>,
    pub w_out: Array2<F>,
    pub ln2_gain: Array1<F>,
    pub ln2_bias: Array1<F>,
    pub w_up: Array2<F>,
    pub b_up: Array1<F>,
    pub w_down: Array2<F>,
    pub b_down: Array1<F>,
}

/// All weights. Matrices map row vectors: `y = x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub tok_emb: Array2<F>,
    pub pos_emb: Array2<F>,
    pub layers: Vec<Layer<F>>,
    pub lnf_gain: Array1<F>,
    pub lnf_bias: Array1<F>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn zeros(config: ModelConfig) -> Self {
        let d = config.d_model;
        let v = |n| Array1::zeros(n);
        let m = |r, c| Array2::zeros((r, c));
        ModelParams {
            config,
            tok_emb: m(config.vocab, d),
            pos_emb: m(config.context, d),
            layers: (0..config.layers)
                .map(|_| Layer {
                    ln1_gain: v(d),
                    ln1_bias: v(d),
                    w_query: m(d, d),
                    w_key: m(d, d),
                    w_value: m(d, d),
                    w_out: m(d, d),
                    ln2_gain: v(d),
                    ln2_bias: v(d),
                    w_up: m(d, 4 * d),
                    b_up: v(4 * d),
                    w_down: m(4 * d, d),
                    b_down: v(d),
                })
                .collect(),
            lnf_gain: v(d),
            lnf_bias: v(d),
        }
    }

    /// Embeddings from Normal(0, `emb_std`); projection matrices from
    /// Normal(0, 1/sqrt(3 * fan_in)); unit layer-norm gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64, emb_std: f64) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = stream(seed, &[purpose::INIT]);
        let mut fill = |a: &mut Array2<F>, std: f64| -> Result<()> {
            let dist = Normal::new(0.0, std).map_err(|e| Error::config("init_std", e.to_string()))?;
            a.mapv_inplace(|_| lit(dist.sample(&mut rng)));
            Ok(())
        };
        let fan = |n: usize| 1.0 / (3.0 * n as f64).sqrt();
        let d = config.d_model;
        fill(&mut p.tok_emb, emb_std)?;
        fill(&mut p.pos_emb, emb_std)?;
        for l in &mut p.layers {
            l.ln1_gain.fill(F::one());
            l.ln2_gain.fill(F::one());
            for w in [&mut l.w_query, &mut l.w_key, &mut l.w_value, &mut l.w_out, &mut l.w_up] {
                fill(w, fan(d))?;
            }
            fill(&mut l.w_down, fan(4 * d))?;
        }
        p.lnf_gain.fill(F::one());
        Ok(p)
    }

    /// Parameter tensors in a fixed order, flattened.
    pub fn slices(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = vec![self.tok_emb.as_slice().unwrap(), self.pos_emb.as_slice().unwrap()];
        for l in &self.layers {
            out.extend([
                l.ln1_gain.as_slice().unwrap(),
                l.ln1_bias.as_slice().unwrap(),
                l.w_query.as_slice().unwrap(),
                l.w_key.as_slice().unwrap(),
                l.w_value.as_slice().unwrap(),
                l.w_out.as_slice().unwrap(),
                l.ln2_gain.as_slice().unwrap(),
                l.ln2_bias.as_slice().unwrap(),
                l.w_up.as_slice().unwrap(),
                l.b_up.as_slice().unwrap(),
                l.w_down.as_slice().unwrap(),
                l.b_down.as_slice().unwrap(),
            ]);
        }
        out.extend([self.lnf_gain.as_slice().unwrap(), self.lnf_bias.as_slice().unwrap()]);
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = vec![self.tok_emb.as_slice_mut().unwrap(), self.pos_emb.as_slice_mut().unwrap()];
        for l in &mut self.layers {
            out.extend([
                l.ln1_gain.as_slice_mut().unwrap(),
                l.ln1_bias.as_slice_mut().unwrap(),
                l.w_query.as_slice_mut().unwrap(),
                l.w_key.as_slice_mut().unwrap(),
                l.w_value.as_slice_mut().unwrap(),
                l.w_out.as_slice_mut().unwrap(),
                l.ln2_gain.as_slice_mut().unwrap(),
                l.ln2_bias.as_slice_mut().unwrap(),
                l.w_up.as_slice_mut().unwrap(),
                l.b_up.as_slice_mut().unwrap(),
                l.w_down.as_slice_mut().unwrap(),
                l.b_down.as_slice_mut().unwrap(),
            ]);
        }
        out.extend([self.lnf_gain.as_slice_mut().unwrap(), self.lnf_bias.as_slice_mut().unwrap()]);
        out
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<F> {
        self.slices().concat()
    }

    pub fn from_flat(config: ModelConfig, flat: &[F]) -> Result<Self> {
        let mut p = Self::zeros(config);
        if flat.len() != p.len() {
            return Err(Error::Dimension(format!("{} values for {} parameters", flat.len(), p.len())));
        }
        let mut rest = flat;
        for dst in p.slices_mut() {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        Ok(p)
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let flat: Vec<G> = self.to_flat().into_iter().map(|x| lit(x.to_f64().unwrap())).collect();
        ModelParams::from_flat(self.config, &flat).expect("same layout")
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

/// One packed sequence. `loss_mask[t]` says whether predicting `ids[t]`
/// from the tokens before it contributes to the loss; index 0 never does.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub ids: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl Sequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        let positions = (0..ids.len()).collect();
        Self::with_positions(ids, positions)
    }

    pub fn with_positions(ids: Vec<TokenId>, positions: Vec<usize>) -> Self {
        let loss_mask = ids.iter().enumerate().map(|(t, &id)| t > 0 && id != PAD).collect();
        Sequence { ids, positions, loss_mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn targets(&self) -> usize {
        self.loss_mask.iter().skip(1).filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Batch {
    pub seqs: Vec<Sequence>,
}

/// Rectangular view of a batch: rows padded with `PAD` to the longest member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    pub ids: Array2<TokenId>,
    pub positions: Array2<usize>,
    pub loss_mask: Array2<bool>,
    pub valid: Array2<bool>,
}

impl Batch {
    pub fn new(seqs: Vec<Sequence>) -> Self {
        Batch { seqs }
    }

    pub fn rows(&self) -> usize {
        self.seqs.iter().map(Sequence::len).sum()
    }

    pub fn targets(&self) -> usize {
        self.seqs.iter().map(Sequence::targets).sum()
    }

    pub fn padded(&self) -> PaddedBatch {
        let width = self.seqs.iter().map(Sequence::len).max().unwrap_or(0);
        let shape = (self.seqs.len(), width);
        let mut out = PaddedBatch {
            ids: Array2::from_elem(shape, PAD),
            positions: Array2::zeros(shape),
            loss_mask: Array2::from_elem(shape, false),
            valid: Array2::from_elem(shape, false),
        };
        for (b, seq) in self.seqs.iter().enumerate() {
            for t in 0..seq.len() {
                out.ids[(b, t)] = seq.ids[t];
                out.positions[(b, t)] = seq.positions[t];
                out.loss_mask[(b, t)] = seq.loss_mask[t];
                out.valid[(b, t)] = true;
            }
        }
        out
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        for seq in &self.seqs {
            if seq.positions.len() != seq.len() || seq.loss_mask.len() != seq.len() {
                return Err(Error::Dimension("ids, positions and loss mask differ in length".into()));
            }
            if let Some(&id) = seq.ids.iter().find(|&&id| id as usize >= cfg.vocab) {
                return Err(Error::Dimension(format!("token id {id} outside vocabulary of {}", cfg.vocab)));
            }
            if let Some(&p) = seq.positions.iter().find(|&&p| p >= cfg.context) {
                return Err(Error::Dimension(format!("position {p} outside context of {}", cfg.context)));
            }
        }
        Ok(())
    }
}

struct LnCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

fn layer_norm<F: Scalar>(x: &Array2<F>, gain: &Array1<F>, bias: &Array1<F>) -> (Array2<F>, LnCache<F>) {
    let (n, d) = x.dim();
    let inv_d = F::one() / lit(d as f64);
    let eps = lit(LN_EPS);
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    let mut out = Array2::zeros((n, d));
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[(r, c)] = h;
            out[(r, c)] = h * gain[c] + bias[c];
        }
    }
    (out, LnCache { xhat, rstd })
}

/// Returns the input gradient and accumulates gain/bias gradients.
fn layer_norm_back<F: Scalar>(
    dout: &Array2<F>,
    cache: &LnCache<F>,
    gain: &Array1<F>,
    dgain: &mut Array1<F>,
    dbias: &mut Array1<F>,
) -> Array2<F> {
    let (n, d) = dout.dim();
    let inv_d = F::one() / lit(d as f64);
    let mut dx = Array2::zeros((n, d));
    let mut dxhat = vec![F::zero(); d];
    for r in 0..n {
        let (mut m1, mut m2) = (F::zero(), F::zero());
        for c in 0..d {
            let g = dout[(r, c)];
            let xh = cache.xhat[(r, c)];
            dgain[c] += g * xh;
            dbias[c] += g;
            dxhat[c] = g * gain[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xh;
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let rs = cache.rstd[r];
        for c in 0..d {
            dx[(r, c)] = rs * (dxhat[c] - m1 - cache.xhat[(r, c)] * m2);
        }
    }
    dx
}

/// tanh of the GELU approximation's inner argument. Written via `exp`,
/// which is several times cheaper than `tanh` in libm.
fn gelu_tanh<F: Scalar>(u: F) -> F {
    let c: F = lit(0.797_884_560_802_865_4);
    let a: F = lit(0.044715);
    let two: F = lit(2.0);
    let z = c * (u + a * u * u * u);
    F::one() - two / ((two * z).exp() + F::one())
}

fn gelu<F: Scalar>(u: F, t: F) -> F {
    lit::<F>(0.5) * u * (F::one() + t)
}

fn gelu_grad<F: Scalar>(u: F, t: F) -> F {
    let c: F = lit(0.797_884_560_802_865_4);
    let a3: F = lit(3.0 * 0.044715);
    let half: F = lit(0.5);
    half * (F::one() + t) + half * u * (F::one() - t * t) * c * (F::one() + a3 * u * u)
}

struct LayerCache<F> {
    ln1: LnCache<F>,
    h1: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Attention weights per (sequence, head), sequence-major.
    probs: Vec<Array2<F>>,
    att: Array2<F>,
    ln2: LnCache<F>,
    h2: Array2<F>,
    u: Array2<F>,
    tanh: Array2<F>,
    g: Array2<F>,
}

struct Trace<F> {
    spans: Vec<(usize, usize)>,
    layers: Vec<LayerCache<F>>,
    lnf: LnCache<F>,
    out: Array2<F>,
}

fn spans(batch: &Batch) -> Vec<(usize, usize)> {
    let mut off = 0;
    batch
        .seqs
        .iter()
        .map(|s| {
            let span = (off, s.len());
            off += s.len();
            span
        })
        .collect()
}

fn mat_mul_into<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>, c: &mut Array2<F>, accumulate: bool) {
    let beta = if accumulate { F::one() } else { F::zero() };
    general_mat_mul(F::one(), &a, &b, beta, c);
}

/// Runs the blocks and final norm; returns the normalized hidden states.
fn trace<F: Scalar>(p: &ModelParams<F>, batch: &Batch) -> Trace<F> {
    let cfg = &p.config;
    let (d, heads, dh) = (cfg.d_model, cfg.heads, cfg.head_dim());
    let spans = spans(batch);
    let n = batch.rows();
    let mut x = Array2::<F>::zeros((n, d));
    let mut r = 0;
    for seq in &batch.seqs {
        for (&id, &pos) in seq.ids.iter().zip(&seq.positions) {
            let mut row = x.row_mut(r);
            row.assign(&p.tok_emb.row(id as usize));
            row += &p.pos_emb.row(pos);
            r += 1;
        }
    }
    let scale: F = F::one() / lit::<F>(dh as f64).sqrt();
    let mut layers = Vec::with_capacity(p.layers.len());
    for l in &p.layers {
        let (h1, ln1) = layer_norm(&x, &l.ln1_gain, &l.ln1_bias);
        let q = h1.dot(&l.w_query);
        let k = h1.dot(&l.w_key);
        let v = h1.dot(&l.w_value);
        let mut att = Array2::<F>::zeros((n, d));
        let mut probs = Vec::with_capacity(spans.len() * heads);
        for &(o, t) in &spans {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(s![o..o + t, cols.clone()]);
                let kh = k.slice(s![o..o + t, cols.clone()]);
                let vh = v.slice(s![o..o + t, cols.clone()]);
                let mut sc = qh.dot(&kh.t());
                for i in 0..t {
                    let mut row = sc.row_mut(i);
                    let mut mx = F::neg_infinity();
                    for j in 0..=i {
                        row[j] *= scale;
                        mx = mx.max(row[j]);
                    }
                    let mut z = F::zero();
                    for j in 0..=i {
                        row[j] = (row[j] - mx).exp();
                        z += row[j];
                    }
                    for j in 0..=i {
                        row[j] /= z;
                    }
                    for j in i + 1..t {
                        row[j] = F::zero();
                    }
                }
                let mut dst = att.slice_mut(s![o..o + t, cols]);
                general_mat_mul(F::one(), &sc, &vh, F::zero(), &mut dst);
                probs.push(sc);
            }
        }
        mat_mul_into(att.view(), l.w_out.view(), &mut x, true);
        let (h2, ln2) = layer_norm(&x, &l.ln2_gain, &l.ln2_bias);
        let mut u = h2.dot(&l.w_up);
        u += &l.b_up;
        let tanh = u.mapv(gelu_tanh);
        let mut g = u.clone();
        Zip::from(&mut g).and(&tanh).for_each(|g, &t| *g = gelu(*g, t));
        mat_mul_into(g.view(), l.w_down.view(), &mut x, true);
        x += &l.b_down;
        layers.push(LayerCache { ln1, h1, q, k, v, probs, att, ln2, h2, u, tanh, g });
    }
    let (out, lnf) = layer_norm(&x, &p.lnf_gain, &p.lnf_bias);
    Trace { spans, layers, lnf, out }
}

/// Logits per sequence, each `[len × vocab]`.
pub fn forward<F: Scalar>(p: &ModelParams<F>, batch: &Batch) -> Result<Vec<Array2<F>>> {
    batch.check(&p.config)?;
    let tr = trace(p, batch);
    let logits = tr.out.dot(&p.tok_emb.t());
    Ok(tr
        .spans
        .iter()
        .map(|&(o, t)| logits.slice(s![o..o + t, ..]).to_owned())
        .collect())
}

/// Loss summary. `nll[b][t]` is the negative log-likelihood of target
/// `ids[t]` of sequence `b`, or zero where the mask excludes it.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport<F> {
    pub mean: F,
    pub targets: usize,
    pub nll: Vec<Vec<F>>,
}

/// Per-row log-softmax pieces: NLL for masked rows, and optionally the
/// gradient of the mean loss with respect to the logits (in place).
fn softmax_xent<F: Scalar>(logits: &mut Array2<F>, batch: &Batch, spans: &[(usize, usize)], want_grad: bool) -> LossReport<F> {
    let total = batch.targets();
    let inv = if total > 0 { F::one() / lit(total as f64) } else { F::zero() };
    let mut nll = Vec::with_capacity(batch.seqs.len());
    let mut sum = F::zero();
    for (seq, &(o, t)) in batch.seqs.iter().zip(spans) {
        let mut per = vec![F::zero(); t];
        for i in 0..t {
            let mut row = logits.row_mut(o + i);
            let target = (i + 1 < t && seq.loss_mask[i + 1]).then(|| seq.ids[i + 1] as usize);
            match target {
                None => {
                    if want_grad {
                        row.fill(F::zero());
                    }
                }
                Some(tgt) => {
                    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                    let shifted_target = row[tgt] - mx;
                    let z = if want_grad {
                        row.mapv_inplace(|v| (v - mx).exp());
                        row.iter().copied().sum::<F>()
                    } else {
                        row.iter().map(|&v| (v - mx).exp()).sum::<F>()
                    };
                    let loss = z.ln() - shifted_target;
                    per[i + 1] = loss;
                    sum += loss;
                    if want_grad {
                        let k = inv / z;
                        row.mapv_inplace(|e| e * k);
                        row[tgt] -= inv;
                    }
                }
            }
        }
        nll.push(per);
    }
    LossReport { mean: sum * inv, targets: total, nll }
}

/// Mean next-token negative log-likelihood over every unmasked target. For
/// a permuted sample this is the chunk-ordered objective: each token is
/// conditioned on all preceding chunks and its preceding in-chunk tokens.
pub fn spt_loss<F: Scalar>(p: &ModelParams<F>, batch: &Batch) -> Result<F> {
    Ok(loss_report(p, batch)?.mean)
}

pub fn loss_report<F: Scalar>(p: &ModelParams<F>, batch: &Batch) -> Result<LossReport<F>> {
    batch.check(&p.config)?;
    let tr = trace(p, batch);
    let mut logits = tr.out.dot(&p.tok_emb.t());
    Ok(softmax_xent(&mut logits, batch, &tr.spans, false))
}

/// Loss and its gradient with respect to every parameter.
pub fn backward<F: Scalar>(p: &ModelParams<F>, batch: &Batch) -> Result<(LossReport<F>, ModelParams<F>)> {
    batch.check(&p.config)?;
    let cfg = &p.config;
    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let tr = trace(p, batch);
    let mut grad = ModelParams::zeros(*cfg);

    let mut dlogits = tr.out.dot(&p.tok_emb.t());
    let report = softmax_xent(&mut dlogits, batch, &tr.spans, true);
    if report.targets == 0 {
        return Ok((report, grad));
    }
    // Tied head: logits = out · Eᵀ.
    mat_mul_into(dlogits.t(), tr.out.view(), &mut grad.tok_emb, true);
    let dout = dlogits.dot(&p.tok_emb);
    let mut dx = layer_norm_back(&dout, &tr.lnf, &p.lnf_gain, &mut grad.lnf_gain, &mut grad.lnf_bias);

    let scale: F = F::one() / lit::<F>(dh as f64).sqrt();
    for (li, l) in p.layers.iter().enumerate().rev() {
        let c = &tr.layers[li];
        let gl = &mut grad.layers[li];

        // MLP branch.
        mat_mul_into(c.g.t(), dx.view(), &mut gl.w_down, true);
        gl.b_down += &dx.sum_axis(Axis(0));
        let mut du = dx.dot(&l.w_down.t());
        Zip::from(&mut du).and(&c.u).and(&c.tanh).for_each(|d, &u, &t| *d *= gelu_grad(u, t));
        mat_mul_into(c.h2.t(), du.view(), &mut gl.w_up, true);
        gl.b_up += &du.sum_axis(Axis(0));
        let dh2 = du.dot(&l.w_up.t());
        dx += &layer_norm_back(&dh2, &c.ln2, &l.ln2_gain, &mut gl.ln2_gain, &mut gl.ln2_bias);

        // Attention branch.
        mat_mul_into(c.att.t(), dx.view(), &mut gl.w_out, true);
        let datt = dx.dot(&l.w_out.t());
        let mut dq = Array2::<F>::zeros(c.q.dim());
        let mut dk = Array2::<F>::zeros(c.k.dim());
        let mut dv = Array2::<F>::zeros(c.v.dim());
        let mut pi = 0;
        for &(o, t) in &tr.spans {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let probs = &c.probs[pi];
                pi += 1;
                let da = datt.slice(s![o..o + t, cols.clone()]);
                let qh = c.q.slice(s![o..o + t, cols.clone()]);
                let kh = c.k.slice(s![o..o + t, cols.clone()]);
                let vh = c.v.slice(s![o..o + t, cols.clone()]);
                let mut dp = da.dot(&vh.t());
                general_mat_mul(F::one(), &probs.t(), &da, F::zero(), &mut dv.slice_mut(s![o..o + t, cols.clone()]));
                for i in 0..t {
                    let mut row = dp.row_mut(i);
                    let pr = probs.row(i);
                    let dot = (0..=i).map(|j| pr[j] * row[j]).sum::<F>();
                    for j in 0..=i {
                        row[j] = pr[j] * (row[j] - dot) * scale;
                    }
                    for j in i + 1..t {
                        row[j] = F::zero();
                    }
                }
                general_mat_mul(F::one(), &dp, &kh, F::zero(), &mut dq.slice_mut(s![o..o + t, cols.clone()]));
                general_mat_mul(F::one(), &dp.t(), &qh, F::zero(), &mut dk.slice_mut(s![o..o + t, cols]));
            }
        }
        mat_mul_into(c.h1.t(), dq.view(), &mut gl.w_query, true);
        mat_mul_into(c.h1.t(), dk.view(), &mut gl.w_key, true);
        mat_mul_into(c.h1.t(), dv.view(), &mut gl.w_value, true);
        let mut dh1 = dq.dot(&l.w_query.t());
        mat_mul_into(dk.view(), l.w_key.t(), &mut dh1, true);
        mat_mul_into(dv.view(), l.w_value.t(), &mut dh1, true);
        dx += &layer_norm_back(&dh1, &c.ln1, &l.ln1_gain, &mut gl.ln1_gain, &mut gl.ln1_bias);
    }

    let mut r = 0;
    for seq in &batch.seqs {
        for (&id, &pos) in seq.ids.iter().zip(&seq.positions) {
            let row = dx.row(r);
            let mut te = grad.tok_emb.row_mut(id as usize);
            te += &row;
            let mut pe = grad.pos_emb.row_mut(pos);
            pe += &row;
            r += 1;
        }
    }
    Ok((report, grad))
}

/// Greedy continuation of `prompt`. Ties go to the lowest token id;
/// decoding stops after EOS (not returned), after `max_new` tokens, or when
/// the context window is full.
pub fn generate_greedy<F: Scalar>(p: &ModelParams<F>, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
    let limit = p.config.context;
    if prompt.len() >= limit {
        return Err(Error::ContextOverflow { len: prompt.len(), max: limit });
    }
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && ids.len() < limit {
        let batch = Batch::new(vec![Sequence::new(ids.clone())]);
        batch.check(&p.config)?;
        let tr = trace(p, &batch);
        let last = tr.out.row(ids.len() - 1);
        let logits = p.tok_emb.dot(&last);
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        let next = best as TokenId;
        if next == EOS {
            break;
        }
        out.push(next);
        ids.push(next);
    }
    Ok(out)
}

const MAGIC: &[u8; 8] = b"SPTCKPT1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub vocab_hash: String,
    pub seed: u64,
    pub epoch: usize,
}

/// Magic, little-endian u32 header length, JSON header, then every
/// parameter as a little-endian f32 in `slices()` order.
pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, params: &ModelParams<f32>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let json = serde_json::to_vec(header)?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for s in params.slices() {
        for x in s {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelParams<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    header.model.validate()?;
    let data = &bytes[12 + hlen..];
    if data.len() != header.model.param_count() * 4 {
        return Err(Error::Checkpoint(format!(
            "{} parameter bytes, expected {}",
            data.len(),
            header.model.param_count() * 4
        )));
    }
    let flat: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let params = ModelParams::from_flat(header.model, &flat)?;
    Ok((header, params))
}

/// Random parameters for tests and benchmarks: all weights, gains and
/// biases drawn from Normal(0, `std`).
pub fn random_params<F: Scalar, R: Rng>(config: ModelConfig, std: f64, rng: &mut R) -> ModelParams<F> {
    let mut p = ModelParams::zeros(config);
    let normal = Normal::new(0.0, std).expect("finite std");
    for s in p.slices_mut() {
        for x in s {
            *x = lit(normal.sample(rng));
        }
    }
    p
}
