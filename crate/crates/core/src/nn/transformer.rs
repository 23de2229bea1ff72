//! Pre-norm decoder-only transformer with learned positional embeddings.
//!
//! The forward pass records a [`Tape`] of every intermediate needed by the
//! hand-written backward pass. Logits are only materialised for the positions
//! a caller asks for, since training and inference touch few of them.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::kernels::{axpy, dot, matmul_acc, matmul_nt, outer_acc, softmax_in_place};
use super::lora::LoraAdapter;
use super::tensor::Tensor;
use crate::error::{bail, Error, Result};
use crate::real::Real;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl TransformerConfig {
    /// 2 layers, 4 heads, d_model 64, d_ff 256, 4096 positions.
    pub fn desk_default(vocab_size: usize) -> Self {
        Self { n_layers: 2, n_heads: 4, d_model: 64, d_ff: 256, vocab_size, max_positions: 4096 }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [self.n_layers, self.n_heads, self.d_model, self.d_ff, self.vocab_size, self.max_positions];
        if fields.contains(&0) {
            bail!(Argument, "transformer dimensions must all be at least 1: {self:?}");
        }
        if self.d_model % self.n_heads != 0 {
            bail!(Argument, "d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads);
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// The projection matrices that can carry a low-rank adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matrix {
    Query,
    Key,
    Value,
    Output,
    MlpUp,
    MlpDown,
}

impl Matrix {
    pub const ALL: [Matrix; 6] =
        [Matrix::Query, Matrix::Key, Matrix::Value, Matrix::Output, Matrix::MlpUp, Matrix::MlpDown];

    /// `(d_out, d_in)`
    pub fn shape(self, c: &TransformerConfig) -> (usize, usize) {
        match self {
            Matrix::MlpUp => (c.d_ff, c.d_model),
            Matrix::MlpDown => (c.d_model, c.d_ff),
            _ => (c.d_model, c.d_model),
        }
    }

    pub(crate) fn block_slot(self) -> usize {
        match self {
            Matrix::Query => WQ,
            Matrix::Key => WK,
            Matrix::Value => WV,
            Matrix::Output => WO,
            Matrix::MlpUp => W1,
            Matrix::MlpDown => W2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Matrix::Query => "wq",
            Matrix::Key => "wk",
            Matrix::Value => "wv",
            Matrix::Output => "wo",
            Matrix::MlpUp => "w1",
            Matrix::MlpDown => "w2",
        }
    }
}

const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const WK: usize = 3;
const WV: usize = 4;
const WO: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const W1: usize = 8;
const B1: usize = 9;
const W2: usize = 10;
const B2: usize = 11;
const PER_BLOCK: usize = 12;
const BLOCK_NAMES: [&str; PER_BLOCK] = ["ln1.g", "ln1.b", "wq", "wk", "wv", "wo", "ln2.g", "ln2.b", "w1", "b1", "w2", "b2"];

const TOK: usize = 0;
const POS: usize = 1;
const LN_EPS: f64 = 1e-5;

#[inline]
pub(crate) fn block_index(layer: usize, slot: usize) -> usize {
    2 + layer * PER_BLOCK + slot
}

/// Parameter names in storage order.
pub fn param_names(c: &TransformerConfig) -> Vec<String> {
    let mut names = vec![String::from("tok_emb"), String::from("pos_emb")];
    for l in 0..c.n_layers {
        for n in BLOCK_NAMES {
            names.push(format!("blocks.{l}.{n}"));
        }
    }
    names.extend(["ln_f.g", "ln_f.b", "lm_head"].map(String::from));
    names
}

fn param_shapes(c: &TransformerConfig) -> Vec<Vec<usize>> {
    let (d, f) = (c.d_model, c.d_ff);
    let mut shapes = vec![vec![c.vocab_size, d], vec![c.max_positions, d]];
    for _ in 0..c.n_layers {
        shapes.extend([
            vec![d],
            vec![d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![f, d],
            vec![f],
            vec![d, f],
            vec![d],
        ]);
    }
    shapes.extend([vec![d], vec![d], vec![c.vocab_size, d]]);
    shapes
}

/// Dense decoder parameters Φ.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<T> {
    config: TransformerConfig,
    params: Vec<Tensor<T>>,
}

/// Sinusoidal table used to initialise the (still learned) positional embeddings,
/// so relative offsets are linearly readable from the first step.
fn sinusoid<T: Real>(n: usize, d: usize, amplitude: f64) -> Tensor<T> {
    let mut data = Vec::with_capacity(n * d);
    for pos in 0..n {
        for j in 0..d {
            let freq = Float::powf(10_000.0f64, -((j / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            let v = if j % 2 == 0 { Float::sin(angle) } else { Float::cos(angle) };
            data.push(T::of(amplitude * v));
        }
    }
    Tensor::new(vec![n, d], data).expect("shape matches data")
}

impl<T: Real> Transformer<T> {
    /// GPT-style initialisation: N(0, 0.02) embeddings, N(0, 1/d_in) projections with
    /// residual outputs scaled by `1/sqrt(2 * n_layers)`, unit LayerNorm gains.
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let names = param_names(&config);
        let residual = 1.0 / Float::sqrt((2 * config.n_layers) as f64);
        let params = param_shapes(&config)
            .into_iter()
            .zip(&names)
            .map(|(shape, name)| {
                if name.ends_with(".g") {
                    Tensor::filled(&shape, T::one())
                } else if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else if name == "pos_emb" {
                    sinusoid(shape[0], shape[1], 0.02)
                } else if name == "tok_emb" {
                    Tensor::randn(&shape, 0.02, &mut r)
                } else {
                    let fan_in = shape[1] as f64;
                    let scale = if name.ends_with(".wo") || name.ends_with(".w2") { residual } else { 1.0 };
                    Tensor::randn(&shape, scale / Float::sqrt(fan_in), &mut r)
                }
            })
            .collect();
        Ok(Self { config, params })
    }

    /// All parameters zero, including LayerNorm gains.
    pub fn zeros(config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let params = param_shapes(&config).iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self { config, params })
    }

    /// Rebuilds a model from named tensors in [`param_names`] order.
    pub fn from_params(config: TransformerConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        if params.len() != shapes.len() {
            bail!(Argument, "expected {} parameter tensors, got {}", shapes.len(), params.len());
        }
        for ((p, s), name) in params.iter().zip(&shapes).zip(param_names(&config)) {
            if p.shape() != s.as_slice() {
                bail!(Argument, "parameter {name} has shape {:?}, expected {s:?}", p.shape());
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn matrix(&self, layer: usize, m: Matrix) -> &Tensor<T> {
        &self.params[block_index(layer, m.block_slot())]
    }

    pub(crate) fn matrix_mut(&mut self, layer: usize, m: Matrix) -> &mut Tensor<T> {
        &mut self.params[block_index(layer, m.block_slot())]
    }

    pub fn cast<U: Real>(&self) -> Transformer<U> {
        Transformer { config: self.config, params: self.params.iter().map(Tensor::cast).collect() }
    }

    /// Full logits, `len(tokens) × vocab_size`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        forward_logits(self, &[], T::zero(), tokens)
    }

    pub fn record(&self, tokens: &[u32], tape: &mut Tape<T>) -> Result<()> {
        record(self, &[], T::zero(), tokens, tape)
    }

    /// Logit rows for `positions` (row-major, `positions.len() × vocab_size`).
    pub fn logits_at(&self, tape: &Tape<T>, positions: &[usize]) -> Result<Vec<T>> {
        logits_at(self, tape, positions)
    }

    /// Accumulates gradients of every parameter given upstream logit gradients.
    pub fn backward(&mut self, tape: &Tape<T>, positions: &[usize], dlogits: &[T]) -> Result<()> {
        let mut grads: Vec<Vec<T>> = self.params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        backward(self, &[], T::zero(), tape, positions, dlogits, Some(&mut grads), None)?;
        for (p, g) in self.params.iter_mut().zip(&grads) {
            p.accumulate_grad(g);
        }
        Ok(())
    }
}

/// Intermediates of one forward pass, consumed by the backward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    tokens: Vec<u32>,
    layers: Vec<LayerTape<T>>,
    xhat_f: Vec<T>,
    rstd_f: Vec<T>,
    hidden: Vec<T>,
}

#[derive(Clone, Debug, Default)]
struct LayerTape<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Per head, packed lower-triangular attention weights.
    probs: Vec<Vec<T>>,
    att: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    h2: Vec<T>,
    z: Vec<T>,
    act: Vec<T>,
    /// `x · Aᵀ` for each adapted matrix, indexed like [`Matrix::ALL`].
    lora_u: [Option<Vec<T>>; 6],
}

impl<T> Tape<T> {
    pub fn new() -> Self {
        Self { tokens: Vec::new(), layers: Vec::new(), xhat_f: Vec::new(), rstd_f: Vec::new(), hidden: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Final normalised hidden states, `len × d_model`.
    pub fn hidden(&self) -> &[T] {
        &self.hidden
    }
}

fn matrix_index(m: Matrix) -> usize {
    Matrix::ALL.iter().position(|x| *x == m).unwrap()
}

fn find_adapter<T>(adapters: &[LoraAdapter<T>], layer: usize, m: Matrix) -> Option<(usize, &LoraAdapter<T>)> {
    adapters.iter().enumerate().find(|(_, a)| a.layer == layer && a.matrix == m)
}

fn check_tokens<T: Real>(model: &Transformer<T>, tokens: &[u32]) -> Result<()> {
    let c = &model.config;
    if tokens.is_empty() {
        bail!(Argument, "empty token sequence");
    }
    if tokens.len() > c.max_positions {
        bail!(Argument, "sequence of {} tokens exceeds max_positions {}", tokens.len(), c.max_positions);
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
        bail!(Argument, "token id {bad} outside vocabulary of {}", c.vocab_size);
    }
    Ok(())
}

fn layer_norm<T: Real>(x: &[T], d: usize, g: &[T], b: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = x.len() / d;
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n];
    let inv_d = T::one() / T::of(d as f64);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + T::of(LN_EPS)).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            xhat[i * d + j] = xh;
            out[i * d + j] = g[j] * xh + b[j];
        }
    }
    (out, xhat, rstd)
}

/// Returns dx; accumulates dg/db when given.
fn layer_norm_back<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    g: &[T],
    d: usize,
    mut dg: Option<(&mut [T], &mut [T])>,
) -> Vec<T> {
    let n = dy.len() / d;
    let mut dx = vec![T::zero(); dy.len()];
    let inv_d = T::one() / T::of(d as f64);
    for i in 0..n {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &xhat[i * d..(i + 1) * d];
        if let Some((dgv, dbv)) = dg.as_mut() {
            for j in 0..d {
                dgv[j] += dyr[j] * xh[j];
                dbv[j] += dyr[j];
            }
        }
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh *= inv_d;
        mean_dxh_xh *= inv_d;
        for j in 0..d {
            dx[i * d + j] = rstd[i] * (dyr[j] * g[j] - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Real>(z: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * z * (T::one() + (c * (z + a * z * z * z)).tanh())
}

#[inline]
fn gelu_grad<T: Real>(z: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (z + a * z * z * z)).tanh();
    half * (T::one() + t) + half * z * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * z * z)
}

/// `y = x Wᵀ (+ scale · (x Aᵀ) Bᵀ)`; also returns `x Aᵀ` when adapted.
fn linear<T: Real>(
    x: &[T],
    d_in: usize,
    w: &[T],
    d_out: usize,
    adapter: Option<&LoraAdapter<T>>,
    scale: T,
) -> (Vec<T>, Option<Vec<T>>) {
    let n = x.len() / d_in;
    let mut y = vec![T::zero(); n * d_out];
    matmul_nt(x, d_in, w, d_out, &mut y);
    let u = adapter.map(|a| {
        let r = a.rank();
        let mut u = vec![T::zero(); n * r];
        matmul_nt(x, d_in, a.a.data(), r, &mut u);
        let mut delta = vec![T::zero(); n * d_out];
        matmul_nt(&u, r, a.b.data(), d_out, &mut delta);
        axpy(scale, &delta, &mut y);
        u
    });
    (y, u)
}

#[allow(clippy::too_many_arguments)]
fn linear_back<T: Real>(
    x: &[T],
    d_in: usize,
    w: &[T],
    d_out: usize,
    dy: &[T],
    dx: &mut [T],
    dw: Option<&mut [T]>,
    adapter: Option<(&LoraAdapter<T>, &[T], T, Option<&mut (Vec<T>, Vec<T>)>)>,
) {
    matmul_acc(dy, d_out, w, d_in, dx);
    if let Some(dw) = dw {
        outer_acc(dy, d_out, x, d_in, dw);
    }
    if let Some((a, u, scale, grads)) = adapter {
        let r = a.rank();
        let n = x.len() / d_in;
        // g = scale · dy B  (n × r)
        let mut g = vec![T::zero(); n * r];
        matmul_acc(dy, d_out, a.b.data(), r, &mut g);
        g.iter_mut().for_each(|v| *v *= scale);
        matmul_acc(&g, r, a.a.data(), d_in, dx);
        if let Some((da, db)) = grads {
            outer_acc(&g, r, x, d_in, da);
            let sdy: Vec<T> = dy.iter().map(|&v| v * scale).collect();
            outer_acc(&sdy, d_out, u, r, db);
        }
    }
}

fn attention<T: Real>(q: &[T], k: &[T], v: &[T], n: usize, c: &TransformerConfig) -> (Vec<T>, Vec<Vec<T>>) {
    let d = c.d_model;
    let dh = c.d_head();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut att = vec![T::zero(); n * d];
    let mut probs = Vec::with_capacity(c.n_heads);
    for h in 0..c.n_heads {
        let off = h * dh;
        let mut packed = vec![T::zero(); n * (n + 1) / 2];
        for i in 0..n {
            let row = &mut packed[i * (i + 1) / 2..i * (i + 1) / 2 + i + 1];
            let qi = &q[i * d + off..i * d + off + dh];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
            }
            softmax_in_place(row);
            let out = &mut att[i * d + off..i * d + off + dh];
            for (j, &p) in row.iter().enumerate() {
                axpy(p, &v[j * d + off..j * d + off + dh], out);
            }
        }
        probs.push(packed);
    }
    (att, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_back<T: Real>(
    datt: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[Vec<T>],
    n: usize,
    c: &TransformerConfig,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = c.d_model;
    let dh = c.d_head();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let mut ds = vec![T::zero(); n];
    for (h, packed) in probs.iter().enumerate() {
        let off = h * dh;
        for i in 0..n {
            let row = &packed[i * (i + 1) / 2..i * (i + 1) / 2 + i + 1];
            let doi = &datt[i * d + off..i * d + off + dh];
            let mut weighted = T::zero();
            for (j, &p) in row.iter().enumerate() {
                let dp = dot(doi, &v[j * d + off..j * d + off + dh]);
                ds[j] = dp;
                weighted += p * dp;
                axpy(p, doi, &mut dv[j * d + off..j * d + off + dh]);
            }
            let qi_start = i * d + off;
            for (j, &p) in row.iter().enumerate() {
                let s = p * (ds[j] - weighted) * scale;
                if s != T::zero() {
                    axpy(s, &k[j * d + off..j * d + off + dh], &mut dq[qi_start..qi_start + dh]);
                    let (qi, dkj) = (&q[qi_start..qi_start + dh], &mut dk[j * d + off..j * d + off + dh]);
                    axpy(s, qi, dkj);
                }
            }
        }
    }
    (dq, dk, dv)
}

pub(crate) fn record<T: Real>(
    model: &Transformer<T>,
    adapters: &[LoraAdapter<T>],
    scale: T,
    tokens: &[u32],
    tape: &mut Tape<T>,
) -> Result<()> {
    check_tokens(model, tokens)?;
    let c = &model.config;
    let (n, d, f) = (tokens.len(), c.d_model, c.d_ff);
    let p = &model.params;

    let mut x = vec![T::zero(); n * d];
    for (i, &t) in tokens.iter().enumerate() {
        let row = &mut x[i * d..(i + 1) * d];
        row.copy_from_slice(&p[TOK].data()[t as usize * d..(t as usize + 1) * d]);
        axpy(T::one(), &p[POS].data()[i * d..(i + 1) * d], row);
    }

    tape.tokens.clear();
    tape.tokens.extend_from_slice(tokens);
    tape.layers.clear();
    for l in 0..c.n_layers {
        let w = |slot| p[block_index(l, slot)].data();
        let ad = |m| find_adapter(adapters, l, m).map(|(_, a)| a);
        let mut lt = LayerTape::default();

        let (h1, xhat1, rstd1) = layer_norm(&x, d, w(LN1_G), w(LN1_B));
        let (q, uq) = linear(&h1, d, w(WQ), d, ad(Matrix::Query), scale);
        let (k, uk) = linear(&h1, d, w(WK), d, ad(Matrix::Key), scale);
        let (v, uv) = linear(&h1, d, w(WV), d, ad(Matrix::Value), scale);
        let (att, probs) = attention(&q, &k, &v, n, c);
        let (o, uo) = linear(&att, d, w(WO), d, ad(Matrix::Output), scale);
        axpy(T::one(), &o, &mut x);

        let (h2, xhat2, rstd2) = layer_norm(&x, d, w(LN2_G), w(LN2_B));
        let (mut z, u1) = linear(&h2, d, w(W1), f, ad(Matrix::MlpUp), scale);
        for row in z.chunks_exact_mut(f) {
            axpy(T::one(), w(B1), row);
        }
        let act: Vec<T> = z.iter().map(|&v| gelu(v)).collect();
        let (mut out, u2) = linear(&act, f, w(W2), d, ad(Matrix::MlpDown), scale);
        for row in out.chunks_exact_mut(d) {
            axpy(T::one(), w(B2), row);
        }
        axpy(T::one(), &out, &mut x);

        lt.xhat1 = xhat1;
        lt.rstd1 = rstd1;
        lt.h1 = h1;
        lt.q = q;
        lt.k = k;
        lt.v = v;
        lt.probs = probs;
        lt.att = att;
        lt.xhat2 = xhat2;
        lt.rstd2 = rstd2;
        lt.h2 = h2;
        lt.z = z;
        lt.act = act;
        lt.lora_u = [uq, uk, uv, uo, u1, u2];
        tape.layers.push(lt);
    }
    let base = block_index(c.n_layers, 0);
    let (hidden, xhat_f, rstd_f) = layer_norm(&x, d, p[base].data(), p[base + 1].data());
    tape.hidden = hidden;
    tape.xhat_f = xhat_f;
    tape.rstd_f = rstd_f;
    Ok(())
}

pub(crate) fn logits_at<T: Real>(model: &Transformer<T>, tape: &Tape<T>, positions: &[usize]) -> Result<Vec<T>> {
    let c = &model.config;
    let n = tape.tokens.len();
    if tape.is_empty() {
        bail!(State, "no forward pass recorded");
    }
    let head = model.params[block_index(c.n_layers, 2)].data();
    let d = c.d_model;
    let mut out = vec![T::zero(); positions.len() * c.vocab_size];
    for (r, &pos) in positions.iter().enumerate() {
        if pos >= n {
            bail!(Argument, "position {pos} outside sequence of {n}");
        }
        matmul_nt(&tape.hidden[pos * d..(pos + 1) * d], d, head, c.vocab_size, &mut out[r * c.vocab_size..(r + 1) * c.vocab_size]);
    }
    Ok(out)
}

pub(crate) fn forward_logits<T: Real>(
    model: &Transformer<T>,
    adapters: &[LoraAdapter<T>],
    scale: T,
    tokens: &[u32],
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    record(model, adapters, scale, tokens, &mut tape)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let data = logits_at(model, &tape, &positions)?;
    Tensor::new(vec![tokens.len(), model.config.vocab_size], data)
}

/// Back-propagates logit gradients at `positions`. Base gradients are computed
/// only when `base_grads` is given, adapter gradients only when `adapter_grads` is.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    model: &Transformer<T>,
    adapters: &[LoraAdapter<T>],
    scale: T,
    tape: &Tape<T>,
    positions: &[usize],
    dlogits: &[T],
    mut base_grads: Option<&mut [Vec<T>]>,
    mut adapter_grads: Option<&mut [(Vec<T>, Vec<T>)]>,
) -> Result<()> {
    if tape.is_empty() {
        bail!(State, "backward called without a recorded forward pass");
    }
    let c = &model.config;
    let (n, d, f, vsz) = (tape.tokens.len(), c.d_model, c.d_ff, c.vocab_size);
    if dlogits.len() != positions.len() * vsz {
        bail!(Argument, "dlogits has {} values, expected {}", dlogits.len(), positions.len() * vsz);
    }
    let p = &model.params;
    let head_idx = block_index(c.n_layers, 2);

    let mut dhidden = vec![T::zero(); n * d];
    for (r, &pos) in positions.iter().enumerate() {
        if pos >= n {
            return Err(Error::Argument(format!("position {pos} outside sequence of {n}")));
        }
        let drow = &dlogits[r * vsz..(r + 1) * vsz];
        matmul_acc(drow, vsz, p[head_idx].data(), d, &mut dhidden[pos * d..(pos + 1) * d]);
        if let Some(g) = base_grads.as_deref_mut() {
            outer_acc(drow, vsz, &tape.hidden[pos * d..(pos + 1) * d], d, &mut g[head_idx]);
        }
    }

    let lnf = block_index(c.n_layers, 0);
    let mut dx = {
        let dg = base_grads.as_deref_mut().map(|g| {
            let (a, b) = g.split_at_mut(lnf + 1);
            (a[lnf].as_mut_slice(), b[0].as_mut_slice())
        });
        layer_norm_back(&dhidden, &tape.xhat_f, &tape.rstd_f, p[lnf].data(), d, dg)
    };

    for l in (0..c.n_layers).rev() {
        let lt = &tape.layers[l];
        let w = |slot| p[block_index(l, slot)].data();
        let idx = |slot| block_index(l, slot);

        // Split borrows: one &mut per parameter gradient of this block.
        let mut block_grads: Option<Vec<&mut Vec<T>>> = base_grads
            .as_deref_mut()
            .map(|g| g[idx(0)..idx(0) + PER_BLOCK].iter_mut().collect());
        macro_rules! bg {
            ($slot:expr) => {
                block_grads.as_mut().map(|v| v[$slot].as_mut_slice())
            };
        }

        // MLP branch
        let mut dact = vec![T::zero(); n * f];
        if let Some(db2) = bg!(B2) {
            for row in dx.chunks_exact(d) {
                axpy(T::one(), row, db2);
            }
        }
        {
            let ad = find_adapter(adapters, l, Matrix::MlpDown);
            let grads = match (&ad, adapter_grads.as_deref_mut()) {
                (Some((i, _)), Some(g)) => Some(&mut g[*i]),
                _ => None,
            };
            linear_back(
                &lt.act,
                f,
                w(W2),
                d,
                &dx,
                &mut dact,
                bg!(W2),
                ad.map(|(_, a)| (a, lt.lora_u[5].as_deref().unwrap(), scale, grads)),
            );
        }
        let dz: Vec<T> = dact.iter().zip(&lt.z).map(|(&g, &z)| g * gelu_grad(z)).collect();
        if let Some(db1) = bg!(B1) {
            for row in dz.chunks_exact(f) {
                axpy(T::one(), row, db1);
            }
        }
        let mut dh2 = vec![T::zero(); n * d];
        {
            let ad = find_adapter(adapters, l, Matrix::MlpUp);
            let grads = match (&ad, adapter_grads.as_deref_mut()) {
                (Some((i, _)), Some(g)) => Some(&mut g[*i]),
                _ => None,
            };
            linear_back(
                &lt.h2,
                d,
                w(W1),
                f,
                &dz,
                &mut dh2,
                bg!(W1),
                ad.map(|(_, a)| (a, lt.lora_u[4].as_deref().unwrap(), scale, grads)),
            );
        }
        let dln2 = {
            let pair = block_grads.as_mut().map(|v| {
                let (a, b) = v.split_at_mut(LN2_B);
                (a[LN2_G].as_mut_slice(), b[0].as_mut_slice())
            });
            layer_norm_back(&dh2, &lt.xhat2, &lt.rstd2, w(LN2_G), d, pair)
        };
        axpy(T::one(), &dln2, &mut dx);

        // Attention branch
        let mut datt = vec![T::zero(); n * d];
        {
            let ad = find_adapter(adapters, l, Matrix::Output);
            let grads = match (&ad, adapter_grads.as_deref_mut()) {
                (Some((i, _)), Some(g)) => Some(&mut g[*i]),
                _ => None,
            };
            linear_back(
                &lt.att,
                d,
                w(WO),
                d,
                &dx,
                &mut datt,
                bg!(WO),
                ad.map(|(_, a)| (a, lt.lora_u[3].as_deref().unwrap(), scale, grads)),
            );
        }
        let (dq, dk, dv) = attention_back(&datt, &lt.q, &lt.k, &lt.v, &lt.probs, n, c);
        let mut dh1 = vec![T::zero(); n * d];
        for (m, slot, dy) in [(Matrix::Query, WQ, &dq), (Matrix::Key, WK, &dk), (Matrix::Value, WV, &dv)] {
            let ui = matrix_index(m);
            let ad = find_adapter(adapters, l, m);
            let grads = match (&ad, adapter_grads.as_deref_mut()) {
                (Some((i, _)), Some(g)) => Some(&mut g[*i]),
                _ => None,
            };
            linear_back(
                &lt.h1,
                d,
                w(slot),
                d,
                dy,
                &mut dh1,
                bg!(slot),
                ad.map(|(_, a)| (a, lt.lora_u[ui].as_deref().unwrap(), scale, grads)),
            );
        }
        let dln1 = {
            let pair = block_grads.as_mut().map(|v| {
                let (a, b) = v.split_at_mut(LN1_B);
                (a[LN1_G].as_mut_slice(), b[0].as_mut_slice())
            });
            layer_norm_back(&dh1, &lt.xhat1, &lt.rstd1, w(LN1_G), d, pair)
        };
        axpy(T::one(), &dln1, &mut dx);
    }

    if let Some(g) = base_grads {
        let (tok, rest) = g.split_at_mut(POS);
        for (i, &t) in tape.tokens.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            axpy(T::one(), row, &mut tok[TOK][t as usize * d..(t as usize + 1) * d]);
            axpy(T::one(), row, &mut rest[0][i * d..(i + 1) * d]);
        }
    }
    Ok(())
}
