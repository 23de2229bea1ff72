//! Deep Knowledge Tracing baseline: an LSTM over `[embedding(q) ⊕ outcome]`
//! with a per-question sigmoid readout.
//!
//! The prediction for step `t` reads the hidden state after steps `1..t-1`,
//! so it never sees its own outcome. Exercise ids unseen in training share one
//! extra bucket row; during training a small fraction of ids is routed there so
//! that the bucket learns an "average question" response.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Interaction};
use crate::error::{bail, Result};
use crate::nn::kernels::{axpy, dot, matmul_acc, matmul_nt, outer_acc};
use crate::nn::Tensor;
use crate::real::{sigmoid, Real};
use crate::rng;
use crate::train::{AdamW, EarlyStopConfig, EarlyStopping, StopDecision};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DktConfig {
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    /// Number of known exercises; id `question_count` is the unseen bucket.
    pub question_count: usize,
}

impl DktConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.embedding_dim == 0 || self.question_count == 0 {
            bail!(Argument, "DKT dimensions must all be at least 1: {self:?}");
        }
        Ok(())
    }

    fn rows(&self) -> usize {
        self.question_count + 1
    }
}

const EMB: usize = 0;
const W_IH: usize = 1;
const W_HH: usize = 2;
const B: usize = 3;
const W_OUT: usize = 4;
const B_OUT: usize = 5;

pub const PARAM_NAMES: [&str; 6] = ["emb", "w_ih", "w_hh", "b", "w_out", "b_out"];

fn shapes(c: &DktConfig) -> [Vec<usize>; 6] {
    let (h, e, q) = (c.hidden_dim, c.embedding_dim, c.rows());
    [vec![q, e], vec![4 * h, e + 1], vec![4 * h, h], vec![4 * h], vec![q, h], vec![q]]
}

/// LSTM parameters; gate order is input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct Dkt<T> {
    config: DktConfig,
    params: Vec<Tensor<T>>,
}

impl<T: Real> Dkt<T> {
    pub fn new(config: DktConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let h = config.hidden_dim;
        let std = 1.0 / Float::sqrt(h as f64);
        let [se, sih, shh, sb, sw, sbo] = shapes(&config);
        let mut b = Tensor::zeros(&sb);
        b.data_mut()[h..2 * h].iter_mut().for_each(|x| *x = T::one());
        let params = vec![
            Tensor::randn(&se, 0.1, &mut r),
            Tensor::randn(&sih, std, &mut r),
            Tensor::randn(&shh, std, &mut r),
            b,
            Tensor::randn(&sw, std, &mut r),
            Tensor::zeros(&sbo),
        ];
        Ok(Self { config, params })
    }

    pub fn zeros(config: DktConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params: shapes(&config).iter().map(|s| Tensor::zeros(s)).collect() })
    }

    pub fn from_params(config: DktConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expected = shapes(&config);
        if params.len() != expected.len() || params.iter().zip(&expected).any(|(p, s)| p.shape() != s.as_slice()) {
            bail!(Argument, "DKT parameters do not match config {config:?}");
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DktConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    fn check(&self, steps: &[(usize, bool)]) -> Result<()> {
        if let Some((q, _)) = steps.iter().find(|(q, _)| *q > self.config.question_count) {
            bail!(Argument, "question index {q} outside 0..={}", self.config.question_count);
        }
        Ok(())
    }

    /// `p_t` for every step, each computed from steps `< t` and the question at `t`.
    pub fn predict_sequence(&self, steps: &[(usize, bool)]) -> Result<Vec<T>> {
        self.check(steps)?;
        Ok(self.run(steps).probs)
    }

    /// Probability of answering `target` correctly after `history`.
    pub fn predict(&self, history: &[(usize, bool)], target: usize) -> Result<T> {
        let mut steps = history.to_vec();
        steps.push((target, false));
        Ok(*self.predict_sequence(&steps)?.last().unwrap())
    }

    fn run(&self, steps: &[(usize, bool)]) -> Trace<T> {
        let (h, e) = (self.config.hidden_dim, self.config.embedding_dim);
        let p = &self.params;
        let n = steps.len();
        let mut tr = Trace {
            xs: Vec::with_capacity(n),
            gates: Vec::with_capacity(n),
            cs: vec![vec![T::zero(); h]],
            hs: vec![vec![T::zero(); h]],
            probs: Vec::with_capacity(n),
        };
        for (t, &(q, outcome)) in steps.iter().enumerate() {
            let hp = &tr.hs[t];
            let logit = dot(&p[W_OUT].data()[q * h..(q + 1) * h], hp) + p[B_OUT].data()[q];
            tr.probs.push(sigmoid(logit));
            if t + 1 == n {
                break;
            }
            let mut x = p[EMB].data()[q * e..(q + 1) * e].to_vec();
            x.push(if outcome { T::one() } else { T::zero() });
            let mut pre = p[B].data().to_vec();
            let mut tmp = vec![T::zero(); 4 * h];
            matmul_nt(&x, e + 1, p[W_IH].data(), 4 * h, &mut tmp);
            axpy(T::one(), &tmp, &mut pre);
            matmul_nt(hp, h, p[W_HH].data(), 4 * h, &mut tmp);
            axpy(T::one(), &tmp, &mut pre);
            let mut gates = pre;
            for (k, g) in gates.iter_mut().enumerate() {
                *g = if (2 * h..3 * h).contains(&k) { g.tanh() } else { sigmoid(*g) };
            }
            let cp = &tr.cs[t];
            let c: Vec<T> = (0..h).map(|j| gates[h + j] * cp[j] + gates[j] * gates[2 * h + j]).collect();
            let hn: Vec<T> = (0..h).map(|j| gates[3 * h + j] * c[j].tanh()).collect();
            tr.xs.push(x);
            tr.gates.push(gates);
            tr.cs.push(c);
            tr.hs.push(hn);
        }
        tr
    }

    /// Summed binary cross-entropy over all steps; gradients scaled by `scale`
    /// are added into `grads` (one buffer per parameter).
    pub fn loss_and_grad(&self, steps: &[(usize, bool)], scale: T, grads: &mut [Vec<T>]) -> Result<f64> {
        self.check(steps)?;
        let (h, e) = (self.config.hidden_dim, self.config.embedding_dim);
        let p = &self.params;
        let tr = self.run(steps);
        let n = steps.len();
        let mut loss = 0.0;
        let mut dh_at: Vec<Vec<T>> = vec![vec![T::zero(); h]; n];
        for (t, &(q, y)) in steps.iter().enumerate() {
            let pt = tr.probs[t];
            let pf = pt.as_f64().clamp(1e-300, 1.0 - 1e-16);
            loss -= if y { Float::ln(pf) } else { Float::ln(1.0 - pf) };
            let dlogit = (pt - if y { T::one() } else { T::zero() }) * scale;
            axpy(dlogit, &p[W_OUT].data()[q * h..(q + 1) * h], &mut dh_at[t]);
            axpy(dlogit, &tr.hs[t], &mut grads[W_OUT][q * h..(q + 1) * h]);
            grads[B_OUT][q] += dlogit;
        }
        // hs[t] is the state after t updates; update t (0-based) consumed step t.
        let mut dh = vec![T::zero(); h];
        let mut dc = vec![T::zero(); h];
        for t in (0..tr.gates.len()).rev() {
            axpy(T::one(), &dh_at[t + 1], &mut dh);
            let g = &tr.gates[t];
            let c = &tr.cs[t + 1];
            let cp = &tr.cs[t];
            let mut dpre = vec![T::zero(); 4 * h];
            for j in 0..h {
                let (i, f, gg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let tc = c[j].tanh();
                let d_o = dh[j] * tc;
                let dcj = dc[j] + dh[j] * o * (T::one() - tc * tc);
                dpre[j] = dcj * gg * i * (T::one() - i);
                dpre[h + j] = dcj * cp[j] * f * (T::one() - f);
                dpre[2 * h + j] = dcj * i * (T::one() - gg * gg);
                dpre[3 * h + j] = d_o * o * (T::one() - o);
                dc[j] = dcj * f;
            }
            outer_acc(&dpre, 4 * h, &tr.xs[t], e + 1, &mut grads[W_IH]);
            outer_acc(&dpre, 4 * h, &tr.hs[t], h, &mut grads[W_HH]);
            axpy(T::one(), &dpre, &mut grads[B]);
            let mut dx = vec![T::zero(); e + 1];
            matmul_acc(&dpre, 4 * h, p[W_IH].data(), e + 1, &mut dx);
            let q = steps[t].0;
            axpy(T::one(), &dx[..e], &mut grads[EMB][q * e..(q + 1) * e]);
            let mut dhp = vec![T::zero(); h];
            matmul_acc(&dpre, 4 * h, p[W_HH].data(), h, &mut dhp);
            dh = dhp;
        }
        Ok(loss)
    }
}

struct Trace<T> {
    xs: Vec<Vec<T>>,
    gates: Vec<Vec<T>>,
    cs: Vec<Vec<T>>,
    hs: Vec<Vec<T>>,
    probs: Vec<T>,
}

/// Maps exercise ids seen in training to dense indices; everything else maps to the bucket.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionIndex {
    ids: Vec<String>,
}

impl QuestionIndex {
    /// Every exercise id referenced by an interaction of `dataset`, sorted.
    pub fn from_interactions(dataset: &Dataset) -> Self {
        let mut ids: Vec<String> = dataset.interactions().map(|i| i.exercise_id.clone()).collect();
        ids.sort();
        ids.dedup();
        Self { ids }
    }

    pub fn from_ids(mut ids: Vec<String>) -> Self {
        ids.sort();
        ids.dedup();
        Self { ids }
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn bucket(&self) -> usize {
        self.ids.len()
    }

    pub fn index(&self, id: &str) -> usize {
        self.ids.binary_search_by(|x| x.as_str().cmp(id)).unwrap_or(self.bucket())
    }

    pub fn encode(&self, interactions: &[Interaction]) -> Vec<(usize, bool)> {
        interactions.iter().map(|i| (self.index(&i.exercise_id), i.outcome)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DktTrainConfig {
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Learners per optimizer step.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop: EarlyStopConfig,
    /// Fraction of training learners held back for early stopping.
    pub validation_fraction: f64,
    /// Probability that a training interaction's id is replaced by the unseen bucket; 0 leaves that
    /// bucket untrained, as in plain DKT.
    pub unseen_dropout: f64,
    pub seed: u64,
}

impl Default for DktTrainConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            embedding_dim: 32,
            learning_rate: 5e-3,
            weight_decay: 0.0,
            batch_size: 16,
            max_epochs: 40,
            early_stop: EarlyStopConfig { min_delta: 1e-4, patience: 4 },
            validation_fraction: 0.1,
            unseen_dropout: 0.0,
            seed: 7,
        }
    }
}

impl DktTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.validation_fraction) || !(0.0..1.0).contains(&self.unseen_dropout) {
            bail!(Argument, "validation_fraction and unseen_dropout must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.hidden_dim == 0 || self.embedding_dim == 0 {
            bail!(Argument, "batch_size, max_epochs and layer sizes must be positive");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() || !(self.weight_decay >= 0.0) {
            bail!(Argument, "learning rate and weight decay must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DktEpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DktModel {
    pub index: QuestionIndex,
    pub net: Dkt<f64>,
}

impl DktModel {
    pub fn predict_learner(&self, interactions: &[Interaction]) -> Result<Vec<f64>> {
        self.net.predict_sequence(&self.index.encode(interactions))
    }
}

fn mean_loss(net: &Dkt<f64>, seqs: &[Vec<(usize, bool)>]) -> Result<f64> {
    let mut scratch: Vec<Vec<f64>> = net.params.iter().map(|p| vec![0.0; p.len()]).collect();
    let (mut loss, mut n) = (0.0, 0usize);
    for s in seqs {
        loss += net.loss_and_grad(s, 0.0, &mut scratch)?;
        n += s.len();
    }
    Ok(loss / n.max(1) as f64)
}

/// Trains on the learners of `train` (already restricted to the training side).
pub fn dkt_train(train: &Dataset, config: &DktTrainConfig) -> Result<(DktModel, Vec<DktEpochRecord>)> {
    if train.interaction_count() == 0 {
        bail!(Argument, "empty training side");
    }
    config.validate()?;
    let index = QuestionIndex::from_interactions(train);
    let net_config =
        DktConfig { hidden_dim: config.hidden_dim, embedding_dim: config.embedding_dim, question_count: index.len() };
    let mut net = Dkt::<f64>::new(net_config, rng::derive_seed(config.seed, 1))?;

    let mut learners: Vec<Vec<(usize, bool)>> =
        train.learners().iter().map(|l| index.encode(&l.interactions)).filter(|s| !s.is_empty()).collect();
    let mut r = rng::seeded(rng::derive_seed(config.seed, 2));
    learners.shuffle(&mut r);
    let n_val = if learners.len() >= 2 {
        (Float::round(config.validation_fraction * learners.len() as f64) as usize).min(learners.len() - 1)
    } else {
        0
    };
    let validation = learners.split_off(learners.len() - n_val);
    let mut train_seqs = learners;
    let monitor: &[Vec<(usize, bool)>] = if validation.is_empty() { &train_seqs } else { &validation };
    let monitor = monitor.to_vec();

    let mut opt = AdamW::<f64>::new(config.weight_decay);
    let mut stopper = EarlyStopping::new(config.early_stop);
    let mut best = net.clone();
    let mut log = Vec::new();
    let bucket = index.bucket();
    for epoch in 1..=config.max_epochs {
        train_seqs.shuffle(&mut r);
        let mut epoch_loss = 0.0;
        let mut epoch_n = 0usize;
        for batch in train_seqs.chunks(config.batch_size) {
            let batch: Vec<Vec<(usize, bool)>> = batch
                .iter()
                .map(|s| {
                    s.iter()
                        .map(|&(q, y)| (if r.random::<f64>() < config.unseen_dropout { bucket } else { q }, y))
                        .collect()
                })
                .collect();
            let count: usize = batch.iter().map(Vec::len).sum();
            let mut grads: Vec<Vec<f64>> = net.params.iter().map(|p| vec![0.0; p.len()]).collect();
            for s in &batch {
                epoch_loss += net.loss_and_grad(s, 1.0 / count as f64, &mut grads)?;
            }
            epoch_n += count;
            for (p, g) in net.params.iter_mut().zip(&grads) {
                p.accumulate_grad(g);
            }
            let mut params: Vec<&mut Tensor<f64>> = net.params.iter_mut().collect();
            opt.step(&mut params, config.learning_rate)?;
        }
        let validation_loss = mean_loss(&net, &monitor)?;
        log.push(DktEpochRecord { epoch, train_loss: epoch_loss / epoch_n as f64, validation_loss });
        match stopper.observe(validation_loss) {
            StopDecision::Improved => best = net.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    Ok((DktModel { index, net: best }, log))
}
