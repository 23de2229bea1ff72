//! Selectively masked causal-LM training: loss, optimizer, schedule, early stopping.
//!
//! Only positions whose next token is an outcome literal carry a label; every
//! other position is context. A label of [`IGNORE_INDEX`] marks "no loss here".

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::nn::{CausalLm, Tape, Tensor};
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::serializer::SerializedExample;
use crate::tokenizer::{Vocab, BOS};

/// Label sentinel for positions excluded from the loss.
pub const IGNORE_INDEX: i64 = -100;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Which next-token positions are supervised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Every outcome literal, in the history and after `</target>:`.
    #[default]
    AllOutcomes,
    /// Only the final answer.
    TargetOnly,
    /// Plain language modelling of every token, except that outcome slots are
    /// labelled with a coin flip derived from the text, so the model learns the
    /// answer format but nothing about the answers.
    Context,
}

/// One tokenized example with next-token labels; `labels[c]` is the target for
/// the logits at position `c`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSequence {
    pub tokens: Vec<u32>,
    pub labels: Vec<i64>,
}

impl MaskedSequence {
    /// Tokenizes `example` behind a `<bos>` and labels the positions selected by `mode`.
    pub fn from_example(vocab: &Vocab, example: &SerializedExample, mode: Supervision) -> Result<Self> {
        let toks = vocab.encode_with_offsets(&example.text);
        let spans = vocab.span_positions(&toks, &example.target_char_spans)?;
        let mut tokens = Vec::with_capacity(toks.len() + 1);
        tokens.push(BOS);
        tokens.extend(toks.iter().map(|t| t.id));
        // Token i of the text sits at position i + 1 and is predicted from position i.
        let outcome_at: Vec<usize> = spans.iter().map(|&p| p + 1).collect();
        for &p in &outcome_at {
            let id = tokens[p];
            if id != vocab.correct_id() && id != vocab.incorrect_id() {
                bail!(Integrity, "outcome span maps to non-outcome token {id}");
            }
        }
        let mut labels = vec![IGNORE_INDEX; tokens.len()];
        match mode {
            Supervision::AllOutcomes => {
                for &p in &outcome_at {
                    labels[p - 1] = tokens[p] as i64;
                }
            }
            Supervision::TargetOnly => {
                let p = *outcome_at.last().expect("examples always carry an answer span");
                labels[p - 1] = tokens[p] as i64;
            }
            Supervision::Context => {
                for c in 0..tokens.len() - 1 {
                    labels[c] = tokens[c + 1] as i64;
                }
                let text_seed = rng::fnv1a(example.text.as_bytes());
                for &p in &outcome_at {
                    let coin = rng::derive_seed(text_seed, p as u64) & 1 == 1;
                    labels[p - 1] = if coin { vocab.correct_id() } else { vocab.incorrect_id() } as i64;
                }
            }
        }
        Ok(Self { tokens, labels })
    }

    pub fn new(tokens: Vec<u32>, labels: Vec<i64>) -> Result<Self> {
        if tokens.len() != labels.len() {
            bail!(Argument, "{} tokens but {} labels", tokens.len(), labels.len());
        }
        if let Some(l) = labels.iter().find(|&&l| l < 0 && l != IGNORE_INDEX) {
            bail!(Argument, "negative label {l} other than the sentinel");
        }
        Ok(Self { tokens, labels })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `m_c` for every position.
    pub fn mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != IGNORE_INDEX).collect()
    }

    /// Supervised positions and their label ids.
    pub fn targets(&self) -> (Vec<usize>, Vec<u32>) {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != IGNORE_INDEX)
            .map(|(c, &l)| (c, l as u32))
            .unzip()
    }

    pub fn target_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }
}

/// Cross-entropy summed over the given logit rows and its gradient
/// `softmax − onehot` (unscaled), both row-major `rows × vocab`.
pub fn cross_entropy_rows<T: Real>(logits: &[T], targets: &[u32], vocab: usize) -> Result<(f64, Vec<T>)> {
    if logits.len() != targets.len() * vocab {
        bail!(Argument, "{} logits for {} rows of width {vocab}", logits.len(), targets.len());
    }
    let mut grad = logits.to_vec();
    let mut total = 0.0;
    for (row, &y) in grad.chunks_exact_mut(vocab).zip(targets) {
        if y as usize >= vocab {
            bail!(Argument, "label {y} outside vocabulary of {vocab}");
        }
        let lse = crate::nn::kernels::log_sum_exp(row);
        total += (lse - row[y as usize]).as_f64();
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
        row[y as usize] -= T::one();
    }
    if !total.is_finite() {
        bail!(Numeric, "non-finite loss");
    }
    Ok((total, grad))
}

/// Mean masked cross-entropy over full `len × vocab` logits:
/// `Σ_{m=1} −log softmax(logits[c])[y_c] / max(1, Σ m)`, plus the target count.
pub fn masked_clm_loss<T: Real>(logits: &[T], labels: &[i64], vocab: usize) -> Result<(f64, usize)> {
    if logits.len() != labels.len() * vocab {
        bail!(Argument, "{} logits for {} labels of width {vocab}", logits.len(), labels.len());
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (c, &l) in labels.iter().enumerate() {
        if l == IGNORE_INDEX {
            continue;
        }
        if l < 0 || l as usize >= vocab {
            bail!(Argument, "label {l} at position {c} outside vocabulary of {vocab}");
        }
        rows.extend_from_slice(&logits[c * vocab..(c + 1) * vocab]);
        targets.push(l as u32);
    }
    let (sum, _) = cross_entropy_rows(&rows, &targets, vocab)?;
    Ok((sum / targets.len().max(1) as f64, targets.len()))
}

/// Runs forward and backward for every sequence of every micro-batch, adding
/// gradients scaled by `1 / total targets`, so that splitting a batch into
/// micro-batches leaves the accumulated gradient unchanged. Returns the mean loss.
pub fn accumulate_gradients<T: Real, M: CausalLm<T>>(
    model: &mut M,
    micro_batches: &[&[MaskedSequence]],
    tape: &mut Tape<T>,
) -> Result<f64> {
    let total: usize = micro_batches.iter().flat_map(|b| b.iter()).map(MaskedSequence::target_count).sum();
    if total == 0 {
        return Ok(0.0);
    }
    let inv = T::of(1.0 / total as f64);
    let vocab = model.model_config().vocab_size;
    let mut loss = 0.0;
    for seq in micro_batches.iter().flat_map(|b| b.iter()) {
        let (positions, targets) = seq.targets();
        if positions.is_empty() {
            continue;
        }
        model.record(&seq.tokens, tape)?;
        let logits = model.logits_at(tape, &positions)?;
        let (sum, mut grad) = cross_entropy_rows(&logits, &targets, vocab)?;
        grad.iter_mut().for_each(|g| *g *= inv);
        model.backward(tape, &positions, &grad)?;
        loss += sum;
    }
    Ok(loss / total as f64)
}

/// Mean masked loss over `sequences` without touching gradients.
pub fn evaluate_loss<T: Real, M: CausalLm<T>>(model: &M, sequences: &[MaskedSequence]) -> Result<f64> {
    let vocab = model.model_config().vocab_size;
    let mut tape = Tape::new();
    let (mut sum, mut count) = (0.0, 0usize);
    for seq in sequences {
        let (positions, targets) = seq.targets();
        if positions.is_empty() {
            continue;
        }
        model.record(&seq.tokens, &mut tape)?;
        let logits = model.logits_at(&tape, &positions)?;
        sum += cross_entropy_rows(&logits, &targets, vocab)?.0;
        count += targets.len();
    }
    Ok(sum / count.max(1) as f64)
}

/// Adam with bias correction followed by decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS, weight_decay, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates every tensor from its gradient buffer (absent = zero) and clears
    /// the buffers. A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], lr: f64) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if let Some(g) = p.grad() {
                if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                    bail!(Numeric, "non-finite gradient in tensor {i} at element {j}: {:?}", g[j]);
                }
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::State(format!("optimizer state was built for different parameters")));
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - Float::powi(self.beta1, self.t as i32));
        let c2 = T::of(1.0 - Float::powi(self.beta2, self.t as i32));
        let lr_t = T::of(lr);
        let eps = T::of(self.eps);
        let decay = T::of(1.0 - lr * self.weight_decay);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad().map(<[T]>::to_vec);
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                data[i] -= lr_t * mhat / (vhat.sqrt() + eps);
                data[i] *= decay;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopConfig {
    pub min_delta: f64,
    /// Evaluations without sufficient improvement before stopping.
    pub patience: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_accumulation: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub early_stop: EarlyStopConfig,
    pub supervision: Supervision,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            warmup_steps: 50,
            schedule: Schedule::Cosine,
            weight_decay: 0.01,
            batch_size: 4,
            grad_accumulation: 4,
            max_steps: 20_000,
            eval_every: 250,
            early_stop: EarlyStopConfig { min_delta: 0.001, patience: 10 },
            supervision: Supervision::AllOutcomes,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            bail!(Argument, "learning rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bail!(Argument, "weight decay must be finite and non-negative");
        }
        if self.batch_size == 0 || self.grad_accumulation == 0 || self.max_steps == 0 || self.eval_every == 0 {
            bail!(Argument, "batch_size, grad_accumulation, max_steps and eval_every must be positive");
        }
        if self.warmup_steps > self.max_steps {
            bail!(Argument, "warmup ({}) exceeds max_steps ({})", self.warmup_steps, self.max_steps);
        }
        if !(self.early_stop.min_delta >= 0.0) || self.early_stop.patience == 0 {
            bail!(Argument, "early stopping needs min_delta ≥ 0 and patience ≥ 1");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak rate, then cosine decay to 0 at `max_steps`.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let lr = config.learning_rate;
    let (w, max) = (config.warmup_steps, config.max_steps);
    if step < w {
        return lr * step as f64 / w as f64;
    }
    if step >= max {
        return 0.0;
    }
    let progress = (step - w) as f64 / (max - w) as f64;
    lr * 0.5 * (1.0 + Float::cos(core::f64::consts::PI * progress))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the best loss has not improved by at least `min_delta` for
/// `patience` consecutive evaluations.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    config: EarlyStopConfig,
    best: Option<f64>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(config: EarlyStopConfig) -> Self {
        Self { config, best: None, since_best: 0 }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, loss: f64) -> StopDecision {
        match self.best {
            Some(best) if best - loss < self.config.min_delta => {
                self.since_best += 1;
                if self.since_best >= self.config.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some(loss);
                self.since_best = 0;
                StopDecision::Improved
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub lr: f64,
    /// Mean training loss over the steps since the previous record.
    pub train_loss: f64,
    pub eval_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub steps: usize,
    pub best_step: usize,
    pub best_eval_loss: f64,
    pub stopped_early: bool,
    pub log: Vec<TrainLogRecord>,
}

/// What [`fit`] drives: anything that can take a step, report an eval loss and
/// save/restore its best state.
pub trait Learner {
    type Snapshot;
    fn train_step(&mut self, lr: f64) -> Result<f64>;
    fn eval_loss(&mut self) -> Result<f64>;
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, snapshot: Self::Snapshot);
}

/// Steps `1..=max_steps` at `lr_at(step)`, evaluating every `eval_every` steps
/// (and at the last step). The best-evaluated state is restored at the end.
pub fn fit<L: Learner>(learner: &mut L, config: &TrainConfig, mut on_record: impl FnMut(&TrainLogRecord)) -> Result<FitOutcome> {
    config.validate()?;
    let mut stopper = EarlyStopping::new(config.early_stop);
    let mut best = None;
    let mut best_step = 0;
    let mut log = Vec::new();
    let (mut window_loss, mut window_steps) = (0.0, 0usize);
    let mut stopped_early = false;
    let mut steps = 0;
    for step in 1..=config.max_steps {
        let lr = lr_at(step, config);
        window_loss += learner.train_step(lr)?;
        window_steps += 1;
        steps = step;
        if step % config.eval_every != 0 && step != config.max_steps {
            continue;
        }
        let eval_loss = learner.eval_loss()?;
        if !eval_loss.is_finite() {
            bail!(Numeric, "non-finite eval loss at step {step}");
        }
        let record = TrainLogRecord { step, lr, train_loss: window_loss / window_steps as f64, eval_loss };
        on_record(&record);
        log.push(record);
        (window_loss, window_steps) = (0.0, 0);
        match stopper.observe(eval_loss) {
            StopDecision::Improved => {
                best = Some(learner.snapshot());
                best_step = step;
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    if let Some(s) = best {
        learner.restore(s);
    }
    Ok(FitOutcome { steps, best_step, best_eval_loss: stopper.best().unwrap_or(f64::NAN), stopped_early, log })
}

/// [`Learner`] over a causal LM: shuffled epochs of masked sequences,
/// `grad_accumulation` micro-batches of `batch_size` per step, AdamW.
pub struct LmLearner<'a, T: Real, M: CausalLm<T>> {
    pub model: M,
    optimizer: AdamW<T>,
    train: &'a [MaskedSequence],
    eval: &'a [MaskedSequence],
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
    batch_size: usize,
    accumulation: usize,
    tape: Tape<T>,
}

impl<'a, T: Real, M: CausalLm<T>> LmLearner<'a, T, M> {
    pub fn new(model: M, train: &'a [MaskedSequence], eval: &'a [MaskedSequence], config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            bail!(Argument, "empty training stream");
        }
        if eval.iter().all(|s| s.target_count() == 0) {
            bail!(Argument, "empty eval stream");
        }
        let vocab = model.model_config().vocab_size;
        for s in train.iter().chain(eval) {
            if let Some(&t) = s.tokens.iter().find(|&&t| t as usize >= vocab) {
                bail!(Argument, "token {t} outside model vocabulary of {vocab}");
            }
        }
        Ok(Self {
            model,
            optimizer: AdamW::new(config.weight_decay),
            train,
            eval,
            order: Vec::new(),
            cursor: 0,
            rng: rng::seeded(rng::derive_seed(config.seed, 0x7472_6169_6e)),
            batch_size: config.batch_size,
            accumulation: config.grad_accumulation,
            tape: Tape::new(),
        })
    }

    fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = (0..self.train.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    pub fn into_model(self) -> M {
        self.model
    }
}

impl<T: Real, M: CausalLm<T>> Learner for LmLearner<'_, T, M> {
    type Snapshot = Vec<Vec<T>>;

    fn train_step(&mut self, lr: f64) -> Result<f64> {
        let batches: Vec<Vec<MaskedSequence>> = (0..self.accumulation)
            .map(|_| (0..self.batch_size).map(|_| self.train[self.next_index()].clone()).collect())
            .collect();
        let views: Vec<&[MaskedSequence]> = batches.iter().map(Vec::as_slice).collect();
        let loss = accumulate_gradients(&mut self.model, &views, &mut self.tape)?;
        let mut params = self.model.trainable_mut();
        self.optimizer.step(&mut params, lr)?;
        Ok(loss)
    }

    fn eval_loss(&mut self) -> Result<f64> {
        evaluate_loss(&self.model, self.eval)
    }

    fn snapshot(&self) -> Vec<Vec<T>> {
        self.model.trainable().iter().map(|p| p.data().to_vec()).collect()
    }

    fn restore(&mut self, snapshot: Vec<Vec<T>>) {
        for (p, s) in self.model.trainable_mut().into_iter().zip(snapshot) {
            p.data_mut().copy_from_slice(&s);
        }
    }
}
