//! Metrics and evaluation protocols.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Exercise, Interaction, SplitKind, SplitSpec};
use crate::dkt::DktModel;
use crate::error::{bail, Error, Result};
use crate::nn::{CausalLm, Tape};
use crate::real::{sigmoid, Real};
use crate::rng;
use crate::serializer::{render_timestep, PromptTemplate, Representation, SerializedExample};
use crate::tokenizer::{Vocab, BOS};

/// Above this many scores AUC switches from exact pair counting to ranks.
pub const PAIRWISE_LIMIT: usize = 10_000;

/// Area under the ROC curve with ties counted as one half.
///
/// `Undefined` when either class is absent.
pub fn auc(scores: &[(f64, bool)]) -> Result<f64> {
    if scores.iter().any(|(s, _)| s.is_nan()) {
        bail!(Argument, "NaN score");
    }
    let pos = scores.iter().filter(|(_, y)| *y).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        bail!(Undefined, "AUC needs both classes (got {pos} positive, {neg} negative)");
    }
    if scores.len() <= PAIRWISE_LIMIT {
        // Half-units keep the count exact.
        let mut halves: u64 = 0;
        for &(sp, _) in scores.iter().filter(|(_, y)| *y) {
            for &(sn, _) in scores.iter().filter(|(_, y)| !*y) {
                halves += if sp > sn { 2 } else if sp == sn { 1 } else { 0 };
            }
        }
        return Ok(halves as f64 / (2.0 * pos as f64 * neg as f64));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * sorted[i..=j].iter().filter(|(_, y)| *y).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Published reference values for the question cold-start footer (F1, seen → unseen).
pub const REFERENCE_BASELINE_F1: (f64, f64) = (0.777, 0.732);
pub const REFERENCE_NTKT_F1: (f64, f64) = (0.843, 0.843);

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_PERMUTATIONS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub learner_id: String,
    pub timestep: u32,
    pub exercise_id: String,
    pub p_correct: f64,
    pub label: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    /// Positive class is "correct"; `p >= threshold` predicts correct.
    pub fn from_scores(scores: impl IntoIterator<Item = (f64, bool)>, threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (p, y) in scores {
            match (p >= threshold, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.total() > 0).then(|| (self.tp + self.tn) as f64 / self.total() as f64)
    }

    pub fn precision(&self) -> Option<f64> {
        (self.tp + self.fp > 0).then(|| self.tp as f64 / (self.tp + self.fp) as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        (self.tp + self.fn_ > 0).then(|| self.tp as f64 / (self.tp + self.fn_) as f64)
    }

    /// `2TP / (2TP + FP + FN)`; undefined when there are no positives predicted or present.
    pub fn f1(&self) -> Option<f64> {
        let d = 2 * self.tp + self.fp + self.fn_;
        (d > 0).then(|| 2.0 * self.tp as f64 / d as f64)
    }
}

/// `None` marks a metric that is undefined for the input (e.g. AUC with one class).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub threshold: f64,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    pub confusion: Confusion,
}

pub fn compute_metrics(predictions: &[Prediction], threshold: f64) -> Result<MetricsReport> {
    score_metrics(&predictions.iter().map(|p| (p.p_correct, p.label)).collect::<Vec<_>>(), threshold)
}

pub fn score_metrics(scores: &[(f64, bool)], threshold: f64) -> Result<MetricsReport> {
    if scores.is_empty() {
        bail!(Argument, "no predictions to score");
    }
    if let Some((p, _)) = scores.iter().find(|(p, _)| !(0.0..=1.0).contains(p)) {
        bail!(Argument, "probability {p} outside [0, 1]");
    }
    let confusion = Confusion::from_scores(scores.iter().copied(), threshold);
    let auc = match auc(scores) {
        Ok(a) => Some(a),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        n: scores.len(),
        threshold,
        accuracy: confusion.accuracy().unwrap_or(0.0),
        precision: confusion.precision(),
        recall: confusion.recall(),
        f1: confusion.f1(),
        auc,
        confusion,
    })
}

/// `P(correct)` from the two outcome logits: the softmax restricted to them.
pub fn outcome_probability(logit_correct: f64, logit_incorrect: f64) -> f64 {
    sigmoid(logit_correct - logit_incorrect)
}

/// Runs the prompt (text before the answer) through `model` and reads the outcome logits
/// at its last position.
pub fn predict_probability<T: Real, M: CausalLm<T>>(
    model: &M,
    example: &SerializedExample,
    vocab: &Vocab,
    tape: &mut Tape<T>,
) -> Result<f64> {
    let mut tokens = vec![BOS];
    tokens.extend(vocab.encode(example.prompt()));
    let max = model.model_config().max_positions;
    if tokens.len() > max {
        bail!(Argument, "prompt of {} tokens exceeds max_positions {max}", tokens.len());
    }
    model.record(&tokens, tape)?;
    let logits = model.logits_at(tape, &[tokens.len() - 1])?;
    let (c, i) = (logits[vocab.correct_id() as usize], logits[vocab.incorrect_id() as usize]);
    let p = outcome_probability(c.as_f64(), i.as_f64());
    if !p.is_finite() {
        bail!(Numeric, "non-finite probability from logits {c:?}/{i:?}");
    }
    Ok(p)
}

/// Produces `P(correct)` for every timestep of one learner, each from strictly earlier interactions.
pub trait Predictor {
    fn predict_learner(&self, interactions: &[Interaction], exercises: &BTreeMap<String, Exercise>) -> Result<Vec<f64>>;
}

impl Predictor for DktModel {
    fn predict_learner(&self, interactions: &[Interaction], _: &BTreeMap<String, Exercise>) -> Result<Vec<f64>> {
        DktModel::predict_learner(self, interactions)
    }
}

/// A causal LM queried with one rendered prompt per timestep.
pub struct NtktPredictor<'a, M> {
    pub model: &'a M,
    pub vocab: &'a Vocab,
    pub representation: Representation,
    pub template: &'a PromptTemplate,
}

impl<M: CausalLm<f32>> Predictor for NtktPredictor<'_, M> {
    fn predict_learner(&self, interactions: &[Interaction], exercises: &BTreeMap<String, Exercise>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        (1..=interactions.len())
            .map(|t| {
                let ex = render_timestep(interactions, t, exercises, self.representation, self.template)?;
                predict_probability(self.model, &ex, self.vocab, &mut tape)
            })
            .collect()
    }
}

/// One prediction for every interaction of every test learner, in (learner, timestep) order.
pub fn sequential_evaluate(predictor: &impl Predictor, dataset: &Dataset, split: &SplitSpec) -> Result<Vec<Prediction>> {
    split.validate(dataset)?;
    let mut out = Vec::new();
    for id in &split.test_learners {
        let learner = dataset.learner(id).ok_or_else(|| Error::Integrity(alloc::format!("unknown learner {id}")))?;
        let probs = predictor.predict_learner(&learner.interactions, dataset.exercises())?;
        if probs.len() != learner.interactions.len() {
            bail!(State, "predictor returned {} values for {} interactions", probs.len(), learner.interactions.len());
        }
        for (it, p) in learner.interactions.iter().zip(probs) {
            if !(0.0..=1.0).contains(&p) {
                bail!(Numeric, "prediction {p} outside [0, 1] for {} at t={}", it.learner_id, it.timestep);
            }
            out.push(Prediction {
                learner_id: it.learner_id.clone(),
                timestep: it.timestep,
                exercise_id: it.exercise_id.clone(),
                p_correct: p,
                label: it.outcome,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub timestep: u32,
    /// `None` when every label at this timestep has the same class.
    pub f1: Option<f64>,
    pub n: usize,
}

/// F1 over all predictions at each timestep, ascending.
pub fn user_coldstart_curve(predictions: &[Prediction], threshold: f64) -> Vec<CurveRow> {
    let mut by_t: BTreeMap<u32, Vec<(f64, bool)>> = BTreeMap::new();
    for p in predictions {
        by_t.entry(p.timestep).or_default().push((p.p_correct, p.label));
    }
    by_t.into_iter()
        .map(|(timestep, scores)| {
            let single_class = scores.iter().all(|s| s.1) || scores.iter().all(|s| !s.1);
            let f1 = if single_class { None } else { Confusion::from_scores(scores.iter().copied(), threshold).f1() };
            CurveRow { timestep, f1, n: scores.len() }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionColdstartReport {
    pub seen: MetricsReport,
    pub unseen: MetricsReport,
    /// `seen.f1 − unseen.f1`.
    pub f1_gap: Option<f64>,
    /// Two-sided label-permutation p-value for the F1 gap.
    pub p_value: Option<f64>,
    pub permutations: usize,
}

/// Splits predictions into interactions on held-out exercises (unseen) and the rest (seen),
/// and tests the F1 gap by permuting the seen/unseen assignment.
pub fn question_coldstart_eval(
    predictions: &[Prediction],
    split: &SplitSpec,
    threshold: f64,
    permutations: usize,
    seed: u64,
) -> Result<QuestionColdstartReport> {
    if split.kind != SplitKind::QuestionColdstart {
        bail!(Argument, "question cold-start evaluation needs a question_coldstart split");
    }
    let held: BTreeSet<&str> = split.held_out_set();
    let (unseen, seen): (Vec<(f64, bool)>, Vec<(f64, bool)>) = {
        let mut u = Vec::new();
        let mut s = Vec::new();
        for p in predictions {
            if held.contains(p.exercise_id.as_str()) { u.push((p.p_correct, p.label)) } else { s.push((p.p_correct, p.label)) }
        }
        (u, s)
    };
    if unseen.is_empty() {
        bail!(Argument, "no predictions on held-out exercises");
    }
    if seen.is_empty() {
        bail!(Argument, "no predictions on seen exercises");
    }
    let seen_report = score_metrics(&seen, threshold)?;
    let unseen_report = score_metrics(&unseen, threshold)?;
    let f1_gap = seen_report.f1.zip(unseen_report.f1).map(|(a, b)| a - b);
    let p_value = f1_gap.map(|gap| {
        let mut pool: Vec<(f64, bool)> = seen.iter().chain(&unseen).copied().collect();
        let mut r = rng::seeded(seed);
        let mut extreme = 0usize;
        for _ in 0..permutations {
            pool.shuffle(&mut r);
            let (a, b) = pool.split_at(seen.len());
            let fa = Confusion::from_scores(a.iter().copied(), threshold).f1();
            let fb = Confusion::from_scores(b.iter().copied(), threshold).f1();
            if let (Some(fa), Some(fb)) = (fa, fb) {
                if Float::abs(fa - fb) >= Float::abs(gap) - 1e-12 {
                    extreme += 1;
                }
            }
        }
        (1 + extreme) as f64 / (1 + permutations) as f64
    });
    Ok(QuestionColdstartReport { seen: seen_report, unseen: unseen_report, f1_gap, p_value, permutations })
}
