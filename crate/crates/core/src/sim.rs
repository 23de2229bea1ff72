//! Synthetic students with known correctness probabilities.
//!
//! Each learner has a latent ability, each exercise a difficulty and a single
//! concept. The probability of a correct answer is
//! `sigmoid(ability + gain * prior_exposures(concept) - difficulty + intercept)`.
//! Question text is an arithmetic word problem whose template depends only on
//! the concept and the difficulty bucket, so a reader of the text can recover
//! both without ever seeing the exercise id.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Exercise, Interaction};
use crate::error::{bail, Error, Result};
use crate::real::sigmoid;
use crate::rng;

/// Correctness rate of the reference (Eedi) data, used as the default calibration target.
pub const REFERENCE_CORRECTNESS_RATE: f64 = 0.623;

/// Number of difficulty buckets that drive question phrasing.
pub const DIFFICULTY_BUCKETS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_learners: usize,
    pub n_exercises: usize,
    pub n_concepts: usize,
    pub sequence_length_range: (usize, usize),
    pub ability_sd: f64,
    pub difficulty_range: (f64, f64),
    pub learning_gain: f64,
    pub global_intercept: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_learners: 200,
            n_exercises: 60,
            n_concepts: 6,
            sequence_length_range: (8, 24),
            ability_sd: 1.0,
            difficulty_range: (-2.5, 2.5),
            learning_gain: 0.05,
            global_intercept: 0.6,
            seed: 7,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_learners == 0 || self.n_exercises == 0 || self.n_concepts == 0 {
            bail!(Argument, "simulator counts must be at least 1");
        }
        let (lo, hi) = self.sequence_length_range;
        if lo == 0 || lo > hi {
            bail!(Argument, "invalid sequence length range ({lo}, {hi})");
        }
        let (dlo, dhi) = self.difficulty_range;
        if !(dlo <= dhi) || !dlo.is_finite() || !dhi.is_finite() {
            bail!(Argument, "invalid difficulty range ({dlo}, {dhi})");
        }
        if !(self.ability_sd >= 0.0) || !self.ability_sd.is_finite() {
            bail!(Argument, "ability_sd must be finite and non-negative");
        }
        if !self.learning_gain.is_finite() || !self.global_intercept.is_finite() {
            bail!(Argument, "learning gain and intercept must be finite");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub learner_id: String,
    pub timestep: u32,
    pub exercise_id: String,
    pub p_star: f64,
    pub ability: f64,
    pub difficulty: f64,
    pub prior_exposures: u32,
}

/// Latent parameters behind a simulated dataset; persisted as `ground_truth.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// One record per interaction, in canonical `(learner_id, timestep)` order.
    pub records: Vec<GroundTruthRecord>,
    pub abilities: BTreeMap<String, f64>,
    pub difficulties: BTreeMap<String, f64>,
    pub concept_of: BTreeMap<String, String>,
}

impl GroundTruth {
    pub fn from_records(records: Vec<GroundTruthRecord>, dataset: &Dataset) -> Self {
        let mut abilities = BTreeMap::new();
        let mut difficulties = BTreeMap::new();
        for r in &records {
            abilities.insert(r.learner_id.clone(), r.ability);
            difficulties.insert(r.exercise_id.clone(), r.difficulty);
        }
        let concept_of = dataset
            .exercises()
            .values()
            .filter_map(|e| e.concepts.first().map(|c| (e.exercise_id.clone(), c.clone())))
            .collect();
        Self { records, abilities, difficulties, concept_of }
    }

    pub fn p_star(&self, learner_id: &str, timestep: u32) -> Option<f64> {
        self.records
            .binary_search_by(|r| (r.learner_id.as_str(), r.timestep).cmp(&(learner_id, timestep)))
            .ok()
            .map(|i| self.records[i].p_star)
    }
}

/// The true correctness probability under the simulator's student model.
pub fn true_probability(ability: f64, gain: f64, prior_exposures: u32, difficulty: f64, intercept: f64) -> f64 {
    sigmoid(ability + gain * prior_exposures as f64 - difficulty + intercept)
}

const OPERATIONS: [&str; 4] = ["addition", "subtraction", "multiplication", "division"];
const NOUNS: [&str; 12] = [
    "apples", "marbles", "stickers", "pencils", "coins", "cards", "books", "shells", "stamps", "beads", "sweets", "tickets",
];
const NAMES: [&str; 12] = ["Asha", "Ben", "Chloe", "Dev", "Ella", "Finn", "Grace", "Hugo", "Isla", "Jack", "Kira", "Leo"];
const OPERAND_RANGES: [(u64, u64); DIFFICULTY_BUCKETS] = [(2, 9), (5, 20), (10, 50), (20, 99), (50, 200)];

pub fn concept_name(k: usize) -> String {
    let base = format!("{}-{}", OPERATIONS[k % OPERATIONS.len()], NOUNS[k % NOUNS.len()]);
    if k < OPERATIONS.len() * NOUNS.len() {
        base
    } else {
        format!("{base}-{k}")
    }
}

pub fn difficulty_bucket(difficulty: f64, range: (f64, f64)) -> usize {
    let width = range.1 - range.0;
    if width <= 0.0 {
        return 0;
    }
    let pos = ((difficulty - range.0) / width * DIFFICULTY_BUCKETS as f64) as isize;
    pos.clamp(0, DIFFICULTY_BUCKETS as isize - 1) as usize
}

/// Renders the word problem and its answer options for an exercise.
///
/// The operands are a pure function of `(concept, difficulty)`; the sentence
/// structure depends only on the concept and the difficulty bucket.
pub fn exercise_text(concept: usize, difficulty: f64, range: (f64, f64)) -> (String, Vec<String>) {
    let bucket = difficulty_bucket(difficulty, range);
    let mut r = rng::seeded(rng::derive_seed(difficulty.to_bits(), concept as u64));
    let (lo, hi) = OPERAND_RANGES[bucket];
    let noun = NOUNS[concept % NOUNS.len()];
    let name = NAMES[concept % NAMES.len()];
    let mut draw = |lo: u64, hi: u64| r.random_range(lo..=hi);

    let (mut text, mut value) = match concept % OPERATIONS.len() {
        0 => {
            let (a, b) = (draw(lo, hi), draw(lo, hi));
            (format!("{name} has {a} {noun} and gets {b} more."), a + b)
        }
        1 => {
            let a = draw(lo + 2, hi + 2);
            let b = draw(1, a - 1);
            (format!("{name} has {a} {noun} and gives away {b}."), a - b)
        }
        2 => {
            let (a, b) = (draw(2, 9), draw(lo, hi));
            (format!("{name} has {a} bags with {b} {noun} in each."), a * b)
        }
        _ => {
            let (groups, share) = (draw(2, 9), draw(lo, hi));
            (
                format!("{name} shares {} {noun} equally into {groups} groups and keeps one group.", groups * share),
                share,
            )
        }
    };
    for clause in 0..bucket {
        match clause {
            0 => {
                let c = draw(lo, hi);
                text.push_str(&format!(" Then {name} finds {c} more."));
                value += c;
            }
            1 => {
                let d = draw(1, value.saturating_sub(1).clamp(1, hi));
                text.push_str(&format!(" Later {name} loses {d}."));
                value -= d;
            }
            2 => {
                let e = draw(lo, hi);
                text.push_str(&format!(" After that {name} buys {e} more."));
                value += e;
            }
            _ => {
                let f = draw(1, value.saturating_sub(1).clamp(1, hi));
                text.push_str(&format!(" Finally {name} gives {f} away."));
                value -= f;
            }
        }
    }
    text.push_str(&format!(" How many {noun} does {name} have now?"));

    let mut options = vec![value];
    let offsets = [1u64, 2, 10, lo.max(3), hi, 5];
    let mut i = draw(0, offsets.len() as u64 - 1) as usize;
    while options.len() < 4 {
        let off = offsets[i % offsets.len()] + (i / offsets.len()) as u64;
        let candidate = if i % 2 == 0 { value + off } else { value.saturating_sub(off) };
        if candidate > 0 && !options.contains(&candidate) {
            options.push(candidate);
        }
        i += 1;
    }
    options.shuffle(&mut r);
    (text, options.into_iter().map(|v| v.to_string()).collect())
}

struct LatentLearner {
    ability: f64,
    /// (exercise index, prior exposures to its concept, uniform draw for the outcome)
    steps: Vec<(usize, u32, f64)>,
}

struct Latent {
    difficulties: Vec<f64>,
    concepts: Vec<usize>,
    learners: Vec<LatentLearner>,
}

fn draw_latent(config: &SimConfig) -> Result<Latent> {
    config.validate()?;
    let mut ex_rng = rng::seeded(rng::derive_seed(config.seed, 0));
    let (dlo, dhi) = config.difficulty_range;
    let difficulties: Vec<f64> = (0..config.n_exercises)
        .map(|_| if dhi > dlo { ex_rng.random_range(dlo..dhi) } else { dlo })
        .collect();
    let mut concepts: Vec<usize> = (0..config.n_exercises).map(|i| i % config.n_concepts).collect();
    concepts.shuffle(&mut ex_rng);

    let ability_dist = Normal::new(0.0, config.ability_sd).map_err(|e| Error::Argument(e.to_string()))?;
    let (lo, hi) = config.sequence_length_range;
    let learners = (0..config.n_learners)
        .map(|l| {
            let mut r = rng::seeded(rng::derive_seed(config.seed, 1_000 + l as u64));
            let ability = ability_dist.sample(&mut r);
            let len = r.random_range(lo..=hi);
            let order: Vec<usize> = if len <= config.n_exercises {
                let mut idx: Vec<usize> = (0..config.n_exercises).collect();
                let (chosen, _) = idx.partial_shuffle(&mut r, len);
                chosen.to_vec()
            } else {
                (0..len).map(|_| r.random_range(0..config.n_exercises)).collect()
            };
            let mut exposures = vec![0u32; config.n_concepts];
            let steps = order
                .into_iter()
                .map(|e| {
                    let c = concepts[e];
                    let prior = exposures[c];
                    exposures[c] += 1;
                    (e, prior, r.random::<f64>())
                })
                .collect();
            LatentLearner { ability, steps }
        })
        .collect();
    Ok(Latent { difficulties, concepts, learners })
}

fn width(n: usize) -> usize {
    let mut w = 1;
    let mut m = n.saturating_sub(1);
    while m >= 10 {
        m /= 10;
        w += 1;
    }
    w
}

pub fn learner_id(index: usize, n: usize) -> String {
    format!("s{:0w$}", index + 1, w = width(n).max(3))
}

pub fn exercise_id(index: usize, n: usize) -> String {
    format!("q{:0w$}", index + 1, w = width(n).max(3))
}

/// Draws a dataset and its ground truth. Fully determined by `config`.
pub fn simulate(config: &SimConfig) -> Result<(Dataset, GroundTruth)> {
    let latent = draw_latent(config)?;
    let exercises: Vec<Exercise> = (0..config.n_exercises)
        .map(|i| {
            let (question_text, options) =
                exercise_text(latent.concepts[i], latent.difficulties[i], config.difficulty_range);
            Exercise {
                exercise_id: exercise_id(i, config.n_exercises),
                question_text,
                options,
                concepts: vec![concept_name(latent.concepts[i])],
            }
        })
        .collect();

    let mut interactions = Vec::new();
    let mut records = Vec::new();
    for (l, learner) in latent.learners.iter().enumerate() {
        let lid = learner_id(l, config.n_learners);
        for (t, &(e, prior, u)) in learner.steps.iter().enumerate() {
            let b = latent.difficulties[e];
            let p = true_probability(learner.ability, config.learning_gain, prior, b, config.global_intercept);
            let eid = exercise_id(e, config.n_exercises);
            interactions.push(Interaction {
                learner_id: lid.clone(),
                timestep: t as u32 + 1,
                exercise_id: eid.clone(),
                outcome: u < p,
            });
            records.push(GroundTruthRecord {
                learner_id: lid.clone(),
                timestep: t as u32 + 1,
                exercise_id: eid,
                p_star: p,
                ability: learner.ability,
                difficulty: b,
                prior_exposures: prior,
            });
        }
    }
    let dataset = Dataset::new(exercises, interactions)?;
    records.sort_by(|a, b| (a.learner_id.as_str(), a.timestep).cmp(&(b.learner_id.as_str(), b.timestep)));
    let truth = GroundTruth::from_records(records, &dataset);
    Ok((dataset, truth))
}

/// Realised correctness rate for a given intercept, holding every other draw fixed.
fn realised_rate(config: &SimConfig, latent: &Latent, intercept: f64) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for learner in &latent.learners {
        for &(e, prior, u) in &learner.steps {
            let p = true_probability(learner.ability, config.learning_gain, prior, latent.difficulties[e], intercept);
            correct += (u < p) as usize;
            total += 1;
        }
    }
    correct as f64 / total as f64
}

/// Finds the global intercept at which the simulated correctness rate reaches
/// `target`, by bisection with common random numbers.
pub fn calibrate_intercept(config: &SimConfig, target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        bail!(Argument, "target rate {target} outside (0, 1)");
    }
    let latent = draw_latent(config)?;
    let (mut lo, mut hi) = (-20.0f64, 20.0f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if realised_rate(config, &latent, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// AUC of the true probabilities against realised outcomes on `interactions`.
pub fn oracle_auc(truth: &GroundTruth, interactions: &[Interaction]) -> Result<f64> {
    let mut scores = Vec::with_capacity(interactions.len());
    for it in interactions {
        let p = truth.p_star(&it.learner_id, it.timestep).ok_or_else(|| {
            Error::Integrity(format!("no ground truth for {} at t={}", it.learner_id, it.timestep))
        })?;
        scores.push((p, it.outcome));
    }
    crate::eval::auc(&scores)
}
