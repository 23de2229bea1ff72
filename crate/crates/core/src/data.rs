//! Domain data model: exercises, interactions, datasets and learner/question splits.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exercise {
    pub exercise_id: String,
    pub question_text: String,
    pub options: Vec<String>,
    #[serde(default)]
    pub concepts: Vec<String>,
}

impl Exercise {
    fn validate(&self) -> Result<()> {
        if self.exercise_id.is_empty() {
            bail!(Integrity, "exercise with empty id");
        }
        if self.options.len() < 2 {
            bail!(Integrity, "exercise {} has {} options, need at least 2", self.exercise_id, self.options.len());
        }
        if self.options.iter().any(|o| o.is_empty()) {
            bail!(Integrity, "exercise {} has an empty option", self.exercise_id);
        }
        Ok(())
    }
}

/// One answered exercise. `outcome == true` means the answer was correct.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub learner_id: String,
    pub timestep: u32,
    pub exercise_id: String,
    pub outcome: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LearnerHistory {
    pub learner_id: String,
    /// Ordered by timestep, which runs densely over `1..=len`.
    pub interactions: Vec<Interaction>,
}

/// An immutable, validated collection of exercises and per-learner histories.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    exercises: BTreeMap<String, Exercise>,
    learners: Vec<LearnerHistory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub learners: usize,
    pub interactions: usize,
    pub exercises: usize,
    pub concepts: usize,
    pub mean_length: f64,
    pub median_length: f64,
    pub correctness_rate: f64,
}

impl Dataset {
    /// Validates and canonicalises raw records.
    ///
    /// Interactions are grouped by learner and ordered by timestep; sparse
    /// timesteps are re-ranked to `1..=T`. Duplicate `(learner, timestep)` pairs
    /// and references to unknown exercises are integrity errors.
    pub fn new(exercises: Vec<Exercise>, interactions: Vec<Interaction>) -> Result<Self> {
        let mut table = BTreeMap::new();
        for ex in exercises {
            ex.validate()?;
            let id = ex.exercise_id.clone();
            if table.insert(id.clone(), ex).is_some() {
                bail!(Integrity, "duplicate exercise id {id}");
            }
        }

        let mut grouped: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
        for it in interactions {
            if !table.contains_key(&it.exercise_id) {
                bail!(Integrity, "learner {} references unknown exercise {}", it.learner_id, it.exercise_id);
            }
            if it.timestep == 0 {
                bail!(Integrity, "learner {} has timestep 0; timesteps are 1-based", it.learner_id);
            }
            grouped.entry(it.learner_id.clone()).or_default().push(it);
        }

        let mut learners = Vec::with_capacity(grouped.len());
        for (learner_id, mut items) in grouped {
            items.sort_by_key(|it| it.timestep);
            for pair in items.windows(2) {
                if pair[0].timestep == pair[1].timestep {
                    bail!(Integrity, "learner {learner_id} has duplicate timestep {}", pair[0].timestep);
                }
            }
            for (rank, it) in items.iter_mut().enumerate() {
                it.timestep = rank as u32 + 1;
            }
            learners.push(LearnerHistory { learner_id, interactions: items });
        }

        Ok(Self { exercises: table, learners })
    }

    pub fn exercises(&self) -> &BTreeMap<String, Exercise> {
        &self.exercises
    }

    pub fn exercise(&self, id: &str) -> Option<&Exercise> {
        self.exercises.get(id)
    }

    /// Learner histories ordered by learner id.
    pub fn learners(&self) -> &[LearnerHistory] {
        &self.learners
    }

    pub fn learner(&self, id: &str) -> Option<&LearnerHistory> {
        self.learners
            .binary_search_by(|l| l.learner_id.as_str().cmp(id))
            .ok()
            .map(|i| &self.learners[i])
    }

    pub fn learner_count(&self) -> usize {
        self.learners.len()
    }

    pub fn interaction_count(&self) -> usize {
        self.learners.iter().map(|l| l.interactions.len()).sum()
    }

    /// All interactions in canonical `(learner_id, timestep)` order.
    pub fn interactions(&self) -> impl Iterator<Item = &Interaction> {
        self.learners.iter().flat_map(|l| l.interactions.iter())
    }

    pub fn summary(&self) -> DatasetSummary {
        let mut lengths: Vec<usize> = self.learners.iter().map(|l| l.interactions.len()).collect();
        lengths.sort_unstable();
        let n = self.interaction_count();
        let concepts: BTreeSet<&str> =
            self.exercises.values().flat_map(|e| e.concepts.iter().map(String::as_str)).collect();
        let median = match lengths.len() {
            0 => 0.0,
            m if m % 2 == 1 => lengths[m / 2] as f64,
            m => (lengths[m / 2 - 1] + lengths[m / 2]) as f64 / 2.0,
        };
        let correct = self.interactions().filter(|it| it.outcome).count();
        DatasetSummary {
            learners: self.learners.len(),
            interactions: n,
            exercises: self.exercises.len(),
            concepts: concepts.len(),
            mean_length: if lengths.is_empty() { 0.0 } else { n as f64 / lengths.len() as f64 },
            median_length: median,
            correctness_rate: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        }
    }

    /// Empirical correctness rate per exercise; exercises without interactions are absent.
    pub fn correctness_rates(&self) -> BTreeMap<&str, f64> {
        let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for it in self.interactions() {
            let e = counts.entry(it.exercise_id.as_str()).or_default();
            e.0 += it.outcome as usize;
            e.1 += 1;
        }
        counts.into_iter().map(|(k, (c, n))| (k, c as f64 / n as f64)).collect()
    }

    /// Keeps only the listed learners and drops every interaction on `excluded`
    /// exercises, re-ranking timesteps. The exercise table is kept whole.
    pub fn restrict(&self, learners: &BTreeSet<&str>, excluded: &BTreeSet<&str>) -> Dataset {
        let kept = self
            .learners
            .iter()
            .filter(|l| learners.contains(l.learner_id.as_str()))
            .filter_map(|l| {
                let interactions: Vec<Interaction> = l
                    .interactions
                    .iter()
                    .filter(|it| !excluded.contains(it.exercise_id.as_str()))
                    .enumerate()
                    .map(|(rank, it)| Interaction { timestep: rank as u32 + 1, ..it.clone() })
                    .collect();
                (!interactions.is_empty())
                    .then(|| LearnerHistory { learner_id: l.learner_id.clone(), interactions })
            })
            .collect();
        Dataset { exercises: self.exercises.clone(), learners: kept }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    HoldoutByLearner,
    UserColdstart,
    QuestionColdstart,
}

/// A reproducible train/test partition. Persisted verbatim as `split.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub train_fraction: f64,
    pub train_learners: Vec<String>,
    pub test_learners: Vec<String>,
    #[serde(default)]
    pub held_out_exercises: Vec<String>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn train_set(&self) -> BTreeSet<&str> {
        self.train_learners.iter().map(String::as_str).collect()
    }

    pub fn test_set(&self) -> BTreeSet<&str> {
        self.test_learners.iter().map(String::as_str).collect()
    }

    pub fn held_out_set(&self) -> BTreeSet<&str> {
        self.held_out_exercises.iter().map(String::as_str).collect()
    }

    /// Checks disjointness and that every referenced id exists in `dataset`.
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        let train = self.train_set();
        if let Some(id) = self.test_learners.iter().find(|id| train.contains(id.as_str())) {
            bail!(Integrity, "learner {id} is on both sides of the split");
        }
        for id in self.train_learners.iter().chain(&self.test_learners) {
            if dataset.learner(id).is_none() {
                bail!(Integrity, "split references unknown learner {id}");
            }
        }
        for id in &self.held_out_exercises {
            if dataset.exercise(id).is_none() {
                bail!(Integrity, "split holds out unknown exercise {id}");
            }
        }
        if !self.held_out_exercises.is_empty() && self.kind != SplitKind::QuestionColdstart {
            bail!(Integrity, "only question cold-start splits may hold out exercises");
        }
        Ok(())
    }

    /// Training learners with every held-out exercise removed.
    pub fn training_stream(&self, dataset: &Dataset) -> Dataset {
        dataset.restrict(&self.train_set(), &self.held_out_set())
    }

    /// Test learners with their full, unmodified histories.
    pub fn test_stream(&self, dataset: &Dataset) -> Dataset {
        dataset.restrict(&self.test_set(), &BTreeSet::new())
    }
}

fn partition_learners(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        bail!(Argument, "train fraction {train_fraction} outside (0, 1)");
    }
    let total = dataset.learner_count();
    if total < 2 {
        bail!(Argument, "need at least 2 learners to split, have {total}");
    }
    let mut ids: Vec<String> = dataset.learners().iter().map(|l| l.learner_id.clone()).collect();
    ids.shuffle(&mut rng::seeded(seed));
    let n_train = libm_round(train_fraction * total as f64) as usize;
    if n_train == 0 || n_train >= total {
        bail!(Argument, "fraction {train_fraction} of {total} learners leaves one side empty");
    }
    let mut test = ids.split_off(n_train);
    ids.sort();
    test.sort();
    Ok((ids, test))
}

fn libm_round(x: f64) -> f64 {
    num_traits::Float::round(x)
}

/// Partitions learners uniformly at random; `|train| = round(fraction * L)`.
pub fn split_holdout(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<SplitSpec> {
    let (train_learners, test_learners) = partition_learners(dataset, train_fraction, seed)?;
    Ok(SplitSpec {
        kind: SplitKind::HoldoutByLearner,
        train_fraction,
        train_learners,
        test_learners,
        held_out_exercises: Vec::new(),
        seed,
    })
}

/// Same partition as [`split_holdout`], tagged for the per-timestep cold-start protocol.
pub fn split_user_coldstart(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<SplitSpec> {
    Ok(SplitSpec { kind: SplitKind::UserColdstart, ..split_holdout(dataset, train_fraction, seed)? })
}

/// Holds out `k` exercises entirely from training, spread over the difficulty range.
///
/// Exercises are ordered by empirical correctness rate and cut into `k`
/// contiguous strata; one exercise is drawn from each stratum, preferring
/// exercises whose concepts are not already covered.
pub fn split_question_coldstart(dataset: &Dataset, k: usize, train_fraction: f64, seed: u64) -> Result<SplitSpec> {
    let n = dataset.exercises().len();
    if k == 0 {
        bail!(Argument, "k must be at least 1");
    }
    if k >= n {
        bail!(Argument, "cannot hold out {k} of {n} exercises");
    }
    let rates = dataset.correctness_rates();
    // Unanswered exercises sort after answered ones so they are only used as a last resort.
    let mut ordered: Vec<(&str, Option<f64>)> =
        dataset.exercises().keys().map(|id| (id.as_str(), rates.get(id.as_str()).copied())).collect();
    ordered.sort_by(|a, b| match (a.1, b.1) {
        (Some(x), Some(y)) => x.partial_cmp(&y).unwrap().then_with(|| a.0.cmp(b.0)),
        (Some(_), None) => core::cmp::Ordering::Less,
        (None, Some(_)) => core::cmp::Ordering::Greater,
        (None, None) => a.0.cmp(b.0),
    });
    let answered = ordered.iter().filter(|e| e.1.is_some()).count();
    let pool = if answered >= k { &ordered[..answered] } else { &ordered[..] };

    let mut rng = rng::seeded(rng::derive_seed(seed, 1));
    let mut covered: BTreeSet<&str> = BTreeSet::new();
    let mut held_out = Vec::with_capacity(k);
    for stratum in 0..k {
        let lo = stratum * pool.len() / k;
        let hi = (stratum + 1) * pool.len() / k;
        let members = &pool[lo..hi];
        let fresh: Vec<&str> = members
            .iter()
            .map(|e| e.0)
            .filter(|id| dataset.exercise(id).unwrap().concepts.iter().all(|c| !covered.contains(c.as_str())))
            .collect();
        let candidates: Vec<&str> = if fresh.is_empty() { members.iter().map(|e| e.0).collect() } else { fresh };
        let pick = candidates[rng.random_range(0..candidates.len())];
        covered.extend(dataset.exercise(pick).unwrap().concepts.iter().map(String::as_str));
        held_out.push(pick.to_string());
    }
    held_out.sort();

    let (train_learners, test_learners) = partition_learners(dataset, train_fraction, rng::derive_seed(seed, 2))?;
    let split = SplitSpec {
        kind: SplitKind::QuestionColdstart,
        train_fraction,
        train_learners,
        test_learners,
        held_out_exercises: held_out,
        seed,
    };
    if split.training_stream(dataset).learner_count() == 0 {
        bail!(Argument, "holding out {k} exercises leaves no training interactions");
    }
    Ok(split)
}
