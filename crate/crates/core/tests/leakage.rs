//! A prediction for timestep t depends only on interactions before t.

use ntkt_core::data::{Dataset, Interaction};
use ntkt_core::dkt::{Dkt, DktConfig, DktModel, QuestionIndex};
use ntkt_core::eval::{NtktPredictor, Predictor};
use ntkt_core::nn::{attach_lora, LoraConfig, Transformer, TransformerConfig};
use ntkt_core::serializer::{render_timestep, PromptTemplate, Representation};
use ntkt_core::sim::{simulate, SimConfig};
use ntkt_core::tokenizer::{build_vocab, DEFAULT_VOCAB_SIZE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PROBES: usize = 50;

fn dataset() -> Dataset {
    simulate(&SimConfig { n_learners: 30, n_exercises: 20, sequence_length_range: (4, 10), seed: 3, ..SimConfig::default() }).unwrap().0
}

/// Rewrites everything from timestep `k + 1` on: new exercises and flipped outcomes.
fn mutate_future(history: &[Interaction], k: usize, ds: &Dataset, rng: &mut ChaCha8Rng) -> Vec<Interaction> {
    let ids: Vec<&String> = ds.exercises().keys().collect();
    let mut out = history.to_vec();
    for it in &mut out[k..] {
        it.exercise_id = ids[rng.random_range(0..ids.len())].clone();
        it.outcome = !it.outcome;
    }
    out
}

fn probe(predictor: &impl Predictor, ds: &Dataset, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..PROBES {
        let learner = &ds.learners()[rng.random_range(0..ds.learners().len())];
        let k = rng.random_range(0..learner.interactions.len());
        let mutated = mutate_future(&learner.interactions, k, ds, &mut rng);
        let a = predictor.predict_learner(&learner.interactions, ds.exercises()).unwrap();
        let b = predictor.predict_learner(&mutated, ds.exercises()).unwrap();
        // Timestep k + 1 is the first mutated target, so only predictions 1..=k must agree.
        assert_eq!(a[..k], b[..k], "learner {} changed before timestep {}", learner.learner_id, k + 1);
    }
}

#[test]
fn dkt_never_sees_the_future() {
    let ds = dataset();
    let index = QuestionIndex::from_interactions(&ds);
    let net = Dkt::new(DktConfig { hidden_dim: 8, embedding_dim: 6, question_count: index.len() }, 4).unwrap();
    probe(&DktModel { index, net }, &ds, 5);
}

#[test]
fn ntkt_never_sees_the_future() {
    let ds = dataset();
    let template = PromptTemplate::default();
    let corpus: Vec<String> = ds
        .learners()
        .iter()
        .map(|l| render_timestep(&l.interactions, l.interactions.len(), ds.exercises(), Representation::ConceptOnly, &template).unwrap().text)
        .collect();
    let vocab = build_vocab(corpus.iter().map(String::as_str), DEFAULT_VOCAB_SIZE).unwrap();
    let cfg = TransformerConfig { n_layers: 1, n_heads: 2, d_model: 8, d_ff: 16, vocab_size: vocab.len(), max_positions: 2048 };
    let mut model = attach_lora(Transformer::<f32>::new(cfg, 6).unwrap(), LoraConfig { rank: 2, ..LoraConfig::default() }, 7).unwrap();
    for a in model.adapters_mut() {
        a.b.data_mut().iter_mut().for_each(|x| *x = 0.05);
    }
    let predictor = NtktPredictor { model: &model, vocab: &vocab, representation: Representation::ConceptOnly, template: &template };
    probe(&predictor, &ds, 8);
}
