//! Loss masking, causality and adapter invariants of the transformer.

use ntkt_core::nn::{attach_lora, CausalLm, LoraConfig, LoraModel, Matrix, Tape, Transformer, TransformerConfig};
use ntkt_core::rng::fnv1a;
use ntkt_core::train::{accumulate_gradients, fit, LmLearner, MaskedSequence, TrainConfig, IGNORE_INDEX};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> TransformerConfig {
    TransformerConfig { n_layers: 2, n_heads: 2, d_model: 16, d_ff: 32, vocab_size: 29, max_positions: 48 }
}

fn tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..config().vocab_size as u32)).collect()
}

/// A LoRA model whose `B` is non-zero, so adapters actually change the output.
fn trained_lora(seed: u64) -> LoraModel<f64> {
    let base = Transformer::<f64>::new(config(), seed).unwrap();
    let cfg = LoraConfig { rank: 4, alpha: 8.0, targets: Matrix::ALL.to_vec(), init_std: 0.3 };
    let mut m = attach_lora(base, cfg, seed + 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for a in m.adapters_mut() {
        for x in a.b.data_mut() {
            *x = rng.random_range(-0.2..0.2);
        }
    }
    m
}

fn adapter_grads(m: &LoraModel<f64>) -> Vec<f64> {
    m.trainable().iter().flat_map(|t| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()])).collect()
}

fn zero_grads(m: &mut LoraModel<f64>) {
    for t in m.trainable_mut() {
        t.zero_grad();
    }
}

fn loss_and_grads(m: &mut LoraModel<f64>, seqs: &[MaskedSequence]) -> (f64, Vec<f64>) {
    zero_grads(m);
    let loss = accumulate_gradients(m, &[seqs], &mut Tape::new()).unwrap();
    (loss, adapter_grads(m))
}

fn with_labels(tokens: &[u32], supervised: &[usize]) -> MaskedSequence {
    let mut labels = vec![IGNORE_INDEX; tokens.len()];
    for &c in supervised {
        labels[c] = tokens[c + 1] as i64;
    }
    MaskedSequence::new(tokens.to_vec(), labels).unwrap()
}

#[test]
fn all_zero_mask_gives_zero_loss_and_gradients() {
    let mut m = trained_lora(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let seqs: Vec<_> = (0..3).map(|_| with_labels(&tokens(&mut rng, 20), &[])).collect();
    let (loss, grads) = loss_and_grads(&mut m, &seqs);
    assert_eq!(loss, 0.0);
    assert!(grads.iter().all(|&g| g == 0.0));
}

#[test]
fn masked_label_is_invisible_but_masked_context_is_not() {
    let mut m = trained_lora(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = tokens(&mut rng, 24);
    let supervised = [5, 9, 14];
    let (loss, grads) = loss_and_grads(&mut m, &[with_labels(&t, &supervised)]);

    // The final token is only ever a label, and that label is masked.
    let mut u = t.clone();
    u[23] = (u[23] + 1) % config().vocab_size as u32;
    let (loss2, grads2) = loss_and_grads(&mut m, &[with_labels(&u, &supervised)]);
    assert_eq!(loss, loss2);
    assert_eq!(grads, grads2);

    // Token 3 is unsupervised but sits in the context of every target.
    let mut w = t.clone();
    w[3] = (w[3] + 1) % config().vocab_size as u32;
    let (loss3, _) = loss_and_grads(&mut m, &[with_labels(&w, &supervised)]);
    assert!((loss - loss3).abs() > 1e-9, "context change left the loss at {loss}");
}

#[test]
fn accumulation_matches_one_batch() {
    let mut m = trained_lora(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seqs: Vec<_> = (0..4)
        .map(|k| {
            let t = tokens(&mut rng, 10 + 3 * k);
            let sup: Vec<usize> = (0..t.len() - 1).filter(|c| c % (k + 2) == 1).collect();
            with_labels(&t, &sup)
        })
        .collect();
    zero_grads(&mut m);
    let whole = accumulate_gradients(&mut m, &[&seqs], &mut Tape::new()).unwrap();
    let g1 = adapter_grads(&m);
    zero_grads(&mut m);
    let split = accumulate_gradients(&mut m, &[&seqs[..1], &seqs[1..3], &seqs[3..]], &mut Tape::new()).unwrap();
    let g2 = adapter_grads(&m);
    assert!((whole - split).abs() < 1e-12);
    for (a, b) in g1.iter().zip(&g2) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn future_tokens_never_change_past_logits() {
    let m = trained_lora(7);
    let v = config().vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let n = rng.random_range(2..=config().max_positions);
        let t = tokens(&mut rng, n);
        let cut = rng.random_range(0..n - 1);
        let mut u = t.clone();
        for x in &mut u[cut + 1..] {
            *x = rng.random_range(0..v as u32);
        }
        let (a, b) = (m.forward(&t).unwrap(), m.forward(&u).unwrap());
        let prefix = (cut + 1) * v;
        assert_eq!(a.data()[..prefix], b.data()[..prefix], "a position ≤ {cut} changed");
    }
}

#[test]
fn fresh_adapters_leave_the_base_output_unchanged() {
    let base = Transformer::<f64>::new(config(), 9).unwrap();
    let cfg = LoraConfig { rank: 4, alpha: 8.0, targets: Matrix::ALL.to_vec(), init_std: 0.5 };
    let m = attach_lora(base.clone(), cfg, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t = tokens(&mut rng, 30);
    assert_eq!(base.forward(&t).unwrap().data(), m.forward(&t).unwrap().data());
}

fn base_hash<T: ntkt_core::Real>(m: &Transformer<T>) -> u64 {
    let bytes: Vec<u8> = m.params().iter().flat_map(|p| p.data().iter().flat_map(|x| x.as_f64().to_le_bytes())).collect();
    fnv1a(&bytes)
}

#[test]
fn training_adapters_freezes_the_base_and_merges_exactly() {
    let base = Transformer::<f32>::new(config(), 12).unwrap();
    let before = base_hash(&base);
    let m = attach_lora(base, LoraConfig::default(), 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let seqs: Vec<_> = (0..6)
        .map(|_| {
            let t = tokens(&mut rng, 20);
            let sup: Vec<usize> = (0..19).filter(|c| c % 3 == 0).collect();
            with_labels(&t, &sup)
        })
        .collect();
    let tc = TrainConfig { learning_rate: 1e-2, warmup_steps: 5, max_steps: 100, eval_every: 25, grad_accumulation: 1, ..TrainConfig::default() };
    let mut learner = LmLearner::new(m, &seqs[..5], &seqs[5..], &tc).unwrap();
    let outcome = fit(&mut learner, &tc, |_| {}).unwrap();
    assert_eq!(outcome.steps, 100);
    let m = learner.into_model();
    assert_eq!(base_hash(m.base()), before, "frozen base changed");
    assert!(m.adapters().iter().any(|a| a.b.data().iter().any(|&x| x != 0.0)), "adapters never moved");

    let merged = m.merged().unwrap();
    let t = tokens(&mut rng, 40);
    let (a, b) = (m.forward(&t).unwrap(), merged.forward(&t).unwrap());
    let max = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(max <= 1e-5, "merged forward differs by {max}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unsupervised_suffix_never_matters(seed in 0u64..1000, n in 4usize..30, k in 1usize..4) {
        let mut m = trained_lora(seed % 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = tokens(&mut rng, n);
        let last = (n - 2).saturating_sub(k);
        let sup: Vec<usize> = (0..=last).step_by(2).collect();
        let (loss, grads) = loss_and_grads(&mut m, &[with_labels(&t, &sup)]);
        let mut u = t.clone();
        for x in &mut u[last + 2..] {
            *x = rng.random_range(0..config().vocab_size as u32);
        }
        let (loss2, grads2) = loss_and_grads(&mut m, &[with_labels(&u, &sup)]);
        prop_assert_eq!(loss, loss2);
        prop_assert_eq!(grads, grads2);
    }
}
