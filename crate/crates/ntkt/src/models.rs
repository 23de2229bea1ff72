//! Trained models and their checkpoint encoding.

use ntkt_core::dkt::{Dkt, DktConfig, DktModel, QuestionIndex, PARAM_NAMES};
use ntkt_core::nn::{param_names, LoraAdapter, LoraConfig, LoraModel, Matrix, Transformer, TransformerConfig};
use ntkt_core::tokenizer::Vocab;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{CliError, Result};

#[derive(Serialize, Deserialize)]
struct NtktHeader {
    transformer: TransformerConfig,
    lora: LoraConfig,
    adapters: Vec<(usize, Matrix)>,
}

#[derive(Serialize, Deserialize)]
struct DktHeader {
    dkt: DktConfig,
    question_ids: Vec<String>,
}

pub enum Trained {
    Ntkt(LoraModel<f32>),
    Dkt(DktModel),
}

fn header<T: for<'de> Deserialize<'de>>(ckpt: &Checkpoint) -> Result<T> {
    serde_json::from_value(ckpt.header.config.clone())
        .map_err(|e| CliError::Integrity(format!("checkpoint config does not match its family: {e}")))
}

pub fn ntkt_checkpoint(model: &LoraModel<f32>, vocab: &Vocab, step: u64) -> Checkpoint {
    let base = model.base();
    let h = NtktHeader {
        transformer: base.config().clone(),
        lora: model.config().clone(),
        adapters: model.adapters().iter().map(|a| (a.layer, a.matrix)).collect(),
    };
    let mut c = Checkpoint::new("ntkt", serde_json::to_value(h).unwrap(), Some(vocab.fingerprint()), step);
    for (name, p) in param_names(base.config()).into_iter().zip(base.params()) {
        c.push(format!("base.{name}"), p);
    }
    for a in model.adapters() {
        c.push(format!("lora.{}.a", a.name()), &a.a);
        c.push(format!("lora.{}.b", a.name()), &a.b);
    }
    c
}

pub fn dkt_checkpoint(model: &DktModel, epochs: u64) -> Checkpoint {
    let h = DktHeader { dkt: model.net.config().clone(), question_ids: model.index.ids().to_vec() };
    let mut c = Checkpoint::new("dkt", serde_json::to_value(h).unwrap(), None, epochs);
    for (name, p) in PARAM_NAMES.iter().zip(model.net.params()) {
        c.push(*name, p);
    }
    c
}

/// Rebuilds the model, checking the vocabulary fingerprint for language models.
pub fn from_checkpoint(ckpt: &Checkpoint, vocab: Option<&Vocab>) -> Result<Trained> {
    match ckpt.header.family.as_str() {
        "ntkt" => {
            let h: NtktHeader = header(ckpt)?;
            let vocab = vocab.ok_or_else(|| CliError::Integrity("ntkt checkpoint needs a vocabulary".into()))?;
            let expected = format!("{:016x}", vocab.fingerprint());
            if ckpt.header.vocab_hash.as_deref() != Some(expected.as_str()) {
                return Err(CliError::Integrity(format!(
                    "checkpoint vocabulary {:?} does not match vocab.json ({expected})",
                    ckpt.header.vocab_hash
                )));
            }
            let params = param_names(&h.transformer)
                .iter()
                .map(|n| ckpt.tensor::<f32>(&format!("base.{n}")))
                .collect::<Result<Vec<_>>>()?;
            let base = Transformer::from_params(h.transformer, params)?;
            let mut adapters = Vec::with_capacity(h.adapters.len());
            for (layer, matrix) in h.adapters {
                let name = format!("blocks.{layer}.{}", matrix.as_str());
                adapters.push(LoraAdapter {
                    layer,
                    matrix,
                    a: ckpt.tensor(&format!("lora.{name}.a"))?,
                    b: ckpt.tensor(&format!("lora.{name}.b"))?,
                });
            }
            Ok(Trained::Ntkt(LoraModel::from_parts(base, h.lora, adapters)?))
        }
        "dkt" => {
            let h: DktHeader = header(ckpt)?;
            let params = PARAM_NAMES.iter().map(|n| ckpt.tensor::<f64>(n)).collect::<Result<Vec<_>>>()?;
            let net = Dkt::from_params(h.dkt, params)?;
            Ok(Trained::Dkt(DktModel { index: QuestionIndex::from_ids(h.question_ids), net }))
        }
        other => Err(CliError::Integrity(format!("unknown model family `{other}` in checkpoint"))),
    }
}
