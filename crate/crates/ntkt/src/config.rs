//! Run configuration: one structured file, flag overrides on top, content-hashed run directories.

use std::fs;
use std::path::{Path, PathBuf};

use ntkt_core::data::SplitKind;
use ntkt_core::dkt::DktTrainConfig;
use ntkt_core::nn::{LoraConfig, TransformerConfig};
use ntkt_core::serializer::{PromptTemplate, Representation, DEFAULT_PREAMBLE};
use ntkt_core::sim::{SimConfig, REFERENCE_CORRECTNESS_RATE};
use ntkt_core::tokenizer::DEFAULT_VOCAB_SIZE;
use ntkt_core::train::{EarlyStopConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::io::Format;

pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Ntkt,
    Dkt,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Ntkt => "ntkt",
            Family::Dkt => "dkt",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the split and model initialisation; `--seed` also rewrites every component seed.
    pub seed: u64,
    /// Parent of the run directories. Not part of the run's identity, so it is
    /// neither hashed nor persisted.
    #[serde(skip)]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub simulator: SimulatorConfig,
    pub split: SplitConfig,
    pub serializer: SerializerConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `dataset.*` and `exercises.*`; simulate when absent.
    pub source: Option<PathBuf>,
    pub format: Format,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    #[serde(flatten)]
    pub sim: SimConfig,
    /// When set, `global_intercept` is found by bisection so the mean correctness matches.
    pub calibrate_to: Option<f64>,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self { sim: SimConfig::default(), calibrate_to: Some(REFERENCE_CORRECTNESS_RATE) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub kind: SplitKind,
    pub train_fraction: f64,
    /// Held-out questions for the question cold-start split.
    pub held_out_questions: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { kind: SplitKind::HoldoutByLearner, train_fraction: 0.9, held_out_questions: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SerializerConfig {
    pub representation: Representation,
    pub preamble: String,
    pub max_chars: Option<usize>,
}

impl Default for SerializerConfig {
    fn default() -> Self {
        Self { representation: Representation::FullText, preamble: DEFAULT_PREAMBLE.to_string(), max_chars: None }
    }
}

impl SerializerConfig {
    pub fn template(&self) -> PromptTemplate {
        PromptTemplate { preamble: self.preamble.clone(), max_chars: self.max_chars }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub max_size: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { max_size: DEFAULT_VOCAB_SIZE }
    }
}

/// Transformer shape; the vocabulary size comes from the prepared data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_positions: usize,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        let d = TransformerConfig::desk_default(1);
        Self { n_layers: d.n_layers, n_heads: d.n_heads, d_model: d.d_model, d_ff: d.d_ff, max_positions: d.max_positions }
    }
}

impl ShapeConfig {
    pub fn with_vocab(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            vocab_size,
            max_positions: self.max_positions,
        }
    }
}

/// Language-model pretraining of the base on training-side text before the
/// adapters are attached. This stands in for the pretrained LLM; zero steps
/// keeps the random initialisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub eval_every: usize,
    pub early_stop: EarlyStopConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            learning_rate: 2e-3,
            warmup_steps: 20,
            weight_decay: 0.01,
            batch_size: 4,
            eval_every: 50,
            early_stop: EarlyStopConfig { min_delta: 0.001, patience: 3 },
        }
    }
}

impl PretrainConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            grad_accumulation: 1,
            max_steps: self.steps,
            eval_every: self.eval_every,
            early_stop: self.early_stop,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub transformer: ShapeConfig,
    pub pretrain: PretrainConfig,
    pub lora: LoraConfig,
    pub dkt: DktTrainConfig,
    /// Fraction of training learners used as the early-stopping stream.
    pub validation_fraction: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: Family::Ntkt,
            transformer: ShapeConfig::default(),
            pretrain: PretrainConfig::default(),
            lora: LoraConfig::default(),
            dkt: DktTrainConfig::default(),
            validation_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub permutations: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: ntkt_core::eval::DEFAULT_THRESHOLD, permutations: ntkt_core::eval::DEFAULT_PERMUTATIONS }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            simulator: SimulatorConfig::default(),
            split: SplitConfig::default(),
            serializer: SerializerConfig::default(),
            tokenizer: TokenizerConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn schema(path: &Path, message: impl ToString) -> CliError {
    CliError::Schema { path: path.to_path_buf(), message: message.to_string() }
}

impl RunConfig {
    /// Reads a `.toml` or `.json` config; anything else is parsed as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let value: serde_json::Value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| schema(path, e))?
        } else {
            let t: toml::Value = toml::from_str(&text).map_err(|e| schema(path, e))?;
            serde_json::to_value(t).map_err(|e| schema(path, e))?
        };
        serde_json::from_value(value).map_err(|e| schema(path, e))
    }

    /// Applies `dotted.key=value` overrides. Values are read as JSON when they
    /// parse as JSON and as plain strings otherwise.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut value = serde_json::to_value(&*self).expect("config serialises");
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{item}` is not key=value")))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut slot = &mut value;
            for part in key.split('.') {
                let obj = slot
                    .as_object_mut()
                    .ok_or_else(|| CliError::Usage(format!("override `{key}`: `{part}` is not inside a section")))?;
                slot = obj.entry(part.to_string()).or_insert(serde_json::Value::Null);
            }
            *slot = parsed;
        }
        let output_dir = std::mem::take(&mut self.output_dir);
        *self = serde_json::from_value(value).map_err(|e| schema(Path::new("<overrides>"), e))?;
        self.output_dir = output_dir;
        Ok(())
    }

    /// Sets the global seed and every component seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.simulator.sim.seed = seed;
        self.train.seed = seed;
        self.model.dkt.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.simulator.sim.validate()?;
        self.train.validate()?;
        self.model.dkt.validate()?;
        if self.model.pretrain.steps > 0 {
            self.model.pretrain.train_config(self.seed).validate()?;
        }
        self.model.transformer.with_vocab(1).validate()?;
        let f = self.split.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(schema(Path::new("split.train_fraction"), format!("{f} is outside (0, 1)")));
        }
        let v = self.model.validation_fraction;
        if !(v > 0.0 && v < 1.0) {
            return Err(schema(Path::new("model.validation_fraction"), format!("{v} is outside (0, 1)")));
        }
        Ok(())
    }

    /// Canonical JSON: the persisted form and the input to the content hash.
    pub fn canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(format!("run-{}", &self.content_hash()[..16]))
    }
}
