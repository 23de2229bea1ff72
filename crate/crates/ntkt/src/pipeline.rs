//! Pipeline stages over one run directory.
//!
//! Each stage reuses its upstream outputs when they already exist in the run
//! directory and computes (and persists) them otherwise, so any subcommand can
//! be invoked on a fresh directory. Everything written is a pure function of
//! the RunConfig.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ntkt_core::data::{split_holdout, split_question_coldstart, split_user_coldstart, Dataset, SplitKind, SplitSpec};
use ntkt_core::dkt::{dkt_train, DktEpochRecord};
use ntkt_core::eval::{
    compute_metrics, question_coldstart_eval, sequential_evaluate, user_coldstart_curve, CurveRow, MetricsReport,
    NtktPredictor, Prediction, QuestionColdstartReport,
};
use ntkt_core::nn::{attach_lora, Transformer};
use ntkt_core::rng::derive_seed;
use ntkt_core::serializer::{render_timestep, Representation, SerializedExample};
use ntkt_core::sim::{calibrate_intercept, oracle_auc, simulate, GroundTruth, GroundTruthRecord};
use ntkt_core::tokenizer::{build_vocab, Vocab};
use ntkt_core::train::{fit, LmLearner, MaskedSequence, Supervision, TrainLogRecord};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Family, RunConfig, RUN_CONFIG_FILE};
use crate::error::{usage, CliError, Result};
use crate::io::{self, DATASET_FILE, EXERCISES_FILE, GROUND_TRUTH_FILE};
use crate::models::{dkt_checkpoint, from_checkpoint, ntkt_checkpoint, Trained};

pub const SUMMARY_FILE: &str = "summary.json";
pub const SPLIT_FILE: &str = "split.json";
pub const PREPARED_FILE: &str = "prepared.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const PRETRAIN_LOG_FILE: &str = "pretrain_log.jsonl";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const CURVE_FILE: &str = "curve.csv";
pub const QUESTION_REPORT_FILE: &str = "coldstart_question.json";
pub const LOCK_FILE: &str = ".lock";

/// Seed streams derived from the global seed.
mod stream {
    pub const SPLIT: u64 = 1;
    pub const VALIDATION: u64 = 2;
    pub const BASE_INIT: u64 = 3;
    pub const PRETRAIN: u64 = 4;
    pub const ADAPTERS: u64 = 5;
    pub const PERMUTATION: u64 = 6;
}

/// What `evaluate` persists as `metrics.json`; `report` reads nothing else.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub family: Family,
    pub representation: Option<Representation>,
    pub split: SplitKind,
    pub test_learners: usize,
    pub metrics: MetricsReport,
    /// AUC of the simulator's true probabilities on the same interactions.
    pub oracle_auc: Option<f64>,
}

struct Lock(PathBuf);

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// An open run directory, held exclusively for the lifetime of the value.
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
    /// Recompute stages whose outputs already exist.
    pub force: bool,
    _lock: Lock,
}

fn note(msg: impl AsRef<str>) {
    eprintln!("ntkt: {}", msg.as_ref());
}

impl Run {
    pub fn open(config: RunConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let dir = config.run_dir();
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let lock_path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&lock_path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                CliError::Io {
                    path: lock_path.clone(),
                    source: std::io::Error::new(e.kind(), "run directory is locked by another process"),
                }
            } else {
                CliError::io(&lock_path, e)
            }
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        let lock = Lock(lock_path);

        let persisted = dir.join(RUN_CONFIG_FILE);
        let text = config.canonical_json();
        match fs::read_to_string(&persisted) {
            Ok(existing) if existing != text => {
                return Err(CliError::Integrity(format!(
                    "{} holds a different config than this run's hash implies",
                    persisted.display()
                )))
            }
            Ok(_) => {}
            Err(_) => io::write_text(&persisted, &text)?,
        }
        Ok(Self { config, dir, force, _lock: lock })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn fresh(&self, names: &[&str]) -> bool {
        self.force || !names.iter().all(|n| self.path(n).exists())
    }

    fn seed(&self, stream: u64) -> u64 {
        derive_seed(self.config.seed, stream)
    }

    // ---- dataset -------------------------------------------------------

    /// Simulates or ingests the dataset, persisting the canonical jsonl files.
    pub fn dataset(&self) -> Result<(Dataset, Option<GroundTruth>)> {
        let outputs = [DATASET_FILE, EXERCISES_FILE, SUMMARY_FILE];
        if !self.fresh(&outputs) {
            let ds = io::ingest_dataset(&self.dir, io::Format::Jsonl)?;
            let gt_path = self.path(GROUND_TRUTH_FILE);
            let truth = if gt_path.exists() {
                Some(GroundTruth::from_records(io::read_jsonl::<GroundTruthRecord>(&gt_path)?, &ds))
            } else {
                None
            };
            return Ok((ds, truth));
        }
        let (ds, truth) = match &self.config.data.source {
            Some(src) => {
                note(format!("ingesting {}", src.display()));
                (io::ingest_dataset(src, self.config.data.format)?, None)
            }
            None => {
                let mut sim = self.config.simulator.sim.clone();
                if let Some(rate) = self.config.simulator.calibrate_to {
                    sim.global_intercept = calibrate_intercept(&sim, rate)?;
                }
                note(format!("simulating {} learners × {} exercises", sim.n_learners, sim.n_exercises));
                let (ds, truth) = simulate(&sim)?;
                (ds, Some(truth))
            }
        };
        io::write_dataset(&self.dir, &ds)?;
        if let Some(t) = &truth {
            io::write_jsonl(&self.path(GROUND_TRUTH_FILE), &t.records)?;
        }
        io::write_json(&self.path(SUMMARY_FILE), &ds.summary())?;
        Ok((ds, truth))
    }

    /// Explicit `simulate`: only meaningful without an external data source.
    pub fn simulate(&self) -> Result<Dataset> {
        if self.config.data.source.is_some() {
            usage!("simulate was asked for, but the config names a data source");
        }
        Ok(self.dataset()?.0)
    }

    pub fn split(&self, ds: &Dataset) -> Result<SplitSpec> {
        if !self.fresh(&[SPLIT_FILE]) {
            let split: SplitSpec = io::read_json(&self.path(SPLIT_FILE))?;
            split.validate(ds)?;
            return Ok(split);
        }
        let c = &self.config.split;
        let seed = self.seed(stream::SPLIT);
        let split = match c.kind {
            SplitKind::HoldoutByLearner => split_holdout(ds, c.train_fraction, seed)?,
            SplitKind::UserColdstart => split_user_coldstart(ds, c.train_fraction, seed)?,
            SplitKind::QuestionColdstart => split_question_coldstart(ds, c.held_out_questions, c.train_fraction, seed)?,
        };
        io::write_json(&self.path(SPLIT_FILE), &split)?;
        Ok(split)
    }

    // ---- prepare -------------------------------------------------------

    /// One full-history example per training learner, plus the vocabulary built from them.
    pub fn prepare(&self, ds: &Dataset, split: &SplitSpec) -> Result<(Vec<SerializedExample>, Vocab)> {
        if !self.fresh(&[PREPARED_FILE, VOCAB_FILE]) {
            let examples = io::read_jsonl(&self.path(PREPARED_FILE))?;
            let tokens: Vec<String> = io::read_json(&self.path(VOCAB_FILE))?;
            return Ok((examples, Vocab::from_tokens(tokens)?));
        }
        let train = split.training_stream(ds);
        let repr = self.config.serializer.representation;
        let template = self.config.serializer.template();
        // One example per (learner, timestep), learners in split order, timesteps ascending.
        let examples = train
            .learners()
            .iter()
            .flat_map(|l| (1..=l.interactions.len()).map(|t| render_timestep(&l.interactions, t, train.exercises(), repr, &template)))
            .collect::<ntkt_core::Result<Vec<_>>>()?;
        let vocab = build_vocab(examples.iter().map(|e| e.text.as_str()), self.config.tokenizer.max_size)?;
        io::write_jsonl(&self.path(PREPARED_FILE), &examples)?;
        io::write_json(&self.path(VOCAB_FILE), vocab.tokens())?;
        Ok((examples, vocab))
    }

    fn vocab(&self) -> Result<Option<Vocab>> {
        let p = self.path(VOCAB_FILE);
        if !p.exists() {
            return Ok(None);
        }
        let tokens: Vec<String> = io::read_json(&p)?;
        Ok(Some(Vocab::from_tokens(tokens)?))
    }

    // ---- train ---------------------------------------------------------

    pub fn train(&self) -> Result<(Trained, Option<Vocab>, Dataset, Option<GroundTruth>, SplitSpec)> {
        let (ds, truth) = self.dataset()?;
        let split = self.split(&ds)?;
        let family = self.config.model.family;
        if !self.fresh(&[CHECKPOINT_FILE]) {
            let vocab = match family {
                Family::Ntkt => Some(self.prepare(&ds, &split)?.1),
                Family::Dkt => self.vocab()?,
            };
            let model = from_checkpoint(&Checkpoint::load(&self.path(CHECKPOINT_FILE))?, vocab.as_ref())?;
            return Ok((model, vocab, ds, truth, split));
        }
        match family {
            Family::Ntkt => {
                let (examples, vocab) = self.prepare(&ds, &split)?;
                let lengths: Vec<usize> = split.training_stream(&ds).learners().iter().map(|l| l.interactions.len()).collect();
                if lengths.iter().sum::<usize>() != examples.len() {
                    return Err(CliError::Integrity(format!(
                        "{PREPARED_FILE} holds {} examples but the training split has {} interactions",
                        examples.len(),
                        lengths.iter().sum::<usize>()
                    )));
                }
                let model = self.train_ntkt(&examples, &lengths, &vocab)?;
                Ok((Trained::Ntkt(model), Some(vocab), ds, truth, split))
            }
            Family::Dkt => {
                let train = split.training_stream(&ds);
                note(format!("training DKT on {} learners", train.learner_count()));
                let (model, log) = dkt_train(&train, &self.config.model.dkt)?;
                io::write_jsonl::<DktEpochRecord>(&self.path(TRAIN_LOG_FILE), &log)?;
                dkt_checkpoint(&model, log.len() as u64).save(&self.path(CHECKPOINT_FILE))?;
                Ok((Trained::Dkt(model), None, ds, truth, split))
            }
        }
    }

    /// `lengths[k]` is the number of consecutive examples belonging to training learner `k`.
    fn train_ntkt(&self, examples: &[SerializedExample], lengths: &[usize], vocab: &Vocab) -> Result<ntkt_core::nn::LoraModel<f32>> {
        let mc = &self.config.model;
        if lengths.len() < 2 {
            return Err(ntkt_core::Error::Argument("need at least 2 training learners".into()).into());
        }
        let mut starts = Vec::with_capacity(lengths.len());
        lengths.iter().fold(0, |at, &n| {
            starts.push(at);
            at + n
        });
        // Seeded permutation of learners; the first `n_val` become the early-stopping stream.
        let val_seed = self.seed(stream::VALIDATION);
        let mut order: Vec<usize> = (0..lengths.len()).collect();
        order.sort_by_key(|&k| derive_seed(val_seed, k as u64));
        let n_val = ((mc.validation_fraction * lengths.len() as f64).round() as usize).clamp(1, lengths.len() - 1);
        let (val_learners, train_learners) = order.split_at(n_val);
        let all = |learners: &[usize]| -> Vec<usize> { learners.iter().flat_map(|&k| starts[k]..starts[k] + lengths[k]).collect() };
        // The full-history example of each learner already contains every earlier prefix.
        let last = |learners: &[usize]| -> Vec<usize> { learners.iter().filter(|&&k| lengths[k] > 0).map(|&k| starts[k] + lengths[k] - 1).collect() };
        let encode = |idx: &[usize], mode: Supervision| -> Result<Vec<MaskedSequence>> {
            idx.iter().map(|&i| Ok(MaskedSequence::from_example(vocab, &examples[i], mode)?)).collect()
        };

        let shape = mc.transformer.with_vocab(vocab.len());
        let mut base = Transformer::<f32>::new(shape, self.seed(stream::BASE_INIT))?;
        if mc.pretrain.steps > 0 {
            let tc = mc.pretrain.train_config(self.seed(stream::PRETRAIN));
            let (tr, ev) = (encode(&last(train_learners), Supervision::Context)?, encode(&last(val_learners), Supervision::Context)?);
            note(format!("pretraining base for up to {} steps", tc.max_steps));
            let mut learner = LmLearner::new(base, &tr, &ev, &tc)?;
            let outcome = fit(&mut learner, &tc, progress("pretrain"))?;
            io::write_jsonl::<TrainLogRecord>(&self.path(PRETRAIN_LOG_FILE), &outcome.log)?;
            base = learner.into_model();
        }

        let model = attach_lora(base, mc.lora.clone(), self.seed(stream::ADAPTERS))?;
        let tc = &self.config.train;
        let (tr, ev) = (encode(&all(train_learners), tc.supervision)?, encode(&all(val_learners), tc.supervision)?);
        note(format!("fine-tuning {} adapter parameters for up to {} steps", model.trainable_count(), tc.max_steps));
        let mut learner = LmLearner::new(model, &tr, &ev, tc)?;
        let outcome = fit(&mut learner, tc, progress("train"))?;
        io::write_jsonl::<TrainLogRecord>(&self.path(TRAIN_LOG_FILE), &outcome.log)?;
        let model = learner.into_model();
        ntkt_checkpoint(&model, vocab, outcome.steps as u64).save(&self.path(CHECKPOINT_FILE))?;
        Ok(model)
    }

    // ---- evaluate ------------------------------------------------------

    pub fn evaluate(&self) -> Result<(Vec<Prediction>, RunMetrics, SplitSpec)> {
        if !self.fresh(&[PREDICTIONS_FILE, METRICS_FILE]) {
            let (ds, _) = self.dataset()?;
            let split = self.split(&ds)?;
            return Ok((io::read_jsonl(&self.path(PREDICTIONS_FILE))?, io::read_json(&self.path(METRICS_FILE))?, split));
        }
        let (model, vocab, ds, truth, split) = self.train()?;
        let repr = self.config.serializer.representation;
        note(format!("evaluating {} test learners", split.test_learners.len()));
        let preds = match &model {
            Trained::Dkt(m) => sequential_evaluate(m, &ds, &split)?,
            Trained::Ntkt(m) => {
                let template = self.config.serializer.template();
                let vocab = vocab.as_ref().expect("language models carry a vocabulary");
                let p = NtktPredictor { model: m, vocab, representation: repr, template: &template };
                sequential_evaluate(&p, &ds, &split)?
            }
        };
        let metrics = compute_metrics(&preds, self.config.eval.threshold)?;
        let oracle = match &truth {
            Some(t) => {
                let test = split.test_stream(&ds);
                let its: Vec<_> = test.interactions().cloned().collect();
                oracle_auc(t, &its).ok()
            }
            None => None,
        };
        let family = self.config.model.family;
        let summary = RunMetrics {
            family,
            representation: (family == Family::Ntkt).then_some(repr),
            split: split.kind,
            test_learners: split.test_learners.len(),
            metrics,
            oracle_auc: oracle,
        };
        io::write_jsonl(&self.path(PREDICTIONS_FILE), &preds)?;
        io::write_json(&self.path(METRICS_FILE), &summary)?;
        Ok((preds, summary, split))
    }

    pub fn coldstart_user(&self) -> Result<Vec<CurveRow>> {
        let (preds, _, _) = self.evaluate()?;
        let curve = user_coldstart_curve(&preds, self.config.eval.threshold);
        io::write_text(&self.path(CURVE_FILE), &curve_csv(&curve))?;
        Ok(curve)
    }

    pub fn coldstart_question(&self) -> Result<QuestionColdstartReport> {
        let (preds, _, split) = self.evaluate()?;
        let e = &self.config.eval;
        let report = question_coldstart_eval(&preds, &split, e.threshold, e.permutations, self.seed(stream::PERMUTATION))?;
        io::write_json(&self.path(QUESTION_REPORT_FILE), &report)?;
        Ok(report)
    }
}

fn progress(stage: &'static str) -> impl FnMut(&TrainLogRecord) {
    move |r| note(format!("{stage} step {}: lr {:.2e} train {:.4} eval {:.4}", r.step, r.lr, r.train_loss, r.eval_loss))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.6}"))
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("timestep,f1,n\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.timestep, fmt_opt(r.f1), r.n));
    }
    s
}

// ---- report ---------------------------------------------------------------

/// One run as seen by `report`.
struct ReportRow {
    name: String,
    metrics: RunMetrics,
    curve: Option<String>,
    question: Option<QuestionColdstartReport>,
}

fn collect_runs(inputs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    let mut dirs = Vec::new();
    for input in inputs {
        if input.join(METRICS_FILE).exists() {
            dirs.push(input.clone());
            continue;
        }
        let entries = fs::read_dir(input).map_err(|e| CliError::io(input, e))?;
        let mut found: Vec<PathBuf> =
            entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join(METRICS_FILE).exists()).collect();
        found.sort();
        dirs.extend(found);
    }
    if dirs.is_empty() {
        usage!("no run directory with a {METRICS_FILE} under the given paths");
    }
    dirs.into_iter()
        .map(|d| {
            let name = d.file_name().map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned());
            let curve = fs::read_to_string(d.join(CURVE_FILE)).ok();
            let q = d.join(QUESTION_REPORT_FILE);
            let question = if q.exists() { Some(io::read_json(&q)?) } else { None };
            Ok(ReportRow { name, metrics: io::read_json(&d.join(METRICS_FILE))?, curve, question })
        })
        .collect()
}

fn label(m: &RunMetrics) -> String {
    match m.representation {
        Some(r) => format!("{} ({})", m.family.as_str(), r.as_str()),
        None => m.family.as_str().to_string(),
    }
}

/// Writes `report.md`, `report.csv`, `curves.csv` and `question_coldstart.csv` into `out`.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let rows = collect_runs(inputs)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;

    let mut by_split: BTreeMap<String, Vec<&ReportRow>> = BTreeMap::new();
    for r in &rows {
        by_split.entry(serde_json::to_string(&r.metrics.split).unwrap().trim_matches('"').to_string()).or_default().push(r);
    }
    let mut md = String::new();
    for (split, rs) in &by_split {
        md.push_str(&format!("## {split}\n\n| Model | F1 | Accuracy | AUC | Oracle AUC | n | Run |\n|---|---|---|---|---|---|---|\n"));
        for r in rs {
            let m = &r.metrics;
            md.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} |\n",
                label(m),
                fmt_opt(m.metrics.f1),
                fmt_opt(Some(m.metrics.accuracy)),
                fmt_opt(m.metrics.auc),
                fmt_opt(m.oracle_auc),
                m.metrics.n,
                r.name
            ));
        }
        md.push('\n');
    }
    io::write_text(&out.join("report.md"), &md)?;

    let mut csv = String::from("run,family,representation,split,n,accuracy,precision,recall,f1,auc,oracle_auc\n");
    for r in &rows {
        let m = &r.metrics;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.name,
            m.family.as_str(),
            m.representation.map_or("", |x| x.as_str()),
            serde_json::to_string(&m.split).unwrap().trim_matches('"'),
            m.metrics.n,
            fmt_opt(Some(m.metrics.accuracy)),
            fmt_opt(m.metrics.precision),
            fmt_opt(m.metrics.recall),
            fmt_opt(m.metrics.f1),
            fmt_opt(m.metrics.auc),
            fmt_opt(m.oracle_auc)
        ));
    }
    io::write_text(&out.join("report.csv"), &csv)?;

    let mut curves = String::from("run,model,timestep,f1,n\n");
    for r in &rows {
        if let Some(c) = &r.curve {
            for line in c.lines().skip(1) {
                curves.push_str(&format!("{},{},{line}\n", r.name, label(&r.metrics)));
            }
        }
    }
    io::write_text(&out.join("curves.csv"), &curves)?;

    let mut q = String::from("run,model,seen_f1,unseen_f1,f1_gap,p_value\n");
    for r in &rows {
        if let Some(x) = &r.question {
            q.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.name,
                label(&r.metrics),
                fmt_opt(x.seen.f1),
                fmt_opt(x.unseen.f1),
                fmt_opt(x.f1_gap),
                fmt_opt(x.p_value)
            ));
        }
    }
    io::write_text(&out.join("question_coldstart.csv"), &q)?;
    Ok(())
}

/// Byte-level listing of a run directory, lock file excluded.
pub fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name == LOCK_FILE || !path.is_file() {
            continue;
        }
        let mut bytes = Vec::new();
        std::io::Read::read_to_end(&mut File::open(&path).map_err(|e| CliError::io(&path, e))?, &mut bytes)
            .map_err(|e| CliError::io(&path, e))?;
        out.insert(name, bytes);
    }
    Ok(out)
}
