use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ntkt_core::data::SplitKind;
use ntkt_core::serializer::Representation;

use crate::config::{Family, RunConfig};
use crate::error::{exit, CliError, Result};
use crate::io::Format;
use crate::pipeline::{self, Run};

/// Knowledge tracing as next-token prediction: simulate, prepare, train, evaluate, report.
#[derive(Debug, Parser)]
#[command(name = "ntkt", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset with known correctness probabilities.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        learners: Option<usize>,
        #[arg(long)]
        exercises: Option<usize>,
    },
    /// Split, render training histories to text and build the vocabulary.
    Prepare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Train an NTKT (base + adapters) or DKT model.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Sequentially predict every test interaction and compute metrics.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Cold-start protocols: per-timestep F1 for new learners, or seen vs unseen questions.
    Coldstart {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum)]
        mode: ColdstartMode,
    },
    /// Consolidate persisted metrics from run directories into tables and plot data.
    Report {
        /// Run directories, or parents containing them.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ColdstartMode {
    User,
    Question,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML or JSON RunConfig; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parent directory for run directories.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Existing dataset directory instead of simulating.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Recompute stages whose outputs already exist.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_parser = parse_repr)]
    repr: Option<Representation>,
    #[arg(long, value_enum)]
    family: Option<Family>,
    #[arg(long)]
    steps: Option<usize>,
}

fn parse_repr(s: &str) -> std::result::Result<Representation, String> {
    s.parse().map_err(|e: ntkt_core::Error| e.to_string())
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.set_seed(s);
        }
        if let Some(d) = &self.data {
            c.data.source = Some(d.clone());
        }
        if let Some(f) = self.format {
            c.data.format = f;
        }
        c.apply_overrides(&self.overrides)?;
        if let Some(o) = &self.out {
            c.output_dir = o.clone();
        }
        Ok(c)
    }
}

impl ModelArgs {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(r) = self.repr {
            c.serializer.representation = r;
        }
        if let Some(f) = self.family {
            c.model.family = f;
        }
        if let Some(s) = self.steps {
            c.train.max_steps = s;
        }
    }
}

fn open(common: &Common, model: Option<&ModelArgs>, edit: impl FnOnce(&mut RunConfig)) -> Result<Run> {
    let mut c = common.config()?;
    if let Some(m) = model {
        m.apply(&mut c);
    }
    edit(&mut c);
    let run = Run::open(c, common.force)?;
    println!("{}", run.dir.display());
    Ok(run)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, learners, exercises } => {
            let run = open(&common, None, |c| {
                if let Some(n) = learners {
                    c.simulator.sim.n_learners = n;
                }
                if let Some(n) = exercises {
                    c.simulator.sim.n_exercises = n;
                }
            })?;
            run.simulate()?;
        }
        Command::Prepare { common, model } => {
            let run = open(&common, Some(&model), |_| {})?;
            let (ds, _) = run.dataset()?;
            let split = run.split(&ds)?;
            run.prepare(&ds, &split)?;
        }
        Command::Train { common, model } => {
            open(&common, Some(&model), |_| {})?.train()?;
        }
        Command::Evaluate { common, model } => {
            let (_, m, _) = open(&common, Some(&model), |_| {})?.evaluate()?;
            println!("{}", serde_json::to_string(&m.metrics).expect("metrics serialise"));
        }
        Command::Coldstart { common, model, mode } => {
            let kind = match mode {
                ColdstartMode::User => SplitKind::UserColdstart,
                ColdstartMode::Question => SplitKind::QuestionColdstart,
            };
            let run = open(&common, Some(&model), |c| c.split.kind = kind)?;
            match mode {
                ColdstartMode::User => {
                    run.coldstart_user()?;
                }
                ColdstartMode::Question => {
                    let r = run.coldstart_question()?;
                    println!("seen F1 {:?} unseen F1 {:?} p {:?}", r.seen.f1, r.unseen.f1, r.p_value);
                }
            }
        }
        Command::Report { runs, out } => pipeline::report(&runs, &out)?,
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit status.
pub fn main_with<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    match run(cli) {
        Ok(()) => exit::OK,
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &CliError) -> u8 {
    eprintln!("ntkt: error: {e}");
    e.exit_code()
}
