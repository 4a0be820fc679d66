//! `lad`: generate expert data, cluster anchors, train, evaluate closed-loop,
//! replay rollouts into plot data and sweep the latent width.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lad_core::metrics::PenaltyTable;
use lad_core::oracle::ScenarioKind;
use lad_core::pipeline::{self, RunConfig, Stamp};
use lad_core::LadError;

const LOG_ENV: &str = "LAD_LOG_LEVEL";
const LOG_LEVELS: [&str; 3] = ["error", "info", "debug"];

#[derive(Parser)]
#[command(name = "lad", version, about = "Belief-conditioned diffusion planner: data, training and closed-loop evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record expert drives: a dataset file plus one scene file per scenario.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Scenario seeds per kind.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        first_seed: Option<u64>,
    },
    /// Cluster dataset trajectories into anchors.
    Cluster {
        #[command(flatten)]
        common: Common,
        /// Dataset file or the directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Two-stage training; writes a checkpoint and a loss log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        /// Epochs per stage.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Closed-loop evaluation; writes rollout logs and a benchmark report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        /// Held-out scenario seeds per kind.
        #[arg(long)]
        eval_seeds: Option<u64>,
    },
    /// Turn rollout logs into plot data (candidate fans, scores, belief).
    Replay {
        /// Rollout logs or previously written plot files.
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate once per latent width and tabulate the results.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        /// Comma-separated latent widths.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        eval_seeds: Option<u64>,
    },
    /// Print the default run configuration as JSON.
    Config,
}

#[derive(Args)]
struct Common {
    /// Run configuration file; defaults to the one embedded in the inputs.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated scenario kinds, or `all`.
    #[arg(long, value_parser = parse_kinds)]
    kinds: Option<KindList>,
    /// Latent width.
    #[arg(long)]
    d: Option<usize>,
    /// Number of anchors.
    #[arg(long)]
    na: Option<usize>,
    /// Denoising steps at inference.
    #[arg(long)]
    steps: Option<usize>,
    /// Independent evaluation runs.
    #[arg(long)]
    runs: Option<usize>,
    /// JSON object mapping infraction codes to penalty coefficients.
    #[arg(long)]
    penalties: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Clone)]
struct KindList(Vec<ScenarioKind>);

fn parse_kinds(s: &str) -> Result<KindList, String> {
    ScenarioKind::parse_list(s).map(KindList).map_err(|e| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(LadError),
}

impl From<LadError> for Failure {
    fn from(e: LadError) -> Self {
        match e {
            LadError::Config(_) | LadError::Unknown { .. } => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

impl Common {
    /// Base configuration (explicit file, else inherited), then flag overrides.
    fn resolve(&self, inherited: Option<Stamp>) -> Result<RunConfig, Failure> {
        let mut c = match (&self.config, inherited) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(stamp)) => stamp.config,
            (None, None) => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            c = c.with_seed(seed);
        }
        if let Some(KindList(kinds)) = &self.kinds {
            c.kinds = kinds.clone();
        }
        let dec = &mut c.train.model.decoder;
        if let Some(d) = self.d {
            dec.d = d;
        }
        if let Some(na) = self.na {
            dec.n_anchors = na;
        }
        if let Some(steps) = self.steps {
            dec.denoise_steps = steps;
        }
        if let Some(runs) = self.runs {
            c.runs = runs;
        }
        if let Some(p) = &self.penalties {
            c.penalties = PenaltyTable::load(p)?;
            c.paths.penalties = Some(p.clone());
        }
        c.paths.out = Some(self.out.clone());
        Ok(c)
    }
}

fn finish(c: RunConfig) -> Result<RunConfig, Failure> {
    c.validate()?;
    log::debug!("run configuration: {}", c.to_json());
    Ok(c)
}

fn anchors_or_none(path: &Path) -> Option<Stamp> {
    pipeline::anchors_stamp(path).ok()
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { common, seeds, first_seed } => {
            let mut c = common.resolve(None)?;
            if let Some(n) = seeds {
                c.train_seeds.count = n;
            }
            if let Some(s) = first_seed {
                c.train_seeds.first = s;
            }
            let c = finish(c)?;
            let s = pipeline::gen_data(&c, common.force)?;
            println!("{} scenarios, {} records -> {}", s.scenarios, s.records, s.dataset.display());
        }
        Command::Cluster { common, data } => {
            let dataset = if data.is_dir() { data.join(pipeline::DATASET_FILE) } else { data.clone() };
            let inherited = pipeline::dataset_stamp(&dataset).ok().flatten();
            let mut c = common.resolve(inherited)?;
            c.paths.data = Some(data);
            let c = finish(c)?;
            let set = pipeline::cluster(&c, common.force)?;
            println!("{} anchors, inertia {:.4} -> {}", set.len(), set.inertia, common.out.join(pipeline::ANCHORS_FILE).display());
        }
        Command::Train { common, data, anchors, epochs } => {
            let mut c = common.resolve(anchors_or_none(&anchors))?;
            if let Some(e) = epochs {
                c.train.plan.stage1_epochs = e;
                c.train.plan.stage2_epochs = e;
            }
            c.paths.data = Some(data);
            c.paths.anchors = Some(anchors);
            let c = finish(c)?;
            let outcome = pipeline::train_model(&c, common.force)?;
            let last = outcome.log.last().map_or(0, |r| r.epoch);
            println!(
                "{} steps, final epoch loss {:.4} -> {}",
                outcome.log.len(),
                outcome.epoch_mean(last),
                common.out.join(pipeline::CHECKPOINT_FILE).display()
            );
        }
        Command::Evaluate { common, checkpoint, anchors, eval_seeds } => {
            let inherited = pipeline::checkpoint_stamp(&checkpoint)?;
            let mut c = common.resolve(inherited)?;
            if let Some(n) = eval_seeds {
                c.eval_seeds.count = n;
            }
            c.paths.checkpoint = Some(checkpoint);
            c.paths.anchors = Some(anchors);
            let c = finish(c)?;
            let report = pipeline::evaluate(&c, common.force)?;
            print!("{}", report.to_text());
        }
        Command::Replay { logs, out, force } => {
            for log in &logs {
                let p = pipeline::replay(log, &out, force)?;
                println!("{}", p.display());
            }
        }
        Command::Sweep { common, data, anchors, dims, epochs, eval_seeds } => {
            let mut c = common.resolve(anchors_or_none(&anchors))?;
            if let Some(d) = dims {
                c.sweep_dims = d;
            }
            if let Some(e) = epochs {
                c.train.plan.stage1_epochs = e;
                c.train.plan.stage2_epochs = e;
            }
            if let Some(n) = eval_seeds {
                c.eval_seeds.count = n;
            }
            c.paths.data = Some(data);
            c.paths.anchors = Some(anchors);
            let c = finish(c)?;
            let rows = pipeline::sweep(&c, common.force)?;
            print!("{}", pipeline::sweep_table(&rows));
        }
        Command::Config => println!("{}", RunConfig::default().to_json()),
    }
    Ok(())
}

fn init_logging() -> Result<(), String> {
    let level = std::env::var(LOG_ENV).unwrap_or_else(|_| "info".into());
    let level = level.trim().to_ascii_lowercase();
    if !LOG_LEVELS.contains(&level.as_str()) {
        return Err(format!("{LOG_ENV} must be one of {}, got {level:?}", LOG_LEVELS.join(", ")));
    }
    env_logger::Builder::new().parse_filters(&level).format_timestamp(None).init();
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(msg) = init_logging() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
