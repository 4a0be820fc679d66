//! Run configuration and the end-to-end stages behind the command line:
//! data generation, clustering, training, closed-loop evaluation, replay
//! and the latent-width sweep.
//!
//! Every file a stage writes carries a [`Stamp`] with the tool version and
//! the full [`RunConfig`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{is_header_line, kmeans_cluster, load_dataset, AnchorSet, KMeansOptions, TrajectoryDataset, HEADER_KEY, TRAJ_DIM};
use crate::belief::NUM_LATERAL;
use crate::diffusion::{LadModel, ModelConfig};
use crate::error::{LadError, Result};
use crate::metrics::{aggregate_report, evaluate_episode, BenchmarkReport, EpisodeResult, PenaltyTable, ScoreRow};
use crate::oracle::{generate_scenario_with, ContextEncoder, GeneratedScenario, OracleConfig, Perturbation, Scenario, ScenarioKind};
use crate::simulator::{run_episode, EpisodeConfig, ModelPolicy, RolloutLog};
use crate::training::{samples_from_generated, train, TrainConfig, TrainOutcome};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const SCENES_DIR: &str = "scenes";
pub const ANCHORS_FILE: &str = "anchors.json";
pub const ANCHOR_PLOT_FILE: &str = "anchors_plot.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const ROLLOUTS_DIR: &str = "rollouts";
pub const SWEEP_FILE: &str = "sweep.json";
pub const SWEEP_TEXT_FILE: &str = "sweep.txt";
pub const PLOT_SUFFIX: &str = ".plot.jsonl";

/// Consecutive scenario seeds `first..first + count`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRange {
    pub first: u64,
    pub count: u64,
}

impl SeedRange {
    pub fn iter(self) -> impl Iterator<Item = u64> {
        self.first..self.first + self.count
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory holding the dataset file and scene sidecars.
    pub data: Option<PathBuf>,
    pub anchors: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub penalties: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed: model initialization, shuffling, clustering and evaluation noise.
    pub seed: u64,
    pub kinds: Vec<ScenarioKind>,
    pub train_seeds: SeedRange,
    pub eval_seeds: SeedRange,
    pub perturbation: Perturbation,
    pub oracle: OracleConfig,
    pub train: TrainConfig,
    pub kmeans: KMeansOptions,
    /// Independent closed-loop evaluation runs.
    pub runs: usize,
    pub episode: EpisodeConfig,
    pub penalties: PenaltyTable,
    /// Latent widths visited by the sweep.
    pub sweep_dims: Vec<usize>,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            kinds: ScenarioKind::ALL.to_vec(),
            train_seeds: SeedRange { first: 0, count: 80 },
            eval_seeds: SeedRange { first: 1000, count: 10 },
            perturbation: Perturbation::training(),
            oracle: OracleConfig::default(),
            train: TrainConfig::default(),
            kmeans: KMeansOptions::default(),
            runs: 3,
            episode: EpisodeConfig::default(),
            penalties: PenaltyTable::default(),
            sweep_dims: vec![32, 64, 128],
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Sets the master seed and the seeds derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.model.seed = seed;
        self.train.plan.seed = seed;
        self
    }

    pub fn model(&self) -> &ModelConfig {
        &self.train.model
    }

    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(LadError::Config("no scenario kinds selected".into()));
        }
        for (i, k) in self.kinds.iter().enumerate() {
            if self.kinds[..i].contains(k) {
                return Err(LadError::Config(format!("scenario kind {k} listed twice")));
            }
        }
        if self.train_seeds.count == 0 || self.eval_seeds.count == 0 {
            return Err(LadError::Config("seed ranges must be non-empty".into()));
        }
        if self.runs == 0 {
            return Err(LadError::Config("need at least one evaluation run".into()));
        }
        self.train.validate()?;
        let m = self.model();
        if self.oracle.d_llm != m.d_llm || self.oracle.tokens != m.tokens {
            return Err(LadError::Config(format!(
                "context encoder emits {}x{} tokens but the model expects {}x{}",
                self.oracle.tokens, self.oracle.d_llm, m.tokens, m.d_llm
            )));
        }
        for &d in &self.sweep_dims {
            let mut c = *m;
            c.decoder.d = d;
            c.validate()?;
        }
        for &kind in &self.kinds {
            let layouts = |r: SeedRange| (kind.layout_seed(r.first), kind.layout_seed(r.first + r.count - 1));
            let (a0, a1) = layouts(self.train_seeds);
            let (b0, b1) = layouts(self.eval_seeds);
            if a0 <= b1 && b0 <= a1 {
                return Err(LadError::Config(format!(
                    "{kind}: evaluation seeds {:?} share layouts with training seeds {:?}",
                    self.eval_seeds, self.train_seeds
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LadError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| LadError::json(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn stamp(&self) -> Stamp {
        Stamp {
            tool_version: crate::VERSION.to_string(),
            config: self.clone(),
        }
    }

    fn out_dir(&self) -> Result<&Path> {
        self.paths
            .out
            .as_deref()
            .ok_or_else(|| LadError::Config("no output directory configured".into()))
    }

    fn input(&self, p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        p.clone().ok_or_else(|| LadError::Config(format!("no {what} path configured")))
    }
}

/// Provenance embedded in every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub tool_version: String,
    pub config: RunConfig,
}

impl Stamp {
    fn value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("stamp serializes")
    }

    fn header_line(&self) -> String {
        let mut s = serde_json::json!({ HEADER_KEY: self }).to_string();
        s.push('\n');
        s
    }
}

/// Object-valued JSON with the stamp merged in under the header key.
fn stamped_json(stamp: &Stamp, body: impl Serialize, path: &Path) -> Result<String> {
    let mut v = serde_json::to_value(body).map_err(|e| LadError::json(path, e))?;
    match v.as_object_mut() {
        Some(obj) => {
            obj.insert(HEADER_KEY.into(), stamp.value());
        }
        None => v = serde_json::json!({ HEADER_KEY: stamp, "body": v }),
    }
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| LadError::json(path, e))?;
    s.push('\n');
    Ok(s)
}

fn read_stamp(v: &serde_json::Value, path: &Path) -> Result<Stamp> {
    serde_json::from_value(v.get(HEADER_KEY).cloned().unwrap_or_default())
        .map_err(|e| LadError::Incompatible(format!("{}: missing or unreadable run stamp: {e}", path.display())))
}

/// Refuses to replace an existing file unless `force` is set.
pub fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(LadError::Exists(path.to_path_buf()));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LadError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| LadError::io(path, e))
}

fn scene_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(SCENES_DIR).join(format!("{id}.json"))
}

/// Expert drives for every configured kind over `seeds`.
pub fn generate(config: &RunConfig, seeds: SeedRange) -> Result<Vec<GeneratedScenario>> {
    let mut out = Vec::new();
    for &kind in &config.kinds {
        for seed in seeds.iter() {
            out.push(generate_scenario_with(seed, kind, config.perturbation)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSummary {
    pub scenarios: usize,
    pub records: usize,
    pub dataset: PathBuf,
}

/// Writes the training split: one dataset file plus a sidecar per scenario.
pub fn gen_data(config: &RunConfig, force: bool) -> Result<DataSummary> {
    config.validate()?;
    let dir = config.out_dir()?;
    let dataset = dir.join(DATASET_FILE);
    guard(&dataset, force)?;
    let scenes = dir.join(SCENES_DIR);
    if scenes.exists() {
        guard(&scenes, force)?;
        fs::remove_dir_all(&scenes).map_err(|e| LadError::io(&scenes, e))?;
    }
    create_dir(&scenes)?;
    let gens = generate(config, config.train_seeds)?;
    let stamp = config.stamp();
    let records: Vec<_> = gens.iter().flat_map(|g| g.records.iter().cloned()).collect();
    let n = records.len();
    for g in &gens {
        let p = scene_path(dir, &g.scenario.id());
        write(&p, &stamped_json(&stamp, g, &p)?)?;
    }
    let body = TrajectoryDataset::new(records)?.to_jsonl();
    write(&dataset, &(stamp.header_line() + &body))?;
    log::info!("wrote {n} records from {} scenarios to {}", gens.len(), dir.display());
    Ok(DataSummary {
        scenarios: gens.len(),
        records: n,
        dataset,
    })
}

/// Reads the stamp from the first line of a dataset file, if any.
pub fn dataset_stamp(path: &Path) -> Result<Option<Stamp>> {
    let text = fs::read_to_string(path).map_err(|e| LadError::io(path, e))?;
    match text.lines().next() {
        Some(line) if is_header_line(line) => {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| LadError::json(path, e))?;
            read_stamp(&v, path).map(Some)
        }
        _ => Ok(None),
    }
}

/// Joins the dataset records of `dir` with their scene sidecars.
pub fn load_data(dir: &Path) -> Result<Vec<GeneratedScenario>> {
    let dataset = load_dataset(&dir.join(DATASET_FILE))?;
    let mut grouped: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for r in dataset.records {
        grouped.entry(r.scenario.clone()).or_default().push(r);
    }
    let mut out = Vec::with_capacity(grouped.len());
    for (id, mut records) in grouped {
        let p = scene_path(dir, &id);
        let mut g = GeneratedScenario::load_sidecar(&p)?;
        records.sort_by_key(|r| r.frame);
        if records.len() != g.frames.len() || records.iter().enumerate().any(|(i, r)| r.frame != g.frames[i].frame) {
            return Err(LadError::Dataset(format!(
                "{id}: {} dataset records do not line up with {} recorded frames",
                records.len(),
                g.frames.len()
            )));
        }
        g.records = records;
        out.push(g);
    }
    Ok(out)
}

/// Clusters the dataset trajectories into `N_a` anchors and writes the
/// anchor file plus its plot data next to it.
pub fn cluster(config: &RunConfig, force: bool) -> Result<AnchorSet> {
    config.validate()?;
    let data = config.input(&config.paths.data, "dataset")?;
    let dataset_file = if data.is_dir() { data.join(DATASET_FILE) } else { data };
    let dir = config.out_dir()?;
    let anchors_path = dir.join(ANCHORS_FILE);
    let plot_path = dir.join(ANCHOR_PLOT_FILE);
    guard(&anchors_path, force)?;
    guard(&plot_path, force)?;
    let dataset = load_dataset(&dataset_file)?;
    let k = config.model().decoder.n_anchors;
    let set = kmeans_cluster(&dataset.trajectories(), k, config.seed, config.kmeans)?.anchors;
    create_dir(dir)?;
    let stamp = config.stamp();
    write(&anchors_path, &stamped_json(&stamp, &set, &anchors_path)?)?;
    write(&plot_path, &(stamp.header_line() + &set.plot_data()))?;
    log::info!("{} anchors (inertia {:.4}) written to {}", set.len(), set.inertia, anchors_path.display());
    Ok(set)
}

fn load_anchors(config: &RunConfig) -> Result<AnchorSet> {
    let p = config.input(&config.paths.anchors, "anchor file")?;
    let set = AnchorSet::load(&p)?;
    let want = config.model().decoder.n_anchors;
    if set.len() != want {
        return Err(LadError::Incompatible(format!(
            "{} holds {} anchors, configuration expects n_anchors={want}",
            p.display(),
            set.len()
        )));
    }
    Ok(set)
}

/// Trains on the configured data directory and anchor file; writes the
/// checkpoint and loss log to the output directory.
pub fn train_model(config: &RunConfig, force: bool) -> Result<TrainOutcome> {
    config.validate()?;
    let dir = config.out_dir()?;
    guard(&dir.join(CHECKPOINT_FILE), force)?;
    guard(&dir.join(LOSS_LOG_FILE), force)?;
    let data = load_data(&config.input(&config.paths.data, "dataset")?)?;
    let samples = samples_from_generated(&data)?;
    let anchors = load_anchors(config)?;
    let oracle = ContextEncoder::new(config.oracle)?;
    log::info!("training on {} frames from {} scenarios", samples.len(), data.len());
    train(&samples, &anchors, &oracle, &config.train, config.stamp().value(), Some(dir))
}

/// The stamp a training run embedded in its checkpoint, if any.
pub fn checkpoint_stamp(path: &Path) -> Result<Option<Stamp>> {
    let text = fs::read_to_string(path).map_err(|e| LadError::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| LadError::json(path, e))?;
    let meta = &v["meta"]["run"]["meta"];
    if meta.is_null() {
        return Ok(None);
    }
    serde_json::from_value(meta.clone())
        .map(Some)
        .map_err(|e| LadError::Incompatible(format!("{}: unreadable run stamp: {e}", path.display())))
}

fn checkpoint_checksum(run: &serde_json::Value) -> Option<u64> {
    run.get("oracle_checksum").and_then(serde_json::Value::as_u64)
}

/// Loads a checkpoint and refuses it when its architecture or context
/// encoder differs from the configuration.
pub fn load_model(config: &RunConfig, path: &Path) -> Result<LadModel> {
    let (model, run) = LadModel::load(path)?;
    let diff = model.config.differences(config.model());
    if !diff.is_empty() {
        return Err(LadError::Incompatible(format!(
            "checkpoint {} does not match the configuration (checkpoint vs config): {}",
            path.display(),
            diff.join(", ")
        )));
    }
    let oracle = ContextEncoder::new(config.oracle)?;
    if let Some(sum) = checkpoint_checksum(&run) {
        if sum != oracle.checksum() {
            return Err(LadError::Incompatible(format!(
                "checkpoint {} was trained against a different context encoder",
                path.display()
            )));
        }
    }
    Ok(model)
}

/// Per-episode rng seed; distinct for every run, kind and scenario seed.
pub fn episode_seed(master: u64, run: usize, kind: ScenarioKind, seed: u64) -> u64 {
    master.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((run as u64) << 48) ^ ((kind.index() as u64) << 40) ^ seed
}

struct Job {
    run: usize,
    kind: ScenarioKind,
    seed: u64,
}

/// Closed-loop evaluation of a loaded model. Rollout logs go to
/// `out/rollouts/run<i>/` when an output directory is given.
pub fn evaluate_model(config: &RunConfig, model: &LadModel, anchors: &AnchorSet, out: Option<&Path>) -> Result<BenchmarkReport> {
    let oracle = ContextEncoder::new(config.oracle)?;
    let stamp = config.stamp().value();
    let jobs: Vec<Job> = (0..config.runs)
        .flat_map(|run| {
            config
                .kinds
                .iter()
                .flat_map(move |&kind| config.eval_seeds.iter().map(move |seed| Job { run, kind, seed }))
        })
        .collect();
    if let Some(dir) = out {
        for run in 0..config.runs {
            create_dir(&dir.join(ROLLOUTS_DIR).join(format!("run{}", run + 1)))?;
        }
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len()).max(1);
    let chunk = jobs.len().div_ceil(workers);
    let episode = |job: &Job| -> Result<EpisodeResult> {
        let scenario = Scenario::build(job.seed, job.kind);
        let mut policy = ModelPolicy::new(model, &oracle, anchors)?;
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(config.seed, job.run, job.kind, job.seed));
        let log = run_episode(&scenario, &mut policy, &config.episode, stamp.clone(), &mut rng)?;
        if let Some(dir) = out {
            let p = dir
                .join(ROLLOUTS_DIR)
                .join(format!("run{}", job.run + 1))
                .join(format!("{}.jsonl", scenario.id()));
            log.save(&p)?;
        }
        evaluate_episode(&log, &scenario, &config.penalties)
    };
    let results: Vec<Result<EpisodeResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(episode).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut runs: Vec<Vec<EpisodeResult>> = vec![Vec::new(); config.runs];
    for (job, r) in jobs.iter().zip(results) {
        runs[job.run].push(r?);
    }
    aggregate_report(&runs, &config.penalties)
}

/// Loads checkpoint and anchors, evaluates, and writes rollouts plus the report.
pub fn evaluate(config: &RunConfig, force: bool) -> Result<BenchmarkReport> {
    config.validate()?;
    let dir = config.out_dir()?;
    guard(&dir.join(REPORT_FILE), force)?;
    guard(&dir.join(REPORT_TEXT_FILE), force)?;
    let model = load_model(config, &config.input(&config.paths.checkpoint, "checkpoint")?)?;
    let anchors = load_anchors(config)?;
    let report = evaluate_model(config, &model, &anchors, Some(dir))?;
    write_report(config, &report, dir)?;
    Ok(report)
}

pub fn write_report(config: &RunConfig, report: &BenchmarkReport, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let stamp = config.stamp();
    let p = dir.join(REPORT_FILE);
    write(&p, &stamped_json(&stamp, serde_json::json!({ "report": report }), &p)?)?;
    let mut text = String::new();
    let _ = writeln!(text, "# lad {} seed {} runs {}", stamp.tool_version, config.seed, config.runs);
    let _ = writeln!(text, "# config {}", serde_json::to_string(config).expect("config serializes"));
    text.push_str(&report.to_text());
    write(&dir.join(REPORT_TEXT_FILE), &text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub d: usize,
    pub parameters: usize,
    pub train_seconds: f64,
    pub final_loss: f64,
    pub score: ScoreRow,
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>6} {:>10} {:>9} {:>10} {:>8} {:>8} {:>7}", "d", "params", "train_s", "loss", "DS", "RC", "IS");
    for r in rows {
        let _ = writeln!(
            s,
            "{:>6} {:>10} {:>9.1} {:>10.4} {:>8.2} {:>8.2} {:>7.3}",
            r.d, r.parameters, r.train_seconds, r.final_loss, r.score.ds, r.score.rc, r.score.is
        );
    }
    s
}

/// Trains and evaluates one model per latent width in `sweep_dims`, all on
/// the same data and anchors, and writes a comparison table.
pub fn sweep(config: &RunConfig, force: bool) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let dir = config.out_dir()?;
    guard(&dir.join(SWEEP_FILE), force)?;
    let data = load_data(&config.input(&config.paths.data, "dataset")?)?;
    let samples = samples_from_generated(&data)?;
    let anchors = load_anchors(config)?;
    let oracle = ContextEncoder::new(config.oracle)?;
    let mut rows = Vec::new();
    for &d in &config.sweep_dims {
        let mut c = config.clone();
        c.train.model.decoder.d = d;
        let sub = dir.join(format!("d{d}"));
        guard(&sub.join(CHECKPOINT_FILE), force)?;
        let t0 = Instant::now();
        let outcome = train(&samples, &anchors, &oracle, &c.train, c.stamp().value(), Some(&sub))?;
        let train_seconds = t0.elapsed().as_secs_f64();
        let last_epoch = outcome.log.last().map_or(0, |r| r.epoch);
        let report = evaluate_model(&c, &outcome.model, &anchors, Some(&sub))?;
        write_report(&c, &report, &sub)?;
        let row = SweepRow {
            d,
            parameters: outcome.model.store.num_scalars(),
            train_seconds,
            final_loss: outcome.epoch_mean(last_epoch),
            score: report.mean,
        };
        log::info!("d={d}: DS {:.2} RC {:.2} IS {:.3}", row.score.ds, row.score.rc, row.score.is);
        rows.push(row);
    }
    let stamp = config.stamp();
    let p = dir.join(SWEEP_FILE);
    write(&p, &stamped_json(&stamp, serde_json::json!({ "rows": rows }), &p)?)?;
    write(&dir.join(SWEEP_TEXT_FILE), &sweep_table(&rows))?;
    Ok(rows)
}

/// Plot data for one frame: candidate polylines in world coordinates,
/// their scores and the belief.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotFrame {
    pub frame: usize,
    /// Ego `[x, y, yaw]`.
    pub ego: [f64; 3],
    pub selected: usize,
    pub polylines: Vec<Vec<[f64; 2]>>,
    pub scores: Vec<f64>,
    pub belief: [f64; NUM_LATERAL],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotHeader {
    pub scenario: String,
    pub kind: ScenarioKind,
    pub seed: u64,
    pub policy: String,
    pub tool_version: String,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum PlotLine {
    PlotHeader(PlotHeader),
    PlotFrame(PlotFrame),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotData {
    pub header: PlotHeader,
    pub frames: Vec<PlotFrame>,
}

impl PlotData {
    pub fn from_rollout(log: &RolloutLog, path: &Path) -> Result<Self> {
        let mut frames = Vec::with_capacity(log.frames.len());
        let mut n_a = None;
        for (i, f) in log.frames.iter().enumerate() {
            let bad = |msg: String| LadError::Record {
                path: path.to_path_buf(),
                line: i + 2,
                msg: format!("frame {}: {msg}", f.frame),
            };
            let belief = f.belief.ok_or_else(|| bad("no belief recorded".into()))?;
            if f.candidates.is_empty() || *n_a.get_or_insert(f.candidates.len()) != f.candidates.len() {
                return Err(bad(format!("{} candidate trajectories", f.candidates.len())));
            }
            if f.selected >= f.candidates.len() {
                return Err(bad(format!("selected candidate {} out of range", f.selected)));
            }
            let (c, s) = (f.state.yaw.cos(), f.state.yaw.sin());
            let polylines = f
                .candidates
                .iter()
                .map(|cand| {
                    cand[..TRAJ_DIM]
                        .chunks(2)
                        .map(|p| [f.state.x + c * p[0] - s * p[1], f.state.y + s * p[0] + c * p[1]])
                        .collect()
                })
                .collect();
            frames.push(PlotFrame {
                frame: f.frame,
                ego: [f.state.x, f.state.y, f.state.yaw],
                selected: f.selected,
                polylines,
                scores: f.candidates.iter().map(|cand| cand[TRAJ_DIM]).collect(),
                belief,
            });
        }
        Ok(Self {
            header: PlotHeader {
                scenario: log.header.scenario.clone(),
                kind: log.header.kind,
                seed: log.header.seed,
                policy: log.header.policy.clone(),
                tool_version: crate::VERSION.to_string(),
                config: log.header.config.clone(),
            },
            frames,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |line: PlotLine| {
            out.push_str(&serde_json::to_string(&line).expect("plot lines serialize"));
            out.push('\n');
        };
        push(PlotLine::PlotHeader(self.header.clone()));
        for f in &self.frames {
            push(PlotLine::PlotFrame(f.clone()));
        }
        out
    }

    /// Parses plot data; failures name the first offending frame.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut header = None;
        let mut frames: Vec<PlotFrame> = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |msg: String| LadError::Record {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("frame {}: {msg}", frames.len()),
            };
            match serde_json::from_str::<PlotLine>(line).map_err(|e| bad(e.to_string()))? {
                PlotLine::PlotHeader(h) if header.is_none() && frames.is_empty() => header = Some(h),
                PlotLine::PlotHeader(_) => return Err(bad("unexpected header".into())),
                PlotLine::PlotFrame(f) => {
                    if header.is_none() {
                        return Err(bad("missing header".into()));
                    }
                    let n_a = frames.first().map_or(f.polylines.len(), |g| g.polylines.len());
                    if f.polylines.is_empty()
                        || f.polylines.len() != n_a
                        || f.scores.len() != n_a
                        || f.selected >= n_a
                        || f.polylines.iter().any(|p| p.len() != TRAJ_DIM / 2)
                    {
                        return Err(bad("inconsistent candidate set".into()));
                    }
                    frames.push(f);
                }
            }
        }
        let header = header.ok_or_else(|| LadError::Record {
            path: path.to_path_buf(),
            line: 1,
            msg: "frame 0: missing header".into(),
        })?;
        Ok(Self { header, frames })
    }
}

fn is_plot_text(text: &str) -> bool {
    text.lines()
        .find(|l| !l.trim().is_empty())
        .and_then(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .is_some_and(|v| v["type"] == "plot_header")
}

/// Output name for a replay: `<stem>.plot.jsonl`, stable under repeated replays.
pub fn plot_file_name(input: &Path) -> String {
    let name = input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name
        .strip_suffix(PLOT_SUFFIX)
        .or_else(|| name.strip_suffix(".jsonl"))
        .unwrap_or(&name);
    format!("{stem}{PLOT_SUFFIX}")
}

/// Converts a rollout log (or existing plot data) into plot data under `out`.
pub fn replay(input: &Path, out: &Path, force: bool) -> Result<PathBuf> {
    let text = fs::read_to_string(input).map_err(|e| LadError::io(input, e))?;
    let plot = if is_plot_text(&text) {
        PlotData::parse(&text, input)?
    } else {
        let log = RolloutLog::load(input)?;
        PlotData::from_rollout(&log, input)?
    };
    let target = out.join(plot_file_name(input));
    guard(&target, force)?;
    create_dir(out)?;
    write(&target, &plot.to_jsonl())?;
    Ok(target)
}

/// Reads the anchor file's run stamp.
pub fn anchors_stamp(path: &Path) -> Result<Stamp> {
    let text = fs::read_to_string(path).map_err(|e| LadError::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| LadError::json(path, e))?;
    read_stamp(&v, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.kinds = vec![ScenarioKind::Straight, ScenarioKind::Fork];
        c.train_seeds.count = 2;
        c
    }

    #[test]
    fn default_config_validates_and_round_trips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = RunConfig::default();
        c.kinds.clear();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.eval_seeds = SeedRange { first: 39, count: 5 };
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.train.model.d_llm = 64;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.sweep_dims = vec![30];
        assert!(c.validate().is_err());
    }

    #[test]
    fn paired_fork_layouts_stay_apart() {
        let mut c = RunConfig::default();
        c.kinds = vec![ScenarioKind::Fork];
        c.train_seeds = SeedRange { first: 0, count: 41 };
        c.eval_seeds = SeedRange { first: 41, count: 2 };
        assert!(c.validate().is_err());
        c.train_seeds.count = 40;
        c.eval_seeds = SeedRange { first: 40, count: 2 };
        c.validate().unwrap();
    }

    #[test]
    fn data_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small();
        c.paths.out = Some(dir.path().to_path_buf());
        let summary = gen_data(&c, false).unwrap();
        assert_eq!(summary.scenarios, 4);
        assert!(matches!(gen_data(&c, false), Err(LadError::Exists(_))));
        let loaded = load_data(dir.path()).unwrap();
        let fresh = generate(&c, c.train_seeds).unwrap();
        assert_eq!(loaded.len(), fresh.len());
        let n: usize = loaded.iter().map(|g| g.records.len()).sum();
        assert_eq!(n, summary.records);
        assert_eq!(dataset_stamp(&summary.dataset).unwrap().unwrap().config, c);
        assert_eq!(samples_from_generated(&loaded).unwrap().len(), n);
    }

    #[test]
    fn plot_names_are_stable() {
        assert_eq!(plot_file_name(Path::new("a/fork-0001.jsonl")), "fork-0001.plot.jsonl");
        assert_eq!(plot_file_name(Path::new("b/fork-0001.plot.jsonl")), "fork-0001.plot.jsonl");
    }

    #[test]
    fn episode_seeds_differ_across_runs() {
        let a = episode_seed(0, 0, ScenarioKind::Fork, 1000);
        let b = episode_seed(0, 1, ScenarioKind::Fork, 1000);
        let c = episode_seed(0, 0, ScenarioKind::Straight, 1000);
        assert!(a != b && a != c && b != c);
    }
}
