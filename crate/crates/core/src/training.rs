//! Planning and action losses, closest-anchor matching, and the two-stage
//! optimization loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{nearest_anchor, AnchorSet, Trajectory, TRAJ_DIM};
use crate::belief::{BeliefState, EgoStatus, LateralAction, EGO_DIM, NUM_LATERAL};
use crate::diffusion::{normalize_trajectories, BatchInput, LadModel, ModelConfig, ScoredTrajectories};
use crate::error::{LadError, Result};
use crate::numerics::params::Gradients;
use crate::numerics::{AdamW, Array, Graph, Mlp2, ParamStore, ScheduleConfig, Var};
use crate::oracle::{scene_features, ContextEncoder, GeneratedScenario, SceneFeatures, ORACLE_PREFIX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Planning loss only; the action decoder is masked.
    SpatialGrounding,
    /// Planning loss plus the action cross-entropy.
    SemanticAlignment,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::SpatialGrounding => 1,
            Stage::SemanticAlignment => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub wp: f64,
    pub cls: f64,
    pub action: f64,
}

impl LossWeights {
    pub fn for_stage(stage: Stage) -> Self {
        Self {
            wp: 8.0,
            cls: 10.0,
            action: match stage {
                Stage::SpatialGrounding => 0.0,
                Stage::SemanticAlignment => 1.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.wp, self.cls, self.action].iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(LadError::Config(format!("loss weights must be non-negative: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingResult {
    pub positive: usize,
    pub labels: Vec<f64>,
}

/// Positive = the clean anchor with minimum ADE to the ground truth.
pub fn match_closest_anchor(anchors: &AnchorSet, gt: &Trajectory) -> MatchingResult {
    let (positive, _) = nearest_anchor(gt, anchors);
    let mut labels = vec![0.0; anchors.len()];
    labels[positive] = 1.0;
    MatchingResult { positive, labels }
}

/// Unweighted loss terms plus their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanLoss {
    /// Mean absolute coordinate error of the positive candidate, normalized units.
    pub regression: f64,
    /// BCE summed over all candidates.
    pub classification: f64,
    pub total: f64,
}

fn bce(p: f64, target: f64) -> f64 {
    let mut l = 0.0;
    if target > 0.0 {
        l -= target * p.ln();
    }
    if target < 1.0 {
        l -= (1.0 - target) * (1.0 - p).ln();
    }
    l
}

pub fn plan_loss(
    scored: &ScoredTrajectories,
    matching: &MatchingResult,
    gt: &Trajectory,
    weights: &LossWeights,
    r_max: f64,
) -> Result<PlanLoss> {
    if scored.len() != matching.labels.len() || matching.positive >= scored.len() {
        return Err(LadError::dim("plan_loss", &[scored.len()], &[matching.labels.len()]));
    }
    let pos = scored.trajectories[matching.positive].flat();
    let regression = pos.iter().zip(gt.flat()).map(|(a, b)| (a - b).abs() / r_max).sum::<f64>() / TRAJ_DIM as f64;
    let classification: f64 = scored.scores.iter().zip(&matching.labels).map(|(&p, &s)| bce(p, s)).sum();
    let total = weights.wp * regression + weights.cls * classification;
    if !total.is_finite() {
        return Err(LadError::Numeric("planning loss".into()));
    }
    Ok(PlanLoss {
        regression,
        classification,
        total,
    })
}

pub fn total_loss(plan: f64, belief: &BeliefState, target: LateralAction, weights: &LossWeights) -> f64 {
    if weights.action == 0.0 {
        plan
    } else {
        plan + weights.action * -belief.log_prob(target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self {
            stage1_epochs: 3,
            stage2_epochs: 3,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_epochs == 0 || self.stage1_epochs != self.stage2_epochs || self.batch_size == 0 {
            return Err(LadError::Config(format!(
                "stage plan needs equal non-zero epochs per stage and a positive batch size: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn stages(&self) -> impl Iterator<Item = Stage> {
        std::iter::repeat_n(Stage::SpatialGrounding, self.stage1_epochs).chain(std::iter::repeat_n(Stage::SemanticAlignment, self.stage2_epochs))
    }
}

/// What the decoder sees as belief during stage 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage1Belief {
    /// The current, gradient-detached action-decoder prediction.
    Live,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub plan: StagePlan,
    pub lr_peak: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Fraction of each stage spent warming up.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Probability per example of replacing the belief input with the ground-truth one-hot.
    pub teacher_forcing: f64,
    pub stage1_belief: Stage1Belief,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            plan: StagePlan::default(),
            lr_peak: 1e-3,
            lr_start: 1e-5,
            lr_end: 1e-5,
            warmup_fraction: 0.05,
            weight_decay: 1e-4,
            teacher_forcing: 0.5,
            stage1_belief: Stage1Belief::Live,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.plan.validate()?;
        if !(0.0..=1.0).contains(&self.teacher_forcing) || !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(LadError::Config("teacher_forcing and warmup_fraction must lie in [0, 1)".into()));
        }
        if !(self.lr_peak > 0.0) || self.weight_decay < 0.0 {
            return Err(LadError::Config("learning rate must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }

    fn schedule(&self, steps: usize) -> ScheduleConfig {
        let steps = steps.max(2);
        let warmup = ((steps as f64 * self.warmup_fraction).round() as usize).clamp(1, steps - 1);
        ScheduleConfig {
            warmup_steps: warmup,
            total_steps: steps,
            lr_start: self.lr_start.min(self.lr_peak),
            lr_peak: self.lr_peak,
            lr_end: self.lr_end.min(self.lr_peak),
        }
    }
}

/// One supervised frame: what the oracle sees, the ego summary and the expert targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingSample {
    pub features: SceneFeatures,
    pub ego: EgoStatus,
    pub target: Trajectory,
    pub label: LateralAction,
}

/// Pairs every recorded frame with its scene.
pub fn samples_from_generated(scenarios: &[GeneratedScenario]) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for g in scenarios {
        if g.records.len() != g.frames.len() {
            return Err(LadError::Dataset(format!(
                "{}: {} records for {} frames",
                g.scenario.id(),
                g.records.len(),
                g.frames.len()
            )));
        }
        for (i, r) in g.records.iter().enumerate() {
            let scene = g.scene(i);
            out.push(TrainingSample {
                features: scene_features(&scene, scene.instruction),
                ego: r.ego,
                target: r.trajectory,
                label: r.label,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    pub regression: f64,
    pub classification: f64,
    /// Weighted action cross-entropy; zero throughout stage 1.
    pub action_ce: f64,
    pub total: f64,
    /// Largest gradient magnitude over action-decoder parameters.
    pub action_grad_max: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: LadModel,
    pub log: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn epoch_mean(&self, epoch: usize) -> f64 {
        let xs: Vec<f64> = self.log.iter().filter(|r| r.epoch == epoch).map(|r| r.total).collect();
        xs.iter().sum::<f64>() / xs.len().max(1) as f64
    }
}

struct BatchLosses {
    total: Var,
    regression: f64,
    classification: f64,
    action_ce: f64,
}

fn batch_losses(g: &mut Graph, model: &LadModel, input: &BatchInput, targets: &[&TrainingSample], matches: &[MatchingResult], weights: &LossWeights) -> Result<BatchLosses> {
    let out = model.forward(g, input)?;
    let b = targets.len();
    let na = model.config.decoder.n_anchors;
    let r_max = model.config.decoder.r_max;
    let rows: Vec<usize> = matches.iter().enumerate().map(|(i, m)| i * na + m.positive).collect();
    let pos = g.gather_rows(out.y_refined, &rows)?;
    let gt: Vec<f64> = targets.iter().flat_map(|s| s.target.flat().map(|v| v / r_max)).collect();
    let gt = g.constant(Array::matrix(b, TRAJ_DIM, gt)?);
    let diff = g.sub(pos, gt)?;
    let diff = g.abs(diff);
    let reg = g.sum(diff);
    let reg = g.scale(reg, 1.0 / (TRAJ_DIM * b) as f64);
    let labels: Vec<f64> = matches.iter().flat_map(|m| m.labels.iter().copied()).collect();
    let cls = g.bce_with_logits_sum(out.score_logits, &labels)?;
    let cls = g.scale(cls, 1.0 / b as f64);
    let wreg = g.scale(reg, weights.wp);
    let wcls = g.scale(cls, weights.cls);
    let mut total = g.add(wreg, wcls)?;
    let mut action_ce = 0.0;
    if weights.action > 0.0 {
        let idx: Vec<usize> = targets.iter().map(|s| s.label.index()).collect();
        let ce = g.cross_entropy_sum(out.cond.action_logits, &idx)?;
        let ce = g.scale(ce, weights.action / b as f64);
        action_ce = g.value(ce).item();
        total = g.add(total, ce)?;
    }
    Ok(BatchLosses {
        total,
        regression: g.value(reg).item(),
        classification: g.value(cls).item(),
        action_ce,
    })
}

/// Loss of one minibatch under `stage`'s weights, exactly as a training step
/// computes it, with the piecewise-linear activation pattern and, on
/// request, the parameter gradients.
#[derive(Debug, Clone)]
pub struct MinibatchLoss {
    pub total: f64,
    pub kink_signature: u64,
    pub grads: Option<Gradients>,
}

pub fn minibatch_loss(model: &LadModel, input: &BatchInput, targets: &[TrainingSample], anchors: &AnchorSet, stage: Stage, with_grads: bool) -> Result<MinibatchLoss> {
    let refs: Vec<&TrainingSample> = targets.iter().collect();
    let matches: Vec<MatchingResult> = targets.iter().map(|s| match_closest_anchor(anchors, &s.target)).collect();
    let mut g = Graph::new(&model.store);
    let losses = batch_losses(&mut g, model, input, &refs, &matches, &LossWeights::for_stage(stage))?;
    Ok(MinibatchLoss {
        total: g.value(losses.total).item(),
        kink_signature: g.kink_signature(),
        grads: if with_grads { Some(g.backward(losses.total)?) } else { None },
    })
}

/// Two-stage training. When `out_dir` is given, a JSONL loss log is
/// streamed to `loss_log.jsonl` and `checkpoint.json` is rewritten
/// atomically after every epoch.
pub fn train(
    samples: &[TrainingSample],
    anchors: &AnchorSet,
    oracle: &ContextEncoder,
    config: &TrainConfig,
    meta: serde_json::Value,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(LadError::Dataset("empty training set".into()));
    }
    let mc = config.model;
    if oracle.config.d_llm != mc.d_llm || oracle.config.tokens != mc.tokens {
        return Err(LadError::Incompatible(format!(
            "oracle emits {}x{} tokens, model expects {}x{}",
            oracle.config.tokens, oracle.config.d_llm, mc.tokens, mc.d_llm
        )));
    }
    let oracle_checksum = oracle.checksum();
    let mut model = LadModel::new(mc)?;
    if model.store.iter().any(|(_, p)| p.name.starts_with(ORACLE_PREFIX)) {
        return Err(LadError::Config("oracle weights must not be trainable".into()));
    }
    let anchor_rows = model.prepare_anchors(anchors)?;
    let matches: Vec<MatchingResult> = samples.iter().map(|s| match_closest_anchor(anchors, &s.target)).collect();
    let action_ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("action."))
        .map(|(id, _)| id)
        .collect();

    let mut optimizer = AdamW::new(&model.store, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.plan.seed);
    let schedule = model.schedule();
    let bs = config.plan.batch_size;
    let batches_per_epoch = samples.len().div_ceil(bs);
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| LadError::io(dir, e))?;
            let p = dir.join("loss_log.jsonl");
            Some((BufWriter::new(File::create(&p).map_err(|e| LadError::io(&p, e))?), p))
        }
        None => None,
    };
    if let Some((w, p)) = log_file.as_mut() {
        let line = serde_json::json!({ crate::anchors::HEADER_KEY: meta });
        writeln!(w, "{line}").map_err(|e| LadError::io(p.as_path(), e))?;
    }
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    let mut stage_step = 0;
    let mut prev_stage = None;
    let mut lr_schedule = config.schedule(batches_per_epoch * config.plan.stage1_epochs);

    for (epoch, stage) in config.plan.stages().enumerate() {
        if prev_stage != Some(stage) {
            stage_step = 0;
            let epochs = match stage {
                Stage::SpatialGrounding => config.plan.stage1_epochs,
                Stage::SemanticAlignment => config.plan.stage2_epochs,
            };
            lr_schedule = config.schedule(batches_per_epoch * epochs);
            prev_stage = Some(stage);
        }
        let weights = LossWeights::for_stage(stage);
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let batch: Vec<&TrainingSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let batch_matches: Vec<MatchingResult> = chunk.iter().map(|&i| matches[i].clone()).collect();
            let feats: Vec<SceneFeatures> = batch.iter().map(|s| s.features).collect();
            let context = oracle.encode_features(&feats)?;
            let mut y = Vec::with_capacity(batch.len() * anchor_rows.len());
            let mut timesteps = Vec::with_capacity(batch.len());
            let mut overrides = Vec::with_capacity(batch.len());
            for s in &batch {
                let t = rng.random_range(1..=schedule.truncation());
                timesteps.push(t);
                y.extend_from_slice(schedule.add_truncated_noise(&anchor_rows, t, &mut rng)?.data());
                let forced = config.teacher_forcing > 0.0 && rng.random::<f64>() < config.teacher_forcing;
                overrides.push(if forced {
                    Some(BeliefState::one_hot(s.label).probs)
                } else if stage == Stage::SpatialGrounding && config.stage1_belief == Stage1Belief::Uniform {
                    Some([1.0 / NUM_LATERAL as f64; NUM_LATERAL])
                } else {
                    None
                });
            }
            let input = BatchInput {
                context,
                ego: batch.iter().map(|s| s.ego).collect(),
                y_current: Array::matrix(batch.len() * mc.decoder.n_anchors, TRAJ_DIM, y)?,
                timesteps,
                belief_override: overrides,
                detach_belief: stage == Stage::SpatialGrounding,
            };
            let diverged = |msg: String| LadError::Diverged { step, msg };
            let mut g = Graph::new(&model.store);
            let losses = batch_losses(&mut g, &model, &input, &batch, &batch_matches, &weights).map_err(|e| diverged(e.to_string()))?;
            let total = g.value(losses.total).item();
            if !total.is_finite() {
                return Err(diverged(format!("non-finite loss {total}")));
            }
            let grads = g.backward(losses.total)?;
            drop(g);
            if !grads.is_finite() {
                return Err(diverged("non-finite gradient".into()));
            }
            let action_grad_max = action_ids.iter().map(|&id| grads.max_abs(id)).fold(0.0, f64::max);
            let lr = optimizer.step(&mut model.store, &grads, stage_step, &lr_schedule)?;
            let record = StepRecord {
                step,
                epoch,
                stage: stage.number(),
                lr,
                regression: losses.regression,
                classification: losses.classification,
                action_ce: losses.action_ce,
                total,
                action_grad_max,
            };
            if let Some((w, p)) = log_file.as_mut() {
                let line = serde_json::to_string(&record).map_err(|e| LadError::json(p.as_path(), e))?;
                writeln!(w, "{line}").map_err(|e| LadError::io(p.as_path(), e))?;
            }
            if step % 200 == 0 {
                log::info!(
                    "step {step} stage {} lr {lr:.2e} loss {total:.4} (reg {:.4}, cls {:.4}, ce {:.4})",
                    stage.number(),
                    losses.regression,
                    losses.classification,
                    losses.action_ce
                );
            }
            log.push(record);
            step += 1;
            stage_step += 1;
        }
        if let Some(dir) = out_dir {
            if let Some((w, p)) = log_file.as_mut() {
                w.flush().map_err(|e| LadError::io(p.as_path(), e))?;
            }
            let run = serde_json::json!({
                "train": config,
                "epoch": epoch,
                "steps": step,
                "oracle_checksum": oracle_checksum,
                "meta": meta,
            });
            model.save(&dir.join("checkpoint.json"), run)?;
        }
    }
    if oracle.checksum() != oracle_checksum {
        return Err(LadError::Config("oracle weights changed during training".into()));
    }
    Ok(TrainOutcome { model, log })
}

/// Direct trajectory regression from the same context and ego inputs,
/// trained with L1 only. Used as the unimodal comparison point.
#[derive(Debug, Clone)]
pub struct RegressionBaseline {
    pub config: ModelConfig,
    pub store: ParamStore,
    bottleneck: Mlp2,
    head: Mlp2,
}

impl RegressionBaseline {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xba5e);
        let mut store = ParamStore::new();
        let d = config.decoder.d;
        let bottleneck = Mlp2::new(&mut store, "baseline.bottleneck", [config.d_llm, d, d], &mut rng)?;
        let head = Mlp2::new(&mut store, "baseline.head", [d + EGO_DIM, d, TRAJ_DIM], &mut rng)?;
        Ok(Self {
            config,
            store,
            bottleneck,
            head,
        })
    }

    fn forward(&self, g: &mut Graph, context: &Array, ego: &[EgoStatus]) -> Result<Var> {
        let c = g.constant(context.clone());
        let h = self.bottleneck.forward(g, c)?;
        let pooled = g.group_mean(h, self.config.tokens)?;
        let e: Vec<f64> = ego.iter().flat_map(|e| e.to_array()).collect();
        let e = g.constant(Array::matrix(ego.len(), EGO_DIM, e)?);
        let x = g.concat_cols(&[pooled, e])?;
        self.head.forward(g, x)
    }

    pub fn predict(&self, context: &Array, ego: EgoStatus) -> Result<Trajectory> {
        let mut g = Graph::new(&self.store);
        let y = self.forward(&mut g, context, &[ego])?;
        Trajectory::denormalized(g.value(y).row(0), self.config.decoder.r_max)
    }

    /// Same epochs, batch size and learning-rate recipe as the planner.
    pub fn train(samples: &[TrainingSample], oracle: &ContextEncoder, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Self::new(config.model)?;
        let mut optimizer = AdamW::new(&model.store, config.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(config.plan.seed ^ 0xba5e);
        let bs = config.plan.batch_size;
        let epochs = config.plan.stage1_epochs + config.plan.stage2_epochs;
        let schedule = config.schedule(samples.len().div_ceil(bs) * epochs);
        let r_max = config.model.decoder.r_max;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut step = 0;
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(bs) {
                let feats: Vec<SceneFeatures> = chunk.iter().map(|&i| samples[i].features).collect();
                let context = oracle.encode_features(&feats)?;
                let ego: Vec<EgoStatus> = chunk.iter().map(|&i| samples[i].ego).collect();
                let gt = normalize_trajectories(&chunk.iter().map(|&i| samples[i].target).collect::<Vec<_>>(), r_max)?;
                let mut g = Graph::new(&model.store);
                let y = model.forward(&mut g, &context, &ego)?;
                let gt = g.constant(gt);
                let diff = g.sub(y, gt)?;
                let diff = g.abs(diff);
                let loss = g.mean(diff);
                if !g.value(loss).is_finite() {
                    return Err(LadError::Diverged {
                        step,
                        msg: "baseline loss".into(),
                    });
                }
                let grads = g.backward(loss)?;
                drop(g);
                optimizer.step(&mut model.store, &grads, step, &schedule)?;
                step += 1;
            }
        }
        Ok(model)
    }
}
