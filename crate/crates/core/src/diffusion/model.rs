//! The learned planner: feature bottleneck, action decoder, state-intent
//! encoder and the anchor-conditioned denoising decoder, sharing one
//! parameter store.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{denormalize_trajectories, NoiseSchedule, ScoredTrajectories};
use crate::anchors::{AnchorSet, TRAJ_DIM};
use crate::belief::{ActionDecoder, BeliefState, EgoStatus, StateIntentEncoder, EGO_DIM, NUM_LATERAL, NUM_LONGITUDINAL};
use crate::error::{LadError, Result};
use crate::numerics::{
    load_checkpoint, save_checkpoint, timestep_embedding, Array, CrossAttention, Graph, LayerNorm, Linear, Mlp2, ParamId, ParamStore, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Latent width d.
    pub d: usize,
    pub heads: usize,
    /// Refinement steps N at inference.
    pub denoise_steps: usize,
    /// Anchors N_a.
    pub n_anchors: usize,
    /// Coordinate normalization range, meters.
    pub r_max: f64,
    pub time_dim: usize,
    pub total_steps: usize,
    pub truncation: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d: 128,
            heads: 4,
            denoise_steps: 2,
            n_anchors: 20,
            r_max: 50.0,
            time_dim: 64,
            total_steps: 1000,
            truncation: 50,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(LadError::Config(format!(
                "latent dimension {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.denoise_steps == 0 || self.n_anchors == 0 {
            return Err(LadError::Config("need at least one denoising step and one anchor".into()));
        }
        if !(self.r_max > 0.0) || self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(LadError::Config(format!(
                "invalid r_max {} or time_dim {}",
                self.r_max, self.time_dim
            )));
        }
        NoiseSchedule::new(self.total_steps, self.truncation).map(|_| ())
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::new(self.total_steps, self.truncation).expect("validated schedule")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Context token width D_llm.
    pub d_llm: usize,
    /// Context tokens K.
    pub tokens: usize,
    pub decoder: DecoderConfig,
    pub action_hidden: [usize; 2],
    /// Adds the longitudinal head and appends its probabilities to the state-intent vector.
    pub longitudinal: bool,
    /// Initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_llm: 256,
            tokens: 8,
            decoder: DecoderConfig::default(),
            action_hidden: [256, 64],
            longitudinal: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_llm == 0 || self.tokens == 0 || self.action_hidden.contains(&0) {
            return Err(LadError::Config(format!("degenerate model configuration {self:?}")));
        }
        self.decoder.validate()
    }

    pub fn state_intent_dim(&self) -> usize {
        EGO_DIM + NUM_LATERAL + if self.longitudinal { NUM_LONGITUDINAL } else { 0 }
    }

    /// Human-readable list of architecture mismatches against `other`.
    pub fn differences(&self, other: &ModelConfig) -> Vec<String> {
        let mut out = Vec::new();
        let mut cmp = |name: &str, a: String, b: String| {
            if a != b {
                out.push(format!("{name}: {a} vs {b}"));
            }
        };
        cmp("d_llm", self.d_llm.to_string(), other.d_llm.to_string());
        cmp("tokens", self.tokens.to_string(), other.tokens.to_string());
        cmp("d", self.decoder.d.to_string(), other.decoder.d.to_string());
        cmp("heads", self.decoder.heads.to_string(), other.decoder.heads.to_string());
        cmp("n_anchors", self.decoder.n_anchors.to_string(), other.decoder.n_anchors.to_string());
        cmp("denoise_steps", self.decoder.denoise_steps.to_string(), other.decoder.denoise_steps.to_string());
        cmp("r_max", self.decoder.r_max.to_string(), other.decoder.r_max.to_string());
        cmp("time_dim", self.decoder.time_dim.to_string(), other.decoder.time_dim.to_string());
        cmp("action_hidden", format!("{:?}", self.action_hidden), format!("{:?}", other.action_hidden));
        cmp("longitudinal", self.longitudinal.to_string(), other.longitudinal.to_string());
        out
    }
}

/// One minibatch of decoder inputs.
#[derive(Debug, Clone)]
pub struct BatchInput {
    /// `[B * K, D_llm]`
    pub context: Array,
    pub ego: Vec<EgoStatus>,
    /// Normalized current trajectories, `[B * N_a, 10]`.
    pub y_current: Array,
    /// Diffusion timestep per example.
    pub timesteps: Vec<usize>,
    /// Per-example replacement of the predicted belief fed to the decoder.
    pub belief_override: Vec<Option<[f64; NUM_LATERAL]>>,
    /// Stops gradients from the planning loss reaching the action decoder.
    pub detach_belief: bool,
}

impl BatchInput {
    pub fn batch_size(&self) -> usize {
        self.ego.len()
    }
}

/// Conditioning shared by every denoising step.
#[derive(Debug, Clone, Copy)]
pub struct Conditions {
    pub h_llm: Var,
    pub z_si: Var,
    pub action_logits: Var,
    pub long_logits: Option<Var>,
    /// Belief probabilities actually fed to the state-intent encoder.
    pub belief: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub cond: Conditions,
    pub y_refined: Var,
    pub score_logits: Var,
}

#[derive(Debug, Clone)]
pub struct Inference {
    /// The action decoder's own prediction.
    pub belief: BeliefState,
    pub longitudinal: Option<[f64; NUM_LONGITUDINAL]>,
    pub scored: ScoredTrajectories,
}

fn finite(g: &Graph, v: Var, layer: &str) -> Result<Var> {
    if g.value(v).is_finite() {
        Ok(v)
    } else {
        Err(LadError::Numeric(format!("non-finite output of {layer}")))
    }
}

#[derive(Debug, Clone)]
pub struct LadModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub bottleneck: Mlp2,
    pub anchor_encoder: Mlp2,
    /// Learned per-anchor query embedding, `[N_a, d]`.
    pub anchor_embedding: ParamId,
    pub context_attn: CrossAttention,
    pub guidance_attn: CrossAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: Mlp2,
    pub time_mlp: Mlp2,
    pub waypoint_head: Linear,
    pub score_head: Linear,
    pub state_intent: StateIntentEncoder,
    pub action: ActionDecoder,
    pub longitudinal: Option<ActionDecoder>,
}

impl LadModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let dc = config.decoder;
        let d = dc.d;
        let s = &mut store;
        let bottleneck = Mlp2::new(s, "diffusion.bottleneck", [config.d_llm, d, d], &mut rng)?;
        let anchor_encoder = Mlp2::new(s, "diffusion.anchor_encoder", [TRAJ_DIM, d, d], &mut rng)?;
        let anchor_embedding = s.add_uniform("diffusion.anchor_embedding", &[dc.n_anchors, d], 0.1, &mut rng)?;
        let context_attn = CrossAttention::new(s, "diffusion.context_attn", d, dc.heads, &mut rng)?;
        let guidance_attn = CrossAttention::new(s, "diffusion.guidance_attn", d, dc.heads, &mut rng)?;
        let ffn_norm = LayerNorm::new(s, "diffusion.ffn.norm", d)?;
        let ffn = Mlp2::new(s, "diffusion.ffn", [d, 2 * d, d], &mut rng)?;
        let time_mlp = Mlp2::new(s, "diffusion.time", [dc.time_dim, d, 2 * d], &mut rng)?;
        // the head also sees the noisy trajectory itself, so removing the
        // noise does not have to pass through the latent
        let waypoint_head = Linear::new(s, "diffusion.waypoint_head", d + TRAJ_DIM, TRAJ_DIM, &mut rng)?;
        // small initial offsets keep early refinements near the anchors
        s.value_mut(waypoint_head.w).data_mut().iter_mut().for_each(|w| *w *= 0.1);
        let score_head = Linear::new(s, "diffusion.score_head", d, 1, &mut rng)?;
        let state_intent = StateIntentEncoder::new(s, "state_intent", config.state_intent_dim(), d, &mut rng)?;
        let action = ActionDecoder::new(
            s,
            "action.lateral",
            config.d_llm,
            config.action_hidden,
            NUM_LATERAL,
            config.tokens,
            &mut rng,
        )?;
        let longitudinal = if config.longitudinal {
            Some(ActionDecoder::new(
                s,
                "action.longitudinal",
                config.d_llm,
                config.action_hidden,
                NUM_LONGITUDINAL,
                config.tokens,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            bottleneck,
            anchor_encoder,
            anchor_embedding,
            context_attn,
            guidance_attn,
            ffn_norm,
            ffn,
            time_mlp,
            waypoint_head,
            score_head,
            state_intent,
            action,
            longitudinal,
        })
    }

    pub fn schedule(&self) -> NoiseSchedule {
        self.config.decoder.schedule()
    }

    pub fn zero_waypoint_head(&mut self) {
        self.waypoint_head.zero(&mut self.store);
    }

    pub fn zero_score_head(&mut self) {
        self.score_head.zero(&mut self.store);
    }

    /// Normalized `[N_a, 10]` anchor matrix, validated against the model.
    pub fn prepare_anchors(&self, anchors: &AnchorSet) -> Result<Array> {
        if anchors.len() != self.config.decoder.n_anchors {
            return Err(LadError::Incompatible(format!(
                "anchor file holds {} anchors, model expects n_anchors={}",
                anchors.len(),
                self.config.decoder.n_anchors
            )));
        }
        super::normalize_trajectories(&anchors.anchors, self.config.decoder.r_max)
    }

    /// Token-wise projection of the context into the latent space: `[K, D_llm] -> [K, d]`.
    pub fn bottleneck(&self, context: &Array) -> Result<Array> {
        let mut g = Graph::new(&self.store);
        let c = g.constant(context.clone());
        let h = self.bottleneck.forward(&mut g, c)?;
        Ok(g.value(h).clone())
    }

    /// Latent embedding of each anchor: `[N_a, d]`.
    pub fn encode_anchors(&self, anchors: &AnchorSet) -> Result<Array> {
        let a = super::normalize_trajectories(&anchors.anchors, self.config.decoder.r_max)?;
        let mut g = Graph::new(&self.store);
        let x = g.constant(a);
        let z = self.anchor_encoder.forward(&mut g, x)?;
        Ok(g.value(z).clone())
    }

    pub fn encode_conditions(&self, g: &mut Graph, input: &BatchInput) -> Result<Conditions> {
        let b = input.batch_size();
        let k = self.config.tokens;
        if input.context.rows() != b * k || input.context.cols() != self.config.d_llm {
            return Err(LadError::dim("context", input.context.shape(), &[b * k, self.config.d_llm]));
        }
        let ctx = g.constant(input.context.clone());
        let h_llm = self.bottleneck.forward(g, ctx)?;
        let h_llm = finite(g, h_llm, "bottleneck")?;
        let action_logits = self.action.logits(g, ctx)?;
        let action_logits = finite(g, action_logits, "action decoder")?;
        let mut probs = g.softmax_rows(action_logits);
        if input.detach_belief {
            probs = g.detach(probs);
        }
        if input.belief_override.iter().any(Option::is_some) {
            if input.belief_override.len() != b {
                return Err(LadError::dim("belief override", &[input.belief_override.len()], &[b]));
            }
            let mut keep = Vec::with_capacity(b * NUM_LATERAL);
            let mut forced = Vec::with_capacity(b * NUM_LATERAL);
            for o in &input.belief_override {
                match o {
                    Some(p) => {
                        keep.extend([0.0; NUM_LATERAL]);
                        forced.extend_from_slice(p);
                    }
                    None => {
                        keep.extend([1.0; NUM_LATERAL]);
                        forced.extend([0.0; NUM_LATERAL]);
                    }
                }
            }
            let keep = g.constant(Array::matrix(b, NUM_LATERAL, keep)?);
            let forced = g.constant(Array::matrix(b, NUM_LATERAL, forced)?);
            let kept = g.mul(probs, keep)?;
            probs = g.add(kept, forced)?;
        }
        let ego: Vec<f64> = input.ego.iter().flat_map(|e| e.to_array()).collect();
        let ego = g.constant(Array::matrix(b, EGO_DIM, ego)?);
        let mut parts = vec![ego, probs];
        let long_logits = match &self.longitudinal {
            Some(head) => {
                let l = head.logits(g, ctx)?;
                let mut p = g.softmax_rows(l);
                if input.detach_belief {
                    p = g.detach(p);
                }
                parts.push(p);
                Some(l)
            }
            None => None,
        };
        let c = g.concat_cols(&parts)?;
        let z_si = self.state_intent.forward(g, c)?;
        let z_si = finite(g, z_si, "state-intent encoder")?;
        Ok(Conditions {
            h_llm,
            z_si,
            action_logits,
            long_logits,
            belief: probs,
        })
    }

    /// One refinement of `y: [B * N_a, 10]` at per-example timesteps `t`.
    /// Returns the refined trajectories and one score logit per candidate.
    pub fn denoise_step(&self, g: &mut Graph, y: Var, t: &[usize], cond: &Conditions) -> Result<(Var, Var)> {
        let b = t.len();
        let na = self.config.decoder.n_anchors;
        if g.value(y).rows() != b * na || g.value(y).cols() != TRAJ_DIM {
            return Err(LadError::dim("denoise_step", g.value(y).shape(), &[b * na, TRAJ_DIM]));
        }
        let z = self.anchor_encoder.forward(g, y)?;
        let table = g.param(self.anchor_embedding);
        let idx: Vec<usize> = (0..b * na).map(|i| i % na).collect();
        let e = g.gather_rows(table, &idx)?;
        let z = g.add(z, e)?;
        let z = finite(g, z, "anchor encoder")?;
        let h = self.context_attn.forward(g, z, cond.h_llm, b)?;
        let h = finite(g, h, "context attention")?;
        let h = self.guidance_attn.forward(g, h, cond.z_si, b)?;
        let h = finite(g, h, "guidance attention")?;
        let hn = self.ffn_norm.forward(g, h)?;
        let f = self.ffn.forward(g, hn)?;
        let h = g.add(h, f)?;
        let h = finite(g, h, "feed-forward")?;

        let td = self.config.decoder.time_dim;
        let mut emb = Vec::with_capacity(b * td);
        for &ti in t {
            emb.extend(timestep_embedding(ti as f64, td)?);
        }
        let emb = g.constant(Array::matrix(b, td, emb)?);
        let ss = self.time_mlp.forward(g, emb)?;
        let ss = g.repeat_rows(ss, na);
        let d = self.config.decoder.d;
        let scale = g.slice_cols(ss, 0, d)?;
        let shift = g.slice_cols(ss, d, 2 * d)?;
        let hs = g.mul(h, scale)?;
        let h = g.add(h, hs)?;
        let h = g.add(h, shift)?;
        let h = finite(g, h, "timestep modulation")?;

        let hy = g.concat_cols(&[h, y])?;
        let offsets = self.waypoint_head.forward(g, hy)?;
        let y_refined = g.add(y, offsets)?;
        let y_refined = finite(g, y_refined, "waypoint head")?;
        let logits = self.score_head.forward(g, h)?;
        let logits = finite(g, logits, "score head")?;
        Ok((y_refined, logits))
    }

    /// Conditioning plus a single denoising step at `input.timesteps` (the training pass).
    pub fn forward(&self, g: &mut Graph, input: &BatchInput) -> Result<ForwardOutput> {
        let cond = self.encode_conditions(g, input)?;
        let y = g.constant(input.y_current.clone());
        let (y_refined, score_logits) = self.denoise_step(g, y, &input.timesteps, &cond)?;
        Ok(ForwardOutput {
            cond,
            y_refined,
            score_logits,
        })
    }

    /// Full inference for one frame: noise the anchors at the truncation
    /// step, then refine along the timestep ladder, each step's output
    /// feeding the next.
    pub fn infer<R: Rng>(
        &self,
        context: &Array,
        ego: EgoStatus,
        anchors: &Array,
        belief_override: Option<&BeliefState>,
        rng: &mut R,
    ) -> Result<Inference> {
        let schedule = self.schedule();
        let noisy = schedule.add_truncated_noise(anchors, schedule.truncation(), rng)?;
        self.refine(context, ego, noisy, belief_override)
    }

    /// Runs the refinement ladder from already-noised anchors.
    pub fn refine(&self, context: &Array, ego: EgoStatus, noisy: Array, belief_override: Option<&BeliefState>) -> Result<Inference> {
        let input = BatchInput {
            context: context.clone(),
            ego: vec![ego],
            y_current: noisy,
            timesteps: vec![self.config.decoder.truncation],
            belief_override: vec![belief_override.map(|b| b.probs)],
            detach_belief: true,
        };
        let mut g = Graph::new(&self.store);
        let cond = self.encode_conditions(&mut g, &input)?;
        let mut y = g.constant(input.y_current.clone());
        let mut logits = None;
        let mut steps = 0;
        for t in self.schedule().ladder(self.config.decoder.denoise_steps) {
            let (y_next, l) = self.denoise_step(&mut g, y, &[t], &cond)?;
            y = y_next;
            logits = Some(l);
            steps += 1;
        }
        let logits = logits.expect("at least one denoising step");
        let scores: Vec<f64> = g.value(logits).data().iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
        let trajectories = denormalize_trajectories(g.value(y), self.config.decoder.r_max)?;
        let belief = BeliefState::from_logits(g.value(cond.action_logits).data())?;
        let longitudinal = match cond.long_logits {
            Some(l) => {
                let p = crate::numerics::softmax(g.value(l).data())?;
                Some(p.try_into().expect("four longitudinal classes"))
            }
            None => None,
        };
        Ok(Inference {
            belief,
            longitudinal,
            scored: ScoredTrajectories::new(trajectories, scores, steps)?,
        })
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "model": self.config, "run": extra });
        save_checkpoint(path, &self.store, meta)
    }

    /// Loads a checkpoint; the stored parameter set must match the configured architecture exactly.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (store, manifest) = load_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_value(manifest.meta["model"].clone())
            .map_err(|e| LadError::Incompatible(format!("checkpoint model configuration: {e}")))?;
        let mut model = LadModel::new(config)?;
        let mut problems = Vec::new();
        for (id, p) in model.store.iter() {
            match store.id(&p.name) {
                Some(src) if store.value(src).shape() == p.value.shape() => {}
                Some(src) => problems.push(format!("{}: {:?} vs {:?}", p.name, store.value(src).shape(), p.value.shape())),
                None => problems.push(format!("{}: missing (id {})", p.name, id.index())),
            }
        }
        if store.len() != model.store.len() {
            problems.push(format!("parameter count {} vs {}", store.len(), model.store.len()));
        }
        if !problems.is_empty() {
            return Err(LadError::Incompatible(problems.join("; ")));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.get(id).name.clone();
            let src = store.id(&name).expect("checked above");
            *model.store.value_mut(id) = store.value(src).clone();
        }
        Ok((model, manifest.meta["run"].clone()))
    }

    /// Errors with a field-by-field diff when `expected` describes a different architecture.
    pub fn check_compatible(&self, expected: &ModelConfig) -> Result<()> {
        let diff = self.config.differences(expected);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(LadError::Incompatible(format!(
                "checkpoint vs requested configuration: {}",
                diff.join(", ")
            )))
        }
    }
}
