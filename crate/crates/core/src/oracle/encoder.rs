//! Frozen random context encoder standing in for a language-model backbone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scenario::{Instruction, SceneState};
use crate::error::{LadError, Result};
use crate::numerics::{gemm, Array, ParamId, ParamStore};

pub const ROUTE_POINTS: usize = 10;
pub const ROUTE_SPACING: f64 = 3.0;
pub const MAX_OBSTACLES: usize = 8;
const OBSTACLE_FEATURES: usize = 7;
pub const FEATURE_DIM: usize = ROUTE_POINTS * 2 + MAX_OBSTACLES * OBSTACLE_FEATURES + Instruction::COUNT + 1;
pub const ORACLE_PREFIX: &str = "oracle.";

/// Fixed-size numeric summary of a scene, in the ego frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneFeatures(pub [f64; FEATURE_DIM]);

/// Route lookahead, nearest obstacles (zero-padded), instruction one-hot, speed.
pub fn scene_features(scene: &SceneState, instruction: Instruction) -> SceneFeatures {
    let mut f = [0.0; FEATURE_DIM];
    let ego = scene.ego;
    let s0 = scene.route.project([ego.x, ego.y]).s;
    for i in 0..ROUTE_POINTS {
        let p = ego.to_local(scene.route.point_at(s0 + ROUTE_SPACING * (i + 1) as f64));
        f[2 * i] = p[0] / 20.0;
        f[2 * i + 1] = p[1] / 20.0;
    }
    let mut near: Vec<_> = scene
        .obstacles
        .iter()
        .map(|o| (ego.to_local([o.x, o.y]), o))
        .collect();
    near.sort_by(|a, b| a.0[0].hypot(a.0[1]).total_cmp(&b.0[0].hypot(b.0[1])));
    let base = ROUTE_POINTS * 2;
    for (j, (p, o)) in near.iter().take(MAX_OBSTACLES).enumerate() {
        let v = ego.rotate_to_local([o.vx, o.vy]);
        let slot = &mut f[base + j * OBSTACLE_FEATURES..][..OBSTACLE_FEATURES];
        slot.copy_from_slice(&[p[0] / 20.0, p[1] / 20.0, v[0] / 10.0, v[1] / 10.0, o.length / 10.0, o.width / 10.0, 1.0]);
    }
    let base = base + MAX_OBSTACLES * OBSTACLE_FEATURES;
    f[base + instruction.id()] = 1.0;
    f[FEATURE_DIM - 1] = scene.speed / 10.0;
    SceneFeatures(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Context tokens K.
    pub tokens: usize,
    /// Token width D_llm.
    pub d_llm: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            tokens: 8,
            d_llm: 256,
            hidden: 512,
            seed: 0x5eed_0ac1e,
        }
    }
}

/// `K` context vectors of width `D_llm`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenContext {
    pub tokens: Array,
}

impl HiddenContext {
    pub fn new(tokens: Array) -> Result<Self> {
        if tokens.shape().len() != 2 || !tokens.is_finite() {
            return Err(LadError::Numeric(format!("hidden context of shape {:?}", tokens.shape())));
        }
        Ok(Self { tokens })
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.rows()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }
}

/// `tokens = reshape(W2 · tanh(W1 · f + b1) + b2)` with weights drawn once
/// from a fixed seed and never updated.
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    pub config: OracleConfig,
    store: ParamStore,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl ContextEncoder {
    pub fn new(config: OracleConfig) -> Result<Self> {
        if config.tokens == 0 || config.d_llm == 0 || config.hidden == 0 {
            return Err(LadError::Config(format!("degenerate oracle configuration {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let out = config.tokens * config.d_llm;
        let w1 = store.add_uniform(format!("{ORACLE_PREFIX}w1"), &[FEATURE_DIM, config.hidden], (3.0f64 / 8.0).sqrt(), &mut rng)?;
        let b1 = store.add_uniform(format!("{ORACLE_PREFIX}b1"), &[config.hidden], 0.5, &mut rng)?;
        let w2 = store.add_uniform(
            format!("{ORACLE_PREFIX}w2"),
            &[config.hidden, out],
            (3.0 / (0.36 * config.hidden as f64)).sqrt(),
            &mut rng,
        )?;
        let b2 = store.add_uniform(format!("{ORACLE_PREFIX}b2"), &[out], 0.1, &mut rng)?;
        Ok(Self {
            config,
            store,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn weights(&self) -> &ParamStore {
        &self.store
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    /// Encodes a batch of feature rows into `[B * K, D_llm]`.
    pub fn encode_features(&self, features: &[SceneFeatures]) -> Result<Array> {
        let b = features.len();
        if b == 0 {
            return Err(LadError::Config("empty feature batch".into()));
        }
        let (h, out) = (self.config.hidden, self.config.tokens * self.config.d_llm);
        let x: Vec<f64> = features.iter().flat_map(|f| f.0).collect();
        let mut hidden = vec![0.0; b * h];
        gemm(b, FEATURE_DIM, h, &x, false, self.store.value(self.w1).data(), false, &mut hidden, 0.0);
        let b1 = self.store.value(self.b1).data();
        for row in hidden.chunks_mut(h) {
            for (v, bias) in row.iter_mut().zip(b1) {
                *v = (*v + bias).tanh();
            }
        }
        let mut tokens = vec![0.0; b * out];
        gemm(b, h, out, &hidden, false, self.store.value(self.w2).data(), false, &mut tokens, 0.0);
        let b2 = self.store.value(self.b2).data();
        for row in tokens.chunks_mut(out) {
            row.iter_mut().zip(b2).for_each(|(v, bias)| *v += bias);
        }
        Array::new(vec![b * self.config.tokens, self.config.d_llm], tokens)
    }

    pub fn encode(&self, scene: &SceneState, instruction: Instruction) -> Result<HiddenContext> {
        HiddenContext::new(self.encode_features(&[scene_features(scene, instruction)])?)
    }
}

/// Encodes one scene under a given instruction with frozen weights.
pub fn encode_context(scene: &SceneState, instruction: Instruction, encoder: &ContextEncoder) -> Result<HiddenContext> {
    encoder.encode(scene, instruction)
}
