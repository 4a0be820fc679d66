//! Meta-action belief: the action decoder, the state-intent fusion and its
//! encoder into the shared latent space.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LadError, Result};
use crate::numerics::graph::log_softmax_at;
use crate::numerics::{softmax, Array, Graph, Linear, Mlp2, ParamStore, Var};

pub const NUM_LATERAL: usize = 6;
pub const NUM_LONGITUDINAL: usize = 4;
pub const EGO_DIM: usize = 2;

/// Lateral meta-actions, encoded 0..=5 in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LateralAction {
    LaneFollow,
    Straight,
    Left,
    Right,
    LaneChangeLeft,
    LaneChangeRight,
}

impl LateralAction {
    pub const ALL: [LateralAction; NUM_LATERAL] = [
        LateralAction::LaneFollow,
        LateralAction::Straight,
        LateralAction::Left,
        LateralAction::Right,
        LateralAction::LaneChangeLeft,
        LateralAction::LaneChangeRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            LateralAction::LaneFollow => "LaneFollow",
            LateralAction::Straight => "Straight",
            LateralAction::Left => "Left",
            LateralAction::Right => "Right",
            LateralAction::LaneChangeLeft => "LaneChangeLeft",
            LateralAction::LaneChangeRight => "LaneChangeRight",
        }
    }
}

impl fmt::Display for LateralAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LateralAction {
    type Err = LadError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| LadError::Unknown {
                what: "lateral action",
                value: s.to_string(),
            })
    }
}

/// Longitudinal meta-actions for the optional second head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LongitudinalAction {
    Accelerate,
    Keep,
    Decelerate,
    Stop,
}

impl LongitudinalAction {
    pub fn index(self) -> usize {
        self as usize
    }

    /// Derived from the speed implied by the planned waypoints.
    pub fn from_speeds(current: f64, planned: f64) -> Self {
        if planned < 0.5 {
            LongitudinalAction::Stop
        } else if planned > current + 0.5 {
            LongitudinalAction::Accelerate
        } else if planned < current - 0.5 {
            LongitudinalAction::Decelerate
        } else {
            LongitudinalAction::Keep
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoStatus {
    /// m/s
    pub speed: f64,
    /// world-frame heading, radians in [-pi, pi]
    pub yaw: f64,
}

impl EgoStatus {
    pub fn new(speed: f64, yaw: f64) -> Result<Self> {
        if !speed.is_finite() || !yaw.is_finite() || speed < 0.0 {
            return Err(LadError::Config(format!("invalid ego status speed={speed} yaw={yaw}")));
        }
        Ok(Self { speed, yaw })
    }

    pub fn to_array(self) -> [f64; EGO_DIM] {
        [self.speed, self.yaw]
    }
}

/// Probability distribution over the lateral actions, with log-probabilities
/// kept alongside so the cross-entropy never takes `ln(0)` of a rounded value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub probs: [f64; NUM_LATERAL],
    #[serde(skip)]
    log_probs: Option<[f64; NUM_LATERAL]>,
}

impl BeliefState {
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.len() != NUM_LATERAL {
            return Err(LadError::dim("belief logits", &[logits.len()], &[NUM_LATERAL]));
        }
        let p = softmax(logits)?;
        let mut probs = [0.0; NUM_LATERAL];
        let mut log_probs = [0.0; NUM_LATERAL];
        for i in 0..NUM_LATERAL {
            probs[i] = p[i];
            log_probs[i] = log_softmax_at(logits, i);
        }
        Ok(Self {
            probs,
            log_probs: Some(log_probs),
        })
    }

    pub fn from_probs(probs: [f64; NUM_LATERAL]) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
            return Err(LadError::Config(format!("belief {probs:?} is not a distribution")));
        }
        Ok(Self { probs, log_probs: None })
    }

    pub fn uniform() -> Self {
        Self::from_logits(&[0.0; NUM_LATERAL]).expect("uniform logits")
    }

    pub fn one_hot(action: LateralAction) -> Self {
        let mut probs = [0.0; NUM_LATERAL];
        probs[action.index()] = 1.0;
        Self { probs, log_probs: None }
    }

    pub fn log_prob(&self, action: LateralAction) -> f64 {
        match &self.log_probs {
            Some(lp) => lp[action.index()],
            None => self.probs[action.index()].ln(),
        }
    }

    /// Highest-probability action; ties go to the lowest index.
    pub fn argmax(&self) -> LateralAction {
        let mut best = 0;
        for i in 1..NUM_LATERAL {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        LateralAction::ALL[best]
    }
}

/// `c = e ⊕ p`: ego status followed by the belief, unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateIntentVector {
    pub values: Vec<f64>,
}

impl StateIntentVector {
    pub fn ego(&self) -> EgoStatus {
        EgoStatus {
            speed: self.values[0],
            yaw: self.values[1],
        }
    }

    pub fn belief_probs(&self) -> &[f64] {
        &self.values[EGO_DIM..EGO_DIM + NUM_LATERAL]
    }
}

pub fn fuse_state_intent(ego: EgoStatus, belief: &BeliefState) -> StateIntentVector {
    let mut values = Vec::with_capacity(EGO_DIM + NUM_LATERAL);
    values.extend_from_slice(&ego.to_array());
    values.extend_from_slice(&belief.probs);
    StateIntentVector { values }
}

/// Appends longitudinal probabilities for the optional second head.
pub fn fuse_state_intent_with_longitudinal(ego: EgoStatus, belief: &BeliefState, longitudinal: &[f64]) -> StateIntentVector {
    let mut c = fuse_state_intent(ego, belief);
    c.values.extend_from_slice(longitudinal);
    c
}

/// `-log p[a_gt]`.
pub fn action_ce_loss(belief: &BeliefState, target: LateralAction) -> f64 {
    -belief.log_prob(target)
}

/// Mean-pool over context tokens, then a three-layer ReLU net to logits.
#[derive(Debug, Clone, Copy)]
pub struct ActionDecoder {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
    pub tokens: usize,
}

impl ActionDecoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_llm: usize,
        hidden: [usize; 2],
        outputs: usize,
        tokens: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{prefix}.l1"), d_llm, hidden[0], rng)?,
            l2: Linear::new(store, &format!("{prefix}.l2"), hidden[0], hidden[1], rng)?,
            l3: Linear::new(store, &format!("{prefix}.l3"), hidden[1], outputs, rng)?,
            tokens,
        })
    }

    /// `context: [B * tokens, d_llm]` → logits `[B, outputs]`.
    pub fn logits(&self, g: &mut Graph, context: Var) -> Result<Var> {
        let pooled = g.group_mean(context, self.tokens)?;
        self.logits_from_pooled(g, pooled)
    }

    pub fn logits_from_pooled(&self, g: &mut Graph, pooled: Var) -> Result<Var> {
        let h = self.l1.forward(g, pooled)?;
        let h = g.relu(h);
        let h = self.l2.forward(g, h)?;
        let h = g.relu(h);
        self.l3.forward(g, h)
    }
}

/// Single-context forward pass to a [`BeliefState`].
pub fn action_decoder_forward(store: &ParamStore, decoder: &ActionDecoder, context: &Array) -> Result<BeliefState> {
    let mut g = Graph::new(store);
    let c = g.constant(context.clone());
    let logits = decoder.logits(&mut g, c)?;
    BeliefState::from_logits(g.value(logits).data())
}

/// Two-layer map from the state-intent vector into the latent space.
#[derive(Debug, Clone, Copy)]
pub struct StateIntentEncoder {
    pub mlp: Mlp2,
}

impl StateIntentEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            mlp: Mlp2::new(store, prefix, [input, d, d], rng)?,
        })
    }

    /// `c: [B, input]` → `[B, d]`.
    pub fn forward(&self, g: &mut Graph, c: Var) -> Result<Var> {
        self.mlp.forward(g, c)
    }
}

pub fn encode_state_intent(store: &ParamStore, encoder: &StateIntentEncoder, c: &StateIntentVector) -> Result<Vec<f64>> {
    let mut g = Graph::new(store);
    let n = c.values.len();
    let x = g.constant(Array::matrix(1, n, c.values.clone())?);
    let z = encoder.forward(&mut g, x)?;
    Ok(g.value(z).data().to_vec())
}
