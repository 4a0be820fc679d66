//! Truncated diffusion over anchor trajectories: noise schedule, scored
//! outputs, and the learned decoder in [`model`].

pub mod model;

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use model::{BatchInput, DecoderConfig, ForwardOutput, Inference, LadModel, ModelConfig};

use crate::anchors::{Trajectory, TRAJ_DIM};
use crate::error::{LadError, Result};
use crate::numerics::Array;

const COSINE_OFFSET: f64 = 0.008;

/// Variance-preserving cosine schedule, truncated for inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct NoiseSchedule {
    total_steps: usize,
    truncation: usize,
    alpha_bar: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleSpec {
    total_steps: usize,
    truncation: usize,
}

impl TryFrom<ScheduleSpec> for NoiseSchedule {
    type Error = LadError;

    fn try_from(s: ScheduleSpec) -> Result<Self> {
        NoiseSchedule::new(s.total_steps, s.truncation)
    }
}

impl From<NoiseSchedule> for ScheduleSpec {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleSpec {
            total_steps: s.total_steps,
            truncation: s.truncation,
        }
    }
}

impl NoiseSchedule {
    pub fn new(total_steps: usize, truncation: usize) -> Result<Self> {
        if total_steps < 2 || truncation == 0 || truncation >= total_steps {
            return Err(LadError::Schedule(format!(
                "need 0 < truncation ({truncation}) < total_steps ({total_steps})"
            )));
        }
        let f = |t: usize| {
            let u = (t as f64 / total_steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (u * FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let alpha_bar = (0..=total_steps).map(|t| if t == 0 { 1.0 } else { f(t) / f0 }).collect();
        Ok(Self {
            total_steps,
            truncation,
            alpha_bar,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t.min(self.total_steps)]
    }

    /// Evenly spaced descending timesteps starting at the truncation step,
    /// e.g. `{50, 25}` for two steps.
    pub fn ladder(&self, steps: usize) -> Vec<usize> {
        (0..steps)
            .map(|i| (self.truncation * (steps - i) + steps / 2) / steps)
            .map(|t| t.max(1))
            .collect()
    }

    /// `sqrt(abar_t) * x + sqrt(1 - abar_t) * eps` with standard-normal `eps` per coordinate.
    pub fn add_truncated_noise<R: Rng>(&self, anchors: &Array, t: usize, rng: &mut R) -> Result<Array> {
        if t > self.truncation {
            return Err(LadError::Schedule(format!(
                "timestep {t} beyond truncation step {}",
                self.truncation
            )));
        }
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = anchors.clone();
        if t == 0 {
            return Ok(out);
        }
        for v in out.data_mut() {
            let eps: f64 = rng.sample(StandardNormal);
            *v = a * *v + b * eps;
        }
        Ok(out)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(1000, 50).expect("default schedule is valid")
    }
}

/// Refined candidate trajectories (meters) with per-candidate confidences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrajectories {
    pub trajectories: Vec<Trajectory>,
    pub scores: Vec<f64>,
    /// Denoising steps that produced these candidates.
    pub steps: usize,
}

impl ScoredTrajectories {
    pub fn new(trajectories: Vec<Trajectory>, scores: Vec<f64>, steps: usize) -> Result<Self> {
        if trajectories.is_empty() || trajectories.len() != scores.len() {
            return Err(LadError::dim("scored trajectories", &[trajectories.len()], &[scores.len()]));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(LadError::Numeric("candidate score".into()));
        }
        Ok(Self {
            trajectories,
            scores,
            steps,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Indices sorted by descending score, ties by index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx
    }
}

/// Highest-scoring candidate; ties go to the lowest index.
pub fn select_trajectory(scored: &ScoredTrajectories) -> (Trajectory, usize) {
    let mut best = 0;
    for (i, &s) in scored.scores.iter().enumerate() {
        if s > scored.scores[best] {
            best = i;
        }
    }
    (scored.trajectories[best], best)
}

/// Stacks trajectories into `[n, 10]` after dividing by `r_max`.
pub fn normalize_trajectories(trajs: &[Trajectory], r_max: f64) -> Result<Array> {
    let mut data = Vec::with_capacity(trajs.len() * TRAJ_DIM);
    for t in trajs {
        data.extend_from_slice(&t.normalized(r_max)?);
    }
    Array::new(vec![trajs.len(), TRAJ_DIM], data)
}

pub fn denormalize_trajectories(rows: &Array, r_max: f64) -> Result<Vec<Trajectory>> {
    (0..rows.rows()).map(|r| Trajectory::denormalized(rows.row(r), r_max)).collect()
}
