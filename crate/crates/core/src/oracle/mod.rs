//! Synthetic scenarios, expert demonstrations and the frozen context encoder.

pub mod encoder;
pub mod scenario;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use encoder::{encode_context, scene_features, ContextEncoder, HiddenContext, OracleConfig, SceneFeatures, FEATURE_DIM, ORACLE_PREFIX};
pub use scenario::{Instruction, Obstacle, ObstacleKind, Scenario, ScenarioKind, SceneState, DT};

use crate::anchors::DatasetRecord;
use crate::belief::EgoStatus;
use crate::error::{LadError, Result};
use crate::simulator::pid::{PidConfig, WaypointController};
use crate::simulator::vehicle::{step_vehicle, VehicleParams, VehicleState};

/// Disturbances injected while recording demonstrations so the data covers
/// recovery from off-route states. Labels always come from the clean expert.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    /// Max start offset across the route, meters.
    pub start_lateral: f64,
    /// Max start heading error, radians.
    pub start_yaw: f64,
    /// Innovation std of the AR(1) steering disturbance.
    pub steer_noise: f64,
    pub steer_corr: f64,
}

impl Perturbation {
    pub fn none() -> Self {
        Self {
            start_lateral: 0.0,
            start_yaw: 0.0,
            steer_noise: 0.0,
            steer_corr: 0.0,
        }
    }

    pub fn training() -> Self {
        Self {
            start_lateral: 0.8,
            start_yaw: 0.08,
            steer_noise: 0.05,
            steer_corr: 0.9,
        }
    }
}

impl Default for Perturbation {
    fn default() -> Self {
        Self::training()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    pub frame: usize,
    pub state: VehicleState,
    pub committed: Option<usize>,
}

/// A scenario plus its recorded expert drive: the scene sidecar and the dataset records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedScenario {
    pub scenario: Scenario,
    pub perturbation: Perturbation,
    pub frames: Vec<SceneFrame>,
    #[serde(skip)]
    pub records: Vec<DatasetRecord>,
}

impl GeneratedScenario {
    pub fn scene(&self, i: usize) -> SceneState {
        let f = &self.frames[i];
        self.scenario.scene(f.frame, &f.state, f.committed)
    }

    pub fn scenes(&self) -> Vec<SceneState> {
        (0..self.frames.len()).map(|i| self.scene(i)).collect()
    }

    pub fn save_sidecar(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| LadError::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| LadError::io(path, e))
    }

    /// Loads a sidecar; records are left empty (they live in the dataset file).
    pub fn load_sidecar(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LadError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| LadError::json(path, e))
    }
}

/// Clean expert demonstration of `(seed, kind)`.
pub fn generate_scenario(seed: u64, kind: ScenarioKind) -> Result<GeneratedScenario> {
    generate_scenario_with(seed, kind, Perturbation::none())
}

pub fn generate_scenario_with(seed: u64, kind: ScenarioKind, perturbation: Perturbation) -> Result<GeneratedScenario> {
    let scenario = Scenario::build(seed, kind);
    // paired fork seeds also share the disturbance, so their approach states coincide
    let mut rng = ChaCha8Rng::seed_from_u64(kind.layout_seed(seed) ^ 0xD1CE_0000 ^ ((kind.index() as u64) << 40));
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let uniform = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rand::Rng::random_range(rng, -m..=m) } else { 0.0 };
    let mut state = scenario.start;
    state.y += uniform(&mut rng, perturbation.start_lateral);
    state.yaw += uniform(&mut rng, perturbation.start_yaw);
    let vehicle = VehicleParams::default();
    let mut controller = WaypointController::new(PidConfig::default());
    let route = scenario.expert_route;
    let goal = &scenario.routes[route].polyline;
    let id = scenario.id();
    let mut committed = None;
    let mut noise = 0.0;
    let mut frames = Vec::new();
    let mut records = Vec::new();
    let max_frames = (scenario.time_budget / DT).round() as usize;
    for frame in 0..max_frames {
        if scenario.commitment(committed, &state.pose()).is_some() {
            committed = Some(route);
        }
        let trajectory = scenario.expert_trajectory(route, &state)?;
        records.push(DatasetRecord {
            scenario: id.clone(),
            frame,
            label: scenario.label(route, &state),
            ego: EgoStatus::new(state.speed, state.yaw)?,
            trajectory,
        });
        frames.push(SceneFrame { frame, state, committed });
        // until a branch is taken the vehicle holds the approach, so the
        // scene does not reveal which branch the recorded plan follows
        let driven = match (committed, scenario.approach_trajectory(&state)) {
            (None, Some(approach)) => approach?,
            _ => trajectory,
        };
        let mut cmd = controller.control(&driven, state.speed, scenario.speed_limit);
        if perturbation.steer_noise > 0.0 {
            noise = perturbation.steer_corr * noise + perturbation.steer_noise * unit.sample(&mut rng);
            cmd.steer = (cmd.steer + noise).clamp(-1.0, 1.0);
        }
        state = step_vehicle(&state, &cmd, DT, &vehicle);
        if goal.project([state.x, state.y]).s >= goal.length() {
            break;
        }
    }
    Ok(GeneratedScenario {
        scenario,
        perturbation,
        frames,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::LateralAction;

    #[test]
    fn straight_is_lane_follow_with_flat_waypoints() {
        for seed in 0..3 {
            let g = generate_scenario(seed, ScenarioKind::Straight).unwrap();
            assert!(g.records.len() > 20);
            for r in &g.records {
                assert_eq!(r.label, LateralAction::LaneFollow);
                assert!(r.trajectory.waypoints.iter().all(|w| w[1].abs() < 0.1));
            }
        }
    }

    #[test]
    fn left_turn_zone_is_labeled_left() {
        let g = generate_scenario(5, ScenarioKind::LeftTurn).unwrap();
        let route = &g.scenario.routes[0];
        let zone = route.zones[0];
        let mut inside = 0;
        for (r, f) in g.records.iter().zip(&g.frames) {
            let s = route.polyline.project([f.state.x, f.state.y]).s;
            if s >= zone.start && s <= zone.end {
                assert_eq!(r.label, LateralAction::Left);
                inside += 1;
            }
        }
        assert!(inside > 10);
    }

    #[test]
    fn same_seed_same_bytes() {
        for kind in ScenarioKind::ALL {
            let a = generate_scenario_with(11, kind, Perturbation::training()).unwrap();
            let b = generate_scenario_with(11, kind, Perturbation::training()).unwrap();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
            assert_eq!(a.records, b.records);
        }
    }

    #[test]
    fn fork_branches_split_across_seeds() {
        let mut lefts = 0;
        for seed in 0..20 {
            let g = generate_scenario(seed, ScenarioKind::Fork).unwrap();
            let turned_left = g.records.iter().any(|r| r.label == LateralAction::Left);
            let turned_right = g.records.iter().any(|r| r.label == LateralAction::Right);
            assert!(turned_left ^ turned_right);
            lefts += turned_left as usize;
        }
        assert_eq!(lefts, 10);
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = generate_scenario(2, ScenarioKind::Fork).unwrap();
        let p = dir.path().join("scene.json");
        g.save_sidecar(&p).unwrap();
        let back = GeneratedScenario::load_sidecar(&p).unwrap();
        assert_eq!(back.scenario, g.scenario);
        assert_eq!(back.frames, g.frames);
        assert_eq!(back.scene(10), g.scene(10));
    }
}
