//! Closed-loop episodes and their rollout logs.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::infractions::{InfractionConfig, InfractionDetector, InfractionEvent, InfractionKind};
use super::pid::{PidConfig, WaypointController};
use super::vehicle::{step_vehicle, ControlCommand, VehicleParams, VehicleState};
use crate::anchors::{AnchorSet, Trajectory, TRAJ_DIM};
use crate::belief::{BeliefState, EgoStatus, NUM_LATERAL};
use crate::diffusion::{select_trajectory, LadModel};
use crate::error::{LadError, Result};
use crate::numerics::Array;
use crate::oracle::{encode_context, ContextEncoder, Scenario, ScenarioKind, SceneState, DT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    RouteDeviation,
    Blocked,
    Timeout,
    CollisionTerminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub pid: PidConfig,
    pub vehicle: VehicleParams,
    pub infractions: InfractionConfig,
    pub terminate_on_collision: bool,
    /// Frames of history visible to the context encoder.
    pub context_window: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            pid: PidConfig::default(),
            vehicle: VehicleParams::default(),
            infractions: InfractionConfig::default(),
            terminate_on_collision: false,
            context_window: 1,
        }
    }
}

/// What a policy sees each frame.
#[derive(Debug, Clone, Copy)]
pub struct PlanContext<'a> {
    pub scenario: &'a Scenario,
    pub scene: &'a SceneState,
    pub state: &'a VehicleState,
    pub committed: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub trajectory: Trajectory,
    pub selected: usize,
    pub belief: Option<BeliefState>,
    /// Each candidate's 10 coordinates followed by its score.
    pub candidates: Vec<[f64; TRAJ_DIM + 1]>,
}

impl Plan {
    fn single(trajectory: Trajectory) -> Self {
        Self {
            trajectory,
            selected: 0,
            belief: None,
            candidates: Vec::new(),
        }
    }
}

pub trait Policy {
    fn name(&self) -> String;

    fn plan(&mut self, ctx: &PlanContext<'_>, rng: &mut ChaCha8Rng) -> Result<Plan>;

    /// Last chance to alter the tracking controller's command.
    fn filter(&self, cmd: ControlCommand) -> ControlCommand {
        cmd
    }
}

/// Follows the ground-truth plan of the scenario's expert route.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn name(&self) -> String {
        "expert".into()
    }

    fn plan(&mut self, ctx: &PlanContext<'_>, _rng: &mut ChaCha8Rng) -> Result<Plan> {
        let route = ctx.committed.unwrap_or(ctx.scenario.expert_route);
        Ok(Plan::single(ctx.scenario.expert_trajectory(route, ctx.state)?))
    }
}

/// Drives straight ahead at a fixed speed, optionally unable to brake.
#[derive(Debug, Clone, Copy)]
pub struct StubPolicy {
    pub speed: f64,
    pub braking: bool,
}

impl Policy for StubPolicy {
    fn name(&self) -> String {
        "stub".into()
    }

    fn plan(&mut self, _ctx: &PlanContext<'_>, _rng: &mut ChaCha8Rng) -> Result<Plan> {
        let mut w = [[0.0; 2]; 5];
        for (i, p) in w.iter_mut().enumerate() {
            p[0] = self.speed * 0.5 * (i + 1) as f64;
        }
        Ok(Plan::single(Trajectory::new(w)?))
    }

    fn filter(&self, cmd: ControlCommand) -> ControlCommand {
        if self.braking {
            cmd
        } else {
            ControlCommand { brake: 0.0, ..cmd }
        }
    }
}

/// The learned planner driven by the frozen context encoder.
#[derive(Debug, Clone)]
pub struct ModelPolicy<'a> {
    pub model: &'a LadModel,
    pub oracle: &'a ContextEncoder,
    anchors: Array,
    pub belief_override: Option<BeliefState>,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(model: &'a LadModel, oracle: &'a ContextEncoder, anchors: &AnchorSet) -> Result<Self> {
        let mc = &model.config;
        if oracle.config.d_llm != mc.d_llm || oracle.config.tokens != mc.tokens {
            return Err(LadError::Incompatible(format!(
                "context encoder emits tokens={} d_llm={}, checkpoint expects tokens={} d_llm={}",
                oracle.config.tokens, oracle.config.d_llm, mc.tokens, mc.d_llm
            )));
        }
        Ok(Self {
            model,
            oracle,
            anchors: model.prepare_anchors(anchors)?,
            belief_override: None,
        })
    }
}

impl Policy for ModelPolicy<'_> {
    fn name(&self) -> String {
        format!("model(d={}, n_a={})", self.model.config.decoder.d, self.model.config.decoder.n_anchors)
    }

    fn plan(&mut self, ctx: &PlanContext<'_>, rng: &mut ChaCha8Rng) -> Result<Plan> {
        let context = encode_context(ctx.scene, ctx.scene.instruction, self.oracle)?;
        let ego = EgoStatus::new(ctx.state.speed, ctx.state.yaw)?;
        let out = self.model.infer(&context.tokens, ego, &self.anchors, self.belief_override.as_ref(), rng)?;
        let (trajectory, selected) = select_trajectory(&out.scored);
        let candidates = out
            .scored
            .trajectories
            .iter()
            .zip(&out.scored.scores)
            .map(|(t, &s)| {
                let mut c = [0.0; TRAJ_DIM + 1];
                c[..TRAJ_DIM].copy_from_slice(&t.flat());
                c[TRAJ_DIM] = s;
                c
            })
            .collect();
        Ok(Plan {
            trajectory,
            selected,
            belief: Some(out.belief),
            candidates,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutHeader {
    pub scenario: String,
    pub kind: ScenarioKind,
    pub seed: u64,
    pub policy: String,
    pub context_window: usize,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub state: VehicleState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub belief: Option<[f64; NUM_LATERAL]>,
    pub selected: usize,
    pub trajectory: Trajectory,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<[f64; TRAJ_DIM + 1]>,
    pub command: ControlCommand,
    pub instruction: usize,
    pub committed: Option<usize>,
    pub off_road: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrailer {
    pub termination: Termination,
    pub infractions: Vec<InfractionEvent>,
    /// Ego state after the last command.
    pub final_state: VehicleState,
    pub final_off_road: bool,
    pub not_applicable: Vec<InfractionKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine {
    Header(RolloutHeader),
    Frame(FrameRecord),
    Trailer(RolloutTrailer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutLog {
    pub header: RolloutHeader,
    pub frames: Vec<FrameRecord>,
    pub trailer: RolloutTrailer,
}

impl RolloutLog {
    /// Every visited ego position, including the state after the last command.
    pub fn positions(&self) -> Vec<([f64; 2], bool)> {
        self.frames
            .iter()
            .map(|f| ([f.state.x, f.state.y], f.off_road))
            .chain(std::iter::once(([self.trailer.final_state.x, self.trailer.final_state.y], self.trailer.final_off_road)))
            .collect()
    }

    pub fn driven_distance(&self) -> f64 {
        self.positions()
            .windows(2)
            .map(|w| crate::geometry::dist(w[0].0, w[1].0))
            .sum()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |line: LogLine| {
            out.push_str(&serde_json::to_string(&line).expect("log lines serialize"));
            out.push('\n');
        };
        push(LogLine::Header(self.header.clone()));
        for f in &self.frames {
            push(LogLine::Frame(f.clone()));
        }
        push(LogLine::Trailer(self.trailer.clone()));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| LadError::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| LadError::io(path, e))
    }

    /// Parses a log; failures name the first offending frame.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::parse(text, Path::new("<rollout>"))
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut header = None;
        let mut frames: Vec<FrameRecord> = Vec::new();
        let mut trailer = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |msg: String| LadError::Record {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("frame {}: {msg}", frames.len()),
            };
            if trailer.is_some() {
                return Err(bad("content after trailer".into()));
            }
            match serde_json::from_str::<LogLine>(line).map_err(|e| bad(e.to_string()))? {
                LogLine::Header(h) if header.is_none() && i == 0 => header = Some(h),
                LogLine::Header(_) => return Err(bad("unexpected header".into())),
                LogLine::Frame(f) => {
                    if header.is_none() {
                        return Err(bad("missing header".into()));
                    }
                    if f.frame != frames.len() {
                        return Err(bad(format!("frame index {} breaks the sequence", f.frame)));
                    }
                    frames.push(f);
                }
                LogLine::Trailer(t) => trailer = Some(t),
            }
        }
        let bad_end = |msg: &str| LadError::Record {
            path: path.to_path_buf(),
            line: text.lines().count(),
            msg: format!("frame {}: {msg}", frames.len()),
        };
        Ok(Self {
            header: header.ok_or_else(|| bad_end("missing header"))?,
            trailer: trailer.ok_or_else(|| bad_end("missing trailer"))?,
            frames,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LadError::io(path, e))?;
        Self::parse(&text, path)
    }
}

fn completed(scenario: &Scenario, p: [f64; 2]) -> bool {
    scenario.routes.iter().any(|r| r.polyline.project(p).s >= r.polyline.length() - 1e-9)
}

/// Runs one episode at the scenario's control rate until completion,
/// deviation, blocking, timeout or (optionally) a collision.
pub fn run_episode(
    scenario: &Scenario,
    policy: &mut dyn Policy,
    config: &EpisodeConfig,
    run_config: serde_json::Value,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutLog> {
    config.pid.validate()?;
    let mut controller = WaypointController::new(config.pid);
    let mut detector = InfractionDetector::new(scenario, config.infractions);
    let mut state = scenario.start;
    let mut committed = None;
    let mut frames = Vec::new();
    let mut infractions = Vec::new();
    let max_frames = (scenario.time_budget / DT).round() as usize;
    let mut termination = Termination::Timeout;
    let mut off_road = false;
    for frame in 0..max_frames {
        committed = scenario.commitment(committed, &state.pose());
        let scene = scenario.scene(frame, &state, committed);
        let plan = policy.plan(
            &PlanContext {
                scenario,
                scene: &scene,
                state: &state,
                committed,
            },
            rng,
        )?;
        let cmd = policy.filter(controller.control(&plan.trajectory, state.speed, scenario.speed_limit));
        frames.push(FrameRecord {
            frame,
            state,
            belief: plan.belief.map(|b| b.probs),
            selected: plan.selected,
            trajectory: plan.trajectory,
            candidates: plan.candidates,
            command: cmd,
            instruction: scene.instruction.id(),
            committed,
            off_road,
        });
        state = step_vehicle(&state, &cmd, DT, &config.vehicle);
        let check = detector.check(scenario, &state, &config.vehicle, frame + 1, (frame + 1) as f64 * DT, DT);
        let collided = check.events.iter().any(|e| {
            matches!(
                e.kind,
                InfractionKind::CollisionPedestrian | InfractionKind::CollisionVehicle | InfractionKind::CollisionLayout
            )
        });
        off_road = check.off_road;
        infractions.extend(check.events);
        if completed(scenario, [state.x, state.y]) {
            termination = Termination::Completed;
            break;
        }
        if check.deviated {
            termination = Termination::RouteDeviation;
            break;
        }
        if collided && config.terminate_on_collision {
            termination = Termination::CollisionTerminal;
            break;
        }
        if check.blocked {
            termination = Termination::Blocked;
            break;
        }
    }
    if termination == Termination::Timeout {
        infractions.push(InfractionEvent {
            kind: InfractionKind::Timeout,
            frame: frames.len(),
            x: state.x,
            y: state.y,
            obstacle: None,
        });
    }
    Ok(RolloutLog {
        header: RolloutHeader {
            scenario: scenario.id(),
            kind: scenario.kind,
            seed: scenario.seed,
            policy: policy.name(),
            context_window: config.context_window,
            config: run_config,
        },
        frames,
        trailer: RolloutTrailer {
            termination,
            infractions,
            final_state: state,
            final_off_road: off_road,
            not_applicable: InfractionKind::ALL.into_iter().filter(|k| !k.applicable()).collect(),
        },
    })
}
