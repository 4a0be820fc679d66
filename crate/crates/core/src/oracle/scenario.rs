//! Procedural driving scenarios and the route-following expert.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{Trajectory, HORIZON, WAYPOINT_DT};
use crate::belief::LateralAction;
use crate::error::{LadError, Result};
use crate::geometry::{dist, wrap_angle, OrientedBox, Polyline, Pose, Projection};
use crate::simulator::vehicle::VehicleState;

/// Simulation step, seconds.
pub const DT: f64 = 0.1;
/// A frame is labeled with a maneuver this many meters before the maneuver starts.
pub const ANTICIPATION: f64 = 8.0;
/// Past the fork's decision point by this much, the route commits to the nearer branch.
pub const COMMIT_DISTANCE: f64 = 4.0;
/// Straight run appended past the goal so lookahead never runs off the map.
pub const ROUTE_TAIL: f64 = 40.0;
/// Branch radius of the fork, meters.
pub const FORK_RADIUS: f64 = 12.0;
/// Time constant of the expert's exponential return to the route.
pub const RECOVERY_TAU: f64 = 0.6;
const EXPERT_ACCEL: f64 = 2.0;
const EXPERT_DECEL: f64 = 3.0;
const LANE_WIDTH: f64 = 3.5;
const SAMPLE_STEP: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Straight,
    LeftTurn,
    RightTurn,
    LaneChangeLeft,
    LaneChangeRight,
    Fork,
    ObstacleAvoid,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 7] = [
        ScenarioKind::Straight,
        ScenarioKind::LeftTurn,
        ScenarioKind::RightTurn,
        ScenarioKind::LaneChangeLeft,
        ScenarioKind::LaneChangeRight,
        ScenarioKind::Fork,
        ScenarioKind::ObstacleAvoid,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Straight => "straight",
            ScenarioKind::LeftTurn => "left_turn",
            ScenarioKind::RightTurn => "right_turn",
            ScenarioKind::LaneChangeLeft => "lane_change_left",
            ScenarioKind::LaneChangeRight => "lane_change_right",
            ScenarioKind::Fork => "fork",
            ScenarioKind::ObstacleAvoid => "obstacle_avoid",
        }
    }

    /// Parses a comma-separated list; `all` expands to every kind.
    pub fn parse_list(text: &str) -> Result<Vec<ScenarioKind>> {
        if text.trim() == "all" {
            return Ok(Self::ALL.to_vec());
        }
        let mut kinds = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let k: ScenarioKind = part.parse()?;
            if !kinds.contains(&k) {
                kinds.push(k);
            }
        }
        if kinds.is_empty() {
            return Err(LadError::Config("no scenario kinds given".into()));
        }
        Ok(kinds)
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = LadError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LadError::Unknown {
                what: "scenario kind",
                value: s.to_string(),
            })
    }
}

/// Navigation command vocabulary: one per lateral action plus `Continue`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instruction {
    FollowLane,
    GoStraight,
    TurnLeft,
    TurnRight,
    ChangeLaneLeft,
    ChangeLaneRight,
    Continue,
}

impl Instruction {
    pub const COUNT: usize = 7;
    pub const ALL: [Instruction; Self::COUNT] = [
        Instruction::FollowLane,
        Instruction::GoStraight,
        Instruction::TurnLeft,
        Instruction::TurnRight,
        Instruction::ChangeLaneLeft,
        Instruction::ChangeLaneRight,
        Instruction::Continue,
    ];

    pub fn id(self) -> usize {
        Self::ALL.iter().position(|&i| i == self).expect("listed")
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL.get(id).copied().ok_or_else(|| LadError::Unknown {
            what: "instruction id",
            value: id.to_string(),
        })
    }

    pub fn text(self) -> &'static str {
        match self {
            Instruction::FollowLane => "Follow the current lane.",
            Instruction::GoStraight => "Go straight through the intersection.",
            Instruction::TurnLeft => "Turn left at the next intersection.",
            Instruction::TurnRight => "Turn right at the next intersection.",
            Instruction::ChangeLaneLeft => "Change to the left lane.",
            Instruction::ChangeLaneRight => "Change to the right lane.",
            Instruction::Continue => "Continue along the road.",
        }
    }

    pub fn action(self) -> Option<LateralAction> {
        LateralAction::from_index(self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleKind {
    Vehicle,
    Pedestrian,
    Layout,
}

/// Rectangular footprint moving at constant velocity from its pose at time zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub kind: ObstacleKind,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub length: f64,
    pub width: f64,
    pub vx: f64,
    pub vy: f64,
}

impl Obstacle {
    pub fn at_time(&self, t: f64) -> Obstacle {
        Obstacle {
            x: self.x + self.vx * t,
            y: self.y + self.vy * t,
            ..*self
        }
    }

    pub fn footprint(&self) -> OrientedBox {
        OrientedBox {
            center: [self.x, self.y],
            yaw: self.yaw,
            length: self.length,
            width: self.width,
        }
    }
}

/// Arc-length interval of a route carrying a lateral maneuver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub start: f64,
    pub end: f64,
    pub action: LateralAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRoute {
    pub polyline: Polyline,
    pub zones: Vec<Zone>,
}

impl CandidateRoute {
    /// The first maneuver zone overlapping `[s, s + ANTICIPATION]`, else lane following.
    pub fn label(&self, s: f64) -> LateralAction {
        self.zones
            .iter()
            .find(|z| z.start <= s + ANTICIPATION && s <= z.end)
            .map_or(LateralAction::LaneFollow, |z| z.action)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub instruction: Instruction,
    /// Equally valid routes to the goal; only the fork has more than one.
    pub routes: Vec<CandidateRoute>,
    /// Shared approach of a fork, shown as the route until a branch is taken.
    pub trunk: Option<Polyline>,
    /// Route the scripted expert drives.
    pub expert_route: usize,
    pub obstacles: Vec<Obstacle>,
    pub start: VehicleState,
    pub speed_limit: f64,
    /// Seconds.
    pub time_budget: f64,
}

/// Everything the context encoder observes at one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub frame: usize,
    pub route: Polyline,
    pub ego: Pose,
    pub speed: f64,
    pub obstacles: Vec<Obstacle>,
    pub instruction: Instruction,
}

impl SceneState {
    pub fn validate(&self) -> Result<()> {
        if !(-PI..=PI).contains(&self.ego.yaw) || !self.ego.x.is_finite() || !self.ego.y.is_finite() {
            return Err(LadError::Config(format!("invalid ego pose {:?}", self.ego)));
        }
        if !(self.speed >= 0.0) {
            return Err(LadError::Config(format!("invalid ego speed {}", self.speed)));
        }
        Ok(())
    }
}

struct RouteBuilder {
    pts: Vec<[f64; 2]>,
    heading: f64,
    len: f64,
}

impl RouteBuilder {
    fn new(start: [f64; 2], heading: f64) -> Self {
        Self {
            pts: vec![start],
            heading,
            len: 0.0,
        }
    }

    fn push(&mut self, p: [f64; 2]) {
        self.len += dist(*self.pts.last().expect("non-empty"), p);
        self.pts.push(p);
    }

    fn last(&self) -> [f64; 2] {
        *self.pts.last().expect("non-empty")
    }

    fn straight(&mut self, length: f64) {
        self.shift(length, 0.0);
    }

    /// Straight run with a smooth (half-cosine) lateral displacement of `offset`.
    fn shift(&mut self, length: f64, offset: f64) {
        let o = self.last();
        let (s, c) = self.heading.sin_cos();
        let n = (length / SAMPLE_STEP).ceil().max(1.0) as usize;
        for i in 1..=n {
            let u = i as f64 / n as f64;
            let lat = offset * (1.0 - (PI * u).cos()) / 2.0;
            let fwd = u * length;
            self.push([o[0] + c * fwd - s * lat, o[1] + s * fwd + c * lat]);
        }
    }

    /// Circular arc; positive `angle` turns left.
    fn arc(&mut self, radius: f64, angle: f64) {
        let o = self.last();
        let side = angle.signum();
        let center = [
            o[0] - side * radius * self.heading.sin(),
            o[1] + side * radius * self.heading.cos(),
        ];
        let start = (o[1] - center[1]).atan2(o[0] - center[0]);
        let n = (angle.abs() * radius / SAMPLE_STEP).ceil().max(1.0) as usize;
        for i in 1..=n {
            let a = start + angle * i as f64 / n as f64;
            self.push([center[0] + radius * a.cos(), center[1] + radius * a.sin()]);
        }
        self.heading = wrap_angle(self.heading + angle);
    }

    fn build(self) -> Polyline {
        Polyline::new(self.pts).expect("scenario routes are well formed")
    }
}

impl ScenarioKind {
    /// Fork seeds pair up: `2k` and `2k + 1` share a layout and take opposite branches.
    pub fn layout_seed(self, seed: u64) -> u64 {
        if self == ScenarioKind::Fork {
            seed / 2
        } else {
            seed
        }
    }
}

fn kind_rng(seed: u64, kind: ScenarioKind) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (kind.index() as u64 + 1))
}

fn wall_ahead(x: f64) -> Obstacle {
    Obstacle {
        kind: ObstacleKind::Layout,
        x,
        y: 0.0,
        yaw: FRAC_PI_2,
        length: 12.0,
        width: 1.0,
        vx: 0.0,
        vy: 0.0,
    }
}

impl Scenario {
    /// Deterministic scenario geometry for `(seed, kind)`.
    pub fn build(seed: u64, kind: ScenarioKind) -> Scenario {
        let mut rng = kind_rng(kind.layout_seed(seed), kind);
        let lead = rng.random_range(14.0..20.0);
        let mut obstacles = Vec::new();
        let mut trunk = None;
        let mut expert_route = 0;
        let (instruction, speed_limit, routes) = match kind {
            ScenarioKind::Straight => {
                let mut b = RouteBuilder::new([0.0, 0.0], 0.0);
                b.straight(lead + 35.0);
                (
                    Instruction::FollowLane,
                    8.0,
                    vec![CandidateRoute {
                        polyline: b.build(),
                        zones: Vec::new(),
                    }],
                )
            }
            ScenarioKind::LeftTurn | ScenarioKind::RightTurn => {
                let left = kind == ScenarioKind::LeftTurn;
                let radius = rng.random_range(10.0..14.0);
                let mut b = RouteBuilder::new([0.0, 0.0], 0.0);
                b.straight(lead);
                let start = b.len;
                b.arc(radius, if left { FRAC_PI_2 } else { -FRAC_PI_2 });
                let end = b.len;
                b.straight(25.0);
                obstacles.push(wall_ahead(lead + radius + 5.0));
                let action = if left { LateralAction::Left } else { LateralAction::Right };
                (
                    if left { Instruction::TurnLeft } else { Instruction::TurnRight },
                    6.0,
                    vec![CandidateRoute {
                        polyline: b.build(),
                        zones: vec![Zone { start, end, action }],
                    }],
                )
            }
            ScenarioKind::LaneChangeLeft | ScenarioKind::LaneChangeRight => {
                let left = kind == ScenarioKind::LaneChangeLeft;
                let span = rng.random_range(20.0..26.0);
                let mut b = RouteBuilder::new([0.0, 0.0], 0.0);
                b.straight(lead);
                let start = b.len;
                b.shift(span, if left { LANE_WIDTH } else { -LANE_WIDTH });
                let end = b.len;
                b.straight(20.0);
                let action = if left {
                    LateralAction::LaneChangeLeft
                } else {
                    LateralAction::LaneChangeRight
                };
                (
                    if left {
                        Instruction::ChangeLaneLeft
                    } else {
                        Instruction::ChangeLaneRight
                    },
                    8.0,
                    vec![CandidateRoute {
                        polyline: b.build(),
                        zones: vec![Zone { start, end, action }],
                    }],
                )
            }
            ScenarioKind::Fork => {
                // fixed so the branch shapes follow from the visible approach alone
                let radius = FORK_RADIUS;
                let mut routes = Vec::new();
                for (angle, action) in [(FRAC_PI_2, LateralAction::Left), (-FRAC_PI_2, LateralAction::Right)] {
                    let mut b = RouteBuilder::new([0.0, 0.0], 0.0);
                    b.straight(lead);
                    let start = b.len;
                    b.arc(radius, angle);
                    let end = b.len;
                    b.straight(25.0);
                    routes.push(CandidateRoute {
                        polyline: b.build(),
                        zones: vec![Zone { start, end, action }],
                    });
                }
                let mut t = RouteBuilder::new([0.0, 0.0], 0.0);
                t.straight(lead);
                trunk = Some(t.build());
                obstacles.push(wall_ahead(lead + radius + 5.0));
                expert_route = (seed % 2) as usize;
                (Instruction::Continue, 6.0, routes)
            }
            ScenarioKind::ObstacleAvoid => {
                let ramp = rng.random_range(12.0..15.0);
                let hold = 10.0;
                let mut b = RouteBuilder::new([0.0, 0.0], 0.0);
                b.straight(lead);
                let out_start = b.len;
                b.shift(ramp, LANE_WIDTH);
                let out_end = b.len;
                b.straight(hold);
                let back_start = b.len;
                b.shift(ramp, -LANE_WIDTH);
                let back_end = b.len;
                b.straight(15.0);
                obstacles.push(Obstacle {
                    kind: ObstacleKind::Vehicle,
                    x: lead + ramp + hold / 2.0,
                    y: 0.0,
                    yaw: 0.0,
                    length: 4.5,
                    width: 2.0,
                    vx: 0.0,
                    vy: 0.0,
                });
                (
                    Instruction::FollowLane,
                    8.0,
                    vec![CandidateRoute {
                        polyline: b.build(),
                        zones: vec![
                            Zone {
                                start: out_start,
                                end: out_end,
                                action: LateralAction::LaneChangeLeft,
                            },
                            Zone {
                                start: back_start,
                                end: back_end,
                                action: LateralAction::LaneChangeRight,
                            },
                        ],
                    }],
                )
            }
        };

        // roadside clutter well clear of every candidate route
        let clutter = rng.random_range(0..=3usize);
        let along_x = matches!(
            kind,
            ScenarioKind::Straight | ScenarioKind::LaneChangeLeft | ScenarioKind::LaneChangeRight | ScenarioKind::ObstacleAvoid
        );
        let base = &routes[0].polyline;
        let mut placed = 0;
        for _ in 0..50 {
            if placed == clutter {
                break;
            }
            let s = rng.random_range(0.0..base.length());
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let off = rng.random_range(8.0..11.0);
            let h = base.heading_at(s);
            let p = base.point_at(s);
            let c = [p[0] - side * off * h.sin(), p[1] + side * off * h.cos()];
            let clear = routes
                .iter()
                .all(|r| r.polyline.extended(ROUTE_TAIL).project(c).distance >= 7.5)
                && obstacles.iter().all(|o| dist([o.x, o.y], c) > 8.0);
            if !clear {
                continue;
            }
            let pedestrian = rng.random_bool(0.5);
            let (vx, vy) = if pedestrian && along_x {
                let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                (dir * 1.2, 0.0)
            } else {
                (0.0, 0.0)
            };
            obstacles.push(Obstacle {
                kind: if pedestrian { ObstacleKind::Pedestrian } else { ObstacleKind::Vehicle },
                x: c[0],
                y: c[1],
                yaw: if pedestrian { 0.0 } else { h },
                length: if pedestrian { 0.6 } else { 4.5 },
                width: if pedestrian { 0.6 } else { 2.0 },
                vx,
                vy,
            });
            placed += 1;
        }
        let start_speed = speed_limit * rng.random_range(0.6..1.0);
        Scenario {
            kind,
            seed,
            instruction,
            routes,
            trunk,
            expert_route,
            obstacles,
            start: VehicleState::new(0.0, 0.0, 0.0, start_speed).expect("valid start"),
            speed_limit,
            time_budget: 60.0,
        }
    }

    pub fn id(&self) -> String {
        format!("{}-{:04}", self.kind, self.seed)
    }

    /// Route index once the vehicle has committed to a branch.
    pub fn commitment(&self, current: Option<usize>, pose: &Pose) -> Option<usize> {
        if current.is_some() || self.routes.len() == 1 {
            return current.or(Some(0));
        }
        let trunk_len = self.trunk.as_ref().map_or(0.0, Polyline::length);
        let p = [pose.x, pose.y];
        if self.routes[0].polyline.project(p).s < trunk_len + COMMIT_DISTANCE {
            return None;
        }
        let mut best = (0, f64::INFINITY);
        for (i, r) in self.routes.iter().enumerate() {
            let d = r.polyline.project(p).distance;
            if d < best.1 {
                best = (i, d);
            }
        }
        Some(best.0)
    }

    /// The route polyline the navigation context reports.
    pub fn context_route(&self, committed: Option<usize>) -> Polyline {
        match (committed, &self.trunk) {
            (None, Some(t)) => t.clone(),
            (c, _) => self.routes[c.unwrap_or(0)].polyline.extended(ROUTE_TAIL),
        }
    }

    pub fn scene(&self, frame: usize, state: &VehicleState, committed: Option<usize>) -> SceneState {
        let t = frame as f64 * DT;
        SceneState {
            frame,
            route: self.context_route(committed),
            ego: state.pose(),
            speed: state.speed,
            obstacles: self.obstacles.iter().map(|o| o.at_time(t)).collect(),
            instruction: self.instruction,
        }
    }

    /// Closest candidate route to `p` and the projection onto it.
    pub fn nearest_route(&self, p: [f64; 2]) -> (usize, Projection) {
        let mut best = (0, self.routes[0].polyline.project(p));
        for (i, r) in self.routes.iter().enumerate().skip(1) {
            let q = r.polyline.project(p);
            if q.distance < best.1.distance {
                best = (i, q);
            }
        }
        best
    }

    pub fn label(&self, route: usize, state: &VehicleState) -> LateralAction {
        let r = &self.routes[route];
        r.label(r.polyline.project([state.x, state.y]).s)
    }

    /// Expert plan along `route`: advance with a bounded-acceleration speed
    /// profile toward the limit while the lateral offset decays exponentially.
    pub fn expert_trajectory(&self, route: usize, state: &VehicleState) -> Result<Trajectory> {
        self.plan_along(&self.routes[route].polyline.extended(ROUTE_TAIL), state)
    }

    /// Branch-neutral plan straight along the shared approach; `None` without one.
    pub fn approach_trajectory(&self, state: &VehicleState) -> Option<Result<Trajectory>> {
        self.trunk.as_ref().map(|t| self.plan_along(&t.extended(ROUTE_TAIL), state))
    }

    fn plan_along(&self, line: &Polyline, state: &VehicleState) -> Result<Trajectory> {
        let pose = state.pose();
        let proj = line.project([state.x, state.y]);
        let mut waypoints = [[0.0; 2]; HORIZON];
        for (i, w) in waypoints.iter_mut().enumerate() {
            let t = (i + 1) as f64 * WAYPOINT_DT;
            let s = proj.s + travel(state.speed, self.speed_limit, t);
            let base = line.point_at(s);
            let h = line.heading_at(s);
            let lat = proj.lateral * (-t / RECOVERY_TAU).exp();
            *w = pose.to_local([base[0] - lat * h.sin(), base[1] + lat * h.cos()]);
        }
        Trajectory::new(waypoints)
    }

    /// One expert plan per candidate route (two at the fork).
    pub fn expert_trajectories(&self, state: &VehicleState) -> Result<Vec<Trajectory>> {
        (0..self.routes.len()).map(|r| self.expert_trajectory(r, state)).collect()
    }
}

/// Distance covered in `t` seconds starting at `v0`, accelerating or braking toward `v_ref`.
fn travel(v0: f64, v_ref: f64, t: f64) -> f64 {
    let a = if v0 <= v_ref { EXPERT_ACCEL } else { -EXPERT_DECEL };
    let t_reach = ((v_ref - v0) / a).max(0.0);
    if t <= t_reach {
        v0 * t + 0.5 * a * t * t
    } else {
        v0 * t_reach + 0.5 * a * t_reach * t_reach + v_ref * (t - t_reach)
    }
}
