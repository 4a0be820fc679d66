//! Infraction taxonomy and per-frame detection with contact debouncing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::vehicle::{VehicleParams, VehicleState};
use crate::error::{LadError, Result};
use crate::geometry::Polyline;
use crate::oracle::scenario::ROUTE_TAIL;
use crate::oracle::{ObstacleKind, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InfractionKind {
    #[serde(rename = "CP")]
    CollisionPedestrian,
    #[serde(rename = "CV")]
    CollisionVehicle,
    #[serde(rename = "CL")]
    CollisionLayout,
    #[serde(rename = "RL")]
    RedLight,
    #[serde(rename = "SS")]
    StopSign,
    #[serde(rename = "Off")]
    OffRoad,
    #[serde(rename = "RD")]
    RouteDeviation,
    #[serde(rename = "TO")]
    Timeout,
    #[serde(rename = "AB")]
    AgentBlocked,
}

impl InfractionKind {
    pub const ALL: [InfractionKind; 9] = [
        InfractionKind::CollisionPedestrian,
        InfractionKind::CollisionVehicle,
        InfractionKind::CollisionLayout,
        InfractionKind::RedLight,
        InfractionKind::StopSign,
        InfractionKind::OffRoad,
        InfractionKind::RouteDeviation,
        InfractionKind::Timeout,
        InfractionKind::AgentBlocked,
    ];

    pub fn code(self) -> &'static str {
        match self {
            InfractionKind::CollisionPedestrian => "CP",
            InfractionKind::CollisionVehicle => "CV",
            InfractionKind::CollisionLayout => "CL",
            InfractionKind::RedLight => "RL",
            InfractionKind::StopSign => "SS",
            InfractionKind::OffRoad => "Off",
            InfractionKind::RouteDeviation => "RD",
            InfractionKind::Timeout => "TO",
            InfractionKind::AgentBlocked => "AB",
        }
    }

    /// Scenarios here contain no traffic lights or stop signs.
    pub fn applicable(self) -> bool {
        !matches!(self, InfractionKind::RedLight | InfractionKind::StopSign)
    }

    fn collision(kind: ObstacleKind) -> Self {
        match kind {
            ObstacleKind::Pedestrian => InfractionKind::CollisionPedestrian,
            ObstacleKind::Vehicle => InfractionKind::CollisionVehicle,
            ObstacleKind::Layout => InfractionKind::CollisionLayout,
        }
    }
}

impl fmt::Display for InfractionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for InfractionKind {
    type Err = LadError;

    fn from_str(s: &str) -> Result<Self> {
        InfractionKind::ALL
            .into_iter()
            .find(|k| k.code().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| LadError::Unknown {
                what: "infraction category",
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfractionEvent {
    pub kind: InfractionKind,
    pub frame: usize,
    pub x: f64,
    pub y: f64,
    /// Index into the scenario's obstacles for collisions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obstacle: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfractionConfig {
    /// Distance from every candidate route that ends the episode, meters.
    pub route_deviation: f64,
    /// Footprint corners farther than this from every route are off the drivable corridor.
    pub corridor_half_width: f64,
    pub blocked_speed: f64,
    /// Seconds below `blocked_speed` before the agent counts as blocked.
    pub blocked_time: f64,
}

impl Default for InfractionConfig {
    fn default() -> Self {
        Self {
            route_deviation: 15.0,
            corridor_half_width: 5.0,
            blocked_speed: 0.1,
            blocked_time: 90.0,
        }
    }
}

/// Stateful detector; one per episode.
#[derive(Debug, Clone)]
pub struct InfractionDetector {
    pub config: InfractionConfig,
    routes: Vec<Polyline>,
    in_contact: Vec<bool>,
    off_road: bool,
    slow_for: f64,
}

/// Result of checking one frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameCheck {
    pub events: Vec<InfractionEvent>,
    pub off_road: bool,
    pub deviated: bool,
    pub blocked: bool,
}

impl InfractionDetector {
    pub fn new(scenario: &Scenario, config: InfractionConfig) -> Self {
        Self {
            config,
            routes: scenario.routes.iter().map(|r| r.polyline.extended(ROUTE_TAIL)).collect(),
            in_contact: vec![false; scenario.obstacles.len()],
            off_road: false,
            slow_for: 0.0,
        }
    }

    fn route_distance(&self, p: [f64; 2]) -> f64 {
        self.routes.iter().map(|r| r.project(p).distance).fold(f64::INFINITY, f64::min)
    }

    /// Checks the state reached at `frame`; obstacles are evaluated at time `t`.
    pub fn check(&mut self, scenario: &Scenario, state: &VehicleState, params: &VehicleParams, frame: usize, t: f64, dt: f64) -> FrameCheck {
        let mut out = FrameCheck::default();
        let ego = state.footprint(params);
        let event = |kind, obstacle| InfractionEvent {
            kind,
            frame,
            x: state.x,
            y: state.y,
            obstacle,
        };
        for (i, o) in scenario.obstacles.iter().enumerate() {
            let touching = ego.overlaps(&o.at_time(t).footprint());
            if touching && !self.in_contact[i] {
                out.events.push(event(InfractionKind::collision(o.kind), Some(i)));
            }
            self.in_contact[i] = touching;
        }
        out.off_road = ego.corners().iter().any(|&c| self.route_distance(c) > self.config.corridor_half_width);
        if out.off_road && !self.off_road {
            out.events.push(event(InfractionKind::OffRoad, None));
        }
        self.off_road = out.off_road;
        if self.route_distance([state.x, state.y]) > self.config.route_deviation {
            out.deviated = true;
            out.events.push(event(InfractionKind::RouteDeviation, None));
        }
        self.slow_for = if state.speed < self.config.blocked_speed { self.slow_for + dt } else { 0.0 };
        if self.slow_for >= self.config.blocked_time - 1e-9 {
            out.blocked = true;
            out.events.push(event(InfractionKind::AgentBlocked, None));
        }
        out
    }
}

/// Stateless single-frame check: every current contact and threshold violation.
pub fn detect_infractions(state: &VehicleState, scenario: &Scenario, t: f64, config: &InfractionConfig) -> Vec<InfractionEvent> {
    let mut d = InfractionDetector::new(scenario, *config);
    d.check(scenario, state, &VehicleParams::default(), (t / crate::oracle::DT).round() as usize, t, 0.0).events
}
