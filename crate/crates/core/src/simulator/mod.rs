//! Closed-loop evaluation: vehicle dynamics, waypoint tracking, infractions and episodes.

pub mod episode;
pub mod infractions;
pub mod pid;
pub mod vehicle;

pub use episode::{run_episode, EpisodeConfig, ExpertPolicy, FrameRecord, ModelPolicy, Plan, PlanContext, Policy, RolloutLog, StubPolicy, Termination};
pub use infractions::{detect_infractions, InfractionConfig, InfractionDetector, InfractionEvent, InfractionKind};
pub use pid::{Pid, PidConfig, PidGains, WaypointController};
pub use vehicle::{step_vehicle, ControlCommand, VehicleParams, VehicleState};
