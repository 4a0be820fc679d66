use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::vehicle::ControlCommand;
use crate::anchors::{Trajectory, WAYPOINT_DT};
use crate::error::{LadError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Bound on the accumulated integral of the error.
    pub integral_limit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidConfig {
    pub lateral: PidGains,
    pub longitudinal: PidGains,
    pub dt: f64,
    /// Waypoints closer than this are skipped when choosing the steering aim point.
    pub aim_distance: f64,
}

impl Default for PidConfig {
    fn default() -> Self {
        Self {
            lateral: PidGains {
                kp: 1.2,
                ki: 0.8,
                kd: 0.35,
                integral_limit: 0.5,
            },
            longitudinal: PidGains {
                kp: 1.0,
                ki: 0.3,
                kd: 0.1,
                integral_limit: 2.0,
            },
            dt: 0.1,
            aim_distance: 2.5,
        }
    }
}

impl PidConfig {
    pub fn validate(&self) -> Result<()> {
        for g in [self.lateral, self.longitudinal] {
            if [g.kp, g.ki, g.kd, g.integral_limit].iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(LadError::Config(format!("PID gains must be non-negative: {g:?}")));
            }
        }
        if !(self.dt > 0.0) {
            return Err(LadError::Config(format!("PID dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Pid {
    pub gains: PidGains,
    integral: f64,
    prev_error: Option<f64>,
    out_min: f64,
    out_max: f64,
}

impl Pid {
    pub fn new(gains: PidGains, out_min: f64, out_max: f64) -> Self {
        Self {
            gains,
            integral: 0.0,
            prev_error: None,
            out_min,
            out_max,
        }
    }

    pub fn integral(&self) -> f64 {
        self.integral
    }

    /// The derivative term is zero on the first call.
    pub fn step(&mut self, error: f64, dt: f64) -> f64 {
        let lim = self.gains.integral_limit;
        self.integral = (self.integral + error * dt).clamp(-lim, lim);
        let derivative = self.prev_error.map_or(0.0, |p| (error - p) / dt);
        self.prev_error = Some(error);
        let u = self.gains.kp * error + self.gains.ki * self.integral + self.gains.kd * derivative;
        u.clamp(self.out_min, self.out_max)
    }
}

/// Tracks a planned trajectory: steering from the bearing of an aim
/// waypoint, speed from the spacing of waypoints 1 and 3.
#[derive(Debug, Clone)]
pub struct WaypointController {
    pub config: PidConfig,
    lateral: Pid,
    longitudinal: Pid,
}

impl WaypointController {
    pub fn new(config: PidConfig) -> Self {
        Self {
            lateral: Pid::new(config.lateral, -1.0, 1.0),
            longitudinal: Pid::new(config.longitudinal, -1.0, 1.0),
            config,
        }
    }

    pub fn target_speed(traj: &Trajectory, speed_limit: f64) -> f64 {
        let (a, b) = (traj.waypoints[0], traj.waypoints[2]);
        let spacing = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        (spacing / (2.0 * WAYPOINT_DT)).min(speed_limit)
    }

    pub fn aim_point(&self, traj: &Trajectory) -> [f64; 2] {
        let far = |w: &&[f64; 2]| (w[0] * w[0] + w[1] * w[1]).sqrt() >= self.config.aim_distance;
        *traj.waypoints.iter().find(far).unwrap_or(&traj.waypoints[traj.waypoints.len() - 1])
    }

    pub fn control(&mut self, traj: &Trajectory, speed: f64, speed_limit: f64) -> ControlCommand {
        let aim = self.aim_point(traj);
        let bearing = if aim[0].hypot(aim[1]) < 1e-3 { 0.0 } else { aim[1].atan2(aim[0]) };
        let steer = self.lateral.step(bearing / FRAC_PI_2, self.config.dt);
        let target = Self::target_speed(traj, speed_limit);
        let accel = self.longitudinal.step(target - speed, self.config.dt);
        ControlCommand::from_signed(steer, accel)
    }
}
