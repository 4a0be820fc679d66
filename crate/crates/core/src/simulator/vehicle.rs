use serde::{Deserialize, Serialize};

use crate::error::{LadError, Result};
use crate::geometry::{wrap_angle, OrientedBox, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub wheelbase: f64,
    /// radians
    pub max_steer: f64,
    pub max_accel: f64,
    pub max_brake: f64,
    pub max_speed: f64,
    pub length: f64,
    pub width: f64,
    /// Distance from the rear axle (the reference point) forward to the footprint center.
    pub center_offset: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.5,
            max_steer: 35f64.to_radians(),
            max_accel: 3.0,
            max_brake: 6.0,
            max_speed: 15.0,
            length: 4.5,
            width: 2.0,
            center_offset: 1.25,
        }
    }
}

/// Rear-axle position, heading and speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub speed: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, yaw: f64, speed: f64) -> Result<Self> {
        if ![x, y, yaw, speed].iter().all(|v| v.is_finite()) || speed < 0.0 {
            return Err(LadError::Config(format!("invalid vehicle state ({x}, {y}, {yaw}, {speed})")));
        }
        Ok(Self {
            x,
            y,
            yaw: wrap_angle(yaw),
            speed,
        })
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.x, self.y, self.yaw)
    }

    pub fn footprint(&self, p: &VehicleParams) -> OrientedBox {
        let (s, c) = self.yaw.sin_cos();
        OrientedBox {
            center: [self.x + c * p.center_offset, self.y + s * p.center_offset],
            yaw: self.yaw,
            length: p.length,
            width: p.width,
        }
    }
}

/// Normalized actuation. Throttle and brake are never both non-zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlCommand {
    pub steer: f64,
    pub throttle: f64,
    pub brake: f64,
}

impl ControlCommand {
    pub fn new(steer: f64, throttle: f64, brake: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&steer) || !(0.0..=1.0).contains(&throttle) || !(0.0..=1.0).contains(&brake) {
            return Err(LadError::Config(format!(
                "control out of range: steer={steer} throttle={throttle} brake={brake}"
            )));
        }
        if throttle > 0.0 && brake > 0.0 {
            return Err(LadError::Config("throttle and brake applied together".into()));
        }
        Ok(Self { steer, throttle, brake })
    }

    /// Maps a signed longitudinal actuation onto throttle or brake, clamping every channel.
    pub fn from_signed(steer: f64, accel: f64) -> Self {
        let steer = if steer.is_finite() { steer.clamp(-1.0, 1.0) } else { 0.0 };
        let accel = if accel.is_finite() { accel } else { -1.0 };
        Self {
            steer,
            throttle: accel.clamp(0.0, 1.0),
            brake: (-accel).clamp(0.0, 1.0),
        }
    }
}

/// Kinematic bicycle update about the rear axle (forward Euler).
pub fn step_vehicle(state: &VehicleState, cmd: &ControlCommand, dt: f64, p: &VehicleParams) -> VehicleState {
    let delta = cmd.steer.clamp(-1.0, 1.0) * p.max_steer;
    let accel = p.max_accel * cmd.throttle.clamp(0.0, 1.0) - p.max_brake * cmd.brake.clamp(0.0, 1.0);
    let v = state.speed;
    let (s, c) = state.yaw.sin_cos();
    VehicleState {
        x: state.x + v * c * dt,
        y: state.y + v * s * dt,
        yaw: wrap_angle(state.yaw + v * delta.tan() / p.wheelbase * dt),
        speed: (v + accel * dt).clamp(0.0, p.max_speed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stationary_stays_put() {
        let p = VehicleParams::default();
        let s = VehicleState::new(1.0, 2.0, 0.3, 0.0).unwrap();
        let n = step_vehicle(&s, &ControlCommand::new(0.5, 0.0, 0.0).unwrap(), 0.1, &p);
        assert_eq!((n.x, n.y, n.yaw), (1.0, 2.0, 0.3));
    }

    #[test]
    fn straight_displacement() {
        let p = VehicleParams::default();
        let s = VehicleState::new(0.0, 0.0, 0.0, 10.0).unwrap();
        let n = step_vehicle(&s, &ControlCommand::default(), 0.1, &p);
        assert!((n.x - 1.0).abs() < 1e-12 && n.y == 0.0);
    }

    #[test]
    fn constant_steer_traces_the_analytic_circle() {
        let p = VehicleParams::default();
        let steer = 0.4;
        let radius = p.wheelbase / (steer * p.max_steer).tan();
        let mut s = VehicleState::new(0.0, 0.0, 0.0, 5.0).unwrap();
        let cmd = ControlCommand::new(steer, 0.0, 0.0).unwrap();
        // a circle through the origin tangent to +x has its center at (0, radius)
        let mut xs = Vec::new();
        for _ in 0..100 {
            s = step_vehicle(&s, &cmd, 0.01, &p);
            xs.push((s.x, s.y));
        }
        // fit: the center is equidistant from three well-spread samples
        let (a, b, c) = (xs[0], xs[50], xs[99]);
        let d = 2.0 * (a.0 * (b.1 - c.1) + b.0 * (c.1 - a.1) + c.0 * (a.1 - b.1));
        let sq = |q: (f64, f64)| q.0 * q.0 + q.1 * q.1;
        let ux = (sq(a) * (b.1 - c.1) + sq(b) * (c.1 - a.1) + sq(c) * (a.1 - b.1)) / d;
        let uy = (sq(a) * (c.0 - b.0) + sq(b) * (a.0 - c.0) + sq(c) * (b.0 - a.0)) / d;
        let fitted = ((a.0 - ux).powi(2) + (a.1 - uy).powi(2)).sqrt();
        assert!((fitted - radius).abs() / radius < 0.01, "{fitted} vs {radius}");
    }

    #[test]
    fn command_validation() {
        assert!(ControlCommand::new(1.5, 0.0, 0.0).is_err());
        assert!(ControlCommand::new(0.0, 0.5, 0.5).is_err());
        let c = ControlCommand::from_signed(3.0, -0.4);
        assert_eq!((c.steer, c.throttle, c.brake), (1.0, 0.0, 0.4));
    }

    proptest! {
        #[test]
        fn speed_stays_in_range(v in 0.0f64..15.0, steer in -1.0f64..1.0, accel in -2.0f64..2.0, steps in 1usize..200) {
            let p = VehicleParams::default();
            let mut s = VehicleState::new(0.0, 0.0, 0.0, v).unwrap();
            let cmd = ControlCommand::from_signed(steer, accel);
            for _ in 0..steps {
                s = step_vehicle(&s, &cmd, 0.1, &p);
                prop_assert!(s.speed >= 0.0 && s.speed <= p.max_speed);
            }
        }
    }
}
