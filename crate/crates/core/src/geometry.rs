//! Planar geometry: poses, arc-length parameterized polylines, oriented boxes.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{LadError, Result};

/// Maps an angle into `[-pi, pi]`; angles already in range are returned unchanged.
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI..=PI).contains(&a) {
        return a;
    }
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a < -PI {
        a += 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw: wrap_angle(yaw) }
    }

    /// World point expressed in this pose's frame (x forward, y left).
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// World vector rotated into this frame.
    pub fn rotate_to_local(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }
}

/// Nearest-point query result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc length of the closest point.
    pub s: f64,
    /// Signed offset, positive to the left of the direction of travel.
    pub lateral: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct Polyline {
    points: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
}

impl TryFrom<Vec<[f64; 2]>> for Polyline {
    type Error = LadError;

    fn try_from(points: Vec<[f64; 2]>) -> Result<Self> {
        Polyline::new(points)
    }
}

impl From<Polyline> for Vec<[f64; 2]> {
    fn from(p: Polyline) -> Self {
        p.points
    }
}

impl Polyline {
    /// Consecutive duplicate points are dropped; at least two distinct points must remain.
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(LadError::Numeric("polyline coordinate".into()));
        }
        let mut clean: Vec<[f64; 2]> = Vec::with_capacity(points.len());
        for p in points {
            if clean.last().is_none_or(|q| dist(*q, p) > 1e-9) {
                clean.push(p);
            }
        }
        if clean.len() < 2 {
            return Err(LadError::Config("polyline needs at least two distinct points".into()));
        }
        let mut cumulative = Vec::with_capacity(clean.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in clean.windows(2) {
            acc += dist(w[0], w[1]);
            cumulative.push(acc);
        }
        Ok(Self { points: clean, cumulative })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().expect("non-empty")
    }

    fn segment_at(&self, s: f64) -> usize {
        let i = self.cumulative.partition_point(|&c| c <= s);
        i.saturating_sub(1).min(self.points.len() - 2)
    }

    /// Point at arc length `s`, clamped to the ends.
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let s = s.clamp(0.0, self.length());
        let i = self.segment_at(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let f = ((s - self.cumulative[i]) / seg).clamp(0.0, 1.0);
        [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        let i = self.segment_at(s.clamp(0.0, self.length()));
        let (a, b) = (self.points[i], self.points[i + 1]);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    /// Global nearest point; ties resolve to the smaller arc length.
    pub fn project(&self, p: [f64; 2]) -> Projection {
        self.project_range(p, 0, self.points.len() - 1)
    }

    /// Nearest point restricted to arc lengths within `[s_lo, s_hi]` (segment granularity).
    pub fn project_window(&self, p: [f64; 2], s_lo: f64, s_hi: f64) -> Projection {
        let lo = self.segment_at(s_lo.max(0.0));
        let hi = (self.segment_at(s_hi.min(self.length())) + 1).min(self.points.len() - 1);
        self.project_range(p, lo, hi.max(lo + 1))
    }

    fn project_range(&self, p: [f64; 2], lo: usize, hi: usize) -> Projection {
        let mut best = Projection {
            s: 0.0,
            lateral: 0.0,
            distance: f64::INFINITY,
        };
        for i in lo..hi {
            let (a, b) = (self.points[i], self.points[i + 1]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = dx * dx + dy * dy;
            let f = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
            let q = [a[0] + f * dx, a[1] + f * dy];
            let d = dist(p, q);
            if d < best.distance {
                let cross = dx * (p[1] - a[1]) - dy * (p[0] - a[0]);
                best = Projection {
                    s: self.cumulative[i] + f * len2.sqrt(),
                    lateral: if cross >= 0.0 { d } else { -d },
                    distance: d,
                };
            }
        }
        best
    }

    /// Appends a straight run of `extra` meters along the final heading.
    pub fn extended(&self, extra: f64) -> Polyline {
        let end = *self.points.last().expect("non-empty");
        let h = self.heading_at(self.length());
        let mut pts = self.points.clone();
        pts.push([end[0] + extra * h.cos(), end[1] + extra * h.sin()]);
        Polyline::new(pts).expect("extension keeps a valid polyline")
    }

    /// Resampled at (at most) `step` meter spacing; vertices are preserved.
    pub fn densified(&self, step: f64) -> Polyline {
        let mut pts = vec![self.points[0]];
        for w in self.points.windows(2) {
            let n = (dist(w[0], w[1]) / step).ceil().max(1.0) as usize;
            for j in 1..=n {
                let f = j as f64 / n as f64;
                pts.push([w[0][0] + f * (w[1][0] - w[0][0]), w[0][1] + f * (w[1][1] - w[0][1])]);
            }
        }
        Polyline::new(pts).expect("densified polyline is valid")
    }
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Oriented rectangle given by its center, heading and full extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: [f64; 2],
    pub yaw: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]].map(|[a, b]| [self.center[0] + c * a - s * b, self.center[1] + s * a + c * b])
    }

    /// Separating-axis test; touching edges count as overlap.
    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        let (ca, cb) = (self.corners(), other.corners());
        let axes = [self.yaw, self.yaw + PI / 2.0, other.yaw, other.yaw + PI / 2.0];
        axes.iter().all(|&th| {
            let ax = [th.cos(), th.sin()];
            let span = |cs: &[[f64; 2]; 4]| {
                cs.iter().map(|p| p[0] * ax[0] + p[1] * ax[1]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
            };
            let (a, b) = (span(&ca), span(&cb));
            a.0 <= b.1 && b.0 <= a.1
        })
    }
}
