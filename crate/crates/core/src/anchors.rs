//! Expert trajectories, the dataset file, and k-means anchors.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::{EgoStatus, LateralAction};
use crate::error::{LadError, Result};

/// Waypoints per trajectory.
pub const HORIZON: usize = 5;
/// Flattened trajectory length.
pub const TRAJ_DIM: usize = HORIZON * 2;
/// Seconds between consecutive waypoints.
pub const WAYPOINT_DT: f64 = 0.5;
pub const DEFAULT_R_MAX: f64 = 50.0;

/// `HORIZON` planar waypoints in the vehicle frame (x forward, y left), meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: [[f64; 2]; HORIZON],
}

impl Trajectory {
    pub fn new(waypoints: [[f64; 2]; HORIZON]) -> Result<Self> {
        Self::checked(waypoints, DEFAULT_R_MAX)
    }

    pub fn checked(waypoints: [[f64; 2]; HORIZON], r_max: f64) -> Result<Self> {
        for w in &waypoints {
            if !w[0].is_finite() || !w[1].is_finite() {
                return Err(LadError::Numeric(format!("waypoint {w:?}")));
            }
            if w[0].abs() > r_max || w[1].abs() > r_max {
                return Err(LadError::Config(format!("waypoint {w:?} outside normalization range {r_max} m")));
            }
        }
        Ok(Self { waypoints })
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != TRAJ_DIM {
            return Err(LadError::dim("trajectory", &[flat.len()], &[TRAJ_DIM]));
        }
        let mut waypoints = [[0.0; 2]; HORIZON];
        for (i, w) in waypoints.iter_mut().enumerate() {
            *w = [flat[2 * i], flat[2 * i + 1]];
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(LadError::Numeric("trajectory".into()));
        }
        Ok(Self { waypoints })
    }

    pub fn flat(&self) -> [f64; TRAJ_DIM] {
        let mut out = [0.0; TRAJ_DIM];
        for (i, w) in self.waypoints.iter().enumerate() {
            out[2 * i] = w[0];
            out[2 * i + 1] = w[1];
        }
        out
    }

    /// Average displacement error: mean per-waypoint Euclidean distance.
    pub fn ade(&self, other: &Trajectory) -> f64 {
        self.waypoints
            .iter()
            .zip(&other.waypoints)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .sum::<f64>()
            / HORIZON as f64
    }

    pub fn mean_lateral(&self) -> f64 {
        self.waypoints.iter().map(|w| w[1]).sum::<f64>() / HORIZON as f64
    }

    /// Coordinates divided by `r_max`; errors if any leaves `[-1, 1]`.
    pub fn normalized(&self, r_max: f64) -> Result<[f64; TRAJ_DIM]> {
        let mut flat = self.flat();
        for v in flat.iter_mut() {
            if v.abs() > r_max {
                return Err(LadError::Config(format!(
                    "coordinate {v} outside normalization range {r_max} m"
                )));
            }
            *v /= r_max;
        }
        Ok(flat)
    }

    pub fn denormalized(flat: &[f64], r_max: f64) -> Result<Self> {
        let scaled: Vec<f64> = flat.iter().map(|v| v * r_max).collect();
        Self::from_flat(&scaled)
    }
}

fn squared_distance(a: &[f64; TRAJ_DIM], b: &[f64; TRAJ_DIM]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub scenario: String,
    pub frame: usize,
    pub label: LateralAction,
    pub ego: EgoStatus,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub records: Vec<DatasetRecord>,
}

/// On-disk record layout, one JSON object per line.
#[derive(Serialize, Deserialize)]
struct RawRecord {
    scenario: String,
    frame: usize,
    label: String,
    speed: f64,
    yaw: f64,
    waypoints: Vec<[f64; 2]>,
}

impl RawRecord {
    fn from_record(r: &DatasetRecord) -> Self {
        Self {
            scenario: r.scenario.clone(),
            frame: r.frame,
            label: r.label.name().to_string(),
            speed: r.ego.speed,
            yaw: r.ego.yaw,
            waypoints: r.trajectory.waypoints.to_vec(),
        }
    }

    fn into_record(self) -> std::result::Result<DatasetRecord, String> {
        let label: LateralAction = self
            .label
            .parse()
            .map_err(|_| format!("label {:?} outside the lateral action vocabulary", self.label))?;
        if self.waypoints.len() != HORIZON {
            return Err(format!("expected T={HORIZON} waypoints, got {}", self.waypoints.len()));
        }
        let mut w = [[0.0; 2]; HORIZON];
        w.copy_from_slice(&self.waypoints);
        let trajectory = Trajectory::new(w).map_err(|e| e.to_string())?;
        let ego = EgoStatus::new(self.speed, self.yaw).map_err(|e| e.to_string())?;
        if self.yaw.abs() > std::f64::consts::PI + 1e-9 {
            return Err(format!("yaw {} outside [-pi, pi]", self.yaw));
        }
        Ok(DatasetRecord {
            scenario: self.scenario,
            frame: self.frame,
            label,
            ego,
            trajectory,
        })
    }
}

impl TrajectoryDataset {
    pub fn new(records: Vec<DatasetRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(LadError::Dataset("empty dataset".into()));
        }
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn trajectories(&self) -> Vec<Trajectory> {
        self.records.iter().map(|r| r.trajectory).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(&RawRecord::from_record(r)).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| LadError::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| LadError::io(path, e))
    }
}

/// Marks an optional first line holding provenance instead of a record.
pub const HEADER_KEY: &str = "header";

/// Reads a JSON-lines dataset; any malformed record fails the load with its line number.
/// A leading `{"header": ...}` line is skipped.
pub fn load_dataset(path: &Path) -> Result<TrajectoryDataset> {
    let file = fs::File::open(path).map_err(|e| LadError::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LadError::io(path, e))?;
        if line.trim().is_empty() || (i == 0 && is_header_line(&line)) {
            continue;
        }
        let bad = |msg: String| LadError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        records.push(raw.into_record().map_err(bad)?);
    }
    TrajectoryDataset::new(records)
}

pub fn is_header_line(line: &str) -> bool {
    line.trim_start().starts_with(&format!("{{\"{HEADER_KEY}\""))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub k: usize,
    pub seed: u64,
    pub inertia: f64,
    pub anchors: Vec<Trajectory>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| LadError::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| LadError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LadError::io(path, e))?;
        let set: AnchorSet = serde_json::from_str(&text).map_err(|e| LadError::json(path, e))?;
        if set.k != set.anchors.len() || set.anchors.is_empty() {
            return Err(LadError::Dataset(format!(
                "anchor file declares k={} but holds {} anchors",
                set.k,
                set.anchors.len()
            )));
        }
        Ok(set)
    }

    /// Anchor polylines for external plotting, one JSON object per anchor.
    pub fn plot_data(&self) -> String {
        let mut out = String::new();
        for (i, a) in self.anchors.iter().enumerate() {
            let line = serde_json::json!({ "anchor": i, "polyline": a.waypoints });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansOutcome {
    pub anchors: AnchorSet,
    /// Mean squared assignment distance after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

/// Lloyd's k-means over flattened trajectories with k-means++ seeding.
///
/// An empty cluster takes over the point currently farthest from its
/// centroid. Anchors come back sorted lexicographically by flattened
/// coordinates so identical inputs produce identical files.
pub fn kmeans_cluster(data: &[Trajectory], k: usize, seed: u64, opts: KMeansOptions) -> Result<KMeansOutcome> {
    if k == 0 {
        return Err(LadError::Config("k must be positive".into()));
    }
    if data.len() < k {
        return Err(LadError::Dataset(format!(
            "dataset has {} trajectories, fewer than k={k}",
            data.len()
        )));
    }
    let points: Vec<[f64; TRAJ_DIM]> = data.iter().map(Trajectory::flat).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(&points, k, &mut rng)?;
    let mut assign = vec![0usize; points.len()];
    let mut dist = vec![0.0; points.len()];
    let mut history: Vec<f64> = Vec::new();
    let mut iterations = 0;

    for _ in 0..opts.max_iters.max(1) {
        iterations += 1;
        let inertia = assign_points(&points, &centroids, &mut assign, &mut dist);
        if let Some(&prev) = history.last() {
            assert!(inertia <= prev + 1e-12 * prev.max(1.0), "k-means inertia increased: {prev} -> {inertia}");
        }
        history.push(inertia);

        let mut sums = vec![[0.0; TRAJ_DIM]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        let mut taken = vec![false; points.len()];
        for c in 0..k {
            let next = if counts[c] == 0 {
                // farthest point not already used for another repair
                let far = (0..points.len())
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("more points than clusters");
                taken[far] = true;
                dist[far] = 0.0;
                points[far]
            } else {
                let mut m = sums[c];
                m.iter_mut().for_each(|v| *v /= counts[c] as f64);
                m
            };
            shift = shift.max(squared_distance(&centroids[c], &next).sqrt());
            centroids[c] = next;
        }
        if shift < opts.tol {
            break;
        }
    }
    let inertia = assign_points(&points, &centroids, &mut assign, &mut dist);
    if let Some(&prev) = history.last() {
        assert!(inertia <= prev + 1e-12 * prev.max(1.0), "k-means inertia increased: {prev} -> {inertia}");
    }
    history.push(inertia);

    centroids.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    for w in centroids.windows(2) {
        if w[0] == w[1] {
            return Err(LadError::Dataset(format!(
                "fewer than k={k} distinct trajectories; anchors would coincide"
            )));
        }
    }
    let anchors = centroids
        .iter()
        .map(|c| Trajectory::from_flat(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(KMeansOutcome {
        anchors: AnchorSet {
            k,
            seed,
            inertia,
            anchors,
        },
        inertia_history: history,
        iterations,
    })
}

fn kmeans_plus_plus(points: &[[f64; TRAJ_DIM]], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; TRAJ_DIM]>> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(LadError::Dataset(format!(
                "fewer than k={k} distinct trajectories; anchors would coincide"
            )));
        }
        let mut target = rng.random_range(0.0..total);
        let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("positive mass");
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            if target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = points[pick];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    Ok(centroids)
}

/// Nearest-centroid assignment (ties to the lower index); returns the inertia.
fn assign_points(points: &[[f64; TRAJ_DIM]], centroids: &[[f64; TRAJ_DIM]], assign: &mut [usize], dist: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut best = (0, f64::INFINITY);
        for (c, centroid) in centroids.iter().enumerate() {
            let d = squared_distance(p, centroid);
            if d < best.1 {
                best = (c, d);
            }
        }
        assign[i] = best.0;
        dist[i] = best.1;
        total += best.1;
    }
    total / points.len() as f64
}

/// Index and ADE of the closest anchor; ties go to the lowest index.
pub fn nearest_anchor(traj: &Trajectory, anchors: &AnchorSet) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, a) in anchors.anchors.iter().enumerate() {
        let d = traj.ade(a);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}
