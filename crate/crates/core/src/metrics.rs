//! Route completion, multiplicative infraction score, driving score and
//! multi-run aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LadError, Result};
use crate::oracle::{Scenario, ScenarioKind};
use crate::simulator::{InfractionEvent, InfractionKind, RolloutLog, Termination};

/// Multiplicative coefficient per infraction category. Categories without
/// an entry do not affect the score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, f64>", into = "BTreeMap<String, f64>")]
pub struct PenaltyTable {
    coefficients: BTreeMap<InfractionKind, f64>,
}

impl Default for PenaltyTable {
    fn default() -> Self {
        let coefficients = [
            (InfractionKind::CollisionPedestrian, 0.50),
            (InfractionKind::CollisionVehicle, 0.60),
            (InfractionKind::CollisionLayout, 0.65),
            (InfractionKind::RedLight, 0.70),
            (InfractionKind::StopSign, 0.80),
        ]
        .into_iter()
        .collect();
        Self { coefficients }
    }
}

impl TryFrom<BTreeMap<String, f64>> for PenaltyTable {
    type Error = LadError;

    fn try_from(map: BTreeMap<String, f64>) -> Result<Self> {
        let mut coefficients = BTreeMap::new();
        for (k, v) in map {
            let kind: InfractionKind = k.parse()?;
            if !(v > 0.0 && v <= 1.0) {
                return Err(LadError::Config(format!("penalty for {kind} must lie in (0, 1], got {v}")));
            }
            coefficients.insert(kind, v);
        }
        Ok(Self { coefficients })
    }
}

impl From<PenaltyTable> for BTreeMap<String, f64> {
    fn from(t: PenaltyTable) -> Self {
        t.coefficients.into_iter().map(|(k, v)| (k.code().to_string(), v)).collect()
    }
}

impl PenaltyTable {
    pub fn coefficient(&self, kind: InfractionKind) -> f64 {
        self.coefficients.get(&kind).copied().unwrap_or(1.0)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LadError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| LadError::Config(format!("{}: {e}", path.display())))
    }

    pub fn describe(&self) -> String {
        self.coefficients.iter().map(|(k, v)| format!("{k} {v:.2}")).collect::<Vec<_>>().join(", ")
    }
}

/// Largest covered fraction of any candidate route, in percent. Positions
/// flagged off-road do not count as progress.
/// Meters short of a route's end that still count as finishing it.
const COMPLETION_TOLERANCE: f64 = 1e-9;

pub fn route_completion(log: &RolloutLog, scenario: &Scenario) -> Result<f64> {
    let mut best: f64 = 0.0;
    for route in &scenario.routes {
        let len = route.polyline.length();
        if !(len > 1e-9) {
            return Err(LadError::Config(format!("degenerate route in {}", scenario.id())));
        }
        let progress = log
            .positions()
            .into_iter()
            .filter(|(_, off)| !off)
            .map(|(p, _)| route.polyline.project(p).s)
            .fold(0.0, f64::max);
        // Projection onto the last segment can land an ulp short of the end.
        let frac = if len - progress < COMPLETION_TOLERANCE { 1.0 } else { progress / len };
        best = best.max(100.0 * frac);
    }
    Ok(best.clamp(0.0, 100.0))
}

pub fn infraction_score(events: &[InfractionEvent], penalties: &PenaltyTable) -> f64 {
    events.iter().map(|e| penalties.coefficient(e.kind)).product()
}

/// Infraction score for category codes; unknown codes are rejected.
pub fn infraction_score_codes(codes: &[&str], penalties: &PenaltyTable) -> Result<f64> {
    codes
        .iter()
        .map(|c| c.parse::<InfractionKind>().map(|k| penalties.coefficient(k)))
        .product()
}

pub fn driving_score(rc: f64, is: f64) -> f64 {
    rc * is
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub scenario: String,
    pub kind: ScenarioKind,
    pub seed: u64,
    pub rc: f64,
    pub is: f64,
    pub ds: f64,
    pub counts: BTreeMap<InfractionKind, usize>,
    pub route_length: f64,
    /// Meters driven during the episode.
    pub driven: f64,
    pub termination: Termination,
}

pub fn evaluate_episode(log: &RolloutLog, scenario: &Scenario, penalties: &PenaltyTable) -> Result<EpisodeResult> {
    let rc = route_completion(log, scenario)?;
    let is = infraction_score(&log.trailer.infractions, penalties);
    let mut counts = BTreeMap::new();
    for e in &log.trailer.infractions {
        *counts.entry(e.kind).or_insert(0) += 1;
    }
    Ok(EpisodeResult {
        scenario: scenario.id(),
        kind: scenario.kind,
        seed: scenario.seed,
        rc,
        is,
        ds: driving_score(rc, is),
        counts,
        route_length: scenario.routes[scenario.expert_route].polyline.length(),
        driven: log.driven_distance(),
        termination: log.trailer.termination,
    })
}

/// Mean per-episode DS next to the component means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub ds: f64,
    pub rc: f64,
    pub is: f64,
    pub episodes: usize,
}

impl ScoreRow {
    fn of<'a>(results: impl Iterator<Item = &'a EpisodeResult>) -> Self {
        let (mut ds, mut rc, mut is, mut n) = (0.0, 0.0, 0.0, 0);
        for r in results {
            ds += r.ds;
            rc += r.rc;
            is += r.is;
            n += 1;
        }
        let d = n.max(1) as f64;
        Self {
            ds: ds / d,
            rc: rc / d,
            is: is / d,
            episodes: n,
        }
    }

    fn mean(rows: &[ScoreRow]) -> Self {
        let d = rows.len().max(1) as f64;
        Self {
            ds: rows.iter().map(|r| r.ds).sum::<f64>() / d,
            rc: rows.iter().map(|r| r.rc).sum::<f64>() / d,
            is: rows.iter().map(|r| r.is).sum::<f64>() / d,
            episodes: rows.iter().map(|r| r.episodes).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub per_kind: BTreeMap<ScenarioKind, ScoreRow>,
    pub overall: ScoreRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfractionRate {
    pub count: usize,
    /// Events per driven kilometer; `None` when the category cannot occur.
    pub per_km: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub penalties: PenaltyTable,
    pub runs: Vec<RunSummary>,
    pub mean_per_kind: BTreeMap<ScenarioKind, ScoreRow>,
    pub mean: ScoreRow,
    pub driven_km: f64,
    pub infractions: BTreeMap<InfractionKind, InfractionRate>,
    pub episodes: Vec<Vec<EpisodeResult>>,
}

fn scenario_keys(run: &[EpisodeResult]) -> Vec<(ScenarioKind, u64)> {
    let mut keys: Vec<_> = run.iter().map(|r| (r.kind, r.seed)).collect();
    keys.sort();
    keys
}

pub fn aggregate_report(runs: &[Vec<EpisodeResult>], penalties: &PenaltyTable) -> Result<BenchmarkReport> {
    let first = runs.first().ok_or_else(|| LadError::Config("report needs at least one run".into()))?;
    if first.is_empty() {
        return Err(LadError::Config("run without episodes".into()));
    }
    let keys = scenario_keys(first);
    for (i, run) in runs.iter().enumerate().skip(1) {
        if scenario_keys(run) != keys {
            return Err(LadError::Config(format!("run {} covers a different scenario set than run 1", i + 1)));
        }
    }
    let kinds: Vec<ScenarioKind> = ScenarioKind::ALL.into_iter().filter(|k| first.iter().any(|r| r.kind == *k)).collect();
    let summaries: Vec<RunSummary> = runs
        .iter()
        .map(|run| RunSummary {
            per_kind: kinds.iter().map(|&k| (k, ScoreRow::of(run.iter().filter(|r| r.kind == k)))).collect(),
            overall: ScoreRow::of(run.iter()),
        })
        .collect();
    let mean_per_kind = kinds
        .iter()
        .map(|k| (*k, ScoreRow::mean(&summaries.iter().map(|s| s.per_kind[k]).collect::<Vec<_>>())))
        .collect();
    let mean = ScoreRow::mean(&summaries.iter().map(|s| s.overall).collect::<Vec<_>>());
    let driven_km = runs.iter().flatten().map(|r| r.driven).sum::<f64>() / 1000.0;
    let infractions = InfractionKind::ALL
        .into_iter()
        .map(|k| {
            let count = runs.iter().flatten().map(|r| r.counts.get(&k).copied().unwrap_or(0)).sum();
            let per_km = (k.applicable() && driven_km > 0.0).then(|| count as f64 / driven_km);
            (k, InfractionRate { count, per_km })
        })
        .collect();
    Ok(BenchmarkReport {
        penalties: penalties.clone(),
        runs: summaries,
        mean_per_kind,
        mean,
        driven_km,
        infractions,
        episodes: runs.to_vec(),
    })
}

impl BenchmarkReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "penalties: {} (off-road progress excluded from RC)", self.penalties.describe());
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<6} {:<18} {:>8} {:>8} {:>7} {:>5}", "run", "kind", "DS", "RC", "IS", "n");
        let row = |s: &mut String, run: &str, kind: &str, r: &ScoreRow| {
            let _ = writeln!(s, "{run:<6} {kind:<18} {:>8.2} {:>8.2} {:>7.3} {:>5}", r.ds, r.rc, r.is, r.episodes);
        };
        for (i, run) in self.runs.iter().enumerate() {
            let id = (i + 1).to_string();
            for (k, r) in &run.per_kind {
                row(&mut s, &id, k.name(), r);
            }
            row(&mut s, &id, "all", &run.overall);
        }
        for (k, r) in &self.mean_per_kind {
            row(&mut s, "mean", k.name(), r);
        }
        row(&mut s, "mean", "all", &self.mean);
        let _ = writeln!(s);
        let _ = writeln!(s, "infractions per km ({:.3} km driven)", self.driven_km);
        let header: Vec<String> = self.infractions.keys().map(|k| format!("{:>7}", k.code())).collect();
        let _ = writeln!(s, "{}", header.join(" "));
        let values: Vec<String> = self
            .infractions
            .values()
            .map(|r| match r.per_km {
                Some(v) => format!("{v:>7.3}"),
                None => format!("{:>7}", "n/a"),
            })
            .collect();
        let _ = writeln!(s, "{}", values.join(" "));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{run_episode, EpisodeConfig, ExpertPolicy, StubPolicy};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn event(kind: InfractionKind) -> InfractionEvent {
        InfractionEvent {
            kind,
            frame: 0,
            x: 0.0,
            y: 0.0,
            obstacle: None,
        }
    }

    fn expert_log(kind: ScenarioKind, seed: u64) -> (Scenario, RolloutLog) {
        let s = Scenario::build(seed, kind);
        let log = run_episode(&s, &mut ExpertPolicy, &EpisodeConfig::default(), serde_json::Value::Null, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (s, log)
    }

    #[test]
    fn infraction_score_examples() {
        let p = PenaltyTable::default();
        assert_eq!(infraction_score(&[], &p), 1.0);
        assert_eq!(infraction_score(&[event(InfractionKind::CollisionVehicle)], &p), 0.6);
        let two = infraction_score(&[event(InfractionKind::CollisionVehicle); 2], &p);
        assert!((two - 0.36).abs() < 1e-12);
        assert!(infraction_score_codes(&["CV", "ZZ"], &p).is_err());
        assert!((infraction_score_codes(&["CP", "TO"], &p).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(driving_score(100.0, 1.0), 100.0);
        assert!((driving_score(50.0, 0.8) - 40.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_file_parsing() {
        let t: PenaltyTable = serde_json::from_str(r#"{"CV": 0.5, "Off": 0.9}"#).unwrap();
        assert_eq!(t.coefficient(InfractionKind::CollisionVehicle), 0.5);
        assert_eq!(t.coefficient(InfractionKind::CollisionPedestrian), 1.0);
        assert!(serde_json::from_str::<PenaltyTable>(r#"{"XX": 0.5}"#).is_err());
        assert!(serde_json::from_str::<PenaltyTable>(r#"{"CV": 1.5}"#).is_err());
        let round: PenaltyTable = serde_json::from_str(&serde_json::to_string(&PenaltyTable::default()).unwrap()).unwrap();
        assert_eq!(round, PenaltyTable::default());
    }

    #[test]
    fn completion_cases() {
        let (s, log) = expert_log(ScenarioKind::Straight, 1);
        assert_eq!(route_completion(&log, &s).unwrap(), 100.0);
        let len = s.routes[0].polyline.length();
        let mut half = log.clone();
        half.frames.retain(|f| f.state.x <= len / 2.0);
        half.trailer.final_state.x = len / 2.0;
        let rc = route_completion(&half, &s).unwrap();
        assert!((rc - 50.0).abs() <= 0.5, "{rc}");
        let r = evaluate_episode(&log, &s, &PenaltyTable::default()).unwrap();
        assert_eq!((r.rc, r.is, r.ds), (100.0, 1.0, 100.0));
    }

    #[test]
    fn completion_matches_dense_projection() {
        let s = Scenario::build(3, ScenarioKind::RightTurn);
        let log = run_episode(&s, &mut StubPolicy { speed: 4.0, braking: true }, &EpisodeConfig::default(), serde_json::Value::Null, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let dense = s.routes[0].polyline.densified(0.05);
        let mut best: f64 = 0.0;
        for (p, off) in log.positions() {
            if off {
                continue;
            }
            // brute force over every densified vertex
            let (mut dmin, mut s_at) = (f64::INFINITY, 0.0);
            let mut acc = 0.0;
            for (i, q) in dense.points().iter().enumerate() {
                if i > 0 {
                    acc += crate::geometry::dist(dense.points()[i - 1], *q);
                }
                let d = crate::geometry::dist(p, *q);
                if d < dmin {
                    dmin = d;
                    s_at = acc;
                }
            }
            best = best.max(s_at);
        }
        let want = 100.0 * best / dense.length();
        let got = route_completion(&log, &s).unwrap();
        assert!((got - want).abs() < 0.2, "{got} vs {want}");
    }

    #[test]
    fn aggregation() {
        let mut runs = Vec::new();
        for ds in [60.0, 70.0, 80.0] {
            let (s, log) = expert_log(ScenarioKind::Fork, 0);
            let mut r = evaluate_episode(&log, &s, &PenaltyTable::default()).unwrap();
            r.ds = ds;
            runs.push(vec![r]);
        }
        let rep = aggregate_report(&runs, &PenaltyTable::default()).unwrap();
        assert!((rep.mean_per_kind[&ScenarioKind::Fork].ds - 70.0).abs() < 1e-12);
        let one = aggregate_report(&runs[..1], &PenaltyTable::default()).unwrap();
        assert_eq!(one.mean, one.runs[0].overall);
        let text = rep.to_text();
        assert!(text.contains("mean") && text.contains("n/a"));
        let mut bad = runs.clone();
        bad[1][0].seed = 9;
        assert!(aggregate_report(&bad, &PenaltyTable::default()).is_err());
        assert!(aggregate_report(&[], &PenaltyTable::default()).is_err());
    }

    proptest! {
        #[test]
        fn score_identities(rc in 0.0f64..=100.0, n in 0usize..6, kinds in prop::collection::vec(0usize..5, 0..6)) {
            let p = PenaltyTable::default();
            let mut events: Vec<InfractionEvent> = kinds.iter().take(n).map(|&k| event(InfractionKind::ALL[k])).collect();
            let is = infraction_score(&events, &p);
            prop_assert!((driving_score(rc, is) - rc * is).abs() < 1e-9);
            prop_assert_eq!(driving_score(rc, is) == 0.0, rc == 0.0 || is == 0.0);
            events.push(event(InfractionKind::CollisionLayout));
            prop_assert!(infraction_score(&events, &p) <= is);
        }

        #[test]
        fn completion_invariant_under_densification(step in 0.2f64..3.0) {
            let (s, log) = expert_log(ScenarioKind::LaneChangeLeft, 2);
            let mut dense = s.clone();
            dense.routes[0].polyline = s.routes[0].polyline.densified(step);
            let a = route_completion(&log, &s).unwrap();
            let b = route_completion(&log, &dense).unwrap();
            prop_assert!((a - b).abs() < 1e-3);
        }
    }
}
