use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use super::{sense_all, BlueDrone, Pose, RedDrone, SimError, WorldConfig, WorldState};
use crate::geom::Vec2;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Three fixed waypoints on the line between the spawn regions.
    Simple,
    /// One random waypoint near the midpoint between the spawn regions.
    Complex,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::Simple => "simple",
            ScenarioKind::Complex => "complex",
        })
    }
}

impl FromStr for ScenarioKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "simple" => Ok(ScenarioKind::Simple),
            "complex" => Ok(ScenarioKind::Complex),
            other => Err(format!("unknown scenario kind `{other}` (expected simple|complex)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, seed: u64) -> Self {
        Self { kind, seed }
    }
}

/// On-disk scenario document:
///
/// ```text
/// kind = "complex"
/// seed = 42
///
/// [overrides]
/// episode_step_limit = 300
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDocument {
    pub kind: ScenarioKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "toml::Table::is_empty")]
    pub overrides: toml::Table,
}

impl ScenarioDocument {
    pub fn parse(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::InvalidConfig(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("scenario document serializes")
    }

    pub fn spec(&self) -> ScenarioSpec {
        ScenarioSpec::new(self.kind, self.seed)
    }

    pub fn config(&self, base: &WorldConfig) -> Result<WorldConfig, SimError> {
        base.with_overrides(&self.overrides)
    }
}

fn sample_disc(rng: &mut ChaCha8Rng, center: Vec2, radius: f64) -> Vec2 {
    let r = radius * rng.gen::<f64>().sqrt();
    let theta = rng.gen_range(-PI..PI);
    center + Vec2::from_heading(theta) * r
}

/// Hand-placed start positions and red route applied on top of a spawned
/// scenario, as configured for a trial.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpawnOverrides {
    /// Start positions of the first blue drones; the rest keep their spawn.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub blue_positions: Vec<[f64; 2]>,
    /// Replacement red route; the restricted center is appended.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub red_waypoints: Vec<[f64; 2]>,
}

impl SpawnOverrides {
    pub fn is_empty(&self) -> bool {
        self.blue_positions.is_empty() && self.red_waypoints.is_empty()
    }

    /// Moves drones and reroutes red, then redraws the spawn fixes. A no-op
    /// when empty, so the sensing stream is only consumed for real edits.
    pub fn apply(&self, world: &mut WorldState) {
        if self.is_empty() {
            return;
        }
        let side = world.config.map_side;
        for (blue, &[x, y]) in world.blues.iter_mut().zip(&self.blue_positions) {
            blue.pose.position = Vec2::new(x, y).clamp_to_square(side);
        }
        if !self.red_waypoints.is_empty() {
            let mut route: VecDeque<Vec2> = self.red_waypoints.iter().map(|&[x, y]| Vec2::new(x, y)).collect();
            route.push_back(world.config.restricted_center);
            world.red.pose.heading = (route[0] - world.red.pose.position).bearing();
            world.red.waypoints = route;
        }
        world.resense();
    }
}

/// [`spawn_scenario`] followed by [`SpawnOverrides::apply`].
pub fn spawn_with(spec: &ScenarioSpec, cfg: &WorldConfig, overrides: &SpawnOverrides) -> Result<WorldState, SimError> {
    let mut world = spawn_scenario(spec, cfg)?;
    overrides.apply(&mut world);
    Ok(world)
}

/// Builds the initial world for a scenario. The same `(kind, seed, cfg)`
/// always yields an identical state.
pub fn spawn_scenario(spec: &ScenarioSpec, cfg: &WorldConfig) -> Result<WorldState, SimError> {
    cfg.validate()?;
    let mut rng = seed::rng(spec.seed, seed::stream::SPAWN);
    let zone = cfg.restricted_center;
    let red_center = cfg.red_spawn_center();

    let blues: Vec<BlueDrone> = (0..cfg.blue_count)
        .map(|id| {
            let position = sample_disc(&mut rng, zone, cfg.blue_spawn_radius).clamp_to_square(cfg.map_side);
            let heading = rng.gen_range(-PI..PI);
            BlueDrone { id, pose: Pose { position, heading }, functional: true, waypoints: VecDeque::new() }
        })
        .collect();
    let red_position = sample_disc(&mut rng, red_center, cfg.red_spawn_radius).clamp_to_square(cfg.map_side);

    let mut route: VecDeque<Vec2> = match spec.kind {
        ScenarioKind::Simple => {
            // Three waypoints centered on the midpoint of the segment joining
            // the spawn centers, ordered from the red side toward the zone.
            let mid = (zone + red_center) * 0.5;
            let dir = {
                let d = zone - red_center;
                if d.norm() > 0.0 {
                    d * (1.0 / d.norm())
                } else {
                    Vec2::new(-1.0, 0.0)
                }
            };
            [-1.0, 0.0, 1.0].iter().map(|&k| mid + dir * (k * cfg.waypoint_spacing)).collect()
        }
        ScenarioKind::Complex => {
            let mid = (zone + red_center) * 0.5;
            let waypoint = loop {
                let candidate = sample_disc(&mut rng, mid, cfg.waypoint_disc_radius);
                let clear = blues.iter().all(|b| b.pose.position.distance(candidate) > cfg.neutralize_range);
                if clear {
                    break candidate;
                }
            };
            [waypoint].into_iter().collect()
        }
    };
    route.push_back(zone);

    let first = route[0];
    let heading = (first - red_position).bearing();
    let red = RedDrone { pose: Pose { position: red_position, heading }, waypoints: route, neutralized: false };

    let mut sense_rng = seed::rng(spec.seed, seed::stream::SENSE);
    let detections = sense_all(&blues, &red, cfg, &mut sense_rng);
    Ok(WorldState {
        config: cfg.clone(),
        scenario: *spec,
        blues,
        red,
        tick: 0,
        detections,
        terminal: None,
        rng: sense_rng,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spawn_is_deterministic() {
        let cfg = WorldConfig::default();
        for kind in [ScenarioKind::Simple, ScenarioKind::Complex] {
            let a = spawn_scenario(&ScenarioSpec::new(kind, 11), &cfg).unwrap();
            let b = spawn_scenario(&ScenarioSpec::new(kind, 11), &cfg).unwrap();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        }
    }

    #[test]
    fn simple_spawn_geometry() {
        let cfg = WorldConfig::default();
        for s in 0..200 {
            let w = spawn_scenario(&ScenarioSpec::new(ScenarioKind::Simple, s), &cfg).unwrap();
            for b in &w.blues {
                assert!(b.pose.position.distance(cfg.restricted_center) <= 200.0 + 1e-9);
            }
            assert!(w.red.pose.position.distance(cfg.red_spawn_center()) <= 200.0 + 1e-9);
            let wps: Vec<Vec2> = w.red.waypoints.iter().copied().collect();
            assert_eq!(wps.len(), 4);
            for pair in wps[..3].windows(2) {
                assert!((pair[0].distance(pair[1]) - 200.0).abs() < 1e-6);
            }
            assert_eq!(wps[3], cfg.restricted_center);
        }
    }

    #[test]
    fn complex_waypoint_in_disc_and_clear_of_blues() {
        let cfg = WorldConfig::default();
        let mid = (cfg.restricted_center + cfg.red_spawn_center()) * 0.5;
        for s in 0..200 {
            let w = spawn_scenario(&ScenarioSpec::new(ScenarioKind::Complex, s), &cfg).unwrap();
            assert_eq!(w.red.waypoints.len(), 2);
            let wp = w.red.waypoints[0];
            assert!(wp.distance(mid) <= 200.0 + 1e-9);
            for b in &w.blues {
                assert!(b.pose.position.distance(wp) > cfg.neutralize_range);
            }
        }
    }

    #[test]
    fn scenario_document_round_trip() {
        let text = "kind = \"complex\"\nseed = 42\n\n[overrides]\nepisode_step_limit = 300\n";
        let doc = ScenarioDocument::parse(text).unwrap();
        assert_eq!(doc.spec(), ScenarioSpec::new(ScenarioKind::Complex, 42));
        assert_eq!(doc.config(&WorldConfig::default()).unwrap().episode_step_limit, 300);
        assert_eq!(ScenarioDocument::parse(&doc.to_text()).unwrap(), doc);
        assert!(ScenarioDocument::parse("kind = \"weird\"\nseed = 1").is_err());
    }
}
