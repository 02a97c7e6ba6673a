//! Deterministic-tick 2D airspace world.
//!
//! One tick advances the red drone along its waypoint route, moves every
//! functional blue drone by its turn input, draws the noisy red-drone fixes
//! and then resolves terminal events in a fixed precedence: neutralization,
//! restricted-zone entry, step-limit expiry.

mod config;
mod scenario;

pub use config::{SensingMode, WorldConfig};
pub use scenario::{spawn_scenario, spawn_with, ScenarioDocument, ScenarioKind, ScenarioSpec, SpawnOverrides};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

use crate::geom::{wrap_angle, Vec2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("unknown drone id {0}")]
    UnknownDrone(usize),
    #[error("episode already ended with {0:?}")]
    EpisodeOver(Terminal),
    #[error("expected {expected} turn inputs, got {got}")]
    InputCount { expected: usize, got: usize },
}

/// Position and heading of a drone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec2,
    /// Radians in `[-π, π]`.
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlueDrone {
    pub id: usize,
    pub pose: Pose,
    pub functional: bool,
    /// Operator-assigned route; empty means the drone is under autonomous control.
    pub waypoints: VecDeque<Vec2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedDrone {
    pub pose: Pose,
    /// Remaining route; the last entry is the restricted center.
    pub waypoints: VecDeque<Vec2>,
    pub neutralized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Terminal {
    Neutralized,
    ReachedZone,
    TimeExpired,
}

/// What happened during one tick.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepEvents {
    /// Per blue drone (indexed by id): offset of the red drone if sensed.
    pub detections: Vec<Option<Vec2>>,
    pub neutralized_this_tick: bool,
    pub red_reached_zone: bool,
    pub time_expired: bool,
}

impl StepEvents {
    pub fn terminal(&self) -> Option<Terminal> {
        if self.neutralized_this_tick {
            Some(Terminal::Neutralized)
        } else if self.red_reached_zone {
            Some(Terminal::ReachedZone)
        } else if self.time_expired {
            Some(Terminal::TimeExpired)
        } else {
            None
        }
    }
}

/// Complete simulator state. A plain value: cloning it forks the world,
/// including its sensing random stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub config: WorldConfig,
    pub scenario: ScenarioSpec,
    pub blues: Vec<BlueDrone>,
    pub red: RedDrone,
    pub tick: u32,
    /// Fixes from the most recent sensing pass (spawn or last tick).
    pub detections: Vec<Option<Vec2>>,
    pub terminal: Option<Terminal>,
    pub rng: ChaCha8Rng,
}

impl WorldState {
    pub fn blue(&self, id: usize) -> Result<&BlueDrone, SimError> {
        self.blues.get(id).ok_or(SimError::UnknownDrone(id))
    }

    pub fn is_over(&self) -> bool {
        self.terminal.is_some()
    }

    /// Whether any blue drone currently holds a fresh fix on the red drone.
    pub fn red_detected(&self) -> bool {
        self.detections.iter().any(Option::is_some)
    }

    /// Redraws the current fixes, e.g. after drones were placed by hand
    /// before the first tick.
    pub fn resense(&mut self) {
        self.detections = sense_all(&self.blues, &self.red, &self.config, &mut self.rng);
    }

    /// Advances the world by one tick.
    ///
    /// `blue_turn_inputs` holds one turn input in `[-1, 1]` per blue drone.
    /// Inputs for non-functional drones are ignored.
    pub fn step(&mut self, blue_turn_inputs: &[f64]) -> Result<StepEvents, SimError> {
        if let Some(t) = self.terminal {
            return Err(SimError::EpisodeOver(t));
        }
        if blue_turn_inputs.len() != self.blues.len() {
            return Err(SimError::InputCount { expected: self.blues.len(), got: blue_turn_inputs.len() });
        }
        if let Some(bad) = blue_turn_inputs.iter().find(|u| !u.is_finite() || u.abs() > 1.0) {
            return Err(SimError::InvalidAction(format!("turn input {bad} outside [-1, 1]")));
        }
        let cfg = &self.config;

        if !self.red.neutralized {
            let turn = red_policy_step(&mut self.red, cfg);
            self.red.pose = advance(self.red.pose, turn, cfg.red_max_turn_rate, cfg)?;
        }
        for (blue, &turn) in self.blues.iter_mut().zip(blue_turn_inputs) {
            if blue.functional {
                blue.pose = step_kinematics(blue.pose, turn, cfg)?;
            }
        }

        self.detections = sense_all(&self.blues, &self.red, cfg, &mut self.rng);

        let mut events = StepEvents { detections: self.detections.clone(), ..StepEvents::default() };
        let blue_positions: Vec<Vec2> = self.blues.iter().filter(|b| b.functional).map(|b| b.pose.position).collect();
        self.tick += 1;
        if !self.red.neutralized && check_neutralization(&blue_positions, self.red.pose.position, cfg) {
            self.red.neutralized = true;
            events.neutralized_this_tick = true;
            self.terminal = Some(Terminal::Neutralized);
        } else if self.red.pose.position.distance(cfg.restricted_center) <= cfg.restricted_radius {
            events.red_reached_zone = true;
            self.terminal = Some(Terminal::ReachedZone);
        } else if self.tick >= cfg.episode_step_limit {
            events.time_expired = true;
            self.terminal = Some(Terminal::TimeExpired);
        }
        Ok(events)
    }
}

/// Applies one tick of turn-then-advance kinematics at constant max speed.
///
/// The heading is updated first and the drone then advances one tick's travel
/// along the new heading; the result is clamped to the map square.
pub fn step_kinematics(pose: Pose, turn_input: f64, cfg: &WorldConfig) -> Result<Pose, SimError> {
    advance(pose, turn_input, cfg.max_turn_rate, cfg)
}

fn advance(pose: Pose, turn_input: f64, turn_rate: f64, cfg: &WorldConfig) -> Result<Pose, SimError> {
    if !turn_input.is_finite() {
        return Err(SimError::InvalidAction(format!("non-finite turn input {turn_input}")));
    }
    let turn = turn_input.clamp(-1.0, 1.0);
    let heading = wrap_angle(pose.heading + turn_rate * turn);
    let travel = cfg.max_speed * cfg.tick_seconds;
    let position = (pose.position + Vec2::from_heading(heading) * travel).clamp_to_square(cfg.map_side);
    Ok(Pose { position, heading })
}

/// Steering law of the red drone: turn toward the active waypoint, saturating
/// at full turn rate. Waypoints within one tick's travel are consumed first.
pub fn red_policy_step(red: &mut RedDrone, cfg: &WorldConfig) -> f64 {
    let reach = cfg.max_speed * cfg.tick_seconds;
    while red.waypoints.len() > 1 && red.waypoints[0].distance(red.pose.position) <= reach {
        red.waypoints.pop_front();
    }
    let target = red.waypoints.front().copied().unwrap_or(cfg.restricted_center);
    let offset = target - red.pose.position;
    if offset.norm() == 0.0 {
        return 0.0;
    }
    let error = wrap_angle(offset.bearing() - red.pose.heading);
    (error / cfg.red_max_turn_rate).clamp(-1.0, 1.0)
}

/// One noisy radar draw. A uniform sample is always consumed so the random
/// stream advances identically whatever the geometry.
pub fn sense_red(observer: Vec2, red: &RedDrone, cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Option<Vec2> {
    let draw: f64 = rng.gen();
    let offset = red.pose.position - observer;
    if red.neutralized || offset.norm() > cfg.radar_range {
        return None;
    }
    (draw < cfg.radar_detect_prob).then_some(offset)
}

fn sense_all(blues: &[BlueDrone], red: &RedDrone, cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Vec<Option<Vec2>> {
    match cfg.sensing {
        SensingMode::PerDrone => blues.iter().map(|b| sense_red(b.pose.position, red, cfg, rng)).collect(),
        SensingMode::GroundRadar => {
            let fix = sense_red(cfg.restricted_center, red, cfg, rng);
            blues.iter().map(|b| fix.map(|_| red.pose.position - b.pose.position)).collect()
        }
    }
}

/// True iff some blue position lies within `neutralize_range` (inclusive) of
/// the red position.
pub fn check_neutralization(blues: &[Vec2], red: Vec2, cfg: &WorldConfig) -> bool {
    blues.iter().any(|b| b.distance(red) <= cfg.neutralize_range)
}
