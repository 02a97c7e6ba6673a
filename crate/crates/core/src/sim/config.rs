use serde::{Deserialize, Serialize};

use super::SimError;
use crate::geom::Vec2;

/// How the blue drones obtain red-drone fixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensingMode {
    /// Every blue drone runs its own detection draw with `radar_range`
    /// measured from its own position.
    PerDrone,
    /// A single omnidirectional ground radar at the restricted center; a fix
    /// is shared with every blue drone as an offset from that drone.
    GroundRadar,
}

/// Static parameters of the airspace world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub map_side: f64,
    pub restricted_center: Vec2,
    pub restricted_radius: f64,
    pub blue_count: usize,
    /// Meters per second.
    pub max_speed: f64,
    /// Radians per tick at full turn input (blue drones).
    pub max_turn_rate: f64,
    /// Turn rate of the red drone's waypoint autopilot, radians per tick.
    pub red_max_turn_rate: f64,
    pub radar_range: f64,
    pub radar_detect_prob: f64,
    pub neutralize_range: f64,
    pub tick_seconds: f64,
    pub episode_step_limit: u32,
    /// Potential gain `k` of the distance shaping term, per meter.
    pub shaping_gain: f64,
    pub discount: f64,
    pub sensing: SensingMode,
    /// Shaping potential from the sensed red offset instead of ground truth.
    pub noisy_shaping: bool,
    pub blue_spawn_radius: f64,
    /// Distance along +x from the restricted center to the red spawn center.
    pub red_spawn_offset: f64,
    pub red_spawn_radius: f64,
    /// Spacing between the three fixed waypoints of the simple scenario.
    pub waypoint_spacing: f64,
    /// Radius of the disc the complex scenario samples its waypoint from.
    pub waypoint_disc_radius: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            map_side: 6000.0,
            restricted_center: Vec2::new(3000.0, 3000.0),
            restricted_radius: 100.0,
            blue_count: 5,
            max_speed: 10.0,
            max_turn_rate: 0.045,
            red_max_turn_rate: 0.25,
            radar_range: 1500.0,
            radar_detect_prob: 0.95,
            neutralize_range: 10.0,
            tick_seconds: 1.0,
            episode_step_limit: 400,
            shaping_gain: 0.01,
            discount: 0.99,
            sensing: SensingMode::PerDrone,
            noisy_shaping: false,
            blue_spawn_radius: 200.0,
            red_spawn_offset: 1000.0,
            red_spawn_radius: 200.0,
            waypoint_spacing: 200.0,
            waypoint_disc_radius: 200.0,
        }
    }
}

impl WorldConfig {
    /// Scaled-down world used for quick learning experiments: 600 m map,
    /// red spawning 100 m out, 60-tick episodes.
    pub fn mini() -> Self {
        Self {
            map_side: 600.0,
            restricted_center: Vec2::new(300.0, 300.0),
            restricted_radius: 15.0,
            max_turn_rate: 0.5,
            radar_range: 600.0,
            episode_step_limit: 60,
            blue_spawn_radius: 50.0,
            red_spawn_offset: 100.0,
            red_spawn_radius: 20.0,
            waypoint_spacing: 20.0,
            waypoint_disc_radius: 20.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("map_side", self.map_side),
            ("restricted_radius", self.restricted_radius),
            ("max_speed", self.max_speed),
            ("max_turn_rate", self.max_turn_rate),
            ("red_max_turn_rate", self.red_max_turn_rate),
            ("radar_range", self.radar_range),
            ("neutralize_range", self.neutralize_range),
            ("tick_seconds", self.tick_seconds),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(SimError::InvalidConfig(format!("{name} must be > 0, got {value}")));
            }
        }
        let non_negative = [
            ("shaping_gain", self.shaping_gain),
            ("blue_spawn_radius", self.blue_spawn_radius),
            ("red_spawn_offset", self.red_spawn_offset),
            ("red_spawn_radius", self.red_spawn_radius),
            ("waypoint_spacing", self.waypoint_spacing),
            ("waypoint_disc_radius", self.waypoint_disc_radius),
        ];
        for (name, value) in non_negative {
            if !(value.is_finite() && value >= 0.0) {
                return Err(SimError::InvalidConfig(format!("{name} must be >= 0, got {value}")));
            }
        }
        if !(0.0..=1.0).contains(&self.radar_detect_prob) {
            return Err(SimError::InvalidConfig(format!(
                "radar_detect_prob must lie in [0, 1], got {}",
                self.radar_detect_prob
            )));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(SimError::InvalidConfig(format!("discount must lie in (0, 1], got {}", self.discount)));
        }
        if self.episode_step_limit == 0 {
            return Err(SimError::InvalidConfig("episode_step_limit must be > 0".into()));
        }
        if self.blue_count == 0 {
            return Err(SimError::InvalidConfig("blue_count must be > 0".into()));
        }
        let c = self.restricted_center;
        if !(c.is_finite() && (0.0..=self.map_side).contains(&c.x) && (0.0..=self.map_side).contains(&c.y)) {
            return Err(SimError::InvalidConfig("restricted_center must lie inside the map".into()));
        }
        Ok(())
    }

    /// Center of the disc the red drone spawns in.
    pub fn red_spawn_center(&self) -> Vec2 {
        self.restricted_center + Vec2::new(self.red_spawn_offset, 0.0)
    }

    /// Overlays `key = value` pairs from a TOML table onto this config.
    /// Unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &toml::Table) -> Result<Self, SimError> {
        let mut base = toml::Table::try_from(self).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        for (key, value) in overrides {
            if !base.contains_key(key) {
                return Err(SimError::InvalidConfig(format!("unknown world setting `{key}`")));
            }
            base.insert(key.clone(), value.clone());
        }
        let cfg: WorldConfig =
            toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| SimError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
