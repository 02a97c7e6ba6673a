//! JSON wire format shared with the operator console.
//!
//! Every message is an envelope `{type, seq, payload}`. Client messages carry
//! a [`ControlCommand`]; the server answers with `state_update`,
//! `episode_end`, `error` and `config_ack`.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::PathBuf;

use crate::env::{Controller, Outcome};
use crate::sim::ScenarioKind;

/// Underlying agent of a trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentChoice {
    Trained { checkpoint: PathBuf },
    Heuristic,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    pub scenario: ScenarioKind,
    pub seed: u64,
    /// Overrides the world's blue team size.
    pub blue_count: Option<usize>,
    /// Start positions for the first drones; the rest spawn normally.
    pub blue_positions: Vec<[f64; 2]>,
    pub agent: AgentChoice,
    pub human_involved: bool,
    /// Replaces the red route; the restricted center is appended.
    pub red_waypoints: Vec<[f64; 2]>,
    /// State broadcasts per second.
    pub update_frequency: f64,
    /// Show the red drone even when no blue drone senses it.
    pub reveal_red: bool,
    pub participant: Option<String>,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::Simple,
            seed: 0,
            blue_count: None,
            blue_positions: Vec::new(),
            agent: AgentChoice::Heuristic,
            human_involved: true,
            red_waypoints: Vec::new(),
            update_frequency: 10.0,
            reveal_red: false,
            participant: None,
        }
    }
}

/// Client → server commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum ControlCommand {
    AddWaypoint { drone_id: usize, x: f64, y: f64 },
    DeleteWaypoint { drone_id: usize, waypoint_index: usize },
    Pause,
    Resume,
    SetSpeed { multiplier: u32 },
    Configure(TrialConfig),
    Start,
    Stop,
}

const UNIT_COMMANDS: [&str; 4] = ["pause", "resume", "start", "stop"];

#[derive(Debug, Clone, PartialEq)]
pub struct ClientEnvelope {
    pub seq: u64,
    pub command: ControlCommand,
}

#[derive(Deserialize)]
struct RawEnvelope {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    seq: u64,
    #[serde(default)]
    payload: Value,
}

impl ClientEnvelope {
    /// Parses one client text frame. Unit commands accept a missing, null or
    /// empty-object payload.
    pub fn parse(text: &str) -> Result<Self, String> {
        let raw: RawEnvelope = serde_json::from_str(text).map_err(|e| format!("malformed envelope: {e}"))?;
        let mut obj = serde_json::Map::new();
        obj.insert("type".into(), Value::String(raw.kind.clone()));
        if !UNIT_COMMANDS.contains(&raw.kind.as_str()) {
            obj.insert("payload".into(), raw.payload);
        }
        let command =
            serde_json::from_value(Value::Object(obj)).map_err(|e| format!("bad `{}` command: {e}", raw.kind))?;
        Ok(Self { seq: raw.seq, command })
    }

    pub fn to_text(&self) -> String {
        let mut v = serde_json::to_value(&self.command).expect("command serializes");
        v["seq"] = Value::from(self.seq);
        if v.get("payload").is_none() {
            v["payload"] = Value::Null;
        }
        v.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Configuring,
    Running,
    Paused,
    Ended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Score {
    pub wins: u32,
    pub losses: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlueView {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub waypoints: Vec<[f64; 2]>,
    /// Who steers this drone on the next tick.
    pub controller: Controller,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateUpdate {
    pub tick: u32,
    pub blues: Vec<BlueView>,
    pub red_visible: Option<Point>,
    pub score: Score,
    pub phase: Phase,
    pub speed: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEnd {
    pub outcome: Outcome,
    pub ticks: u32,
    pub score: Score,
    /// `human`, `pc` or `agent`: how the recording is tagged.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: String,
    pub message: String,
    /// `seq` of the offending client message, if any.
    pub ref_seq: Option<u64>,
}

/// Static geometry the console needs to draw the map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldGeometry {
    pub map_side: f64,
    pub restricted_center: Point,
    pub restricted_radius: f64,
    pub radar_range: f64,
    pub neutralize_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigAck {
    pub config: TrialConfig,
    pub world: WorldGeometry,
}

/// Server → client messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum ServerMessage {
    StateUpdate(StateUpdate),
    EpisodeEnd(EpisodeEnd),
    Error(ErrorPayload),
    ConfigAck(ConfigAck),
}

impl ServerMessage {
    pub fn error(code: &str, message: impl Into<String>, ref_seq: Option<u64>) -> Self {
        ServerMessage::Error(ErrorPayload { code: code.into(), message: message.into(), ref_seq })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ServerMessage::StateUpdate(_) => "state_update",
            ServerMessage::EpisodeEnd(_) => "episode_end",
            ServerMessage::Error(_) => "error",
            ServerMessage::ConfigAck(_) => "config_ack",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerEnvelope {
    pub seq: u64,
    pub message: ServerMessage,
}

impl ServerEnvelope {
    pub fn to_text(&self) -> String {
        let mut v = serde_json::to_value(&self.message).expect("message serializes");
        v["seq"] = Value::from(self.seq);
        v.to_string()
    }

    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        let mut v: Value = serde_json::from_str(text)?;
        let seq = v.get("seq").and_then(Value::as_u64).unwrap_or(0);
        if let Some(obj) = v.as_object_mut() {
            obj.remove("seq");
        }
        Ok(Self { seq, message: serde_json::from_value(v)? })
    }
}
