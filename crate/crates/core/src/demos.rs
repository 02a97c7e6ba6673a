//! Demonstration recording, embodiment mapping and the JSONL trajectory store.
//!
//! One episode per line:
//! `{version, scenario:{kind,seed}, source, participant, steps:[…], outcome, ticks}`.
//! `steps` holds `ticks + 1` entries: the state at each tick boundary with
//! the actions taken from it and the rewards they earned. The last entry is
//! the final state and carries empty action/reward/controller lists.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

use crate::env::{
    env_episode, steer_toward, ActionId, Controller, EpisodeRecord, Frame, ObservationHistory, Outcome, Policy,
    StepLog, Transition,
};
use crate::geom::Vec2;
use crate::learner::replay::{n_step_items, DemoBuffer};
use crate::seed;
use crate::sim::{spawn_with, Pose, ScenarioKind, ScenarioSpec, SimError, SpawnOverrides, WorldConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("demo store i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("malformed demonstration: {0}")]
    Malformed(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("gave up after {attempts} episodes with {stored} of {wanted} demonstrations stored")]
    Exhausted { attempts: usize, stored: usize, wanted: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DemoSource {
    AgentDemo,
    HumanDemo,
    PolicyCorrected,
}

impl fmt::Display for DemoSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DemoSource::AgentDemo => "agent",
            DemoSource::HumanDemo => "human",
            DemoSource::PolicyCorrected => "pc",
        })
    }
}

/// Which demonstration sources to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFilter {
    Agent,
    Human,
    Pc,
    /// Every source, sampled in equal proportion.
    Mixed,
}

impl SourceFilter {
    pub fn accepts(self, source: DemoSource) -> bool {
        match self {
            SourceFilter::Agent => source == DemoSource::AgentDemo,
            SourceFilter::Human => source == DemoSource::HumanDemo,
            SourceFilter::Pc => source == DemoSource::PolicyCorrected,
            SourceFilter::Mixed => true,
        }
    }
}

impl FromStr for SourceFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "agent" => Ok(Self::Agent),
            "human" => Ok(Self::Human),
            "pc" => Ok(Self::Pc),
            "mixed" => Ok(Self::Mixed),
            other => Err(format!("unknown demo source `{other}` (agent|human|pc|mixed)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlueState {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RedState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub neutralized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoStep {
    pub t: u32,
    pub blues: Vec<BlueState>,
    pub red: RedState,
    /// Sensed red offset per blue drone.
    pub detections: Vec<Option<[f64; 2]>>,
    pub actions: Vec<ActionId>,
    pub rewards: Vec<f64>,
    pub controllers: Vec<Controller>,
    /// Head of each drone's operator waypoint queue; omitted when no drone has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub waypoints: Option<Vec<Option<[f64; 2]>>>,
}

/// Raw operator waypoint edit, kept so embodiment mapping can be re-run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WaypointEvent {
    Add { t: u32, drone_id: usize, x: f64, y: f64 },
    Delete { t: u32, drone_id: usize, index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRef {
    pub kind: ScenarioKind,
    pub seed: u64,
}

/// One stored episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub version: u32,
    pub scenario: ScenarioRef,
    pub source: DemoSource,
    pub participant: Option<String>,
    pub steps: Vec<DemoStep>,
    pub outcome: Outcome,
    pub ticks: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    /// Seconds since the Unix epoch at recording time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub waypoint_events: Vec<WaypointEvent>,
    /// World the episode was recorded in; needed to re-simulate it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world: Option<WorldConfig>,
    /// Trial edits to the spawned scenario.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overrides: Option<SpawnOverrides>,
}

fn pair(v: Vec2) -> [f64; 2] {
    [v.x, v.y]
}

impl DemoStep {
    fn from_frame(frame: &Frame, log: Option<&StepLog>) -> Self {
        let any_waypoint = frame.active_waypoints.iter().any(Option::is_some);
        Self {
            t: frame.tick,
            blues: frame
                .blues
                .iter()
                .enumerate()
                .map(|(id, p)| BlueState { id, x: p.position.x, y: p.position.y, heading: p.heading })
                .collect(),
            red: RedState {
                x: frame.red.position.x,
                y: frame.red.position.y,
                heading: frame.red.heading,
                neutralized: frame.red_neutralized,
            },
            detections: frame.detections.iter().map(|d| d.map(pair)).collect(),
            actions: log.map(|l| l.actions.clone()).unwrap_or_default(),
            rewards: log.map(|l| l.rewards.clone()).unwrap_or_default(),
            controllers: log.map(|l| l.controllers.clone()).unwrap_or_default(),
            waypoints: any_waypoint.then(|| frame.active_waypoints.iter().map(|w| w.map(pair)).collect()),
        }
    }

    pub fn blue_poses(&self) -> Vec<Pose> {
        self.blues.iter().map(|b| Pose { position: Vec2::new(b.x, b.y), heading: b.heading }).collect()
    }

    pub fn red_position(&self) -> Vec2 {
        Vec2::new(self.red.x, self.red.y)
    }
}

impl Demonstration {
    pub fn from_episode(
        record: &EpisodeRecord,
        source: DemoSource,
        participant: Option<String>,
        world: &WorldConfig,
    ) -> Self {
        let steps =
            record.frames.iter().enumerate().map(|(i, f)| DemoStep::from_frame(f, record.steps.get(i))).collect();
        Self {
            version: FORMAT_VERSION,
            scenario: ScenarioRef { kind: record.scenario.kind, seed: record.scenario.seed },
            source,
            participant,
            steps,
            outcome: record.outcome,
            ticks: record.total_ticks,
            session: None,
            timestamp: None,
            waypoint_events: Vec::new(),
            world: Some(world.clone()),
            overrides: None,
        }
    }

    pub fn spec(&self) -> ScenarioSpec {
        ScenarioSpec::new(self.scenario.kind, self.scenario.seed)
    }

    pub fn blue_count(&self) -> usize {
        self.steps.first().map_or(0, |s| s.blues.len())
    }

    /// Structural checks: step count, per-step widths.
    pub fn validate(&self) -> Result<(), DemoError> {
        let n = self.blue_count();
        if self.steps.len() != self.ticks as usize + 1 {
            return Err(DemoError::Malformed(format!(
                "{} steps for {} ticks (expected ticks + 1)",
                self.steps.len(),
                self.ticks
            )));
        }
        for (i, s) in self.steps.iter().enumerate() {
            let last = i == self.ticks as usize;
            let width = if last { 0 } else { n };
            if s.t as usize != i
                || s.blues.len() != n
                || s.detections.len() != n
                || s.actions.len() != width
                || s.rewards.len() != width
                || s.controllers.len() != width
            {
                return Err(DemoError::Malformed(format!("step {i} has inconsistent widths")));
            }
        }
        Ok(())
    }

    /// Rebuilds every agent's transition sequence from the logged states.
    pub fn transitions(&self, world: &WorldConfig) -> Result<Vec<Vec<Transition>>, DemoError> {
        self.validate()?;
        let n = self.blue_count();
        let mut histories = vec![ObservationHistory::new(); n];
        let observe = |h: &mut ObservationHistory, s: &DemoStep, id: usize| {
            let b = &s.blues[id];
            h.push(
                Vec2::new(b.x, b.y),
                s.detections[id].map(|[x, y]| Vec2::new(x, y)),
                world.restricted_center,
                world.red_spawn_center(),
            )
        };
        let mut current: Vec<_> =
            histories.iter_mut().enumerate().map(|(id, h)| observe(h, &self.steps[0], id)).collect();
        let ends_in_terminal = matches!(self.outcome, Outcome::Win | Outcome::Loss);
        let mut out = vec![Vec::with_capacity(self.ticks as usize); n];
        for (i, pair) in self.steps.windows(2).enumerate() {
            let (step, next) = (&pair[0], &pair[1]);
            let terminal = ends_in_terminal && i + 1 == self.ticks as usize;
            for id in 0..n {
                let next_observation = observe(&mut histories[id], next, id);
                out[id].push(Transition {
                    observation: current[id],
                    action: step.actions[id],
                    reward: step.rewards[id],
                    next_observation,
                    terminal,
                    agent_id: id,
                    controller: step.controllers[id],
                });
                current[id] = next_observation;
            }
        }
        Ok(out)
    }

    /// All blue positions across the episode, for diversity analysis.
    pub fn blue_positions(&self) -> impl Iterator<Item = Vec2> + '_ {
        self.steps.iter().flat_map(|s| s.blues.iter().map(|b| Vec2::new(b.x, b.y)))
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("demonstration serializes")
    }

    pub fn from_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

/// Append-only JSONL file of demonstrations.
#[derive(Debug, Clone)]
pub struct DemoStore {
    path: PathBuf,
}

impl DemoStore {
    pub fn open(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, demo: &Demonstration) -> Result<(), DemoError> {
        self.append_all(std::slice::from_ref(demo))
    }

    pub fn append_all(&self, demos: &[Demonstration]) -> Result<(), DemoError> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let mut buf = String::new();
        for d in demos {
            buf.push_str(&d.to_line());
            buf.push('\n');
        }
        file.write_all(buf.as_bytes())?;
        Ok(())
    }

    /// Reads every record; a missing file is an empty store.
    pub fn read_all(&self) -> Result<Vec<Demonstration>, DemoError> {
        let file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let demo = Demonstration::from_line(&line)
                .map_err(|e| DemoError::Parse { line: i + 1, message: e.to_string() })?;
            out.push(demo);
        }
        Ok(out)
    }
}

/// Episode counts by source and outcome.
pub fn index(demos: &[Demonstration]) -> BTreeMap<(DemoSource, String), usize> {
    let mut counts = BTreeMap::new();
    for d in demos {
        *counts.entry((d.source, d.outcome.to_string())).or_insert(0) += 1;
    }
    counts
}

/// Runs greedy episodes with `policy` and keeps those passing the win
/// filter until `count` are stored. Gives up after `max_attempts` episodes.
#[allow(clippy::too_many_arguments)]
pub fn collect_agent_demos(
    policy: &mut dyn Policy,
    kind: ScenarioKind,
    world: &WorldConfig,
    count: usize,
    only_wins: bool,
    seed_base: u64,
    max_attempts: usize,
    source: DemoSource,
) -> Result<Vec<Demonstration>, DemoError> {
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        if attempts >= max_attempts {
            return Err(DemoError::Exhausted { attempts, stored: out.len(), wanted: count });
        }
        let spec = ScenarioSpec::new(kind, seed::derive(seed_base, attempts as u64));
        attempts += 1;
        let record = env_episode(policy, &spec, world, None)?;
        if !only_wins || record.outcome == Outcome::Win {
            out.push(Demonstration::from_episode(&record, source, None, world));
        }
    }
    Ok(out)
}

/// Converts a waypoint trace into discrete actions. For each tick and
/// drone, the action turns toward the active waypoint (error `≥ 0` → 1);
/// ticks without a waypoint keep the executed action.
pub fn embodiment_map(
    waypoints: &[Vec<Option<Vec2>>],
    poses: &[Vec<Pose>],
    executed: &[Vec<ActionId>],
) -> Vec<Vec<ActionId>> {
    executed
        .iter()
        .enumerate()
        .map(|(t, acts)| {
            acts.iter()
                .enumerate()
                .map(|(id, &fallback)| {
                    let wp = waypoints.get(t).and_then(|w| w.get(id).copied().flatten());
                    let pose = poses.get(t).and_then(|p| p.get(id));
                    match (wp, pose) {
                        (Some(wp), Some(&pose)) => steer_toward(pose, wp),
                        _ => fallback,
                    }
                })
                .collect()
        })
        .collect()
}

impl Demonstration {
    /// Re-derives the operator-controlled actions of this demonstration
    /// from its logged waypoints.
    pub fn embodied_actions(&self) -> Vec<Vec<ActionId>> {
        let ticks = self.ticks as usize;
        let waypoints: Vec<Vec<Option<Vec2>>> = self.steps[..ticks]
            .iter()
            .map(|s| match &s.waypoints {
                Some(w) => w.iter().map(|p| p.map(|[x, y]| Vec2::new(x, y))).collect(),
                None => vec![None; s.blues.len()],
            })
            .collect();
        let poses: Vec<Vec<Pose>> = self.steps[..ticks].iter().map(DemoStep::blue_poses).collect();
        let executed: Vec<Vec<ActionId>> = self.steps[..ticks].iter().map(|s| s.actions.clone()).collect();
        embodiment_map(&waypoints, &poses, &executed)
    }
}

/// Stores a session with mixed control as executed. Controller tags come
/// from the arbitration recorded in the episode.
pub fn record_policy_corrected(
    session: &EpisodeRecord,
    participant: Option<String>,
    world: &WorldConfig,
) -> Demonstration {
    Demonstration::from_episode(session, DemoSource::PolicyCorrected, participant, world)
}

/// Flattens the selected episodes into a permanent demonstration buffer.
pub fn load_transitions(
    demos: &[Demonstration],
    filter: SourceFilter,
    win_only: bool,
    n: usize,
    gamma: f64,
    world: &WorldConfig,
) -> Result<DemoBuffer, DemoError> {
    let mut items = Vec::new();
    for d in demos {
        if !filter.accepts(d.source) || (win_only && d.outcome != Outcome::Win) {
            continue;
        }
        let cfg = d.world.as_ref().unwrap_or(world);
        for seq in d.transitions(cfg)? {
            items.extend(n_step_items(&seq, n, gamma).into_iter().map(|item| (item, d.source)));
        }
    }
    Ok(DemoBuffer::new(items, filter == SourceFilter::Mixed))
}

/// Largest positional deviation found when re-simulating a demonstration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub ticks: u32,
    pub max_divergence: f64,
    pub outcome_matches: bool,
}

/// Re-simulates a stored episode from its scenario seed and action log and
/// reports the largest distance between stored and simulated positions.
pub fn replay(demo: &Demonstration, world: &WorldConfig) -> Result<ReplayReport, DemoError> {
    demo.validate()?;
    let cfg = demo.world.as_ref().unwrap_or(world);
    let mut state = spawn_with(&demo.spec(), cfg, &demo.overrides.clone().unwrap_or_default())?;
    let mut max_div: f64 = 0.0;
    let mut compare = |state: &crate::sim::WorldState, step: &DemoStep| {
        for (b, s) in state.blues.iter().zip(&step.blues) {
            max_div = max_div.max(b.pose.position.distance(Vec2::new(s.x, s.y)));
        }
        max_div = max_div.max(state.red.pose.position.distance(step.red_position()));
    };
    compare(&state, &demo.steps[0]);
    for i in 0..demo.ticks as usize {
        let inputs: Vec<f64> = demo.steps[i].actions.iter().map(|a| a.turn_input()).collect();
        state.step(&inputs)?;
        compare(&state, &demo.steps[i + 1]);
    }
    let outcome = state.terminal.map(Outcome::from).unwrap_or(Outcome::Timeout);
    Ok(ReplayReport { ticks: demo.ticks, max_divergence: max_div, outcome_matches: outcome == demo.outcome })
}
