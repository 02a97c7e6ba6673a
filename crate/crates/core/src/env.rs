//! Multi-agent MDP on top of the simulator: egocentric stacked observations,
//! two-action rotation control, terminal plus potential-based shaping
//! rewards, and the episode loop shared by training, evaluation and the
//! trial server.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::geom::{wrap_angle, Vec2};
use crate::sim::{spawn_scenario, Pose, ScenarioSpec, SimError, StepEvents, Terminal, WorldConfig, WorldState};

pub const FRAME_DIM: usize = 4;
pub const STACK: usize = 3;
pub const OBS_DIM: usize = FRAME_DIM * STACK;
pub const NUM_ACTIONS: usize = 2;

/// Three stacked frames, oldest first, each `(Δx_red, Δy_red, Δx_zone, Δy_zone)`
/// in meters relative to the observing drone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub features: [f64; OBS_DIM],
}

impl Observation {
    pub fn frame(&self, age: usize) -> [f64; FRAME_DIM] {
        // age 0 is the newest frame
        let start = (STACK - 1 - age) * FRAME_DIM;
        self.features[start..start + FRAME_DIM].try_into().unwrap()
    }

    pub fn red_offset(&self, age: usize) -> Vec2 {
        let f = self.frame(age);
        Vec2::new(f[0], f[1])
    }

    pub fn zone_offset(&self, age: usize) -> Vec2 {
        let f = self.frame(age);
        Vec2::new(f[2], f[3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ActionId {
    /// Turn input −1.
    Negative = 0,
    /// Turn input +1.
    Positive = 1,
}

impl ActionId {
    pub const ALL: [ActionId; NUM_ACTIONS] = [ActionId::Negative, ActionId::Positive];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(ActionId::Negative),
            1 => Some(ActionId::Positive),
            _ => None,
        }
    }

    pub fn turn_input(self) -> f64 {
        match self {
            ActionId::Negative => -1.0,
            ActionId::Positive => 1.0,
        }
    }
}

impl From<ActionId> for u8 {
    fn from(a: ActionId) -> u8 {
        a as u8
    }
}

impl TryFrom<u8> for ActionId {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        ActionId::from_index(v as usize).ok_or_else(|| format!("action {v} is not 0 or 1"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Controller {
    Agent,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub observation: Observation,
    pub action: ActionId,
    pub reward: f64,
    pub next_observation: Observation,
    /// Neutralization or zone entry; no bootstrapping past this step.
    pub terminal: bool,
    pub agent_id: usize,
    pub controller: Controller,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Win,
    Loss,
    Timeout,
}

impl From<Terminal> for Outcome {
    fn from(t: Terminal) -> Self {
        match t {
            Terminal::Neutralized => Outcome::Win,
            Terminal::ReachedZone => Outcome::Loss,
            Terminal::TimeExpired => Outcome::Timeout,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Win => "win",
            Outcome::Loss => "loss",
            Outcome::Timeout => "timeout",
        })
    }
}

/// Snapshot of the world at one tick boundary, as logged in trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub tick: u32,
    pub blues: Vec<Pose>,
    pub red: Pose,
    pub red_neutralized: bool,
    pub detections: Vec<Option<Vec2>>,
    /// Head of each blue drone's operator waypoint queue, if any.
    pub active_waypoints: Vec<Option<Vec2>>,
}

impl Frame {
    pub fn capture(world: &WorldState) -> Self {
        Self {
            tick: world.tick,
            blues: world.blues.iter().map(|b| b.pose).collect(),
            red: world.red.pose,
            red_neutralized: world.red.neutralized,
            detections: world.detections.clone(),
            active_waypoints: world.blues.iter().map(|b| b.waypoints.front().copied()).collect(),
        }
    }
}

/// Decisions and rewards of one tick, indexed by drone id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub actions: Vec<ActionId>,
    pub rewards: Vec<f64>,
    pub controllers: Vec<Controller>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub scenario: ScenarioSpec,
    /// `total_ticks + 1` snapshots: the spawn state and the state after every tick.
    pub frames: Vec<Frame>,
    pub steps: Vec<StepLog>,
    /// One transition sequence per agent, all of length `total_ticks`.
    pub transitions: Vec<Vec<Transition>>,
    pub outcome: Outcome,
    pub total_ticks: u32,
}

/// Per-drone frame history feeding the observation stack. Holds the last
/// red fix so undetected ticks repeat it unchanged.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationHistory {
    frames: Vec<[f64; FRAME_DIM]>,
    last_fix: Option<Vec2>,
}

impl ObservationHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the frame for the current tick and returns the stacked
    /// observation. Before the first fix, the red slots point at
    /// `sentinel_target` (the red spawn-region center).
    pub fn push(&mut self, position: Vec2, detection: Option<Vec2>, zone: Vec2, sentinel_target: Vec2) -> Observation {
        if detection.is_some() {
            self.last_fix = detection;
        }
        let red = self.last_fix.unwrap_or(sentinel_target - position);
        let zone = zone - position;
        let frame = [red.x, red.y, zone.x, zone.y];
        if self.frames.is_empty() {
            self.frames = vec![frame; STACK];
        } else {
            self.frames.remove(0);
            self.frames.push(frame);
        }
        let mut features = [0.0; OBS_DIM];
        for (i, f) in self.frames.iter().enumerate() {
            features[i * FRAME_DIM..(i + 1) * FRAME_DIM].copy_from_slice(f);
        }
        Observation { features }
    }
}

/// Pushes the current tick of `state` for one drone into its history.
pub fn build_observation(
    state: &WorldState,
    drone_id: usize,
    history: &mut ObservationHistory,
) -> Result<Observation, SimError> {
    let blue = state.blue(drone_id)?;
    let detection = state.detections.get(drone_id).copied().flatten();
    Ok(history.push(blue.pose.position, detection, state.config.restricted_center, state.config.red_spawn_center()))
}

/// Shaping potential `Φ = −k·d(blue, red)`.
pub fn potential(state: &WorldState, drone_id: usize) -> Result<f64, SimError> {
    let blue = state.blue(drone_id)?;
    let cfg = &state.config;
    let distance = match (cfg.noisy_shaping, state.detections.get(drone_id).copied().flatten()) {
        (true, Some(offset)) => offset.norm(),
        _ => blue.pose.position.distance(state.red.pose.position),
    };
    Ok(-cfg.shaping_gain * distance)
}

/// Team terminal reward plus this drone's shaping term `γΦ(s') − Φ(s)`.
pub fn compute_reward(
    prev: &WorldState,
    next: &WorldState,
    events: &StepEvents,
    drone_id: usize,
) -> Result<f64, SimError> {
    let shaping = next.config.discount * potential(next, drone_id)? - potential(prev, drone_id)?;
    Ok(terminal_reward(events.terminal()) + shaping)
}

pub fn terminal_reward(terminal: Option<Terminal>) -> f64 {
    match terminal {
        Some(Terminal::Neutralized) => 1.0,
        Some(Terminal::ReachedZone) => -1.0,
        Some(Terminal::TimeExpired) | None => 0.0,
    }
}

/// Action that turns `pose` toward `target`; a zero heading error picks
/// the positive rotation.
pub fn steer_toward(pose: Pose, target: Vec2) -> ActionId {
    let offset = target - pose.position;
    let error = wrap_angle(offset.bearing() - pose.heading);
    if error >= 0.0 {
        ActionId::Positive
    } else {
        ActionId::Negative
    }
}

/// What a policy sees for one drone.
#[derive(Debug, Clone, Copy)]
pub struct AgentView<'a> {
    pub drone_id: usize,
    pub observation: &'a Observation,
    /// Own pose; learned policies ignore it and act on the observation only.
    pub pose: Pose,
}

/// Chooses one action per drone from decentralized views.
pub trait Policy {
    fn act(&mut self, views: &[AgentView<'_>]) -> Vec<ActionId>;
}

impl<P: Policy + ?Sized> Policy for &mut P {
    fn act(&mut self, views: &[AgentView<'_>]) -> Vec<ActionId> {
        (**self).act(views)
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn act(&mut self, views: &[AgentView<'_>]) -> Vec<ActionId> {
        (**self).act(views)
    }
}

/// Higher-priority controller consulted before the policy each tick.
pub trait ControlHook {
    /// Returns an action if an override is active for this drone. May update
    /// the drone's waypoint queue (e.g. consume reached waypoints).
    fn override_action(&mut self, world: &mut WorldState, drone_id: usize) -> Option<ActionId>;
}

/// Operator waypoint takeover: a drone with a non-empty waypoint queue is
/// steered toward its head waypoint; reached waypoints are consumed first.
#[derive(Debug, Default, Clone, Copy)]
pub struct WaypointTakeover;

impl ControlHook for WaypointTakeover {
    fn override_action(&mut self, world: &mut WorldState, drone_id: usize) -> Option<ActionId> {
        let reach = world.config.max_speed * world.config.tick_seconds;
        let blue = world.blues.get_mut(drone_id)?;
        while let Some(&wp) = blue.waypoints.front() {
            if wp.distance(blue.pose.position) <= reach {
                blue.waypoints.pop_front();
            } else {
                break;
            }
        }
        blue.waypoints.front().map(|&wp| steer_toward(blue.pose, wp))
    }
}

/// Result of a single runner tick.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub events: StepEvents,
    /// One transition per drone, indexed by id.
    pub transitions: Vec<Transition>,
}

/// Incremental episode driver used by training, evaluation and the trial server.
#[derive(Debug, Clone)]
pub struct EpisodeRunner {
    world: WorldState,
    histories: Vec<ObservationHistory>,
    observations: Vec<Observation>,
    frames: Vec<Frame>,
    steps: Vec<StepLog>,
    transitions: Vec<Vec<Transition>>,
}

impl EpisodeRunner {
    pub fn new(spec: &ScenarioSpec, cfg: &WorldConfig) -> Result<Self, SimError> {
        Self::from_world(spawn_scenario(spec, cfg)?)
    }

    pub fn from_world(world: WorldState) -> Result<Self, SimError> {
        let n = world.blues.len();
        let mut histories = vec![ObservationHistory::new(); n];
        let observations = histories
            .iter_mut()
            .enumerate()
            .map(|(id, h)| build_observation(&world, id, h))
            .collect::<Result<Vec<_>, _>>()?;
        let frames = vec![Frame::capture(&world)];
        Ok(Self { world, histories, observations, frames, steps: Vec::new(), transitions: vec![Vec::new(); n] })
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    /// Mutable world access for operator commands (waypoint edits).
    pub fn world_mut(&mut self) -> &mut WorldState {
        &mut self.world
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn is_done(&self) -> bool {
        self.world.is_over()
    }

    pub fn views(&self) -> Vec<AgentView<'_>> {
        self.world
            .blues
            .iter()
            .zip(&self.observations)
            .map(|(b, o)| AgentView { drone_id: b.id, observation: o, pose: b.pose })
            .collect()
    }

    /// Resolves per-drone actions: the hook first, then the policy.
    pub fn decide(
        &mut self,
        policy: &mut dyn Policy,
        hook: Option<&mut dyn ControlHook>,
    ) -> Vec<(ActionId, Controller)> {
        let overrides: Vec<Option<ActionId>> = match hook {
            Some(h) => (0..self.world.blues.len()).map(|id| h.override_action(&mut self.world, id)).collect(),
            None => vec![None; self.world.blues.len()],
        };
        let chosen = policy.act(&self.views());
        overrides
            .into_iter()
            .zip(chosen)
            .map(|(o, a)| match o {
                Some(h) => (h, Controller::Human),
                None => (a, Controller::Agent),
            })
            .collect()
    }

    pub fn step(&mut self, decisions: &[(ActionId, Controller)]) -> Result<StepResult, SimError> {
        let inputs: Vec<f64> = decisions.iter().map(|(a, _)| a.turn_input()).collect();
        let prev = self.world.clone();
        let events = self.world.step(&inputs)?;
        let terminal = matches!(events.terminal(), Some(Terminal::Neutralized | Terminal::ReachedZone));

        let mut transitions = Vec::with_capacity(decisions.len());
        let mut rewards = Vec::with_capacity(decisions.len());
        for (id, &(action, controller)) in decisions.iter().enumerate() {
            let reward = compute_reward(&prev, &self.world, &events, id)?;
            let next_observation = build_observation(&self.world, id, &mut self.histories[id])?;
            let t = Transition {
                observation: self.observations[id],
                action,
                reward,
                next_observation,
                terminal,
                agent_id: id,
                controller,
            };
            self.observations[id] = next_observation;
            self.transitions[id].push(t.clone());
            transitions.push(t);
            rewards.push(reward);
        }
        self.steps.push(StepLog {
            actions: decisions.iter().map(|d| d.0).collect(),
            rewards,
            controllers: decisions.iter().map(|d| d.1).collect(),
        });
        self.frames.push(Frame::capture(&self.world));
        Ok(StepResult { events, transitions })
    }

    /// Closes the episode. An unfinished episode (e.g. an aborted trial) is
    /// recorded as a timeout.
    pub fn finish(self) -> EpisodeRecord {
        let outcome = self.world.terminal.map(Outcome::from).unwrap_or(Outcome::Timeout);
        EpisodeRecord {
            scenario: self.world.scenario,
            total_ticks: self.world.tick,
            frames: self.frames,
            steps: self.steps,
            transitions: self.transitions,
            outcome,
        }
    }
}

/// Runs one full episode.
pub fn env_episode(
    policy: &mut dyn Policy,
    spec: &ScenarioSpec,
    cfg: &WorldConfig,
    mut hook: Option<&mut dyn ControlHook>,
) -> Result<EpisodeRecord, SimError> {
    let mut runner = EpisodeRunner::new(spec, cfg)?;
    while !runner.is_done() {
        let decisions = runner.decide(policy, hook.as_mut().map(|h| &mut **h as &mut dyn ControlHook));
        runner.step(&decisions)?;
    }
    Ok(runner.finish())
}

/// Policy that always returns the same action.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub ActionId);

impl Policy for ConstantPolicy {
    fn act(&mut self, views: &[AgentView<'_>]) -> Vec<ActionId> {
        vec![self.0; views.len()]
    }
}

/// Uniform random actions from its own seeded stream.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: rand_chacha::ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self { rng: crate::seed::rng(seed, crate::seed::stream::POLICY) }
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, views: &[AgentView<'_>]) -> Vec<ActionId> {
        use rand::Rng;
        views.iter().map(|_| if self.rng.gen::<bool>() { ActionId::Positive } else { ActionId::Negative }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::ScenarioKind;

    #[test]
    fn newest_frame_from_detection() {
        let mut h = ObservationHistory::new();
        let blue = Vec2::new(500.0, 500.0);
        let zone = blue + Vec2::new(-100.0, 0.0);
        let obs = h.push(blue, Some(Vec2::new(30.0, -40.0)), zone, Vec2::ZERO);
        assert_eq!(obs.frame(0), [30.0, -40.0, -100.0, 0.0]);
    }

    #[test]
    fn first_tick_frames_identical() {
        let mut h = ObservationHistory::new();
        let obs = h.push(Vec2::new(1.0, 2.0), Some(Vec2::new(3.0, 4.0)), Vec2::new(9.0, 9.0), Vec2::ZERO);
        assert_eq!(obs.frame(0), obs.frame(1));
        assert_eq!(obs.frame(1), obs.frame(2));
    }

    #[test]
    fn undetected_red_holds_last_fix() {
        let mut h = ObservationHistory::new();
        let zone = Vec2::new(0.0, 0.0);
        h.push(Vec2::new(10.0, 0.0), Some(Vec2::new(50.0, 5.0)), zone, Vec2::ZERO);
        let obs = h.push(Vec2::new(20.0, 0.0), None, zone, Vec2::ZERO);
        assert_eq!(obs.red_offset(0), Vec2::new(50.0, 5.0));
        assert_eq!(obs.zone_offset(0), Vec2::new(-20.0, 0.0));
        assert_eq!(obs.zone_offset(1), Vec2::new(-10.0, 0.0));
    }

    #[test]
    fn sentinel_points_at_spawn_center_before_first_fix() {
        let mut h = ObservationHistory::new();
        let obs = h.push(Vec2::new(10.0, 10.0), None, Vec2::ZERO, Vec2::new(110.0, 10.0));
        assert_eq!(obs.red_offset(0), Vec2::new(100.0, 0.0));
    }

    fn world_pair(d_prev: f64, d_next: f64, k: f64, gamma: f64) -> (WorldState, WorldState) {
        let cfg = WorldConfig { shaping_gain: k, discount: gamma, ..WorldConfig::default() };
        let mut a = spawn_scenario(&ScenarioSpec::new(ScenarioKind::Simple, 1), &cfg).unwrap();
        a.red.pose.position = Vec2::new(1000.0, 1000.0);
        let mut b = a.clone();
        a.blues[0].pose.position = Vec2::new(1000.0 - d_prev, 1000.0);
        b.blues[0].pose.position = Vec2::new(1000.0 - d_next, 1000.0);
        (a, b)
    }

    #[test]
    fn shaping_closing_ten_meters() {
        let (a, b) = world_pair(100.0, 90.0, 0.01, 1.0);
        let r = compute_reward(&a, &b, &StepEvents::default(), 0).unwrap();
        // −0.01·90 − (−0.01·100)
        assert!((r - 0.1).abs() < 1e-12);
    }

    #[test]
    fn stationary_pair_zero_reward() {
        let (a, b) = world_pair(100.0, 100.0, 0.01, 1.0);
        assert_eq!(compute_reward(&a, &b, &StepEvents::default(), 0).unwrap(), 0.0);
    }

    #[test]
    fn neutralization_tick_reward() {
        let (a, b) = world_pair(100.0, 0.0, 0.01, 1.0);
        let ev = StepEvents { neutralized_this_tick: true, ..StepEvents::default() };
        assert!((compute_reward(&a, &b, &ev, 0).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn steer_sign_rule() {
        let pose = Pose { position: Vec2::ZERO, heading: 0.0 };
        assert_eq!(steer_toward(pose, Vec2::from_heading(0.3)), ActionId::Positive);
        assert_eq!(steer_toward(pose, Vec2::from_heading(-0.3)), ActionId::Negative);
        assert_eq!(steer_toward(pose, Vec2::new(5.0, 0.0)), ActionId::Positive);
    }

    #[test]
    fn action_serializes_as_integer() {
        assert_eq!(serde_json::to_string(&ActionId::Positive).unwrap(), "1");
        assert_eq!(serde_json::from_str::<ActionId>("0").unwrap(), ActionId::Negative);
        assert!(serde_json::from_str::<ActionId>("2").is_err());
    }

    #[test]
    fn constant_policy_episode_deterministic() {
        let cfg = WorldConfig::mini();
        let spec = ScenarioSpec::new(ScenarioKind::Simple, 5);
        let a = env_episode(&mut ConstantPolicy(ActionId::Positive), &spec, &cfg, None).unwrap();
        let b = env_episode(&mut ConstantPolicy(ActionId::Positive), &spec, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames.len() as u32, a.total_ticks + 1);
        assert!(a.transitions.iter().all(|t| t.len() as u32 == a.total_ticks));
    }

    #[test]
    fn waypoint_takeover_overrides_and_releases() {
        let cfg = WorldConfig::default();
        let mut world = spawn_scenario(&ScenarioSpec::new(ScenarioKind::Simple, 2), &cfg).unwrap();
        let pose = world.blues[0].pose;
        let target = pose.position + Vec2::from_heading(pose.heading + 0.4) * 200.0;
        world.blues[0].waypoints.push_back(target);
        let mut hook = WaypointTakeover;
        assert_eq!(hook.override_action(&mut world, 0), Some(ActionId::Positive));
        assert_eq!(hook.override_action(&mut world, 1), None);
        world.blues[0].waypoints[0] = pose.position + Vec2::new(3.0, 0.0);
        assert_eq!(hook.override_action(&mut world, 0), None);
        assert!(world.blues[0].waypoints.is_empty());
    }
}
