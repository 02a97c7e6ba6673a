//! Trial session state machine. Pure and synchronous: the connection loop
//! feeds it commands between ticks and calls [`Session::tick`] on its own
//! schedule, so the world trace depends only on tick-indexed commands.

use std::collections::VecDeque;
use std::time::{SystemTime, UNIX_EPOCH};

use super::protocol::{
    AgentChoice, BlueView, ConfigAck, ControlCommand, EpisodeEnd, Phase, Point, Score, ServerMessage, StateUpdate,
    TrialConfig, WorldGeometry,
};
use crate::demos::{DemoSource, Demonstration, WaypointEvent};
use crate::env::{ActionId, Controller, EpisodeRunner, Outcome, Policy, RandomPolicy, WaypointTakeover};
use crate::geom::Vec2;
use crate::learner::HeuristicPolicy;
use crate::nn::{Checkpoint, GreedyPolicy};
use crate::sim::{spawn_with, ScenarioSpec, SpawnOverrides, WorldConfig};

pub const SPEEDS: [u32; 3] = [1, 2, 5];

pub struct Session {
    phase: Phase,
    base_world: WorldConfig,
    world_cfg: WorldConfig,
    config: TrialConfig,
    policy: Box<dyn Policy + Send>,
    runner: Option<EpisodeRunner>,
    speed: u32,
    score: Score,
    episode_index: u64,
    waypoint_events: Vec<WaypointEvent>,
    session_id: String,
    finished: VecDeque<Demonstration>,
}

/// Error raised by a rejected command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub code: &'static str,
    pub message: String,
}

fn reject(code: &'static str, message: impl Into<String>) -> Rejection {
    Rejection { code, message: message.into() }
}

impl Session {
    pub fn new(base_world: WorldConfig, session_id: impl Into<String>) -> Self {
        Self {
            phase: Phase::Configuring,
            world_cfg: base_world.clone(),
            base_world,
            config: TrialConfig::default(),
            policy: Box::new(HeuristicPolicy),
            runner: None,
            speed: 1,
            score: Score::default(),
            episode_index: 0,
            waypoint_events: Vec::new(),
            session_id: session_id.into(),
            finished: VecDeque::new(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn speed(&self) -> u32 {
        self.speed
    }

    pub fn config(&self) -> &TrialConfig {
        &self.config
    }

    pub fn world_config(&self) -> &WorldConfig {
        &self.world_cfg
    }

    pub fn runner(&self) -> Option<&EpisodeRunner> {
        self.runner.as_ref()
    }

    pub fn score(&self) -> Score {
        self.score
    }

    /// Recording tag for the current agent choice.
    pub fn source(&self) -> DemoSource {
        match self.config.agent {
            AgentChoice::Trained { .. } => DemoSource::PolicyCorrected,
            _ => DemoSource::HumanDemo,
        }
    }

    /// Completed recordings not yet persisted.
    pub fn take_finished(&mut self) -> Vec<Demonstration> {
        self.finished.drain(..).collect()
    }

    /// Applies one command. Rejected commands leave the session unchanged and
    /// produce a single `error` message.
    pub fn handle_command(&mut self, command: ControlCommand, seq: Option<u64>) -> Vec<ServerMessage> {
        match self.apply(command) {
            Ok(messages) => messages,
            Err(r) => vec![ServerMessage::error(r.code, r.message, seq)],
        }
    }

    fn apply(&mut self, command: ControlCommand) -> Result<Vec<ServerMessage>, Rejection> {
        use ControlCommand::*;
        match command {
            Configure(cfg) => {
                self.require(&[Phase::Configuring, Phase::Ended], "configure")?;
                let (world_cfg, policy) = self.build(&cfg)?;
                self.world_cfg = world_cfg;
                self.policy = policy;
                self.config = cfg;
                self.phase = Phase::Configuring;
                self.runner = None;
                Ok(vec![self.config_ack()])
            }
            Start => {
                self.require(&[Phase::Configuring, Phase::Ended], "start")?;
                self.runner = Some(self.spawn()?);
                self.waypoint_events.clear();
                self.episode_index += 1;
                self.phase = Phase::Running;
                Ok(vec![self.state_message()])
            }
            Pause => {
                self.require(&[Phase::Running, Phase::Paused], "pause")?;
                self.phase = Phase::Paused;
                Ok(vec![self.state_message()])
            }
            Resume => {
                self.require(&[Phase::Running, Phase::Paused], "resume")?;
                self.phase = Phase::Running;
                Ok(vec![self.state_message()])
            }
            SetSpeed { multiplier } => {
                if !SPEEDS.contains(&multiplier) {
                    return Err(reject("invalid_speed", format!("speed must be one of {SPEEDS:?}, got {multiplier}")));
                }
                self.speed = multiplier;
                Ok(vec![self.state_message()])
            }
            AddWaypoint { drone_id, x, y } => {
                self.require(&[Phase::Running, Phase::Paused], "add_waypoint")?;
                self.require_human()?;
                if !(x.is_finite() && y.is_finite()) {
                    return Err(reject("invalid_waypoint", "waypoint coordinates must be finite"));
                }
                let runner = self.runner.as_mut().expect("active episode");
                let tick = runner.world().tick;
                let drone = runner
                    .world_mut()
                    .blues
                    .get_mut(drone_id)
                    .ok_or_else(|| reject("unknown_drone", format!("no drone {drone_id}")))?;
                drone.waypoints.push_back(Vec2::new(x, y));
                self.waypoint_events.push(WaypointEvent::Add { t: tick, drone_id, x, y });
                Ok(vec![self.state_message()])
            }
            DeleteWaypoint { drone_id, waypoint_index } => {
                self.require(&[Phase::Running, Phase::Paused], "delete_waypoint")?;
                self.require_human()?;
                let runner = self.runner.as_mut().expect("active episode");
                let tick = runner.world().tick;
                let drone = runner
                    .world_mut()
                    .blues
                    .get_mut(drone_id)
                    .ok_or_else(|| reject("unknown_drone", format!("no drone {drone_id}")))?;
                if waypoint_index >= drone.waypoints.len() {
                    return Err(reject(
                        "index_out_of_range",
                        format!("drone {drone_id} has {} waypoints, index {waypoint_index}", drone.waypoints.len()),
                    ));
                }
                drone.waypoints.remove(waypoint_index);
                self.waypoint_events.push(WaypointEvent::Delete { t: tick, drone_id, index: waypoint_index });
                Ok(vec![self.state_message()])
            }
            Stop => match self.phase {
                Phase::Running | Phase::Paused => Ok(self.end_episode()),
                Phase::Ended => Ok(vec![self.state_message()]),
                Phase::Configuring => Err(reject("wrong_phase", "no trial is running")),
            },
        }
    }

    fn require(&self, allowed: &[Phase], what: &str) -> Result<(), Rejection> {
        if allowed.contains(&self.phase) {
            Ok(())
        } else {
            Err(reject("wrong_phase", format!("`{what}` is not allowed while {:?}", self.phase)))
        }
    }

    fn require_human(&self) -> Result<(), Rejection> {
        if self.config.human_involved {
            Ok(())
        } else {
            Err(reject("human_disabled", "this trial runs without a human operator"))
        }
    }

    fn build(&self, cfg: &TrialConfig) -> Result<(WorldConfig, Box<dyn Policy + Send>), Rejection> {
        if !(cfg.update_frequency.is_finite() && cfg.update_frequency > 0.0) {
            return Err(reject("invalid_config", "update_frequency must be > 0"));
        }
        let mut world = self.base_world.clone();
        if let Some(n) = cfg.blue_count {
            world.blue_count = n;
        }
        world.validate().map_err(|e| reject("invalid_config", e.to_string()))?;
        if cfg.blue_positions.len() > world.blue_count {
            return Err(reject("invalid_config", "more start positions than blue drones"));
        }
        let finite = |p: &[f64; 2]| p.iter().all(|v| v.is_finite());
        if !cfg.blue_positions.iter().chain(&cfg.red_waypoints).all(finite) {
            return Err(reject("invalid_config", "positions must be finite"));
        }
        let policy: Box<dyn Policy + Send> = match &cfg.agent {
            AgentChoice::Heuristic => Box::new(HeuristicPolicy),
            AgentChoice::Random => Box::new(RandomPolicy::new(cfg.seed)),
            AgentChoice::Trained { checkpoint } => {
                let ck = Checkpoint::load(checkpoint)
                    .map_err(|e| reject("invalid_config", format!("checkpoint {}: {e}", checkpoint.display())))?;
                let network = ck.network().map_err(|e| reject("invalid_config", e.to_string()))?;
                Box::new(GreedyPolicy { network })
            }
        };
        Ok((world, policy))
    }

    fn overrides(&self) -> SpawnOverrides {
        SpawnOverrides {
            blue_positions: self.config.blue_positions.clone(),
            red_waypoints: self.config.red_waypoints.clone(),
        }
    }

    fn spawn(&self) -> Result<EpisodeRunner, Rejection> {
        let spec = ScenarioSpec::new(self.config.scenario, self.config.seed.wrapping_add(self.episode_index));
        let world = spawn_with(&spec, &self.world_cfg, &self.overrides())
            .map_err(|e| reject("invalid_config", e.to_string()))?;
        EpisodeRunner::from_world(world).map_err(|e| reject("invalid_config", e.to_string()))
    }

    /// Decides every drone's action for the next tick: a drone with queued
    /// waypoints follows them (Human), all others follow the agent policy.
    pub fn resolve_actions(&mut self) -> Vec<(ActionId, Controller)> {
        let runner = self.runner.as_mut().expect("active episode");
        let mut takeover = WaypointTakeover;
        runner.decide(&mut self.policy, Some(&mut takeover))
    }

    /// Advances one tick if running. Returns the messages to broadcast when
    /// the episode ends on this tick.
    pub fn tick(&mut self) -> Vec<ServerMessage> {
        if self.phase != Phase::Running {
            return Vec::new();
        }
        let decisions = self.resolve_actions();
        let runner = self.runner.as_mut().expect("active episode");
        if let Err(e) = runner.step(&decisions) {
            return vec![ServerMessage::error("simulation", e.to_string(), None)];
        }
        if runner.is_done() {
            self.end_episode()
        } else {
            Vec::new()
        }
    }

    /// Ends the session: an unfinished episode is recorded as a timeout.
    pub fn disconnect(&mut self) {
        if matches!(self.phase, Phase::Running | Phase::Paused) {
            self.end_episode();
        }
        self.phase = Phase::Ended;
    }

    fn end_episode(&mut self) -> Vec<ServerMessage> {
        let outcome = {
            let world = self.runner.as_ref().expect("active episode").world();
            world.terminal.map(Outcome::from).unwrap_or(Outcome::Timeout)
        };
        match outcome {
            Outcome::Win => self.score.wins += 1,
            Outcome::Loss => self.score.losses += 1,
            Outcome::Timeout => {}
        }
        self.phase = Phase::Ended;
        let last_state = self.state_update();
        let record = self.runner.take().expect("active episode").finish();
        let source = self.source();
        let mut demo = Demonstration::from_episode(&record, source, self.config.participant.clone(), &self.world_cfg);
        demo.session = Some(self.session_id.clone());
        demo.timestamp = SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs());
        demo.waypoint_events = std::mem::take(&mut self.waypoint_events);
        demo.overrides = Some(self.overrides()).filter(|o| !o.is_empty());
        self.finished.push_back(demo);
        vec![
            ServerMessage::StateUpdate(last_state),
            ServerMessage::EpisodeEnd(EpisodeEnd {
                outcome,
                ticks: record.total_ticks,
                score: self.score,
                source: source.to_string(),
            }),
        ]
    }

    /// Snapshot of the live world as shown to the operator.
    pub fn state_update(&self) -> StateUpdate {
        let Some(runner) = &self.runner else {
            return StateUpdate {
                tick: 0,
                blues: Vec::new(),
                red_visible: None,
                score: self.score,
                phase: self.phase,
                speed: self.speed,
            };
        };
        let world = runner.world();
        let visible = self.config.reveal_red || world.red_detected();
        StateUpdate {
            tick: world.tick,
            blues: world
                .blues
                .iter()
                .map(|b| BlueView {
                    id: b.id,
                    x: b.pose.position.x,
                    y: b.pose.position.y,
                    heading: b.pose.heading,
                    waypoints: b.waypoints.iter().map(|w| [w.x, w.y]).collect(),
                    controller: if b.waypoints.is_empty() { Controller::Agent } else { Controller::Human },
                })
                .collect(),
            red_visible: visible.then_some(Point { x: world.red.pose.position.x, y: world.red.pose.position.y }),
            score: self.score,
            phase: self.phase,
            speed: self.speed,
        }
    }

    pub fn state_message(&self) -> ServerMessage {
        ServerMessage::StateUpdate(self.state_update())
    }

    pub fn config_ack(&self) -> ServerMessage {
        let w = &self.world_cfg;
        ServerMessage::ConfigAck(ConfigAck {
            config: self.config.clone(),
            world: WorldGeometry {
                map_side: w.map_side,
                restricted_center: Point { x: w.restricted_center.x, y: w.restricted_center.y },
                restricted_radius: w.restricted_radius,
                radar_range: w.radar_range,
                neutralize_range: w.neutralize_range,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::ScenarioKind;

    fn running() -> Session {
        let mut s = Session::new(WorldConfig::mini(), "t");
        s.handle_command(
            ControlCommand::Configure(TrialConfig { scenario: ScenarioKind::Simple, seed: 3, ..Default::default() }),
            None,
        );
        s.handle_command(ControlCommand::Start, None);
        assert_eq!(s.phase(), Phase::Running);
        s
    }

    fn far_point(s: &Session, id: usize) -> (f64, f64) {
        let p = s.runner().unwrap().world().blues[id].pose;
        let target = p.position + Vec2::from_heading(p.heading + 0.4) * 200.0;
        (target.x, target.y)
    }

    #[test]
    fn waypoint_flips_controller_to_human() {
        let mut s = running();
        let (x, y) = far_point(&s, 2);
        let out = s.handle_command(ControlCommand::AddWaypoint { drone_id: 2, x, y }, Some(1));
        let ServerMessage::StateUpdate(u) = &out[0] else { panic!("{out:?}") };
        assert_eq!(u.blues[2].waypoints, vec![[x, y]]);
        assert_eq!(u.blues[2].controller, Controller::Human);
        let decisions = s.resolve_actions();
        assert_eq!(decisions[2], (ActionId::Positive, Controller::Human));
        assert!(decisions.iter().enumerate().all(|(i, d)| i == 2 || d.1 == Controller::Agent));
    }

    #[test]
    fn delete_out_of_range_is_rejected_without_change() {
        let mut s = running();
        s.handle_command(ControlCommand::AddWaypoint { drone_id: 0, x: 10.0, y: 10.0 }, None);
        s.handle_command(ControlCommand::AddWaypoint { drone_id: 0, x: 20.0, y: 20.0 }, None);
        let out = s.handle_command(ControlCommand::DeleteWaypoint { drone_id: 0, waypoint_index: 7 }, Some(5));
        assert!(matches!(&out[0], ServerMessage::Error(e) if e.code == "index_out_of_range" && e.ref_seq == Some(5)));
        assert_eq!(s.runner().unwrap().world().blues[0].waypoints.len(), 2);
    }

    #[test]
    fn pause_freezes_ticks_and_is_idempotent() {
        let mut s = running();
        s.tick();
        s.handle_command(ControlCommand::Pause, None);
        let t = s.state_update().tick;
        for _ in 0..5 {
            s.tick();
        }
        assert_eq!(s.state_update().tick, t);
        let out = s.handle_command(ControlCommand::Pause, None);
        assert!(matches!(out[0], ServerMessage::StateUpdate(_)));
        assert_eq!(s.phase(), Phase::Paused);
    }

    #[test]
    fn invalid_speed_and_wrong_phase() {
        let mut s = Session::new(WorldConfig::mini(), "t");
        let out = s.handle_command(ControlCommand::SetSpeed { multiplier: 3 }, None);
        assert!(matches!(&out[0], ServerMessage::Error(e) if e.code == "invalid_speed"));
        let out = s.handle_command(ControlCommand::AddWaypoint { drone_id: 0, x: 1.0, y: 1.0 }, None);
        assert!(matches!(&out[0], ServerMessage::Error(e) if e.code == "wrong_phase"));
        let out = s.handle_command(ControlCommand::AddWaypoint { drone_id: 0, x: 1.0, y: 1.0 }, None);
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn unknown_drone_rejected() {
        let mut s = running();
        let out = s.handle_command(ControlCommand::AddWaypoint { drone_id: 99, x: 1.0, y: 1.0 }, None);
        assert!(matches!(&out[0], ServerMessage::Error(e) if e.code == "unknown_drone"));
    }

    #[test]
    fn heuristic_agent_without_commands_records_human_demo_with_agent_tags() {
        let mut s = running();
        let mut end = Vec::new();
        while s.phase() == Phase::Running {
            end = s.tick();
        }
        assert!(matches!(end.last(), Some(ServerMessage::EpisodeEnd(_))));
        let demos = s.take_finished();
        assert_eq!(demos.len(), 1);
        assert_eq!(demos[0].source, DemoSource::HumanDemo);
        assert!(demos[0].steps.iter().flat_map(|st| &st.controllers).all(|c| *c == Controller::Agent));
    }

    #[test]
    fn disconnect_records_timeout() {
        let mut s = running();
        s.tick();
        s.disconnect();
        assert_eq!(s.phase(), Phase::Ended);
        let demos = s.take_finished();
        assert_eq!(demos[0].outcome, Outcome::Timeout);
        assert_eq!(demos[0].ticks, 1);
    }

    #[test]
    fn bad_update_frequency_rejected() {
        let mut s = Session::new(WorldConfig::mini(), "t");
        let out = s.handle_command(
            ControlCommand::Configure(TrialConfig { update_frequency: 0.0, ..Default::default() }),
            None,
        );
        assert!(matches!(&out[0], ServerMessage::Error(e) if e.code == "invalid_config"));
    }

    #[test]
    fn edited_trials_replay_exactly() {
        let mut s = Session::new(WorldConfig::mini(), "t");
        let cfg = TrialConfig {
            seed: 8,
            blue_positions: vec![[100.0, 100.0], [500.0, 120.0]],
            red_waypoints: vec![[450.0, 500.0]],
            ..Default::default()
        };
        s.handle_command(ControlCommand::Configure(cfg), None);
        s.handle_command(ControlCommand::Start, None);
        s.handle_command(ControlCommand::AddWaypoint { drone_id: 3, x: 20.0, y: 20.0 }, None);
        while s.phase() == Phase::Running {
            s.tick();
        }
        let demo = s.take_finished().remove(0);
        assert!(demo.overrides.is_some());
        let back = Demonstration::from_line(&demo.to_line()).unwrap();
        let report = crate::demos::replay(&back, &WorldConfig::default()).unwrap();
        assert_eq!(report.max_divergence, 0.0);
        assert!(report.outcome_matches);
    }
}
