//! Dueling double Q-learning with optional demonstration replay.

pub mod heuristic;
pub mod loss;
pub mod replay;

pub use heuristic::HeuristicPolicy;
pub use loss::{combined_loss, double_q_target, margin_loss, n_step_return, LossReport, LossWeights, NStepTail};
pub use replay::{sample_mixed, DemoBuffer, NStepAccumulator, ReplayBuffer, ReplayItem};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

use crate::analysis::{evaluate, CurvePoint, LearningCurve};
use crate::env::{ActionId, AgentView, EpisodeRunner, Policy};
use crate::nn::{
    adam_step, sync_target, AdamState, Architecture, Checkpoint, GreedyPolicy, NnError, QNetwork, TrainingMetadata,
};
use crate::seed;
use crate::sim::{ScenarioKind, ScenarioSpec, SimError, WorldConfig};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("demonstration buffer holds no winning transitions but demo_fraction > 0")]
    NoDemos,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    /// Gradient updates between target syncs.
    pub target_update_every: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Multiplicative decay per environment step.
    pub epsilon_decay: f64,
    pub demo_fraction: f64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Greedy episodes run once after training; 0 skips.
    pub final_eval_episodes: usize,
    pub replay_capacity: usize,
    pub hidden: usize,
    /// Factor applied to raw observations (meters) before the first layer.
    pub input_scale: f64,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 10_000,
            batch_size: 64,
            learning_rate: 0.0004,
            gamma: 0.99,
            target_update_every: 10,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay: 0.999_995,
            demo_fraction: 0.30,
            eval_every: 100,
            eval_episodes: 30,
            final_eval_episodes: 0,
            replay_capacity: 100_000,
            hidden: 64,
            input_scale: 1.0 / 1000.0,
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Budget for the scaled-down world.
    pub fn mini() -> Self {
        Self {
            episodes: 800,
            learning_rate: 0.001,
            epsilon_decay: 0.9997,
            eval_every: 5,
            eval_episodes: 30,
            final_eval_episodes: 200,
            input_scale: 1.0 / 100.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: &str| Err(LearnError::Config(m.into()));
        if !(0.0..=1.0).contains(&self.demo_fraction) {
            return bad("demo_fraction must lie in [0, 1]");
        }
        if !(0.0..=self.epsilon_start).contains(&self.epsilon_end) || !(0.0..=1.0).contains(&self.epsilon_start) {
            return bad("need 0 <= epsilon_end <= epsilon_start <= 1");
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return bad("epsilon_decay must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.target_update_every == 0 || self.hidden == 0 {
            return bad("batch_size, replay_capacity, target_update_every and hidden must be > 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return bad("input_scale must be > 0");
        }
        self.loss.validate()
    }
}

/// `max(ε_end, ε_start · decay^steps)`.
pub fn epsilon_schedule(steps: u64, cfg: &TrainConfig) -> f64 {
    let decayed = cfg.epsilon_start * cfg.epsilon_decay.powf(steps as f64);
    decayed.max(cfg.epsilon_end)
}

/// ε-greedy wrapper over the online network, one draw per agent.
struct ExplorePolicy<'a> {
    network: &'a QNetwork,
    epsilon: f64,
    rng: &'a mut ChaCha8Rng,
}

impl Policy for ExplorePolicy<'_> {
    fn act(&mut self, views: &[AgentView<'_>]) -> Vec<ActionId> {
        views
            .iter()
            .map(|v| {
                if self.rng.gen::<f64>() < self.epsilon {
                    if self.rng.gen::<bool>() {
                        ActionId::Positive
                    } else {
                        ActionId::Negative
                    }
                } else {
                    self.network.greedy_action(&v.observation.features).expect("observation width matches")
                }
            })
            .collect()
    }
}

/// Scenario of the `index`-th training episode.
pub fn train_scenario(kind: ScenarioKind, seed_base: u64, index: u64) -> ScenarioSpec {
    ScenarioSpec::new(kind, seed::derive(seed::derive(seed_base, seed::stream::TRAIN_EPISODE), index))
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub curve: LearningCurve,
    /// Success rate of the post-training evaluation, if one was run.
    pub final_success: Option<f64>,
    pub env_steps: u64,
    pub updates: u64,
    pub last_loss: Option<LossReport>,
}

/// Progress hook called after every evaluation block.
pub type Progress<'a> = &'a mut dyn FnMut(&CurvePoint);

/// Trains one shared network for all blue drones.
///
/// Every agent's transitions enter the replay; once it holds a full batch,
/// each environment tick performs one gradient update on a mixed batch.
/// Evaluation blocks use the greedy policy on a fixed set of scenario seeds
/// that depends only on `cfg.seed`.
pub fn train(
    cfg: &TrainConfig,
    world: &WorldConfig,
    kind: ScenarioKind,
    demos: Option<&DemoBuffer>,
    mut progress: Option<Progress<'_>>,
) -> Result<TrainReport, LearnError> {
    cfg.validate()?;
    world.validate()?;
    if let Some(d) = demos {
        if d.is_empty() && cfg.demo_fraction > 0.0 {
            return Err(LearnError::NoDemos);
        }
    }
    let started = Instant::now();
    let arch = Architecture { hidden: cfg.hidden, ..Architecture::default() };
    let mut online = QNetwork::new(arch, cfg.input_scale, &mut seed::rng(cfg.seed, seed::stream::INIT));
    let mut target = sync_target(&online);
    let mut adam = AdamState::new(online.num_params(), cfg.learning_rate);
    let mut replay = ReplayBuffer::new(cfg.replay_capacity);
    let mut explore_rng = seed::rng(cfg.seed, seed::stream::EXPLORE);
    let mut sample_rng = seed::rng(cfg.seed, seed::stream::SAMPLE);
    let mut curve = LearningCurve::default();
    let mut env_steps = 0u64;
    let mut updates = 0u64;
    let mut last_loss = None;

    for episode in 0..cfg.episodes {
        let mut runner = EpisodeRunner::new(&train_scenario(kind, cfg.seed, episode), world)?;
        let mut accumulators = vec![NStepAccumulator::new(cfg.loss.n, cfg.gamma); runner.world().blues.len()];
        while !runner.is_done() {
            let epsilon = epsilon_schedule(env_steps, cfg);
            let mut policy = ExplorePolicy { network: &online, epsilon, rng: &mut explore_rng };
            let decisions = runner.decide(&mut policy, None);
            let result = runner.step(&decisions)?;
            env_steps += 1;
            for t in result.transitions {
                let id = t.agent_id;
                for item in accumulators[id].push(t) {
                    replay.push(item);
                }
            }
            if runner.is_done() {
                for acc in &mut accumulators {
                    for item in acc.flush() {
                        replay.push(item);
                    }
                }
            }
            if replay.len() >= cfg.batch_size {
                let batch = sample_mixed(demos, &replay, cfg.batch_size, cfg.demo_fraction, &mut sample_rng);
                let (report, grads) = combined_loss(&batch, &online, &target, &cfg.loss, cfg.gamma)?;
                adam_step(online.params_mut(), &mut adam, &grads)?;
                updates += 1;
                last_loss = Some(report);
                if updates.is_multiple_of(cfg.target_update_every) {
                    target = sync_target(&online);
                }
            }
        }

        let done = episode + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 {
            let mut greedy = GreedyPolicy { network: online.clone() };
            let summary = evaluate(&mut greedy, kind, world, cfg.eval_episodes, cfg.seed)?;
            let point = CurvePoint {
                episode: done,
                success_rate: summary.success_rate(),
                eval_episode_count: cfg.eval_episodes,
                epsilon: epsilon_schedule(env_steps, cfg),
                wall_seconds: started.elapsed().as_secs_f64(),
            };
            log::debug!("episode {done}: success {:.3} epsilon {:.3}", point.success_rate, point.epsilon);
            if let Some(p) = progress.as_mut() {
                p(&point);
            }
            curve.points.push(point);
        }
    }

    let final_success = if cfg.final_eval_episodes > 0 {
        let mut greedy = GreedyPolicy { network: online.clone() };
        // Disjoint from the evaluation-block scenarios.
        let summary = evaluate(&mut greedy, kind, world, cfg.final_eval_episodes, !cfg.seed)?;
        Some(summary.success_rate())
    } else {
        None
    };

    let metadata = TrainingMetadata {
        episodes: cfg.episodes,
        env_steps,
        updates,
        epsilon: epsilon_schedule(env_steps, cfg),
        seed: cfg.seed,
        scenario: Some(kind.to_string()),
        demo_source: demos.map(|d| d.source_counts().keys().map(ToString::to_string).collect::<Vec<_>>().join("+")),
    };
    Ok(TrainReport {
        checkpoint: Checkpoint::new(&online, Some(&adam), metadata),
        curve,
        final_success,
        env_steps,
        updates,
        last_loss,
    })
}
