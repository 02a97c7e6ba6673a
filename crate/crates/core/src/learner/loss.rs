//! Double-Q targets, n-step returns, the large-margin demonstration loss and
//! the weighted combination used for every gradient update.

use serde::{Deserialize, Serialize};

use super::replay::ReplayItem;
use super::LearnError;
use crate::env::{ActionId, Observation, Transition};
use crate::nn::{argmax, ForwardCache, QNetwork, TargetNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the n-step TD term.
    pub n_step: f64,
    /// Weight of the supervised margin term (demonstration items only).
    pub supervised: f64,
    /// Weight of the squared parameter norm.
    pub l2: f64,
    pub margin: f64,
    /// Horizon of the n-step return.
    pub n: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { n_step: 1.0, supervised: 1.0, l2: 0.0, margin: 0.8, n: 10 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LearnError> {
        let ok = [self.n_step, self.supervised, self.l2, self.margin].iter().all(|w| w.is_finite() && *w >= 0.0);
        if !ok || self.n == 0 {
            return Err(LearnError::Config("loss weights must be >= 0 and n >= 1".into()));
        }
        Ok(())
    }
}

/// `r + γ·Q_target(s', argmax_a Q_online(s', a))`, or `r` at a terminal step.
pub fn double_q_target(reward: f64, terminal: bool, gamma: f64, q_online_next: &[f64], q_target_next: &[f64]) -> f64 {
    if terminal {
        return reward;
    }
    reward + gamma * q_target_next[argmax(q_online_next)]
}

/// Network-level form of [`double_q_target`] for one stored transition.
pub fn double_q_target_for(
    transition: &Transition,
    online: &QNetwork,
    target: &TargetNetwork,
    gamma: f64,
) -> Result<f64, LearnError> {
    if transition.terminal {
        return Ok(transition.reward);
    }
    let next = &transition.next_observation.features;
    Ok(double_q_target(transition.reward, false, gamma, &online.forward(next)?, &target.forward(next)?))
}

/// `max_a [Q(s,a) + l(a_E,a)] − Q(s,a_E)` with `l = margin` off the
/// demonstrated action and zero on it.
pub fn margin_loss(q: &[f64], demonstrated: ActionId, margin: f64) -> f64 {
    let (_, best) = margin_argmax(q, demonstrated, margin);
    best - q[demonstrated.index()]
}

/// Maximizing action of the margin-augmented Q row and its value. The
/// demonstrated action wins ties so a satisfied margin has zero gradient.
fn margin_argmax(q: &[f64], demonstrated: ActionId, margin: f64) -> (usize, f64) {
    let e = demonstrated.index();
    let mut best = (e, q[e]);
    for (a, &v) in q.iter().enumerate() {
        if a != e && v + margin > best.1 {
            best = (a, v + margin);
        }
    }
    best
}

/// Everything about an n-step window except the bootstrap Q-values:
/// the discounted reward sum and, unless a terminal was reached, the state
/// to bootstrap from together with its discount `γ^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NStepTail {
    pub reward_sum: f64,
    pub bootstrap: Option<(Observation, f64)>,
}

impl NStepTail {
    /// Builds the tail for the first transition of `window`, which holds the
    /// consecutive transitions of one agent starting at time `t`. The window
    /// is cut at a terminal step, after `n` steps, or where it ends.
    pub fn from_window(window: &[Transition], n: usize, gamma: f64) -> Self {
        let mut reward_sum = 0.0;
        let mut discount = 1.0;
        for t in window.iter().take(n) {
            reward_sum += discount * t.reward;
            discount *= gamma;
            if t.terminal {
                return Self { reward_sum, bootstrap: None };
            }
        }
        let last = window[..n.min(window.len())].last();
        Self { reward_sum, bootstrap: last.map(|t| (t.next_observation, discount)) }
    }

    pub fn value(&self, q_online_boot: &[f64], q_target_boot: &[f64]) -> f64 {
        match &self.bootstrap {
            None => self.reward_sum,
            Some((_, discount)) => self.reward_sum + discount * q_target_boot[argmax(q_online_boot)],
        }
    }
}

/// `Σ_{i<n} γ^i r_{t+i} + γ^n Q_target(s_{t+n}, argmax_a Q_online(s_{t+n}, a))`,
/// truncated at a terminal step.
pub fn n_step_return(
    window: &[Transition],
    n: usize,
    gamma: f64,
    target: &TargetNetwork,
    online: &QNetwork,
) -> Result<f64, LearnError> {
    if window.is_empty() {
        return Err(LearnError::EmptyBatch);
    }
    let tail = NStepTail::from_window(window, n, gamma);
    Ok(match &tail.bootstrap {
        None => tail.reward_sum,
        Some((obs, _)) => tail.value(&online.forward(&obs.features)?, &target.forward(&obs.features)?),
    })
}

/// One sampled item and whether it came from the demonstration buffer.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub item: &'a ReplayItem,
    pub demo: bool,
}

/// Component values of the combined loss (before weighting, except `total`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub one_step: f64,
    pub n_step: f64,
    pub supervised: f64,
    pub l2: f64,
}

/// `J = J_DQ + λ₁ J_n + λ₂ J_E + λ₃ J_L2` and its gradient.
///
/// `J_DQ` and `J_n` are batch means of squared TD errors; `J_E` sums the
/// margin loss of demonstration items and divides by the batch size, so
/// agent items contribute zero; `J_L2` is the squared norm of all parameters.
pub fn combined_loss(
    batch: &[BatchItem<'_>],
    online: &QNetwork,
    target: &TargetNetwork,
    weights: &LossWeights,
    gamma: f64,
) -> Result<(LossReport, Vec<f64>), LearnError> {
    if batch.is_empty() {
        return Err(LearnError::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = online.zero_gradients();
    let mut report = LossReport::default();
    let mut cache = ForwardCache::default();
    let mut scratch = ForwardCache::default();
    let mut grad_q = vec![0.0; online.architecture().actions];

    for entry in batch {
        let t = &entry.item.transition;
        let a = t.action.index();
        online.forward_cached(&t.observation.features, &mut cache)?;
        let q = &cache.q;
        grad_q.iter_mut().for_each(|g| *g = 0.0);

        let y = if t.terminal {
            t.reward
        } else {
            online.forward_cached(&t.next_observation.features, &mut scratch)?;
            let q_target_next = target.forward(&t.next_observation.features)?;
            double_q_target(t.reward, false, gamma, &scratch.q, &q_target_next)
        };
        let td = q[a] - y;
        report.one_step += td * td * scale;
        grad_q[a] += 2.0 * td * scale;

        if weights.n_step != 0.0 {
            let tail = &entry.item.tail;
            let yn = match &tail.bootstrap {
                None => tail.reward_sum,
                Some((obs, _)) => {
                    online.forward_cached(&obs.features, &mut scratch)?;
                    tail.value(&scratch.q, &target.forward(&obs.features)?)
                }
            };
            let td_n = q[a] - yn;
            report.n_step += td_n * td_n * scale;
            grad_q[a] += weights.n_step * 2.0 * td_n * scale;
        }

        if entry.demo {
            let (best, best_value) = margin_argmax(q, t.action, weights.margin);
            report.supervised += (best_value - q[a]) * scale;
            if best != a {
                grad_q[best] += weights.supervised * scale;
                grad_q[a] -= weights.supervised * scale;
            }
        }

        online.backward(&cache, &grad_q, &mut grads)?;
    }

    report.l2 = online.params().iter().map(|p| p * p).sum();
    if weights.l2 != 0.0 {
        for (g, p) in grads.iter_mut().zip(online.params()) {
            *g += 2.0 * weights.l2 * p;
        }
    }
    report.total = report.one_step
        + weights.n_step * report.n_step
        + weights.supervised * report.supervised
        + weights.l2 * report.l2;
    Ok((report, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Controller;

    fn obs(v: f64) -> Observation {
        Observation { features: [v; 12] }
    }

    fn tr(reward: f64, terminal: bool) -> Transition {
        Transition {
            observation: obs(0.0),
            action: ActionId::Negative,
            reward,
            next_observation: obs(1.0),
            terminal,
            agent_id: 0,
            controller: Controller::Agent,
        }
    }

    #[test]
    fn double_q_examples() {
        let y = double_q_target(1.0, false, 0.99, &[0.2, 0.9], &[7.0, 2.0]);
        assert!((y - 2.98).abs() < 1e-12);
        assert_eq!(double_q_target(-1.0, true, 0.99, &[0.2, 0.9], &[7.0, 2.0]), -1.0);
        assert_eq!(double_q_target(0.4, false, 0.0, &[0.2, 0.9], &[7.0, 2.0]), 0.4);
    }

    #[test]
    fn margin_examples() {
        assert!((margin_loss(&[1.0, 0.5], ActionId::Negative, 0.8) - 0.3).abs() < 1e-12);
        assert_eq!(margin_loss(&[2.0, 1.0], ActionId::Negative, 0.8), 0.0);
        assert!((margin_loss(&[3.0, 3.0], ActionId::Positive, 0.8) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn n_step_tail_examples() {
        let w = [tr(1.0, false), tr(1.0, false), tr(5.0, false)];
        let tail = NStepTail::from_window(&w, 2, 0.5);
        assert_eq!(tail.reward_sum, 1.5);
        assert_eq!(tail.value(&[0.0, 1.0], &[9.0, 4.0]), 2.5);

        let w = [tr(1.0, false), tr(2.0, true), tr(5.0, false)];
        let tail = NStepTail::from_window(&w, 3, 0.5);
        assert_eq!(tail.bootstrap, None);
        assert_eq!(tail.reward_sum, 2.0);
    }

    #[test]
    fn n_step_window_shorter_than_n_bootstraps_from_end() {
        let w = [tr(1.0, false), tr(1.0, false)];
        let tail = NStepTail::from_window(&w, 5, 0.5);
        let (o, d) = tail.bootstrap.unwrap();
        assert_eq!(o, obs(1.0));
        assert_eq!(d, 0.25);
    }
}
