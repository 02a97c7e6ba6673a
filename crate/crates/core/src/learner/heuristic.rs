//! Hand-written interceptor used as a baseline and as the demonstration
//! oracle: pure pursuit with a one-tick lead.

use crate::env::{ActionId, AgentView, Observation, Policy};
use crate::geom::{wrap_angle, Vec2};

/// Aim point relative to the drone: the red offset extrapolated one tick
/// along the red velocity estimated from the last two frames. When the red
/// slots did not change (no fresh fix) no lead is applied.
pub fn intercept_aim(obs: &Observation) -> Vec2 {
    let red_now = obs.red_offset(0);
    let red_prev = obs.red_offset(1);
    if red_now == red_prev {
        return red_now;
    }
    // The zone is fixed, so the change of its offset is minus our own displacement.
    let own_displacement = obs.zone_offset(1) - obs.zone_offset(0);
    let red_velocity = (red_now - red_prev) + own_displacement;
    red_now + red_velocity
}

pub fn heuristic_action(view: &AgentView<'_>) -> ActionId {
    let aim = intercept_aim(view.observation);
    let error = wrap_angle(aim.bearing() - view.pose.heading);
    if error >= 0.0 {
        ActionId::Positive
    } else {
        ActionId::Negative
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct HeuristicPolicy;

impl Policy for HeuristicPolicy {
    fn act(&mut self, views: &[AgentView<'_>]) -> Vec<ActionId> {
        views.iter().map(heuristic_action).collect()
    }
}
