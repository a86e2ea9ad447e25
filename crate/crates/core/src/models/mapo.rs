//! Policy-gradient training with a memory buffer of positive-reward actions.
//!
//! States here are single-step with deterministic transitions and small
//! discrete action sets, so the rewards of all actions are enumerated
//! exactly once up front; the buffer stores the strictly-positive ones. The
//! objective mixes a buffer term and an exact on-policy expectation:
//!
//! `J = w · E_buffer[R·log π] + (1-w) · Σ_a π(a)·R(a)·log π(a)`
//!
//! with `w = max(π(buffer), w_floor)` and the weights treated as constants
//! of the gradient (only `log π` carries gradient).

use crate::nn::{NodeId, Tape};
use crate::scalar::{lit, Scalar};

/// A state with fully enumerated action rewards.
#[derive(Debug, Clone)]
pub struct MapoState {
    pub rewards: Vec<f64>,
    /// Actions with strictly positive reward.
    pub buffer: Vec<usize>,
}

impl MapoState {
    pub fn from_rewards(rewards: Vec<f64>) -> Self {
        let buffer = rewards
            .iter()
            .enumerate()
            .filter(|(_, &r)| r > 0.0)
            .map(|(a, _)| a)
            .collect();
        MapoState { rewards, buffer }
    }

    pub fn greedy_reward(&self, probs: &[f64]) -> f64 {
        let a = argmax(probs);
        self.rewards[a]
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Assembles the (negated) MAPO objective for one state from the policy's
/// log-probability vector node. Probability values are read off the tape
/// and folded into constant coefficients.
pub fn mapo_loss<S: Scalar>(
    tape: &mut Tape<S>,
    log_probs: NodeId,
    probs: &[f64],
    state: &MapoState,
    w_floor: f64,
) -> NodeId {
    let n = probs.len();
    debug_assert_eq!(state.rewards.len(), n);
    let w = if state.buffer.is_empty() {
        0.0
    } else {
        state
            .buffer
            .iter()
            .map(|&a| probs[a])
            .sum::<f64>()
            .max(w_floor)
    };
    let mut coeffs = vec![0.0f64; n];
    for (a, c) in coeffs.iter_mut().enumerate() {
        *c = (1.0 - w) * probs[a] * state.rewards[a];
    }
    if !state.buffer.is_empty() {
        let share = 1.0 / state.buffer.len() as f64;
        for &a in &state.buffer {
            coeffs[a] += w * share * state.rewards[a];
        }
    }
    // loss = -Σ_a coeff_a · log π(a)
    let mut loss: Option<NodeId> = None;
    for (a, &c) in coeffs.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let term = tape.pick(log_probs, a);
        let term = tape.scale_const(term, lit::<S>(-c));
        loss = Some(match loss {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    loss.unwrap_or_else(|| tape.constant(S::zero()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffer_keeps_only_positive_rewards() {
        let s = MapoState::from_rewards(vec![-1.0, 0.0, 1.0, 0.5]);
        assert_eq!(s.buffer, vec![2, 3]);
    }

    #[test]
    fn zero_rewards_produce_zero_gradient() {
        let s = MapoState::from_rewards(vec![0.0, 0.0]);
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.leaf_v(ndarray::array![0.3, -0.3]);
        let probs_node = tape.softmax(logits);
        let logp = tape.ln(probs_node);
        let probs: Vec<f64> = tape.value_v(probs_node).to_vec();
        let loss = mapo_loss(&mut tape, logp, &probs, &s, 0.1);
        assert_eq!(tape.scalar(loss), 0.0);
    }
}
