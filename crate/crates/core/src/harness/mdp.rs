//! Horizon-1 transitions over the bandit, used to exercise the critics.

use ndarray::{Array1, Array2};

use crate::bandit::{BanditSpec, Point};
use crate::critic::Transitions;
use crate::error::{usage, Result};
use crate::rng::{stream_rng, Stream};

/// Every distinct mode mean of the spec.
pub fn mode_means(spec: &BanditSpec) -> Vec<Point> {
    let mut out: Vec<Point> = Vec::new();
    for (m1, m2) in spec.mode_table {
        for m in [m1, m2] {
            if !out.contains(&m) {
                out.push(m);
            }
        }
    }
    out
}

/// Negative squared distance from `action` to the nearest mode mean.
pub fn reward(spec: &BanditSpec, action: Point) -> f64 {
    mode_means(spec)
        .iter()
        .map(|m| -((action[0] - m[0]).powi(2) + (action[1] - m[1]).powi(2)))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `n` tuples with states uniform on the test box and actions uniform on the
/// action box, drawn row by row (state, then action). Every tuple is terminal
/// and `s' = s`.
pub fn make_synthetic_mdp(spec: &BanditSpec, n: usize, seed: u64) -> Result<Transitions> {
    if n == 0 {
        return usage("synthetic MDP needs at least one state");
    }
    let mut rng = stream_rng(seed, Stream::Data);
    let mut states = Array2::zeros((n, 2));
    let mut actions = Array2::zeros((n, 2));
    let mut rewards = Array1::zeros(n);
    for i in 0..n {
        let s = spec.test_box.sample(&mut rng);
        let a = spec.action_box.sample(&mut rng);
        states.row_mut(i).assign(&Array1::from(s.to_vec()));
        actions.row_mut(i).assign(&Array1::from(a.to_vec()));
        rewards[i] = reward(spec, a);
    }
    Ok(Transitions { next_states: states.clone(), states, actions, rewards, dones: Array1::ones(n) })
}
