//! Chamfer distance and grouped evaluation against the true action mixture.

use ndarray::Array2;

use crate::bandit::{ground_truth_set, BanditSpec, Point, Quadrant, Rect};
use crate::error::{usage, Result};
use crate::policy::SrdpPolicy;
use crate::rng::{stream_rng, Rng, Stream};

/// Anything that emits one action per state.
pub trait ActionSampler {
    fn sample_actions(&self, states: &[Point], rng: &mut Rng) -> Result<Vec<Point>>;
}

impl ActionSampler for SrdpPolicy {
    fn sample_actions(&self, states: &[Point], rng: &mut Rng) -> Result<Vec<Point>> {
        let flat: Vec<f64> = states.iter().flatten().copied().collect();
        let s = Array2::from_shape_vec((states.len(), 2), flat).expect("state matrix");
        let a = SrdpPolicy::sample_actions(self, s.view(), rng)?;
        Ok(a.rows().into_iter().map(|r| [r[0], r[1]]).collect())
    }
}

/// Draws from the true mixture.
pub struct GmmOracle<'a>(pub &'a BanditSpec);

impl ActionSampler for GmmOracle<'_> {
    fn sample_actions(&self, states: &[Point], rng: &mut Rng) -> Result<Vec<Point>> {
        Ok(states.iter().map(|&s| self.0.sample_action(s, rng)).collect())
    }
}

/// Always the first mode mean of the state's pair.
pub struct FirstModePolicy<'a>(pub &'a BanditSpec);

impl ActionSampler for FirstModePolicy<'_> {
    fn sample_actions(&self, states: &[Point], _rng: &mut Rng) -> Result<Vec<Point>> {
        Ok(states.iter().map(|&s| self.0.gmm_means(s).0).collect())
    }
}

pub struct ConstantPolicy(pub Point);

impl ActionSampler for ConstantPolicy {
    fn sample_actions(&self, states: &[Point], _rng: &mut Rng) -> Result<Vec<Point>> {
        Ok(vec![self.0; states.len()])
    }
}

/// Uniform over a rectangle, ignoring the state.
pub struct UniformPolicy(pub Rect);

impl ActionSampler for UniformPolicy {
    fn sample_actions(&self, states: &[Point], rng: &mut Rng) -> Result<Vec<Point>> {
        Ok(states.iter().map(|_| self.0.sample(rng)).collect())
    }
}

#[inline]
fn sq_dist<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for k in 0..D {
        let d = a[k] - b[k];
        s += d * d;
    }
    s
}

/// Nearest-neighbour squared distances from each query to `set`, by a sweep
/// over `set` sorted on the first coordinate.
fn nearest_sq<const D: usize>(queries: &[[f64; D]], set: &[[f64; D]]) -> Vec<f64> {
    let mut sorted = set.to_vec();
    sorted.sort_by(|p, q| p[0].total_cmp(&q[0]));
    queries
        .iter()
        .map(|q| {
            let start = sorted.partition_point(|p| p[0] < q[0]);
            let mut best = f64::INFINITY;
            for p in &sorted[start..] {
                let dx = p[0] - q[0];
                if dx * dx > best {
                    break;
                }
                best = best.min(sq_dist(q, p));
            }
            for p in sorted[..start].iter().rev() {
                let dx = q[0] - p[0];
                if dx * dx > best {
                    break;
                }
                best = best.min(sq_dist(q, p));
            }
            best
        })
        .collect()
}

/// Symmetric mean nearest-neighbour Euclidean distance:
/// mean_a min_b ‖a−b‖ + mean_b min_a ‖a−b‖.
pub fn chamfer<const D: usize>(a: &[[f64; D]], b: &[[f64; D]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return usage("chamfer distance needs two nonempty point sets");
    }
    let dir = |x: &[[f64; D]], y: &[[f64; D]]| nearest_sq(x, y).iter().map(|d| d.sqrt()).sum::<f64>() / x.len() as f64;
    Ok(dir(a, b) + dir(b, a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    /// Four groups keyed by the evaluation state's quadrant.
    Quadrant,
    /// Two groups keyed by the state's mode pair (opposite quadrants merged).
    ModePair,
}

impl Grouping {
    pub fn name(self) -> &'static str {
        match self {
            Grouping::Quadrant => "quadrant",
            Grouping::ModePair => "mode_pair",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChamferReport {
    pub per_group: Vec<(String, f64)>,
    pub total: f64,
    pub n_eval_states: usize,
    pub m_reference: usize,
    pub seed: u64,
}

/// Group index for a quadrant. Mode-pair grouping merges quadrants that share
/// the pair of the first quadrant's entry.
fn group_of(spec: &BanditSpec, q: Quadrant, grouping: Grouping) -> usize {
    match grouping {
        Grouping::Quadrant => q.index(),
        Grouping::ModePair => usize::from(spec.mode_table[q.index()] != spec.mode_table[0]),
    }
}

fn group_labels(grouping: Grouping) -> Vec<&'static str> {
    match grouping {
        Grouping::Quadrant => vec!["q1", "q2", "q3", "q4"],
        Grouping::ModePair => vec!["pair_a", "pair_b"],
    }
}

/// Uniform evaluation states over the test box, one sampled action per state,
/// `m_ref` reference actions per state; Chamfer per group, summed.
///
/// Draw order from the `Eval` stream of `seed`: states, then policy actions,
/// then reference actions.
pub fn grouped_chamfer(
    policy: &dyn ActionSampler,
    spec: &BanditSpec,
    n_eval: usize,
    m_ref: usize,
    grouping: Grouping,
    seed: u64,
) -> Result<ChamferReport> {
    if n_eval < 4 {
        return usage(format!("need at least 4 evaluation states, got {n_eval}"));
    }
    if m_ref == 0 {
        return usage("need at least one reference action per state");
    }
    let mut rng = stream_rng(seed, Stream::Eval);
    let states: Vec<Point> = (0..n_eval).map(|_| spec.test_box.sample(&mut rng)).collect();
    let actions = policy.sample_actions(&states, &mut rng)?;
    let labels = group_labels(grouping);
    let mut generated: Vec<Vec<Point>> = vec![Vec::new(); labels.len()];
    let mut reference: Vec<Vec<Point>> = vec![Vec::new(); labels.len()];
    for (&s, &a) in states.iter().zip(&actions) {
        generated[group_of(spec, spec.quadrant(s), grouping)].push(a);
    }
    for (q, bucket) in Quadrant::ALL.into_iter().zip(ground_truth_set(spec, &states, m_ref, &mut rng)) {
        reference[group_of(spec, q, grouping)].extend(bucket);
    }
    let mut per_group = Vec::with_capacity(labels.len());
    for (k, label) in labels.iter().enumerate() {
        if generated[k].is_empty() {
            return usage(format!("evaluation group {label} is empty; increase n_eval"));
        }
        per_group.push((label.to_string(), chamfer(&generated[k], &reference[k])?));
    }
    let total = per_group.iter().map(|(_, d)| d).sum();
    Ok(ChamferReport { per_group, total, n_eval_states: n_eval, m_reference: m_ref, seed })
}

/// Grouped Chamfer of a policy that samples the true mixture: the noise floor
/// a perfect policy reaches under the same protocol.
pub fn self_distance_floor(spec: &BanditSpec, n_eval: usize, m_ref: usize, grouping: Grouping, seed: u64) -> Result<f64> {
    let oracle = GmmOracle(spec);
    grouped_chamfer(&oracle, spec, n_eval, m_ref, grouping, seed).map(|r| r.total)
}

/// Fraction of test-box states whose sampled action lies within 3σ (largest
/// axis) of one of the state's two mode means.
pub fn quadrant_accuracy(policy: &dyn ActionSampler, spec: &BanditSpec, n: usize, rng: &mut Rng) -> Result<f64> {
    if n == 0 {
        return usage("quadrant accuracy needs at least one state");
    }
    let states: Vec<Point> = (0..n).map(|_| spec.test_box.sample(rng)).collect();
    let actions = policy.sample_actions(&states, rng)?;
    let r = 3.0 * spec.sigma[0].max(spec.sigma[1]);
    let hits = states
        .iter()
        .zip(&actions)
        .filter(|(&s, a)| {
            let (m1, m2) = spec.gmm_means(s);
            sq_dist(*a, &m1).sqrt() <= r || sq_dist(*a, &m2).sqrt() <= r
        })
        .count();
    Ok(hits as f64 / n as f64)
}
