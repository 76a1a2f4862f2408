//! Fixtures and checks shared by the integration tests and the acceptance
//! runner. Each check returns an [`Outcome`] instead of panicking so the
//! acceptance runner can report every criterion.

#![allow(dead_code)]

use ndarray::{array, Array1, Array2};
use rand::Rng as _;
use rand_distr::StandardNormal;

use srdp::bandit::{Point, Rect};
use srdp::critic::{min_is_lower_bound, CriticConfig, CriticEnsemble, Transitions};
use srdp::diffusion::{forward_noise, reverse_step, NoiseSchedule, ScheduleKind};
use srdp::harness::mdp::make_synthetic_mdp;
use srdp::metrics::chamfer;
use srdp::nn::{adam_step, AdamConfig, AdamState, DenseNet, TimeEmbedding};
use srdp::policy::{Batch, LossDraws, PolicyArch, PolicyConfig, PolicyVariant, SrdpPolicy};
use srdp::rng::{stream_rng, Stream};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }

    pub fn assert(&self) {
        assert!(self.pass, "{}", self.detail);
    }
}

/// Fills parameters with `0.4·sin(0.7k + 0.3) + 0.05·cos(1.3k)` over the flat
/// index `k`.
pub fn formula_params(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let k = k as f64;
            0.4 * (0.7 * k + 0.3).sin() + 0.05 * (1.3 * k).cos()
        })
        .collect()
}

pub fn scripted_config(variant: PolicyVariant) -> PolicyConfig {
    PolicyConfig {
        variant,
        arch: PolicyArch { trunk: vec![3], head_hidden: vec![2], time_dim: 2 },
        state_dim: 2,
        action_dim: 2,
        schedule: NoiseSchedule::build(ScheduleKind::Linear, 3, 0.1, 0.4).unwrap(),
        time_embedding: TimeEmbedding::new(2, 10.0).unwrap(),
        clip: None,
    }
}

/// Small policy with formula parameters; 55 parameters with a state head.
pub fn scripted_policy(variant: PolicyVariant) -> SrdpPolicy {
    let mut p = SrdpPolicy::new(scripted_config(variant), &mut stream_rng(0, Stream::Init)).unwrap();
    let n = p.num_params();
    p.set_params_flat(&formula_params(n)).unwrap();
    p
}

pub fn scripted_batch() -> (Batch, LossDraws) {
    let states = Array2::from_shape_fn((4, 2), |(i, j)| if j == 0 { 0.05 } else { -0.03 } * (i + 1) as f64);
    let actions =
        Array2::from_shape_fn((4, 2), |(i, j)| if j == 0 { 0.8 * (-1f64).powi(i as i32) } else { 0.8 - 0.4 * i as f64 });
    let draws = LossDraws { t: vec![1, 3, 2, 3], eps: array![[0.3, -1.1], [1.4, 0.2], [-0.6, -0.5], [0.9, 1.7]] };
    (Batch::new(states, actions).unwrap(), draws)
}

/// Critic weights `0.5·sin(0.9k + phase) + 0.1`.
pub fn set_critic_params(net: &mut DenseNet, phase: f64) {
    let n = net.num_params();
    let p: Vec<f64> = (0..n).map(|k| 0.5 * (0.9 * k as f64 + phase).sin() + 0.1).collect();
    net.set_params_flat(&p).unwrap();
}

pub fn scripted_critics(policy: &SrdpPolicy, gamma: f64) -> CriticEnsemble {
    let cfg = CriticConfig { hidden: vec![3], gamma, ..CriticConfig::default() };
    let mut e = CriticEnsemble::new(cfg, policy, &mut stream_rng(0, Stream::Init)).unwrap();
    set_critic_params(&mut e.q1, 0.0);
    set_critic_params(&mut e.q2, 1.0);
    set_critic_params(&mut e.q1_target, 2.0);
    set_critic_params(&mut e.q2_target, 3.0);
    e
}

pub fn scripted_transitions() -> (Transitions, Array2<f64>) {
    let t = Transitions {
        states: array![[0.1, 0.2], [-0.5, 0.4], [0.9, -0.9]],
        actions: array![[0.3, -0.3], [0.0, 0.8], [-0.7, 0.1]],
        rewards: array![1.0, -0.5, 0.25],
        next_states: array![[0.2, 0.2], [-0.4, 0.5], [0.8, -0.8]],
        dones: array![0.0, 1.0, 0.0],
    };
    (t, array![[0.1, 0.1], [-0.2, 0.6], [0.5, 0.5]])
}

/// Central differences of `f` at `x0` against `analytic`: every coordinate
/// must agree to relative error 1e-4 (or absolute 1e-9 near zero).
pub fn fd_check(name: &str, x0: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Outcome {
    if x0.len() != analytic.len() {
        return Outcome::new(false, format!("{name}: {} params but {} gradients", x0.len(), analytic.len()));
    }
    let h = 1e-5;
    let (mut worst_rel, mut worst_abs) = (0.0f64, 0.0f64);
    for k in 0..x0.len() {
        let mut x = x0.to_vec();
        x[k] += h;
        let up = f(&x);
        x[k] -= 2.0 * h;
        let down = f(&x);
        let fd = (up - down) / (2.0 * h);
        let abs = (fd - analytic[k]).abs();
        let rel = abs / fd.abs().max(analytic[k].abs()).max(1e-8);
        worst_abs = worst_abs.max(abs);
        if abs > 1e-9 {
            worst_rel = worst_rel.max(rel);
        }
        if rel > 1e-4 && abs > 1e-9 {
            return Outcome::new(false, format!("{name}: param {k} fd {fd:e} vs analytic {:e}", analytic[k]));
        }
    }
    Outcome::new(true, format!("{name}: {} params, worst abs err {worst_abs:.1e}, worst rel err {worst_rel:.1e}", x0.len()))
}

/// Finite-difference checks for L_DP, L_R, L_BC, the Bellman loss and L_SRDP.
pub fn gradient_suite() -> Vec<Outcome> {
    let mut out = Vec::new();
    let (batch, draws) = scripted_batch();
    let policy = scripted_policy(PolicyVariant::Srdp { lambda: 0.75 });
    let x0 = policy.params_flat();
    let eval = |p: &[f64], which: usize| {
        let mut q = policy.clone();
        q.set_params_flat(p).unwrap();
        match which {
            0 => q.diffusion_loss_with(&batch, &draws).unwrap(),
            1 => q.recon_loss_with(&batch, &draws).unwrap(),
            _ => q.bc_loss_with(&batch, &draws).unwrap().l_bc,
        }
    };
    let g_dp = policy.diffusion_loss_grads(&batch, &draws).unwrap().1.flat();
    out.push(fd_check("L_DP", &x0, &g_dp, |p| eval(p, 0)));
    let g_r = policy.recon_loss_grads(&batch, &draws).unwrap().1.flat();
    out.push(fd_check("L_R", &x0, &g_r, |p| eval(p, 1)));
    let g_bc = policy.bc_loss_grads(&batch, &draws).unwrap().1.flat();
    out.push(fd_check("L_BC", &x0, &g_bc, |p| eval(p, 2)));

    let critics = scripted_critics(&policy, 0.9);
    let (trans, next) = scripted_transitions();
    let (_, g1, g2, _) = critics.bellman_loss_grads(&trans, next.view()).unwrap();
    let mut cx = critics.q1.params_flat();
    let split = cx.len();
    cx.extend(critics.q2.params_flat());
    let mut cg = g1.flat();
    cg.extend(g2.flat());
    out.push(fd_check("bellman", &cx, &cg, |p| {
        let mut c = critics.clone();
        c.q1.set_params_flat(&p[..split]).unwrap();
        c.q2.set_params_flat(&p[split..]).unwrap();
        c.bellman_loss_with(&trans, next.view()).unwrap()
    }));

    let mut rng = stream_rng(21, Stream::Train);
    let d = LossDraws::sample(batch.len(), 2, policy.schedule().steps(), &mut rng);
    let g_srdp = critics.srdp_total_loss_grads(&policy, &batch, &d, &mut rng).unwrap().1.flat();
    out.push(fd_check("L_SRDP", &x0, &g_srdp, |p| {
        let mut q = policy.clone();
        q.set_params_flat(p).unwrap();
        critics.srdp_total_loss(&q, &batch, &mut stream_rng(21, Stream::Train)).unwrap().total
    }));
    out
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0))
}

/// |a − b| within 3 standard errors of the difference.
fn within_3se(a: f64, b: f64, se: f64) -> bool {
    (a - b).abs() <= 3.0 * se
}

/// Closed-form noising vs iterated one-step noising, and the reverse chain
/// with the exact noise predictor for unit-variance Gaussian data.
pub fn diffusion_consistency(n: usize) -> Vec<Outcome> {
    let mut out = Vec::new();
    let sched = NoiseSchedule::build(ScheduleKind::Linear, 10, 0.05, 0.5).unwrap();
    let x0 = 0.7;
    let mut rng = stream_rng(5, Stream::Eval);
    for t in [1, 4, 10] {
        let closed: Vec<f64> =
            (0..n).map(|_| forward_noise(&[x0], t, &[rng.sample(StandardNormal)], &sched).unwrap()[0]).collect();
        let iterated: Vec<f64> = (0..n)
            .map(|_| {
                let mut x = x0;
                for s in 1..=t {
                    let z: f64 = rng.sample(StandardNormal);
                    x = sched.alpha(s).sqrt() * x + sched.beta(s).sqrt() * z;
                }
                x
            })
            .collect();
        let (m1, v1) = mean_var(&closed);
        let (m2, v2) = mean_var(&iterated);
        let nf = n as f64;
        let se_m = (v1 / nf + v2 / nf).sqrt();
        let se_v = (2.0 * v1 * v1 / nf + 2.0 * v2 * v2 / nf).sqrt();
        let pass = within_3se(m1, m2, se_m) && within_3se(v1, v2, se_v);
        out.push(Outcome::new(
            pass,
            format!("noising t={t}: closed ({m1:.4}, {v1:.4}) vs iterated ({m2:.4}, {v2:.4}), se ({se_m:.1e}, {se_v:.1e})"),
        ));
    }

    // Data ~ N(mu, I). The exact predictor is E[eps | x_t] = sqrt(1-abar)(x_t - sqrt(abar) mu),
    // under which each reverse step preserves unit variance and the mean.
    let sched = NoiseSchedule::build(ScheduleKind::Linear, 50, 1e-4, 0.3).unwrap();
    let mu = [0.7, -0.4];
    let mut samples = [Vec::with_capacity(n), Vec::with_capacity(n)];
    for _ in 0..n {
        let mut a = vec![rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal)];
        for t in (1..=sched.steps()).rev() {
            let ab = sched.alpha_bar(t);
            let eps: Vec<f64> = a.iter().zip(mu).map(|(x, m)| (1.0 - ab).sqrt() * (x - ab.sqrt() * m)).collect();
            let noise = if t > 1 { vec![rng.sample(StandardNormal), rng.sample(StandardNormal)] } else { vec![0.0, 0.0] };
            a = reverse_step(&a, &eps, t, &sched, &noise).unwrap();
        }
        samples[0].push(a[0]);
        samples[1].push(a[1]);
    }
    let nf = n as f64;
    for (d, s) in samples.iter().enumerate() {
        let (m, v) = mean_var(s);
        let pass = within_3se(m, mu[d], (1.0 / nf).sqrt()) && within_3se(v, 1.0, (2.0 / nf).sqrt());
        out.push(Outcome::new(pass, format!("reverse chain dim {d}: mean {m:.4} (want {}), var {v:.4} (want 1)", mu[d])));
    }
    out
}

pub fn brute_chamfer(a: &[Point], b: &[Point]) -> f64 {
    let dir = |x: &[Point], y: &[Point]| {
        x.iter()
            .map(|p| {
                y.iter()
                    .map(|q| ((p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1])).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / x.len() as f64
    };
    dir(a, b) + dir(b, a)
}

/// Optimized Chamfer equals the brute-force oracle bit for bit on random
/// instances of up to `max_points` points, including duplicates and ties.
pub fn chamfer_equivalence(instances: usize, max_points: usize) -> Outcome {
    let mut rng = stream_rng(99, Stream::Eval);
    for k in 0..instances {
        let scale = [1.0, 1e-3, 50.0][k % 3];
        let r = Rect::square(scale);
        let na = rng.random_range(1..=max_points);
        let nb = rng.random_range(1..=max_points);
        let mut a: Vec<Point> = (0..na).map(|_| r.sample(&mut rng)).collect();
        let mut b: Vec<Point> = (0..nb).map(|_| r.sample(&mut rng)).collect();
        if k % 4 == 0 {
            // Shared x coordinates and duplicated points.
            for i in 0..na.min(nb) / 2 {
                a[i][0] = b[i][0];
            }
            b.push(a[0]);
            a.push(a[na - 1]);
        }
        let fast = chamfer(&a, &b).unwrap();
        let slow = brute_chamfer(&a, &b);
        if fast != slow {
            return Outcome::new(false, format!("instance {k}: fast {fast:e} vs brute {slow:e}"));
        }
    }
    Outcome::new(true, format!("{instances} instances of up to {max_points} points equal bit for bit"))
}

/// Trains the double critics on the horizon-1 synthetic MDP and reports the
/// mean |Q − r| over the dataset for both critics, plus whether the
/// min-over-targets bound held on every batch.
pub fn critic_fixed_point(steps: usize, n_states: usize) -> Outcome {
    let spec = srdp::bandit::BanditSpec::unit(0.08);
    let data = make_synthetic_mdp(&spec, n_states, 0).unwrap();
    let pcfg = PolicyConfig {
        variant: PolicyVariant::BcDiffusion,
        arch: PolicyArch::bandit(),
        state_dim: 2,
        action_dim: 2,
        schedule: NoiseSchedule::build(ScheduleKind::Linear, 5, 0.3, 0.9).unwrap(),
        time_embedding: TimeEmbedding::default(),
        clip: None,
    };
    let mut init = stream_rng(0, Stream::Init);
    let policy = SrdpPolicy::new(pcfg, &mut init).unwrap();
    let ccfg = CriticConfig { hidden: vec![64, 64], ..CriticConfig::default() };
    let mut critics = CriticEnsemble::new(ccfg, &policy, &mut init).unwrap();
    let adam = AdamConfig { lr: 1e-3, ..AdamConfig::default() };
    let mut a1 = AdamState::new(adam, critics.q1.num_params());
    let mut a2 = AdamState::new(adam, critics.q2.num_params());
    let mut rng = stream_rng(0, Stream::Train);
    let mut bound_ok = true;
    let n = data.len();
    for step in 0..steps {
        let idx: Vec<usize> = (0..256).map(|_| rng.random_range(0..n)).collect();
        let take2 = |m: &Array2<f64>| m.select(ndarray::Axis(0), &idx);
        let take1 = |v: &Array1<f64>| v.select(ndarray::Axis(0), &idx);
        let batch = Transitions {
            states: take2(&data.states),
            actions: take2(&data.actions),
            rewards: take1(&data.rewards),
            next_states: take2(&data.next_states),
            dones: take1(&data.dones),
        };
        let next = critics.next_actions(&batch, &mut rng).unwrap();
        let (_, g1, g2, tv) = critics.bellman_loss_grads(&batch, next.view()).unwrap();
        bound_ok &= min_is_lower_bound(&tv);
        adam_step(&mut critics.q1, &g1, &mut a1).unwrap();
        adam_step(&mut critics.q2, &g2, &mut a2).unwrap();
        critics.polyak_update(&policy).unwrap();
        if !bound_ok {
            return Outcome::new(false, format!("min-over-targets bound violated at step {step}"));
        }
    }
    let err = |q: Array1<f64>| (q - &data.rewards).mapv(f64::abs).mean().unwrap();
    let e1 = err(critics.q1_values(data.states.view(), data.actions.view()).unwrap());
    let e2 = err(critics.q2_values(data.states.view(), data.actions.view()).unwrap());
    Outcome::new(
        e1 <= 0.05 && e2 <= 0.05 && bound_ok,
        format!("after {steps} steps mean |Q1-r| = {e1:.4}, |Q2-r| = {e2:.4}; min bound held on every batch"),
    )
}
