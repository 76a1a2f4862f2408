//! Double critics with target networks, the clipped double-Q Bellman loss,
//! soft (Polyak) target updates and the normalized Q-guidance term that turns
//! `L_BC` into `L_SRDP`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{config, usage, Error, Result};
use crate::nn::{init_network, DenseNet, NetGrads, NetSpec};
use crate::policy::{Batch, BcLoss, LossDraws, PolicyGrads, SrdpPolicy};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CriticConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    /// Soft update rate: target ← (1−ρ)·target + ρ·online.
    pub rho: f64,
    /// Q-guidance weight η.
    pub eta: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { hidden: vec![256, 256, 256], gamma: 0.99, rho: 0.005, eta: 1.0 }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return config(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return config(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return config(format!("eta must be finite and non-negative, got {}", self.eta));
        }
        Ok(())
    }
}

/// Minibatch of (s, a, r, s', done).
#[derive(Debug, Clone, PartialEq)]
pub struct Transitions {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub dones: Array1<f64>,
}

impl Transitions {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return usage("empty transition batch");
        }
        if self.actions.nrows() != n || self.rewards.len() != n || self.next_states.nrows() != n || self.dones.len() != n {
            return usage("transition fields have mismatched lengths");
        }
        Ok(())
    }
}

/// Per-element target statistics of one Bellman evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetValues {
    pub q1: Array1<f64>,
    pub q2: Array1<f64>,
    pub min: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SrdpLoss {
    pub bc: BcLoss,
    pub guidance: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct CriticEnsemble {
    pub q1: DenseNet,
    pub q2: DenseNet,
    pub q1_target: DenseNet,
    pub q2_target: DenseNet,
    pub policy_target: SrdpPolicy,
    pub config: CriticConfig,
}

fn sa(states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[states, actions]).expect("state-action concat")
}

fn column(x: Array2<f64>) -> Array1<f64> {
    x.index_axis_move(Axis(1), 0)
}

fn soft_update(target: &mut DenseNet, online: &DenseNet, rho: f64) -> Result<()> {
    let on = online.params_flat();
    let mut tg = target.params_flat();
    if on.len() != tg.len() {
        return usage("target and online networks differ in shape");
    }
    for (t, o) in tg.iter_mut().zip(&on) {
        *t = (1.0 - rho) * *t + rho * o;
    }
    target.set_params_flat(&tg)
}

impl CriticEnsemble {
    /// Two fresh critics; targets and the target policy start as copies.
    pub fn new(config: CriticConfig, policy: &SrdpPolicy, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut sizes = vec![policy.state_dim() + policy.action_dim()];
        sizes.extend(&config.hidden);
        sizes.push(1);
        let q1 = init_network(&NetSpec::mlp(sizes.clone()), rng)?;
        let q2 = init_network(&NetSpec::mlp(sizes), rng)?;
        Ok(Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            policy_target: policy.clone(),
            config,
        })
    }

    pub fn q1_values(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(column(self.q1.predict(sa(states, actions).view())?))
    }

    pub fn q2_values(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(column(self.q2.predict(sa(states, actions).view())?))
    }

    pub fn target_values(&self, next_states: ArrayView2<f64>, next_actions: ArrayView2<f64>) -> Result<TargetValues> {
        let input = sa(next_states, next_actions);
        let q1 = column(self.q1_target.predict(input.view())?);
        let q2 = column(self.q2_target.predict(input.view())?);
        let min = ndarray::Zip::from(&q1).and(&q2).map_collect(|a, b| a.min(*b));
        Ok(TargetValues { q1, q2, min })
    }

    /// Bootstrapped regression target r + γ·(1−done)·min_j Q'_j(s', a').
    pub fn bellman_targets(&self, batch: &Transitions, next_actions: ArrayView2<f64>) -> Result<(Array1<f64>, TargetValues)> {
        batch.check()?;
        let tv = self.target_values(batch.next_states.view(), next_actions)?;
        let gamma = self.config.gamma;
        let y = ndarray::Zip::from(&batch.rewards)
            .and(&batch.dones)
            .and(&tv.min)
            .map_collect(|r, d, m| r + gamma * (1.0 - d) * m);
        Ok((y, tv))
    }

    /// Samples a'_0 from the target policy at s'.
    pub fn next_actions(&self, batch: &Transitions, rng: &mut Rng) -> Result<Array2<f64>> {
        batch.check()?;
        self.policy_target.sample_actions(batch.next_states.view(), rng)
    }

    /// Mean over the batch and over both critics of the squared TD error.
    pub fn bellman_loss(&self, batch: &Transitions, rng: &mut Rng) -> Result<f64> {
        let next = self.next_actions(batch, rng)?;
        self.bellman_loss_with(batch, next.view())
    }

    pub fn bellman_loss_with(&self, batch: &Transitions, next_actions: ArrayView2<f64>) -> Result<f64> {
        let (y, _) = self.bellman_targets(batch, next_actions)?;
        let q1 = self.q1_values(batch.states.view(), batch.actions.view())?;
        let q2 = self.q2_values(batch.states.view(), batch.actions.view())?;
        let n = batch.len() as f64;
        let sq = |q: &Array1<f64>| (&y - q).mapv(|d| d * d).sum();
        Ok((sq(&q1) + sq(&q2)) / (2.0 * n))
    }

    /// Loss plus gradients for (q1, q2); the target is held constant.
    pub fn bellman_loss_grads(
        &self,
        batch: &Transitions,
        next_actions: ArrayView2<f64>,
    ) -> Result<(f64, NetGrads, NetGrads, TargetValues)> {
        let (y, tv) = self.bellman_targets(batch, next_actions)?;
        let input = sa(batch.states.view(), batch.actions.view());
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(2);
        for net in [&self.q1, &self.q2] {
            let (q, trace) = net.forward_batch(input.view())?;
            let resid = &q.column(0) - &y;
            loss += resid.mapv(|d| d * d).sum();
            let g = (resid * (1.0 / n)).insert_axis(Axis(1));
            grads.push(net.backward(&trace, g.view())?.0);
        }
        let g2 = grads.pop().expect("q2 grads");
        let g1 = grads.pop().expect("q1 grads");
        Ok((loss / (2.0 * n), g1, g2, tv))
    }

    /// Moves both target critics and the target policy toward the online
    /// networks by the configured rate.
    pub fn polyak_update(&mut self, policy: &SrdpPolicy) -> Result<()> {
        let rho = self.config.rho;
        soft_update(&mut self.q1_target, &self.q1, rho)?;
        soft_update(&mut self.q2_target, &self.q2, rho)?;
        let on = policy.params_flat();
        let mut tg = self.policy_target.params_flat();
        if on.len() != tg.len() {
            return usage("target policy and policy differ in shape");
        }
        for (t, o) in tg.iter_mut().zip(&on) {
            *t = (1.0 - rho) * *t + rho * o;
        }
        self.policy_target.set_params_flat(&tg)
    }

    /// Stop-gradient scale E_(s,a)~D |Q1(s, a)|.
    fn guidance_scale(&self, data: &Batch) -> Result<f64> {
        if data.is_empty() {
            return usage("empty dataset batch");
        }
        let q = self.q1_values(data.states.view(), data.actions.view())?;
        let denom = q.mapv(f64::abs).mean().expect("nonempty");
        if denom < 1e-8 {
            return Err(Error::Numeric(format!("Q-guidance scale {denom:e} below 1e-8")));
        }
        Ok(denom)
    }

    /// η·E[Q1(s, a_0)] / E|Q1(s, a)| with a_0 sampled by the policy at `states`.
    pub fn q_guidance(&self, policy: &SrdpPolicy, states: ArrayView2<f64>, data: &Batch, rng: &mut Rng) -> Result<f64> {
        if states.nrows() == 0 {
            return usage("empty state batch");
        }
        if self.config.eta == 0.0 {
            return Ok(0.0);
        }
        let denom = self.guidance_scale(data)?;
        let a0 = policy.sample_actions(states, rng)?;
        let q = self.q1_values(states, a0.view())?;
        Ok(self.config.eta * q.mean().expect("nonempty") / denom)
    }

    /// Guidance value and its gradient with respect to the policy, flowing
    /// through the whole reverse chain.
    pub fn q_guidance_grads(
        &self,
        policy: &SrdpPolicy,
        states: ArrayView2<f64>,
        data: &Batch,
        rng: &mut Rng,
    ) -> Result<(f64, PolicyGrads)> {
        if states.nrows() == 0 {
            return usage("empty state batch");
        }
        if self.config.eta == 0.0 {
            return Ok((0.0, PolicyGrads::zeros_like(policy)));
        }
        let denom = self.guidance_scale(data)?;
        let (a0, chain) = policy.sample_actions_traced(states, rng)?;
        let input = sa(states, a0.view());
        let (q, trace) = self.q1.forward_batch(input.view())?;
        let n = states.nrows() as f64;
        let scale = self.config.eta / denom;
        let value = scale * q.column(0).mean().expect("nonempty");
        let dq = Array2::from_elem((states.nrows(), 1), scale / n);
        let (_, d_in) = self.q1.backward(&trace, dq.view())?;
        let d_a0 = d_in.slice(s![.., policy.state_dim()..]);
        let grads = policy.chain_backward(&chain, d_a0)?;
        Ok((value, grads))
    }

    /// L_SRDP = L_BC − guidance over one batch.
    pub fn srdp_total_loss(&self, policy: &SrdpPolicy, batch: &Batch, rng: &mut Rng) -> Result<SrdpLoss> {
        if batch.is_empty() {
            return usage("empty batch");
        }
        let draws = LossDraws::sample(batch.len(), policy.action_dim(), policy.schedule().steps(), rng);
        let bc = policy.bc_loss_with(batch, &draws)?;
        let guidance = self.q_guidance(policy, batch.states.view(), batch, rng)?;
        Ok(SrdpLoss { bc, guidance, total: bc.l_bc - guidance })
    }

    /// Loss and policy gradients. The critics receive no gradient here.
    pub fn srdp_total_loss_grads(
        &self,
        policy: &SrdpPolicy,
        batch: &Batch,
        draws: &LossDraws,
        rng: &mut Rng,
    ) -> Result<(SrdpLoss, PolicyGrads)> {
        let (bc, mut grads) = policy.bc_loss_grads(batch, draws)?;
        let (guidance, g_grads) = self.q_guidance_grads(policy, batch.states.view(), batch, rng)?;
        grads.add_scaled(&g_grads, -1.0);
        Ok((SrdpLoss { bc, guidance, total: bc.l_bc - guidance }, grads))
    }
}

/// Checks min_j Q'_j ≤ Q'_i elementwise.
pub fn min_is_lower_bound(tv: &TargetValues) -> bool {
    let ok = |q: ArrayView1<f64>| q.iter().zip(&tv.min).all(|(qi, m)| m <= qi);
    ok(tv.q1.view()) && ok(tv.q2.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{NoiseSchedule, ScheduleKind};
    use crate::nn::TimeEmbedding;
    use crate::policy::{PolicyArch, PolicyConfig, PolicyVariant};
    use crate::rng::{stream_rng, Stream};
    use ndarray::array;

    fn policy() -> SrdpPolicy {
        let cfg = PolicyConfig {
            variant: PolicyVariant::Srdp { lambda: 1.0 },
            arch: PolicyArch { trunk: vec![4], head_hidden: vec![], time_dim: 2 },
            state_dim: 2,
            action_dim: 2,
            schedule: NoiseSchedule::build(ScheduleKind::Linear, 3, 0.1, 0.4).unwrap(),
            time_embedding: TimeEmbedding::new(2, 10.0).unwrap(),
            clip: None,
        };
        SrdpPolicy::new(cfg, &mut stream_rng(1, Stream::Init)).unwrap()
    }

    fn constant_critic(value: f64) -> DenseNet {
        let mut rng = stream_rng(0, Stream::Init);
        let mut net = init_network(&NetSpec::mlp(vec![4, 1]), &mut rng).unwrap();
        let l = net.layer_mut(0);
        l.weights.fill(0.0);
        l.biases.fill(value);
        net
    }

    fn ensemble(cfg: CriticConfig) -> (SrdpPolicy, CriticEnsemble) {
        let p = policy();
        let e = CriticEnsemble::new(cfg, &p, &mut stream_rng(2, Stream::Init)).unwrap();
        (p, e)
    }

    fn terminal_batch(n: usize) -> Transitions {
        Transitions {
            states: Array2::from_elem((n, 2), 0.1),
            actions: Array2::from_elem((n, 2), -0.2),
            rewards: Array1::ones(n),
            next_states: Array2::zeros((n, 2)),
            dones: Array1::ones(n),
        }
    }

    #[test]
    fn terminal_bellman_loss_values() {
        let cfg = CriticConfig { hidden: vec![], ..CriticConfig::default() };
        let (_, mut e) = ensemble(cfg);
        let b = terminal_batch(3);
        let next = Array2::zeros((3, 2));
        e.q1 = constant_critic(1.0);
        e.q2 = constant_critic(1.0);
        assert_eq!(e.bellman_loss_with(&b, next.view()).unwrap(), 0.0);
        e.q1 = constant_critic(0.0);
        e.q2 = constant_critic(0.0);
        assert_eq!(e.bellman_loss_with(&b, next.view()).unwrap(), 1.0);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let (_, e) = ensemble(CriticConfig { hidden: vec![4], ..CriticConfig::default() });
        let b = terminal_batch(0);
        assert!(matches!(e.bellman_loss(&b, &mut stream_rng(0, Stream::Train)), Err(Error::Usage(_))));
    }

    #[test]
    fn polyak_rates() {
        let cfg = CriticConfig { hidden: vec![], rho: 1.0, ..CriticConfig::default() };
        let (p, mut e) = ensemble(cfg);
        e.q1 = constant_critic(1.0);
        e.q1_target = constant_critic(0.0);
        let mut moved = p.clone();
        let shifted: Vec<f64> = moved.params_flat().iter().map(|v| v + 1.0).collect();
        moved.set_params_flat(&shifted).unwrap();
        e.polyak_update(&moved).unwrap();
        assert_eq!(e.q1_target, e.q1);
        assert_eq!(e.policy_target.params_flat(), moved.params_flat());

        e.config.rho = 0.0;
        let before = e.q2_target.clone();
        e.q2 = constant_critic(5.0);
        e.polyak_update(&p).unwrap();
        assert_eq!(e.q2_target, before);

        e.config.rho = 0.005;
        e.q1_target = constant_critic(0.0);
        e.polyak_update(&p).unwrap();
        assert!((e.q1_target.layers()[0].biases[0] - 0.005).abs() < 1e-15);
    }

    #[test]
    fn guidance_with_constant_critic() {
        let cfg = CriticConfig { hidden: vec![], eta: 1.0, ..CriticConfig::default() };
        let (p, mut e) = ensemble(cfg);
        e.q1 = constant_critic(2.0);
        let states = array![[0.1, 0.2], [-0.3, 0.4]];
        let data = Batch::new(states.clone(), array![[0.5, 0.5], [-0.5, 0.1]]).unwrap();
        let g = e.q_guidance(&p, states.view(), &data, &mut stream_rng(3, Stream::Train)).unwrap();
        assert!((g - 1.0).abs() < 1e-15);
        e.config.eta = 0.0;
        assert_eq!(e.q_guidance(&p, states.view(), &data, &mut stream_rng(3, Stream::Train)).unwrap(), 0.0);
    }

    #[test]
    fn guidance_scale_guard() {
        let (p, mut e) = ensemble(CriticConfig { hidden: vec![], ..CriticConfig::default() });
        e.q1 = constant_critic(0.0);
        let states = array![[0.1, 0.2]];
        let data = Batch::new(states.clone(), array![[0.5, 0.5]]).unwrap();
        let r = e.q_guidance(&p, states.view(), &data, &mut stream_rng(3, Stream::Train));
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn eta_zero_reduces_to_bc() {
        let (p, e) = ensemble(CriticConfig { hidden: vec![3], eta: 0.0, ..CriticConfig::default() });
        let b = Batch::new(array![[0.1, 0.2], [0.3, -0.4]], array![[0.5, 0.5], [-0.5, 0.1]]).unwrap();
        let l = e.srdp_total_loss(&p, &b, &mut stream_rng(4, Stream::Train)).unwrap();
        let bc = p.bc_loss(&b, &mut stream_rng(4, Stream::Train)).unwrap();
        assert_eq!(l.total, bc.l_bc);
        assert_eq!(l.guidance, 0.0);
    }

    #[test]
    fn min_over_targets_bounds_each_target() {
        let (p, e) = ensemble(CriticConfig { hidden: vec![8], ..CriticConfig::default() });
        let mut b = terminal_batch(16);
        b.next_states = Array2::from_shape_fn((16, 2), |(i, j)| (i as f64 - 8.0) * 0.1 + j as f64);
        b.dones.fill(0.0);
        let next = e.next_actions(&b, &mut stream_rng(5, Stream::Train)).unwrap();
        let (_, _, _, tv) = e.bellman_loss_grads(&b, next.view()).unwrap();
        assert!(min_is_lower_bound(&tv));
        drop(p);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let p = policy();
        for cfg in [
            CriticConfig { gamma: 0.0, ..CriticConfig::default() },
            CriticConfig { rho: 1.5, ..CriticConfig::default() },
            CriticConfig { eta: -1.0, ..CriticConfig::default() },
        ] {
            assert!(matches!(CriticEnsemble::new(cfg, &p, &mut stream_rng(0, Stream::Init)), Err(Error::Config(_))));
        }
    }
}
