//! Diffusion policy with a shared encoder and two heads.
//!
//! The encoder maps `concat(noisy_action, state, time_proj(embed(t)))` to a
//! latent `z`. The diffusion head predicts the injected noise from `z`; the
//! state head reconstructs the state from `z`. Training minimizes
//! `L_BC = L_DP + λ·L_R` where both terms share the same drawn `(t, ε)`.
//! BC-Diffusion is the variant without a state head.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::diffusion::NoiseSchedule;
use crate::error::{config, usage, Error, Result};
use crate::nn::{init_network, Activation, DenseNet, NetGrads, NetSpec, TimeEmbedding, Trace};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyVariant {
    Srdp { lambda: f64 },
    BcDiffusion,
}

impl PolicyVariant {
    pub fn lambda(&self) -> f64 {
        match self {
            PolicyVariant::Srdp { lambda } => *lambda,
            PolicyVariant::BcDiffusion => 0.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PolicyVariant::Srdp { .. } => "srdp",
            PolicyVariant::BcDiffusion => "bc_diffusion",
        }
    }

    pub fn has_state_head(&self) -> bool {
        matches!(self, PolicyVariant::Srdp { .. })
    }
}

/// Hidden widths. `trunk` is the shared encoder (its last entry is the width
/// of `z`); `head_hidden` is the hidden stack inside each head.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyArch {
    pub trunk: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub time_dim: usize,
}

impl PolicyArch {
    /// (16 shared, 16 shared, 16) used on the unit bandit.
    pub fn bandit() -> Self {
        Self { trunk: vec![16, 16], head_hidden: vec![16], time_dim: 16 }
    }

    /// (32 shared, 16 shared, 32).
    pub fn ur10() -> Self {
        Self { trunk: vec![32, 16], head_hidden: vec![32], time_dim: 16 }
    }

    /// Three hidden layers of 16 along the noise-prediction path; with no state
    /// head this is a plain stacked network.
    pub fn bc_diffusion() -> Self {
        Self::bandit()
    }
}

/// Axis-aligned clipping box for emitted actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub variant: PolicyVariant,
    pub arch: PolicyArch,
    pub state_dim: usize,
    pub action_dim: usize,
    pub schedule: NoiseSchedule,
    pub time_embedding: TimeEmbedding,
    pub clip: Option<Bounds>,
}

#[derive(Debug)]
pub struct SrdpPolicy {
    variant: PolicyVariant,
    state_dim: usize,
    action_dim: usize,
    schedule: NoiseSchedule,
    time_embedding: TimeEmbedding,
    clip: Option<Bounds>,
    pub time_proj: DenseNet,
    pub encoder: DenseNet,
    pub diffusion_head: DenseNet,
    pub state_head: Option<DenseNet>,
    state_head_calls: AtomicU64,
}

impl Clone for SrdpPolicy {
    fn clone(&self) -> Self {
        Self {
            variant: self.variant,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            schedule: self.schedule.clone(),
            time_embedding: self.time_embedding,
            clip: self.clip.clone(),
            time_proj: self.time_proj.clone(),
            encoder: self.encoder.clone(),
            diffusion_head: self.diffusion_head.clone(),
            state_head: self.state_head.clone(),
            state_head_calls: AtomicU64::new(0),
        }
    }
}

/// Minibatch of (state, action) rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
}

impl Batch {
    pub fn new(states: Array2<f64>, actions: Array2<f64>) -> Result<Self> {
        if states.nrows() != actions.nrows() {
            return usage("states and actions must have the same number of rows");
        }
        Ok(Self { states, actions })
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }
}

/// Per-sample timesteps and Gaussian noise shared by every loss term of one
/// training step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDraws {
    pub t: Vec<usize>,
    pub eps: Array2<f64>,
}

impl LossDraws {
    /// Draws all timesteps first, then the noise row by row.
    pub fn sample(batch: usize, action_dim: usize, steps: usize, rng: &mut Rng) -> Self {
        let t = (0..batch).map(|_| rng.random_range(1..=steps)).collect();
        let eps = Array2::from_shape_simple_fn((batch, action_dim), || rng.sample(StandardNormal));
        Self { t, eps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BcLoss {
    pub l_dp: f64,
    /// `None` for BC-Diffusion.
    pub l_r: Option<f64>,
    pub l_bc: f64,
}

/// Gradients for every network of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrads {
    pub time_proj: NetGrads,
    pub encoder: NetGrads,
    pub diffusion_head: NetGrads,
    pub state_head: Option<NetGrads>,
}

impl PolicyGrads {
    pub fn zeros_like(policy: &SrdpPolicy) -> Self {
        Self {
            time_proj: NetGrads::zeros_like(&policy.time_proj),
            encoder: NetGrads::zeros_like(&policy.encoder),
            diffusion_head: NetGrads::zeros_like(&policy.diffusion_head),
            state_head: policy.state_head.as_ref().map(NetGrads::zeros_like),
        }
    }

    /// Same ordering as [`SrdpPolicy::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.time_proj.flat();
        out.extend(self.encoder.flat());
        out.extend(self.diffusion_head.flat());
        if let Some(g) = &self.state_head {
            out.extend(g.flat());
        }
        out
    }

    pub fn add_scaled(&mut self, other: &PolicyGrads, c: f64) {
        let add = |a: &mut NetGrads, b: &NetGrads| {
            let mut b = b.clone();
            b.scale(c);
            a.add_assign(&b);
        };
        add(&mut self.time_proj, &other.time_proj);
        add(&mut self.encoder, &other.encoder);
        add(&mut self.diffusion_head, &other.diffusion_head);
        if let (Some(a), Some(b)) = (&mut self.state_head, &other.state_head) {
            add(a, b);
        }
    }
}

/// Recorded reverse chain, for differentiating sampled actions.
#[derive(Debug, Clone)]
pub struct ChainTrace {
    steps: Vec<StepTrace>,
    clip_mask: Option<Array2<f64>>,
    batch: usize,
}

#[derive(Debug, Clone)]
struct StepTrace {
    t: usize,
    time: Trace,
    encoder: Trace,
    head: Trace,
}

struct EncoderPass {
    z: Array2<f64>,
    time: Trace,
    encoder: Trace,
}

impl SrdpPolicy {
    pub fn new(cfg: PolicyConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.state_dim == 0 || cfg.action_dim == 0 {
            return config("state and action dims must be positive");
        }
        if cfg.arch.trunk.is_empty() {
            return config("the shared encoder needs at least one layer");
        }
        if cfg.arch.time_dim != cfg.time_embedding.dim() {
            return config("time projection width must equal the embedding dim");
        }
        if let PolicyVariant::Srdp { lambda } = cfg.variant {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return config(format!("lambda must be finite and non-negative, got {lambda}"));
            }
        }
        if let Some(b) = &cfg.clip {
            if b.lo.len() != cfg.action_dim || b.hi.len() != cfg.action_dim || b.lo.iter().zip(&b.hi).any(|(l, h)| l >= h)
            {
                return config("clip box must match the action dim with lo < hi");
            }
        }
        let arch = &cfg.arch;
        let time_proj =
            init_network(&NetSpec::new(vec![arch.time_dim, arch.time_dim], Activation::Silu, Activation::Silu), rng)?;
        let mut enc_sizes = vec![cfg.action_dim + cfg.state_dim + arch.time_dim];
        enc_sizes.extend(&arch.trunk);
        let encoder = init_network(&NetSpec::new(enc_sizes, Activation::Silu, Activation::Silu), rng)?;
        let z_dim = encoder.output_dim();
        let head = |out: usize, rng: &mut Rng| {
            let mut sizes = vec![z_dim];
            sizes.extend(&arch.head_hidden);
            sizes.push(out);
            init_network(&NetSpec::mlp(sizes), rng)
        };
        let diffusion_head = head(cfg.action_dim, rng)?;
        let state_head = if cfg.variant.has_state_head() { Some(head(cfg.state_dim, rng)?) } else { None };
        Ok(Self {
            variant: cfg.variant,
            state_dim: cfg.state_dim,
            action_dim: cfg.action_dim,
            schedule: cfg.schedule,
            time_embedding: cfg.time_embedding,
            clip: cfg.clip,
            time_proj,
            encoder,
            diffusion_head,
            state_head,
            state_head_calls: AtomicU64::new(0),
        })
    }

    /// Rebuilds a policy from stored networks. Shapes must match what
    /// [`SrdpPolicy::new`] would build for `cfg`.
    pub fn from_parts(
        cfg: PolicyConfig,
        time_proj: DenseNet,
        encoder: DenseNet,
        diffusion_head: DenseNet,
        state_head: Option<DenseNet>,
    ) -> Result<Self> {
        let mut policy = Self::new(cfg, &mut crate::rng::stream_rng(0, crate::rng::Stream::Init))?;
        let same = |a: &DenseNet, b: &DenseNet| {
            a.layers().len() == b.layers().len()
                && a.layers().iter().zip(b.layers()).all(|(x, y)| {
                    x.weights.dim() == y.weights.dim() && x.activation == y.activation
                })
        };
        let heads_ok = match (&policy.state_head, &state_head) {
            (Some(a), Some(b)) => same(a, b),
            (None, None) => true,
            _ => false,
        };
        if !(same(&policy.time_proj, &time_proj)
            && same(&policy.encoder, &encoder)
            && same(&policy.diffusion_head, &diffusion_head)
            && heads_ok)
        {
            return usage("stored networks do not match the policy configuration");
        }
        policy.time_proj = time_proj;
        policy.encoder = encoder;
        policy.diffusion_head = diffusion_head;
        policy.state_head = state_head;
        Ok(policy)
    }

    pub fn variant(&self) -> PolicyVariant {
        self.variant
    }

    pub fn lambda(&self) -> f64 {
        self.variant.lambda()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn time_embedding(&self) -> TimeEmbedding {
        self.time_embedding
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn clip(&self) -> Option<&Bounds> {
        self.clip.as_ref()
    }

    pub fn set_clip(&mut self, clip: Option<Bounds>) {
        self.clip = clip;
    }

    /// Number of state-head forward passes since construction.
    pub fn state_head_calls(&self) -> u64 {
        self.state_head_calls.load(Ordering::Relaxed)
    }

    fn nets(&self) -> Vec<&DenseNet> {
        let mut v = vec![&self.time_proj, &self.encoder, &self.diffusion_head];
        v.extend(self.state_head.as_ref());
        v
    }

    fn nets_mut(&mut self) -> Vec<&mut DenseNet> {
        let mut v = vec![&mut self.time_proj, &mut self.encoder, &mut self.diffusion_head];
        v.extend(self.state_head.as_mut());
        v
    }

    pub fn num_params(&self) -> usize {
        self.nets().iter().map(|n| n.num_params()).sum()
    }

    /// Time projection, encoder, diffusion head, then state head.
    pub fn params_flat(&self) -> Vec<f64> {
        self.nets().iter().flat_map(|n| n.params_flat()).collect()
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return usage(format!("expected {} policy parameters, got {}", self.num_params(), params.len()));
        }
        let mut offset = 0;
        for net in self.nets_mut() {
            let n = net.num_params();
            net.set_params_flat(&params[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return usage("empty batch");
        }
        if batch.states.ncols() != self.state_dim || batch.actions.ncols() != self.action_dim {
            return usage(format!(
                "batch has state dim {} and action dim {}, policy expects {} and {}",
                batch.states.ncols(),
                batch.actions.ncols(),
                self.state_dim,
                self.action_dim
            ));
        }
        Ok(())
    }

    fn check_draws(&self, batch: &Batch, draws: &LossDraws) -> Result<()> {
        if draws.t.len() != batch.len() || draws.eps.dim() != (batch.len(), self.action_dim) {
            return usage("draws do not match the batch");
        }
        if let Some(&t) = draws.t.iter().find(|&&t| t == 0 || t > self.schedule.steps()) {
            return usage(format!("timestep {t} outside 1..={}", self.schedule.steps()));
        }
        Ok(())
    }

    fn encode_batch(&self, noisy: ArrayView2<f64>, states: ArrayView2<f64>, ts: &[usize]) -> Result<EncoderPass> {
        let temb = self.time_embedding.embed_batch(ts);
        let (tp, time) = self.time_proj.forward_batch(temb.view())?;
        let input = concatenate(Axis(1), &[noisy, states, tp.view()]).expect("encoder input");
        let (z, encoder) = self.encoder.forward_batch(input.view())?;
        Ok(EncoderPass { z, time, encoder })
    }

    /// Shared representation z for one (noisy action, state, t).
    pub fn encode(&self, noisy_action: &[f64], state: &[f64], t: usize) -> Result<Vec<f64>> {
        if noisy_action.len() != self.action_dim || state.len() != self.state_dim {
            return usage("encode input does not match policy dims");
        }
        if t == 0 || t > self.schedule.steps() {
            return usage(format!("timestep {t} outside 1..={}", self.schedule.steps()));
        }
        let a = ArrayView2::from_shape((1, self.action_dim), noisy_action).expect("row");
        let s = ArrayView2::from_shape((1, self.state_dim), state).expect("row");
        let pass = self.encode_batch(a, s, &[t])?;
        Ok(pass.z.into_raw_vec_and_offset().0)
    }

    fn noisy_actions(&self, batch: &Batch, draws: &LossDraws) -> Array2<f64> {
        let mut noisy = batch.actions.clone();
        for (i, mut row) in noisy.rows_mut().into_iter().enumerate() {
            let ab = self.schedule.alpha_bar(draws.t[i]);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            for (j, v) in row.iter_mut().enumerate() {
                *v = a * *v + b * draws.eps[[i, j]];
            }
        }
        noisy
    }

    /// Evaluates `w_dp·L_DP + w_r·L_R` on fixed draws, with gradients when
    /// requested. The state-head branch is skipped in the backward pass when
    /// `w_r == 0`.
    fn composite(
        &self,
        batch: &Batch,
        draws: &LossDraws,
        w_dp: f64,
        w_r: f64,
        want_grads: bool,
    ) -> Result<(f64, Option<f64>, Option<PolicyGrads>)> {
        self.check_batch(batch)?;
        self.check_draws(batch, draws)?;
        let n = batch.len() as f64;
        let noisy = self.noisy_actions(batch, draws);
        let pass = self.encode_batch(noisy.view(), batch.states.view(), &draws.t)?;

        let (eps_hat, head_trace) = self.diffusion_head.forward_batch(pass.z.view())?;
        let dp_resid = &eps_hat - &draws.eps;
        let l_dp = dp_resid.iter().map(|r| r * r).sum::<f64>() / n;

        let recon = match &self.state_head {
            Some(head) => {
                self.state_head_calls.fetch_add(1, Ordering::Relaxed);
                let (s_hat, trace) = head.forward_batch(pass.z.view())?;
                let resid = &s_hat - &batch.states;
                let l_r = resid.iter().map(|r| r * r).sum::<f64>() / n;
                Some((l_r, resid, trace))
            }
            None => None,
        };
        let l_r = recon.as_ref().map(|r| r.0);
        if !want_grads {
            return Ok((l_dp, l_r, None));
        }

        let mut grads = PolicyGrads::zeros_like(self);
        let mut dz = Array2::<f64>::zeros(pass.z.dim());
        if w_dp != 0.0 {
            let g = dp_resid * (2.0 * w_dp / n);
            let (hg, d) = self.diffusion_head.backward(&head_trace, g.view())?;
            grads.diffusion_head = hg;
            dz += &d;
        }
        if w_r != 0.0 {
            let (_, resid, trace) = recon.as_ref().ok_or_else(|| Error::Usage("no state head".into()))?;
            let g = resid * (2.0 * w_r / n);
            let head = self.state_head.as_ref().expect("state head");
            let (hg, d) = head.backward(trace, g.view())?;
            grads.state_head = Some(hg);
            dz += &d;
        }
        let (eg, d_in) = self.encoder.backward(&pass.encoder, dz.view())?;
        grads.encoder = eg;
        let off = self.action_dim + self.state_dim;
        let (tg, _) = self.time_proj.backward(&pass.time, d_in.slice(s![.., off..]))?;
        grads.time_proj = tg;
        Ok((l_dp, l_r, Some(grads)))
    }

    fn draws_for(&self, batch: &Batch, rng: &mut Rng) -> Result<LossDraws> {
        self.check_batch(batch)?;
        Ok(LossDraws::sample(batch.len(), self.action_dim, self.schedule.steps(), rng))
    }

    /// L_DP on fresh draws.
    pub fn diffusion_loss(&self, batch: &Batch, rng: &mut Rng) -> Result<f64> {
        let draws = self.draws_for(batch, rng)?;
        self.diffusion_loss_with(batch, &draws)
    }

    pub fn diffusion_loss_with(&self, batch: &Batch, draws: &LossDraws) -> Result<f64> {
        Ok(self.composite(batch, draws, 1.0, 0.0, false)?.0)
    }

    pub fn diffusion_loss_grads(&self, batch: &Batch, draws: &LossDraws) -> Result<(f64, PolicyGrads)> {
        let (l, _, g) = self.composite(batch, draws, 1.0, 0.0, true)?;
        Ok((l, g.expect("grads")))
    }

    /// L_R on fresh draws. Fails for BC-Diffusion.
    pub fn recon_loss(&self, batch: &Batch, rng: &mut Rng) -> Result<f64> {
        if self.state_head.is_none() {
            return usage("BC-Diffusion has no state head");
        }
        let draws = self.draws_for(batch, rng)?;
        self.recon_loss_with(batch, &draws)
    }

    pub fn recon_loss_with(&self, batch: &Batch, draws: &LossDraws) -> Result<f64> {
        if self.state_head.is_none() {
            return usage("BC-Diffusion has no state head");
        }
        Ok(self.composite(batch, draws, 0.0, 1.0, false)?.1.expect("state head"))
    }

    pub fn recon_loss_grads(&self, batch: &Batch, draws: &LossDraws) -> Result<(f64, PolicyGrads)> {
        if self.state_head.is_none() {
            return usage("BC-Diffusion has no state head");
        }
        let (_, l_r, g) = self.composite(batch, draws, 0.0, 1.0, true)?;
        Ok((l_r.expect("state head"), g.expect("grads")))
    }

    /// L_BC = L_DP + λ·L_R on fresh draws shared by both terms.
    pub fn bc_loss(&self, batch: &Batch, rng: &mut Rng) -> Result<BcLoss> {
        let draws = self.draws_for(batch, rng)?;
        self.bc_loss_with(batch, &draws)
    }

    pub fn bc_loss_with(&self, batch: &Batch, draws: &LossDraws) -> Result<BcLoss> {
        let lambda = self.lambda();
        let (l_dp, l_r, _) = self.composite(batch, draws, 1.0, lambda, false)?;
        Ok(BcLoss { l_dp, l_r, l_bc: l_dp + lambda * l_r.unwrap_or(0.0) })
    }

    pub fn bc_loss_grads(&self, batch: &Batch, draws: &LossDraws) -> Result<(BcLoss, PolicyGrads)> {
        let lambda = self.lambda();
        let (l_dp, l_r, g) = self.composite(batch, draws, 1.0, lambda, true)?;
        Ok((BcLoss { l_dp, l_r, l_bc: l_dp + lambda * l_r.unwrap_or(0.0) }, g.expect("grads")))
    }

    fn time_projection(&self, t: usize) -> Result<Array2<f64>> {
        self.time_proj.predict(self.time_embedding.embed_batch(&[t]).view())
    }

    fn apply_clip(&self, a: &mut Array2<f64>) {
        if let Some(b) = &self.clip {
            for mut row in a.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = v.clamp(b.lo[j], b.hi[j]);
                }
            }
        }
    }

    fn check_states(&self, states: ArrayView2<f64>) -> Result<()> {
        if states.ncols() != self.state_dim {
            return usage(format!("states have {} columns, policy expects {}", states.ncols(), self.state_dim));
        }
        Ok(())
    }

    /// Runs the reverse chain from a_T ~ N(0, I), injecting fresh noise for
    /// t ≥ 2 and none at t = 1, then clips to the action box if configured.
    pub fn sample_actions(&self, states: ArrayView2<f64>, rng: &mut Rng) -> Result<Array2<f64>> {
        self.check_states(states)?;
        let b = states.nrows();
        let mut a = Array2::from_shape_simple_fn((b, self.action_dim), || rng.sample(StandardNormal));
        for t in (1..=self.schedule.steps()).rev() {
            let tp = self.time_projection(t)?;
            let tp = tp.broadcast((b, tp.ncols())).expect("broadcast");
            let input = concatenate(Axis(1), &[a.view(), states, tp]).expect("encoder input");
            let eps_hat = self
                .diffusion_head
                .predict(self.encoder.predict(input.view()).map_err(|e| at_step(e, t))?.view())
                .map_err(|e| at_step(e, t))?;
            let c = self.schedule.reverse_coeffs(t)?;
            a = a * c.x - eps_hat * c.eps;
            if t > 1 {
                a.mapv_inplace(|v| v + c.noise * rng.sample::<f64, _>(StandardNormal));
            }
            if !a.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite action at diffusion step t={t}")));
            }
        }
        self.apply_clip(&mut a);
        Ok(a)
    }

    pub fn sample_action(&self, state: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, state.len()), state).expect("row");
        Ok(self.sample_actions(view, rng)?.into_raw_vec_and_offset().0)
    }

    /// Same draws as [`sample_actions`](Self::sample_actions), recording
    /// every step for [`chain_backward`](Self::chain_backward).
    pub fn sample_actions_traced(&self, states: ArrayView2<f64>, rng: &mut Rng) -> Result<(Array2<f64>, ChainTrace)> {
        self.check_states(states)?;
        let b = states.nrows();
        let mut a = Array2::from_shape_simple_fn((b, self.action_dim), || rng.sample(StandardNormal));
        let mut steps = Vec::with_capacity(self.schedule.steps());
        for t in (1..=self.schedule.steps()).rev() {
            let (tp, time) = self.time_proj.forward_batch(self.time_embedding.embed_batch(&[t]).view())?;
            let tp = tp.broadcast((b, tp.ncols())).expect("broadcast");
            let input = concatenate(Axis(1), &[a.view(), states, tp]).expect("encoder input");
            let (z, encoder) = self.encoder.forward_batch(input.view()).map_err(|e| at_step(e, t))?;
            let (eps_hat, head) = self.diffusion_head.forward_batch(z.view()).map_err(|e| at_step(e, t))?;
            let c = self.schedule.reverse_coeffs(t)?;
            a = a * c.x - eps_hat * c.eps;
            if t > 1 {
                a.mapv_inplace(|v| v + c.noise * rng.sample::<f64, _>(StandardNormal));
            }
            if !a.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite action at diffusion step t={t}")));
            }
            steps.push(StepTrace { t, time, encoder, head });
        }
        let clip_mask = self.clip.as_ref().map(|bx| {
            Array2::from_shape_fn(a.dim(), |(i, j)| {
                let v = a[[i, j]];
                if v > bx.lo[j] && v < bx.hi[j] {
                    1.0
                } else {
                    0.0
                }
            })
        });
        self.apply_clip(&mut a);
        Ok((a, ChainTrace { steps, clip_mask, batch: b }))
    }

    /// Gradient of a scalar loss with respect to all policy parameters given
    /// dLoss/da_0 for each sampled action.
    pub fn chain_backward(&self, trace: &ChainTrace, d_a0: ArrayView2<f64>) -> Result<PolicyGrads> {
        if d_a0.dim() != (trace.batch, self.action_dim) {
            return usage("action gradient does not match the traced chain");
        }
        let mut g = d_a0.to_owned();
        if let Some(mask) = &trace.clip_mask {
            g *= mask;
        }
        let mut grads = PolicyGrads::zeros_like(self);
        let off = self.action_dim + self.state_dim;
        for step in trace.steps.iter().rev() {
            let c = self.schedule.reverse_coeffs(step.t)?;
            let d_eps = &g * (-c.eps);
            let (hg, dz) = self.diffusion_head.backward(&step.head, d_eps.view())?;
            grads.diffusion_head.add_assign(&hg);
            let (eg, d_in) = self.encoder.backward(&step.encoder, dz.view())?;
            grads.encoder.add_assign(&eg);
            let d_tp = d_in.slice(s![.., off..]).sum_axis(Axis(0)).insert_axis(Axis(0));
            let (tg, _) = self.time_proj.backward(&step.time, d_tp.view())?;
            grads.time_proj.add_assign(&tg);
            g = g * c.x + d_in.slice(s![.., ..self.action_dim]);
        }
        Ok(grads)
    }
}

fn at_step(e: Error, t: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("{msg} at diffusion step t={t}")),
        other => other,
    }
}
