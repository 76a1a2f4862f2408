mod common;

use common::*;
use ndarray::Array2;
use proptest::prelude::*;
use srdp::checkpoint::Checkpoint;
use srdp::diffusion::{reverse_step, NoiseSchedule, ScheduleKind};
use srdp::nn::{adam_step, init_network, AdamConfig, AdamState, NetGrads, NetSpec};
use srdp::policy::{LossDraws, PolicyVariant};
use srdp::rng::{stream_rng, Stream};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dense_net_gradients_match_finite_differences(
        sizes in prop::collection::vec(1usize..5, 2..5),
        seed in 0u64..1000,
        rows in 1usize..4,
    ) {
        let spec = NetSpec::mlp(sizes.clone());
        let net = init_network(&spec, &mut stream_rng(seed, Stream::Init)).unwrap();
        prop_assume!(net.num_params() <= 100);
        let x = Array2::from_shape_fn((rows, sizes[0]), |(i, j)| ((i * 7 + j * 3 + seed as usize) as f64 * 0.37).sin());
        let w = Array2::from_shape_fn((rows, *sizes.last().unwrap()), |(i, j)| ((i + 2 * j) as f64 * 0.9 + 0.2).cos());
        let (_, trace) = net.forward_batch(x.view()).unwrap();
        let g = net.backward(&trace, w.view()).unwrap().0.flat();
        let o = fd_check("net", &net.params_flat(), &g, |p| {
            let mut n = net.clone();
            n.set_params_flat(p).unwrap();
            (n.predict(x.view()).unwrap() * &w).sum()
        });
        prop_assert!(o.pass, "{}", o.detail);
    }

    #[test]
    fn reverse_step_is_affine(
        t in 1usize..=6,
        a in prop::array::uniform6(-3.0f64..3.0),
        b in prop::array::uniform6(-3.0f64..3.0),
        c in 0.0f64..1.0,
    ) {
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 6, 0.01, 0.5).unwrap();
        let f = |v: &[f64; 6]| reverse_step(&v[0..2], &v[2..4], t, &sched, &v[4..6]).unwrap();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| c * x + (1.0 - c) * y).collect();
        let lhs = f(&mix.try_into().unwrap());
        let (fa, fb) = (f(&a), f(&b));
        for k in 0..2 {
            let rhs = c * fa[k] + (1.0 - c) * fb[k];
            prop_assert!((lhs[k] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn polyak_contracts_each_parameter(rho in 0.0f64..=1.0) {
        let p = scripted_policy(PolicyVariant::Srdp { lambda: 0.75 });
        let mut e = scripted_critics(&p, 0.9);
        e.config.rho = rho;
        let before: Vec<f64> = e.q1_target.params_flat();
        let online = e.q1.params_flat();
        e.polyak_update(&p).unwrap();
        for ((t1, t0), o) in e.q1_target.params_flat().iter().zip(&before).zip(&online) {
            let want = (1.0 - rho) * (t0 - o).abs();
            prop_assert!(((t1 - o).abs() - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn lambda_zero_gradients_equal_diffusion_gradients(seed in 0u64..500) {
        let mut p = scripted_policy(PolicyVariant::Srdp { lambda: 0.0 });
        let n = p.num_params();
        let params: Vec<f64> = formula_params(n).iter().enumerate().map(|(k, v)| v + (seed as f64 * 0.1 + k as f64).sin() * 0.1).collect();
        p.set_params_flat(&params).unwrap();
        let (batch, _) = scripted_batch();
        let draws = LossDraws::sample(batch.len(), 2, 3, &mut stream_rng(seed, Stream::Train));
        let (_, g_bc) = p.bc_loss_grads(&batch, &draws).unwrap();
        let (_, g_dp) = p.diffusion_loss_grads(&batch, &draws).unwrap();
        prop_assert_eq!(g_bc.encoder.flat(), g_dp.encoder.flat());
        prop_assert_eq!(g_bc.diffusion_head.flat(), g_dp.diffusion_head.flat());
        prop_assert_eq!(g_bc.time_proj.flat(), g_dp.time_proj.flat());
        prop_assert!(g_bc.state_head.unwrap().flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn policy_checkpoint_round_trips_bit_for_bit(seed in 0u64..1000, bc in any::<bool>()) {
        let variant = if bc { PolicyVariant::BcDiffusion } else { PolicyVariant::Srdp { lambda: 0.3 } };
        let p = srdp::policy::SrdpPolicy::new(scripted_config(variant), &mut stream_rng(seed, Stream::Init)).unwrap();
        let mut ck = Checkpoint::new();
        ck.set_policy("policy", &p);
        let q = Checkpoint::parse(&ck.to_text()).unwrap().policy("policy").unwrap();
        prop_assert_eq!(p.params_flat(), q.params_flat());
        prop_assert_eq!(p.variant(), q.variant());
        prop_assert_eq!(p.schedule().betas(), q.schedule().betas());
    }

    #[test]
    fn adam_counts_one_step_per_update(steps in 1usize..20, seed in 0u64..100) {
        let mut net = init_network(&NetSpec::mlp(vec![2, 3, 1]), &mut stream_rng(seed, Stream::Init)).unwrap();
        let mut state = AdamState::new(AdamConfig::default(), net.num_params());
        let mut g = NetGrads::zeros_like(&net);
        g.weights[0].fill(0.5);
        for k in 0..steps {
            adam_step(&mut net, &g, &mut state).unwrap();
            prop_assert_eq!(state.step_count, k as u64 + 1);
            prop_assert_eq!(state.first_moment.len(), net.num_params());
            prop_assert_eq!(state.second_moment.len(), net.num_params());
        }
    }
}
