//! Invariants checked over generated inputs.

use cbrl_core::actors::Policy;
use cbrl_core::envs::{observation_of, reset, step, GoalEnvConfig, Start, GOAL_REWARD, WALL_REWARD};
use cbrl_core::neural::{polyak_blend, AdamConfig, AdamState, ReadoutParams};
use cbrl_core::numkit::RngStream;
use cbrl_core::reservoir::{init_reservoir, reservoir_step, ReservoirConfig, ReservoirState};
use cbrl_core::td3::{Experience, ReplayBuffer, Td3Hyper, Td3Learner};
use proptest::prelude::*;

fn small_reservoir(seed: u64) -> (ReservoirConfig, cbrl_core::reservoir::ReservoirParams) {
    let cfg = ReservoirConfig { size: 24, connectivity: 0.3, ..ReservoirConfig::default() };
    let params = init_reservoir(&cfg, &mut RngStream::new(seed)).unwrap();
    (cfg, params)
}

fn tagged(i: usize) -> Experience {
    Experience { u: vec![i as f64], x: None, a: vec![0.0], r: 0.0, u_next: vec![0.0], x_next: None, terminal: false }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn reservoir_state_stays_in_unit_box(
        seed in 0u64..1000,
        g in 0.0f64..10.0,
        inputs in prop::collection::vec(prop::array::uniform5(-5.0f64..5.0), 1..30),
    ) {
        let (cfg, params) = small_reservoir(seed);
        let mut x = ReservoirState(vec![0.0; cfg.size]);
        for u in &inputs {
            x = reservoir_step(&params, g, &x, u).unwrap();
            prop_assert!(x.as_slice().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        }
    }

    #[test]
    fn observation_components_are_complementary(
        px in 0.0f64..=20.0, py in 0.0f64..=20.0,
        gx in 2.0f64..=18.0, gy in 2.0f64..=18.0,
    ) {
        let cfg = GoalEnvConfig::default();
        let st = reset(&cfg, [gx, gy], Start::Fixed([px, py]), &mut RngStream::new(0));
        let u = observation_of(&cfg, &st);
        prop_assert!((u[0] + u[1] - 1.0).abs() < 1e-12);
        prop_assert!((u[2] + u[3] - 1.0).abs() < 1e-12);
        prop_assert!(u.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(u[4] >= 0.5);
    }

    #[test]
    fn rewards_and_positions_stay_in_their_sets(
        px in 0.0f64..=20.0, py in 0.0f64..=20.0,
        actions in prop::collection::vec((-1.0f64..=1.0, -1.0f64..=1.0), 1..50),
    ) {
        let cfg = GoalEnvConfig::default();
        let mut st = reset(&cfg, cfg.goal, Start::Fixed([px, py]), &mut RngStream::new(0));
        for (ax, ay) in actions {
            let out = step(&cfg, &mut st, &[ax, ay]).unwrap();
            prop_assert!([GOAL_REWARD, WALL_REWARD, 0.0].contains(&out.reward));
            prop_assert!(st.pos.iter().all(|p| (0.0..=cfg.field_size).contains(p)));
            if out.terminal.is_some() {
                break;
            }
        }
    }

    #[test]
    fn replay_buffer_keeps_the_newest_in_order(capacity in 1usize..20, pushes in 0usize..60) {
        let mut buf = ReplayBuffer::new(capacity);
        for i in 0..pushes {
            buf.push(tagged(i));
        }
        let kept: Vec<usize> = buf.iter().map(|e| e.u[0] as usize).collect();
        let want: Vec<usize> = (pushes.saturating_sub(capacity)..pushes).collect();
        prop_assert_eq!(kept, want);
    }

    #[test]
    fn polyak_gap_shrinks_geometrically(
        tau in 0.001f64..1.0,
        online in prop::collection::vec(-5.0f64..5.0, 1..10),
        steps in 1i32..50,
    ) {
        let mut target = vec![0.0; online.len()];
        for _ in 0..steps {
            polyak_blend(&mut target, &online, tau);
        }
        for (t, o) in target.iter().zip(&online) {
            let want = o * (1.0 - (1.0 - tau).powi(steps));
            prop_assert!((t - want).abs() <= 1e-12 * (1.0 + o.abs()));
        }
    }

    #[test]
    fn clipped_double_q_never_exceeds_either_target(seed in 0u64..500, r in -1.0f64..1.0, gamma in 0.0f64..0.999) {
        let mut rng = RngStream::new(seed);
        let actor = Policy::Readout(ReadoutParams::init_uniform(2, 8, 5, &mut rng));
        let hyper = Td3Hyper { gamma, ..Td3Hyper::default() };
        let learner = Td3Learner::new(hyper, actor, 5e-4, 5, 8, &mut rng).unwrap();
        let u_next: Vec<f64> = (0..5).map(|_| rng.uniform(0.0, 1.0)).collect();
        let x_next: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let e = Experience {
            u: u_next.clone(), x: Some(x_next.clone()), a: vec![0.0, 0.0], r,
            u_next: u_next.clone(), x_next: Some(x_next.clone()), terminal: false,
        };
        let t = learner.critic_targets(&[&e], &mut rng).unwrap()[0];
        let a = learner.actor_target.action(Some(&x_next), &u_next).unwrap();
        let input: Vec<f64> = u_next.iter().chain(&a).copied().collect();
        let q: Vec<f64> = learner.critic_targets.iter().map(|c| c.output(&input).unwrap()[0]).collect();
        let bounds: Vec<f64> = q.iter().map(|qj| r + gamma * qj).collect();
        prop_assert!(bounds.iter().all(|b| t <= b + 1e-12));
        prop_assert!(bounds.iter().any(|b| (t - b).abs() <= 1e-12));
    }

    #[test]
    fn readout_actions_are_bounded(
        seed in 0u64..1000,
        gain in 0.0f64..3.0,
        x in prop::collection::vec(-1.0f64..=1.0, 16),
        u in prop::array::uniform5(0.0f64..=1.0),
    ) {
        let mut readout = ReadoutParams::init_uniform(2, 16, 5, &mut RngStream::new(seed));
        readout.weights.scale(gain);
        let a = readout.forward(&x, &u).unwrap();
        prop_assert!(a.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }

    #[test]
    fn adam_with_zero_rate_leaves_parameters(
        params in prop::collection::vec(-5.0f64..5.0, 1..20),
        scale in -10.0f64..10.0,
    ) {
        let grads: Vec<f64> = params.iter().map(|p| p * scale + 1.0).collect();
        let mut p = params.clone();
        let mut opt = AdamState::for_params(AdamConfig::with_lr(0.0), &p);
        for _ in 0..3 {
            opt.step(&mut p, &grads).unwrap();
        }
        prop_assert_eq!(p, params);
    }
}
