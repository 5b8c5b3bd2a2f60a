use std::f64::consts::PI;

use lfo_core::delay::{ChannelLabel, GaussianMixtureDelay};
use lfo_core::env::*;
use proptest::prelude::*;

fn quiet_kundur() -> EnvConfig {
    EnvConfig {
        fault: None,
        channel: GaussianMixtureDelay::zero(),
        ..EnvConfig::kundur()
    }
}

/// Literal reading of the piecewise action penalty, one branch per region.
fn literal_penalty_oracle(a: f64, u: f64, v: f64) -> f64 {
    if a < u {
        (a + u).abs()
    } else if a > v {
        (a - v).abs()
    } else {
        0.0
    }
}

#[test]
fn reset_is_deterministic() {
    let mut cfg = EnvConfig::kundur();
    cfg.pv.share = 0.3;
    let mut a = Environment::new(cfg.clone()).unwrap();
    let mut b = Environment::new(cfg).unwrap();
    assert_eq!(a.reset(7).unwrap(), b.reset(7).unwrap());
    for _ in 0..30 {
        let x = a.step(&[0.01, 0.0, -0.01, 0.0]).unwrap();
        let y = b.step(&[0.01, 0.0, -0.01, 0.0]).unwrap();
        assert_eq!(x, y);
    }
}

#[test]
fn reset_returns_equilibrium_observation() {
    let mut env = Environment::new(quiet_kundur()).unwrap();
    let obs = env.reset(3).unwrap();
    assert!(obs.valid);
    assert!(obs.speed_deviations.iter().all(|&d| d == 0.0));
    assert!(obs.speeds.iter().all(|&w| w == 1.0));
    assert_eq!(obs.bus_angles.len(), 2);
    assert_eq!(env.observation_dim(), 6);
}

#[test]
fn zero_share_keeps_base_dispatch() {
    let cfg = EnvConfig::kundur();
    let mut env = Environment::new(cfg.clone()).unwrap();
    env.reset(11).unwrap();
    assert_eq!(env.episode_case().unwrap(), &cfg.case);
    assert!(env.pv_output_mw().unwrap().iter().all(|&p| p == 0.0));
}

#[test]
fn half_share_covers_half_the_load() {
    let mut cfg = EnvConfig::kundur();
    cfg.pv.share = 0.5;
    let load: f64 = cfg.case.buses.iter().map(|b| b.p_load).sum();
    let mut env = Environment::new(cfg.clone()).unwrap();
    for seed in 0..10 {
        env.reset(seed).unwrap();
        let total: f64 = env.pv_output_mw().unwrap().iter().sum();
        let spread = cfg.pv.level_spread;
        assert!(
            total >= 0.5 * (1.0 - spread) * load - 1e-9
                && total <= 0.5 * (1.0 + spread) * load + 1e-9
        );
        let case = env.episode_case().unwrap();
        let netted: f64 = case.buses.iter().map(|b| b.p_load).sum();
        assert!((load - netted - total).abs() < 1e-9);
    }
}

#[test]
fn pv_share_too_large_is_infeasible() {
    let mut cfg = EnvConfig::kundur();
    cfg.pv.share = 0.95;
    cfg.pv.level_spread = 0.0;
    let mut env = Environment::new(cfg).unwrap();
    assert!(matches!(env.reset(0), Err(EnvError::InfeasiblePv(_))));
}

#[test]
fn speed_deviation_tracks_delivered_samples() {
    let mut env = Environment::new(EnvConfig {
        channel: GaussianMixtureDelay::zero(),
        ..EnvConfig::kundur()
    })
    .unwrap();
    let mut prev = env.reset(0).unwrap();
    for _ in 0..60 {
        let step = env.step(&[0.0; 4]).unwrap();
        let obs = step.observation;
        let truth = &env.state().unwrap().omega;
        assert_eq!(&obs.speeds, truth);
        for g in 0..4 {
            assert_eq!(
                obs.speed_deviations[g],
                (obs.speeds[g] - prev.speeds[g]).abs()
            );
        }
        prev = obs;
    }
    assert!(prev.speed_deviations.iter().any(|&d| d > 0.0));
}

#[test]
fn satellite_observation_is_not_valid_yet_at_0_4_s() {
    let mut cfg = EnvConfig::kundur();
    cfg.channel = GaussianMixtureDelay::preset(ChannelLabel::Satellite).unwrap();
    let mut env = Environment::new(cfg).unwrap();
    for seed in 0..5 {
        assert!(!env.reset(seed).unwrap().valid);
        for _ in 0..8 {
            let step = env.step(&[0.0; 4]).unwrap();
            if step.info.t <= 0.4 + 1e-12 {
                assert!(
                    !step.observation.valid,
                    "seed {seed} valid at {}",
                    step.info.t
                );
            }
        }
    }
}

#[test]
fn reward_is_zero_at_equilibrium_with_inbound_action() {
    let w = RewardWeights::default();
    let r = reward(
        &w,
        &[1.0; 4],
        &[0.0; 4],
        &[0.0],
        &[0.0, 0.1, -0.1, 0.2],
        false,
    );
    assert_eq!(r, 0.0);
}

#[test]
fn reward_worked_example() {
    let w = RewardWeights::default();
    let r = reward(
        &w,
        &[1.001, 0.999],
        &[0.0002, -0.0001],
        &[0.05, -0.02],
        &[0.25, -0.3],
        false,
    );
    let expected = -(10.0 * 0.002 + 50.0 * 0.0003 + 1.0 * 0.07 + 1.0 * (0.05 + 0.1));
    assert!((r - expected).abs() < 1e-12);
}

#[test]
fn out_of_bound_action_scores_lower() {
    let w = RewardWeights::default();
    let inside = reward(&w, &[1.0005; 4], &[0.0; 4], &[0.01], &[0.15; 4], false);
    let outside = reward(&w, &[1.0005; 4], &[0.0; 4], &[0.01], &[0.35; 4], false);
    assert!(outside < inside);
}

#[test]
fn corrected_penalty_regions() {
    assert_eq!(action_penalty(&[0.1, -0.2, 0.2], 0.2, -0.2, false), 0.0);
    assert!((action_penalty(&[0.5], 0.2, -0.2, false) - 0.3).abs() < 1e-15);
    assert!((action_penalty(&[-0.25], 0.2, -0.2, false) - 0.05).abs() < 1e-15);
}

#[test]
fn unfaulted_open_loop_earns_nothing() {
    let mut env = Environment::new(quiet_kundur()).unwrap();
    let r = rollout(&mut env, &mut ZeroController { dim: 4 }, 0, false).unwrap();
    assert!(!r.sync_lost);
    assert_eq!(r.rewards.len(), 400);
    assert!(
        r.rewards.iter().all(|&x| x <= 0.0 && x > -1e-4),
        "{:?}",
        r.rewards.iter().fold(0.0f64, |m, x| m.min(*x))
    );
}

#[test]
fn open_loop_fault_oscillates_but_holds() {
    let mut env = Environment::new(EnvConfig::kundur()).unwrap();
    let r = rollout(&mut env, &mut ZeroController { dim: 4 }, 0, true).unwrap();
    assert!(!r.sync_lost);
    let trace = r.trace.unwrap();
    let post: Vec<_> = trace
        .samples
        .iter()
        .filter(|s| s.t > 1.1 && s.t < 5.0)
        .collect();
    let peak = post
        .iter()
        .flat_map(|s| s.omega.iter())
        .fold(0.0f64, |m, w| m.max((w - 1.0).abs()));
    assert!(peak > 1e-3, "peak {peak}");
    assert!(r.total_reward < 0.0);
}

#[test]
fn long_fault_loses_synchronism_and_ends_the_episode() {
    let mut cfg = EnvConfig::kundur();
    cfg.fault = Some(FaultSpec {
        bus: 7,
        start_s: 1.0,
        duration_s: 0.5,
        admittance_pu: 1e4,
    });
    let mut env = Environment::new(cfg.clone()).unwrap();
    env.reset(0).unwrap();
    let mut last = None;
    for _ in 0..cfg.control_steps() {
        let s = env.step(&[0.0; 4]).unwrap();
        let done = s.done;
        last = Some(s);
        if done {
            break;
        }
    }
    let last = last.unwrap();
    assert!(last.info.sync_lost);
    assert!(last.done && last.info.t < cfg.horizon);
    assert_eq!(last.reward, -cfg.weights.sync_penalty);
    assert!(env.sync_lost());
    assert!(matches!(env.step(&[0.0; 4]), Err(EnvError::NotRunning)));
}

#[test]
fn synchronism_check_flips_at_threshold() {
    let mut env = Environment::new(quiet_kundur()).unwrap();
    env.reset(0).unwrap();
    let mut state = env.state().unwrap().clone();
    assert!(check_synchronism(&state, PI));
    state.delta[3] = state.delta[0] + PI + 0.01;
    assert!(!check_synchronism(&state, PI));
}

#[test]
fn horizon_ends_the_episode() {
    let mut cfg = quiet_kundur();
    cfg.horizon = 1.0;
    let mut env = Environment::new(cfg).unwrap();
    env.reset(0).unwrap();
    for k in 1..=20 {
        let s = env.step(&[0.0; 4]).unwrap();
        assert_eq!(s.done, k == 20);
    }
}

#[test]
fn malformed_actions_are_rejected() {
    let mut env = Environment::new(EnvConfig::kundur()).unwrap();
    assert!(matches!(env.step(&[0.0; 4]), Err(EnvError::NotRunning)));
    env.reset(0).unwrap();
    assert!(matches!(
        env.step(&[0.0; 3]),
        Err(EnvError::BadAction { .. })
    ));
    assert!(matches!(
        env.step(&[f64::NAN, 0.0, 0.0, 0.0]),
        Err(EnvError::BadAction { .. })
    ));
}

#[test]
fn config_rejects_fault_after_horizon() {
    let mut cfg = EnvConfig::kundur();
    cfg.horizon = 1.05;
    assert!(matches!(Environment::new(cfg), Err(EnvError::Config(_))));
}

#[test]
fn trace_csv_has_one_row_per_generator_sample() {
    let mut cfg = quiet_kundur();
    cfg.horizon = 0.5;
    let mut env = Environment::new(cfg).unwrap();
    let r = rollout(&mut env, &mut ZeroController { dim: 4 }, 0, true).unwrap();
    let trace = r.trace.unwrap();
    let mut out = Vec::new();
    trace.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("t,gen_id,delta_rad,omega_pu,eqp_pu,efd_pu,pe_pu,reward"));
    assert_eq!(lines.count(), trace.samples.len() * 4);
}

#[test]
fn ieee39_runs_with_stabilizers() {
    let mut env = Environment::new(EnvConfig {
        horizon: 3.0,
        ..EnvConfig::ieee39()
    })
    .unwrap();
    let r = rollout(&mut env, &mut ZeroController { dim: 1 }, 0, false).unwrap();
    assert!(!r.sync_lost);
    assert_eq!(env.action_dim(), 1);
}

proptest! {
    #[test]
    fn reward_never_positive(
        omega in prop::collection::vec(0.9f64..1.1, 4),
        change in prop::collection::vec(-0.01f64..0.01, 4),
        errors in prop::collection::vec(-PI..PI, 1),
        action in prop::collection::vec(-1.0f64..1.0, 4),
        literal in any::<bool>(),
    ) {
        prop_assert!(reward(&RewardWeights::default(), &omega, &change, &errors, &action, literal) <= 0.0);
    }

    #[test]
    fn literal_penalty_matches_branch_oracle(a in -1.0f64..1.0, u in 0.01f64..0.5, v in -0.5f64..-0.01) {
        let got = action_penalty(&[a], u, v, true);
        prop_assert_eq!(got, literal_penalty_oracle(a, u, v));
    }

    #[test]
    fn discounted_constant_stream_matches_geometric_sum(r in -10.0f64..0.0, gamma in 0.0f64..0.999, n in 0usize..200) {
        let got = discounted_return(&vec![r; n], gamma);
        let closed = if gamma == 0.0 { if n > 0 { r } else { 0.0 } } else { r * (1.0 - gamma.powi(n as i32)) / (1.0 - gamma) };
        prop_assert!((got - closed).abs() <= 1e-12 * (1.0 + closed.abs()));
    }

    #[test]
    fn wrapped_angle_in_half_open_interval(x in -100.0f64..100.0) {
        let y = wrap_angle(x);
        prop_assert!(y > -PI && y <= PI);
        let k = (x - y) / (2.0 * PI);
        prop_assert!((k - k.round()).abs() < 1e-9);
    }
}
