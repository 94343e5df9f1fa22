use std::sync::Arc;

use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;

use beamtwin::agent::epsilon_schedule;
use beamtwin::detect::{cfar_threshold, detection_probability, glrt_statistic, DetectionSetup, GlrtInputs};
use beamtwin::env::{apply_action, collect_random, feedback_flag, read_transitions, run_episode, write_transitions, Action, BeamEnv, InteractionAudit, RealEnv, RewardParams};
use beamtwin::harness::{logged_audit, mean_ci, split_episodes};
use beamtwin::nn::{sinusoidal_embedding, variant_sigmoid};
use beamtwin::scenario::{Codebook, Scenario, ScenarioConfig, SimRng};
use beamtwin::special::{chi2_ccdf, chi2_ccdf_inverse};
use beamtwin::twin::{kl_divergence, mmd, wasserstein1};

fn rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

fn env_with(config: ScenarioConfig) -> RealEnv {
    RealEnv::new(Scenario::new(config).unwrap(), InteractionAudit::shared()).unwrap()
}

fn complex_vec(parts: &[(f64, f64)]) -> Vec<Complex64> {
    parts.iter().map(|&(re, im)| Complex64::new(re, im)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cfar_threshold_round_trips(log_p in -6.0f64..-0.3, n in 1usize..=8) {
        let p = 10f64.powf(log_p);
        let x = chi2_ccdf_inverse(p, 2 * n as u32).unwrap();
        prop_assert!((chi2_ccdf(x, 2 * n as u32).unwrap() - p).abs() <= 1e-9 * p.max(1e-3));
    }

    #[test]
    fn detection_probability_is_monotone(
        nc in prop::collection::vec(0.0f64..60.0, 1..=4),
        bump in 0.0f64..10.0,
        which in 0usize..4,
        log_p in -4.0f64..-1.0,
    ) {
        let n = nc.len();
        let p_fa = 10f64.powf(log_p);
        let base = DetectionSetup::new(p_fa, 1.0, nc.clone()).unwrap();
        let pd = detection_probability(&base, n).unwrap();
        prop_assert!(pd >= p_fa - 1e-10 && pd <= 1.0 + 1e-12);
        let mut more = nc.clone();
        more[which % n] += bump;
        let pd_more = detection_probability(&DetectionSetup::new(p_fa, 1.0, more).unwrap(), n).unwrap();
        prop_assert!(pd_more >= pd - 1e-10);
        let stricter = DetectionSetup::with_threshold(base.threshold * 1.2, p_fa, 1.0, nc).unwrap();
        prop_assert!(detection_probability(&stricter, n).unwrap() <= pd + 1e-10);
    }

    #[test]
    fn glrt_statistic_is_scale_invariant_in_eta(
        y in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 8),
        eta in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 8),
        c in (0.1f64..10.0, -10.0f64..10.0),
    ) {
        prop_assume!(eta.iter().map(|(a, b)| a * a + b * b).sum::<f64>() > 1e-3);
        let y = complex_vec(&y);
        let eta = complex_vec(&eta);
        let c = Complex64::new(c.0, c.1);
        let scaled: Vec<Complex64> = eta.iter().map(|e| e * c).collect();
        let a = glrt_statistic(&GlrtInputs::new(vec![y.clone()], vec![eta]).unwrap(), 0.7).unwrap();
        let b = glrt_statistic(&GlrtInputs::new(vec![y], vec![scaled]).unwrap(), 0.7).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn codebook_gain_is_bounded(sine in -1.0f64..1.0, beam in 0usize..64) {
        let cb = Codebook::dft(64);
        let g = cb.gain(beam, sine).unwrap();
        prop_assert!((0.0..=64.0 + 1e-9).contains(&g));
    }

    #[test]
    fn actions_stay_inside_codebook(beam in 0usize..64, delta in -5i32..=5) {
        prop_assume!(delta != 0);
        let next = apply_action(beam, delta, 64).unwrap();
        prop_assert!(next < 64);
        prop_assert_eq!(next as i64, (beam as i64 + i64::from(delta)).clamp(0, 63));
    }

    #[test]
    fn feedback_flag_is_a_sign(pd in 0.0f64..1.0, pd_next in 0.0f64..1.0, delta in -5i32..=5) {
        let f = feedback_flag(pd, pd_next, delta);
        prop_assert!((-1..=1).contains(&f));
        prop_assert_eq!(feedback_flag(pd, pd, delta), 0);
    }

    #[test]
    fn epsilon_schedule_decays(start in 0.0f64..1.0, e in 0usize..2000, total in 1usize..2000) {
        let a = epsilon_schedule(start, e, total);
        let b = epsilon_schedule(start, e + 1, total);
        prop_assert!((0.0..=start).contains(&a));
        prop_assert!(b <= a);
    }

    #[test]
    fn embeddings_are_bounded(index in 0usize..64, x in -5.0f64..5.0, y in -5.0f64..5.0) {
        let v = sinusoidal_embedding(index, 16).unwrap();
        prop_assert!(v.iter().all(|c| c.abs() <= 1.0));
        let (a, b) = (variant_sigmoid(x.min(y), 5.0), variant_sigmoid(x.max(y), 5.0));
        prop_assert!((0.0..=1.0).contains(&a) && a <= b);
    }

    #[test]
    fn distribution_metrics_are_nonnegative(
        a in prop::collection::vec(0.0f64..1.0, 2..60),
        b in prop::collection::vec(0.0f64..1.0, 2..60),
    ) {
        prop_assert!(kl_divergence(&a, &b).unwrap() >= 0.0);
        let w = wasserstein1(&a, &b).unwrap();
        prop_assert!(w >= 0.0);
        prop_assert!((w - wasserstein1(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(mmd(&a, &b).unwrap().value >= 0.0);
    }

    #[test]
    fn interval_contains_mean(xs in prop::collection::vec(-100.0f64..100.0, 1..50)) {
        let m = mean_ci(&xs);
        prop_assert!(m.ci_low <= m.mean && m.mean <= m.ci_high);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn episode_return_counts_steps(seed in any::<u64>(), power in 10.0f64..30.0) {
        let mut env = env_with(ScenarioConfig { tx_power_dbmw: power, ..ScenarioConfig::default() });
        let params = RewardParams::default();
        let mut r = rng(seed);
        let ep = run_episode(&mut env, &mut r, |_, r| Ok(Action::random(5, r))).unwrap();
        let expected = if ep.success { -(ep.steps as f64 - 1.0) + params.success_bonus } else { -(params.max_steps as f64) };
        prop_assert!((ep.base_return - expected).abs() < 1e-12);
        prop_assert!(ep.steps <= params.max_steps);
    }

    #[test]
    fn audit_matches_logged_transitions(seed in any::<u64>(), episodes in 1usize..6) {
        let audit = InteractionAudit::shared();
        let mut env = RealEnv::new(Scenario::new(ScenarioConfig::default()).unwrap(), Arc::clone(&audit)).unwrap();
        let data = collect_random(&mut env, episodes, &mut rng(seed)).unwrap();
        let counts = audit.counts();
        prop_assert_eq!(counts.real_env_calls + counts.twin_calls, counts.total_transitions());
        prop_assert_eq!(counts.real_env_calls, data.len() as u64);
        prop_assert_eq!(counts.real_resets, episodes as u64);
        prop_assert_eq!(logged_audit(&data), counts);
        prop_assert_eq!(split_episodes(&data).len(), episodes);
    }

    #[test]
    fn identical_seeds_give_identical_episodes(seed in any::<u64>()) {
        let cfg = ScenarioConfig { target_speed_mps: 8.0, ..ScenarioConfig::default() };
        let a = collect_random(&mut env_with(cfg.clone()), 2, &mut rng(seed)).unwrap();
        let b = collect_random(&mut env_with(cfg), 2, &mut rng(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn transition_csv_round_trips(seed in any::<u64>()) {
        let data = collect_random(&mut env_with(ScenarioConfig::default()), 2, &mut rng(seed)).unwrap();
        let mut buf = Vec::new();
        write_transitions(&mut buf, &data).unwrap();
        let back = read_transitions(buf.as_slice(), 5).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn resets_start_inside_codebook(seed in any::<u64>()) {
        let mut env = env_with(ScenarioConfig::default());
        let s = env.reset(&mut rng(seed)).unwrap();
        prop_assert!(s.beam < 64 && s.feedback == 0 && (0.0..=1.0).contains(&s.pd));
    }
}

#[test]
fn cfar_closure_on_the_listed_grid() {
    for n in [1usize, 2, 4] {
        for p in [1e-1, 1e-2, 1e-3, 1e-4] {
            let x = cfar_threshold(p, n).unwrap();
            assert!((chi2_ccdf(x, 2 * n as u32).unwrap() - p).abs() <= 1e-9, "n={n} p={p}");
        }
    }
}
