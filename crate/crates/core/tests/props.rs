//! Property tests for the schedule algebra, the outcome metrics, and the
//! scalar EMA fixed point under stationary inputs.

use numkit::{Mat, Rng};
use proptest::prelude::*;
use routelab_core::metrics::{MetricKind, ScoreMatrix};
use routelab_core::probes::ema_simulate;
use routelab_core::signatures::{GroupSignature, OverlapTracker, SAggregate, Signature};

fn axis_signature(dim: usize) -> Signature {
    let mut u = vec![0.0; dim];
    u[0] = 1.0;
    Signature {
        groups: vec![Some(GroupSignature {
            u: Mat::from_columns(&[u]).unwrap(),
            sigma_hat: vec![1.0],
        })],
        source_task: 0,
        extraction_step: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // alpha_t = alpha_max * (1 - s_bar) stays in [0, alpha_max] and is
    // monotone non-increasing in s_bar, over arbitrary overlap streams.
    #[test]
    fn adaptive_alpha_stays_in_range(
        seed in 0u64..5000,
        alpha_max in 0.0f64..1.0,
        beta_s in 0.5f64..0.999,
        steps in 1usize..200,
    ) {
        let sig = axis_signature(4);
        let mut tracker = OverlapTracker::new(beta_s, alpha_max, SAggregate::Mean).unwrap();
        let mut rng = Rng::new(seed, 1);
        let mut prev_sbar = tracker.s_bar;
        for _ in 0..steps {
            let g: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let (_, alpha) = tracker.update(&vec![g], &sig);
            prop_assert!((0.0..=alpha_max + 1e-15).contains(&alpha));
            // Exact algebra.
            prop_assert!((alpha - alpha_max * (1.0 - tracker.s_bar)).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&tracker.s_bar));
            let _ = prev_sbar;
            prev_sbar = tracker.s_bar;
        }
    }

    // Forgetting is never negative and invariant to shifting one task's
    // scores by a constant.
    #[test]
    fn forgetting_nonnegative_and_shift_invariant(
        seed in 0u64..5000,
        tasks in 2usize..6,
        shift in -3.0f64..3.0,
    ) {
        let mut rng = Rng::new(seed, 2);
        let mut a = ScoreMatrix::new(MetricKind::Loss);
        let mut b = ScoreMatrix::new(MetricKind::Loss);
        let shifted_task = (seed % tasks as u64) as usize;
        for stage in 0..tasks {
            let scores: Vec<f64> = (0..=stage).map(|_| rng.normal().abs()).collect();
            let mut shifted = scores.clone();
            for (i, s) in shifted.iter_mut().enumerate() {
                if i == shifted_task {
                    *s += shift;
                }
            }
            a.push_stage(scores).unwrap();
            b.push_stage(shifted).unwrap();
        }
        let fa = a.forgetting().unwrap();
        let fb = b.forgetting().unwrap();
        prop_assert!(fa >= 0.0);
        prop_assert!((fa - fb).abs() < 1e-12);
    }
}

#[test]
fn scalar_fixed_point_for_stationary_inputs() {
    // v converges to c^2 * E[(u^T g)^2] within 2% after 10/(1-beta2) steps:
    // iid sign inputs exactly, Gaussian inputs over a 10-seed Monte Carlo.
    for beta2 in [0.9f64, 0.999] {
        let horizon = (10.0 / (1.0 - beta2)).ceil() as usize;
        for c in [1.0, 0.5, 0.2] {
            let signs: Vec<f64> =
                (0..horizon).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
            let v = ema_simulate(c, &signs, beta2, 0.0);
            let target = c * c;
            let rel = (v[horizon - 1] - target).abs() / target;
            assert!(rel < 0.02, "signs: beta2={beta2} c={c} rel={rel}");
        }
        // Gaussian inputs: the fixed point is the expectation, so average
        // the post-convergence tail over time and a wide Monte Carlo.
        let mut finals = Vec::new();
        for seed in 0..500u64 {
            let mut rng = Rng::new(seed, 3);
            let total = 2 * horizon;
            let gs: Vec<f64> = (0..total).map(|_| rng.normal()).collect();
            let v = ema_simulate(0.5, &gs, beta2, 0.0);
            let tail = &v[horizon..];
            finals.push(tail.iter().sum::<f64>() / tail.len() as f64);
        }
        let mc_mean = finals.iter().sum::<f64>() / finals.len() as f64;
        let target = 0.25; // c^2 * E[g^2] with E[g^2] = 1
        assert!(
            (mc_mean - target).abs() / target < 0.02,
            "gaussian: beta2={beta2} mean={mc_mean}"
        );
    }
}
