use proptest::prelude::*;

use privcloud::privacy::{
    calibrate, kappa, q_function, q_inverse, NoiseChannel, NoiseDistribution, NoiseSet,
    PrivacyPolicy, SensitivityBundle,
};
use privcloud::problem::build_reference_problem;
use privcloud::Norm;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn q_round_trip(log_delta in -12.0f64..-0.31) {
        let d = 10f64.powf(log_delta);
        let y = q_inverse(d).unwrap();
        prop_assert!((q_function(y) - d).abs() <= 1e-12);
    }

    #[test]
    fn q_is_decreasing(a in -8.0f64..8.0, h in 1e-3f64..2.0) {
        prop_assert!(q_function(a + h) < q_function(a));
    }

    #[test]
    fn kappa_decreases_in_epsilon(d in 1e-6f64..0.4, e in 0.05f64..3.0, h in 0.01f64..1.0) {
        prop_assert!(kappa(d, e + h).unwrap() < kappa(d, e).unwrap());
    }

    #[test]
    fn laplace_scale_is_sensitivity_over_epsilon(eps in 0.01f64..5.0, b in 0.1f64..10.0) {
        let policy = PrivacyPolicy::laplace(eps, b).unwrap();
        let sens = SensitivityBundle::new(Norm::L1, 3.0 * b, vec![2.0 * b, b]).unwrap();
        let set = calibrate(&policy, &sens, 4, &[2, 3]).unwrap();
        let scales: Vec<f64> = set.blocks.iter().map(|c| match c.distribution {
            NoiseDistribution::Laplace { scale } => scale,
            NoiseDistribution::Normal { .. } => f64::NAN,
        }).collect();
        prop_assert!((scales[0] - 2.0 * b / eps).abs() <= 1e-12 * scales[0]);
        prop_assert!((scales[1] - b / eps).abs() <= 1e-12 * scales[1]);
        prop_assert_eq!(set.blocks[1].rows * set.blocks[1].cols, 4 * 3);
    }

    #[test]
    fn draws_are_a_pure_function_of_seed_stream_and_k(seed in any::<u64>(), k in 1u64..1_000_000) {
        let ch = NoiseChannel {
            distribution: NoiseDistribution::Laplace { scale: 2.0 },
            rows: 3,
            cols: 2,
            stream: 4,
        };
        prop_assert_eq!(ch.draw(seed, k), ch.draw(seed, k));
        prop_assert_ne!(ch.draw(seed, k), ch.draw(seed, k + 1));
    }
}

#[test]
fn zero_scale_channels_draw_exact_zeros() {
    let ch = NoiseChannel {
        distribution: NoiseDistribution::Normal { std_dev: 0.0 },
        rows: 4,
        cols: 5,
        stream: 0,
    };
    assert!(ch.draw(9, 3).iter().all(|v| v.to_bits() == 0));
}

#[test]
fn streams_of_the_reference_problem_are_distinct() {
    let spec = build_reference_problem();
    let set = NoiseSet::for_problem(&spec, &PrivacyPolicy::laplace(1.0, 1.0).unwrap()).unwrap();
    let mut streams: Vec<u64> = set.blocks.iter().map(|c| c.stream).collect();
    streams.push(set.g.as_ref().unwrap().stream);
    let n = streams.len();
    streams.sort();
    streams.dedup();
    assert_eq!(streams.len(), n);
}

#[test]
fn gaussian_variance_scales_with_kappa_squared() {
    let spec = build_reference_problem();
    let (eps, delta) = (0.5, 1e-3);
    let set = NoiseSet::for_problem(&spec, &PrivacyPolicy::gaussian(eps, delta, 1.0).unwrap()).unwrap();
    let k = kappa(delta, eps).unwrap();
    // narrow blocks have 2-norm sensitivity 2
    let want = (2.0 * k).powi(2);
    assert!((set.blocks[1].distribution.variance() - want).abs() <= 1e-10 * want);
}
