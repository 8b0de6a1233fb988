mod support;

use ehiv::{KernelFamily, KernelSpec};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use support::*;

fn ok(c: Check) -> std::result::Result<(), TestCaseError> {
    c.map_err(TestCaseError::fail)
}

#[test]
fn kernel_moments_vanish_below_the_order() {
    for family in [KernelFamily::GaussianOrder4, KernelFamily::EpanechnikovOrder4, KernelFamily::GaussianOrder6] {
        check_kernel_moments(&KernelSpec::new(family)).unwrap_or_else(|e| panic!("{family:?}: {e}"));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn kernels_are_symmetric(u in -4.0f64..4.0) {
        for family in [KernelFamily::GaussianOrder4, KernelFamily::EpanechnikovOrder4, KernelFamily::GaussianOrder6] {
            let k = KernelSpec::new(family);
            prop_assert_eq!(k.univariate(u), k.univariate(-u));
        }
    }

    #[test]
    fn scale_of_s_cancels(seed in 0u64..1000, c in 0.01f64..100.0) {
        ok(check_scale_cancellation(&sample(300, seed), c))?;
    }

    #[test]
    fn constant_s_collapses_to_iv(seed in 0u64..1000, c in 0.1f64..10.0) {
        ok(check_iv_collapse(&sample(300, seed), c))?;
    }

    #[test]
    fn outcome_affine_equivariance(seed in 0u64..1000, a in -5.0f64..5.0, b in prop_oneof![-3.0f64..-0.2, 0.2f64..3.0]) {
        ok(check_outcome_affine(&sample(300, seed), a, b))?;
    }

    #[test]
    fn covariate_shift_moves_the_intercept(seed in 0u64..1000, c in -10.0f64..10.0) {
        ok(check_covariate_shift(&sample(300, seed), c))?;
    }

    #[test]
    fn first_stage_follows_row_order(seed in 0u64..1000, shuffle in any::<u64>()) {
        let s = sample(200, seed);
        let mut order: Vec<usize> = (0..s.n()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(shuffle));
        ok(check_first_stage_permutation(&s, &order))?;
    }

    #[test]
    fn rmse_decomposes(est in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..60)) {
        ok(check_rmse_identity(&est, &[0.0, 1.0, 1.0]))?;
    }
}

#[test]
fn runs_are_deterministic() {
    check_determinism(7480).unwrap();
}
