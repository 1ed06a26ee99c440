mod common;

use lassr_core::losses::{discriminator_loss, generator_adv_loss};
use proptest::prelude::*;

#[test]
fn generator_gradients_match_finite_differences() {
    let gap = common::generator_gradient_gap(20, 4);
    assert!(gap < 1e-3, "worst relative gap {gap:e}");
}

proptest! {
    #[test]
    fn equal_logits_sit_at_two_log_two(v in -20.0f64..20.0, n in 1usize..16) {
        let logits = vec![v; n];
        let two_ln2 = 2.0 * std::f64::consts::LN_2;
        prop_assert!((discriminator_loss(&logits, &logits).unwrap() - two_ln2).abs() < 1e-9);
        prop_assert!((generator_adv_loss(&logits, &logits).unwrap() - two_ln2).abs() < 1e-9);
    }

    #[test]
    fn swapping_roles_swaps_losses(real in prop::collection::vec(-5.0f64..5.0, 4), fake in prop::collection::vec(-5.0f64..5.0, 4)) {
        let d = discriminator_loss(&real, &fake).unwrap();
        let g = generator_adv_loss(&fake, &real).unwrap();
        prop_assert!((d - g).abs() < 1e-12);
    }
}
