//! Sparsity count, equivariance of pixelwise regressors and loss values.

mod common;

use nucleiseg::attention::attended_count;
use nucleiseg::regularizers::{smoothness_value, total_loss, AblationFlags, LossWeights};
use nucleiseg::scale::scale_loss;
use proptest::prelude::*;

#[test]
fn sparsity_count_over_100_maps() {
    common::sparsity_count_check(31, 100).unwrap();
}

proptest! {
    #[test]
    fn attended_count_matches_ceiling(eta in 1usize..100, hw in 1usize..5000) {
        let k = attended_count(eta as f64, hw);
        prop_assert!(k >= 1 && k <= hw);
        let exact = ((100 - eta) * hw).div_ceil(100);
        prop_assert_eq!(k, exact.clamp(1, hw.saturating_sub(1).max(1)));
    }
}

#[test]
fn pixelwise_stub_is_exactly_equivariant() {
    let worst = common::pixelwise_equivariance_worst(32);
    assert!(worst < 1e-10, "{worst}");
}

#[test]
fn uniform_scores_give_ln3() {
    for label in 0..3 {
        let v = scale_loss(&[0.7, 0.7, 0.7], label).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-6);
    }
}

#[test]
fn checkerboard_smoothness_is_four() {
    let map = [0.0f64, 1.0, 1.0, 0.0];
    assert!((smoothness_value(&map, 2, 2).unwrap() - 4.0).abs() < 1e-9);
}

proptest! {
    #[test]
    fn total_is_weighted_sum_of_enabled_terms(
        scale in 0.0f64..5.0, smooth in 0.0f64..2.0, equiv in 0.0f64..1.0,
        s_on in any::<bool>(), e_on in any::<bool>(), ws in 0.0f64..3.0, we in 0.0f64..3.0,
    ) {
        let flags = AblationFlags { smooth_on: s_on, equiv_on: e_on, sparse_on: true };
        let b = total_loss(scale, smooth, equiv, flags, LossWeights { smooth: ws, equiv: we }).unwrap();
        let expect = scale + if s_on { ws * smooth } else { 0.0 } + if e_on { we * equiv } else { 0.0 };
        prop_assert!((b.total - expect).abs() < 1e-12);
    }
}

#[test]
fn non_finite_loss_is_a_training_fault() {
    let e = total_loss(f64::NAN, 0.0, 0.0, AblationFlags::default(), LossWeights::default());
    assert!(matches!(e, Err(nucleiseg::Error::TrainingFault { .. })));
}
