mod common;

use common::*;

#[test]
fn relative_error_definition() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert_eq!(relative_error(1.0, 0.5), 0.5);
    assert_eq!(relative_error(-2.0, 2.0), 2.0);
    assert_eq!(relative_error(0.0, 1e-11), 1e-6);
}

#[test]
fn every_layer_kind_matches_finite_differences() {
    for (name, r, tol) in layer_kind_suite() {
        println!(
            "{name}: checked {} (kinks skipped {}), max rel {:.3e}",
            r.checked, r.kinks, r.max_rel
        );
        assert!(r.checked >= 5 * 200, "{name}: only {} checked", r.checked);
        assert!(
            r.max_rel < tol,
            "{name}: max relative error {:.3e} >= {tol:e}",
            r.max_rel
        );
    }
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]

    #[test]
    fn conv_dense_gradients_hold_for_any_seed(seed in proptest::prelude::any::<u64>()) {
        use sens_core::nn::{Activation, LayerSpec};
        let mut n = net(
            &[1, 4, 4],
            vec![conv(2, Activation::ReLU), POOL, LayerSpec::Flatten, dense(3, Activation::Sigmoid), dense(2, Activation::Softmax)],
            seed,
        );
        let (x, y) = batch_for(&n, 3, seed.rotate_left(7));
        let r = check(&mut n, &x, &y, 60, seed);
        proptest::prop_assert!(r.max_rel < 1e-4, "max rel {:e}", r.max_rel);
    }
}
