//! Property tests for the algebra the reparameterization relies on.

use proptest::prelude::*;

use repavit::model::{forward_ffn_idle_infer, IdleFfnTrain};
use repavit::reparam::{fold_batchnorm, reparameterize_ffn};
use repavit::tensor::{
    add_bias, batchnorm_eval, concat_cols, matmul, rel_frobenius_diff, slice_cols,
    BatchNormParams, Matrix2D,
};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix2D<f64>> {
    proptest::collection::vec(-2.0..2.0f64, rows * cols)
        .prop_map(move |v| Matrix2D::from_vec(rows, cols, v).unwrap())
}

fn frozen_bn(channels: usize) -> impl Strategy<Value = BatchNormParams<f64>> {
    (
        proptest::collection::vec(0.2..2.0f64, channels),
        proptest::collection::vec(-1.0..1.0f64, channels),
        proptest::collection::vec(-1.0..1.0f64, channels),
        proptest::collection::vec(0.1..10.0f64, channels),
    )
        .prop_map(|(gamma, beta, running_mean, running_var)| BatchNormParams {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            frozen: true,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn slice_concat_is_identity(
        x in (1usize..6, 2usize..12).prop_flat_map(|(r, c)| matrix(r, c)),
        split_frac in 0.0..1.0f64,
    ) {
        let k = ((x.cols() as f64 * split_frac) as usize).min(x.cols() - 1).max(1);
        let a = slice_cols(&x, 0, k).unwrap();
        let b = slice_cols(&x, k, x.cols()).unwrap();
        prop_assert_eq!(concat_cols(&a, &b).unwrap(), x);
    }

    #[test]
    fn bn_fold_is_exact(
        (bn, w, b, x) in (2usize..8, 1usize..6).prop_flat_map(|(c, out)| {
            (
                frozen_bn(c),
                matrix(c, out),
                proptest::collection::vec(-1.0..1.0f64, out),
                matrix(3, c),
            )
        }),
    ) {
        let folded = fold_batchnorm(&bn, &w, &b).unwrap();
        let via_bn = add_bias(&matmul(&batchnorm_eval(&x, &bn).unwrap(), &w).unwrap(), &b).unwrap();
        let via_fold = add_bias(&matmul(&x, &folded.weight).unwrap(), &folded.bias).unwrap();
        prop_assert!(rel_frobenius_diff(&via_bn, &via_fold) <= 1e-12);
    }

    #[test]
    fn reparameterized_layer_is_equivalent(
        (layer, x) in (2usize..8, 2usize..4, 0.0..=1.0f64).prop_flat_map(|(c, rho, theta)| {
            let hidden = rho * c;
            let active = ((1.0 - theta) * hidden as f64).round() as usize;
            (
                (
                    frozen_bn(c),
                    matrix(c, hidden),
                    proptest::collection::vec(-1.0..1.0f64, hidden),
                    frozen_bn(hidden),
                    matrix(hidden, c),
                    proptest::collection::vec(-1.0..1.0f64, c),
                )
                    .prop_map(move |(bn1, w_in, b_in, bn2, w_out, b_out)| IdleFfnTrain {
                        bn1,
                        w_in,
                        b_in,
                        bn2,
                        w_out,
                        b_out,
                        active,
                    }),
                matrix(4, c),
            )
        }),
    ) {
        let (infer, report) = reparameterize_ffn(&layer).unwrap();
        let pre = layer.forward_eval(&x, false).unwrap();
        let post = forward_ffn_idle_infer(&infer, &x, false).unwrap();
        prop_assert!(rel_frobenius_diff(&pre, &post) <= 1e-12);
        // weight ratio never exceeds the theta = 0 inflation bound
        prop_assert!(report.reduction_ratio_measured > 0.0);
        prop_assert!(report.reduction_ratio_measured <= 1.0 + 1.0 / (2.0 * 2.0) + 1e-12);
    }
}
