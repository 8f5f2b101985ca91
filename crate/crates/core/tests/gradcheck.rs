//! Reverse-mode gradients against central finite differences, one test per
//! op family plus the whole masked-LM loss of a tiny encoder.

#[path = "support/grad_ops.rs"]
mod grad_ops;

use grad_ops::{Case, END_TO_END_TOL, INSTANCES, TOL};

fn run(name: &str, case: Case) {
    let worst = grad_ops::worst(case);
    assert!(worst < TOL, "{name}: worst relative error {worst:e} over {INSTANCES} instances");
}

macro_rules! op_tests {
    ($($test:ident => $case:ident),* $(,)?) => {
        $(
            #[test]
            fn $test() {
                run(stringify!($case), grad_ops::$case);
            }
        )*
    };
}

op_tests! {
    grad_matmul => matmul,
    grad_batch_matmul => batch_matmul,
    grad_elementwise_binary => elementwise_binary,
    grad_add_bias => add_bias,
    grad_unary => unary,
    grad_clamp => clamp,
    grad_softmax_any_axis => softmax_any_axis,
    grad_attention_softmax => attention_softmax,
    grad_layer_norm => layer_norm,
    grad_cross_entropy => cross_entropy,
    grad_mse_sum_mean => mse_sum_mean,
    grad_reshape_permute => reshape_permute,
    grad_embedding_and_masked_mean => embedding_and_masked_mean,
    grad_concat_narrow => concat_narrow,
    grad_three_op_graph => three_op_graph,
}

#[test]
fn grad_mlm_loss_end_to_end() {
    let worst = (0..INSTANCES).map(grad_ops::mlm_end_to_end).fold(0.0, f64::max);
    assert!(worst < END_TO_END_TOL, "masked-LM loss: worst relative error {worst:e}");
}
