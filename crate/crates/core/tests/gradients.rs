mod common;

use common::gradcheck::{cw_errors, mlp_input_errors, mlp_parameter_errors, priornet_errors, TOL};

fn assert_all_below(errors: &[f64]) {
    for (trial, e) in errors.iter().enumerate() {
        assert!(*e < TOL, "trial {trial}: {e}");
    }
}

#[test]
fn mlp_parameter_gradient() {
    assert_all_below(&mlp_parameter_errors(41));
}

#[test]
fn mlp_input_gradient() {
    assert_all_below(&mlp_input_errors(42));
}

#[test]
fn priornet_loss_gradients() {
    let (e_in, e_out): (Vec<f64>, Vec<f64>) = priornet_errors(43).into_iter().unzip();
    assert_all_below(&e_in);
    assert_all_below(&e_out);
}

#[test]
fn cw_objective_gradient() {
    assert_all_below(&cw_errors(44));
}
