mod common;

use common::{analytic_grads, central_difference, grad_check, GRAD_H};

#[test]
fn every_parameter_matches_central_differences() {
    for seed in 0..10 {
        let r = grad_check(seed);
        assert!(r.checked > 6000);
        assert!(r.max_rel <= 1e-3, "seed {seed}: {} in {}", r.max_rel, r.worst_tensor);
    }
}

/// The element-wise worst case shrinks quadratically with the step, so the
/// residual at the pinned step is truncation error in the difference.
#[test]
fn worst_element_converges_as_step_shrinks() {
    for seed in 0..3 {
        let mut r = grad_check(seed);
        let (i, j, a, _) = r.worst_element;
        let coarse = (central_difference(&mut r.model, &r.rows, i, j, GRAD_H) - a).abs();
        let fine = (central_difference(&mut r.model, &r.rows, i, j, GRAD_H / 10.0) - a).abs();
        assert!(fine < coarse / 20.0, "seed {seed}: {coarse:e} -> {fine:e}");
    }
}

#[test]
fn unused_parameters_get_zero_gradient() {
    let r = grad_check(0);
    let grads = analytic_grads(&r.model, &r.rows);
    let pos = &grads[1];
    let d = r.model.config().d_model;
    let longest = r.rows.iter().map(|x| x.len() - 1).max().unwrap();
    assert!(pos[longest * d..].iter().all(|&g| g == 0.0));
}
