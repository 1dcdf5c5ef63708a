use super::ParamSet;

/// Gradients below this magnitude are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-6;

/// Compares analytic gradients with central finite differences.
///
/// `loss_fn` must return the loss and accumulate its gradient into the
/// parameter set's gradient slots. Returns the maximum relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn grad_check<F>(mut loss_fn: F, params: &mut ParamSet, eps: f64) -> f64
where
    F: FnMut(&mut ParamSet) -> f64,
{
    params.zero_grad();
    loss_fn(params);
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad.data().to_vec()).collect();

    let mut worst: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let orig = params.iter().nth(pi).expect("param").value.data()[k];
            set_entry(params, pi, k, orig + eps);
            params.zero_grad();
            let plus = loss_fn(params);
            set_entry(params, pi, k, orig - eps);
            params.zero_grad();
            let minus = loss_fn(params);
            set_entry(params, pi, k, orig);
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    params.zero_grad();
    worst
}

fn set_entry(params: &mut ParamSet, param_index: usize, k: usize, value: f64) {
    let p = params.iter_mut().nth(param_index).expect("param");
    p.value.data_mut()[k] = value;
}
