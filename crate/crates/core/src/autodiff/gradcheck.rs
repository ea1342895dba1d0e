//! Central finite-difference checks against the tape's reverse-mode
//! gradients. Used by unit tests here and by downstream acceptance tests.

use super::{Graph, Var};
use crate::params::ParamStore;

/// Relative error with an absolute floor for near-zero gradients.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
}

/// Compares reverse-mode parameter gradients of the scalar built by `loss`
/// with central differences of step `h`. Every scalar of every parameter
/// is checked, except that tensors larger than `max_per_tensor` are
/// sampled on a regular stride.
pub fn check_params<L>(store: &ParamStore<f64>, loss: L, h: f64, floor: f64, max_per_tensor: usize) -> GradCheckReport
where
    L: Fn(&mut Graph<f64>) -> Var,
{
    let grads = {
        let mut g = Graph::eval(store);
        let out = loss(&mut g);
        let back = g.backward(out);
        g.param_grads(&back)
    };

    let mut work = store.clone();
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::eval(s);
        let out = loss(&mut g);
        g.scalar(out)
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
    };
    for id in store.ids() {
        let n = store.value(id).len();
        let stride = n.div_ceil(max_per_tensor.max(1)).max(1);
        for flat in (0..n).step_by(stride) {
            let orig = store.value(id).as_slice().expect("contiguous")[flat];
            work.value_mut(id).as_slice_mut().expect("contiguous")[flat] = orig + h;
            let plus = eval(&work);
            work.value_mut(id).as_slice_mut().expect("contiguous")[flat] = orig - h;
            let minus = eval(&work);
            work.value_mut(id).as_slice_mut().expect("contiguous")[flat] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.grads[id.index()].as_slice().expect("contiguous")[flat];
            let err = relative_error(analytic, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{}[{flat}]", store.get(id).name);
            }
        }
    }
    report
}
