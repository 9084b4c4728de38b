use super::dense::ParamSet;
use super::graph::{Graph, Var};
use crate::error::Result;

/// Gradients smaller than this are compared on an absolute scale: an exactly
/// zero gradient can only be matched by finite differences to within their
/// rounding noise.
pub const GRAD_FLOOR: f64 = 1e-5;

/// Worst coordinate found by a finite-difference comparison.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    /// Largest `|g_ad - g_fd| / max(|g_ad|, |g_fd|, GRAD_FLOOR)`.
    pub max_rel_err: f64,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares autodiff gradients of a scalar-valued graph builder against
/// central finite differences over every parameter coordinate.
pub fn finite_diff_check<F>(params: &ParamSet, eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    finite_diff_check_sampled(params, eps, usize::MAX, f)
}

/// Like [`finite_diff_check`] but probes at most `per_tensor` evenly spaced
/// coordinates of each parameter tensor.
pub fn finite_diff_check_sampled<F>(
    params: &ParamSet,
    eps: f64,
    per_tensor: usize,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let ad = g.backward(loss)?.for_params(params);

    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, ps)?;
        Ok(g.scalar(l))
    };

    let mut work = params.clone();
    let mut worst = GradCheck::default();
    for id in params.ids() {
        let n = params.get(id).len();
        let step = n.div_ceil(per_tensor.min(n).max(1));
        for k in (0..n).step_by(step.max(1)) {
            let orig = params.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;

            let fd = (up - down) / (2.0 * eps);
            let a = ad[id.index()].data()[k];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_FLOOR);
            if err > worst.max_rel_err {
                worst = GradCheck {
                    max_rel_err: err,
                    param: params.name(id).to_string(),
                    index: k,
                    analytic: a,
                    numeric: fd,
                };
            }
        }
    }
    Ok(worst)
}
