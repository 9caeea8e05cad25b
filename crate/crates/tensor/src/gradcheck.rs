//! Central finite-difference check of analytic gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::ParamSet;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over all entries of `|a - n| / max(1, |a|, |n|)`.
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences `(f(p + eps) - f(p - eps)) / 2 eps` for every parameter entry.
pub fn grad_check<F>(params: &ParamSet, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::with_params(params);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut g = Graph::with_params(ps);
        let loss = f(&mut g)?;
        g.value(loss)
            .item()
            .ok_or_else(|| TensorError::Contract("grad_check needs a scalar function".into()))
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        entries: 0,
    };
    for id in params.ids() {
        let n = params.get(id).len();
        for i in 0..n {
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.param(id).map_or(0.0, |g| g[i]);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.entries += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
