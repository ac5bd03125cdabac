use crate::autodiff::{Var, GRADCHECK_DENOM_FLOOR};
use crate::error::Result;

use super::{Graph, ParameterSet};

#[derive(Clone, Debug)]
pub struct ParamGradReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (path, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Central-difference check of `loss` with respect to the parameters at
/// `paths`, probing at most `max_entries` coordinates of each (spread evenly).
///
/// `loss` builds a fresh graph from the parameter set it is given and returns
/// the scalar loss; the parameters at `paths` must be trainable.
pub fn check_param_gradients<F>(
    params: &ParameterSet,
    paths: &[String],
    h: f64,
    max_entries: usize,
    loss: F,
) -> Result<ParamGradReport>
where
    F: Fn(&ParameterSet) -> Result<(Graph, Var)>,
{
    let (mut g, l) = loss(params)?;
    g.tape.backward(l)?;
    let grads = g.grads();
    let mut work = params.clone();
    let mut report = ParamGradReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let eval = |ps: &ParameterSet| -> Result<f64> {
        let (g, l) = loss(ps)?;
        Ok(g.tape.value(l).item())
    };
    for path in paths {
        let n = params.tensor(path)?.numel();
        let analytic = grads
            .get(path)
            .cloned()
            .unwrap_or_else(|| vec![0.0; n]);
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        for idx in (0..n).step_by(stride) {
            let orig = params.tensor(path)?.data()[idx];
            work.get_mut(path)?.tensor.data_mut()[idx] = orig + h;
            let up = eval(&work)?;
            work.get_mut(path)?.tensor.data_mut()[idx] = orig - h;
            let down = eval(&work)?;
            work.get_mut(path)?.tensor.data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_DENOM_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((path.clone(), idx, a, numeric));
            }
        }
    }
    Ok(report)
}
