use super::{Tape, Tensor, TensorError, Var};

/// Denominator floor for the relative error so that near-zero gradients are
/// compared on an absolute scale.
pub const GRADCHECK_DENOM_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (input, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares tape gradients against central finite differences with step `h`.
///
/// `f` receives a fresh tape and one leaf per input and must return a scalar.
/// At most `max_entries` coordinates per input are probed (spread evenly).
pub fn check_gradients<F>(
    inputs: &[Tensor],
    h: f64,
    max_entries: usize,
    f: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, v) in vars.iter().enumerate() {
        let n = inputs[which].numel();
        let analytic = tape.grad(*v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; n]);
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        for idx in (0..n).step_by(stride) {
            let orig = work[which].data()[idx];
            work[which].data_mut()[idx] = orig + h;
            let up = eval(&work)?;
            work[which].data_mut()[idx] = orig - h;
            let down = eval(&work)?;
            work[which].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[idx];
            let denom = a.abs().max(numeric.abs()).max(GRADCHECK_DENOM_FLOOR);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((which, idx, a, numeric));
            }
        }
    }
    Ok(report)
}
