use super::{Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input, coordinate)` achieving the maximum.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn evaluate<F>(f: &F, point: &[Tensor<f64>], track: bool) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(track);
            tape.leaf(t)
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(TensorError::NotScalar(v.shape().to_vec()));
    }
    if !v.item().is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    Ok((tape, vars, out))
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences at `point`.
///
/// The per-coordinate error is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = evaluate(&f, point, true)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut probe: Vec<Tensor<f64>> = point.to_vec();
    for (ti, t) in point.iter().enumerate() {
        for c in 0..t.len() {
            let base = t.data()[c];
            probe[ti].data_mut()[c] = base + eps;
            let (tp, _, op) = evaluate(&f, &probe, false)?;
            let fp = tp.value(op).item();
            probe[ti].data_mut()[c] = base - eps;
            let (tm, _, om) = evaluate(&f, &probe, false)?;
            let fm = tm.value(om).item();
            probe[ti].data_mut()[c] = base;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ti].get(c).copied().unwrap_or(0.0);
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (ti, c);
            }
        }
    }
    Ok(report)
}
