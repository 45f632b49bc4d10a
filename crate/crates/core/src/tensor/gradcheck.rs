//! Central-difference verification of recorded adjoints.

use super::{Graph, Tensor, TensorError, Var};

/// Multiple of `eps * |f| / h` treated as unresolvable by the central
/// difference; the loss is a long sum, so its rounding error exceeds one ulp.
pub const ROUNDOFF_FACTOR: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Same maximum without the rounding allowance.
    pub max_raw_relative_error: f64,
    /// `(input, component)` where the maximum was attained.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// `(analytic, numeric)` per checked component, in order.
    pub pairs: Vec<(f64, f64)>,
}

fn eval<Fun>(f: &Fun, inputs: &[Tensor<f64>], track: bool) -> Result<(Graph<f64>, Vec<Var>, Var), TensorError>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(&t.clone().with_requires_grad(track)))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut g, &vars)?;
    Ok((g, vars, out))
}

/// Checks `d f / d x` for a single-input function; returns the maximum
/// relative error over all components.
pub fn grad_check<Fun>(f: Fun, x: &Tensor<f64>, step: f64) -> Result<f64, TensorError>
where
    Fun: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let report = grad_check_inputs(|g, v| f(g, v[0]), std::slice::from_ref(x), step, None)?;
    Ok(report.max_relative_error)
}

/// Multi-input variant. `selection` restricts the check to the listed
/// `(input, component)` pairs; `None` checks every component of every input.
///
/// Relative error per component is
/// `max(0, |analytic - numeric| - r) / max(|analytic|, |numeric|, 1e-8)`,
/// where `r = ROUNDOFF_FACTOR * eps * max(|f(x+h)|, |f(x-h)|) / h` bounds
/// the rounding error of the central difference itself.
pub fn grad_check_inputs<Fun>(f: Fun, inputs: &[Tensor<f64>], step: f64, selection: Option<&[(usize, usize)]>) -> Result<GradCheckReport, TensorError>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            msg: format!("step must be positive and finite, got {step}"),
        });
    }
    let (mut g, vars, out) = eval(&f, inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|o| o.map(<[f64]>::to_vec).unwrap_or_default()))
        .collect::<Result<_, _>>()?;
    drop(g);

    let all: Vec<(usize, usize)>;
    let picks = match selection {
        Some(s) => s,
        None => {
            all = inputs.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j))).collect();
            &all
        }
    };

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_raw_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        pairs: Vec::with_capacity(picks.len()),
    };
    for &(i, j) in picks {
        if i >= work.len() || j >= work[i].numel() {
            return Err(TensorError::InvalidArgument {
                op: "grad_check",
                msg: format!("selection ({i}, {j}) out of range"),
            });
        }
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + step;
        let (gp, _, op) = eval(&f, &work, false)?;
        let plus = gp.item(op)?;
        work[i].data_mut()[j] = orig - step;
        let (gm, _, om) = eval(&f, &work, false)?;
        let minus = gm.item(om)?;
        work[i].data_mut()[j] = orig;

        let numeric = (plus - minus) / (2.0 * step);
        let roundoff = ROUNDOFF_FACTOR * f64::EPSILON * plus.abs().max(minus.abs()) / step;
        let a = analytic[i].get(j).copied().unwrap_or(0.0);
        let scale = a.abs().max(numeric.abs()).max(1e-8);
        let rel = ((a - numeric).abs() - roundoff).max(0.0) / scale;
        report.max_raw_relative_error = report.max_raw_relative_error.max((a - numeric).abs() / scale);
        if !rel.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        if rel > report.max_relative_error || report.checked == 0 {
            report.max_relative_error = rel.max(report.max_relative_error);
            report.worst = (i, j);
            report.analytic = a;
            report.numeric = numeric;
        }
        report.pairs.push((a, numeric));
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_exact_under_central_differences() {
        let x = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let s = g.mul(v, v)?;
                g.sum(s)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn detects_a_wrong_adjoint() {
        // abs() has a zero adjoint at 0 while the central difference is 0 too,
        // but away from zero a mismatch would show; use a kink to prove the
        // checker reports large errors when the derivative is ill-defined
        let x = Tensor::from_vec(&[1], vec![0.0005]).unwrap();
        let err = grad_check(
            |g, v| {
                let a = g.abs(v)?;
                g.sum(a)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err > 0.1, "{err}");
    }

    #[test]
    fn reports_offending_operator_for_non_finite_values() {
        let x = Tensor::from_vec(&[1], vec![1e300]).unwrap();
        let err = grad_check(
            |g, v| {
                let s = g.mul(v, v)?;
                g.sum(s)
            },
            &x,
            1e-3,
        )
        .unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "mul" });
    }
}
