use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for relative errors; gradients smaller than this are
/// compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn new(analytic: Vec<f64>, numeric: Vec<f64>, tol: f64) -> Self {
        let rel_errors: Vec<f64> = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| relative_error(*a, *n))
            .collect();
        let max_rel_error = rel_errors.iter().cloned().fold(0.0, f64::max);
        GradCheckReport {
            analytic,
            numeric,
            rel_errors,
            max_rel_error,
            tol,
            passed: max_rel_error < tol,
        }
    }
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` at `indices`
/// (all entries when `None`).
pub fn finite_difference(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
    indices: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut probe = x.clone();
    idx.iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let plus = f(&probe)?;
            probe.data_mut()[i] = orig - h;
            let minus = f(&probe)?;
            probe.data_mut()[i] = orig;
            Ok((plus - minus) / (2.0 * h))
        })
        .collect()
}

/// Compares the tape gradient of a scalar function of `x` against central
/// differences.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Var) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::invalid(
            "grad_check",
            format!("step {h} outside [1e-6, 1e-4]"),
        ));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::inference();
        let xv = tape.constant(t.clone());
        f(&mut tape, &xv)?.value().item()
    };
    let first = eval(x)?;
    let second = eval(x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "{first} != {second} on repeated evaluation"
        )));
    }

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, &xv)?;
    tape.backward(&y)?;
    let analytic = tape
        .grad(&xv)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let numeric = finite_difference(eval, x, h, None)?;
    Ok(GradCheckReport::new(analytic, numeric, tol))
}
