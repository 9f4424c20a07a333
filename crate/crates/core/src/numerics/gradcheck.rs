//! Central finite-difference check of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst coordinate found by [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(i, p))
        .collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::shape("grad_check function must return a scalar"));
    }
    Ok(value.item())
}

fn gradients<F>(f: &F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(i, p))
        .collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item();
    let grads = tape.backward(out)?;
    let grads = params
        .iter()
        .enumerate()
        .map(|(i, p)| grads.get_or_zeros(i, p.shape()))
        .collect();
    Ok((value, grads))
}

/// Compare reverse-mode gradients of `f` against `(f(p+eps) − f(p−eps)) / 2eps`
/// on every coordinate of every parameter.
///
/// Relative error per coordinate is `|a − b| / max(|a|, |b|, 1e-8)`.
/// `f` is evaluated twice at the unperturbed point; differing results are an error.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    grad_check_strided(f, params, eps, 1, 0)
}

/// [`grad_check`] visiting coordinates `offset, offset + stride, …` of each parameter.
pub fn grad_check_strided<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    stride: usize,
    offset: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    let stride = stride.max(1);
    let (value, analytic) = gradients(&f, params)?;
    let again = evaluate(&f, params)?;
    if value.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: value,
            second: again,
        });
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for ci in (offset % stride..params[pi].len()).step_by(stride) {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let plus = evaluate(&f, &work)?;
            work[pi].data_mut()[ci] = orig - eps;
            let minus = evaluate(&f, &work)?;
            work[pi].data_mut()[ci] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[ci];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, ci));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
