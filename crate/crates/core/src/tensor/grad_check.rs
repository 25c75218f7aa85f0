use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|autodiff − numeric| / max(1, |numeric|)`
pub fn relative_error(autodiff: f64, numeric: f64) -> f64 {
    (autodiff - numeric).abs() / numeric.abs().max(1.0)
}

/// Central difference of a scalar function along one coordinate.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64, step: f64) -> Result<f64> {
    Ok((f(x + step)? - f(x - step)?) / (2.0 * step))
}

/// Compares reverse-mode gradients of `f` against central finite differences
/// over every entry of `params`, returning the largest relative error.
///
/// `f` receives a fresh tape plus one leaf per parameter (in order) and must
/// return a scalar loss. It is called once with gradients enabled and twice
/// per parameter entry for the numeric estimate.
pub fn grad_check<F>(params: &[Tensor], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Contract(format!("grad_check step must be > 0, got {step}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone().with_grad()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
        })
        .collect();

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for (j, &analytic_j) in grads.iter().enumerate() {
            let orig = work[pi].data()[j];
            let numeric = central_difference(
                |x| {
                    work[pi].data_mut()[j] = x;
                    eval(&work)
                },
                orig,
                step,
            )?;
            work[pi].data_mut()[j] = orig;
            worst = worst.max(relative_error(analytic_j, numeric));
        }
    }
    Ok(worst)
}
