use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of `f` at `x` against central finite
/// differences and returns the largest relative error over all coordinates.
///
/// Relative error is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// `f` must build a one-element loss from the supplied input handle.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let input = g.param(x.clone());
    let loss = f(&mut g, input)?;
    check_finite(g.value(loss).item()?)?;
    g.backward(loss)?;
    let analytic = g
        .grad(input)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(probe);
        let out = f(&mut g, v)?;
        check_finite(g.value(out).item()?)
    };

    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("function value {v} is not finite")))
    }
}
