use crate::error::{Error, Result};

use super::{GradGraph, Tensor, Var};

/// Compares reverse-mode gradients against central finite differences.
///
/// `f` must deterministically build a scalar loss from its input var. The
/// returned value is the maximum relative error over all coordinates, with
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// Coordinates whose one-sided difference quotients disagree are skipped:
/// they sit within `2h` of a kink (relu gate or max-pool tie flip), where a
/// central difference straddles two linear pieces and checks nothing.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut GradGraph, Var) -> Result<Var>,
{
    if !x.data().iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("grad_check input contains non-finite values".into()));
    }

    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = GradGraph::new();
        let v = g.leaf(t);
        let out = f(&mut g, v)?;
        if g.numel(out) != 1 {
            return Err(Error::Contract(format!(
                "grad_check function must return a scalar, got shape {:?}",
                g.shape(out)
            )));
        }
        let val = g.scalar_value(out);
        if !val.is_finite() {
            return Err(Error::Numeric(format!("grad_check function output is {val}")));
        }
        Ok(val)
    };

    // Analytic gradient at x.
    let analytic = {
        let mut g = GradGraph::new();
        let probe = x.clone().with_requires_grad(true);
        let v = g.leaf(&probe);
        let out = f(&mut g, v)?;
        if g.numel(out) != 1 {
            return Err(Error::Contract(format!(
                "grad_check function must return a scalar, got shape {:?}",
                g.shape(out)
            )));
        }
        if !g.scalar_value(out).is_finite() {
            return Err(Error::Numeric(format!(
                "grad_check function output is {}",
                g.scalar_value(out)
            )));
        }
        g.backward(out)?;
        g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()])
    };

    let f0 = eval(x)?;
    let mut max_rel = 0.0_f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let f_plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let f_minus = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let d_plus = (f_plus - f0) / h;
        let d_minus = (f0 - f_minus) / h;
        if (d_plus - d_minus).abs() > 1e-3 * d_plus.abs().max(d_minus.abs()).max(1.0) {
            continue; // within 2h of a kink
        }

        let numeric = (f_plus - f_minus) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
