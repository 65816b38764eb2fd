use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Maximum relative error between the tape gradient of a scalar function and
/// its coordinate-wise central difference `(f(x+h) − f(x−h)) / 2h`.
///
/// The relative error uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true)?;
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .ok_or_else(|| Error::Eval("no gradient reached the input".into()))?
        .to_vec();

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe)?;
        let out = f(&mut t, v)?;
        let value = t.value(out);
        if value.numel() != 1 {
            return Err(Error::Eval("function is not scalar-valued".into()));
        }
        let s = value.item();
        if !s.is_finite() {
            return Err(Error::Eval("function returned a non-finite value".into()));
        }
        Ok(s)
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
