use crate::error::{Error, Result};
use crate::imgeo::BinaryMask;
use crate::tensor::{Tape, Var};

pub const DICE_SMOOTH: f64 = 1.0;
/// Predictions are clamped to `[ε, 1 − ε]` before the logarithms.
pub const BCE_EPS: f64 = 1e-8;

fn target(tape: &mut Tape, pred: Var, y: &BinaryMask) -> Result<Var> {
    let (h, w) = y.dims();
    if tape.shape(pred) != [1, h, w] {
        return Err(Error::shape(
            "segmentation loss",
            format!("prediction {:?} for {h}x{w} mask", tape.shape(pred)),
        ));
    }
    tape.constant(y.to_tensor())
}

/// `1 − (2Σŷy + s) / (Σŷ + Σy + s)`
pub fn dice_loss(tape: &mut Tape, pred: Var, y: &BinaryMask) -> Result<Var> {
    let t = target(tape, pred, y)?;
    let inter = tape.mul(pred, t)?;
    let inter = tape.sum(inter)?;
    let num = tape.scalar_mul(inter, 2.0)?;
    let num = tape.add_scalar(num, DICE_SMOOTH)?;
    let sp = tape.sum(pred)?;
    let den = tape.add_scalar(sp, y.count() as f64 + DICE_SMOOTH)?;
    let ratio = tape.div(num, den)?;
    tape.one_minus(ratio)
}

/// Mean binary cross-entropy with clamped predictions.
pub fn bce_loss(tape: &mut Tape, pred: Var, y: &BinaryMask) -> Result<Var> {
    let t = target(tape, pred, y)?;
    let p = tape.clamp(pred, BCE_EPS, 1.0 - BCE_EPS)?;
    let lp = tape.log_eps(p, 0.0)?;
    let q = tape.one_minus(p)?;
    let lq = tape.log_eps(q, 0.0)?;
    let nt = tape.one_minus(t)?;
    let a = tape.mul(t, lp)?;
    let b = tape.mul(nt, lq)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    tape.scalar_mul(m, -1.0)
}

/// Dice plus BCE, equally weighted.
pub fn seg_loss(tape: &mut Tape, pred: Var, y: &BinaryMask) -> Result<Var> {
    let d = dice_loss(tape, pred, y)?;
    let b = bce_loss(tape, pred, y)?;
    tape.add(d, b)
}

/// `L_seg(Ŷ, Y) + λ_aux · L_seg(M̂_↑, Y)`. Returns the total and the main term.
pub fn train_loss(tape: &mut Tape, y_hat: Var, y: &BinaryMask, m_up: Var, lambda_aux: f64) -> Result<(Var, Var)> {
    let main = seg_loss(tape, y_hat, y)?;
    if lambda_aux == 0.0 {
        return Ok((main, main));
    }
    let aux = seg_loss(tape, m_up, y)?;
    let aux = tape.scalar_mul(aux, lambda_aux)?;
    Ok((tape.add(main, aux)?, main))
}
