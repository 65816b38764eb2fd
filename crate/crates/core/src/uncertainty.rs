//! Normalised binary-entropy uncertainty and its per-scale resizing.

use std::f64::consts::LN_2;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-8;

/// `1×H×W` map with every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap(Tensor);

impl ProbMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 || t.shape()[0] != 1 {
            return Err(Error::shape("prob map", format!("expected 1xHxW, got {:?}", t.shape())));
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("probability {v} outside [0, 1]")));
        }
        Ok(ProbMap(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }
}

/// Scalar form of the entropy map, clamped to `[0, 1]`.
pub fn entropy_value(m: f64, eps: f64) -> f64 {
    let raw = -(m * (m + eps).ln() + (1.0 - m) * (1.0 - m + eps).ln()) / LN_2;
    raw.clamp(0.0, 1.0)
}

/// `U = −(m·ln(m+ε) + (1−m)·ln(1−m+ε)) / ln 2`, clamped to `[0, 1]`.
pub fn entropy_uncertainty(tape: &mut Tape, m: Var, eps: f64) -> Result<Var> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("entropy epsilon must be positive, got {eps}")));
    }
    let log_m = tape.log_eps(m, eps)?;
    let a = tape.mul(m, log_m)?;
    let q = tape.one_minus(m)?;
    let log_q = tape.log_eps(q, eps)?;
    let b = tape.mul(q, log_q)?;
    let s = tape.add(a, b)?;
    let u = tape.scalar_mul(s, -1.0 / LN_2)?;
    tape.clamp(u, 0.0, 1.0)
}

/// Bilinear resize of a `1×H×W` probability map to `h×w`.
pub fn resize_to_scale(tape: &mut Tape, m: Var, h: usize, w: usize) -> Result<Var> {
    tape.bilinear_resize(m, h, w)
}

/// Resize then entropy, the order used by the refinement path.
/// A detached `U` blocks gradient flow back into the guidance map.
pub fn scale_uncertainty(
    tape: &mut Tape,
    m: Var,
    h: usize,
    w: usize,
    eps: f64,
    detach: bool,
) -> Result<(Var, Var)> {
    let m_i = resize_to_scale(tape, m, h, w)?;
    let src = if detach { tape.detach(m_i)? } else { m_i };
    let u_i = entropy_uncertainty(tape, src, eps)?;
    Ok((m_i, u_i))
}

/// Eager evaluation for dumps.
pub fn uncertainty_map(m: &ProbMap, eps: f64) -> ProbMap {
    ProbMap(m.0.map(|v| entropy_value(v, eps)))
}

/// 8-bit encoding of a `[0, 1]` map: `value·255` rounded half up.
pub fn to_gray8(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_is_maximal() {
        assert!((entropy_value(0.5, DEFAULT_EPS) - 1.0).abs() < 1e-7);
        assert!(entropy_value(0.0, DEFAULT_EPS) < 1e-6);
        assert!(entropy_value(1.0, DEFAULT_EPS) < 1e-6);
    }

    #[test]
    fn prob_map_rejects_out_of_range() {
        assert!(ProbMap::new(Tensor::full([1, 2, 2], 1.5)).is_err());
        assert!(ProbMap::new(Tensor::full([2, 2], 0.5)).is_err());
        assert!(ProbMap::new(Tensor::full([1, 2, 2], 0.5)).is_ok());
    }

    #[test]
    fn gray8_rounds_half_up() {
        assert_eq!(to_gray8(&[0.0, 1.0, 0.5, -0.2]), vec![0, 255, 128, 0]);
    }
}
