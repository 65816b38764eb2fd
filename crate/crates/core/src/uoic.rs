//! Instance contrastive pretraining terms: masked pooling, lesion-like hard
//! negative mining and in-batch InfoNCE.

use crate::error::{Error, Result};
use crate::imgeo::BinaryMask;
use crate::tensor::{Tape, Tensor, Var};

/// Guard added to the weight sum in [`wmap`].
pub const WMAP_EPS: f64 = 1e-8;
/// Negatives whose weight sum falls below this are dropped.
pub const NEGATIVE_MIN_WEIGHT: f64 = 1e-6;
/// Norm guard in cosine similarity; vectors with a smaller norm are dropped.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingSource {
    LesionA,
    LesionB,
    BackgroundHardNegative,
}

impl EmbeddingSource {
    pub fn tag(self) -> &'static str {
        match self {
            EmbeddingSource::LesionA => "lesion_a",
            EmbeddingSource::LesionB => "lesion_b",
            EmbeddingSource::BackgroundHardNegative => "background",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceEmbedding {
    pub vector: Vec<f64>,
    pub source: EmbeddingSource,
    pub sample_index: usize,
}

fn feature_dims(tape: &Tape, f: Var) -> Result<(usize, usize, usize)> {
    match tape.shape(f) {
        &[d, h, w] => Ok((d, h, w)),
        other => Err(Error::shape("pooling", format!("features must be DxHxW, got {other:?}"))),
    }
}

/// Area-average downsampling of a full-resolution mask to `h×w`, then `> 0.5`.
pub fn downsample_mask(mask: &BinaryMask, h: usize, w: usize) -> Result<BinaryMask> {
    let (mh, mw) = mask.dims();
    if mh % h != 0 || mw % w != 0 || mh / h != mw / w {
        return Err(Error::shape(
            "mask downsample",
            format!("{mh}x{mw} is not an integer multiple of {h}x{w}"),
        ));
    }
    mask.downsample(mh / h)
}

/// `Σ w(x)·F(x) / (Σ w(x) + ε_w)` over `F: D×h×w` and `w: 1×h×w`.
/// Returns the `D`-vector and the weight sum.
pub fn wmap(tape: &mut Tape, f: Var, weights: Var) -> Result<(Var, f64)> {
    let (d, h, w) = feature_dims(tape, f)?;
    let n = h * w;
    if tape.value(weights).numel() != n {
        return Err(Error::shape(
            "wmap",
            format!("{:?} weights for {h}x{w} features", tape.shape(weights)),
        ));
    }
    if tape.value(weights).data().iter().any(|&v| v < 0.0) {
        return Err(Error::Contract("wmap weights must be nonnegative".into()));
    }
    let mass = tape.value(weights).sum();
    let flat = tape.reshape(f, &[d, n])?;
    let col = tape.reshape(weights, &[n, 1])?;
    let num = tape.matmul(flat, col)?;
    let num = tape.reshape(num, &[d])?;
    let total = tape.sum(weights)?;
    let den = tape.add_scalar(total, WMAP_EPS)?;
    Ok((tape.div(num, den)?, mass))
}

/// Mean feature over the mask, after downsampling it to feature resolution.
/// `None` when the downsampled mask is empty.
pub fn masked_avg_pool(tape: &mut Tape, f: Var, mask: &BinaryMask) -> Result<Option<Var>> {
    let (d, h, w) = feature_dims(tape, f)?;
    let small = downsample_mask(mask, h, w)?;
    let count = small.count();
    if count == 0 {
        return Ok(None);
    }
    let inv = 1.0 / count as f64;
    let weights = Tensor::new([h * w, 1], small.bits().iter().map(|&b| b as f64 * inv).collect())?;
    let col = tape.constant(weights)?;
    let flat = tape.reshape(f, &[d, h * w])?;
    let pooled = tape.matmul(flat, col)?;
    Ok(Some(tape.reshape(pooled, &[d])?))
}

/// Lesion-like background representation:
/// `wmap(F̃, down(1 − Y^cp) ⊙ avgpool(Ŷ^cp))`. `None` when the weight sum is
/// below [`NEGATIVE_MIN_WEIGHT`].
pub fn mine_hard_negative(
    tape: &mut Tape,
    f: Var,
    y_cp: &BinaryMask,
    y_hat_cp: Var,
) -> Result<Option<Var>> {
    let (_, h, w) = feature_dims(tape, f)?;
    let (mh, mw) = y_cp.dims();
    if tape.shape(y_hat_cp) != [1, mh, mw] {
        return Err(Error::shape("hard negative", "prediction and mask disagree"));
    }
    let background = downsample_mask(&y_cp.not(), h, w)?.to_tensor();
    let bg = tape.constant(background)?;
    let prob = if mh == h {
        y_hat_cp
    } else {
        tape.avg_pool(y_hat_cp, mh / h)?
    };
    let weights = tape.mul(bg, prob)?;
    let (z, mass) = wmap(tape, f, weights)?;
    Ok((mass >= NEGATIVE_MIN_WEIGHT).then_some(z))
}

fn norm(tape: &mut Tape, v: Var) -> Result<Var> {
    let sq = tape.mul(v, v)?;
    let s = tape.sum(sq)?;
    tape.sqrt(s)
}

/// `a·b / (|a||b| + ε)`
pub fn cosine(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let ab = tape.mul(a, b)?;
    let dot = tape.sum(ab)?;
    let na = norm(tape, a)?;
    let nb = norm(tape, b)?;
    let den = tape.mul(na, nb)?;
    let den = tape.add_scalar(den, COSINE_EPS)?;
    tape.div(dot, den)
}

fn vector_norm(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Result of [`info_nce`]; `loss` is `None` when no anchor survives.
#[derive(Clone, Copy, Debug)]
pub struct NceOutcome {
    pub loss: Option<Var>,
    pub anchors_used: usize,
    pub dropped_terms: usize,
}

/// Mean over anchors of `−log(e^{s⁺} / (e^{s⁺} + Σ_k e^{s⁻_k}))` with
/// `s = cos/τ`. Every anchor is contrasted against every negative.
/// Zero-norm vectors are dropped and counted.
pub fn info_nce(
    tape: &mut Tape,
    anchors: &[Var],
    positives: &[Var],
    negatives: &[Var],
    tau: f64,
) -> Result<NceOutcome> {
    if anchors.len() != positives.len() {
        return Err(Error::Contract(format!(
            "{} anchors for {} positives",
            anchors.len(),
            positives.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let mut dropped = 0;
    let negs: Vec<Var> = negatives
        .iter()
        .copied()
        .filter(|&n| {
            let ok = vector_norm(tape, n) > COSINE_EPS;
            dropped += usize::from(!ok);
            ok
        })
        .collect();
    let mut terms = Vec::new();
    for (&a, &p) in anchors.iter().zip(positives) {
        if negs.is_empty() || vector_norm(tape, a) <= COSINE_EPS || vector_norm(tape, p) <= COSINE_EPS {
            dropped += 1;
            continue;
        }
        let mut logits = Vec::with_capacity(negs.len() + 1);
        let pos = cosine(tape, a, p)?;
        let pos = tape.scalar_mul(pos, 1.0 / tau)?;
        logits.push(tape.reshape(pos, &[1])?);
        for &n in &negs {
            let s = cosine(tape, a, n)?;
            let s = tape.scalar_mul(s, 1.0 / tau)?;
            logits.push(tape.reshape(s, &[1])?);
        }
        let all = tape.concat(&logits, 0)?;
        let lse = tape.logsumexp(all)?;
        terms.push(tape.sub(lse, pos)?);
    }
    if terms.is_empty() {
        return Ok(NceOutcome {
            loss: None,
            anchors_used: 0,
            dropped_terms: dropped,
        });
    }
    let stacked: Vec<Var> = terms
        .iter()
        .map(|&t| tape.reshape(t, &[1]))
        .collect::<Result<_>>()?;
    let all = tape.concat(&stacked, 0)?;
    let loss = tape.mean(all)?;
    Ok(NceOutcome {
        loss: Some(loss),
        anchors_used: terms.len(),
        dropped_terms: dropped,
    })
}

/// `L_seg + λ_ic · L_nce`; a missing contrastive term contributes nothing.
pub fn pretrain_loss(tape: &mut Tape, seg: Var, nce: Option<Var>, lambda_ic: f64) -> Result<Var> {
    if !(lambda_ic >= 0.0) {
        return Err(Error::Config(format!("lambda_ic must be nonnegative, got {lambda_ic}")));
    }
    match nce {
        Some(n) if lambda_ic > 0.0 => {
            let w = tape.scalar_mul(n, lambda_ic)?;
            tape.add(seg, w)
        }
        _ => Ok(seg),
    }
}
