use crate::imgeo::BinaryMask;

pub const THRESHOLD: f64 = 0.5;

/// Per-image segmentation scores, or their means over a set.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub miou: f64,
    pub mdsc: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Scores of `pred > 0.5` against `gt`. An empty ground truth scores 1 on
/// every metric if the prediction is empty too, else 0; an empty prediction
/// has precision 0.
pub fn image_metrics(pred: &[f64], gt: &BinaryMask) -> Metrics {
    assert_eq!(pred.len(), gt.bits().len(), "prediction and mask differ in size");
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt.bits()) {
        match (p > THRESHOLD, g == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fn_ == 0 {
        let v = if fp == 0 { 1.0 } else { 0.0 };
        return Metrics {
            miou: v,
            mdsc: v,
            recall: v,
            precision: v,
        };
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Metrics {
        miou: ratio(tp, tp + fp + fn_),
        mdsc: ratio(2 * tp, 2 * tp + fp + fn_),
        recall: ratio(tp, tp + fn_),
        precision: ratio(tp, tp + fp),
    }
}

/// Arithmetic mean; all zeros for an empty set.
pub fn mean_metrics(all: &[Metrics]) -> Metrics {
    if all.is_empty() {
        return Metrics::default();
    }
    let n = all.len() as f64;
    let sum = |f: fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / n;
    Metrics {
        miou: sum(|m| m.miou),
        mdsc: sum(|m| m.mdsc),
        recall: sum(|m| m.recall),
        precision: sum(|m| m.precision),
    }
}
