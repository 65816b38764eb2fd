//! Exact Euclidean distance transform.
//!
//! Separable lower-envelope-of-parabolas method: a column pass followed by a
//! row pass over squared distances. Squared distances are exact integers, so
//! the final square root matches a brute-force search bit for bit.

use super::mask::BinaryMask;

/// Distance from every pixel to its nearest foreground pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    height: usize,
    width: usize,
    dist: Vec<f64>,
}

impl DistanceMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.dist[r * self.width + c]
    }

    pub fn values(&self) -> &[f64] {
        &self.dist
    }

    /// Largest finite distance, or `None` when there is no foreground.
    pub fn max(&self) -> Option<f64> {
        self.dist
            .iter()
            .copied()
            .filter(|d| d.is_finite())
            .fold(None, |m, d| Some(m.map_or(d, |m: f64| m.max(d))))
    }
}

/// Lower envelope pass over one line. `f` holds squared distances (∞ for no
/// site); the result is written to `out`.
fn envelope_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let pf = p as f64;
            let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact EDT with respect to the foreground of `mask`. Foreground pixels get
/// 0. When the mask has no foreground every entry is `+∞`.
pub fn edt(mask: &BinaryMask) -> DistanceMap {
    let (h, w) = mask.dims();
    let mut sq: Vec<f64> = mask
        .bits()
        .iter()
        .map(|&b| if b == 1 { 0.0 } else { f64::INFINITY })
        .collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut line = vec![0.0; h.max(w)];
    let mut out = vec![0.0; h.max(w)];
    for c in 0..w {
        for r in 0..h {
            line[r] = sq[r * w + c];
        }
        envelope_1d(&line[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            sq[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        line[..w].copy_from_slice(&sq[r * w..(r + 1) * w]);
        envelope_1d(&line[..w], &mut out[..w], &mut v, &mut z);
        sq[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    DistanceMap {
        height: h,
        width: w,
        dist: sq.into_iter().map(f64::sqrt).collect(),
    }
}
