//! Raw numeric kernels shared by the forward and backward passes.

/// `c = a · b (+ c if accumulate)` for a logical `m×k` matrix `a` and `k×n`
/// matrix `b`, both row-major unless the matching `*_t` flag says the buffer
/// holds the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn taps(&self) -> impl Iterator<Item = (usize, isize, isize)> + '_ {
        let pad = (self.dilation * (self.k / 2)) as isize;
        let k = self.k;
        let d = self.dilation as isize;
        (0..self.c * k * k).map(move |row| {
            let kx = row % k;
            let ky = (row / k) % k;
            (row, ky as isize * d - pad, kx as isize * d - pad)
        })
    }
}

/// Unfolds a `c×h×w` image into a `(c·k·k)×(h·w)` column matrix with zero
/// padding so the output keeps the input extent.
pub(crate) fn im2col(x: &[f64], g: ConvGeom, col: &mut [f64]) {
    let hw = g.h * g.w;
    for (row, dy, dx) in g.taps() {
        let ci = row / (g.k * g.k);
        let src = &x[ci * hw..(ci + 1) * hw];
        let dst = &mut col[row * hw..(row + 1) * hw];
        for y in 0..g.h {
            let sy = y as isize + dy;
            let out = &mut dst[y * g.w..(y + 1) * g.w];
            if sy < 0 || sy >= g.h as isize {
                out.fill(0.0);
                continue;
            }
            let srow = &src[sy as usize * g.w..(sy as usize + 1) * g.w];
            for (xx, o) in out.iter_mut().enumerate() {
                let sx = xx as isize + dx;
                *o = if sx < 0 || sx >= g.w as isize {
                    0.0
                } else {
                    srow[sx as usize]
                };
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im(col: &[f64], g: ConvGeom, dx_img: &mut [f64]) {
    let hw = g.h * g.w;
    for (row, dy, dx) in g.taps() {
        let ci = row / (g.k * g.k);
        let src = &col[row * hw..(row + 1) * hw];
        let dst = &mut dx_img[ci * hw..(ci + 1) * hw];
        for y in 0..g.h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= g.h as isize {
                continue;
            }
            for xx in 0..g.w {
                let sx = xx as isize + dx;
                if sx >= 0 && sx < g.w as isize {
                    dst[sy as usize * g.w + sx as usize] += src[y * g.w + xx];
                }
            }
        }
    }
}

/// Source taps for one output coordinate of a bilinear resize using the
/// pixel-centre convention (`align_corners = false`).
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

pub(crate) fn nearest_index(input: usize, output: usize) -> Vec<usize> {
    (0..output)
        .map(|o| ((o * input) / output).min(input - 1))
        .collect()
}
