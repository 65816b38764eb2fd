//! Geometry-constrained copy-paste.
//!
//! A lesion instance is downscaled into a replica whose safety radius is the
//! circumradius of its box. The replica is pasted only at centres whose
//! distance to the nearest existing foreground pixel is at least that radius.

use rand::Rng;

use super::components::connected_components;
use super::edt::{edt, DistanceMap};
use super::mask::{BBox, BinaryMask, Instance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Circumradius of an `h×w` box, in pixels.
pub fn circumradius(height: usize, width: usize) -> f64 {
    let (h, w) = (height as f64, width as f64);
    (h * h + w * w).sqrt() / 2.0
}

/// Uniform draw among pixels with `dist ≥ radius`, or `None` when no pixel
/// qualifies.
pub fn sample_paste_center<R: Rng + ?Sized>(
    dmap: &DistanceMap,
    radius: f64,
    rng: &mut R,
) -> Option<(usize, usize)> {
    let w = dmap.width();
    let feasible: Vec<usize> = dmap
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &d)| d >= radius)
        .map(|(i, _)| i)
        .collect();
    if feasible.is_empty() {
        return None;
    }
    let i = feasible[rng.random_range(0..feasible.len())];
    Some((i / w, i % w))
}

/// Nearest-neighbour downscale of an instance and its image crop.
///
/// The result lives in its own frame: its box starts at `(0, 0)` and its
/// pixel list is box-local. Fails when either side of the scaled box would be
/// shorter than 2 pixels.
pub fn scale_instance(inst: &Instance, factor: f64) -> Result<Instance> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::Config(format!("scale factor {factor} outside (0, 1]")));
    }
    let (h, w) = (inst.bbox.height, inst.bbox.width);
    let nh = (h as f64 * factor).round() as usize;
    let nw = (w as f64 * factor).round() as usize;
    if nh < 2 || nw < 2 {
        return Err(Error::Contract(format!(
            "replica of {h}x{w} at factor {factor} is degenerate ({nh}x{nw})"
        )));
    }
    let src_row: Vec<usize> = (0..nh).map(|r| (((2 * r + 1) * h) / (2 * nh)).min(h - 1)).collect();
    let src_col: Vec<usize> = (0..nw).map(|c| (((2 * c + 1) * w) / (2 * nw)).min(w - 1)).collect();
    let scaled = BinaryMask::from_fn(nh, nw, |r, c| inst.mask.get(src_row[r], src_col[c]));
    let pixels: Vec<(usize, usize)> = scaled.iter_on().collect();
    if pixels.is_empty() {
        return Err(Error::Contract("replica lost every pixel".into()));
    }
    let mut out = Instance::from_pixels(pixels);
    // from_pixels re-tightens the box; shift the crop window to match
    let (dt, dl) = (out.bbox.top, out.bbox.left);
    if let Some(patch) = &inst.patch {
        let ch = patch.shape()[0];
        let b = out.bbox;
        let mut data = Vec::with_capacity(ch * b.height * b.width);
        for c in 0..ch {
            for r in 0..b.height {
                for col in 0..b.width {
                    let sr = src_row[r + dt];
                    let sc = src_col[col + dl];
                    data.push(patch.data()[(c * h + sr) * w + sc]);
                }
            }
        }
        out.patch = Some(Tensor::new([ch, b.height, b.width], data)?);
    }
    out.pixels = out.pixels.iter().map(|&(r, c)| (r - dt, c - dl)).collect();
    out.bbox = BBox {
        top: 0,
        left: 0,
        ..out.bbox
    };
    Ok(out)
}

/// Top-left corner that puts the box centre on `center`, rounding toward the
/// top-left for even sizes.
pub fn paste_origin(center: (usize, usize), height: usize, width: usize) -> (isize, isize) {
    (
        center.0 as isize - ((height as isize - 1) / 2),
        center.1 as isize - ((width as isize - 1) / 2),
    )
}

/// Pastes `inst` onto `image` centred at `center`.
///
/// Returns the augmented image, `Y ∨ M_B`, and `M_B`. Pixels falling outside
/// the image are clipped. Fails if the replica would touch existing
/// foreground or vanish entirely after clipping.
pub fn paste(
    image: &Tensor,
    mask: &BinaryMask,
    inst: &Instance,
    center: (usize, usize),
) -> Result<(Tensor, BinaryMask, BinaryMask)> {
    let patch = inst
        .patch
        .as_ref()
        .ok_or_else(|| Error::Contract("instance has no image crop".into()))?;
    let (h, w) = mask.dims();
    let ch = image.shape()[0];
    if image.shape() != [ch, h, w] || patch.shape()[0] != ch {
        return Err(Error::shape("paste", "image, mask and patch disagree"));
    }
    let b = inst.bbox;
    let (top, left) = paste_origin(center, b.height, b.width);
    let mut m_b = BinaryMask::new(h, w);
    let mut out = image.clone();
    let data = out.data_mut();
    for (r, c) in inst.mask.iter_on() {
        let (gr, gc) = (top + r as isize, left + c as isize);
        if gr < 0 || gc < 0 || gr >= h as isize || gc >= w as isize {
            continue;
        }
        let (gr, gc) = (gr as usize, gc as usize);
        if mask.get(gr, gc) {
            return Err(Error::Contract(format!(
                "replica pixel ({gr},{gc}) overlaps existing foreground"
            )));
        }
        m_b.set(gr, gc, true);
        for k in 0..ch {
            data[(k * h + gr) * w + gc] = patch.data()[(k * b.height + r) * b.width + c];
        }
    }
    if m_b.is_empty() {
        return Err(Error::Contract("replica clipped away entirely".into()));
    }
    let y_cp = mask.or(&m_b);
    Ok((out, y_cp, m_b))
}

/// Knobs for [`copy_paste`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CopyPasteConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    /// Extra attempts after the first one before falling back.
    pub max_retries: usize,
}

impl Default for CopyPasteConfig {
    fn default() -> Self {
        CopyPasteConfig {
            scale_min: 0.3,
            scale_max: 0.7,
            max_retries: 3,
        }
    }
}

/// What happened during one augmentation, for logging.
#[derive(Clone, Debug, PartialEq)]
pub struct PasteRecord {
    pub instance_index: Option<usize>,
    pub scale: f64,
    pub center: Option<(usize, usize)>,
    pub radius: f64,
    pub attempts: usize,
    pub success: bool,
}

/// `(I^cp, Y^cp, M_A, M_B)`. On fallback the image and mask are the inputs
/// and both instance masks are empty.
#[derive(Clone, Debug)]
pub struct AugmentedSample {
    pub image: Tensor,
    pub mask: BinaryMask,
    pub m_a: BinaryMask,
    pub m_b: BinaryMask,
    pub record: PasteRecord,
}

impl AugmentedSample {
    pub fn succeeded(&self) -> bool {
        self.record.success
    }
}

/// Picks a random lesion, builds a downscaled replica and pastes it at a
/// safe centre. When no centre is feasible the factor is halved and the
/// attempt repeated; after `max_retries` extra attempts the un-augmented
/// sample is returned with `success = false`.
pub fn copy_paste<R: Rng + ?Sized>(
    image: &Tensor,
    mask: &BinaryMask,
    cfg: &CopyPasteConfig,
    rng: &mut R,
) -> Result<AugmentedSample> {
    let (h, w) = mask.dims();
    let fallback = |record: PasteRecord| AugmentedSample {
        image: image.clone(),
        mask: mask.clone(),
        m_a: BinaryMask::new(h, w),
        m_b: BinaryMask::new(h, w),
        record,
    };
    let comps = connected_components(mask);
    if comps.is_empty() {
        return Ok(fallback(PasteRecord {
            instance_index: None,
            scale: 0.0,
            center: None,
            radius: 0.0,
            attempts: 0,
            success: false,
        }));
    }
    let index = rng.random_range(0..comps.len());
    let lesion_a = comps[index].clone().with_patch(image)?;
    let dmap = edt(mask);
    let draw = |rng: &mut R| {
        if cfg.scale_max > cfg.scale_min {
            rng.random_range(cfg.scale_min..=cfg.scale_max)
        } else {
            cfg.scale_min
        }
    };
    let mut factor = draw(rng);
    let mut record = PasteRecord {
        instance_index: Some(index),
        scale: factor,
        center: None,
        radius: 0.0,
        attempts: 0,
        success: false,
    };
    for _ in 0..=cfg.max_retries {
        record.attempts += 1;
        record.scale = factor;
        let replica = match scale_instance(&lesion_a, factor) {
            Ok(r) => r,
            Err(Error::Contract(_)) => {
                factor = draw(rng);
                continue;
            }
            Err(e) => return Err(e),
        };
        let radius = circumradius(replica.bbox.height, replica.bbox.width);
        record.radius = radius;
        let Some(center) = sample_paste_center(&dmap, radius, rng) else {
            record.center = None;
            factor *= 0.5;
            continue;
        };
        record.center = Some(center);
        match paste(image, mask, &replica, center) {
            Ok((image_cp, mask_cp, m_b)) => {
                record.success = true;
                return Ok(AugmentedSample {
                    image: image_cp,
                    mask: mask_cp,
                    m_a: lesion_a.full_mask(h, w),
                    m_b,
                    record,
                });
            }
            Err(Error::Contract(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(fallback(record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn solid(h: usize, w: usize) -> Instance {
        let pixels = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
        let inst = Instance::from_pixels(pixels);
        let img = Tensor::from_fn([1, h, w], |i| i as f64);
        inst.with_patch(&img).unwrap()
    }

    #[test]
    fn circumradius_examples() {
        assert!((circumradius(1, 1) - 0.70710678).abs() < 1e-8);
        assert_eq!(circumradius(6, 8), 5.0);
        assert_eq!(circumradius(3, 7), circumradius(7, 3));
    }

    #[test]
    fn scale_identity_and_half() {
        let inst = solid(8, 8);
        let same = scale_instance(&inst, 1.0).unwrap();
        assert_eq!(same.mask, inst.mask);
        assert_eq!(same.patch, inst.patch);
        let half = scale_instance(&inst, 0.5).unwrap();
        assert_eq!(half.bbox.height, 4);
        assert_eq!(half.bbox.width, 4);
        assert_eq!(half.area(), 16);
    }

    #[test]
    fn degenerate_scale_is_rejected() {
        let inst = solid(3, 3);
        assert!(matches!(scale_instance(&inst, 0.3), Err(Error::Contract(_))));
    }

    #[test]
    fn sampler_edge_cases() {
        let mut m = BinaryMask::new(5, 5);
        m.set(0, 0, true);
        let d = edt(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_paste_center(&d, 0.0, &mut rng).unwrap();
        assert!(d.get(p.0, p.1) >= 0.0);
        assert!(sample_paste_center(&d, d.max().unwrap() + 0.1, &mut rng).is_none());
        let a = sample_paste_center(&d, 2.0, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_paste_center(&d, 2.0, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn paste_far_from_lesion_is_a_disjoint_union() {
        let mut y = BinaryMask::new(20, 20);
        for r in 0..3 {
            for c in 0..3 {
                y.set(r, c, true);
            }
        }
        let img = Tensor::from_fn([1, 20, 20], |i| (i % 7) as f64);
        let replica = scale_instance(&solid(6, 6), 0.5).unwrap();
        let (icp, ycp, mb) = paste(&img, &y, &replica, (15, 15)).unwrap();
        assert_eq!(ycp.count(), y.count() + mb.count());
        assert_eq!(mb.count(), 9);
        for (i, (&a, &b)) in img.data().iter().zip(icp.data()).enumerate() {
            if !mb.get(i / 20, i % 20) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn paste_refuses_overlap() {
        let mut y = BinaryMask::new(10, 10);
        y.set(5, 5, true);
        let img = Tensor::zeros([1, 10, 10]);
        let replica = solid(3, 3);
        assert!(matches!(paste(&img, &y, &replica, (5, 5)), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_mask_falls_back() {
        let img = Tensor::zeros([1, 8, 8]);
        let y = BinaryMask::new(8, 8);
        let out = copy_paste(&img, &y, &CopyPasteConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(!out.succeeded());
        assert_eq!(out.mask, y);
        assert!(out.m_a.is_empty() && out.m_b.is_empty());
    }
}
