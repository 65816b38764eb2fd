use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `H×W` image of strictly binary values.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "mask dimensions must be >= 1");
        BinaryMask {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{} bits for {height}x{width}", bits.len()),
            ));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Contract("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(height, width);
        for r in 0..height {
            for c in 0..width {
                if f(r, c) {
                    m.bits[r * width + c] = 1;
                }
            }
        }
        m
    }

    /// Thresholds a `1×H×W` (or `H×W`) tensor: `value > threshold`.
    pub fn from_tensor(t: &Tensor, threshold: f64) -> Result<Self> {
        let (h, w) = match t.shape() {
            [1, h, w] | [h, w] => (*h, *w),
            other => return Err(Error::shape("mask", format!("cannot read {other:?} as a mask"))),
        };
        let bits = t.data().iter().map(|&v| u8::from(v > threshold)).collect();
        Self::from_bits(h, w, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c] == 1
    }

    pub fn set(&mut self, r: usize, c: usize, on: bool) {
        self.bits[r * self.width + c] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(u8, u8) -> u8) -> BinaryMask {
        assert_eq!(self.dims(), other.dims(), "mask dimensions differ");
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn or(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn not(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|&b| 1 - b).collect(),
        }
    }

    pub fn intersects(&self, other: &BinaryMask) -> bool {
        assert_eq!(self.dims(), other.dims(), "mask dimensions differ");
        self.bits.iter().zip(&other.bits).any(|(&a, &b)| a & b == 1)
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        assert_eq!(self.dims(), other.dims(), "mask dimensions differ");
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| a <= b)
    }

    pub fn iter_on(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(move |(i, _)| (i / w, i % w))
    }

    /// `1×H×W` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [1, self.height, self.width],
            self.bits.iter().map(|&b| b as f64).collect(),
        )
        .expect("dimensions agree")
    }

    pub fn flip_horizontal(&self) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    pub fn flip_vertical(&self) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |r, c| self.get(self.height - 1 - r, c))
    }

    /// Block-average downsampling by `factor` followed by `> 0.5`.
    pub fn downsample(&self, factor: usize) -> Result<BinaryMask> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::shape(
                "mask downsample",
                format!("{}x{} not divisible by {factor}", self.height, self.width),
            ));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let area = (factor * factor) as f64;
        Ok(BinaryMask::from_fn(h, w, |r, c| {
            let mut on = 0usize;
            for y in r * factor..(r + 1) * factor {
                for x in c * factor..(c + 1) * factor {
                    on += self.get(y, x) as usize;
                }
            }
            on as f64 / area > 0.5
        }))
    }
}

/// Tight bounding box in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// One connected lesion: its pixels, tight box and local mask. `patch`
/// carries the image crop under the box once attached.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub pixels: Vec<(usize, usize)>,
    pub bbox: BBox,
    /// `bbox.height × bbox.width` mask in box-local coordinates.
    pub mask: BinaryMask,
    /// `C × bbox.height × bbox.width` image crop.
    pub patch: Option<Tensor>,
}

impl Instance {
    pub(crate) fn from_pixels(pixels: Vec<(usize, usize)>) -> Instance {
        debug_assert!(!pixels.is_empty());
        let top = pixels.iter().map(|p| p.0).min().unwrap();
        let bottom = pixels.iter().map(|p| p.0).max().unwrap();
        let left = pixels.iter().map(|p| p.1).min().unwrap();
        let right = pixels.iter().map(|p| p.1).max().unwrap();
        let bbox = BBox {
            top,
            left,
            height: bottom - top + 1,
            width: right - left + 1,
        };
        let mut mask = BinaryMask::new(bbox.height, bbox.width);
        for &(r, c) in &pixels {
            mask.set(r - top, c - left, true);
        }
        Instance {
            pixels,
            bbox,
            mask,
            patch: None,
        }
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// The instance alone as a full-size mask.
    pub fn full_mask(&self, height: usize, width: usize) -> BinaryMask {
        let mut m = BinaryMask::new(height, width);
        for &(r, c) in &self.pixels {
            m.set(r, c, true);
        }
        m
    }

    /// Copies the image region under the bounding box into `patch`.
    pub fn with_patch(mut self, image: &Tensor) -> Result<Instance> {
        let (ch, h, w) = match image.shape() {
            [c, h, w] => (*c, *h, *w),
            other => return Err(Error::shape("instance crop", format!("{other:?}"))),
        };
        let b = self.bbox;
        if b.top + b.height > h || b.left + b.width > w {
            return Err(Error::shape("instance crop", "bounding box outside image"));
        }
        let mut data = Vec::with_capacity(ch * b.height * b.width);
        for c in 0..ch {
            for r in b.top..b.top + b.height {
                let row = (c * h + r) * w;
                data.extend_from_slice(&image.data()[row + b.left..row + b.left + b.width]);
            }
        }
        self.patch = Some(Tensor::new([ch, b.height, b.width], data)?);
        Ok(self)
    }
}

pub fn flip_tensor_horizontal(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = t.data();
    Tensor::from_fn([c, h, w], |i| {
        let x = i % w;
        d[i - x + (w - 1 - x)]
    })
}

pub fn flip_tensor_vertical(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = t.data();
    Tensor::from_fn([c, h, w], |i| {
        let x = i % w;
        let y = (i / w) % h;
        let ch = i / (h * w);
        d[(ch * h + (h - 1 - y)) * w + x]
    })
}
