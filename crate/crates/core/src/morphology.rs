//! Binary masks and morphological supervision targets.
//!
//! From one annotation mask this module derives the four supervision rasters
//! used in training: the mask itself, a thin contour, a contraction band (what
//! dilation adds), and an expansion band (what erosion removes). Dilation and
//! erosion use a square k x k structuring element whose window clamps at the
//! image border; the contour uses a 3x3 Laplacian stencil with zero padding.

use crate::error::{Error, Result};

/// Default structuring-element size for instance-style targets.
pub const INSTANCE_KERNEL: usize = 5;
/// Default structuring-element size for per-class semantic targets.
pub const SEMANTIC_KERNEL: usize = 15;

/// Dense rank-2 field over {0, 1}, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask { height, width, bits: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask { height, width, bits: vec![1; height * width] }
    }

    /// Build from raw bytes; any nonzero byte becomes 1.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{} bytes ({height}x{width})", height * width),
                got: format!("{}", bytes.len()),
            });
        }
        let bits = bytes.iter().map(|&b| u8::from(b != 0)).collect();
        Ok(BinaryMask { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(u8::from(f(y, x)));
            }
        }
        BinaryMask { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = u8::from(v);
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_all_zero(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(u8, u8) -> u8) -> BinaryMask {
        debug_assert!(self.same_shape(other));
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect();
        BinaryMask { height: self.height, width: self.width, bits }
    }

    pub fn intersect(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a | b)
    }

    /// Set difference: pixels in `self` and not in `other`.
    pub fn minus(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a & (1 - b))
    }

    pub fn complement(&self) -> BinaryMask {
        let bits = self.bits.iter().map(|&b| 1 - b).collect();
        BinaryMask { height: self.height, width: self.width, bits }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| a <= b)
    }

    pub fn is_disjoint_from(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| a & b == 0)
    }
}

/// Odd structuring-element side length in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelSize(usize);

impl KernelSize {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(Error::InvalidKernel(k));
        }
        Ok(KernelSize(k))
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// Half-width of the window: (k - 1) / 2.
    pub fn radius(self) -> usize {
        (self.0 - 1) / 2
    }
}

/// The four supervision rasters derived from a mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetSet {
    /// The mask itself.
    pub gs: BinaryMask,
    /// Thin contour from the Laplacian stencil.
    pub gb: BinaryMask,
    /// Contraction band: dilation minus mask.
    pub gc: BinaryMask,
    /// Expansion band: mask minus erosion.
    pub ge: BinaryMask,
}

// Separable window max/min with border clamping. `shrink` picks min (erosion).
fn window_filter(mask: &BinaryMask, k: KernelSize, shrink: bool) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let r = k.radius();
    let pick = |a: u8, b: u8| if shrink { a.min(b) } else { a.max(b) };
    // Horizontal pass.
    let mut mid = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let mut acc = mask.bits()[y * w + lo];
            for xx in lo + 1..=hi {
                acc = pick(acc, mask.bits()[y * w + xx]);
            }
            mid[y * w + x] = acc;
        }
    }
    // Vertical pass.
    let mut out = BinaryMask::zeros(h, w);
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            let mut acc = mid[lo * w + x];
            for yy in lo + 1..=hi {
                acc = pick(acc, mid[yy * w + x]);
            }
            out.set(y, x, acc != 0);
        }
    }
    out
}

/// A pixel is set iff any pixel of the k x k window around it (clamped at the
/// border) is set.
pub fn dilate(mask: &BinaryMask, k: KernelSize) -> BinaryMask {
    window_filter(mask, k, false)
}

/// A pixel is set iff every pixel of the k x k window around it (clamped at
/// the border) is set.
pub fn erode(mask: &BinaryMask, k: KernelSize) -> BinaryMask {
    window_filter(mask, k, true)
}

/// Contraction and expansion bands: what dilation adds and what erosion removes.
pub fn squeeze_targets(mask: &BinaryMask, k: KernelSize) -> (BinaryMask, BinaryMask) {
    let gc = dilate(mask, k).minus(mask);
    let ge = mask.minus(&erode(mask, k));
    (gc, ge)
}

/// Thin contour: 3x3 Laplacian stencil (center 8, neighbors -1, zero padding),
/// flagged where the absolute response is nonzero.
pub fn boundary_target(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let mut out = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut resp: i32 = 8 * i32::from(mask.get(y, x));
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                    if ny >= 0 && ny < h as i32 && nx >= 0 && nx < w as i32 {
                        resp -= i32::from(mask.get(ny as usize, nx as usize));
                    }
                }
            }
            out.set(y, x, resp != 0);
        }
    }
    out
}

/// All four supervision rasters for one mask.
pub fn target_set(mask: &BinaryMask, k: KernelSize) -> TargetSet {
    let (gc, ge) = squeeze_targets(mask, k);
    TargetSet { gs: mask.clone(), gb: boundary_target(mask), gc, ge }
}

/// Binarize each class of a label map and derive its target set.
///
/// Labels must lie in `[0, num_classes)`. The default kernel for semantic use
/// is [`SEMANTIC_KERNEL`].
pub fn per_class_targets(labels: &[u32], height: usize, width: usize, num_classes: usize, k: KernelSize) -> Result<Vec<TargetSet>> {
    if labels.len() != height * width {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels ({height}x{width})", height * width),
            got: format!("{}", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::LabelOutOfRange { label: bad as i64, num_classes });
    }
    let mut out = Vec::with_capacity(num_classes);
    for class in 0..num_classes as u32 {
        let gs = BinaryMask::from_fn(height, width, |y, x| labels[y * width + x] == class);
        out.push(target_set(&gs, k));
    }
    Ok(out)
}
