use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Row-major binary grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(width: u32, height: u32) -> Self {
        Bitmap { width, height, bits: vec![false; (width as usize) * (height as usize)] }
    }

    pub fn filled(width: u32, height: u32) -> Self {
        Bitmap { width, height, bits: vec![true; (width as usize) * (height as usize)] }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity((width as usize) * (height as usize));
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Bitmap { width, height, bits }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y as usize) * (self.width as usize) + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.bits[(y as usize) * w + x as usize] = value;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|b| *b)
    }

    pub fn union_with(&mut self, other: &Bitmap) -> Result<(), GeometryError> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(GeometryError::DimensionMismatch {
                expected: (self.width, self.height),
                found: (other.width, other.height),
            });
        }
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        Ok(())
    }

    pub fn to_rle(&self) -> RleMask {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &bit in &self.bits {
            if bit == current {
                run += 1;
            } else {
                counts.push(run);
                current = bit;
                run = 1;
            }
        }
        counts.push(run);
        RleMask { size: [self.height, self.width], counts }
    }
}

/// Run-length encoded bitmap as carried on the segmentation wire.
///
/// `size` is `[height, width]`; `counts` are alternating run lengths over the
/// row-major pixel order, starting with a run of zeros (possibly empty).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn decode(&self) -> Result<Bitmap, GeometryError> {
        let [height, width] = self.size;
        let total = (width as u64) * (height as u64);
        let mut bits = Vec::with_capacity(total as usize);
        let mut value = false;
        for &run in &self.counts {
            if bits.len() as u64 + run as u64 > total {
                return Err(GeometryError::BadEncoding(format!(
                    "runs exceed {height}x{width} pixels"
                )));
            }
            bits.extend(std::iter::repeat_n(value, run as usize));
            value = !value;
        }
        if bits.len() as u64 != total {
            return Err(GeometryError::BadEncoding(format!(
                "runs cover {} of {total} pixels",
                bits.len()
            )));
        }
        Ok(Bitmap { width, height, bits })
    }
}

/// An entity mask: the union of qualifying segmentation candidates for one
/// text label.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub bitmap: Bitmap,
    pub confidence: f64,
    pub entity_label: String,
    /// False when no candidate reached the confidence threshold.
    pub found: bool,
}

impl Mask {
    pub fn new(bitmap: Bitmap, confidence: f64, entity_label: impl Into<String>) -> Self {
        let found = !bitmap.is_empty();
        Mask { bitmap, confidence: confidence.clamp(0.0, 1.0), entity_label: entity_label.into(), found }
    }

    pub fn not_found(width: u32, height: u32, entity_label: impl Into<String>) -> Self {
        Mask { bitmap: Bitmap::new(width, height), confidence: 0.0, entity_label: entity_label.into(), found: false }
    }

    pub fn full(width: u32, height: u32, entity_label: impl Into<String>) -> Self {
        Mask::new(Bitmap::filled(width, height), 1.0, entity_label)
    }

    pub fn width(&self) -> u32 {
        self.bitmap.width()
    }

    pub fn height(&self) -> u32 {
        self.bitmap.height()
    }

    pub fn is_empty(&self) -> bool {
        self.bitmap.is_empty()
    }
}

/// Half-open pixel box: rows `top..bottom`, columns `left..right`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub top: u32,
    pub left: u32,
    pub bottom: u32,
    pub right: u32,
}

impl BBox {
    pub fn new(top: u32, left: u32, bottom: u32, right: u32) -> Self {
        BBox { top, left, bottom, right }
    }

    pub fn height(&self) -> u32 {
        self.bottom - self.top
    }

    pub fn width(&self) -> u32 {
        self.right - self.left
    }

    pub fn is_valid_for(&self, width: u32, height: u32) -> bool {
        self.top < self.bottom && self.bottom <= height && self.left < self.right && self.right <= width
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        (self.top..self.bottom).contains(&y) && (self.left..self.right).contains(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rle_layout() {
        let bm = Bitmap::from_fn(3, 2, |x, y| (x, y) == (1, 0) || y == 1);
        let rle = bm.to_rle();
        assert_eq!(rle.size, [2, 3]);
        assert_eq!(rle.counts, vec![1, 1, 1, 3]);

        let leading_one = Bitmap::filled(2, 1).to_rle();
        assert_eq!(leading_one.counts, vec![0, 2]);
    }

    #[test]
    fn rle_rejects_bad_lengths() {
        assert!(RleMask { size: [2, 2], counts: vec![1, 1] }.decode().is_err());
        assert!(RleMask { size: [2, 2], counts: vec![3, 3] }.decode().is_err());
    }

    proptest! {
        #[test]
        fn rle_round_trip(w in 1u32..12, h in 1u32..12, seed in any::<u64>()) {
            let bm = Bitmap::from_fn(w, h, |x, y| (seed >> ((x * 7 + y * 3) % 64)) & 1 == 1);
            prop_assert_eq!(bm.to_rle().decode().unwrap(), bm);
        }
    }
}
