//! Dense binary masks stored row-major.

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width, "mask data length mismatch");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Tight bounding rectangle with exclusive max sides, `None` if empty.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut r0, mut c0) = (usize::MAX, usize::MAX);
        let (mut r1, mut c1) = (0, 0);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    r0 = r0.min(r);
                    r1 = r1.max(r);
                    c0 = c0.min(c);
                    c1 = c1.max(c);
                }
            }
        }
        (r0 != usize::MAX)
            .then(|| BBox::new(c0 as f64, r0 as f64, (c1 + 1) as f64, (r1 + 1) as f64))
    }

    /// Mean of the pixel centres `(col + 0.5, row + 0.5)`.
    pub fn centroid(&self) -> Option<[f64; 2]> {
        let (mut sx, mut sy, mut n) = (0u64, 0u64, 0u64);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    sx += c as u64;
                    sy += r as u64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| {
            let n = n as f64;
            [sx as f64 / n + 0.5, sy as f64 / n + 0.5]
        })
    }

    pub fn intersection(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn union(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a || b)
            .count()
    }

    /// Downsample by an integer factor; a cell is set when at least half of
    /// its source pixels are set.
    pub fn downsample(&self, factor: usize) -> Mask {
        let h = self.height / factor;
        let w = self.width / factor;
        let need = (factor * factor).div_ceil(2);
        Mask::from_fn(h, w, |r, c| {
            let mut count = 0;
            for dr in 0..factor {
                for dc in 0..factor {
                    if self.get(r * factor + dr, c * factor + dc) {
                        count += 1;
                    }
                }
            }
            count >= need
        })
    }

    /// Nearest-neighbour upsampling to `(height, width)`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        if height == self.height && width == self.width {
            return self.clone();
        }
        Mask::from_fn(height, width, |r, c| {
            let sr = (r * self.height) / height;
            let sc = (c * self.width) / width;
            self.get(sr, sc)
        })
    }
}
