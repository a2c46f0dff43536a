//! Binary masks and square-element morphology.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape("mask", &[height, width], &[bits.len()]));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Mask { height, width, bits }
    }

    /// Foreground where `value >= threshold`.
    pub fn binarize(values: &[f64], height: usize, width: usize, threshold: f64) -> Result<Self> {
        Self::from_bits(height, width, values.iter().map(|&v| v >= threshold).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.width + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &Mask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(
                "mask",
                &[self.height, self.width],
                &[other.height, other.width],
            ));
        }
        Ok(())
    }

    /// 0/1 values as `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.to_f64()).expect("mask shape")
    }

    /// Max filter over a `(2r+1)^2` square; out-of-frame pixels are ignored.
    pub fn dilate(&self, r: usize) -> Mask {
        self.square_filter(r, true)
    }

    /// Min filter over a `(2r+1)^2` square; out-of-frame pixels count as background.
    pub fn erode(&self, r: usize) -> Mask {
        self.square_filter(r, false)
    }

    /// Separable square filter. `any` selects dilation, otherwise erosion.
    fn square_filter(&self, r: usize, any: bool) -> Mask {
        let (h, w) = (self.height, self.width);
        // Counts of foreground in each horizontal window, then vertical.
        let window = |line: &[bool], out: &mut Vec<bool>| {
            let n = line.len();
            let mut prefix = vec![0usize; n + 1];
            for (i, &b) in line.iter().enumerate() {
                prefix[i + 1] = prefix[i] + b as usize;
            }
            out.clear();
            for i in 0..n {
                let lo = i.saturating_sub(r);
                let hi = (i + r + 1).min(n);
                let ones = prefix[hi] - prefix[lo];
                out.push(if any { ones > 0 } else { ones == 2 * r + 1 });
            }
        };
        let mut rows = vec![false; h * w];
        let mut buf = Vec::new();
        for y in 0..h {
            window(&self.bits[y * w..(y + 1) * w], &mut buf);
            rows[y * w..(y + 1) * w].copy_from_slice(&buf);
        }
        let mut out = vec![false; h * w];
        let mut col = vec![false; h];
        for x in 0..w {
            for y in 0..h {
                col[y] = rows[y * w + x];
            }
            window(&col, &mut buf);
            for y in 0..h {
                out[y * w + x] = buf[y];
            }
        }
        Mask {
            height: h,
            width: w,
            bits: out,
        }
    }

    /// Foreground pixels with at least one background 4-neighbour; the frame
    /// outside the image counts as background.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if !self.get(r, c) {
                    continue;
                }
                let edge = r == 0
                    || c == 0
                    || r + 1 == h
                    || c + 1 == w
                    || !self.get(r - 1, c)
                    || !self.get(r + 1, c)
                    || !self.get(r, c - 1)
                    || !self.get(r, c + 1);
                if edge {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn and_not(&self, other: &Mask) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && !b).collect(),
        }
    }
}
