//! Dense single-channel image grids and binary masks.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float as _;

/// A single-channel H×W image with values nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, pixels: vec![0.0; h * w] }
    }

    pub fn filled(h: usize, w: usize, value: f32) -> Self {
        Self { h, w, pixels: vec![value; h * w] }
    }

    /// Wraps an existing pixel buffer. Panics if `pixels.len() != h * w`.
    pub fn from_vec(h: usize, w: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), h * w, "pixel buffer does not match {h}x{w}");
        Self { h, w, pixels }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.w + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.pixels[row * self.w + col] = value;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.h == other.h && self.w == other.w
    }

    /// Element-wise `self * a + other * b`.
    pub fn lin_comb(&self, a: f32, other: &Image, b: f32) -> Image {
        assert!(self.same_shape(other), "shape mismatch in lin_comb");
        let pixels = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(x, y)| x * a + y * b)
            .collect();
        Image { h: self.h, w: self.w, pixels }
    }

    /// Element-wise `self * a`.
    pub fn scaled(&self, a: f32) -> Image {
        let pixels = self.pixels.iter().map(|x| x * a).collect();
        Image { h: self.h, w: self.w, pixels }
    }

    pub fn clamp_unit(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(-1.0, 1.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|p| p.is_finite())
    }

    /// Pearson correlation over the cells selected by `mask`.
    pub fn masked_correlation(&self, other: &Image, mask: &Mask) -> f32 {
        assert!(self.same_shape(other), "shape mismatch in masked_correlation");
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (i, &m) in mask.bits.iter().enumerate() {
            if m {
                xs.push(self.pixels[i]);
                ys.push(other.pixels[i]);
            }
        }
        pearson(&xs, &ys)
    }
}

fn pearson(xs: &[f32], ys: &[f32]) -> f32 {
    let n = xs.len() as f32;
    if xs.is_empty() {
        return 0.0;
    }
    let mx = xs.iter().sum::<f32>() / n;
    let my = ys.iter().sum::<f32>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    let denom = (sxx * syy).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        sxy / denom
    }
}

/// A binary H×W mask; `true` marks the clothing region to be inpainted,
/// `false` the identity region to preserve.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w, bits: vec![false; h * w] }
    }

    pub fn from_bits(h: usize, w: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), h * w, "mask buffer does not match {h}x{w}");
        Self { h, w, bits }
    }

    /// Mask covering the row band `rows.0 ..= rows.1` across the full width.
    pub fn row_band(h: usize, w: usize, rows: (usize, usize)) -> Self {
        let mut mask = Self::new(h, w);
        for r in rows.0..=rows.1 {
            for c in 0..w {
                mask.bits[r * w + c] = true;
            }
        }
        mask
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.w + col]
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn matches_shape(&self, image: &Image) -> bool {
        self.h == image.h() && self.w == image.w()
    }

    /// `(1-m) ∘ known + m ∘ masked`, cell-exact on the known region.
    pub fn compose(&self, known: &Image, masked: &Image) -> Image {
        assert!(self.matches_shape(known) && self.matches_shape(masked), "shape mismatch in compose");
        let pixels = self
            .bits
            .iter()
            .zip(known.pixels().iter().zip(masked.pixels()))
            .map(|(&m, (&k, &x))| if m { x } else { k })
            .collect();
        Image::from_vec(self.h, self.w, pixels)
    }

    /// Overwrites the unmasked (known) region of `target` with `known`.
    pub fn overwrite_known(&self, target: &mut Image, known: &Image) {
        assert!(self.matches_shape(target) && self.matches_shape(known), "shape mismatch in overwrite_known");
        for (i, &m) in self.bits.iter().enumerate() {
            if !m {
                target.pixels_mut()[i] = known.pixels()[i];
            }
        }
    }
}
