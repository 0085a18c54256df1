//! Dense multi-channel grid functions and the convolution primitives the
//! multigrid operator is assembled from.
//!
//! All convolutions are cross-correlations (no kernel flip). A field stores
//! its samples channel-major, then row, then column.

mod conv;
mod pad;
mod pointwise;

pub use conv::{
    conv2d, conv2d_grad_input, conv2d_grad_kernel, conv_transpose2d, corr_valid, corr_valid_adjoint,
    corr_valid_kernel_grad, prolong, prolong_grad_input, prolong_grad_kernel,
};
pub use pad::{pad, pad_adjoint};
pub use pointwise::{channel_mix, channel_mix_grads, gelu, gelu_derivative, gelu_scalar};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};

/// How the ring outside a field is filled before a padded convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Zero ring of width 1 (homogeneous Dirichlet).
    DirichletZero,
    /// Mirror about the edge sample, excluding it: `padded[-1] = f[1]`.
    NeumannReflect,
    /// Wrap-around.
    PeriodicCircular,
    /// No padding; the convolution only visits full windows.
    NoPad,
}

impl BoundaryMode {
    pub fn pad_width(self) -> usize {
        match self {
            BoundaryMode::NoPad => 0,
            _ => 1,
        }
    }

    pub fn is_padded(self) -> bool {
        self != BoundaryMode::NoPad
    }

    pub const PADDED: [BoundaryMode; 3] =
        [BoundaryMode::DirichletZero, BoundaryMode::NeumannReflect, BoundaryMode::PeriodicCircular];
}

/// A `channels × height × width` grid function.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(invalid(format!("field dimensions must be positive, got {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(shape(format!(
                "field {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "field dimensions must be positive");
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        let mut f = Self::zeros(channels, height, width);
        f.data.fill(value);
        f
    }

    /// Builds a field by evaluating `g(channel, row, col)` at every site.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut g: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut f = Self::zeros(channels, height, width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    f.data[(c * height + y) * width + x] = g(c, y, x);
                }
            }
        }
        f
    }

    pub fn zeros_like(other: &Field) -> Self {
        Self::zeros(other.channels, other.height, other.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn check_same_shape(&self, other: &Field, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(shape(format!("{what}: {:?} vs {:?}", self.dims(), other.dims())))
        }
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.check_same_shape(other, "add")?;
        let mut out = self.clone();
        out.add_assign(other);
        Ok(out)
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.check_same_shape(other, "sub")?;
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        Ok(out)
    }

    /// In-place `self += other`. Panics on shape mismatch.
    pub fn add_assign(&mut self, other: &Field) {
        assert!(self.same_shape(other), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &Field) {
        assert!(self.same_shape(other), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&self, alpha: f64) -> Field {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    pub fn dot(&self, other: &Field) -> f64 {
        assert!(self.same_shape(other), "dot shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Circular shift by `(dy, dx)`: `out[y][x] = self[y - dy][x - dx]` (mod size).
    pub fn roll(&self, dy: isize, dx: isize) -> Field {
        let (c, h, w) = self.dims();
        Field::from_fn(c, h, w, |ch, y, x| {
            let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
            let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
            self.get(ch, sy, sx)
        })
    }

    /// The values on the outermost ring of every channel.
    pub fn boundary_ring(&self) -> Vec<f64> {
        let (c, h, w) = self.dims();
        let mut out = Vec::new();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                        out.push(self.get(ch, y, x));
                    }
                }
            }
        }
        out
    }

    /// Copy with the outermost ring of every channel set to zero.
    pub fn mask_ring(&self) -> Field {
        let (c, h, w) = self.dims();
        let mut out = self.clone();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                        out.set(ch, y, x, 0.0);
                    }
                }
            }
        }
        out
    }

    /// Channel `c` as a single-channel field.
    pub fn channel(&self, c: usize) -> Field {
        Field { channels: 1, height: self.height, width: self.width, data: self.plane(c).to_vec() }
    }

    /// Interior `(h-2) × (w-2)` block of every channel.
    pub fn crop_interior(&self) -> Result<Field> {
        let (c, h, w) = self.dims();
        if h < 3 || w < 3 {
            return Err(invalid(format!("cannot crop interior of {h}x{w} field")));
        }
        Ok(Field::from_fn(c, h - 2, w - 2, |ch, y, x| self.get(ch, y + 1, x + 1)))
    }
}

/// A convolution weight block indexed `[out][in][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    out_channels: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
    weights: Vec<f64>,
}

impl Kernel {
    pub fn new(out_channels: usize, in_channels: usize, kh: usize, kw: usize, weights: Vec<f64>) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || kh == 0 || kw == 0 {
            return Err(invalid("kernel dimensions must be positive"));
        }
        if weights.len() != out_channels * in_channels * kh * kw {
            return Err(shape(format!(
                "kernel {out_channels}x{in_channels}x{kh}x{kw} needs {} weights, got {}",
                out_channels * in_channels * kh * kw,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(crate::Error::NonFinite("kernel weights".into()));
        }
        Ok(Self { out_channels, in_channels, kh, kw, weights })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Self {
        Self { out_channels, in_channels, kh, kw, weights: vec![0.0; out_channels * in_channels * kh * kw] }
    }

    /// Single-channel kernel from a row-major stencil.
    pub fn from_stencil<const N: usize>(rows: [[f64; N]; N]) -> Self {
        let weights = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self { out_channels: 1, in_channels: 1, kh: N, kw: N, weights }
    }

    /// `channels × channels` kernel applying `center` at the middle tap of
    /// each diagonal channel pair; the identity for odd `k` and `center = 1`.
    pub fn delta(channels: usize, k: usize) -> Self {
        let mut out = Self::zeros(channels, channels, k, k);
        for c in 0..channels {
            out.set(c, c, k / 2, k / 2, 1.0);
        }
        out
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kh(&self) -> usize {
        self.kh
    }

    pub fn kw(&self) -> usize {
        self.kw
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.out_channels, self.in_channels, self.kh, self.kw)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, r: usize, c: usize) -> f64 {
        self.weights[((o * self.in_channels + i) * self.kh + r) * self.kw + c]
    }

    #[inline]
    pub fn set(&mut self, o: usize, i: usize, r: usize, c: usize, v: f64) {
        self.weights[((o * self.in_channels + i) * self.kh + r) * self.kw + c] = v;
    }

    /// The `kh × kw` tap block connecting input `i` to output `o`.
    #[inline]
    pub fn taps(&self, o: usize, i: usize) -> &[f64] {
        let n = self.kh * self.kw;
        let start = (o * self.in_channels + i) * n;
        &self.weights[start..start + n]
    }

    /// Same taps with the roles of input and output channels exchanged.
    pub fn swap_channels(&self) -> Kernel {
        let mut out = Kernel::zeros(self.in_channels, self.out_channels, self.kh, self.kw);
        for o in 0..self.out_channels {
            for i in 0..self.in_channels {
                for r in 0..self.kh {
                    for c in 0..self.kw {
                        out.set(i, o, r, c, self.get(o, i, r, c));
                    }
                }
            }
        }
        out
    }

    /// Embeds this kernel into the top-left corner of a larger zero kernel.
    pub fn embed_top_left(&self, kh: usize, kw: usize) -> Result<Kernel> {
        if kh < self.kh || kw < self.kw {
            return Err(invalid("embedding target smaller than kernel"));
        }
        let mut out = Kernel::zeros(self.out_channels, self.in_channels, kh, kw);
        for o in 0..self.out_channels {
            for i in 0..self.in_channels {
                for r in 0..self.kh {
                    for c in 0..self.kw {
                        out.set(o, i, r, c, self.get(o, i, r, c));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// A dense row-major matrix, used for the per-pixel channel mixing.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(format!("matrix {rows}x{cols} needs {} values", rows * cols)));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_rejects_wrong_length() {
        assert!(Field::new(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(Field::new(0, 2, 2, vec![]).is_err());
    }

    #[test]
    fn kernel_rejects_non_finite() {
        assert!(Kernel::new(1, 1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn roll_wraps() {
        let f = Field::new(1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(f.roll(0, 1).data(), &[3.0, 1.0, 2.0]);
        assert_eq!(f.roll(0, -1).data(), &[2.0, 3.0, 1.0]);
    }

    #[test]
    fn swap_channels_is_involution() {
        let k = Kernel::new(2, 3, 1, 2, (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(k.swap_channels().dims(), (3, 2, 1, 2));
        assert_eq!(k.swap_channels().swap_channels(), k);
    }
}
