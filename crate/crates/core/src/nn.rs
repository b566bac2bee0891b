//! Minimal layer kit with explicit backward passes.
//!
//! Feature maps are stored pixel-major as `(h·w, channels)` matrices so that
//! 1×1 convolutions are plain matrix products and 3×3 convolutions go through
//! an im2col buffer.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A spatial feature map, row-major over pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    /// `(height·width, channels)`
    pub data: Array2<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, data: Array2<f64>) -> Result<Self> {
        if data.nrows() != height * width {
            return Err(Error::Shape {
                context: "feature map",
                expected: format!("{} rows ({height}x{width})", height * width),
                actual: format!("{} rows", data.nrows()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            data: Array2::zeros((height * width, channels)),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels())
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[[i * self.width + j, c]]
    }

    pub fn set(&mut self, i: usize, j: usize, c: usize, v: f64) {
        self.data[[i * self.width + j, c]] = v;
    }

    /// Mirrors the map left to right.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.height {
            for j in 0..self.width {
                let src = i * self.width + (self.width - 1 - j);
                out.data
                    .row_mut(i * self.width + j)
                    .assign(&self.data.row(src));
            }
        }
        out
    }
}

/// Named view of one trainable tensor. `decay` marks weights subject to
/// weight decay (biases and normalization parameters are exempt).
pub struct Slot<'a> {
    pub name: String,
    pub decay: bool,
    pub values: &'a [f64],
}

pub struct SlotMut<'a> {
    pub name: String,
    pub decay: bool,
    pub values: &'a mut [f64],
}

/// Anything made of trainable tensors. Gradients and optimizer state reuse
/// the same type, so slot lists line up index for index.
pub trait Parameters {
    fn slots(&self) -> Vec<Slot<'_>>;
    fn slots_mut(&mut self) -> Vec<SlotMut<'_>>;

    fn num_parameters(&self) -> usize {
        self.slots().iter().map(|s| s.values.len()).sum()
    }

    fn fill(&mut self, value: f64) {
        for s in self.slots_mut() {
            s.values.fill(value);
        }
    }

    /// `self += scale * other`
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (dst, src) in self.slots_mut().into_iter().zip(other.slots()) {
            for (d, s) in dst.values.iter_mut().zip(src.values) {
                *d += scale * s;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.slots()
            .iter()
            .all(|s| s.values.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn slot<'a>(prefix: &str, name: &str, decay: bool, values: &'a [f64]) -> Slot<'a> {
    Slot {
        name: format!("{prefix}{name}"),
        decay,
        values,
    }
}

pub(crate) fn slot_mut<'a>(
    prefix: &str,
    name: &str,
    decay: bool,
    values: &'a mut [f64],
) -> SlotMut<'a> {
    SlotMut {
        name: format!("{prefix}{name}"),
        decay,
        values,
    }
}

fn std_slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}

fn std_slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous")
}

fn std_slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn std_slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

pub(crate) fn uniform_fan_in<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

pub(crate) fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Fully connected map `y = x·W + b`, also used as a 1×1 convolution over
/// the pixel rows of a [`FeatureMap`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `(in, out)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn init_uniform<R: Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: uniform_fan_in(rng, inputs, outputs, inputs),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn forward_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad`, returns `dx`.
    pub fn backward(&self, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>, grad: &mut Dense) -> Array2<f64> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    pub fn backward_vec(&self, x: &Array1<f64>, dy: &Array1<f64>, grad: &mut Dense) -> Array1<f64> {
        let outer = x
            .view()
            .insert_axis(Axis(1))
            .dot(&dy.view().insert_axis(Axis(0)));
        grad.weight += &outer;
        grad.bias += dy;
        self.weight.dot(dy)
    }

    pub(crate) fn push_slots<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a>>) {
        out.push(slot(prefix, "weight", true, std_slice2(&self.weight)));
        out.push(slot(prefix, "bias", false, std_slice1(&self.bias)));
    }

    pub(crate) fn push_slots_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a>>) {
        out.push(slot_mut(prefix, "weight", true, std_slice2_mut(&mut self.weight)));
        out.push(slot_mut(prefix, "bias", false, std_slice1_mut(&mut self.bias)));
    }
}

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3x3 {
    /// `(9·in, out)`, row index `(ky·3 + kx)·in + c`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv3x3 {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((9 * inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn init_uniform<R: Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: uniform_fan_in(rng, 9 * inputs, outputs, 9 * inputs),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows() / 9
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    /// Returns the output and the im2col buffer needed by `backward`.
    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, Array2<f64>) {
        let cols = im2col(x);
        let y = cols.dot(&self.weight) + &self.bias;
        (
            FeatureMap {
                height: x.height,
                width: x.width,
                data: y,
            },
            cols,
        )
    }

    pub fn backward(&self, cols: &Array2<f64>, height: usize, width: usize, dy: &Array2<f64>, grad: &mut Conv3x3) -> Array2<f64> {
        grad.weight += &cols.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        let dcols = dy.dot(&self.weight.t());
        col2im(&dcols, height, width, self.inputs())
    }

    pub(crate) fn push_slots<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a>>) {
        out.push(slot(prefix, "weight", true, std_slice2(&self.weight)));
        out.push(slot(prefix, "bias", false, std_slice1(&self.bias)));
    }

    pub(crate) fn push_slots_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a>>) {
        out.push(slot_mut(prefix, "weight", true, std_slice2_mut(&mut self.weight)));
        out.push(slot_mut(prefix, "bias", false, std_slice1_mut(&mut self.bias)));
    }
}

fn im2col(x: &FeatureMap) -> Array2<f64> {
    let (h, w, c) = x.shape();
    let mut cols = Array2::zeros((h * w, 9 * c));
    for i in 0..h {
        for j in 0..w {
            let row = i * w + j;
            for ky in 0..3 {
                let si = i as isize + ky as isize - 1;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sj = j as isize + kx as isize - 1;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let src = si as usize * w + sj as usize;
                    let off = (ky * 3 + kx) * c;
                    cols.slice_mut(s![row, off..off + c])
                        .assign(&x.data.row(src));
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &Array2<f64>, h: usize, w: usize, c: usize) -> Array2<f64> {
    let mut dx = Array2::zeros((h * w, c));
    for i in 0..h {
        for j in 0..w {
            let row = i * w + j;
            for ky in 0..3 {
                let si = i as isize + ky as isize - 1;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sj = j as isize + kx as isize - 1;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let dst = si as usize * w + sj as usize;
                    let off = (ky * 3 + kx) * c;
                    let mut target = dx.row_mut(dst);
                    target += &dcols.slice(s![row, off..off + c]);
                }
            }
        }
    }
    dx
}

/// Per-sample normalization over every pixel and channel (a single-group
/// group norm) followed by a per-channel affine transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub const NORM_EPS: f64 = 1e-5;

pub struct NormCache {
    x_hat: Array2<f64>,
    inv_std: f64,
}

impl Norm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        Self {
            gamma: Array1::zeros(channels),
            beta: Array1::zeros(channels),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + NORM_EPS).sqrt();
        let x_hat = x.mapv(|v| (v - mean) * inv_std);
        let y = &x_hat * &self.gamma + &self.beta;
        (y, NormCache { x_hat, inv_std })
    }

    pub fn backward(&self, cache: &NormCache, dy: &Array2<f64>, grad: &mut Norm) -> Array2<f64> {
        grad.gamma += &(dy * &cache.x_hat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dx_hat = dy * &self.gamma;
        let n = dx_hat.len() as f64;
        let sum_d = dx_hat.sum();
        let sum_dx = (&dx_hat * &cache.x_hat).sum();
        let scale = cache.inv_std / n;
        let mut dx = dx_hat * n;
        dx -= sum_d;
        dx -= &(&cache.x_hat * sum_dx);
        dx * scale
    }

    pub(crate) fn push_slots<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a>>) {
        out.push(slot(prefix, "gamma", false, std_slice1(&self.gamma)));
        out.push(slot(prefix, "beta", false, std_slice1(&self.beta)));
    }

    pub(crate) fn push_slots_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a>>) {
        out.push(slot_mut(prefix, "gamma", false, std_slice1_mut(&mut self.gamma)));
        out.push(slot_mut(prefix, "beta", false, std_slice1_mut(&mut self.beta)));
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of ReLU given the pre-activation input.
pub fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(pre, |d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let z = exp.sum();
    exp / z
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
        FeatureMap::new(h, w, normal(rng, h * w, c, 1.0)).unwrap()
    }

    // Direct 3×3 convolution with explicit bounds checks.
    fn conv_loop(conv: &Conv3x3, x: &FeatureMap) -> FeatureMap {
        let (h, w, c) = x.shape();
        let mut out = FeatureMap::zeros(h, w, conv.outputs());
        for i in 0..h {
            for j in 0..w {
                for o in 0..conv.outputs() {
                    let mut acc = conv.bias[o];
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            let (si, sj) = (i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                            if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                continue;
                            }
                            for ci in 0..c {
                                acc += conv.weight[[(ky * 3 + kx) * c + ci, o]]
                                    * x.get(si as usize, sj as usize, ci);
                            }
                        }
                    }
                    out.set(i, j, o, acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv3x3_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv3x3::init_uniform(&mut rng, 4, 5);
        let x = random_map(&mut rng, 3, 5, 4);
        let (y, _) = conv.forward(&x);
        let expected = conv_loop(&conv, &x);
        for (a, b) in y.data.iter().zip(expected.data.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn conv3x3_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = Conv3x3::init_uniform(&mut rng, 3, 2);
        let x = random_map(&mut rng, 3, 4, 3);
        let dy = normal(&mut rng, 12, 2, 1.0);
        let (_, cols) = conv.forward(&x);
        let mut grad = Conv3x3::zeros(3, 2);
        let dx = conv.backward(&cols, 3, 4, &dy, &mut grad);
        let objective = |x: &FeatureMap| (&conv.forward(x).0.data * &dy).sum();
        let h = 1e-6;
        for idx in [(0, 0), (5, 1), (11, 2), (7, 0)] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
            assert_abs_diff_eq!(dx[idx], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut norm = Norm::new(3);
        norm.gamma = Array1::from(vec![0.5, -1.2, 2.0]);
        norm.beta = Array1::from(vec![0.1, 0.0, -0.3]);
        let x = normal(&mut rng, 6, 3, 2.0);
        let dy = normal(&mut rng, 6, 3, 1.0);
        let (_, cache) = norm.forward(&x);
        let mut grad = Norm::zeros(3);
        let dx = norm.backward(&cache, &dy, &mut grad);
        let objective = |x: &Array2<f64>| (&norm.forward(x).0 * &dy).sum();
        let h = 1e-6;
        for idx in [(0, 0), (2, 1), (5, 2)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
            assert_abs_diff_eq!(dx[idx], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax(&Array1::from(vec![1000.0, 1000.0]));
        assert_eq!(p[0], 0.5);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn flip_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_map(&mut rng, 2, 3, 2);
        assert_eq!(x.flip_horizontal().flip_horizontal(), x);
        assert_eq!(x.flip_horizontal().get(1, 0, 1), x.get(1, 2, 1));
    }
}
