//! Minimal layer-wise backpropagation over `ndarray` feature maps.
//!
//! Feature maps are `(channels, rows, cols)` arrays. Every layer exposes a
//! `forward` that returns its output together with whatever the backward pass
//! needs, and a `backward` that accumulates parameter gradients in place and
//! returns the gradient with respect to its input.

use std::fmt::Debug;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

/// Floating-point element type of the network (`f32` for training, `f64`
/// for gradient checking).
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).unwrap()
    }

    fn f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap()
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            value: vec![T::zero(); n],
            grad: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let mut p = Self::zeros(shape);
        p.value.iter_mut().for_each(|x| *x = T::of(v));
        p
    }

    pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        for x in p.value.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x = T::of(z * std);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn matrix(&self) -> ArrayView2<'_, T> {
        let rows = self.shape[0];
        ArrayView2::from_shape((rows, self.value.len() / rows), &self.value).unwrap()
    }

    pub fn grad_matrix_mut(&mut self) -> ArrayViewMut2<'_, T> {
        let rows = self.shape[0];
        let cols = self.grad.len() / rows;
        ArrayViewMut2::from_shape((rows, cols), &mut self.grad).unwrap()
    }
}

/// Visitor over `(name, param)` pairs; names are dotted paths.
pub trait Parameterized<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// 2-D convolution with square kernel, zero padding and bias.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    /// `(out, in, k, k)`, stored as `(out, in * k * k)` row-major.
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Array2<T>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl<T: Real> Conv2d<T> {
    /// He-normal weights and zero bias.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        Self::with_std(in_channels, out_channels, kernel, stride, (2.0 / fan_in).sqrt(), rng)
    }

    pub fn with_std(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: Param::normal(&[out_channels, in_channels, kernel, kernel], std, rng),
            bias: Param::zeros(&[out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        let p = self.padding;
        ((h + 2 * p - k) / self.stride + 1, (w + 2 * p - k) / self.stride + 1)
    }

    fn im2col(&self, x: &Array3<T>) -> Array2<T> {
        let (ci, h, w) = x.dim();
        let k = self.kernel;
        if k == 1 && self.stride == 1 {
            return x.to_shape((ci, h * w)).unwrap().to_owned();
        }
        let (ho, wo) = self.output_size(h, w);
        let (s, p) = (self.stride as isize, self.padding as isize);
        let mut cols = Array2::<T>::zeros((ci * k * k, ho * wo));
        let xs = x.as_slice().expect("standard layout");
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let mut dst = cols.row_mut(row);
                    let dst = dst.as_slice_mut().unwrap();
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &xs[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                        let out = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<T>, in_shape: (usize, usize, usize), out_hw: (usize, usize)) -> Array3<T> {
        let (ci, h, w) = in_shape;
        let k = self.kernel;
        if k == 1 && self.stride == 1 {
            return dcols.to_shape((ci, h, w)).unwrap().to_owned();
        }
        let (ho, wo) = out_hw;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let mut dx = Array3::<T>::zeros((ci, h, w));
        let dxs = dx.as_slice_mut().unwrap();
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = dcols.row(row);
                    let src = src.as_slice().unwrap();
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (c * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dxs[base + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Array3<T>) -> (Array3<T>, ConvCache<T>) {
        let (ci, h, w) = x.dim();
        assert_eq!(ci, self.in_channels, "conv input channel mismatch");
        let (ho, wo) = self.output_size(h, w);
        let cols = self.im2col(x);
        let mut out = Array2::<T>::zeros((self.out_channels, ho * wo));
        for (mut row, &b) in out.outer_iter_mut().zip(&self.bias.value) {
            row.fill(b);
        }
        general_mat_mul(T::one(), &self.weight.matrix(), &cols, T::one(), &mut out);
        let out = out.into_shape_with_order((self.out_channels, ho, wo)).unwrap();
        (
            out,
            ConvCache {
                cols,
                in_shape: (ci, h, w),
                out_hw: (ho, wo),
            },
        )
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, cache: &ConvCache<T>, dy: &Array3<T>, need_input_grad: bool) -> Option<Array3<T>> {
        let (ho, wo) = cache.out_hw;
        let dy2 = dy.view().into_shape_with_order((self.out_channels, ho * wo)).unwrap();
        general_mat_mul(T::one(), &dy2, &cache.cols.t(), T::one(), &mut self.weight.grad_matrix_mut());
        for (g, row) in self.bias.grad.iter_mut().zip(dy2.outer_iter()) {
            *g += row.sum();
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = Array2::<T>::zeros(cache.cols.dim());
        general_mat_mul(T::one(), &self.weight.matrix().t(), &dy2, T::zero(), &mut dcols);
        Some(self.col2im(&dcols, cache.in_shape, cache.out_hw))
    }
}

impl<T: Real> Parameterized<T> for Conv2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub fn relu_inplace<T: Real>(x: &mut Array3<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Masks `dy` by the positive support of the ReLU output `y`.
pub fn relu_backward<T: Real>(y: &Array3<T>, dy: &mut Array3<T>) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &v| {
        if v <= T::zero() {
            *d = T::zero();
        }
    });
}

/// Separable linear resampling `Y_c = A_rows · X_c · A_colsᵀ`.
#[derive(Debug, Clone)]
pub struct Resize<T> {
    rows: Array2<T>,
    cols: Array2<T>,
}

/// Interpolation weights along one axis.
fn axis_matrix(n_in: usize, n_out: usize, bilinear: bool) -> Array2<f64> {
    let mut a = Array2::<f64>::zeros((n_out, n_in));
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        if bilinear {
            // half-pixel centres, edge-clamped
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let lambda = src - i0 as f64;
            a[[o, i0]] += 1.0 - lambda;
            a[[o, i1]] += lambda;
        } else {
            let i = ((o as f64 * scale).floor() as usize).min(n_in - 1);
            a[[o, i]] = 1.0;
        }
    }
    a
}

impl<T: Real> Resize<T> {
    pub fn bilinear(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        Self {
            rows: axis_matrix(in_hw.0, out_hw.0, true).mapv(T::of),
            cols: axis_matrix(in_hw.1, out_hw.1, true).mapv(T::of),
        }
    }

    pub fn nearest(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        Self {
            rows: axis_matrix(in_hw.0, out_hw.0, false).mapv(T::of),
            cols: axis_matrix(in_hw.1, out_hw.1, false).mapv(T::of),
        }
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.rows.nrows(), self.cols.nrows())
    }

    pub fn forward(&self, x: &Array3<T>) -> Array3<T> {
        let (c, _, _) = x.dim();
        let (ho, wo) = self.out_hw();
        let mut out = Array3::<T>::zeros((c, ho, wo));
        for (src, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
            let tmp = self.rows.dot(&src);
            general_mat_mul(T::one(), &tmp, &self.cols.t(), T::zero(), &mut dst);
        }
        out
    }

    pub fn backward(&self, dy: &Array3<T>) -> Array3<T> {
        let (c, _, _) = dy.dim();
        let (hi, wi) = (self.rows.ncols(), self.cols.ncols());
        let mut dx = Array3::<T>::zeros((c, hi, wi));
        for (src, mut dst) in dy.outer_iter().zip(dx.outer_iter_mut()) {
            let tmp = self.rows.t().dot(&src);
            general_mat_mul(T::one(), &tmp, &self.cols, T::zero(), &mut dst);
        }
        dx
    }
}

pub fn concat_channels<T: Real>(parts: &[&Array3<T>]) -> Array3<T> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).unwrap()
}

pub fn split_channels<T: Real>(x: &Array3<T>, sizes: &[usize]) -> Vec<Array3<T>> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&n| {
            let part = x.slice(s![start..start + n, .., ..]).to_owned();
            start += n;
            part
        })
        .collect()
}

pub fn add_into<T: Real>(acc: &mut Array3<T>, x: &Array3<T>) {
    *acc += x;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn conv_reference(conv: &Conv2d<f64>, x: &Array3<f64>) -> Array3<f64> {
        let (ci, h, w) = x.dim();
        let (ho, wo) = conv.output_size(h, w);
        let k = conv.kernel;
        let mut out = Array3::zeros((conv.out_channels, ho, wo));
        for o in 0..conv.out_channels {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = conv.bias.value[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    let wi = ((o * ci + c) * k + ky) * k + kx;
                                    acc += conv.weight.value[wi] * x[[c, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    out[[o, oy, ox]] = acc;
                }
            }
        }
        out
    }

    fn random_map(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_reference_for_strides_and_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, s) in [(3, 1), (3, 2), (1, 1)] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, s, &mut rng);
            conv.bias = Param::normal(&[4], 0.5, &mut rng);
            let x = random_map(&mut rng, (3, 8, 6));
            let (y, _) = conv.forward(&x);
            let r = conv_reference(&conv, &x);
            assert_eq!(y.dim(), r.dim());
            for (a, b) in y.iter().zip(r.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (k, s) in [(3, 2), (3, 1), (1, 1)] {
            let mut conv = Conv2d::<f64>::new(2, 3, k, s, &mut rng);
            let x = random_map(&mut rng, (2, 6, 6));
            let (y, cache) = conv.forward(&x);
            let probe = random_map(&mut rng, y.dim());
            let loss = |c: &Conv2d<f64>, x: &Array3<f64>| (c.forward(x).0 * &probe).sum();
            let dx = conv.backward(&cache, &probe, true).unwrap();
            let h = 1e-6;
            for i in [0usize, 5, 17].map(|i| i % conv.weight.value.len()) {
                let mut cp = conv.clone();
                cp.weight.value[i] += h;
                let mut cm = conv.clone();
                cm.weight.value[i] -= h;
                let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
                assert!((fd - conv.weight.grad[i]).abs() < 1e-6);
            }
            for idx in [(0, 0, 0), (1, 3, 4), (0, 5, 5)] {
                let mut xp = x.clone();
                xp[idx] += h;
                let mut xm = x.clone();
                xm[idx] -= h;
                let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
                assert!((fd - dx[idx]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bilinear_resize_adjoint_identity() {
        // <Ax, y> == <x, Aᵀy>
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Resize::<f64>::bilinear((4, 3), (16, 12));
        let x = random_map(&mut rng, (2, 4, 3));
        let y = random_map(&mut rng, (2, 16, 12));
        let lhs = (r.forward(&x) * &y).sum();
        let rhs = (r.backward(&y) * &x).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn bilinear_preserves_constants_and_nearest_replicates() {
        let x = Array3::from_elem((1, 4, 4), 2.5f64);
        let y = Resize::bilinear((4, 4), (16, 16)).forward(&x);
        assert!(y.iter().all(|&v| (v - 2.5).abs() < 1e-12));
        let x = Array3::from_shape_fn((1, 2, 2), |(_, r, c)| (r * 2 + c) as f64);
        let y = Resize::nearest((2, 2), (4, 4)).forward(&x);
        assert_eq!(y[[0, 1, 1]], 0.0);
        assert_eq!(y[[0, 3, 2]], 3.0);
        assert_eq!(y[[0, 0, 3]], 1.0);
    }
}
