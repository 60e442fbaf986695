//! Small convolutional backbone and feature pyramid producing P3–P7.

use ndarray::Array3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, relu_backward, relu_inplace, Conv2d, ConvCache, Param, Parameterized, Real, Resize};

/// Strides of P3..P7.
pub const LEVEL_STRIDES: [usize; 5] = [8, 16, 32, 64, 128];
pub const LEVEL_NAMES: [&str; 5] = ["P3", "P4", "P5", "P6", "P7"];
pub const NUM_LEVELS: usize = 5;

/// Image-plane point of feature location `(row, col)` at `stride`.
pub fn location_point(stride: usize, row: usize, col: usize) -> [f64; 2] {
    let s = stride as f64;
    [s * (col as f64 + 0.5), s * (row as f64 + 0.5)]
}

/// Five pyramid levels sharing one channel width.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Array3<T>>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn channels(&self) -> usize {
        self.levels[0].dim().0
    }

    pub fn level(&self, name: &str) -> Option<&Array3<T>> {
        LEVEL_NAMES.iter().position(|&n| n == name).map(|i| &self.levels[i])
    }
}

/// Input sides must be multiples of the P5 stride; P6 and P7 round up.
pub const SIZE_MULTIPLE: usize = 32;

/// `(rows, cols)` of a level for an input size.
pub fn level_hw(image_hw: (usize, usize), stride: usize) -> (usize, usize) {
    (image_hw.0.div_ceil(stride), image_hw.1.div_ceil(stride))
}

pub fn check_input_size(height: usize, width: usize) -> Result<()> {
    let top = SIZE_MULTIPLE;
    if height == 0 || height % top != 0 {
        return Err(Error::Shape(format!(
            "input height {height} is not a positive multiple of {top}"
        )));
    }
    if width == 0 || width % top != 0 {
        return Err(Error::Shape(format!(
            "input width {width} is not a positive multiple of {top}"
        )));
    }
    Ok(())
}

/// Convolution followed by ReLU, caching the activation.
#[derive(Debug, Clone)]
pub struct ConvRelu<T> {
    pub conv: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct ConvReluCache<T> {
    conv: ConvCache<T>,
    out: Array3<T>,
}

impl<T: Real> ConvRelu<T> {
    pub fn new(conv: Conv2d<T>) -> Self {
        Self { conv }
    }

    pub fn forward(&self, x: &Array3<T>) -> (Array3<T>, ConvReluCache<T>) {
        let (mut y, conv) = self.conv.forward(x);
        relu_inplace(&mut y);
        (
            y.clone(),
            ConvReluCache { conv, out: y },
        )
    }

    pub fn backward(&mut self, cache: &ConvReluCache<T>, mut dy: Array3<T>, need_input_grad: bool) -> Option<Array3<T>> {
        relu_backward(&cache.out, &mut dy);
        self.conv.backward(&cache.conv, &dy, need_input_grad)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone<T> {
    stem: ConvRelu<T>,
    stages: Vec<[ConvRelu<T>; 2]>,
}

#[derive(Debug, Clone)]
pub struct BackboneCache<T> {
    stem: ConvReluCache<T>,
    stages: Vec<[ConvReluCache<T>; 2]>,
}

impl<T: Real> Backbone<T> {
    /// Stem at stride 2, then one downsampling stage per entry of `widths`;
    /// the last three stage outputs feed the pyramid at strides 8, 16, 32.
    pub fn new(widths: [usize; 4], rng: &mut impl Rng) -> Self {
        let stem = ConvRelu::new(Conv2d::new(3, widths[0], 3, 2, rng));
        let mut prev = widths[0];
        let stages = widths
            .iter()
            .map(|&w| {
                let a = ConvRelu::new(Conv2d::new(prev, w, 3, 2, rng));
                let b = ConvRelu::new(Conv2d::new(w, w, 3, 1, rng));
                prev = w;
                [a, b]
            })
            .collect();
        Self { stem, stages }
    }

    /// Returns `(C3, C4, C5)`.
    pub fn forward(&self, image: &Array3<T>) -> ([Array3<T>; 3], BackboneCache<T>) {
        let (mut x, stem) = self.stem.forward(image);
        let mut outs = Vec::new();
        let mut caches = Vec::new();
        for [a, b] in &self.stages {
            let (h, ca) = a.forward(&x);
            let (h, cb) = b.forward(&h);
            caches.push([ca, cb]);
            outs.push(h.clone());
            x = h;
        }
        let c5 = outs.pop().unwrap();
        let c4 = outs.pop().unwrap();
        let c3 = outs.pop().unwrap();
        ([c3, c4, c5], BackboneCache { stem, stages: caches })
    }

    pub fn backward(&mut self, cache: &BackboneCache<T>, grads: [Array3<T>; 3]) {
        let [d3, d4, d5] = grads;
        let n = self.stages.len();
        let mut extra: Vec<Option<Array3<T>>> = vec![None; n];
        extra[n - 3] = Some(d3);
        extra[n - 2] = Some(d4);
        let mut dx = Some(d5);
        for i in (0..n).rev() {
            let mut d = dx.take().expect("gradient chain");
            if i < n - 1 {
                if let Some(e) = extra[i].take() {
                    d += &e;
                }
            }
            let [a, b] = &mut self.stages[i];
            let [ca, cb] = &cache.stages[i];
            let d = b.backward(cb, d, true).unwrap();
            dx = a.backward(ca, d, true);
        }
        self.stem.backward(&cache.stem, dx.unwrap(), false);
    }
}

impl<T: Real> Parameterized<T> for Backbone<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.conv.visit_params(&join(prefix, "stem"), f);
        for (i, [a, b]) in self.stages.iter_mut().enumerate() {
            a.conv.visit_params(&join(prefix, &format!("stage{i}.conv0")), f);
            b.conv.visit_params(&join(prefix, &format!("stage{i}.conv1")), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fpn<T> {
    lateral: [Conv2d<T>; 3],
    output: [Conv2d<T>; 3],
    p6: Conv2d<T>,
    p7: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct FpnCache<T> {
    lateral: Vec<ConvCache<T>>,
    output: Vec<ConvCache<T>>,
    up: Vec<Resize<T>>,
    p6: ConvCache<T>,
    p6_relu: Array3<T>,
    p7: ConvCache<T>,
}

impl<T: Real> Fpn<T> {
    pub fn new(in_widths: [usize; 3], channels: usize, rng: &mut impl Rng) -> Self {
        let lateral = in_widths.map(|w| Conv2d::new(w, channels, 1, 1, rng));
        let output = [0; 3].map(|_| Conv2d::new(channels, channels, 3, 1, rng));
        Self {
            lateral,
            output,
            p6: Conv2d::new(channels, channels, 3, 2, rng),
            p7: Conv2d::new(channels, channels, 3, 2, rng),
        }
    }

    pub fn forward(&self, c: &[Array3<T>; 3]) -> (FeaturePyramid<T>, FpnCache<T>) {
        let mut lat = Vec::new();
        let mut lat_caches = Vec::new();
        for (conv, x) in self.lateral.iter().zip(c) {
            let (y, cache) = conv.forward(x);
            lat.push(y);
            lat_caches.push(cache);
        }
        // top-down merge
        let mut merged: Vec<Array3<T>> = vec![lat[2].clone()];
        let mut ups = Vec::new();
        for i in (0..2).rev() {
            let above = merged.last().unwrap();
            let (_, h, w) = lat[i].dim();
            let up = Resize::nearest((above.dim().1, above.dim().2), (h, w));
            let m = &lat[i] + &up.forward(above);
            ups.push(up);
            merged.push(m);
        }
        merged.reverse(); // [M3, M4, M5]
        ups.reverse(); // [M4→M3, M5→M4]

        let mut levels = Vec::new();
        let mut out_caches = Vec::new();
        for (conv, m) in self.output.iter().zip(&merged) {
            let (y, cache) = conv.forward(m);
            levels.push(y);
            out_caches.push(cache);
        }
        let (p6, p6_cache) = self.p6.forward(&levels[2]);
        let mut p6_relu = p6.clone();
        relu_inplace(&mut p6_relu);
        let (p7, p7_cache) = self.p7.forward(&p6_relu);
        levels.push(p6);
        levels.push(p7);
        (
            FeaturePyramid { levels },
            FpnCache {
                lateral: lat_caches,
                output: out_caches,
                up: ups,
                p6: p6_cache,
                p6_relu,
                p7: p7_cache,
            },
        )
    }

    /// Takes the gradient for every level and returns gradients for C3..C5.
    pub fn backward(&mut self, cache: &FpnCache<T>, grads: Vec<Array3<T>>) -> [Array3<T>; 3] {
        let mut grads = grads;
        let d7 = grads.pop().unwrap();
        let mut d6 = grads.pop().unwrap();
        let mut d_relu6 = self.p7.backward(&cache.p7, &d7, true).unwrap();
        relu_backward(&cache.p6_relu, &mut d_relu6);
        d6 += &d_relu6;
        let d5_extra = self.p6.backward(&cache.p6, &d6, true).unwrap();
        grads[2] += &d5_extra;

        let mut dm: Vec<Array3<T>> = Vec::new();
        for (i, g) in grads.iter().enumerate() {
            dm.push(self.output[i].backward(&cache.output[i], g, true).unwrap());
        }
        // reverse of the top-down merge
        let d3_up = cache.up[0].backward(&dm[0]);
        dm[1] += &d3_up;
        let d4_up = cache.up[1].backward(&dm[1]);
        dm[2] += &d4_up;

        let mut out = Vec::new();
        for i in 0..3 {
            out.push(self.lateral[i].backward(&cache.lateral[i], &dm[i], true).unwrap());
        }
        let c5 = out.pop().unwrap();
        let c4 = out.pop().unwrap();
        let c3 = out.pop().unwrap();
        [c3, c4, c5]
    }
}

impl<T: Real> Parameterized<T> for Fpn<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, name) in ["c3", "c4", "c5"].iter().enumerate() {
            self.lateral[i].visit_params(&join(prefix, &format!("lateral_{name}")), f);
        }
        for (i, name) in ["p3", "p4", "p5"].iter().enumerate() {
            self.output[i].visit_params(&join(prefix, &format!("output_{name}")), f);
        }
        self.p6.visit_params(&join(prefix, "p6"), f);
        self.p7.visit_params(&join(prefix, "p7"), f);
    }
}

/// Backbone and pyramid as one trainable extractor.
#[derive(Debug, Clone)]
pub struct PyramidExtractor<T> {
    pub backbone: Backbone<T>,
    pub fpn: Fpn<T>,
}

#[derive(Debug, Clone)]
pub struct ExtractorCache<T> {
    backbone: BackboneCache<T>,
    fpn: FpnCache<T>,
}

impl<T: Real> PyramidExtractor<T> {
    pub fn new(widths: [usize; 4], channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            backbone: Backbone::new(widths, rng),
            fpn: Fpn::new([widths[1], widths[2], widths[3]], channels, rng),
        }
    }

    /// Forward pass on one `(3, H, W)` image.
    pub fn extract_pyramid(&self, image: &Array3<T>) -> Result<(FeaturePyramid<T>, ExtractorCache<T>)> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        check_input_size(h, w)?;
        let (cs, backbone) = self.backbone.forward(image);
        let (pyramid, fpn) = self.fpn.forward(&cs);
        Ok((pyramid, ExtractorCache { backbone, fpn }))
    }

    pub fn backward(&mut self, cache: &ExtractorCache<T>, level_grads: Vec<Array3<T>>) {
        let dc = self.fpn.backward(&cache.fpn, level_grads);
        self.backbone.backward(&cache.backbone, dc);
    }
}

impl<T: Real> Parameterized<T> for PyramidExtractor<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.backbone.visit_params(&join(prefix, "backbone"), f);
        self.fpn.visit_params(&join(prefix, "fpn"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> PyramidExtractor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PyramidExtractor::new([4, 6, 8, 8], 6, &mut rng)
    }

    #[test]
    fn level_shapes_for_square_input() {
        let net = tiny(0);
        let (p, _) = net.extract_pyramid(&Array3::zeros((3, 128, 128))).unwrap();
        let dims: Vec<_> = p.levels.iter().map(|l| (l.dim().1, l.dim().2)).collect();
        assert_eq!(dims, vec![(16, 16), (8, 8), (4, 4), (2, 2), (1, 1)]);
        assert!(p.levels.iter().all(|l| l.iter().all(|v| v.is_finite())));
        assert!(p.levels.iter().all(|l| l.dim().0 == 6));
    }

    #[test]
    fn rows_follow_height() {
        let net = tiny(0);
        let (p, _) = net.extract_pyramid(&Array3::zeros((3, 256, 128))).unwrap();
        assert_eq!(p.level("P3").unwrap().dim(), (6, 32, 16));
        assert_eq!(p.level("P7").unwrap().dim(), (6, 2, 1));
        let (p, _) = net.extract_pyramid(&Array3::zeros((3, 64, 64))).unwrap();
        let dims: Vec<_> = p.levels.iter().map(|l| (l.dim().1, l.dim().2)).collect();
        assert_eq!(dims, vec![(8, 8), (4, 4), (2, 2), (1, 1), (1, 1)]);
    }

    #[test]
    fn rejects_non_divisible_input_naming_dimension() {
        let net = tiny(0);
        let err = net.extract_pyramid(&Array3::zeros((3, 128, 100))).unwrap_err();
        assert!(err.to_string().contains("width 100"));
        let err = net.extract_pyramid(&Array3::zeros((3, 48, 128))).unwrap_err();
        assert!(err.to_string().contains("height 48"));
    }

    #[test]
    fn first_layer_receives_gradient_matching_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = tiny(1);
        let img = Array3::from_shape_fn((3, 128, 128), |_| rng.random_range(0.0..1.0));
        let loss = |n: &PyramidExtractor<f64>| {
            let (p, _) = n.extract_pyramid(&img).unwrap();
            p.levels.iter().map(|l| l.sum()).sum::<f64>()
        };
        let (p, cache) = net.extract_pyramid(&img).unwrap();
        let grads = p.levels.iter().map(|l| Array3::ones(l.dim())).collect();
        net.backward(&cache, grads);
        let analytic = net.backbone.stem.conv.weight.grad.clone();
        assert!(analytic.iter().any(|g| g.abs() > 1e-8));
        let h = 1e-6;
        for i in [0, 7, 30, 100] {
            let mut plus = net.clone();
            plus.backbone.stem.conv.weight.value[i] += h;
            let mut minus = net.clone();
            minus.backbone.stem.conv.weight.value[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let tol = 1e-3 * fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!((fd - analytic[i]).abs() <= tol, "param {i}: {fd} vs {}", analytic[i]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]
        #[test]
        fn shape_contract_for_divisible_sizes(hm in 1usize..9, wm in 1usize..9) {
            let net = tiny(2);
            let (h, w) = (32 * hm, 32 * wm);
            let (p, _) = net.extract_pyramid(&Array3::zeros((3, h, w))).unwrap();
            for (lvl, s) in p.levels.iter().zip(LEVEL_STRIDES) {
                prop_assert_eq!(lvl.dim(), (6, h.div_ceil(s), w.div_ceil(s)));
            }
        }
    }
}
