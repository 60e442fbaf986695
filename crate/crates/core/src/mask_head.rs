//! Sub-region mask prediction.
//!
//! A detected box is divided into an `r1 × r2` grid whose size follows the box
//! extent. A spatial attention tower predicts one scalar per sub-region at the
//! detection's feature location, while a shared base-feature branch builds a
//! high-resolution map `F`. Per instance, `F` is zeroed outside the box and a
//! 1×1 convolution produces one base mask per sub-region. The blender gates
//! each base mask by its attention scalar inside its own cell:
//!
//! `M(p) = sigmoid(a_j · B_j(p))`, where `j` is the cell that contains `p`.
//!
//! Channel selection uses a canonical `G × G` grid (`G` = division cap): cell
//! `(row q, col p)` reads channel `q · G + p` of both the attention tower and
//! the base-mask convolution.

use std::str::FromStr;

use ndarray::{s, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone_fpn::{ConvRelu, ConvReluCache, FeaturePyramid, LEVEL_STRIDES};
use crate::detection_head::{sigmoid, Detection};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::mask::Mask;
use crate::nn::{concat_channels, join, split_channels, Conv2d, ConvCache, Param, Parameterized, Real, Resize};

/// Division constant of the sub-region rule at a 640-pixel-wide input.
pub const REFERENCE_DIVISOR: f64 = 50.0;
pub const REFERENCE_WIDTH: f64 = 640.0;

/// Integer pixel rectangle, exclusive max.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl PixelRect {
    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }

    /// Pixel footprint of a real-valued box.
    pub fn of_box(b: &BBox) -> Self {
        Self {
            x0: b.x_min.floor() as i64,
            y0: b.y_min.floor() as i64,
            x1: b.x_max.ceil() as i64,
            y1: b.y_max.ceil() as i64,
        }
    }
}

/// Parameters of the box division rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivisionRule {
    /// Pixels per sub-region step (50 at the reference scale).
    pub divisor: f64,
    /// Maximum number of divisions per axis.
    pub cap: usize,
}

impl DivisionRule {
    pub const REFERENCE: DivisionRule = DivisionRule {
        divisor: REFERENCE_DIVISOR,
        cap: 6,
    };

    /// Divisor scaled to an input width, `50 / (640 / width)`.
    pub fn for_input_width(width: usize, cap: usize) -> Self {
        Self {
            divisor: REFERENCE_DIVISOR * width as f64 / REFERENCE_WIDTH,
            cap,
        }
    }

    /// `(r1, r2) = (min(cap, ceil(w / divisor)), min(cap, ceil(h / divisor)))`.
    pub fn divisions(&self, w: f64, h: f64) -> (usize, usize) {
        let f = |v: f64| ((v / self.divisor).ceil() as usize).clamp(1, self.cap);
        (f(w), f(h))
    }
}

/// `r1 × r2` tiling of a box; cells are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubRegionGrid {
    /// Columns.
    pub r1: usize,
    /// Rows.
    pub r2: usize,
    pub cells: Vec<PixelRect>,
    pub bbox: BBox,
    pub footprint: PixelRect,
}

impl SubRegionGrid {
    pub fn len(&self) -> usize {
        self.r1 * self.r2
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    fn col_edges(&self) -> (i64, i64) {
        (self.footprint.x0, self.footprint.width() / self.r1 as i64)
    }

    fn row_edges(&self) -> (i64, i64) {
        (self.footprint.y0, self.footprint.height() / self.r2 as i64)
    }

    /// Row-major index of the cell containing an image point.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        if !self.footprint.contains(x, y) {
            return None;
        }
        let (x0, cw) = self.col_edges();
        let (y0, ch) = self.row_edges();
        let p = (((x - x0 as f64) / cw as f64).floor() as usize).min(self.r1 - 1);
        let q = (((y - y0 as f64) / ch as f64).floor() as usize).min(self.r2 - 1);
        Some(q * self.r1 + p)
    }

    /// Canonical channel of every cell for a `side × side` grid.
    pub fn canonical_channels(&self, side: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        for q in 0..self.r2 {
            for p in 0..self.r1 {
                out.push(q * side + p);
            }
        }
        out
    }
}

/// Divides a box into sub-regions; the last column and row absorb the
/// integer remainder.
pub fn divide_box(b: &BBox, rule: DivisionRule) -> Result<SubRegionGrid> {
    let (w, h) = (b.width(), b.height());
    if !(w >= 1.0 && h >= 1.0) {
        return Err(Error::Precondition(format!(
            "cannot divide a box of size {w} x {h}"
        )));
    }
    let fp = PixelRect::of_box(b);
    let (r1, r2) = rule.divisions(w, h);
    let r1 = r1.min(fp.width() as usize);
    let r2 = r2.min(fp.height() as usize);
    let cw = fp.width() / r1 as i64;
    let ch = fp.height() / r2 as i64;
    let mut cells = Vec::with_capacity(r1 * r2);
    for q in 0..r2 as i64 {
        for p in 0..r1 as i64 {
            cells.push(PixelRect {
                x0: fp.x0 + p * cw,
                y0: fp.y0 + q * ch,
                x1: if p == r1 as i64 - 1 { fp.x1 } else { fp.x0 + (p + 1) * cw },
                y1: if q == r2 as i64 - 1 { fp.y1 } else { fp.y0 + (q + 1) * ch },
            });
        }
    }
    Ok(SubRegionGrid {
        r1,
        r2,
        cells,
        bbox: *b,
        footprint: fp,
    })
}

/// Attention scalars of one detection, in row-major cell order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores {
    pub values: Vec<f64>,
    pub level: usize,
    pub grid_index: (usize, usize),
}

/// Reads the scores of `grid` at `(level, row, col)` from a level's attention
/// map of `side²` channels.
pub fn predict_attention<T: Real>(
    attention_map: &Array3<T>,
    level: usize,
    grid_index: (usize, usize),
    grid: &SubRegionGrid,
    side: usize,
) -> Result<AttentionScores> {
    let (c, h, w) = attention_map.dim();
    let (i, j) = grid_index;
    if c != side * side || i >= h || j >= w || grid.r1 > side || grid.r2 > side {
        return Err(Error::Precondition(format!(
            "attention read at {grid_index:?} on a {c}x{h}x{w} map for a {}x{} grid",
            grid.r1, grid.r2
        )));
    }
    let values = grid
        .canonical_channels(side)
        .into_iter()
        .map(|ch| attention_map[[ch, i, j]].f64())
        .collect();
    Ok(AttentionScores {
        values,
        level,
        grid_index,
    })
}

/// Which pyramid levels feed the base-feature branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseFeatureLevels {
    #[serde(rename = "P3")]
    P3,
    #[serde(rename = "P3-P4")]
    P3P4,
    #[serde(rename = "P3-P5")]
    P3P5,
}

impl BaseFeatureLevels {
    pub fn count(self) -> usize {
        match self {
            BaseFeatureLevels::P3 => 1,
            BaseFeatureLevels::P3P4 => 2,
            BaseFeatureLevels::P3P5 => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BaseFeatureLevels::P3 => "P3",
            BaseFeatureLevels::P3P4 => "P3-P4",
            BaseFeatureLevels::P3P5 => "P3-P5",
        }
    }
}

impl FromStr for BaseFeatureLevels {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P3" => Ok(Self::P3),
            "P3-P4" => Ok(Self::P3P4),
            "P3-P5" => Ok(Self::P3P5),
            other => Err(Error::Config(format!(
                "base feature levels must be P3, P3-P4 or P3-P5, got {other:?}"
            ))),
        }
    }
}

/// Shape of the mask head.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskHeadConfig {
    pub division: DivisionRule,
    pub upsample_factor: usize,
    pub levels: BaseFeatureLevels,
    pub base_channels: usize,
    pub base_hidden: usize,
}

impl MaskHeadConfig {
    /// Side of the canonical channel grid.
    pub fn side(&self) -> usize {
        self.division.cap
    }

    /// Stride of the base feature map `F`.
    pub fn base_stride(&self) -> usize {
        LEVEL_STRIDES[0] / self.upsample_factor
    }
}

/// Two 3×3 convolutions shared across P3–P7, ending in `side²` channels.
#[derive(Debug, Clone)]
pub struct AttentionTower<T> {
    conv: ConvRelu<T>,
    out: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    conv: ConvReluCache<T>,
    out: ConvCache<T>,
}

impl<T: Real> AttentionTower<T> {
    pub fn new(channels: usize, side: usize, rng: &mut impl Rng) -> Self {
        let mut out = Conv2d::with_std(channels, side * side, 3, 1, 0.01, rng);
        // unit gates at start so base masks receive gradient immediately
        out.bias = Param::filled(&[side * side], 1.0);
        Self {
            conv: ConvRelu::new(Conv2d::new(channels, channels, 3, 1, rng)),
            out,
        }
    }

    pub fn forward(&self, p: &Array3<T>) -> (Array3<T>, AttentionCache<T>) {
        let (h, conv) = self.conv.forward(p);
        let (y, out) = self.out.forward(&h);
        (y, AttentionCache { conv, out })
    }

    pub fn backward(&mut self, cache: &AttentionCache<T>, dy: &Array3<T>) -> Array3<T> {
        let dh = self.out.backward(&cache.out, dy, true).unwrap();
        self.conv.backward(&cache.conv, dh, true).unwrap()
    }
}

impl<T: Real> Parameterized<T> for AttentionTower<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.conv.visit_params(&join(prefix, "conv0"), f);
        self.out.visit_params(&join(prefix, "out"), f);
    }
}

/// Builds the shared high-resolution base feature map `F`.
#[derive(Debug, Clone)]
pub struct BaseFeatureNet<T> {
    levels: BaseFeatureLevels,
    upsample_factor: usize,
    conv0: ConvRelu<T>,
    conv1: ConvRelu<T>,
    reduce: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct BaseFeatureCache<T> {
    ups: Vec<Resize<T>>,
    conv0: ConvReluCache<T>,
    conv1: ConvReluCache<T>,
    reduce: ConvCache<T>,
    out_up: Resize<T>,
    channels: usize,
}

impl<T: Real> BaseFeatureNet<T> {
    pub fn new(channels: usize, cfg: &MaskHeadConfig, rng: &mut impl Rng) -> Self {
        let cin = channels * cfg.levels.count();
        Self {
            levels: cfg.levels,
            upsample_factor: cfg.upsample_factor,
            conv0: ConvRelu::new(Conv2d::new(cin, cfg.base_hidden, 3, 1, rng)),
            conv1: ConvRelu::new(Conv2d::new(cfg.base_hidden, cfg.base_hidden, 3, 1, rng)),
            reduce: Conv2d::new(cfg.base_hidden, cfg.base_channels, 1, 1, rng),
        }
    }

    /// `F` at stride `8 / upsample_factor`.
    pub fn build_base_features(&self, pyramid: &FeaturePyramid<T>) -> (Array3<T>, BaseFeatureCache<T>) {
        let p3 = &pyramid.levels[0];
        let (c, h, w) = p3.dim();
        let mut parts = vec![p3.clone()];
        let mut ups = Vec::new();
        for lvl in 1..self.levels.count() {
            let src = &pyramid.levels[lvl];
            let up = Resize::bilinear((src.dim().1, src.dim().2), (h, w));
            parts.push(up.forward(src));
            ups.push(up);
        }
        let refs: Vec<&Array3<T>> = parts.iter().collect();
        let x = if refs.len() == 1 { parts[0].clone() } else { concat_channels(&refs) };
        let (x, conv0) = self.conv0.forward(&x);
        let (x, conv1) = self.conv1.forward(&x);
        let (x, reduce) = self.reduce.forward(&x);
        let f = self.upsample_factor;
        let out_up = Resize::bilinear((h, w), (h * f, w * f));
        let out = if f == 1 { x } else { out_up.forward(&x) };
        (
            out,
            BaseFeatureCache {
                ups,
                conv0,
                conv1,
                reduce,
                out_up,
                channels: c,
            },
        )
    }

    /// Gradients for P3, P4, P5 (absent entries for unused levels).
    pub fn backward(&mut self, cache: &BaseFeatureCache<T>, d_out: &Array3<T>) -> Vec<Option<Array3<T>>> {
        let dx = if self.upsample_factor == 1 {
            d_out.clone()
        } else {
            cache.out_up.backward(d_out)
        };
        let dx = self.reduce.backward(&cache.reduce, &dx, true).unwrap();
        let dx = self.conv1.backward(&cache.conv1, dx, true).unwrap();
        let dx = self.conv0.backward(&cache.conv0, dx, true).unwrap();
        let n = self.levels.count();
        let parts = split_channels(&dx, &vec![cache.channels; n]);
        let mut out = vec![None, None, None];
        for (lvl, part) in parts.into_iter().enumerate() {
            out[lvl] = Some(if lvl == 0 { part } else { cache.ups[lvl - 1].backward(&part) });
        }
        out
    }
}

impl<T: Real> Parameterized<T> for BaseFeatureNet<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv0.conv.visit_params(&join(prefix, "conv0"), f);
        self.conv1.conv.visit_params(&join(prefix, "conv1"), f);
        self.reduce.visit_params(&join(prefix, "reduce"), f);
    }
}

/// Shared 1×1 convolution from `F` to `side²` base-mask channels.
#[derive(Debug, Clone)]
pub struct BaseMaskConv<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> BaseMaskConv<T> {
    pub fn new(base_channels: usize, side: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / base_channels as f64).sqrt();
        Self {
            weight: Param::normal(&[side * side, base_channels], std, rng),
            bias: Param::zeros(&[side * side]),
        }
    }

    /// Pre-activation of channel `ch` at `F[:, u, v]`.
    #[inline]
    pub fn eval(&self, features: &Array3<T>, ch: usize, u: usize, v: usize) -> f64 {
        let k = self.weight.shape[1];
        let row = &self.weight.value[ch * k..(ch + 1) * k];
        let mut acc = self.bias.value[ch].f64();
        for (c, w) in row.iter().enumerate() {
            acc += w.f64() * features[[c, u, v]].f64();
        }
        acc
    }
}

impl<T: Real> Parameterized<T> for BaseMaskConv<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Range of `F` locations whose image points fall inside a pixel footprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureWindow {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
    pub stride: usize,
}

impl FeatureWindow {
    pub fn of(fp: &PixelRect, stride: usize, hw: (usize, usize)) -> Option<Self> {
        let s = stride as f64;
        // first index whose centre s·(k + 0.5) >= lo, last with centre < hi
        let first = |lo: i64| ((lo as f64 / s - 0.5).ceil().max(0.0)) as usize;
        let end = |hi: i64, n: usize| (((hi as f64 / s - 0.5).ceil().max(0.0)) as usize).min(n);
        let rows = (first(fp.y0), end(fp.y1, hw.0));
        let cols = (first(fp.x0), end(fp.x1, hw.1));
        (rows.0 < rows.1 && cols.0 < cols.1).then_some(Self { rows, cols, stride })
    }

    pub fn point(&self, u: usize, v: usize) -> (f64, f64) {
        let s = self.stride as f64;
        (s * (v as f64 + 0.5), s * (u as f64 + 0.5))
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.rows.1 - self.rows.0, self.cols.1 - self.cols.0)
    }
}

/// The `r1 · r2` base masks of one instance at the resolution of `F`.
#[derive(Debug, Clone)]
pub struct BaseMasks {
    /// One map per cell; locations outside the box hold the convolution bias.
    pub maps: Vec<Array2<f64>>,
    pub stride: usize,
    pub window: FeatureWindow,
}

/// Zeroes `F` outside the box, applies the shared 1×1 convolution and keeps
/// the channels selected by the grid. Fails when the box covers no location
/// of `F`.
pub fn generate_base_masks<T: Real>(
    features: &Array3<T>,
    stride: usize,
    conv: &BaseMaskConv<T>,
    grid: &SubRegionGrid,
    side: usize,
) -> Result<BaseMasks> {
    let (c, h, w) = features.dim();
    let window = FeatureWindow::of(&grid.footprint, stride, (h, w)).ok_or_else(|| {
        Error::Precondition(format!(
            "box {:?} covers no stride-{stride} location",
            grid.bbox.to_array()
        ))
    })?;
    let mut masked = Array3::<T>::zeros((c, h, w));
    masked
        .slice_mut(s![.., window.rows.0..window.rows.1, window.cols.0..window.cols.1])
        .assign(&features.slice(s![.., window.rows.0..window.rows.1, window.cols.0..window.cols.1]));
    let maps = grid
        .canonical_channels(side)
        .into_iter()
        .map(|ch| Array2::from_shape_fn((h, w), |(u, v)| conv.eval(&masked, ch, u, v)))
        .collect();
    Ok(BaseMasks { maps, stride, window })
}

/// Soft and binary instance mask at the resolution of `F`.
#[derive(Debug, Clone)]
pub struct InstanceMask {
    pub soft: Array2<f64>,
    pub binary: Mask,
    pub owner: Option<Detection>,
}

/// Per-pixel cell-gated sigmoid blend; zero outside the box.
pub fn blend(scores: &AttentionScores, bases: &BaseMasks, grid: &SubRegionGrid) -> Result<InstanceMask> {
    if scores.values.len() != grid.len() || bases.maps.len() != grid.len() {
        return Err(Error::Precondition(format!(
            "{} scores and {} base masks for {} cells",
            scores.values.len(),
            bases.maps.len(),
            grid.len()
        )));
    }
    let (h, w) = bases.maps.first().map_or((0, 0), |m| m.dim());
    let mut soft = Array2::<f64>::zeros((h, w));
    let win = &bases.window;
    for u in win.rows.0..win.rows.1 {
        for v in win.cols.0..win.cols.1 {
            let (x, y) = win.point(u, v);
            if let Some(j) = grid.cell_of(x, y) {
                soft[[u, v]] = sigmoid(scores.values[j] * bases.maps[j][[u, v]]);
            }
        }
    }
    let binary = Mask::from_fn(h, w, |u, v| soft[[u, v]] > 0.5);
    Ok(InstanceMask {
        soft,
        binary,
        owner: None,
    })
}

/// Probability clamp applied by [`mask_loss`].
pub const MASK_PROB_EPS: f64 = 1e-6;

/// One instance term of the mask loss.
#[derive(Debug, Clone, Copy)]
pub struct MaskLossTerm<'a> {
    pub soft: &'a Array2<f64>,
    pub gt: &'a Mask,
    pub window: FeatureWindow,
}

/// Mean per-pixel BCE over each instance's box footprint, averaged over
/// instances; zero for no instances.
pub fn mask_loss(terms: &[MaskLossTerm<'_>]) -> f64 {
    if terms.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for t in terms {
        let (mut sum, mut n) = (0.0, 0usize);
        for u in t.window.rows.0..t.window.rows.1 {
            for v in t.window.cols.0..t.window.cols.1 {
                let p = t.soft[[u, v]].clamp(MASK_PROB_EPS, 1.0 - MASK_PROB_EPS);
                let y = if t.gt.get(u, v) { 1.0 } else { 0.0 };
                sum -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
                n += 1;
            }
        }
        total += sum / n.max(1) as f64;
    }
    total / terms.len() as f64
}

/// The three trainable parts of the mask head.
#[derive(Debug, Clone)]
pub struct MaskHead<T> {
    pub config: MaskHeadConfig,
    pub attention: AttentionTower<T>,
    pub base_features: BaseFeatureNet<T>,
    pub base_conv: BaseMaskConv<T>,
}

impl<T: Real> MaskHead<T> {
    pub fn new(channels: usize, config: MaskHeadConfig, rng: &mut impl Rng) -> Self {
        let side = config.side();
        Self {
            attention: AttentionTower::new(channels, side, rng),
            base_features: BaseFeatureNet::new(channels, &config, rng),
            base_conv: BaseMaskConv::new(config.base_channels, side, rng),
            config,
        }
    }

    /// Full per-detection mask pipeline: divide, attend, generate, blend.
    pub fn predict_instance(
        &self,
        detection: &Detection,
        attention_maps: &[Array3<T>],
        features: &Array3<T>,
    ) -> Result<InstanceMask> {
        let side = self.config.side();
        let grid = divide_box(&detection.bbox, self.config.division)?;
        let scores = predict_attention(
            &attention_maps[detection.level],
            detection.level,
            detection.grid_index,
            &grid,
            side,
        )?;
        let bases = generate_base_masks(features, self.config.base_stride(), &self.base_conv, &grid, side)?;
        let mut m = blend(&scores, &bases, &grid)?;
        m.owner = Some(detection.clone());
        Ok(m)
    }
}

impl<T: Real> Parameterized<T> for MaskHead<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.attention.visit_params(&join(prefix, "attention"), f);
        self.base_features.visit_params(&join(prefix, "base_features"), f);
        self.base_conv.visit_params(&join(prefix, "base_conv"), f);
    }
}

/// Training-time mask computation for one ground-truth instance: the cell
/// channel and pre-activation at each location of its window.
#[derive(Debug, Clone)]
pub(crate) struct InstanceBaseCache {
    pub grid: SubRegionGrid,
    /// `(u, v, cell, channel, pre-activation, target)` per window location.
    pub pixels: Vec<(usize, usize, usize, usize, f64, f64)>,
}

impl InstanceBaseCache {
    pub fn build<T: Real>(
        features: &Array3<T>,
        stride: usize,
        conv: &BaseMaskConv<T>,
        grid: SubRegionGrid,
        side: usize,
        gt_at_stride: &Mask,
    ) -> Option<Self> {
        let (_, h, w) = features.dim();
        let window = FeatureWindow::of(&grid.footprint, stride, (h, w))?;
        let channels = grid.canonical_channels(side);
        let mut pixels = Vec::with_capacity(window.dim().0 * window.dim().1);
        for u in window.rows.0..window.rows.1 {
            for v in window.cols.0..window.cols.1 {
                let (x, y) = window.point(u, v);
                if let Some(j) = grid.cell_of(x, y) {
                    let ch = channels[j];
                    let pre = conv.eval(features, ch, u, v);
                    let target = if gt_at_stride.get(u, v) { 1.0 } else { 0.0 };
                    pixels.push((u, v, j, ch, pre, target));
                }
            }
        }
        (!pixels.is_empty()).then_some(Self { grid, pixels })
    }

    /// BCE-with-logits mean over the window for attention `a`; accumulates
    /// `scale ·` gradients into `d_scores` and `d_pre` (per pixel).
    pub fn loss_and_grad(&self, scores: &[f64], scale: f64, d_scores: &mut [f64], d_pre: &mut [f64]) -> f64 {
        let n = self.pixels.len() as f64;
        let mut sum = 0.0;
        for (k, &(_, _, j, _, pre, y)) in self.pixels.iter().enumerate() {
            let z = scores[j] * pre;
            let (l, dz) = crate::detection_head::bce_with_logits(z, y);
            sum += l;
            let dz = scale * dz / n;
            d_scores[j] += dz * pre;
            d_pre[k] += dz * scores[j];
        }
        sum / n
    }

    /// Backpropagates per-pixel pre-activation gradients into the 1×1
    /// convolution and the feature map.
    pub fn backward<T: Real>(&self, d_pre: &[f64], features: &Array3<T>, conv: &mut BaseMaskConv<T>, d_features: &mut Array3<T>) {
        let k = conv.weight.shape[1];
        for (&(u, v, _, ch, _, _), &g) in self.pixels.iter().zip(d_pre) {
            if g == 0.0 {
                continue;
            }
            conv.bias.grad[ch] += T::of(g);
            for c in 0..k {
                conv.weight.grad[ch * k + c] += T::of(g * features[[c, u, v]].f64());
                d_features[[c, u, v]] += T::of(g * conv.weight.value[ch * k + c].f64());
            }
        }
    }
}

/// Ground-truth mask resampled to the resolution of `F`.
pub fn gt_at_stride(mask: &Mask, stride: usize) -> Mask {
    if stride == 1 {
        mask.clone()
    } else {
        mask.downsample(stride)
    }
}
