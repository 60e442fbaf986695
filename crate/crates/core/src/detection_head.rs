//! Anchor-free dense detection: classification, box distances and
//! centerness per pyramid location, with target assignment, the three
//! detection losses and decoding into [`Detection`] records.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone_fpn::{location_point, ConvRelu, ConvReluCache, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::geometry::{giou_with_grad, BBox};
use crate::nn::{join, Conv2d, ConvCache, Param, Parameterized, Real};
use crate::synthetic_video::GtInstance;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Lower clamp offset applied to GIoU before the logarithm.
pub const GIOU_CLAMP_EPS: f64 = 1e-7;
/// Raw box outputs are clamped here before exponentiation.
const MAX_LOG_DISTANCE: f64 = 12.0;

/// Size ranges of `max(l, t, r, b)` per level for 128-pixel inputs.
pub const DEFAULT_LEVEL_RANGES: [(f64, f64); NUM_LEVELS] = [
    (0.0, 16.0),
    (16.0, 32.0),
    (32.0, 64.0),
    (64.0, 128.0),
    (128.0, f64::INFINITY),
];

/// A decoded per-frame object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    /// `sqrt(class probability × centerness probability)`.
    pub score: f64,
    /// Centerness location: image point of the source feature location.
    pub center: [f64; 2],
    pub bbox: BBox,
    pub level: usize,
    pub grid_index: (usize, usize),
}

/// Spatial layout of the pyramid for one input size.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidGeometry {
    pub image_hw: (usize, usize),
    pub strides: Vec<usize>,
}

impl PyramidGeometry {
    pub fn new(image_hw: (usize, usize), strides: &[usize]) -> Self {
        Self {
            image_hw,
            strides: strides.to_vec(),
        }
    }

    pub fn level_hw(&self, level: usize) -> (usize, usize) {
        crate::backbone_fpn::level_hw(self.image_hw, self.strides[level])
    }

    pub fn num_levels(&self) -> usize {
        self.strides.len()
    }
}

#[derive(Debug, Clone)]
pub struct LevelTargets {
    /// 0 for background, otherwise class index + 1.
    pub labels: Array2<usize>,
    /// `(l, t, r, b)` distances, zero at background locations.
    pub boxes: Array3<f64>,
    pub centerness: Array2<f64>,
    pub positive: Array2<bool>,
    /// Index of the assigned ground-truth instance.
    pub gt_index: Array2<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct DenseTargets {
    pub levels: Vec<LevelTargets>,
}

impl DenseTargets {
    pub fn num_positive(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.positive.iter().filter(|&&p| p).count())
            .sum()
    }

    /// `(level, row, col, gt_index)` for every positive location.
    pub fn positives(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::new();
        for (lvl, t) in self.levels.iter().enumerate() {
            for ((i, j), g) in t.gt_index.indexed_iter() {
                if let Some(g) = g {
                    out.push((lvl, i, j, *g));
                }
            }
        }
        out
    }
}

fn validate_ranges(ranges: &[(f64, f64)]) -> Result<()> {
    let ok = !ranges.is_empty()
        && ranges[0].0 == 0.0
        && ranges.last().unwrap().1 == f64::INFINITY
        && ranges.windows(2).all(|w| w[0].1 == w[1].0)
        && ranges.iter().all(|r| r.0 < r.1);
    if ok {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "level ranges {ranges:?} must be ordered, contiguous and cover (0, inf)"
        )))
    }
}

/// Assigns every pyramid location to at most one ground-truth box.
///
/// A location is positive when its image point lies strictly inside a box
/// whose largest side distance falls in the level's range; among several
/// candidates the smallest-area box wins. With `center_radius` set, the point
/// must also lie within `radius × stride` of the box centre.
pub fn assign_box_targets(
    geometry: &PyramidGeometry,
    gt: &[(BBox, usize)],
    ranges: &[(f64, f64)],
    center_radius: Option<f64>,
) -> Result<DenseTargets> {
    validate_ranges(ranges)?;
    if ranges.len() != geometry.num_levels() {
        return Err(Error::Precondition(format!(
            "{} ranges for {} levels",
            ranges.len(),
            geometry.num_levels()
        )));
    }
    let mut levels = Vec::with_capacity(geometry.num_levels());
    for (lvl, &(lo, hi)) in ranges.iter().enumerate() {
        let (h, w) = geometry.level_hw(lvl);
        let stride = geometry.strides[lvl];
        let mut t = LevelTargets {
            labels: Array2::zeros((h, w)),
            boxes: Array3::zeros((h, w, 4)),
            centerness: Array2::zeros((h, w)),
            positive: Array2::from_elem((h, w), false),
            gt_index: Array2::from_elem((h, w), None),
        };
        for i in 0..h {
            for j in 0..w {
                let [px, py] = location_point(stride, i, j);
                let mut best: Option<(f64, usize)> = None;
                for (g, (bbox, _)) in gt.iter().enumerate() {
                    let d = bbox.distances_from(px, py);
                    if d.iter().any(|&v| v <= 0.0) {
                        continue;
                    }
                    let m = d.iter().cloned().fold(f64::MIN, f64::max);
                    if !(m > lo && m <= hi) {
                        continue;
                    }
                    if let Some(radius) = center_radius {
                        let [cx, cy] = bbox.center();
                        let r = radius * stride as f64;
                        if (px - cx).abs() >= r || (py - cy).abs() >= r {
                            continue;
                        }
                    }
                    let area = bbox.area();
                    if best.is_none_or(|(a, _)| area < a) {
                        best = Some((area, g));
                    }
                }
                if let Some((_, g)) = best {
                    let (bbox, class_id) = gt[g];
                    let d = bbox.distances_from(px, py);
                    t.labels[[i, j]] = class_id + 1;
                    for k in 0..4 {
                        t.boxes[[i, j, k]] = d[k];
                    }
                    t.centerness[[i, j]] = centerness_target(d[0], d[1], d[2], d[3])?;
                    t.positive[[i, j]] = true;
                    t.gt_index[[i, j]] = Some(g);
                }
            }
        }
        levels.push(t);
    }
    Ok(DenseTargets { levels })
}

/// [`assign_box_targets`] over annotated instances.
pub fn assign_targets(
    geometry: &PyramidGeometry,
    gt: &[GtInstance],
    ranges: &[(f64, f64)],
    center_radius: Option<f64>,
) -> Result<DenseTargets> {
    let boxes: Vec<(BBox, usize)> = gt.iter().map(|g| (g.bbox, g.class_id)).collect();
    assign_box_targets(geometry, &boxes, ranges, center_radius)
}

/// `sqrt(min(l,r)/max(l,r) · min(t,b)/max(t,b))`.
pub fn centerness_target(l: f64, t: f64, r: f64, b: f64) -> Result<f64> {
    if !(l > 0.0 && t > 0.0 && r > 0.0 && b > 0.0) {
        return Err(Error::Precondition(format!(
            "centerness needs positive distances, got ({l}, {t}, {r}, {b})"
        )));
    }
    Ok(((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt())
}

/// Log-GIoU box loss `-ln((1 + g) / 2)`, with `g` clamped to `-1 + 1e-7`.
pub fn box_loss(g: f64) -> f64 {
    let g = g.max(-1.0 + GIOU_CLAMP_EPS);
    -((1.0 + g) / 2.0).ln()
}

/// `d box_loss / d g = -1 / (1 + g)` at the clamped value.
pub fn box_loss_grad(g: f64) -> f64 {
    let g = g.max(-1.0 + GIOU_CLAMP_EPS);
    -1.0 / (1.0 + g)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid focal loss of one logit and its derivative.
pub fn focal_loss(x: f64, positive: bool) -> (f64, f64) {
    let p = sigmoid(x);
    let g = FOCAL_GAMMA;
    if positive {
        let log_p = -softplus(-x);
        let q = 1.0 - p;
        let loss = -FOCAL_ALPHA * q.powf(g) * log_p;
        let grad = FOCAL_ALPHA * (g * q.powf(g) * p * log_p - q.powf(g + 1.0));
        (loss, grad)
    } else {
        let log_q = -softplus(x);
        let loss = -(1.0 - FOCAL_ALPHA) * p.powf(g) * log_q;
        let grad = (1.0 - FOCAL_ALPHA) * (-g * p.powf(g) * (1.0 - p) * log_q + p.powf(g + 1.0));
        (loss, grad)
    }
}

/// Binary cross-entropy with logits and its derivative.
pub fn bce_with_logits(x: f64, target: f64) -> (f64, f64) {
    (softplus(x) - target * x, sigmoid(x) - target)
}

/// Raw head outputs of one pyramid level.
#[derive(Debug, Clone)]
pub struct LevelPrediction {
    pub stride: usize,
    /// `(C, h, w)` classification logits.
    pub cls: Array3<f64>,
    /// `(4, h, w)` log box distances in stride units.
    pub reg: Array3<f64>,
    /// `(h, w)` centerness logits.
    pub ctr: Array2<f64>,
}

impl LevelPrediction {
    /// Decoded `(l, t, r, b)` in pixels at `(i, j)`.
    pub fn distances(&self, i: usize, j: usize) -> [f64; 4] {
        let s = self.stride as f64;
        [0, 1, 2, 3].map(|k| s * self.reg[[k, i, j]].min(MAX_LOG_DISTANCE).exp())
    }

    fn check_finite(&self, level: usize) -> Result<()> {
        let bad = |what: &str, idx: (usize, usize, usize)| Error::NonFinite {
            what: what.to_string(),
            level,
            index: idx,
        };
        if let Some((idx, _)) = self.cls.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(bad("classification logit", idx));
        }
        if let Some((idx, _)) = self.reg.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(bad("box regression", idx));
        }
        if let Some(((i, j), _)) = self.ctr.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(bad("centerness logit", (0, i, j)));
        }
        Ok(())
    }
}

/// Gradients of the detection losses with respect to one level's outputs.
#[derive(Debug, Clone)]
pub struct LevelPredictionGrad {
    pub cls: Array3<f64>,
    pub reg: Array3<f64>,
    pub ctr: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct DetectionLosses {
    pub cls: f64,
    pub cent: f64,
    pub bbox: f64,
    pub num_positive: usize,
    /// `[frame][level]`, gradients of `cls`, `cent` and `bbox` respectively
    /// scaled by the given weights.
    pub grads: Vec<Vec<LevelPredictionGrad>>,
}

/// Focal, centerness and log-GIoU losses over a batch of frames.
///
/// `L_cls` sums the focal loss over every location and class and divides by
/// the positive count (at least 1). `L_cent` is the mean centerness BCE over
/// positives. `L_box` is the centerness-weighted mean of the log-GIoU loss
/// over positives. The returned gradients are of `w_cls·L_cls + w_cent·L_cent
/// + w_box·L_box`.
pub fn detection_losses(
    predictions: &[Vec<LevelPrediction>],
    targets: &[DenseTargets],
    weights: [f64; 3],
) -> Result<DetectionLosses> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predicted frames vs {} target frames",
            predictions.len(),
            targets.len()
        )));
    }
    let mut num_pos = 0usize;
    let mut ctr_weight_sum = 0.0;
    for (preds, tgt) in predictions.iter().zip(targets) {
        if preds.len() != tgt.levels.len() {
            return Err(Error::Shape("level count mismatch".into()));
        }
        for (lvl, (p, t)) in preds.iter().zip(&tgt.levels).enumerate() {
            p.check_finite(lvl)?;
            let (_, h, w) = p.cls.dim();
            if (h, w) != t.labels.dim() || p.reg.dim() != (4, h, w) || p.ctr.dim() != (h, w) {
                return Err(Error::Shape(format!("prediction/target shape mismatch at level {lvl}")));
            }
            for (&pos, &c) in t.positive.iter().zip(&t.centerness) {
                if pos {
                    num_pos += 1;
                    ctr_weight_sum += c;
                }
            }
        }
    }
    let cls_norm = num_pos.max(1) as f64;

    let (mut l_cls, mut l_cent, mut l_box) = (0.0, 0.0, 0.0);
    let mut grads = Vec::with_capacity(predictions.len());
    for (preds, tgt) in predictions.iter().zip(targets) {
        let mut frame_grads = Vec::with_capacity(preds.len());
        for (p, t) in preds.iter().zip(&tgt.levels) {
            let (nc, h, w) = p.cls.dim();
            let mut g = LevelPredictionGrad {
                cls: Array3::zeros((nc, h, w)),
                reg: Array3::zeros((4, h, w)),
                ctr: Array2::zeros((h, w)),
            };
            for c in 0..nc {
                for i in 0..h {
                    for j in 0..w {
                        let is_pos = t.labels[[i, j]] == c + 1;
                        let (loss, d) = focal_loss(p.cls[[c, i, j]], is_pos);
                        l_cls += loss / cls_norm;
                        g.cls[[c, i, j]] = weights[0] * d / cls_norm;
                    }
                }
            }
            for i in 0..h {
                for j in 0..w {
                    if !t.positive[[i, j]] {
                        continue;
                    }
                    let ct = t.centerness[[i, j]];
                    let (loss, d) = bce_with_logits(p.ctr[[i, j]], ct);
                    l_cent += loss / cls_norm;
                    g.ctr[[i, j]] = weights[1] * d / cls_norm;

                    let [px, py] = location_point(p.stride, i, j);
                    let dist = p.distances(i, j);
                    let pred_box = BBox::from_distances(px, py, dist);
                    let tb = [0, 1, 2, 3].map(|k| t.boxes[[i, j, k]]);
                    let gt_box = BBox::from_distances(px, py, tb);
                    let (gv, dg) = giou_with_grad(&pred_box, &gt_box);
                    let norm = ctr_weight_sum.max(1e-12);
                    l_box += ct * box_loss(gv) / norm;
                    let dl_dg = ct * box_loss_grad(gv) / norm;
                    // x_min = px - l, y_min = py - t, x_max = px + r, y_max = py + b
                    let dg_dd = [-dg[0], -dg[1], dg[2], dg[3]];
                    for k in 0..4 {
                        let raw = p.reg[[k, i, j]];
                        let dexp = if raw < MAX_LOG_DISTANCE { dist[k] } else { 0.0 };
                        g.reg[[k, i, j]] = weights[2] * dl_dg * dg_dd[k] * dexp;
                    }
                }
            }
            frame_grads.push(g);
        }
        grads.push(frame_grads);
    }
    Ok(DetectionLosses {
        cls: l_cls,
        cent: l_cent,
        bbox: l_box,
        num_positive: num_pos,
        grads,
    })
}

/// Greedy class-wise non-maximum suppression over detections already sorted
/// by descending score; returns the indices of survivors.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (idx, d) in dets.iter().enumerate() {
        let kept = by_class.entry(d.class_id).or_default();
        if kept.iter().all(|&k| dets[k].bbox.iou(&d.bbox) <= iou_threshold) {
            kept.push(idx);
            keep.push(idx);
        }
    }
    keep
}

/// Orders detections by descending score, ties by `(level, row, col, class)`.
pub fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.level.cmp(&b.level))
        .then(a.grid_index.cmp(&b.grid_index))
        .then(a.class_id.cmp(&b.class_id))
}

const PRE_NMS_CANDIDATES: usize = 1000;

/// Decodes one frame's predictions into scored, suppressed detections.
pub fn decode_detections(
    predictions: &[LevelPrediction],
    image_hw: (usize, usize),
    score_threshold: f64,
    nms_iou: f64,
    top_k: usize,
) -> Result<Vec<Detection>> {
    if !(score_threshold > 0.0 && score_threshold < 1.0) || !(nms_iou > 0.0 && nms_iou < 1.0) {
        return Err(Error::Precondition(format!(
            "thresholds must lie in (0, 1): score {score_threshold}, nms {nms_iou}"
        )));
    }
    if top_k == 0 {
        return Err(Error::Precondition("top_k must be at least 1".into()));
    }
    let (ih, iw) = (image_hw.0 as f64, image_hw.1 as f64);
    let mut cands = Vec::new();
    for (level, p) in predictions.iter().enumerate() {
        let (nc, h, w) = p.cls.dim();
        for i in 0..h {
            for j in 0..w {
                let ctr = sigmoid(p.ctr[[i, j]]);
                for c in 0..nc {
                    let score = (sigmoid(p.cls[[c, i, j]]) * ctr).sqrt();
                    if score <= score_threshold {
                        continue;
                    }
                    let center = location_point(p.stride, i, j);
                    let bbox = BBox::from_distances(center[0], center[1], p.distances(i, j)).clip(iw, ih);
                    cands.push(Detection {
                        class_id: c,
                        score,
                        center,
                        bbox,
                        level,
                        grid_index: (i, j),
                    });
                }
            }
        }
    }
    cands.sort_by(detection_order);
    cands.truncate(PRE_NMS_CANDIDATES);
    let keep = nms(&cands, nms_iou);
    Ok(keep.into_iter().take(top_k).map(|k| cands[k].clone()).collect())
}

/// Shared classification / box / centerness towers.
#[derive(Debug, Clone)]
pub struct DetectionHead<T> {
    cls_tower: Vec<ConvRelu<T>>,
    cls_out: Conv2d<T>,
    box_tower: Vec<ConvRelu<T>>,
    reg_out: Conv2d<T>,
    ctr_out: Conv2d<T>,
}

/// Outputs of the detection towers at one level.
#[derive(Debug, Clone)]
pub struct HeadOutput<T> {
    pub cls: Array3<T>,
    pub reg: Array3<T>,
    pub ctr: Array3<T>,
    /// Box-tower features feeding the centerness branch.
    pub box_feat: Array3<T>,
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    cls_tower: Vec<ConvReluCache<T>>,
    cls_out: ConvCache<T>,
    box_tower: Vec<ConvReluCache<T>>,
    reg_out: ConvCache<T>,
    ctr_out: ConvCache<T>,
}

#[derive(Debug, Clone)]
pub struct HeadGrad<T> {
    pub cls: Array3<T>,
    pub reg: Array3<T>,
    pub ctr: Array3<T>,
    pub box_feat: Option<Array3<T>>,
}

/// Prior probability used to initialise the classification bias.
const CLS_PRIOR: f64 = 0.01;

impl<T: Real> DetectionHead<T> {
    pub fn new(channels: usize, num_classes: usize, depth: usize, rng: &mut impl Rng) -> Self {
        let tower = |rng: &mut _| -> Vec<ConvRelu<T>> {
            (0..depth)
                .map(|_| ConvRelu::new(Conv2d::new(channels, channels, 3, 1, rng)))
                .collect()
        };
        let cls_tower = tower(rng);
        let box_tower = tower(rng);
        let mut cls_out = Conv2d::with_std(channels, num_classes, 3, 1, 0.01, rng);
        cls_out.bias = Param::filled(&[num_classes], -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln());
        Self {
            cls_tower,
            cls_out,
            box_tower,
            reg_out: Conv2d::with_std(channels, 4, 3, 1, 0.01, rng),
            ctr_out: Conv2d::with_std(channels, 1, 3, 1, 0.01, rng),
        }
    }

    pub fn forward(&self, p: &Array3<T>) -> (HeadOutput<T>, HeadCache<T>) {
        let mut x = p.clone();
        let mut cls_caches = Vec::new();
        for layer in &self.cls_tower {
            let (y, c) = layer.forward(&x);
            cls_caches.push(c);
            x = y;
        }
        let (cls, cls_out) = self.cls_out.forward(&x);

        let mut x = p.clone();
        let mut box_caches = Vec::new();
        for layer in &self.box_tower {
            let (y, c) = layer.forward(&x);
            box_caches.push(c);
            x = y;
        }
        let (reg, reg_out) = self.reg_out.forward(&x);
        let (ctr, ctr_out) = self.ctr_out.forward(&x);
        (
            HeadOutput {
                cls,
                reg,
                ctr,
                box_feat: x,
            },
            HeadCache {
                cls_tower: cls_caches,
                cls_out,
                box_tower: box_caches,
                reg_out,
                ctr_out,
            },
        )
    }

    /// Returns the gradient with respect to the level input.
    pub fn backward(&mut self, cache: &HeadCache<T>, grad: HeadGrad<T>) -> Array3<T> {
        let mut dx = self.cls_out.backward(&cache.cls_out, &grad.cls, true).unwrap();
        for (layer, c) in self.cls_tower.iter_mut().zip(&cache.cls_tower).rev() {
            dx = layer.backward(c, dx, true).unwrap();
        }
        let mut db = self.reg_out.backward(&cache.reg_out, &grad.reg, true).unwrap();
        db += &self.ctr_out.backward(&cache.ctr_out, &grad.ctr, true).unwrap();
        if let Some(extra) = &grad.box_feat {
            db += extra;
        }
        for (layer, c) in self.box_tower.iter_mut().zip(&cache.box_tower).rev() {
            db = layer.backward(c, db, true).unwrap();
        }
        dx + db
    }
}

impl<T: Real> HeadOutput<T> {
    pub fn to_prediction(&self, stride: usize) -> LevelPrediction {
        let (_, h, w) = self.ctr.dim();
        LevelPrediction {
            stride,
            cls: self.cls.mapv(Real::f64),
            reg: self.reg.mapv(Real::f64),
            ctr: self.ctr.mapv(Real::f64).into_shape_with_order((h, w)).unwrap(),
        }
    }
}

impl<T: Real> Parameterized<T> for DetectionHead<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, l) in self.cls_tower.iter_mut().enumerate() {
            l.conv.visit_params(&join(prefix, &format!("cls_tower{i}")), f);
        }
        self.cls_out.visit_params(&join(prefix, "cls_out"), f);
        for (i, l) in self.box_tower.iter_mut().enumerate() {
            l.conv.visit_params(&join(prefix, &format!("box_tower{i}")), f);
        }
        self.reg_out.visit_params(&join(prefix, "reg_out"), f);
        self.ctr_out.visit_params(&join(prefix, "ctr_out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone_fpn::LEVEL_STRIDES;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geom() -> PyramidGeometry {
        PyramidGeometry::new((128, 128), &LEVEL_STRIDES)
    }

    #[test]
    fn centerness_examples() {
        assert_eq!(centerness_target(2.0, 2.0, 2.0, 2.0).unwrap(), 1.0);
        assert!((centerness_target(1.0, 1.0, 4.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((centerness_target(1.0, 3.0, 2.0, 6.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(centerness_target(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(centerness_target(1.0, -1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn box_loss_examples() {
        assert_eq!(box_loss(1.0), 0.0);
        assert!((box_loss(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((box_loss(-1.0 / 3.0) - 3f64.ln()).abs() < 1e-15);
        assert!(box_loss(-1.0).is_finite());
        assert!(box_loss(-1.0) > box_loss(-0.999));
    }

    #[test]
    fn hard_sample_amplification() {
        for k in 0..=200 {
            let g = -0.99 + k as f64 * (1.98 / 200.0);
            let mag = box_loss_grad(g).abs();
            assert_eq!(mag > 1.0, g < 0.0, "g = {g}");
            assert!(box_loss(g) > 0.0 || g == 1.0);
        }
    }

    #[test]
    fn assignment_distance_arithmetic() {
        // a location at (32, 32) is P4 (stride 16) cell (1, 1) or P3 cell ... use P3 point (36,36)?
        let gt = [(BBox::new(0.0, 0.0, 64.0, 64.0), 0)];
        let ranges = [(0.0, 64.0), (64.0, 128.0), (128.0, 256.0), (256.0, 512.0), (512.0, f64::INFINITY)];
        let t = assign_box_targets(&geom(), &gt, &ranges, None).unwrap();
        // stride 64 location (0,0) maps to (32, 32)
        let lv = &t.levels[3];
        assert!(!lv.positive[[0, 0]], "max distance 32 is outside (256, 512]");
        let lv = &t.levels[0];
        // stride 8 location (3,3) maps to (28, 28)
        assert!(lv.positive[[3, 3]]);
        assert_eq!(
            [0, 1, 2, 3].map(|k| lv.boxes[[3, 3, k]]),
            [28.0, 28.0, 36.0, 36.0]
        );
        let d = BBox::new(0.0, 0.0, 64.0, 64.0).distances_from(32.0, 32.0);
        assert_eq!(d, [32.0, 32.0, 32.0, 32.0]);
    }

    #[test]
    fn range_rule_selects_single_level() {
        let ranges = [(0.0, 64.0), (64.0, 128.0), (128.0, 256.0), (256.0, 512.0), (512.0, f64::INFINITY)];
        let geometry = PyramidGeometry::new((256, 256), &LEVEL_STRIDES);
        // a 200x200 box centred at (128,128); the centre location of P4 is (120,120)/(136,136)
        let bbox = BBox::new(28.0, 28.0, 228.0, 228.0);
        let t = assign_box_targets(&geometry, &[(bbox, 1)], &ranges, None).unwrap();
        // the location at (136,136) on P4 has max distance 108 -> P4
        assert!(t.levels[1].positive[[8, 8]]);
        assert_eq!(t.levels[1].labels[[8, 8]], 2);
        // the P3 location at (132,132) has max distance 104 -> not P3
        assert!(!t.levels[0].positive[[16, 16]]);
    }

    #[test]
    fn empty_ground_truth_is_all_background() {
        let t = assign_box_targets(&geom(), &[], &DEFAULT_LEVEL_RANGES, None).unwrap();
        assert_eq!(t.num_positive(), 0);
    }

    #[test]
    fn rejects_gapped_ranges() {
        let r = [(0.0, 16.0), (20.0, 32.0), (32.0, 64.0), (64.0, 128.0), (128.0, f64::INFINITY)];
        assert!(assign_box_targets(&geom(), &[], &r, None).is_err());
    }

    /// Exhaustive per-(location, box) assignment.
    fn brute_force(geometry: &PyramidGeometry, gt: &[(BBox, usize)], ranges: &[(f64, f64)]) -> Vec<Vec<Option<usize>>> {
        let mut out = vec![];
        for (lvl, &(lo, hi)) in ranges.iter().enumerate() {
            let (h, w) = geometry.level_hw(lvl);
            let s = geometry.strides[lvl] as f64;
            let mut level = vec![];
            for i in 0..h {
                for j in 0..w {
                    let (x, y) = (s * (j as f64 + 0.5), s * (i as f64 + 0.5));
                    let mut cands: Vec<(f64, usize)> = vec![];
                    for (g, (b, _)) in gt.iter().enumerate() {
                        let l = x - b.x_min;
                        let t = y - b.y_min;
                        let r = b.x_max - x;
                        let bb = b.y_max - y;
                        let m = l.max(t).max(r).max(bb);
                        if l > 0.0 && t > 0.0 && r > 0.0 && bb > 0.0 && m > lo && m <= hi {
                            cands.push(((b.x_max - b.x_min) * (b.y_max - b.y_min), g));
                        }
                    }
                    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    level.push(cands.first().map(|c| c.1));
                }
            }
            out.push(level);
        }
        out
    }

    #[test]
    fn nested_boxes_prefer_smaller_area_and_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let geometry = geom();
        let nested = vec![(BBox::new(10.0, 10.0, 70.0, 70.0), 0), (BBox::new(30.0, 30.0, 50.0, 50.0), 2)];
        let t = assign_box_targets(&geometry, &nested, &DEFAULT_LEVEL_RANGES, None).unwrap();
        // P3 location (4,4) -> (36,36) lies in both; max distance 14 in the inner box -> P3
        assert_eq!(t.levels[0].gt_index[[4, 4]], Some(1));
        assert_eq!(t.levels[0].labels[[4, 4]], 3);
        for trial in 0..30 {
            let mut gt = if trial == 0 { nested.clone() } else { vec![] };
            for _ in 0..rng.random_range(1..5) {
                let x0: f64 = rng.random_range(0.0..100.0);
                let y0: f64 = rng.random_range(0.0..100.0);
                let w: f64 = rng.random_range(4.0..90.0);
                let h: f64 = rng.random_range(4.0..90.0);
                gt.push((BBox::new(x0, y0, x0 + w, y0 + h), rng.random_range(0..3)));
            }
            let t = assign_box_targets(&geometry, &gt, &DEFAULT_LEVEL_RANGES, None).unwrap();
            let oracle = brute_force(&geometry, &gt, &DEFAULT_LEVEL_RANGES);
            for (lvl, lo) in oracle.iter().enumerate() {
                let got: Vec<_> = t.levels[lvl].gt_index.iter().cloned().collect();
                assert_eq!(&got, lo);
            }
        }
    }

    fn random_predictions(rng: &mut ChaCha8Rng, geometry: &PyramidGeometry, nc: usize) -> Vec<LevelPrediction> {
        (0..geometry.num_levels())
            .map(|l| {
                let (h, w) = geometry.level_hw(l);
                LevelPrediction {
                    stride: geometry.strides[l],
                    cls: Array3::from_shape_fn((nc, h, w), |_| rng.random_range(-3.0..1.0)),
                    reg: Array3::from_shape_fn((4, h, w), |_| rng.random_range(-0.5..1.0)),
                    ctr: Array2::from_shape_fn((h, w), |_| rng.random_range(-2.0..2.0)),
                }
            })
            .collect()
    }

    #[test]
    fn empty_positive_convention() {
        let geometry = geom();
        let t = assign_box_targets(&geometry, &[], &DEFAULT_LEVEL_RANGES, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = random_predictions(&mut rng, &geometry, 3);
        for l in &mut p {
            l.cls.fill(-20.0);
        }
        let out = detection_losses(&[p], &[t], [1.0; 3]).unwrap();
        assert!(out.cls < 1e-6);
        assert_eq!(out.cent, 0.0);
        assert_eq!(out.bbox, 0.0);
    }

    #[test]
    fn perfect_fit_limit() {
        let geometry = geom();
        let bbox = BBox::new(40.0, 40.0, 60.0, 60.0);
        let t = assign_box_targets(&geometry, &[(bbox, 1)], &DEFAULT_LEVEL_RANGES, None).unwrap();
        assert!(t.num_positive() >= 1);
        let mut p: Vec<LevelPrediction> = (0..5)
            .map(|l| {
                let (h, w) = geometry.level_hw(l);
                LevelPrediction {
                    stride: geometry.strides[l],
                    cls: Array3::from_elem((3, h, w), -30.0),
                    reg: Array3::zeros((4, h, w)),
                    ctr: Array2::zeros((h, w)),
                }
            })
            .collect();
        for (l, lt) in t.levels.iter().enumerate() {
            for ((i, j), &pos) in lt.positive.indexed_iter() {
                if pos {
                    p[l].cls[[1, i, j]] = 30.0;
                    for k in 0..4 {
                        p[l].reg[[k, i, j]] = (lt.boxes[[i, j, k]] / p[l].stride as f64).ln();
                    }
                    let c: f64 = lt.centerness[[i, j]];
                    // the ideal logit of a fractional target leaves its entropy; a
                    // near-saturated target keeps it small
                    p[l].ctr[[i, j]] = (c / (1.0 - c).max(1e-12)).ln();
                }
            }
        }
        let out = detection_losses(&[p], &[t.clone()], [1.0; 3]).unwrap();
        assert!(out.cls < 1e-3, "cls {}", out.cls);
        assert!(out.bbox < 1e-3, "box {}", out.bbox);
        // BCE minimum equals the target entropy; check the excess is tiny
        let mut entropy = 0.0;
        for lt in &t.levels {
            for (&pos, &c) in lt.positive.iter().zip(&lt.centerness) {
                if pos {
                    let c: f64 = c;
                    if c < 1.0 {
                        entropy -= c * c.ln() + (1.0 - c) * (1.0 - c).ln();
                    }
                }
            }
        }
        entropy /= t.num_positive() as f64;
        assert!(out.cent - entropy < 1e-3);
    }

    #[test]
    fn detection_loss_gradients_match_finite_differences() {
        let geometry = PyramidGeometry::new((128, 128), &LEVEL_STRIDES);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = vec![
            (BBox::new(20.0, 24.0, 46.0, 52.0), 0),
            (BBox::new(60.0, 50.0, 110.0, 100.0), 2),
        ];
        let t = assign_box_targets(&geometry, &gt, &DEFAULT_LEVEL_RANGES, None).unwrap();
        let p = random_predictions(&mut rng, &geometry, 3);
        for (term, weights) in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]].into_iter().enumerate() {
            let eval = |p: &Vec<LevelPrediction>| {
                let o = detection_losses(&[p.clone()], &[t.clone()], weights).unwrap();
                [o.cls, o.cent, o.bbox][term]
            };
            let out = detection_losses(&[p.clone()], &[t.clone()], weights).unwrap();
            let h = 1e-6;
            let mut checked = 0;
            for (lvl, lt) in t.levels.iter().enumerate() {
                for ((i, j), &pos) in lt.positive.indexed_iter() {
                    if !pos {
                        continue;
                    }
                    for which in 0..3 {
                        let (analytic, fd) = match which {
                            0 => {
                                let c = lt.labels[[i, j]] - 1;
                                let mut a = p.clone();
                                a[lvl].cls[[c, i, j]] += h;
                                let mut b = p.clone();
                                b[lvl].cls[[c, i, j]] -= h;
                                (out.grads[0][lvl].cls[[c, i, j]], (eval(&a) - eval(&b)) / (2.0 * h))
                            }
                            1 => {
                                let mut a = p.clone();
                                a[lvl].ctr[[i, j]] += h;
                                let mut b = p.clone();
                                b[lvl].ctr[[i, j]] -= h;
                                (out.grads[0][lvl].ctr[[i, j]], (eval(&a) - eval(&b)) / (2.0 * h))
                            }
                            _ => {
                                let k = checked % 4;
                                let mut a = p.clone();
                                a[lvl].reg[[k, i, j]] += h;
                                let mut b = p.clone();
                                b[lvl].reg[[k, i, j]] -= h;
                                (out.grads[0][lvl].reg[[k, i, j]], (eval(&a) - eval(&b)) / (2.0 * h))
                            }
                        };
                        let tol = 1e-3 * analytic.abs().max(fd.abs()).max(1e-7);
                        assert!((analytic - fd).abs() <= tol, "term {term} kind {which}: {analytic} vs {fd}");
                        checked += 1;
                    }
                }
            }
            assert!(checked > 0);
            // a background logit
            let mut a = p.clone();
            a[0].cls[[1, 0, 0]] += h;
            let mut b = p.clone();
            b[0].cls[[1, 0, 0]] -= h;
            let fd = (eval(&a) - eval(&b)) / (2.0 * h);
            let an = out.grads[0][0].cls[[1, 0, 0]];
            assert!((an - fd).abs() <= 1e-3 * an.abs().max(fd.abs()).max(1e-9));
        }
    }

    #[test]
    fn nan_prediction_is_reported_with_location() {
        let geometry = geom();
        let t = assign_box_targets(&geometry, &[], &DEFAULT_LEVEL_RANGES, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = random_predictions(&mut rng, &geometry, 3);
        p[2].reg[[1, 3, 2]] = f64::NAN;
        match detection_losses(&[p], &[t], [1.0; 3]) {
            Err(Error::NonFinite { level, index, .. }) => {
                assert_eq!(level, 2);
                assert_eq!(index, (1, 3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn one_hot_predictions(geometry: &PyramidGeometry) -> Vec<LevelPrediction> {
        (0..5)
            .map(|l| {
                let (h, w) = geometry.level_hw(l);
                LevelPrediction {
                    stride: geometry.strides[l],
                    cls: Array3::from_elem((3, h, w), -10.0),
                    reg: Array3::zeros((4, h, w)),
                    ctr: Array2::zeros((h, w)),
                }
            })
            .collect()
    }

    #[test]
    fn single_dominant_location_decodes_to_one_detection() {
        let geometry = geom();
        let mut p = one_hot_predictions(&geometry);
        p[0].cls[[2, 5, 7]] = 8.0;
        p[0].ctr[[5, 7]] = 8.0;
        let dets = decode_detections(&p, (128, 128), 0.3, 0.5, 10).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].center, [60.0, 44.0]);
        assert_eq!(dets[0].class_id, 2);
        assert_eq!(dets[0].grid_index, (5, 7));
        assert!(dets[0].bbox.contains(60.0, 44.0));
    }

    #[test]
    fn overlapping_same_class_box_is_suppressed() {
        let a = Detection {
            class_id: 0,
            score: 0.9,
            center: [5.0, 5.0],
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
            level: 0,
            grid_index: (0, 0),
        };
        let mut b = a.clone();
        b.score = 0.8;
        b.bbox = BBox::new(0.0, 0.0, 10.0, 9.0); // IoU 0.9
        let mut c = b.clone();
        c.class_id = 1;
        assert_eq!(nms(&[a.clone(), b.clone()], 0.5), vec![0]);
        assert_eq!(nms(&[a, c], 0.5), vec![0, 1]);
    }

    /// Quadratic reference NMS over a flat list.
    fn reference_nms(dets: &[Detection], thr: f64) -> Vec<usize> {
        let mut suppressed = vec![false; dets.len()];
        let mut keep = vec![];
        for i in 0..dets.len() {
            if suppressed[i] {
                continue;
            }
            keep.push(i);
            for j in i + 1..dets.len() {
                if dets[j].class_id == dets[i].class_id && dets[i].bbox.iou(&dets[j].bbox) > thr {
                    suppressed[j] = true;
                }
            }
        }
        keep
    }

    #[test]
    fn decode_matches_quadratic_reference() {
        let geometry = geom();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let p = random_predictions(&mut rng, &geometry, 3);
            let dets = decode_detections(&p, (128, 128), 0.2, 0.5, 1000).unwrap();
            // rebuild the candidate list independently
            let mut cands = vec![];
            for (level, lp) in p.iter().enumerate() {
                let (nc, h, w) = lp.cls.dim();
                for i in 0..h {
                    for j in 0..w {
                        for c in 0..nc {
                            let s = (sigmoid(lp.cls[[c, i, j]]) * sigmoid(lp.ctr[[i, j]])).sqrt();
                            if s > 0.2 {
                                let pt = location_point(lp.stride, i, j);
                                let b = BBox::from_distances(pt[0], pt[1], lp.distances(i, j)).clip(128.0, 128.0);
                                cands.push(Detection { class_id: c, score: s, center: pt, bbox: b, level, grid_index: (i, j) });
                            }
                        }
                    }
                }
            }
            cands.sort_by(detection_order);
            cands.truncate(1000);
            let expect: Vec<_> = reference_nms(&cands, 0.5).into_iter().map(|k| cands[k].clone()).collect();
            assert_eq!(dets, expect);
            for d in &dets {
                assert!(d.bbox.contains(d.center[0], d.center[1]));
                assert!((0.0..=1.0).contains(&d.score));
            }
        }
    }

    #[test]
    fn temperature_scaling_preserves_survivors() {
        let geometry = geom();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = random_predictions(&mut rng, &geometry, 3);
        for l in &mut p {
            l.ctr.fill(0.7);
        }
        let thr = 0.25;
        let base = decode_detections(&p, (128, 128), thr, 0.5, 50).unwrap();
        for tau in [0.5, 2.0, 3.0] {
            let mut q = p.clone();
            for l in &mut q {
                l.cls.mapv_inplace(|x| x * tau);
            }
            let ctr = sigmoid(0.7);
            let x = {
                let prob: f64 = thr * thr / ctr;
                (prob / (1.0 - prob)).ln()
            };
            let thr2 = (sigmoid(tau * x) * ctr).sqrt();
            let scaled = decode_detections(&q, (128, 128), thr2, 0.5, 50).unwrap();
            let a: Vec<_> = base.iter().map(|d| (d.level, d.grid_index, d.class_id)).collect();
            let b: Vec<_> = scaled.iter().map(|d| (d.level, d.grid_index, d.class_id)).collect();
            assert_eq!(a, b, "tau {tau}");
        }
    }

    #[test]
    fn decode_of_ideal_targets_recovers_box() {
        let geometry = geom();
        let bbox = BBox::new(33.0, 17.0, 71.0, 49.0);
        let t = assign_box_targets(&geometry, &[(bbox, 0)], &DEFAULT_LEVEL_RANGES, None).unwrap();
        let mut p = one_hot_predictions(&geometry);
        let mut best = (0.0, 0, 0, 0);
        for (l, lt) in t.levels.iter().enumerate() {
            for ((i, j), &pos) in lt.positive.indexed_iter() {
                if pos {
                    for k in 0..4 {
                        p[l].reg[[k, i, j]] = (lt.boxes[[i, j, k]] / p[l].stride as f64).ln();
                    }
                    if lt.centerness[[i, j]] > best.0 {
                        best = (lt.centerness[[i, j]], l, i, j);
                    }
                }
            }
        }
        let (_, l, i, j) = best;
        p[l].cls[[0, i, j]] = 10.0;
        p[l].ctr[[i, j]] = 10.0;
        let dets = decode_detections(&p, (128, 128), 0.5, 0.5, 5).unwrap();
        assert_eq!(dets.len(), 1);
        let got = dets[0].bbox.to_array();
        for (a, b) in got.iter().zip(bbox.to_array()) {
            assert!((a - b).abs() <= 0.5);
        }
    }
}
