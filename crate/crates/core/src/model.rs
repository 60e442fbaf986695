//! The full network: pyramid, detection towers, mask head and movement head,
//! with clip-level training losses and per-video inference.

use std::collections::{BTreeMap, HashMap};

use log::warn;
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone_fpn::{ExtractorCache, PyramidExtractor, LEVEL_STRIDES, NUM_LEVELS};
use crate::detection_head::{
    assign_targets, decode_detections, detection_losses, Detection, DetectionHead, HeadCache, HeadGrad, HeadOutput,
    PyramidGeometry, DEFAULT_LEVEL_RANGES,
};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::mask_head::{
    divide_box, gt_at_stride, predict_attention, AttentionCache, BaseFeatureCache, InstanceBaseCache, MaskHead,
    MaskHeadConfig,
};
use crate::nn::{join, Param, Parameterized, Real};
use crate::synthetic_video::GtInstance;
use crate::tracking_head::{track_loss, MovementField, MovementHead, TrackReadout, Tracker, TrackerConfig};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub feat_channels: usize,
    pub backbone_widths: [usize; 4],
    pub tower_depth: usize,
    pub mask: MaskHeadConfig,
    /// Centre-sampling radius in strides; `None` disables it.
    pub center_radius: Option<f64>,
}

/// Weights of the five loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub cent: f64,
    pub bbox: f64,
    pub mask: f64,
    pub track: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            cent: 1.0,
            bbox: 1.0,
            mask: 1.0,
            track: 1.0,
        }
    }
}

/// Loss values of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossRecord {
    pub cls: f64,
    pub cent: f64,
    pub bbox: f64,
    pub mask: f64,
    pub track: f64,
    pub all: f64,
}

impl LossRecord {
    pub const TERMS: [&'static str; 6] = ["cls", "cent", "box", "mask", "track", "all"];

    pub fn values(&self) -> [f64; 6] {
        [self.cls, self.cent, self.bbox, self.mask, self.track, self.all]
    }
}

/// Which terms a training pass computes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSelection {
    pub weights: LossWeights,
    pub track: bool,
}

/// Post-processing knobs for inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub top_k: usize,
    pub tracker: TrackerConfig,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.6,
            top_k: 10,
            tracker: TrackerConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SgNet<T> {
    pub config: ModelConfig,
    pub extractor: PyramidExtractor<T>,
    pub detection: DetectionHead<T>,
    pub mask: MaskHead<T>,
    pub movement: MovementHead<T>,
}

struct FrameForward<T> {
    extractor: ExtractorCache<T>,
    heads: Vec<(HeadOutput<T>, HeadCache<T>)>,
    attention: Vec<(Array3<T>, AttentionCache<T>)>,
    features: Array3<T>,
    base_cache: BaseFeatureCache<T>,
}

/// One tracked detection of one frame.
#[derive(Debug, Clone)]
pub struct FrameObject {
    pub id: usize,
    pub detection: Detection,
    /// Binary mask at stride 2, `None` when the box covered no mask location.
    pub mask: Option<Mask>,
}

/// Per-frame inference output of a video.
#[derive(Debug, Clone, Default)]
pub struct VideoPrediction {
    pub frames: Vec<Vec<FrameObject>>,
    pub skipped_masks: usize,
}

impl<T: Real> SgNet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.feat_channels;
        Self {
            extractor: PyramidExtractor::new(config.backbone_widths, c, &mut rng),
            detection: DetectionHead::new(c, config.num_classes, config.tower_depth, &mut rng),
            mask: MaskHead::new(c, config.mask.clone(), &mut rng),
            movement: MovementHead::new(c, &mut rng),
            config,
        }
    }

    fn forward_frame(&self, image: &Array3<T>) -> Result<FrameForward<T>> {
        let (pyramid, extractor) = self.extractor.extract_pyramid(image)?;
        let heads = pyramid.levels.iter().map(|p| self.detection.forward(p)).collect();
        let attention = pyramid.levels.iter().map(|p| self.mask.attention.forward(p)).collect();
        let (features, base_cache) = self.mask.base_features.build_base_features(&pyramid);
        Ok(FrameForward {
            extractor,
            heads,
            attention,
            features,
            base_cache,
        })
    }

    /// Forward and backward over one clip. Gradients are accumulated into
    /// the parameters; returns the weighted loss record.
    pub fn clip_loss_and_grad(
        &mut self,
        frames: &[Array3<T>],
        annotations: &[Vec<GtInstance>],
        selection: LossSelection,
    ) -> Result<LossRecord> {
        if frames.is_empty() || frames.len() != annotations.len() {
            return Err(Error::Precondition(format!(
                "{} frames with {} annotation lists",
                frames.len(),
                annotations.len()
            )));
        }
        let w = selection.weights;
        let (_, ih, iw) = frames[0].dim();
        let geom = PyramidGeometry::new((ih, iw), &LEVEL_STRIDES);
        let fwd: Vec<FrameForward<T>> = frames.iter().map(|f| self.forward_frame(f)).collect::<Result<_>>()?;
        let targets = annotations
            .iter()
            .map(|gt| assign_targets(&geom, gt, &DEFAULT_LEVEL_RANGES, self.config.center_radius))
            .collect::<Result<Vec<_>>>()?;

        let preds: Vec<Vec<_>> = fwd
            .iter()
            .map(|f| f.heads.iter().zip(LEVEL_STRIDES).map(|((o, _), s)| o.to_prediction(s)).collect())
            .collect();
        let det = detection_losses(&preds, &targets, [w.cls, w.cent, w.bbox])?;

        let nf = frames.len();
        let mut d_box_feat: Vec<Vec<Array3<T>>> = fwd
            .iter()
            .map(|f| f.heads.iter().map(|(o, _)| Array3::zeros(o.box_feat.dim())).collect())
            .collect();
        let mut d_attention: Vec<Vec<Array3<f64>>> = fwd
            .iter()
            .map(|f| f.attention.iter().map(|(a, _)| Array3::zeros(a.dim())).collect())
            .collect();
        let mut d_features: Vec<Array3<T>> = fwd.iter().map(|f| Array3::zeros(f.features.dim())).collect();

        // mask loss: GT box and mask, each positive location's own attention
        let side = self.mask.config.side();
        let stride = self.mask.config.base_stride();
        let total_samples: usize = targets.iter().map(|t| t.num_positive()).sum();
        let mut l_mask = 0.0;
        if total_samples > 0 {
            let mut used = 0usize;
            let mut sum = 0.0;
            let mut per_frame = Vec::with_capacity(nf);
            for (t, f) in fwd.iter().enumerate() {
                let mut by_gt: BTreeMap<usize, Vec<(usize, usize, usize)>> = BTreeMap::new();
                for (lvl, i, j, g) in targets[t].positives() {
                    by_gt.entry(g).or_default().push((lvl, i, j));
                }
                let mut items = Vec::new();
                for (g, locs) in by_gt {
                    let inst = &annotations[t][g];
                    let grid = divide_box(&inst.bbox, self.mask.config.division)?;
                    let gt = gt_at_stride(&inst.mask, stride);
                    match InstanceBaseCache::build(&f.features, stride, &self.mask.base_conv, grid, side, &gt) {
                        Some(cache) => items.push((cache, locs)),
                        None => warn!("frame {t}: instance {} covers no mask location", inst.id),
                    }
                }
                used += items.iter().map(|(_, l)| l.len()).sum::<usize>();
                per_frame.push(items);
            }
            let scale = w.mask / used.max(1) as f64;
            for (t, items) in per_frame.iter().enumerate() {
                for (cache, locs) in items {
                    let mut d_pre = vec![0.0; cache.pixels.len()];
                    let channels = cache.grid.canonical_channels(side);
                    for &(lvl, i, j) in locs {
                        let scores = predict_attention(&fwd[t].attention[lvl].0, lvl, (i, j), &cache.grid, side)?;
                        let mut d_scores = vec![0.0; scores.values.len()];
                        sum += cache.loss_and_grad(&scores.values, scale, &mut d_scores, &mut d_pre);
                        for (k, &ch) in channels.iter().enumerate() {
                            d_attention[t][lvl][[ch, i, j]] += d_scores[k];
                        }
                    }
                    cache.backward(&d_pre, &fwd[t].features, &mut self.mask.base_conv, &mut d_features[t]);
                }
            }
            l_mask = sum / used.max(1) as f64;
        }

        // track loss on consecutive pairs
        let mut l_track = 0.0;
        if selection.track && nf > 1 {
            let mut readouts = Vec::new();
            let mut sites = Vec::new();
            let mut fields = Vec::with_capacity(nf);
            for t in 1..nf {
                let cur: Vec<Array3<T>> = fwd[t].heads.iter().map(|(o, _)| o.box_feat.clone()).collect();
                let prev: Vec<Array3<T>> = fwd[t - 1].heads.iter().map(|(o, _)| o.box_feat.clone()).collect();
                let (field, cache) = self.movement.forward(&cur, Some(&prev), &LEVEL_STRIDES)?;
                let prev_centers: HashMap<usize, [f64; 2]> =
                    annotations[t - 1].iter().map(|g| (g.id, g.center)).collect();
                for (lvl, i, j, g) in targets[t].positives() {
                    let inst = &annotations[t][g];
                    if let Some(pc) = prev_centers.get(&inst.id) {
                        readouts.push(TrackReadout {
                            predicted: [field[lvl][[0, i, j]].f64(), field[lvl][[1, i, j]].f64()],
                            target: [inst.center[0] - pc[0], inst.center[1] - pc[1]],
                        });
                        sites.push((t, lvl, i, j));
                    }
                }
                fields.push((field, cache));
            }
            let (loss, grads) = track_loss(&readouts);
            l_track = loss;
            if w.track != 0.0 && !readouts.is_empty() {
                let mut d_fields: Vec<Vec<Array3<T>>> = fields
                    .iter()
                    .map(|(f, _)| f.iter().map(|l| Array3::zeros(l.dim())).collect())
                    .collect();
                for (&(t, lvl, i, j), g) in sites.iter().zip(&grads) {
                    d_fields[t - 1][lvl][[0, i, j]] += T::of(w.track * g[0]);
                    d_fields[t - 1][lvl][[1, i, j]] += T::of(w.track * g[1]);
                }
                for (k, (_, cache)) in fields.iter().enumerate() {
                    let t = k + 1;
                    let feats = self.movement.backward(cache, &d_fields[k]);
                    for (lvl, (dc, dp)) in feats.into_iter().enumerate() {
                        d_box_feat[t][lvl] += &dc;
                        d_box_feat[t - 1][lvl] += &dp;
                    }
                }
            }
        }

        // backward through heads and the shared pyramid
        for (t, f) in fwd.into_iter().enumerate() {
            let mut level_grads: Vec<Array3<T>> = Vec::with_capacity(NUM_LEVELS);
            let base = self.mask.base_features.backward(&f.base_cache, &d_features[t]);
            for (lvl, ((_, head_cache), (_, attn_cache))) in f.heads.iter().zip(&f.attention).enumerate() {
                let g = &det.grads[t][lvl];
                let (h, wd) = g.ctr.dim();
                let grad = HeadGrad {
                    cls: g.cls.mapv(T::of),
                    reg: g.reg.mapv(T::of),
                    ctr: g.ctr.mapv(T::of).into_shape_with_order((1, h, wd)).unwrap(),
                    box_feat: Some(std::mem::take(&mut d_box_feat[t][lvl])),
                };
                let mut dp = self.detection.backward(head_cache, grad);
                let da = d_attention[t][lvl].mapv(T::of);
                dp += &self.mask.attention.backward(attn_cache, &da);
                if let Some(Some(b)) = base.get(lvl) {
                    dp += b;
                }
                level_grads.push(dp);
            }
            self.extractor.backward(&f.extractor, level_grads);
        }

        let all = w.cls * det.cls + w.cent * det.cent + w.bbox * det.bbox + w.mask * l_mask + w.track * l_track;
        Ok(LossRecord {
            cls: det.cls,
            cent: det.cent,
            bbox: det.bbox,
            mask: l_mask,
            track: l_track,
            all,
        })
    }

    /// Detection, masks and association over a whole video.
    pub fn infer_video(&self, frames: &[Array3<T>], cfg: &InferConfig) -> Result<VideoPrediction> {
        let mut tracker = Tracker::new(cfg.tracker);
        let mut out = VideoPrediction::default();
        let mut prev_feat: Option<Vec<Array3<T>>> = None;
        for (t, image) in frames.iter().enumerate() {
            let (_, ih, iw) = image.dim();
            let f = self.forward_frame(image)?;
            let preds: Vec<_> = f.heads.iter().zip(LEVEL_STRIDES).map(|((o, _), s)| o.to_prediction(s)).collect();
            let dets = decode_detections(&preds, (ih, iw), cfg.score_threshold, cfg.nms_iou, cfg.top_k)?;
            let box_feat: Vec<Array3<T>> = f.heads.iter().map(|(o, _)| o.box_feat.clone()).collect();
            let displacements = if t == 0 {
                vec![[0.0; 2]; dets.len()]
            } else {
                let (levels, _) = self.movement.forward(&box_feat, prev_feat.as_deref(), &LEVEL_STRIDES)?;
                MovementField {
                    levels: levels.into_iter().map(|l| l.mapv(|v| v.f64())).collect(),
                }
                .read_detections(&dets)
            };
            let ids = tracker.associate(t, &dets, &displacements)?;
            let attn: Vec<Array3<T>> = f.attention.into_iter().map(|(a, _)| a).collect();
            let mut objects = Vec::with_capacity(dets.len());
            for (d, id) in dets.into_iter().zip(ids) {
                let mask = match self.mask.predict_instance(&d, &attn, &f.features) {
                    Ok(m) => Some(to_stride2(&m.binary, ih, iw)),
                    Err(Error::Precondition(msg)) => {
                        warn!("frame {t}: mask skipped: {msg}");
                        out.skipped_masks += 1;
                        None
                    }
                    Err(e) => return Err(e),
                };
                objects.push(FrameObject { id, detection: d, mask });
            }
            out.frames.push(objects);
            prev_feat = Some(box_feat);
        }
        Ok(out)
    }

    pub fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    pub fn num_parameters(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }

    /// `(name, values)` snapshot of every parameter.
    pub fn named_values(&mut self) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, p| out.push((name.to_string(), p.value.clone())));
        out
    }
}

/// Resamples a mask to the stride-2 grid of an `ih × iw` image.
pub fn to_stride2(mask: &Mask, ih: usize, iw: usize) -> Mask {
    let (h, w) = (ih / 2, iw / 2);
    if mask.height == h && mask.width == w {
        mask.clone()
    } else {
        mask.resize_nearest(h, w)
    }
}

impl<T: Real> Parameterized<T> for SgNet<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.extractor.visit_params(prefix, f);
        self.detection.visit_params(&join(prefix, "detection"), f);
        self.mask.visit_params(&join(prefix, "mask"), f);
        self.movement.visit_params(&join(prefix, "movement"), f);
    }
}
