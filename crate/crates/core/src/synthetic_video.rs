//! Deterministic videos of moving, overlapping geometric shapes with full
//! instance ground truth.
//!
//! Each shape is rasterised at pixel centres, so a translation by an integer
//! vector moves its mask by exactly that vector. Shapes are painted in a fixed
//! z-order; pixels covered by a later shape are removed from the masks of the
//! shapes beneath it.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone_fpn::SIZE_MULTIPLE;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::mask::Mask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_shapes: usize,
    pub num_classes: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub velocity_min: [f64; 2],
    pub velocity_max: [f64; 2],
    /// Per-frame positional jitter bound, pixels per axis.
    pub jitter: f64,
    pub fps: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 128,
            width: 128,
            num_shapes: 3,
            num_classes: 3,
            min_size: 20.0,
            max_size: 44.0,
            velocity_min: [-4.0, -4.0],
            velocity_max: [4.0, 4.0],
            jitter: 0.5,
            fps: 6.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.height % SIZE_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "frame height {} is not a positive multiple of {SIZE_MULTIPLE}",
                self.height
            )));
        }
        if self.width == 0 || self.width % SIZE_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "frame width {} is not a positive multiple of {SIZE_MULTIPLE}",
                self.width
            )));
        }
        if self.frames < 2 {
            return Err(Error::Config(format!("need at least 2 frames, got {}", self.frames)));
        }
        if !(1..=8).contains(&self.num_shapes) {
            return Err(Error::Config(format!(
                "shape count {} outside [1, 8]",
                self.num_shapes
            )));
        }
        if !(1..=ShapeKind::ALL.len()).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "class count {} outside [1, {}]",
                self.num_classes,
                ShapeKind::ALL.len()
            )));
        }
        if !(self.min_size >= 4.0 && self.max_size >= self.min_size) {
            return Err(Error::Config(format!(
                "invalid size range [{}, {}]",
                self.min_size, self.max_size
            )));
        }
        if self.max_size >= self.width.min(self.height) as f64 {
            return Err(Error::Config("max_size must be smaller than the frame".into()));
        }
        for k in 0..2 {
            if self.velocity_min[k] > self.velocity_max[k] {
                return Err(Error::Config("velocity_min exceeds velocity_max".into()));
            }
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::Config("jitter must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Rectangle, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn for_class(class_id: usize) -> Self {
        Self::ALL[class_id % Self::ALL.len()]
    }

    pub fn color(self) -> [u8; 3] {
        match self {
            ShapeKind::Rectangle => [230, 60, 50],
            ShapeKind::Circle => [50, 205, 80],
            ShapeKind::Triangle => [60, 90, 240],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Shape {
    id: usize,
    class_id: usize,
    kind: ShapeKind,
    half_w: f64,
    half_h: f64,
    origin: [f64; 2],
    velocity: [f64; 2],
}

impl Shape {
    fn contains(&self, cx: f64, cy: f64, x: f64, y: f64) -> bool {
        let dx = x - cx;
        let dy = y - cy;
        match self.kind {
            ShapeKind::Rectangle => dx.abs() <= self.half_w && dy.abs() <= self.half_h,
            ShapeKind::Circle => {
                let u = dx / self.half_w;
                let v = dy / self.half_h;
                u * u + v * v <= 1.0
            }
            ShapeKind::Triangle => {
                // apex up, base at cy + half_h
                if dy < -self.half_h || dy > self.half_h {
                    return false;
                }
                let frac = (dy + self.half_h) / (2.0 * self.half_h);
                dx.abs() <= frac * self.half_w
            }
        }
    }

    fn rasterize(&self, center: [f64; 2], height: usize, width: usize) -> Mask {
        let r0 = ((center[1] - self.half_h - 1.0).floor().max(0.0)) as usize;
        let r1 = ((center[1] + self.half_h + 1.0).ceil().max(0.0) as usize).min(height);
        let c0 = ((center[0] - self.half_w - 1.0).floor().max(0.0)) as usize;
        let c1 = ((center[0] + self.half_w + 1.0).ceil().max(0.0) as usize).min(width);
        let mut mask = Mask::zeros(height, width);
        for r in r0..r1 {
            for c in c0..c1 {
                if self.contains(center[0], center[1], c as f64 + 0.5, r as f64 + 0.5) {
                    mask.set(r, c, true);
                }
            }
        }
        mask
    }
}

/// One visible object instance in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub id: usize,
    pub class_id: usize,
    pub bbox: BBox,
    pub mask: Mask,
    /// Mask centroid in image pixels.
    pub center: [f64; 2],
}

impl GtInstance {
    /// Builds an instance from its visible mask, `None` when the mask is empty.
    pub fn from_mask(id: usize, class_id: usize, mask: Mask) -> Option<Self> {
        let bbox = mask.bbox()?;
        let center = mask.centroid()?;
        Some(Self {
            id,
            class_id,
            bbox,
            mask,
            center,
        })
    }
}

/// RGB frame with 8-bit channels, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-first tensor with intensities in `[0, 1]`.
    pub fn to_chw<T: num_traits::Float>(&self) -> Array3<T> {
        let scale = T::from(1.0 / 255.0).unwrap();
        Array3::from_shape_fn((3, self.height, self.width), |(ch, r, c)| {
            T::from(self.data[3 * (r * self.width + c) + ch]).unwrap() * scale
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub frames: Vec<Frame>,
    /// Visible instances per frame.
    pub annotations: Vec<Vec<GtInstance>>,
    pub fps: f64,
    pub seed: u64,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.height)
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.width)
    }
}

fn background(height: usize, width: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let fx: f64 = rng.random_range(0.05..0.2);
    let fy: f64 = rng.random_range(0.05..0.2);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut data = Vec::with_capacity(height * width * 3);
    for r in 0..height {
        for c in 0..width {
            let wave = (fx * c as f64 + phase).sin() * (fy * r as f64).cos();
            let base = 0.42 + 0.06 * wave;
            let grain: f64 = rng.random_range(-0.03..0.03);
            let v = ((base + grain).clamp(0.0, 1.0) * 255.0).round() as u8;
            data.extend_from_slice(&[v, v, v]);
        }
    }
    data
}

/// Generates a video; identical `(seed, cfg)` gives bit-identical output.
pub fn generate_video(seed: u64, cfg: &GeneratorConfig) -> Result<VideoSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);

    let shapes: Vec<Shape> = (0..cfg.num_shapes)
        .map(|id| {
            let class_id = rng.random_range(0..cfg.num_classes);
            let kind = ShapeKind::for_class(class_id);
            let sw = rng.random_range(cfg.min_size..=cfg.max_size);
            let sh = rng.random_range(cfg.min_size..=cfg.max_size);
            let (half_w, half_h) = (0.5 * sw, 0.5 * sh);
            let origin = [
                rng.random_range(half_w + 1.0..=w as f64 - half_w - 1.0),
                rng.random_range(half_h + 1.0..=h as f64 - half_h - 1.0),
            ];
            let velocity = [
                rng.random_range(cfg.velocity_min[0]..=cfg.velocity_max[0]),
                rng.random_range(cfg.velocity_min[1]..=cfg.velocity_max[1]),
            ];
            Shape {
                id,
                class_id,
                kind,
                half_w,
                half_h,
                origin,
                velocity,
            }
        })
        .collect();

    let bg = background(h, w, &mut rng);
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut annotations = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let raw: Vec<Mask> = shapes
            .iter()
            .map(|s| {
                let mut center = [
                    s.origin[0] + s.velocity[0] * t as f64,
                    s.origin[1] + s.velocity[1] * t as f64,
                ];
                if cfg.jitter > 0.0 && t > 0 {
                    center[0] += rng.random_range(-cfg.jitter..=cfg.jitter);
                    center[1] += rng.random_range(-cfg.jitter..=cfg.jitter);
                }
                s.rasterize(center, h, w)
            })
            .collect();

        let mut data = bg.clone();
        for (s, m) in shapes.iter().zip(&raw) {
            let color = s.kind.color();
            for r in 0..h {
                for c in 0..w {
                    if m.get(r, c) {
                        let i = 3 * (r * w + c);
                        data[i..i + 3].copy_from_slice(&color);
                    }
                }
            }
        }
        frames.push(Frame {
            height: h,
            width: w,
            data,
        });

        // visible masks: remove pixels covered by any shape above in z-order
        let mut covered = Mask::zeros(h, w);
        let mut visible: Vec<Option<GtInstance>> = vec![None; shapes.len()];
        for (k, s) in shapes.iter().enumerate().rev() {
            let m = &raw[k];
            let vis = Mask::from_fn(h, w, |r, c| m.get(r, c) && !covered.get(r, c));
            for r in 0..h {
                for c in 0..w {
                    if m.get(r, c) {
                        covered.set(r, c, true);
                    }
                }
            }
            visible[k] = GtInstance::from_mask(s.id, s.class_id, vis);
        }
        annotations.push(visible.into_iter().flatten().collect());
    }

    Ok(VideoSample {
        frames,
        annotations,
        fps: cfg.fps,
        seed,
    })
}

/// Exact centre displacement `o_t - o_{t-1}` for every instance visible in
/// both frames `t - 1` and `t`.
pub fn velocity_oracle(sample: &VideoSample, t: usize) -> BTreeMap<usize, [f64; 2]> {
    let mut out = BTreeMap::new();
    if t == 0 || t >= sample.annotations.len() {
        return out;
    }
    for cur in &sample.annotations[t] {
        if let Some(prev) = sample.annotations[t - 1].iter().find(|g| g.id == cur.id) {
            out.insert(
                cur.id,
                [cur.center[0] - prev.center[0], cur.center[1] - prev.center[1]],
            );
        }
    }
    out
}
