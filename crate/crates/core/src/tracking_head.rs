//! Movement field prediction, its L1 objective, and greedy association.
//!
//! The movement head sees the centerness-branch features of the current and
//! previous frame (concatenated) and predicts, per location, how far the
//! object's center point moved since the previous frame, in image pixels.
//! Association looks back along that displacement and links each detection to
//! the closest compatible tracklet within a box-sized radius.

use std::cmp::Ordering;
use std::str::FromStr;

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detection_head::{detection_order, Detection};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{concat_channels, join, Conv2d, ConvCache, Param, Parameterized, Real};

/// Tracklets unseen for more than this many frames are retired.
pub const DEFAULT_MAX_GAP: usize = 4;

/// Predicted displacement `(dx, dy)` per level, shape `(2, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MovementField {
    pub levels: Vec<Array3<f64>>,
}

impl MovementField {
    pub fn read(&self, level: usize, grid_index: (usize, usize)) -> [f64; 2] {
        let m = &self.levels[level];
        [m[[0, grid_index.0, grid_index.1]], m[[1, grid_index.0, grid_index.1]]]
    }

    /// Displacement at each detection's location.
    pub fn read_detections(&self, detections: &[Detection]) -> Vec<[f64; 2]> {
        detections.iter().map(|d| self.read(d.level, d.grid_index)).collect()
    }
}

/// One 1×1 convolution shared across levels, `2F → 2`.
#[derive(Debug, Clone)]
pub struct MovementHead<T> {
    pub conv: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct MovementCache<T> {
    convs: Vec<ConvCache<T>>,
    strides: Vec<usize>,
    channels: usize,
}

impl<T: Real> MovementHead<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::with_std(2 * channels, 2, 1, 1, 0.01, rng),
        }
    }

    /// Raw per-level fields in image pixels. `previous = None` stands for the
    /// zero map used at frame 0.
    pub fn forward(
        &self,
        current: &[Array3<T>],
        previous: Option<&[Array3<T>]>,
        strides: &[usize],
    ) -> Result<(Vec<Array3<T>>, MovementCache<T>)> {
        let mut out = Vec::with_capacity(current.len());
        let mut convs = Vec::with_capacity(current.len());
        for (lvl, cur) in current.iter().enumerate() {
            let prev = match previous {
                Some(p) => {
                    if p.len() != current.len() || p[lvl].dim() != cur.dim() {
                        return Err(Error::Shape(format!(
                            "previous-frame features {:?} do not match current {:?} at level {lvl}",
                            p.get(lvl).map(|a| a.dim()),
                            cur.dim()
                        )));
                    }
                    p[lvl].clone()
                }
                None => Array3::zeros(cur.dim()),
            };
            let x = concat_channels(&[cur, &prev]);
            let (mut y, cache) = self.conv.forward(&x);
            let s = T::of(strides[lvl] as f64);
            y.mapv_inplace(|v| v * s);
            out.push(y);
            convs.push(cache);
        }
        let channels = current.first().map_or(0, |c| c.dim().0);
        Ok((
            out,
            MovementCache {
                convs,
                strides: strides.to_vec(),
                channels,
            },
        ))
    }

    /// Takes field gradients (image-pixel units) and returns feature
    /// gradients for the current and previous frame per level.
    pub fn backward(&mut self, cache: &MovementCache<T>, grads: &[Array3<T>]) -> Vec<(Array3<T>, Array3<T>)> {
        let c = cache.channels;
        grads
            .iter()
            .zip(&cache.convs)
            .zip(&cache.strides)
            .map(|((g, conv_cache), &s)| {
                let g = g.mapv(|v| v * T::of(s as f64));
                let dx = self.conv.backward(conv_cache, &g, true).unwrap();
                let parts = crate::nn::split_channels(&dx, &[c, c]);
                let mut it = parts.into_iter();
                (it.next().unwrap(), it.next().unwrap())
            })
            .collect()
    }
}

impl<T: Real> Parameterized<T> for MovementHead<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
    }
}

/// Predicts the movement field between two frames' centerness-branch
/// features.
pub fn predict_movement<T: Real>(
    head: &MovementHead<T>,
    current: &[Array3<T>],
    previous: Option<&[Array3<T>]>,
    strides: &[usize],
) -> Result<MovementField> {
    let (levels, _) = head.forward(current, previous, strides)?;
    Ok(MovementField {
        levels: levels.into_iter().map(|l| l.mapv(|v| v.f64())).collect(),
    })
}

/// One supervised readout of the field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackReadout {
    pub predicted: [f64; 2],
    pub target: [f64; 2],
}

/// `(1/N) Σ |D − Δ|₁`, zero when nothing contributes. Returns the loss and
/// the gradient with respect to each readout's prediction.
pub fn track_loss(readouts: &[TrackReadout]) -> (f64, Vec<[f64; 2]>) {
    if readouts.is_empty() {
        return (0.0, Vec::new());
    }
    let n = readouts.len() as f64;
    let mut loss = 0.0;
    let grads = readouts
        .iter()
        .map(|r| {
            let mut g = [0.0; 2];
            for k in 0..2 {
                let e = r.predicted[k] - r.target[k];
                loss += e.abs();
                g[k] = if e > 0.0 {
                    1.0 / n
                } else if e < 0.0 {
                    -1.0 / n
                } else {
                    0.0
                };
            }
            g
        })
        .collect();
    (loss / n, grads)
}

/// Whose box sets the match radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RadiusSource {
    #[default]
    Detection,
    Tracklet,
}

impl FromStr for RadiusSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detection" => Ok(Self::Detection),
            "tracklet" => Ok(Self::Tracklet),
            other => Err(Error::Config(format!(
                "match radius source must be detection or tracklet, got {other:?}"
            ))),
        }
    }
}

/// Mean of box width and height.
pub fn match_radius(b: &BBox) -> f64 {
    (b.width() + b.height()) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracklet {
    pub id: usize,
    pub last_center: [f64; 2],
    pub last_box: BBox,
    pub last_seen: usize,
    pub class_id: usize,
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    pub max_gap: usize,
    pub radius_source: RadiusSource,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            max_gap: DEFAULT_MAX_GAP,
            radius_source: RadiusSource::Detection,
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Per-video association state.
#[derive(Debug, Clone, Default)]
pub struct Tracker {
    pub config: TrackerConfig,
    pub tracklets: Vec<Tracklet>,
    next_id: usize,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Self {
        Self {
            config,
            tracklets: Vec::new(),
            next_id: 0,
        }
    }

    /// Next id to be spawned.
    pub fn next_id(&self) -> usize {
        self.next_id
    }

    /// Assigns an id to every detection of `frame` (returned in input order)
    /// and retires stale tracklets.
    pub fn associate(&mut self, frame: usize, detections: &[Detection], displacements: &[[f64; 2]]) -> Result<Vec<usize>> {
        if detections.len() != displacements.len() {
            return Err(Error::Precondition(format!(
                "{} detections but {} displacements",
                detections.len(),
                displacements.len()
            )));
        }
        let max_gap = self.config.max_gap;
        self.tracklets.retain(|t| frame.saturating_sub(t.last_seen) <= max_gap);
        let mut order: Vec<usize> = (0..detections.len()).collect();
        order.sort_by(|&a, &b| detection_order(&detections[a], &detections[b]));

        // candidate pairs (tracklet, distance) per detection, nearest first
        let candidates: Vec<Vec<(usize, f64)>> = detections
            .iter()
            .zip(displacements)
            .map(|(d, disp)| {
                let query = [d.center[0] - disp[0], d.center[1] - disp[1]];
                let mut c: Vec<(usize, f64)> = self
                    .tracklets
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t.active && t.class_id == d.class_id)
                    .filter_map(|(k, t)| {
                        let r = match self.config.radius_source {
                            RadiusSource::Detection => match_radius(&d.bbox),
                            RadiusSource::Tracklet => match_radius(&t.last_box),
                        };
                        let e = dist(query, t.last_center);
                        (e <= r).then_some((k, e))
                    })
                    .collect();
                c.sort_by(|a, b| {
                    a.1.partial_cmp(&b.1)
                        .unwrap_or(Ordering::Equal)
                        .then(self.tracklets[a.0].id.cmp(&self.tracklets[b.0].id))
                });
                c
            })
            .collect();

        let mut taken = vec![false; self.tracklets.len()];
        let mut ids = vec![0; detections.len()];
        for &i in &order {
            let d = &detections[i];
            match candidates[i].iter().find(|(k, _)| !taken[*k]) {
                Some(&(k, _)) => {
                    taken[k] = true;
                    let t = &mut self.tracklets[k];
                    t.last_center = d.center;
                    t.last_box = d.bbox;
                    t.last_seen = frame;
                    ids[i] = t.id;
                }
                None => {
                    let id = self.next_id;
                    self.next_id += 1;
                    self.tracklets.push(Tracklet {
                        id,
                        last_center: d.center,
                        last_box: d.bbox,
                        last_seen: frame,
                        class_id: d.class_id,
                        active: true,
                    });
                    ids[i] = id;
                }
            }
        }
        self.tracklets.retain(|t| frame.saturating_sub(t.last_seen) <= max_gap);
        Ok(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det(class_id: usize, score: f64, center: [f64; 2], size: f64, grid: (usize, usize)) -> Detection {
        Detection {
            class_id,
            score,
            center,
            bbox: BBox::new(center[0] - size / 2.0, center[1] - size / 2.0, center[0] + size / 2.0, center[1] + size / 2.0),
            level: 0,
            grid_index: grid,
        }
    }

    #[test]
    fn track_loss_examples() {
        let r = |p: [f64; 2], t: [f64; 2]| TrackReadout { predicted: p, target: t };
        assert_eq!(track_loss(&[r([3.0, 4.0], [3.0, 4.0])]).0, 0.0);
        assert_eq!(track_loss(&[r([0.0, 0.0], [3.0, 4.0])]).0, 7.0);
        let (l, g) = track_loss(&[r([1.0, 0.0], [0.0, 0.0]), r([0.0, 0.0], [0.0, 2.0])]);
        assert_eq!(l, 1.5);
        assert_eq!(g, vec![[0.5, 0.0], [0.0, -0.5]]);
        assert_eq!(track_loss(&[]).0, 0.0);
    }

    #[test]
    fn movement_shapes_and_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = MovementHead::<f64>::new(4, &mut rng);
        let cur = vec![Array3::zeros((4, 16, 16)), Array3::zeros((4, 8, 8))];
        let f = predict_movement(&head, &cur, None, &[8, 16]).unwrap();
        assert_eq!(f.levels[0].dim(), (2, 16, 16));
        let bad = vec![Array3::zeros((4, 16, 16)), Array3::zeros((4, 4, 4))];
        assert!(matches!(predict_movement(&head, &cur, Some(&bad), &[8, 16]), Err(Error::Shape(_))));
    }

    #[test]
    fn movement_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = MovementHead::<f64>::new(3, &mut rng);
        head.conv = Conv2d::with_std(6, 2, 1, 1, 0.3, &mut rng);
        let cur = vec![Array3::from_shape_fn((3, 4, 4), |_| rng.random_range(-1.0..1.0))];
        let prev = vec![Array3::from_shape_fn((3, 4, 4), |_| rng.random_range(-1.0..1.0))];
        let probe = Array3::from_shape_fn((2, 4, 4), |_| rng.random_range(-1.0..1.0));
        let loss = |h: &MovementHead<f64>, c: &[Array3<f64>], p: &[Array3<f64>]| {
            (h.forward(c, Some(p), &[16]).unwrap().0[0].clone() * &probe).sum()
        };
        let (_, cache) = head.forward(&cur, Some(&prev), &[16]).unwrap();
        let g = head.backward(&cache, &[probe.clone()]);
        let h = 1e-6;
        for idx in [(0, 0, 0), (2, 3, 1)] {
            let mut cp = cur.clone();
            cp[0][idx] += h;
            let mut cm = cur.clone();
            cm[0][idx] -= h;
            let fd = (loss(&head, &cp, &prev) - loss(&head, &cm, &prev)) / (2.0 * h);
            assert!((fd - g[0].0[idx]).abs() < 1e-6);
            let mut pp = prev.clone();
            pp[0][idx] += h;
            let mut pm = prev.clone();
            pm[0][idx] -= h;
            let fd = (loss(&head, &cur, &pp) - loss(&head, &cur, &pm)) / (2.0 * h);
            assert!((fd - g[0].1[idx]).abs() < 1e-6);
        }
        let k = 7;
        let mut hp = head.clone();
        hp.conv.weight.value[k] += h;
        let mut hm = head.clone();
        hm.conv.weight.value[k] -= h;
        let fd = (loss(&hp, &cur, &prev) - loss(&hm, &cur, &prev)) / (2.0 * h);
        assert!((fd - head.conv.weight.grad[k]).abs() < 1e-6);
    }

    #[test]
    fn association_examples() {
        let mut tr = Tracker::new(TrackerConfig::default());
        let ids = tr.associate(0, &[det(0, 0.9, [10.0, 10.0], 20.0, (0, 0))], &[[0.0, 0.0]]).unwrap();
        assert_eq!(ids, vec![0]);
        let ids = tr.associate(1, &[det(0, 0.9, [13.0, 14.0], 20.0, (0, 0))], &[[3.0, 4.0]]).unwrap();
        assert_eq!(ids, vec![0]);

        // radius 20, tracklet at distance 21 from the query
        let mut tr = Tracker::new(TrackerConfig::default());
        tr.associate(0, &[det(0, 0.9, [10.0, 10.0], 20.0, (0, 0))], &[[0.0, 0.0]]).unwrap();
        let ids = tr.associate(1, &[det(0, 0.9, [31.0, 10.0], 20.0, (0, 0))], &[[0.0, 0.0]]).unwrap();
        assert_eq!(ids, vec![1]);
    }

    #[test]
    fn higher_score_wins_contention_and_class_gates() {
        let mut tr = Tracker::new(TrackerConfig::default());
        tr.associate(0, &[det(0, 0.9, [50.0, 50.0], 20.0, (0, 0))], &[[0.0, 0.0]]).unwrap();
        let dets = [det(0, 0.4, [51.0, 50.0], 20.0, (0, 1)), det(0, 0.8, [55.0, 50.0], 20.0, (0, 2))];
        let ids = tr.associate(1, &dets, &[[0.0, 0.0]; 2]).unwrap();
        assert_eq!(ids, vec![1, 0]);

        let mut tr = Tracker::new(TrackerConfig::default());
        tr.associate(0, &[det(0, 0.9, [50.0, 50.0], 20.0, (0, 0))], &[[0.0, 0.0]]).unwrap();
        let ids = tr.associate(1, &[det(1, 0.9, [50.0, 50.0], 20.0, (0, 0))], &[[0.0, 0.0]]).unwrap();
        assert_eq!(ids, vec![1]);
    }

    #[test]
    fn retirement_after_gap() {
        let mut tr = Tracker::new(TrackerConfig::default());
        tr.associate(0, &[det(0, 0.9, [50.0, 50.0], 20.0, (0, 0))], &[[0.0, 0.0]]).unwrap();
        for t in 1..=4 {
            tr.associate(t, &[], &[]).unwrap();
        }
        assert_eq!(tr.tracklets.len(), 1);
        let ids = tr.associate(5, &[det(0, 0.9, [50.0, 50.0], 20.0, (0, 0))], &[[0.0, 0.0]]).unwrap();
        assert_eq!(ids, vec![1]);
    }

    #[test]
    fn tracklet_radius_source() {
        let cfg = TrackerConfig {
            radius_source: RadiusSource::Tracklet,
            ..Default::default()
        };
        let mut tr = Tracker::new(cfg);
        tr.associate(0, &[det(0, 0.9, [50.0, 50.0], 40.0, (0, 0))], &[[0.0, 0.0]]).unwrap();
        // radius from the 40-pixel tracklet box, not the 4-pixel detection
        let ids = tr.associate(1, &[det(0, 0.9, [80.0, 50.0], 4.0, (0, 0))], &[[0.0, 0.0]]).unwrap();
        assert_eq!(ids, vec![0]);
    }
}
