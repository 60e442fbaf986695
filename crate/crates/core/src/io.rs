//! On-disk formats: RLE masks, datasets of PNG frames with annotations,
//! predictions and metrics JSON.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::mask::Mask;
use crate::model::VideoPrediction;
use crate::synthetic_video::{Frame, GeneratorConfig, GtInstance, VideoSample};
use crate::vis_eval::{Metrics, Track};

pub const SCHEMA_VERSION: u32 = 1;
pub const DATASET_FILE: &str = "dataset.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";

/// Uncompressed run-length mask: column-major runs, starting with zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

pub fn rle_encode(mask: &Mask) -> RleMask {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0usize;
    for c in 0..mask.width {
        for r in 0..mask.height {
            let v = mask.get(r, c);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    RleMask {
        size: [mask.height, mask.width],
        counts,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<Mask> {
    let [h, w] = rle.size;
    let total: usize = rle.counts.iter().sum();
    if total != h * w {
        return Err(Error::Format(format!(
            "RLE counts sum to {total}, expected {h} x {w} = {}",
            h * w
        )));
    }
    let mut mask = Mask::zeros(h, w);
    let mut pos = 0usize;
    let mut value = false;
    for &n in &rle.counts {
        if value {
            for k in pos..pos + n {
                mask.set(k % h, k / h, true);
            }
        }
        pos += n;
        value = !value;
    }
    Ok(mask)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn check_schema(path: &Path, version: u32) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported schema_version {version}",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotatedInstance {
    pub id: usize,
    pub class_id: usize,
    pub bbox: [f64; 4],
    pub center: [f64; 2],
    pub segmentation: RleMask,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub schema_version: u32,
    pub video_id: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub seed: u64,
    /// Frame file names, in order.
    pub frames: Vec<String>,
    pub instances: Vec<Vec<AnnotatedInstance>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub schema_version: u32,
    pub num_classes: usize,
    pub generator: GeneratorConfig,
    pub videos: Vec<String>,
}

pub fn video_dir_name(video_id: usize) -> String {
    format!("video_{video_id:03}")
}

/// Writes one directory per video with lossless PNG frames and
/// `annotations.json`, plus a top-level `dataset.json`.
pub fn write_dataset(dir: &Path, videos: &[VideoSample], generator: &GeneratorConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for (vid, v) in videos.iter().enumerate() {
        let name = video_dir_name(vid);
        let vdir = dir.join(&name);
        fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
        let mut frames = Vec::new();
        for (t, f) in v.frames.iter().enumerate() {
            let fname = format!("frame_{t:03}.png");
            write_png(&vdir.join(&fname), f)?;
            frames.push(fname);
        }
        let instances = v
            .annotations
            .iter()
            .map(|anns| {
                anns.iter()
                    .map(|g| AnnotatedInstance {
                        id: g.id,
                        class_id: g.class_id,
                        bbox: g.bbox.to_array(),
                        center: g.center,
                        segmentation: rle_encode(&g.mask),
                    })
                    .collect()
            })
            .collect();
        let ann = AnnotationFile {
            schema_version: SCHEMA_VERSION,
            video_id: vid,
            height: v.height(),
            width: v.width(),
            fps: v.fps,
            seed: v.seed,
            frames,
            instances,
        };
        write_json(&vdir.join(ANNOTATIONS_FILE), &ann)?;
        names.push(name);
    }
    write_json(
        &dir.join(DATASET_FILE),
        &DatasetFile {
            schema_version: SCHEMA_VERSION,
            num_classes: generator.num_classes,
            generator: generator.clone(),
            videos: names,
        },
    )
}

pub fn write_png(path: &Path, frame: &Frame) -> Result<()> {
    image::save_buffer(
        path,
        &frame.data,
        frame.width as u32,
        frame.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_png(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    Ok(Frame {
        height: img.height() as usize,
        width: img.width() as usize,
        data: img.into_raw(),
    })
}

/// Reads one video directory.
pub fn read_video(dir: &Path) -> Result<(usize, VideoSample)> {
    let apath = dir.join(ANNOTATIONS_FILE);
    let ann: AnnotationFile = read_json(&apath)?;
    check_schema(&apath, ann.schema_version)?;
    if ann.frames.len() != ann.instances.len() {
        return Err(Error::Format(format!(
            "{}: {} frames but {} instance lists",
            apath.display(),
            ann.frames.len(),
            ann.instances.len()
        )));
    }
    let mut frames = Vec::with_capacity(ann.frames.len());
    for name in &ann.frames {
        let f = read_png(&dir.join(name))?;
        if (f.height, f.width) != (ann.height, ann.width) {
            return Err(Error::Format(format!("{}: frame size mismatch", dir.join(name).display())));
        }
        frames.push(f);
    }
    let mut annotations = Vec::with_capacity(ann.instances.len());
    for list in &ann.instances {
        let mut out = Vec::with_capacity(list.len());
        for a in list {
            let mask = rle_decode(&a.segmentation).map_err(|e| Error::Format(format!("{}: {e}", apath.display())))?;
            let [x0, y0, x1, y1] = a.bbox;
            out.push(GtInstance {
                id: a.id,
                class_id: a.class_id,
                bbox: BBox::new(x0, y0, x1, y1),
                mask,
                center: a.center,
            });
        }
        annotations.push(out);
    }
    Ok((
        ann.video_id,
        VideoSample {
            frames,
            annotations,
            fps: ann.fps,
            seed: ann.seed,
        },
    ))
}

/// A dataset directory, or a single video directory.
pub fn read_dataset(dir: &Path) -> Result<Vec<(usize, VideoSample)>> {
    let dpath = dir.join(DATASET_FILE);
    if !dpath.exists() {
        if dir.join(ANNOTATIONS_FILE).exists() {
            return Ok(vec![read_video(dir)?]);
        }
        return Err(Error::io(
            &dpath,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no dataset.json or annotations.json"),
        ));
    }
    let ds: DatasetFile = read_json(&dpath)?;
    check_schema(&dpath, ds.schema_version)?;
    ds.videos.iter().map(|name| read_video(&dir.join(name))).collect()
}

/// Ground-truth tracks at full frame resolution.
pub fn gt_tracks(video_id: usize, video: &VideoSample) -> Vec<Track> {
    let mut tracks: BTreeMap<usize, Track> = BTreeMap::new();
    let n = video.len();
    for (t, anns) in video.annotations.iter().enumerate() {
        for g in anns {
            let tr = tracks.entry(g.id).or_insert_with(|| Track {
                video_id,
                instance_id: g.id,
                class_id: g.class_id,
                score: 1.0,
                masks: vec![None; n],
            });
            tr.masks[t] = Some(g.mask.clone());
        }
    }
    tracks.into_values().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub video_id: usize,
    pub instance_id: usize,
    pub class_id: usize,
    pub score: f64,
    /// Per-frame masks, normally at stride 2; any size is resized to the
    /// frame with nearest neighbour.
    pub segmentations: Vec<Option<RleMask>>,
    pub centers: Vec<Option<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionsFile {
    pub schema_version: u32,
    pub predictions: Vec<PredictionRecord>,
}

impl PredictionsFile {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("predictions serialize") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported schema_version {}", self.schema_version)));
        }
        for p in &self.predictions {
            let ctx = format!("video {} instance {}", p.video_id, p.instance_id);
            if !(0.0..=1.0).contains(&p.score) {
                return Err(Error::Format(format!("{ctx}: score {} outside [0, 1]", p.score)));
            }
            if p.segmentations.len() != p.centers.len() {
                return Err(Error::Format(format!("{ctx}: segmentations and centers differ in length")));
            }
            for s in p.segmentations.iter().flatten() {
                if s.counts.iter().sum::<usize>() != s.size[0] * s.size[1] {
                    return Err(Error::Format(format!("{ctx}: RLE counts do not match its size")));
                }
            }
        }
        Ok(())
    }

    /// Tracks with masks upsampled (nearest) to `frame_hw`.
    pub fn tracks(&self, frame_hw: &BTreeMap<usize, (usize, usize)>) -> Result<Vec<Track>> {
        self.predictions
            .iter()
            .map(|p| {
                let (h, w) = *frame_hw
                    .get(&p.video_id)
                    .ok_or_else(|| Error::Format(format!("prediction for unknown video {}", p.video_id)))?;
                let masks = p
                    .segmentations
                    .iter()
                    .map(|s| s.as_ref().map(|r| rle_decode(r).map(|m| m.resize_nearest(h, w))).transpose())
                    .collect::<Result<_>>()?;
                Ok(Track {
                    video_id: p.video_id,
                    instance_id: p.instance_id,
                    class_id: p.class_id,
                    score: p.score,
                    masks,
                })
            })
            .collect()
    }
}

pub fn read_predictions(path: &Path) -> Result<PredictionsFile> {
    let p: PredictionsFile = read_json(path)?;
    p.validate().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(p)
}

pub fn write_predictions(path: &Path, preds: &PredictionsFile) -> Result<()> {
    fs::write(path, preds.to_json()).map_err(|e| Error::io(path, e))
}

/// Groups per-frame tracked objects into prediction records; the score is
/// the mean detection score. Tracks without any non-empty mask are dropped.
pub fn prediction_records(video_id: usize, pred: &VideoPrediction) -> Vec<PredictionRecord> {
    let n = pred.frames.len();
    let mut by_id: BTreeMap<usize, (usize, Vec<f64>, Vec<Option<RleMask>>, Vec<Option<[f64; 2]>>, bool)> = BTreeMap::new();
    for (t, objs) in pred.frames.iter().enumerate() {
        for o in objs {
            let e = by_id
                .entry(o.id)
                .or_insert_with(|| (o.detection.class_id, Vec::new(), vec![None; n], vec![None; n], false));
            e.1.push(o.detection.score);
            e.3[t] = Some(o.detection.center);
            if let Some(m) = &o.mask {
                e.4 |= !m.is_empty();
                e.2[t] = Some(rle_encode(m));
            }
        }
    }
    by_id
        .into_iter()
        .filter(|(_, e)| e.4)
        .map(|(id, (class_id, scores, segs, centers, _))| PredictionRecord {
            video_id,
            instance_id: id,
            class_id,
            score: scores.iter().sum::<f64>() / scores.len() as f64,
            segmentations: segs,
            centers,
        })
        .collect()
}

/// Ground truth expressed as predictions (score 1, full-resolution masks).
pub fn gt_as_predictions(video_id: usize, video: &VideoSample) -> Vec<PredictionRecord> {
    gt_tracks(video_id, video)
        .into_iter()
        .map(|t| {
            let centers = (0..video.len())
                .map(|f| {
                    video.annotations[f]
                        .iter()
                        .find(|g| g.id == t.instance_id)
                        .map(|g| g.center)
                })
                .collect();
            PredictionRecord {
                video_id,
                instance_id: t.instance_id,
                class_id: t.class_id,
                score: 1.0,
                segmentations: t.masks.iter().map(|m| m.as_ref().map(rle_encode)).collect(),
                centers,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsFile {
    pub schema_version: u32,
    pub metrics: Metrics,
    pub num_predictions: usize,
    pub num_ground_truth: usize,
}

pub fn write_metrics(path: &Path, m: &MetricsFile) -> Result<()> {
    write_json(path, m)
}
