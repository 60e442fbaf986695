//! Momentum SGD over video clips, with checkpoints and a CSV loss log.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{LossRecord, LossSelection, SgNet};
use crate::nn::{Parameterized, Real};
use crate::synthetic_video::{GtInstance, VideoSample};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const LOSS_LOG_FILE: &str = "losses.csv";

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, Default)]
pub struct MomentumSgd<T> {
    pub momentum: f64,
    pub velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Real> MomentumSgd<T> {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut impl Parameterized<T>, lr: f64) {
        let mu = T::of(self.momentum);
        let lr = T::of(lr);
        let velocity = &mut self.velocity;
        model.visit_params("", &mut |name, p| {
            let v = velocity.entry(name.to_string()).or_insert_with(|| vec![T::zero(); p.len()]);
            for ((w, g), vi) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vi = mu * *vi + *g;
                *w = *w - lr * *vi;
            }
        });
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm<T: Real>(model: &mut impl Parameterized<T>) -> f64 {
    let mut sq = 0.0;
    model.visit_params("", &mut |_, p| sq += p.grad.iter().map(|g| g.f64() * g.f64()).sum::<f64>());
    sq.sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(model: &mut impl Parameterized<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(model);
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        model.visit_params("", &mut |_, p| p.grad.iter_mut().for_each(|g| *g = *g * s));
    }
    norm
}

/// Learning rate after `epoch` completed epochs.
pub fn learning_rate(cfg: &Config, epoch: usize) -> f64 {
    cfg.lr * cfg.lr_decay.powi(epoch as i32)
}

fn check_finite(rec: &LossRecord, step: usize) -> Result<()> {
    for (term, v) in LossRecord::TERMS.iter().zip(rec.values()) {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term, step });
        }
    }
    Ok(())
}

/// One training clip.
#[derive(Debug, Clone)]
pub struct Clip<T> {
    pub frames: Vec<Array3<T>>,
    pub annotations: Vec<Vec<GtInstance>>,
}

impl<T: Real> Clip<T> {
    pub fn from_video(video: &VideoSample, start: usize, len: usize) -> Self {
        let end = (start + len).min(video.len());
        Self {
            frames: video.frames[start..end].iter().map(|f| f.to_chw()).collect(),
            annotations: video.annotations[start..end].to_vec(),
        }
    }
}

/// Model, optimizer and step counter.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: Config,
    pub model: SgNet<T>,
    pub optimizer: MomentumSgd<T>,
    /// Number of completed steps.
    pub step: usize,
    pub image_hw: (usize, usize),
}

impl<T: Real> Trainer<T> {
    pub fn new(config: Config, image_hw: (usize, usize)) -> Result<Self> {
        config.validate()?;
        let model = SgNet::new(config.model_config(image_hw.1), config.seed);
        Ok(Self {
            optimizer: MomentumSgd::new(config.momentum),
            model,
            config,
            step: 0,
            image_hw,
        })
    }

    /// One optimizer update on a clip at the given learning rate.
    pub fn train_step(&mut self, clip: &Clip<T>, lr: f64) -> Result<LossRecord> {
        let selection = LossSelection {
            weights: self.config.loss_weights(),
            track: self.step >= self.config.track_warmup_steps,
        };
        self.model.zero_grad();
        let rec = self.model.clip_loss_and_grad(&clip.frames, &clip.annotations, selection)?;
        check_finite(&rec, self.step)?;
        clip_grad_norm(&mut self.model, self.config.grad_clip);
        self.optimizer.step(&mut self.model, lr);
        self.step += 1;
        Ok(rec)
    }

    /// Video index and clip start for a global step.
    pub fn schedule(&self, num_videos: usize, video_len: usize, step: usize) -> (usize, usize, usize) {
        let epoch = step / num_videos;
        let pos = step % num_videos;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ epoch as u64);
        let mut order: Vec<usize> = (0..num_videos).collect();
        order.shuffle(&mut rng);
        let span = video_len.saturating_sub(self.config.clip_length);
        let starts: Vec<usize> = (0..num_videos).map(|_| rng.random_range(0..=span)).collect();
        (epoch, order[pos], starts[pos])
    }

    /// Trains until `config.steps` steps are complete. With `out_dir`, writes
    /// the loss log and checkpoints there.
    pub fn fit(&mut self, videos: &[VideoSample], out_dir: Option<&Path>, mut on_step: impl FnMut(&StepLog)) -> Result<()> {
        if videos.is_empty() {
            return Err(Error::Precondition("training set is empty".into()));
        }
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                Some(LossLog::open(&dir.join(LOSS_LOG_FILE), self.step > 0)?)
            }
            None => None,
        };
        let video_len = videos.iter().map(|v| v.len()).min().unwrap_or(0);
        while self.step < self.config.steps {
            let (epoch, vid, start) = self.schedule(videos.len(), video_len, self.step);
            let lr = learning_rate(&self.config, epoch);
            let clip = Clip::from_video(&videos[vid], start, self.config.clip_length);
            let step = self.step;
            let losses = self.train_step(&clip, lr)?;
            let entry = StepLog {
                step,
                epoch,
                lr,
                losses,
            };
            if let Some(log) = log.as_mut() {
                log.write(&entry)?;
            }
            on_step(&entry);
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step % every == 0 && self.step < self.config.steps {
                    save_checkpoint(self, &dir.join(format!("step_{:06}", self.step)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            save_checkpoint(self, &dir.join("final"))?;
        }
        Ok(())
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossRecord,
}

#[derive(Serialize)]
struct LogRow {
    step: usize,
    epoch: usize,
    lr: f64,
    cls: f64,
    cent: f64,
    #[serde(rename = "box")]
    bbox: f64,
    mask: f64,
    track: f64,
    all: f64,
}

struct LossLog {
    writer: csv::Writer<File>,
    path: PathBuf,
}

impl LossLog {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let exists = append && path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(exists)
            .write(true)
            .truncate(!exists)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let writer = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
        Ok(Self {
            writer,
            path: path.to_path_buf(),
        })
    }

    fn write(&mut self, e: &StepLog) -> Result<()> {
        let l = e.losses;
        let row = LogRow {
            step: e.step,
            epoch: e.epoch,
            lr: e.lr,
            cls: l.cls,
            cent: l.cent,
            bbox: l.bbox,
            mask: l.mask,
            track: l.track,
            all: l.all,
        };
        self.writer
            .serialize(row)
            .and_then(|_| self.writer.flush().map_err(csv::Error::from))
            .map_err(|e| Error::Format(format!("{}: {e}", self.path.display())))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: String,
    len: usize,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    step: usize,
    image_height: usize,
    image_width: usize,
    dtype: String,
    config: Config,
    tensors: Vec<TensorEntry>,
}

/// Writes `manifest.json` and little-endian f64 `tensors.bin` holding the
/// parameters and momentum buffers.
pub fn save_checkpoint<T: Real>(trainer: &mut Trainer<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    let mut bytes: Vec<u8> = Vec::new();
    let mut push = |name: &str, kind: &str, values: &[T], bytes: &mut Vec<u8>| {
        entries.push(TensorEntry {
            name: name.to_string(),
            kind: kind.to_string(),
            len: values.len(),
            offset: bytes.len() / 8,
        });
        for v in values {
            bytes.extend_from_slice(&v.f64().to_le_bytes());
        }
    };
    for (name, values) in trainer.model.named_values() {
        push(&name, "param", &values, &mut bytes);
    }
    for (name, values) in &trainer.optimizer.velocity {
        push(name, "velocity", values, &mut bytes);
    }
    let manifest = Manifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        step: trainer.step,
        image_height: trainer.image_hw.0,
        image_width: trainer.image_hw.1,
        dtype: std::any::type_name::<T>().to_string(),
        config: trainer.config.clone(),
        tensors: entries,
    };
    let tpath = dir.join(TENSORS_FILE);
    let mut f = BufWriter::new(File::create(&tpath).map_err(|e| Error::io(&tpath, e))?);
    f.write_all(&bytes).and_then(|_| f.flush()).map_err(|e| Error::io(&tpath, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: mpath.clone(),
        source: e,
    })?;
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

/// Restores a trainer; `config` overrides the stored one when given (the
/// model shape keys must agree).
pub fn load_checkpoint<T: Real>(dir: &Path, config: Option<Config>) -> Result<Trainer<T>> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: mpath.clone(),
        source: e,
    })?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported schema_version {}",
            mpath.display(),
            manifest.schema_version
        )));
    }
    let tpath = dir.join(TENSORS_FILE);
    let mut raw = Vec::new();
    File::open(&tpath)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(&tpath, e))?;
    let read = |e: &TensorEntry| -> Result<Vec<T>> {
        let start = e.offset * 8;
        let end = start + e.len * 8;
        if end > raw.len() {
            return Err(Error::Format(format!("{}: tensor {} out of range", tpath.display(), e.name)));
        }
        Ok(raw[start..end]
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    };

    let config = config.unwrap_or(manifest.config);
    let mut trainer = Trainer::<T>::new(config, (manifest.image_height, manifest.image_width))?;
    trainer.step = manifest.step;
    let mut params: BTreeMap<&str, Vec<T>> = BTreeMap::new();
    for e in manifest.tensors.iter() {
        match e.kind.as_str() {
            "param" => {
                params.insert(&e.name, read(e)?);
            }
            "velocity" => {
                trainer.optimizer.velocity.insert(e.name.clone(), read(e)?);
            }
            other => return Err(Error::Format(format!("{}: unknown tensor kind {other}", mpath.display()))),
        }
    }
    let mut missing = Vec::new();
    trainer.model.visit_params("", &mut |name, p| match params.remove(name) {
        Some(v) if v.len() == p.len() => p.value = v,
        _ => missing.push(name.to_string()),
    });
    if !missing.is_empty() || !params.is_empty() {
        return Err(Error::Format(format!(
            "{}: parameters do not match the configured model (missing {:?}, unexpected {:?})",
            mpath.display(),
            missing,
            params.keys().collect::<Vec<_>>()
        )));
    }
    Ok(trainer)
}
