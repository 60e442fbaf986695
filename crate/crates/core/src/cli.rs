//! Command-line entry points.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::io::{
    gt_tracks, prediction_records, read_dataset, read_predictions, rle_decode, write_dataset, write_metrics,
    write_png, write_predictions, MetricsFile, PredictionsFile, SCHEMA_VERSION,
};
use crate::synthetic_video::{generate_video, Frame, GeneratorConfig, VideoSample};
use crate::trainer::{load_checkpoint, Trainer};
use crate::vis_eval::evaluate;

#[derive(Debug, Parser)]
#[command(name = "sgnet", version, about = "One-stage video instance segmentation on synthetic clips")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic video dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Run detection, segmentation and tracking over videos.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Render predicted masks over the frames.
    Overlay(OverlayArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub videos: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    /// Shapes per video.
    #[arg(long, default_value_t = 3)]
    pub shapes: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML generator settings; command-line sizes override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and the loss log.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured step count.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory or a single video directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Inference keys (thresholds, tracking) override the checkpoint's.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Metrics JSON path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Only this video.
    #[arg(long)]
    pub video: Option<usize>,
}

/// Parses `argv` and runs the command; returns the process exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Infer(a) => infer(&a),
        Command::Eval(a) => eval(&a).map(|_| ()),
        Command::Overlay(a) => overlay(&a),
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut g = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
        }
        None => GeneratorConfig::default(),
    };
    g.frames = a.frames;
    g.height = a.height;
    g.width = a.width;
    g.num_shapes = a.shapes;
    g.num_classes = a.classes;
    g.validate()?;
    let videos = (0..a.videos)
        .map(|v| generate_video(a.seed.wrapping_mul(1_000_003).wrapping_add(v as u64), &g))
        .collect::<Result<Vec<_>>>()?;
    write_dataset(&a.out, &videos, &g)?;
    info!("wrote {} videos to {}", videos.len(), a.out.display());
    Ok(())
}

fn frame_size(videos: &[(usize, VideoSample)]) -> Result<(usize, usize)> {
    let (_, v) = videos
        .first()
        .ok_or_else(|| Error::Precondition("dataset has no videos".into()))?;
    let hw = (v.height(), v.width());
    if videos.iter().any(|(_, v)| (v.height(), v.width()) != hw) {
        return Err(Error::Precondition("videos differ in frame size".into()));
    }
    Ok(hw)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let videos = read_dataset(&a.data)?;
    let hw = frame_size(&videos)?;
    let mut cfg = match &a.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let mut trainer = match &a.resume {
        Some(dir) => load_checkpoint::<f32>(dir, Some(cfg))?,
        None => Trainer::<f32>::new(cfg, hw)?,
    };
    let samples: Vec<VideoSample> = videos.into_iter().map(|(_, v)| v).collect();
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let cpath = a.out.join("config.toml");
    fs::write(&cpath, trainer.config.to_toml_string()).map_err(|e| Error::io(&cpath, e))?;
    trainer.fit(&samples, Some(&a.out), |e| {
        if e.step % 50 == 0 {
            info!(
                "step {} lr {:.5} all {:.4} (cls {:.4} cent {:.4} box {:.4} mask {:.4} track {:.4})",
                e.step, e.lr, e.losses.all, e.losses.cls, e.losses.cent, e.losses.bbox, e.losses.mask, e.losses.track
            );
        }
    })?;
    info!("final checkpoint in {}", a.out.join("final").display());
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let trainer = load_checkpoint::<f32>(&a.checkpoint, None)?;
    let mut icfg = trainer.config.clone();
    if let Some(p) = &a.config {
        let o = Config::load(p)?;
        icfg.score_threshold = o.score_threshold;
        icfg.nms_iou = o.nms_iou;
        icfg.top_k = o.top_k;
        icfg.max_gap = o.max_gap;
        icfg.match_radius_source = o.match_radius_source;
    }
    let infer_cfg = icfg.infer_config();
    let videos = read_dataset(&a.data)?;
    let mut predictions = Vec::new();
    let mut skipped = 0;
    for (vid, v) in &videos {
        let frames: Vec<_> = v.frames.iter().map(|f| f.to_chw::<f32>()).collect();
        let out = trainer.model.infer_video(&frames, &infer_cfg)?;
        skipped += out.skipped_masks;
        predictions.extend(prediction_records(*vid, &out));
    }
    if skipped > 0 {
        log::warn!("{skipped} detections had no mask location and were left without a mask");
    }
    let file = PredictionsFile {
        schema_version: SCHEMA_VERSION,
        predictions,
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_predictions(&a.out, &file)?;
    info!("wrote {} tracks to {}", file.predictions.len(), a.out.display());
    Ok(())
}

/// Scores a predictions file against a dataset and prints the table.
pub fn eval(a: &EvalArgs) -> Result<MetricsFile> {
    let preds = read_predictions(&a.predictions)?;
    let videos = read_dataset(&a.data)?;
    let hw: BTreeMap<usize, (usize, usize)> = videos.iter().map(|(id, v)| (*id, (v.height(), v.width()))).collect();
    let pred_tracks = preds.tracks(&hw)?;
    let gt: Vec<_> = videos.iter().flat_map(|(id, v)| gt_tracks(*id, v)).collect();
    let metrics = evaluate(&pred_tracks, &gt);
    print!("{}", metrics.table());
    let file = MetricsFile {
        schema_version: SCHEMA_VERSION,
        metrics,
        num_predictions: pred_tracks.len(),
        num_ground_truth: gt.len(),
    };
    if let Some(out) = &a.out {
        write_metrics(out, &file)?;
    }
    Ok(file)
}

/// Distinct, stable colour per track id.
pub fn id_color(id: usize) -> [u8; 3] {
    // golden-angle hue walk
    let h = (id as f64 * 137.507_764) % 360.0;
    let (s, v) = (0.85, 0.95);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r, g, b].map(|u| ((u + m) * 255.0).round() as u8)
}

/// Blends track masks over a frame; where masks overlap, the
/// highest-scoring track owns the pixel.
pub fn composite(frame: &Frame, layers: &[(f64, usize, crate::mask::Mask)]) -> Frame {
    let mut order: Vec<&(f64, usize, crate::mask::Mask)> = layers.iter().collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out = frame.clone();
    let mut painted = vec![false; frame.height * frame.width];
    for (_, id, mask) in order {
        let col = id_color(*id);
        for r in 0..frame.height {
            for c in 0..frame.width {
                let k = r * frame.width + c;
                if painted[k] || !mask.get(r, c) {
                    continue;
                }
                painted[k] = true;
                for ch in 0..3 {
                    let v = out.data[3 * k + ch] as u16;
                    out.data[3 * k + ch] = ((v + col[ch] as u16) / 2) as u8;
                }
            }
        }
    }
    out
}

pub fn overlay(a: &OverlayArgs) -> Result<()> {
    let preds = read_predictions(&a.predictions)?;
    let videos = read_dataset(&a.data)?;
    for (vid, v) in videos.iter().filter(|(id, _)| a.video.is_none_or(|want| want == *id)) {
        let dir = a.out.join(crate::io::video_dir_name(*vid));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let records: Vec<_> = preds.predictions.iter().filter(|p| p.video_id == *vid).collect();
        for (t, frame) in v.frames.iter().enumerate() {
            let mut layers = Vec::new();
            for p in &records {
                if let Some(Some(rle)) = p.segmentations.get(t) {
                    let m = rle_decode(rle)?.resize_nearest(frame.height, frame.width);
                    layers.push((p.score, p.instance_id, m));
                }
            }
            write_png(&dir.join(format!("overlay_{t:03}.png")), &composite(frame, &layers))?;
        }
    }
    Ok(())
}

/// Convenience for tests and scripts: `argv` without the program name.
pub fn run_args(args: &[&str]) -> i32 {
    run(std::iter::once("sgnet").chain(args.iter().copied()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Mask;

    #[test]
    fn unknown_command_and_flag_fail() {
        assert_eq!(run_args(&["frobnicate"]), 2);
        assert_eq!(run_args(&["eval", "--bogus", "x"]), 2);
    }

    #[test]
    fn missing_file_names_path() {
        let e = eval(&EvalArgs {
            predictions: PathBuf::from("/nonexistent/preds.json"),
            data: PathBuf::from("/nonexistent"),
            out: None,
        })
        .unwrap_err();
        assert!(e.to_string().contains("/nonexistent/preds.json"));
    }

    #[test]
    fn higher_score_owns_overlap() {
        let frame = Frame {
            height: 2,
            width: 2,
            data: vec![0; 12],
        };
        let all = Mask::from_fn(2, 2, |_, _| true);
        let out = composite(&frame, &[(0.2, 1, all.clone()), (0.9, 2, all)]);
        let c = id_color(2);
        assert_eq!(&out.data[0..3], &c.map(|v| v / 2));
    }

    #[test]
    fn colors_differ() {
        assert_ne!(id_color(0), id_color(1));
        assert_ne!(id_color(1), id_color(2));
    }
}
