//! Python bindings.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use sgnet::detection_head::{self, Detection};
use sgnet::geometry::{self, BBox};
use sgnet::io::{self as sio, RleMask};
use sgnet::mask::Mask;
use sgnet::mask_head::{self, DivisionRule};
use sgnet::synthetic_video::{self, GeneratorConfig};
use sgnet::tracking_head::{RadiusSource, TrackerConfig};
use sgnet::trainer;
use sgnet::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn bbox(b: [f64; 4]) -> BBox {
    BBox::new(b[0], b[1], b[2], b[3])
}

/// Generalized IoU of two `[x0, y0, x1, y1]` boxes.
#[pyfunction]
fn giou(a: [f64; 4], b: [f64; 4]) -> PyResult<f64> {
    geometry::giou(&bbox(a), &bbox(b)).map_err(py_err)
}

/// `-ln((1 + g) / 2)`.
#[pyfunction]
fn box_loss(g: f64) -> f64 {
    detection_head::box_loss(g)
}

#[pyfunction]
fn box_loss_grad(g: f64) -> f64 {
    detection_head::box_loss_grad(g)
}

#[pyfunction]
fn centerness_target(l: f64, t: f64, r: f64, b: f64) -> PyResult<f64> {
    detection_head::centerness_target(l, t, r, b).map_err(py_err)
}

/// Returns `(r1, r2, cells)` with cells as `[x0, y0, x1, y1]`, row-major.
#[pyfunction]
#[pyo3(signature = (bbox_xyxy, divisor = 50.0, cap = 6))]
fn divide_box(bbox_xyxy: [f64; 4], divisor: f64, cap: usize) -> PyResult<(usize, usize, Vec<[i64; 4]>)> {
    let g = mask_head::divide_box(&bbox(bbox_xyxy), DivisionRule { divisor, cap }).map_err(py_err)?;
    let cells = g.cells.iter().map(|c| [c.x0, c.y0, c.x1, c.y1]).collect();
    Ok((g.r1, g.r2, cells))
}

/// Column-major run lengths of a row-major `height × width` mask.
#[pyfunction]
fn rle_encode(height: usize, width: usize, data: Vec<bool>) -> PyResult<Vec<usize>> {
    if data.len() != height * width {
        return Err(PyValueError::new_err("mask data length must equal height * width"));
    }
    Ok(sio::rle_encode(&Mask::from_vec(height, width, data)).counts)
}

/// Row-major booleans of an RLE mask.
#[pyfunction]
fn rle_decode(height: usize, width: usize, counts: Vec<usize>) -> PyResult<Vec<bool>> {
    let m = sio::rle_decode(&RleMask {
        size: [height, width],
        counts,
    })
    .map_err(py_err)?;
    Ok(m.as_slice().to_vec())
}

/// One synthetic video as a dict with `frames` (RGB bytes, row-major),
/// `height`, `width` and per-frame `annotations`.
#[pyfunction]
#[pyo3(signature = (seed, frames = 8, height = 128, width = 128, shapes = 3, classes = 3))]
fn generate_video<'py>(
    py: Python<'py>,
    seed: u64,
    frames: usize,
    height: usize,
    width: usize,
    shapes: usize,
    classes: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = GeneratorConfig {
        frames,
        height,
        width,
        num_shapes: shapes,
        num_classes: classes,
        ..Default::default()
    };
    let v = synthetic_video::generate_video(seed, &cfg).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("height", height)?;
    out.set_item("width", width)?;
    let fr = PyList::empty(py);
    for f in &v.frames {
        fr.append(pyo3::types::PyBytes::new(py, &f.data))?;
    }
    out.set_item("frames", fr)?;
    let anns = PyList::empty(py);
    for list in &v.annotations {
        let l = PyList::empty(py);
        for g in list {
            let d = PyDict::new(py);
            d.set_item("id", g.id)?;
            d.set_item("class_id", g.class_id)?;
            d.set_item("bbox", g.bbox.to_array())?;
            d.set_item("center", g.center)?;
            d.set_item("area", g.mask.area())?;
            d.set_item("rle", sio::rle_encode(&g.mask).counts)?;
            l.append(d)?;
        }
        anns.append(l)?;
    }
    out.set_item("annotations", anns)?;
    Ok(out)
}

/// Greedy association state of one video.
#[pyclass]
struct Tracker {
    inner: sgnet::tracking_head::Tracker,
}

#[pymethods]
impl Tracker {
    #[new]
    #[pyo3(signature = (max_gap = 4, radius_source = "detection"))]
    fn new(max_gap: usize, radius_source: &str) -> PyResult<Self> {
        let radius_source: RadiusSource = radius_source.parse().map_err(py_err)?;
        Ok(Self {
            inner: sgnet::tracking_head::Tracker::new(TrackerConfig { max_gap, radius_source }),
        })
    }

    /// `detections`: `(class_id, score, [cx, cy], [x0, y0, x1, y1])` tuples;
    /// `displacements`: `[dx, dy]` per detection. Returns one id per detection.
    fn associate(
        &mut self,
        frame: usize,
        detections: Vec<(usize, f64, [f64; 2], [f64; 4])>,
        displacements: Vec<[f64; 2]>,
    ) -> PyResult<Vec<usize>> {
        let dets: Vec<Detection> = detections
            .into_iter()
            .enumerate()
            .map(|(k, (class_id, score, center, b))| Detection {
                class_id,
                score,
                center,
                bbox: bbox(b),
                level: 0,
                grid_index: (0, k),
            })
            .collect();
        self.inner.associate(frame, &dets, &displacements).map_err(py_err)
    }

    fn active_ids(&self) -> Vec<usize> {
        self.inner.tracklets.iter().map(|t| t.id).collect()
    }
}

/// A trained network loaded from a checkpoint directory.
#[pyclass]
struct Model {
    inner: trainer::Trainer<f32>,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: trainer::load_checkpoint(&checkpoint, None).map_err(py_err)?,
        })
    }

    /// Fresh, untrained model for frames of the given size.
    #[staticmethod]
    #[pyo3(signature = (height = 128, width = 128, seed = 0))]
    fn untrained(height: usize, width: usize, seed: u64) -> PyResult<Self> {
        let cfg = sgnet::config::Config {
            seed,
            ..Default::default()
        };
        Ok(Self {
            inner: trainer::Trainer::new(cfg, (height, width)).map_err(py_err)?,
        })
    }

    fn num_parameters(&mut self) -> usize {
        self.inner.model.num_parameters()
    }

    fn step(&self) -> usize {
        self.inner.step
    }

    /// Runs inference over a dataset directory; returns the predictions
    /// JSON text.
    fn infer(&self, data: PathBuf) -> PyResult<String> {
        let cfg = self.inner.config.infer_config();
        let mut predictions = Vec::new();
        for (vid, v) in sio::read_dataset(&data).map_err(py_err)? {
            let frames: Vec<_> = v.frames.iter().map(|f| f.to_chw::<f32>()).collect();
            let out = self.inner.model.infer_video(&frames, &cfg).map_err(py_err)?;
            predictions.extend(sio::prediction_records(vid, &out));
        }
        let file = sio::PredictionsFile {
            schema_version: sio::SCHEMA_VERSION,
            predictions,
        };
        Ok(file.to_json())
    }
}

/// Scores a predictions file against a dataset; returns the metrics dict.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, predictions: PathBuf, data: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let m = sgnet::cli::eval(&sgnet::cli::EvalArgs {
        predictions,
        data,
        out: None,
    })
    .map_err(py_err)?
    .metrics;
    let d = PyDict::new(py);
    d.set_item("AP", m.ap)?;
    d.set_item("AP50", m.ap50)?;
    d.set_item("AP75", m.ap75)?;
    d.set_item("AR1", m.ar1)?;
    d.set_item("AR10", m.ar10)?;
    Ok(d)
}

/// Runs the command-line interface with the given arguments.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    sgnet::cli::run_args(&refs)
}

#[pymodule]
fn sgnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(giou, m)?)?;
    m.add_function(wrap_pyfunction!(box_loss, m)?)?;
    m.add_function(wrap_pyfunction!(box_loss_grad, m)?)?;
    m.add_function(wrap_pyfunction!(centerness_target, m)?)?;
    m.add_function(wrap_pyfunction!(divide_box, m)?)?;
    m.add_function(wrap_pyfunction!(rle_encode, m)?)?;
    m.add_function(wrap_pyfunction!(rle_decode, m)?)?;
    m.add_function(wrap_pyfunction!(generate_video, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<Tracker>()?;
    m.add_class::<Model>()?;
    Ok(())
}
