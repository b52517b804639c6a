//! Python bindings for the `tsr` detector: geometry helpers, the two networks,
//! the detection pipeline, synthetic data and evaluation.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tsr::data::{load_image, parse_manifest, synth_generate, Split, SynthConfig};
use tsr::dmsnet::Branch;
use tsr::eval::{evaluate, EvalConfig};
use tsr::geometry::{self, ScoredBox};
use tsr::pipeline::{self, PipelineConfig};

fn py_err(e: tsr::Error) -> PyErr {
    match e {
        tsr::Error::Io { .. } | tsr::Error::Image { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

type Quad = (f64, f64, f64, f64);
type Scored = (f64, f64, f64, f64, f64);

/// Axis-aligned box in pixel coordinates.
#[pyclass(frozen, skip_from_py_object, module = "tsr_py")]
#[derive(Clone, Copy)]
struct BBox {
    inner: geometry::BBox,
}

#[pymethods]
impl BBox {
    #[new]
    fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> PyResult<Self> {
        Ok(Self { inner: geometry::BBox::new(x_min, y_min, x_max, y_max).map_err(py_err)? })
    }

    #[getter]
    fn x_min(&self) -> f64 {
        self.inner.x_min
    }

    #[getter]
    fn y_min(&self) -> f64 {
        self.inner.y_min
    }

    #[getter]
    fn x_max(&self) -> f64 {
        self.inner.x_max
    }

    #[getter]
    fn y_max(&self) -> f64 {
        self.inner.y_max
    }

    fn area(&self) -> f64 {
        self.inner.area()
    }

    fn iou(&self, other: &BBox) -> f64 {
        geometry::iou(&self.inner, &other.inner)
    }

    fn as_tuple(&self) -> Quad {
        let b = self.inner;
        (b.x_min, b.y_min, b.x_max, b.y_max)
    }

    fn __repr__(&self) -> String {
        let b = self.inner;
        format!("BBox({}, {}, {}, {})", b.x_min, b.y_min, b.x_max, b.y_max)
    }
}

fn to_scored(boxes: &[Scored]) -> PyResult<Vec<ScoredBox>> {
    boxes
        .iter()
        .map(|&(a, b, c, d, s)| Ok(ScoredBox::new(geometry::BBox::new(a, b, c, d).map_err(py_err)?, s, None)))
        .collect()
}

fn from_scored(b: &ScoredBox) -> Scored {
    (b.bbox.x_min, b.bbox.y_min, b.bbox.x_max, b.bbox.y_max, b.score)
}

/// IoU of two `(x_min, y_min, x_max, y_max)` tuples.
#[pyfunction]
fn iou(a: Quad, b: Quad) -> PyResult<f64> {
    let a = geometry::BBox::new(a.0, a.1, a.2, a.3).map_err(py_err)?;
    let b = geometry::BBox::new(b.0, b.1, b.2, b.3).map_err(py_err)?;
    Ok(geometry::iou(&a, &b))
}

/// Greedy NMS over `(x_min, y_min, x_max, y_max, score)` tuples.
#[pyfunction]
#[pyo3(signature = (boxes, iou_threshold = 0.45))]
fn nms(boxes: Vec<Scored>, iou_threshold: f64) -> PyResult<Vec<Scored>> {
    Ok(geometry::nms(&to_scored(&boxes)?, iou_threshold).iter().map(from_scored).collect())
}

/// `(window, stride, offset)` of proposal head 1 or 2.
#[pyfunction]
fn rf_calc(branch: u8) -> PyResult<(usize, usize, i64)> {
    let branch = Branch::from_number(branch).map_err(py_err)?;
    let rf = tsr::dmsnet::DmsNet::build(0).map_err(py_err)?.rf(branch);
    Ok((rf.window, rf.stride, rf.offset))
}

/// All-point interpolated AP of `(score, is_true_positive)` pairs; `None` without ground truth.
#[pyfunction]
fn average_precision(scored: Vec<(f64, bool)>, n_ground_truth: usize) -> Option<f64> {
    tsr::eval::average_precision(&scored, n_ground_truth)
}

#[pyclass(frozen, module = "tsr_py")]
struct DmsNet {
    inner: tsr::dmsnet::DmsNet,
}

#[pymethods]
impl DmsNet {
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> PyResult<Self> {
        Ok(Self { inner: tsr::dmsnet::DmsNet::build(seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: tsr::dmsnet::DmsNet::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn parameter_count(&self) -> usize {
        self.inner.network().parameter_count()
    }

    /// Class-agnostic proposals for an image file, best first.
    #[pyo3(signature = (image_path, top_k = 128))]
    fn propose(&self, image_path: PathBuf, top_k: usize) -> PyResult<Vec<Scored>> {
        let image = load_image(&image_path).map_err(py_err)?;
        let cfg = PipelineConfig { proposal_top_k: top_k, ..PipelineConfig::default() };
        Ok(pipeline::propose(&self.inner, &image, &cfg).map_err(py_err)?.iter().map(from_scored).collect())
    }
}

#[pyclass(frozen, module = "tsr_py")]
struct FusionNet {
    inner: tsr::fusionnet::FusionNet,
}

#[pymethods]
impl FusionNet {
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> PyResult<Self> {
        Ok(Self { inner: tsr::fusionnet::FusionNet::build(seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: tsr::fusionnet::FusionNet::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn parameter_count(&self) -> usize {
        self.inner.network().parameter_count()
    }

    /// `(class_id, score)` per box, 0 meaning background; `None` for boxes outside the image.
    fn classify(&self, image_path: PathBuf, boxes: Vec<Quad>) -> PyResult<Vec<Option<(usize, f32)>>> {
        let image = load_image(&image_path).map_err(py_err)?;
        let boxes = boxes
            .iter()
            .map(|&(a, b, c, d)| geometry::BBox::new(a, b, c, d).map_err(py_err))
            .collect::<PyResult<Vec<_>>>()?;
        let out = tsr::fusionnet::classify_crops(&self.inner, &image, &boxes).map_err(py_err)?;
        Ok(out.into_iter().map(|c| c.ok().map(|c| (c.class_id, c.score))).collect())
    }
}

/// Full pipeline on one image file: `(class_id, score, x_min, y_min, x_max, y_max)` per detection.
#[pyfunction]
#[pyo3(signature = (dms, fusion, image_path, top_k = 128))]
fn detect(
    dms: &DmsNet,
    fusion: &FusionNet,
    image_path: PathBuf,
    top_k: usize,
) -> PyResult<Vec<(usize, f64, f64, f64, f64, f64)>> {
    let image = load_image(&image_path).map_err(py_err)?;
    let cfg = PipelineConfig { proposal_top_k: top_k, ..PipelineConfig::default() };
    let dets = pipeline::detect(&image, &dms.inner, &fusion.inner, &cfg).map_err(py_err)?;
    Ok(dets
        .iter()
        .map(|d| (d.class_id, d.score, d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max))
        .collect())
}

/// Renders `count` synthetic scenes into `out_dir`; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, count, seed = 0, width = 400, height = 300, size_range = (16, 200), test_split = false))]
fn synth_gen(
    out_dir: PathBuf,
    count: usize,
    seed: u64,
    width: usize,
    height: usize,
    size_range: (usize, usize),
    test_split: bool,
) -> PyResult<PathBuf> {
    let cfg = SynthConfig { seed, width, height, size_range, ..SynthConfig::default() };
    let split = if test_split { Split::Test } else { Split::Train };
    synth_generate(&cfg, count, &out_dir, split).map_err(py_err)?;
    Ok(out_dir.join("manifest.txt"))
}

/// Scores a detection file against a manifest on the full benchmark at IoU 0.5.
#[pyfunction]
fn evaluate_files<'py>(py: Python<'py>, detections_path: PathBuf, manifest_path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let manifest = parse_manifest(&manifest_path).map_err(py_err)?;
    let mut dets = pipeline::read_detections(&detections_path, &manifest.class_names).map_err(py_err)?;
    let ids: Vec<String> = manifest.entries.iter().map(|e| e.image_id()).collect();
    dets.retain(|k, _| ids.contains(k));
    let annotations: Vec<_> = manifest.annotations().cloned().collect();
    let report = evaluate(&dets, &annotations, &ids, &manifest.class_names, &EvalConfig::default());
    let per_class: BTreeMap<String, Option<f64>> = report.per_class.iter().map(|r| (r.name.clone(), r.ap)).collect();
    let out = PyDict::new(py);
    out.set_item("precision", report.precision)?;
    out.set_item("recall", report.recall)?;
    out.set_item("map", report.map)?;
    out.set_item("tp", report.tp)?;
    out.set_item("fp", report.fp)?;
    out.set_item("fn", report.fn_)?;
    out.set_item("ap", per_class)?;
    Ok(out)
}

#[pymodule]
fn tsr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<BBox>()?;
    m.add_class::<DmsNet>()?;
    m.add_class::<FusionNet>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(rf_calc, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(synth_gen, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_files, m)?)?;
    Ok(())
}
