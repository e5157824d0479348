//! Python bindings: images, masks, encoders, episode segmentation,
//! region segmentation, mIoU and the pipeline stages.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use spfl_core::eval::compute_miou;
use spfl_core::image::{Image, Mask};
use spfl_core::model::{Checkpoint, EncoderModel};
use spfl_core::pipeline::{run_pipeline, stage_gen_data, Layout, PipelineConfig};
use spfl_core::region::{segment_regions, SegConfig};
use spfl_core::spfl::compute_mask_prototypes;
use spfl_core::srofb::{rough_segment, segment_episode, Episode, RefineConfig, SegMode};
use spfl_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Dimension(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<SegMode> {
    match mode {
        "matching" => Ok(SegMode::Matching),
        "srofb" | "srofb_support_only" => Ok(SegMode::SrofbSupportOnly),
        "srofb-self" | "srofb_self_refined" => Ok(SegMode::SrofbSelfRefined),
        other => Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
    }
}

/// An RGB image with channels in [0, 1].
#[pyclass(name = "Image", from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: Image,
}

#[pymethods]
impl PyImage {
    /// Builds an image from rows of `[r, g, b]` triples.
    #[new]
    fn new(rows: Vec<Vec<[f32; 3]>>) -> PyResult<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != w) {
            return Err(PyValueError::new_err("ragged rows"));
        }
        let pixels = rows.into_iter().flatten().flatten().collect();
        Ok(PyImage {
            inner: Image::new(h, w, pixels).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn read_ppm(path: PathBuf) -> PyResult<Self> {
        Ok(PyImage {
            inner: Image::read_ppm(path).map_err(py_err)?,
        })
    }

    fn write_ppm(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_ppm(path).map_err(py_err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    fn pixel(&self, y: usize, x: usize) -> PyResult<[f32; 3]> {
        if y >= self.inner.height || x >= self.inner.width {
            return Err(PyValueError::new_err("pixel out of range"));
        }
        Ok(self.inner.get(y, x))
    }
}

/// A binary mask.
#[pyclass(name = "Mask", from_py_object)]
#[derive(Clone)]
struct PyMask {
    inner: Mask,
}

#[pymethods]
impl PyMask {
    /// Builds a mask from rows of booleans or 0/1 integers.
    #[new]
    fn new(rows: Vec<Vec<u8>>) -> PyResult<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != w) {
            return Err(PyValueError::new_err("ragged rows"));
        }
        let data = rows.into_iter().flatten().map(|v| (v != 0) as u8).collect();
        Ok(PyMask {
            inner: Mask::new(h, w, data).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn read_pgm(path: PathBuf) -> PyResult<Self> {
        Ok(PyMask {
            inner: Mask::read_pgm(path).map_err(py_err)?,
        })
    }

    fn write_pgm(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_pgm(path).map_err(py_err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    fn count(&self) -> usize {
        self.inner.count()
    }

    fn iou(&self, other: &PyMask) -> Option<f64> {
        self.inner.iou(&other.inner)
    }

    fn to_list(&self) -> Vec<Vec<u8>> {
        self.inner.data.chunks(self.inner.width.max(1)).map(|r| r.to_vec()).collect()
    }
}

/// A frozen feature encoder.
#[pyclass(name = "Encoder")]
struct PyEncoder {
    inner: EncoderModel,
}

#[pymethods]
impl PyEncoder {
    /// Freshly initialized small encoder.
    #[staticmethod]
    fn tiny(seed: u64) -> Self {
        PyEncoder {
            inner: EncoderModel::tiny(seed),
        }
    }

    /// The encoder stored in a checkpoint directory.
    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        Ok(PyEncoder {
            inner: Checkpoint::load(checkpoint).map_err(py_err)?.encoder,
        })
    }

    /// Features of one image as `(channels, height, width, flat values)`.
    fn encode(&self, image: &PyImage) -> PyResult<(usize, usize, usize, Vec<f32>)> {
        let f = self.inner.encode_image(&image.inner).map_err(py_err)?;
        let s = f.shape().to_vec();
        Ok((s[0], s[1], s[2], f.data().to_vec()))
    }

    /// Per-cell (background, foreground) matching scores of `query`
    /// against the prototypes pooled from `support` under `mask`.
    #[pyo3(signature = (support, mask, query, temperature = 0.2))]
    fn matching_scores(&self, support: &PyImage, mask: &PyMask, query: &PyImage, temperature: f32) -> PyResult<Vec<[f32; 2]>> {
        let fs = self.inner.encode_image(&support.inner).map_err(py_err)?;
        let fq = self.inner.encode_image(&query.inner).map_err(py_err)?;
        let p = compute_mask_prototypes(&fs, &mask.inner).map_err(py_err)?;
        let c = rough_segment(&fq, &p, temperature).map_err(py_err)?;
        let (bg, fg) = c.data().split_at(c.data().len() / 2);
        Ok(bg.iter().zip(fg).map(|(&b, &f)| [b, f]).collect())
    }

    /// Segments the query of one episode.
    #[pyo3(signature = (supports, masks, query, mode = "srofb-self", tau_fg = None, tau_bg = None, iterations = None, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn segment(
        &self,
        supports: Vec<PyImage>,
        masks: Vec<PyMask>,
        query: &PyImage,
        mode: &str,
        tau_fg: Option<f32>,
        tau_bg: Option<f32>,
        iterations: Option<usize>,
        seed: u64,
    ) -> PyResult<(PyMask, String)> {
        let mut cfg = RefineConfig {
            seed,
            ..PipelineConfig::default().refine
        };
        if let Some(t) = tau_fg {
            cfg.tau_fg = t;
        }
        if let Some(t) = tau_bg {
            cfg.tau_bg = t;
        }
        if let Some(n) = iterations {
            cfg.iterations_1shot = n;
            cfg.iterations_kshot = n;
        }
        let ep = Episode {
            class_id: 0,
            supports: supports.into_iter().map(|s| s.inner).collect(),
            support_masks: masks.into_iter().map(|m| m.inner).collect(),
            query: query.inner.clone(),
            query_mask: None,
        };
        let out = segment_episode(&ep, &self.inner, &cfg, parse_mode(mode)?).map_err(py_err)?;
        Ok((PyMask { inner: out.mask }, out.used.name().to_string()))
    }
}

/// Region labels (row-major) and region count of a graph-based
/// over-segmentation.
#[pyfunction]
#[pyo3(signature = (image, scale_k = None, min_region_size = None))]
fn over_segment(image: &PyImage, scale_k: Option<f32>, min_region_size: Option<usize>) -> PyResult<(Vec<u32>, usize)> {
    let mut cfg = SegConfig::default();
    if let Some(k) = scale_k {
        cfg.scale_k = k;
    }
    if let Some(m) = min_region_size {
        cfg.min_region_size = m;
    }
    let map = segment_regions(&image.inner, &cfg).map_err(py_err)?;
    Ok((map.labels.clone(), map.num_regions))
}

/// Count-sum mean IoU over aligned prediction/ground-truth pairs.
#[pyfunction]
fn mean_iou(predictions: Vec<PyMask>, ground_truths: Vec<PyMask>, class_ids: Vec<u32>) -> PyResult<f64> {
    let p: Vec<Mask> = predictions.into_iter().map(|m| m.inner).collect();
    let g: Vec<Mask> = ground_truths.into_iter().map(|m| m.inner).collect();
    Ok(compute_miou(&p, &g, &class_ids).map_err(py_err)?.miou)
}

fn pipeline_config(config_json: Option<&str>, seed: Option<u64>) -> PyResult<PipelineConfig> {
    let mut cfg = match config_json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    Ok(cfg)
}

/// The default pipeline configuration as JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string_pretty(&PipelineConfig::default()).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Renders the synthetic dataset under `out_dir/data`.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json = None, seed = None))]
fn generate_dataset(py: Python<'_>, out_dir: PathBuf, config_json: Option<&str>, seed: Option<u64>) -> PyResult<()> {
    let cfg = pipeline_config(config_json, seed)?;
    cfg.dataset.validate().map_err(py_err)?;
    py.detach(|| stage_gen_data(&cfg, &Layout::new(out_dir))).map_err(py_err)
}

/// Runs every stage and returns the ablation table as text.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json = None, seed = None))]
fn run_all(py: Python<'_>, out_dir: PathBuf, config_json: Option<&str>, seed: Option<u64>) -> PyResult<String> {
    let cfg = pipeline_config(config_json, seed)?;
    let (report, _) = py.detach(|| run_pipeline(&cfg, &Layout::new(out_dir))).map_err(py_err)?;
    Ok(report.to_text())
}

#[pymodule]
fn spfl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyEncoder>()?;
    m.add_function(wrap_pyfunction!(over_segment, m)?)?;
    m.add_function(wrap_pyfunction!(mean_iou, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_all, m)?)?;
    Ok(())
}
