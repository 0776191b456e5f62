//! Python bindings: synthesize datasets, build and inspect facial
//! spatiotemporal graphs, train and evaluate pulse estimators, and run
//! the gradient verification suite, all from Python.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use meshphys::gradsuite;
use meshphys::model::{load_checkpoint, CheckpointMeta, MeshPhys};
use meshphys::pipeline::{
    self, clip_pulse_rate, EvalProtocol, EvalReport, TrainConfig,
};
use meshphys::stgraph::RegionConfig;
use meshphys::synth::{canonical_face_topology, emit_dataset, DatasetPreset};
use meshphys::stgraph::build_adjacency;
use meshphys::stgraph::EdgeScheme;
use meshphys::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } | Error::Format { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Write a synthetic face-pulse dataset and return the manifest path.
/// Video `i` pulses at 66 + 12 i bpm. With `clean` set, motion, noise and
/// drift are disabled. `splits` optionally names the split of each video;
/// by default the last two of three or more videos become val and test.
#[pyfunction]
#[pyo3(signature = (dir, videos=4, clean=false, faces=200, fps=30.0, duration_s=60.0,
    image_size=64, amplitude=0.02, noise=None, yaw=None, seed=0, splits=None))]
#[allow(clippy::too_many_arguments)]
fn synth_dataset(
    dir: PathBuf,
    videos: usize,
    clean: bool,
    faces: usize,
    fps: f64,
    duration_s: f64,
    image_size: u32,
    amplitude: f64,
    noise: Option<f64>,
    yaw: Option<f64>,
    seed: u64,
    splits: Option<Vec<String>>,
) -> PyResult<String> {
    if videos == 0 {
        return Err(PyValueError::new_err("need at least one video"));
    }
    let preset = DatasetPreset {
        perturbed: !clean,
        faces,
        image_size,
        fps,
        duration_s,
        amplitude,
        noise_sigma: noise,
        yaw_deg: yaw,
        seed,
    };
    let scenarios: Vec<(String, _)> = (0..videos)
        .map(|i| (format!("video_{i:03}"), preset.scenario(i)))
        .collect();
    emit_dataset(&dir, &scenarios).map_err(to_py)?;

    let manifest_path = dir.join("manifest.toml");
    let mut manifest = meshphys::files::DatasetManifest::load(&manifest_path).map_err(to_py)?;
    if let Some(tags) = splits {
        if tags.len() != videos {
            return Err(PyValueError::new_err(format!(
                "{} split tags for {videos} videos",
                tags.len()
            )));
        }
        for (v, tag) in manifest.videos.iter_mut().zip(tags) {
            v.split = tag;
        }
    } else if videos >= 3 {
        manifest.videos[videos - 2].split = "val".into();
        manifest.videos[videos - 1].split = "test".into();
    }
    manifest.save(&manifest_path).map_err(to_py)?;
    Ok(manifest_path.display().to_string())
}

/// A dataset of facial spatiotemporal graphs loaded from a manifest.
#[pyclass]
struct Dataset {
    inner: pipeline::Dataset,
}

#[pymethods]
impl Dataset {
    /// Ingest every video under `manifest`, building or reusing cached
    /// graphs next to it.
    #[staticmethod]
    #[pyo3(signature = (manifest, region="mesh3d/face_average/shared_vertex", cache=true))]
    fn load(manifest: PathBuf, region: &str, cache: bool) -> PyResult<Self> {
        let region = RegionConfig::from_tag(region).map_err(to_py)?;
        let inner = pipeline::ingest(&manifest, &region, cache).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn fps(&self) -> f64 {
        self.inner.fps
    }

    #[getter]
    fn region(&self) -> String {
        self.inner.region.tag()
    }

    #[getter]
    fn nodes(&self) -> usize {
        self.inner.videos[0].spans[0].graph.nodes
    }

    fn video_names(&self) -> Vec<String> {
        self.inner.videos.iter().map(|v| v.name.clone()).collect()
    }

    fn splits(&self) -> Vec<String> {
        self.inner.splits().into_iter().map(str::to_string).collect()
    }

    #[pyo3(signature = (window, stride=None, split=None))]
    fn clip_count(&self, window: usize, stride: Option<usize>, split: Option<&str>) -> usize {
        self.inner
            .clips(window, stride.unwrap_or(window), split)
            .len()
    }

    /// Mean fraction of visible nodes over one video's frames.
    fn visibility(&self, video: usize) -> PyResult<f64> {
        let v = self
            .inner
            .videos
            .get(video)
            .ok_or_else(|| PyValueError::new_err(format!("no video {video}")))?;
        let frames: usize = v.spans.iter().map(|s| s.graph.frames).sum();
        if frames == 0 {
            return Ok(0.0);
        }
        let mut acc = 0.0;
        for s in &v.spans {
            acc += s.graph.visibility() * s.graph.frames as f64;
        }
        Ok(acc / frames as f64)
    }

    /// One node's color trace (channel 0 red, 1 green, 2 blue) from the
    /// first detection span of a video.
    fn node_series(&self, video: usize, channel: usize, node: usize) -> PyResult<Vec<f64>> {
        let v = self
            .inner
            .videos
            .get(video)
            .ok_or_else(|| PyValueError::new_err(format!("no video {video}")))?;
        let g = &v.spans[0].graph;
        if channel >= 3 || node >= g.nodes {
            return Err(PyValueError::new_err(format!(
                "channel {channel} / node {node} out of range"
            )));
        }
        Ok(g.node_series(channel, node).iter().map(|&x| x as f64).collect())
    }

    /// The per-frame reference pulse waveform of a video.
    fn reference(&self, video: usize) -> PyResult<Vec<f64>> {
        self.inner
            .videos
            .get(video)
            .map(|v| v.reference.clone())
            .ok_or_else(|| PyValueError::new_err(format!("no video {video}")))
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({} videos, {} nodes, {:.1} fps, region {})",
            self.inner.videos.len(),
            self.nodes(),
            self.inner.fps,
            self.inner.region.tag()
        )
    }
}

/// A trained pulse estimator restored from a checkpoint.
#[pyclass]
struct Model {
    inner: MeshPhys<f32>,
    meta: CheckpointMeta,
    path: PathBuf,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, meta) = load_checkpoint::<f32>(&path).map_err(to_py)?;
        Ok(Self { inner, meta, path })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn input_nodes(&self) -> usize {
        self.inner.input_nodes()
    }

    #[getter]
    fn region(&self) -> String {
        self.inner.region_tag.clone()
    }

    /// Checkpoint metadata entries (epoch, validation loss, seed, ...).
    fn meta<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new_bound(py);
        for (k, v) in self.meta.entries.iter() {
            d.set_item(k, v)?;
        }
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model({} params, {} input nodes, {})",
            self.inner.param_count(),
            self.inner.input_nodes(),
            self.path.display()
        )
    }
}

fn config_from_args(
    config: Option<PathBuf>,
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    window: Option<usize>,
    lr: Option<f64>,
    region: Option<&str>,
) -> PyResult<TrainConfig> {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(&p).map_err(to_py)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = seed {
        cfg.seed = v;
    }
    if let Some(v) = epochs {
        cfg.epochs = v;
    }
    if let Some(v) = batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = window {
        cfg.window = v;
        cfg.stride = v;
    }
    if let Some(v) = lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = region {
        cfg.graph.region = v.to_string();
    }
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Train on a dataset and write the best-validation checkpoint. Returns a
/// summary dict with the loss history.
#[pyfunction]
#[pyo3(signature = (dataset, out, config=None, seed=None, epochs=None, batch_size=None,
    window=None, lr=None))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    out: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    window: Option<usize>,
    lr: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let region_tag = dataset.inner.region.tag();
    let cfg = config_from_args(
        config,
        seed,
        epochs,
        batch_size,
        window,
        lr,
        Some(&region_tag),
    )?;
    let report = pipeline::train_model(&cfg, &dataset.inner, &out).map_err(to_py)?;
    let d = PyDict::new_bound(py);
    d.set_item("epochs", report.epochs)?;
    d.set_item("best_epoch", report.best_epoch)?;
    d.set_item("best_val_loss", report.best_val_loss)?;
    d.set_item("train_loss", report.train_loss)?;
    d.set_item("val_loss", report.val_loss)?;
    d.set_item("train_clips", report.clip_counts.0)?;
    d.set_item("val_clips", report.clip_counts.1)?;
    d.set_item("checkpoint", report.checkpoint.display().to_string())?;
    Ok(d)
}

fn report_to_dict<'py>(py: Python<'py>, report: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    let clips = PyList::empty_bound(py);
    for c in &report.clips {
        let row = PyDict::new_bound(py);
        row.set_item("video", &c.video)?;
        row.set_item("start", c.start)?;
        row.set_item("est_bpm", c.est_bpm)?;
        row.set_item("ref_bpm", c.ref_bpm)?;
        clips.append(row)?;
    }
    let videos = PyList::empty_bound(py);
    for v in &report.videos {
        let row = PyDict::new_bound(py);
        row.set_item("video", &v.video)?;
        row.set_item("clip_count", v.clip_count)?;
        row.set_item("est_bpm", v.est_bpm)?;
        row.set_item("ref_bpm", v.ref_bpm)?;
        videos.append(row)?;
    }
    d.set_item("clips", clips)?;
    d.set_item("videos", videos)?;
    for (key, m) in [
        ("clip_metrics", &report.clip_metrics),
        ("video_metrics", &report.video_metrics),
    ] {
        let row = PyDict::new_bound(py);
        row.set_item("mae", m.mae)?;
        row.set_item("rmse", m.rmse)?;
        row.set_item("pearson", m.pearson)?;
        d.set_item(key, row)?;
    }
    Ok(d)
}

/// Estimate pulse rates for every clip of the chosen split and score them
/// against the reference.
#[pyfunction]
#[pyo3(signature = (model, dataset, split=None, window=None, band=(0.5, 3.0)))]
fn evaluate<'py>(
    py: Python<'py>,
    model: &Model,
    dataset: &Dataset,
    split: Option<&str>,
    window: Option<usize>,
    band: (f64, f64),
) -> PyResult<Bound<'py, PyDict>> {
    let window = window.unwrap_or_else(|| {
        model
            .meta
            .get("window")
            .and_then(|w| w.parse().ok())
            .unwrap_or(256)
    });
    let protocol = EvalProtocol {
        window,
        stride: window,
        band_lo_hz: band.0,
        band_hi_hz: band.1,
    };
    let report =
        pipeline::evaluate(&model.inner, &dataset.inner, split, &protocol).map_err(to_py)?;
    report_to_dict(py, &report)
}

/// Dominant in-band frequency of a waveform, in beats per minute.
#[pyfunction]
#[pyo3(signature = (series, fs, lo=0.5, hi=3.0))]
fn pulse_rate(series: Vec<f64>, fs: f64, lo: f64, hi: f64) -> PyResult<f64> {
    clip_pulse_rate(&series, fs, lo, hi).map_err(to_py)
}

/// Finite-difference verification of every autodiff operation and of the
/// composed network-plus-objective graph. Returns per-check worst
/// relative errors plus the overall worst and tolerance.
#[pyfunction]
#[pyo3(signature = (seeds=20))]
fn gradcheck(py: Python<'_>, seeds: usize) -> PyResult<Bound<'_, PyDict>> {
    let (outcomes, worst) = gradsuite::run_all(seeds).map_err(to_py)?;
    let d = PyDict::new_bound(py);
    let checks = PyDict::new_bound(py);
    for o in &outcomes {
        checks.set_item(&o.name, o.max_rel_error)?;
    }
    d.set_item("checks", checks)?;
    d.set_item("worst", worst)?;
    d.set_item("tolerance", gradsuite::SUITE_TOLERANCE)?;
    d.set_item("passed", worst < gradsuite::SUITE_TOLERANCE)?;
    Ok(d)
}

/// Face and edge statistics of the built-in canonical face topology.
#[pyfunction]
fn topology_stats(py: Python<'_>) -> PyResult<Bound<'_, PyDict>> {
    let topo = canonical_face_topology();
    let sv = build_adjacency(&topo, EdgeScheme::SharedVertex).map_err(to_py)?;
    let se = build_adjacency(&topo, EdgeScheme::SharedEdge).map_err(to_py)?;
    let d = PyDict::new_bound(py);
    d.set_item("faces", topo.face_count())?;
    d.set_item("vertices", topo.vertex_count())?;
    d.set_item("shared_vertex_avg_edges", sv.avg_degree())?;
    d.set_item("shared_edge_avg_edges", se.avg_degree())?;
    Ok(d)
}

#[pymodule]
fn meshphys_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(pulse_rate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(topology_stats, m)?)?;
    Ok(())
}
