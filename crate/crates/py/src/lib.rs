//! Python bindings: geometry, loss, metrics, kNN voting, synthetic data and
//! inference with trained artifacts. Matrices cross the boundary as nested
//! lists of floats.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use dbag::geometry::{self, RegionSpec};
use dbag::ingest::LandmarkFrame;
use dbag::inference::{self, InferenceConfig};
use dbag::net::Checkpoint as CoreCheckpoint;
use dbag::trainer::ReferenceSet as CoreReference;
use dbag::{eval, net, synthetic, Error, Label};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::MissingArtifact(_) | Error::MissingCache { .. } => PyFileNotFoundError::new_err(e.to_string()),
        Error::Io(_) | Error::DivergenceDetected { .. } | Error::BackendFailed { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn label(s: &str) -> PyResult<Label> {
    match s {
        "real" => Ok(Label::Real),
        "fake" => Ok(Label::Fake),
        other => Err(PyValueError::new_err(format!("label must be \"real\" or \"fake\", got {other:?}"))),
    }
}

fn labels(v: &[String]) -> PyResult<Vec<Label>> {
    v.iter().map(|s| label(s)).collect()
}

fn matrix(rows: Vec<Vec<f32>>) -> PyResult<Array2<f32>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(m: &Array2<f32>) -> Vec<Vec<f32>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn region(toml: Option<&str>) -> PyResult<RegionSpec> {
    match toml {
        Some(t) => RegionSpec::from_toml(t).map_err(py_err),
        None => Ok(RegionSpec::default()),
    }
}

/// The 36 inter-region distances of one 478-point landmark frame.
#[pyfunction]
#[pyo3(signature = (landmarks, region_toml=None))]
fn geometric_features(landmarks: Vec<[f32; 3]>, region_toml: Option<&str>) -> PyResult<Vec<f32>> {
    let lm = LandmarkFrame::new(landmarks).map_err(py_err)?;
    let g = geometry::geometric_features_frame(&lm, &region(region_toml)?).map_err(py_err)?;
    Ok(g.to_vec())
}

#[pyfunction]
#[pyo3(signature = (anchor, positive, negative, margin=1.0))]
fn triplet_loss(anchor: Vec<f64>, positive: Vec<f64>, negative: Vec<f64>, margin: f64) -> PyResult<f64> {
    net::triplet_loss(&anchor, &positive, &negative, margin).map_err(py_err)
}

/// AUC in percent; labels are "real" or "fake", fake being positive.
#[pyfunction]
fn auc(scores: Vec<f64>, labels_: Vec<String>) -> PyResult<f64> {
    eval::auc(&scores, &labels(&labels_)?).map_err(py_err)
}

#[pyfunction]
fn eer(scores: Vec<f64>, labels_: Vec<String>) -> PyResult<f64> {
    eval::eer(&scores, &labels(&labels_)?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (scores, labels_, threshold=0.5))]
fn accuracy(scores: Vec<f64>, labels_: Vec<String>, threshold: f64) -> PyResult<f64> {
    eval::accuracy(&scores, &labels(&labels_)?, threshold).map_err(py_err)
}

/// Train and test frame ranges of an `n`-frame video under the segment split.
#[pyfunction]
fn segment_ranges(n: usize) -> ((usize, usize), (usize, usize)) {
    let (a, b) = eval::segment_ranges(n);
    ((a.start, a.end), (b.start, b.end))
}

/// Nearest-neighbor vote: returns (label, fake_score, neighbor rows).
#[pyfunction]
fn knn_predict(
    query: Vec<f32>,
    reference: Vec<Vec<f32>>,
    reference_labels: Vec<String>,
    m: usize,
) -> PyResult<(String, f64, Vec<usize>)> {
    let n = reference.len();
    let set = CoreReference {
        embeddings: matrix(reference)?,
        labels: labels(&reference_labels)?,
        video_ids: vec![String::new(); n],
        start_frames: vec![0; n],
        checkpoint_hash: String::new(),
        manifest_hash: String::new(),
    };
    let v = inference::knn_predict(&query, &set, m).map_err(py_err)?;
    Ok((v.label.to_string(), v.fake_score, v.neighbors))
}

/// Seeded synthetic frame features: list of (video_id, label, frames).
#[pyfunction]
#[pyo3(signature = (n_videos=4, frames=240, seed=0))]
fn synthetic_videos(n_videos: usize, frames: usize, seed: u64) -> PyResult<Vec<(String, String, Vec<Vec<f32>>)>> {
    let cfg = synthetic::SyntheticConfig {
        n_videos,
        frames,
        seed,
        ..synthetic::SyntheticConfig::default()
    };
    Ok(synthetic::generate(&cfg)
        .map_err(py_err)?
        .into_iter()
        .map(|v| (v.video_id.clone(), v.label.to_string(), rows(&v.features)))
        .collect())
}

/// A trained network with its standardization statistics.
#[pyclass]
struct Checkpoint {
    inner: CoreCheckpoint,
    hash: String,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = CoreCheckpoint::load(&path).map_err(py_err)?;
        let hash = dbag::artifact::hash_file(&path).map_err(py_err)?;
        Ok(Self { inner, hash })
    }

    #[getter]
    fn sha256(&self) -> String {
        self.hash.clone()
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.inner.net.embedding_dim()
    }

    /// Embed raw slices (each `window x 600`), standardizing them first.
    fn embed(&self, slices: Vec<Vec<Vec<f32>>>) -> PyResult<Vec<Vec<f32>>> {
        let slices = slices
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(dbag::descriptor::DbagSlice {
                    matrix: matrix(s)?,
                    start_frame: 0,
                    video_id: format!("slice{i}"),
                    label: None,
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        let e = inference::embed_test(&self.inner, &slices, None).map_err(py_err)?;
        Ok(rows(&e))
    }

    /// Score one video's raw frame features: (label, fake_score, n_slices).
    #[pyo3(signature = (reference, features, m_neighbors=5, threshold=0.5))]
    fn predict_video(
        &self,
        reference: &ReferenceSet,
        features: Vec<Vec<f32>>,
        m_neighbors: usize,
        threshold: f64,
    ) -> PyResult<(String, f64, usize)> {
        if reference.inner.checkpoint_hash != self.hash {
            return Err(PyValueError::new_err("reference set was built with a different checkpoint"));
        }
        let cfg = InferenceConfig { m_neighbors, threshold };
        let f = matrix(features)?;
        let (v, _) =
            inference::predict_video(&self.inner, &reference.inner, "video", f.view(), &cfg).map_err(py_err)?;
        Ok((v.label.to_string(), v.fake_score, v.n_slices))
    }
}

#[pyclass]
struct ReferenceSet {
    inner: CoreReference,
}

#[pymethods]
impl ReferenceSet {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreReference::load(&path).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels.iter().map(|l| l.to_string()).collect()
    }

    #[getter]
    fn embeddings(&self) -> Vec<Vec<f32>> {
        rows(&self.inner.embeddings)
    }
}

#[pymodule]
fn dbag_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FRAME_DIM", dbag::descriptor::FRAME_DIM)?;
    m.add_function(wrap_pyfunction!(geometric_features, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(eer, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(segment_ranges, m)?)?;
    m.add_function(wrap_pyfunction!(knn_predict, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_videos, m)?)?;
    m.add_class::<Checkpoint>()?;
    m.add_class::<ReferenceSet>()?;
    Ok(())
}
