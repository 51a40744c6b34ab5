//! Adapters for the pretrained models the pipeline consumes: a face
//! detector, a 478-point landmark model, a 52-coefficient blendshape model
//! and a 512-dim face-recognition model.
//!
//! Each adapter declares a name and version which are stamped into every
//! cache produced with it. Built-in adapters cover testing and pre-cropped
//! inputs; [`ExternalCommand`] plugs in any model runnable as a process.

use std::path::PathBuf;
use std::process::Command;
use std::sync::{Arc, Mutex};

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use super::{FaceBox, LandmarkFrame, LANDMARK_COUNT};
use crate::descriptor::{BEHAVIORAL_DIM, IDENTITY_DIM};
use crate::{Error, Result};

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn version(&self) -> &str;
    /// Whether the adapter tolerates concurrent calls. Adapters returning
    /// `false` are serialized by the registry.
    fn concurrent(&self) -> bool {
        true
    }
}

pub trait FaceDetector: Backend {
    fn detect(&self, frame: &DynamicImage) -> Result<Vec<FaceBox>>;
}

pub trait LandmarkExtractor: Backend {
    /// 478 (x, y, z) points in normalized crop coordinates.
    fn landmarks(&self, crop: &DynamicImage) -> Result<Vec<[f32; 3]>>;
}

pub trait BehavioralExtractor: Backend {
    /// 52 blendshape activations for one crop, given its landmarks.
    fn blendshapes(&self, crop: &DynamicImage, landmarks: &LandmarkFrame) -> Result<Vec<f32>>;
}

pub trait IdentityExtractor: Backend {
    /// Raw (unnormalized) identity embedding for one crop.
    fn embed(&self, crop: &DynamicImage) -> Result<Vec<f32>>;
}

/// A registered adapter plus the lock used when it declares single-caller.
pub struct Slot<T: ?Sized> {
    inner: Arc<T>,
    lock: Option<Mutex<()>>,
}

impl<T: ?Sized + Backend> Slot<T> {
    pub fn new(inner: Arc<T>) -> Self {
        let lock = (!inner.concurrent()).then(|| Mutex::new(()));
        Self { inner, lock }
    }

    pub fn call<R>(&self, f: impl FnOnce(&T) -> R) -> R {
        let _guard = self.lock.as_ref().map(|m| m.lock().unwrap_or_else(|p| p.into_inner()));
        f(&self.inner)
    }

    pub fn info(&self) -> BackendInfo {
        BackendInfo {
            name: self.inner.name().to_string(),
            version: self.inner.version().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub name: String,
    pub version: String,
}

/// Name/version of every adapter that contributed to a cache.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendVersions {
    pub face_detector: Option<BackendInfo>,
    pub landmark_extractor: Option<BackendInfo>,
    pub behavioral_extractor: Option<BackendInfo>,
    pub identity_extractor: Option<BackendInfo>,
}

#[derive(Default)]
pub struct BackendRegistry {
    pub face_detector: Option<Slot<dyn FaceDetector>>,
    pub landmark_extractor: Option<Slot<dyn LandmarkExtractor>>,
    pub behavioral_extractor: Option<Slot<dyn BehavioralExtractor>>,
    pub identity_extractor: Option<Slot<dyn IdentityExtractor>>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_face_detector(mut self, b: Arc<dyn FaceDetector>) -> Self {
        self.face_detector = Some(Slot::new(b));
        self
    }

    pub fn with_landmark_extractor(mut self, b: Arc<dyn LandmarkExtractor>) -> Self {
        self.landmark_extractor = Some(Slot::new(b));
        self
    }

    pub fn with_behavioral_extractor(mut self, b: Arc<dyn BehavioralExtractor>) -> Self {
        self.behavioral_extractor = Some(Slot::new(b));
        self
    }

    pub fn with_identity_extractor(mut self, b: Arc<dyn IdentityExtractor>) -> Self {
        self.identity_extractor = Some(Slot::new(b));
        self
    }

    /// Deterministic built-in adapters: whole-frame detection, a fixed
    /// landmark grid, neutral blendshapes and a thumbnail identity vector.
    /// Useful for pre-cropped inputs and for exercising the pipeline.
    pub fn builtin() -> Self {
        Self::new()
            .with_face_detector(Arc::new(WholeFrameDetector))
            .with_landmark_extractor(Arc::new(GridLandmarks))
            .with_behavioral_extractor(Arc::new(NeutralBlendshapes))
            .with_identity_extractor(Arc::new(ThumbnailIdentity))
    }

    pub fn detector(&self) -> Result<&Slot<dyn FaceDetector>> {
        self.face_detector.as_ref().ok_or(Error::BackendUnavailable("face detector"))
    }

    pub fn landmarks(&self) -> Result<&Slot<dyn LandmarkExtractor>> {
        self.landmark_extractor
            .as_ref()
            .ok_or(Error::BackendUnavailable("landmark extractor"))
    }

    pub fn behavioral(&self) -> Result<&Slot<dyn BehavioralExtractor>> {
        self.behavioral_extractor
            .as_ref()
            .ok_or(Error::BackendUnavailable("behavioral extractor"))
    }

    pub fn identity(&self) -> Result<&Slot<dyn IdentityExtractor>> {
        self.identity_extractor
            .as_ref()
            .ok_or(Error::BackendUnavailable("identity extractor"))
    }

    pub fn versions(&self) -> BackendVersions {
        BackendVersions {
            face_detector: self.face_detector.as_ref().map(Slot::info),
            landmark_extractor: self.landmark_extractor.as_ref().map(Slot::info),
            behavioral_extractor: self.behavioral_extractor.as_ref().map(Slot::info),
            identity_extractor: self.identity_extractor.as_ref().map(Slot::info),
        }
    }
}

/// Reports the entire frame as a single face. For inputs that are already
/// face crops.
pub struct WholeFrameDetector;

impl Backend for WholeFrameDetector {
    fn name(&self) -> &str {
        "whole-frame"
    }
    fn version(&self) -> &str {
        "1"
    }
}

impl FaceDetector for WholeFrameDetector {
    fn detect(&self, frame: &DynamicImage) -> Result<Vec<FaceBox>> {
        Ok(vec![FaceBox::new(0.0, 0.0, frame.width() as f32, frame.height() as f32, 1.0)])
    }
}

/// Returns the same candidate list for every frame.
pub struct FixedBoxDetector {
    pub boxes: Vec<FaceBox>,
}

impl Backend for FixedBoxDetector {
    fn name(&self) -> &str {
        "fixed-boxes"
    }
    fn version(&self) -> &str {
        "1"
    }
}

impl FaceDetector for FixedBoxDetector {
    fn detect(&self, _frame: &DynamicImage) -> Result<Vec<FaceBox>> {
        Ok(self.boxes.clone())
    }
}

/// A fixed 478-point grid, identical for every crop.
pub struct GridLandmarks;

impl GridLandmarks {
    pub fn grid() -> Vec<[f32; 3]> {
        (0..LANDMARK_COUNT)
            .map(|i| {
                let row = (i / 22) as f32;
                let col = (i % 22) as f32;
                [col / 21.0, row / 21.0, ((i % 7) as f32 - 3.0) * 0.01]
            })
            .collect()
    }
}

impl Backend for GridLandmarks {
    fn name(&self) -> &str {
        "grid-landmarks"
    }
    fn version(&self) -> &str {
        "1"
    }
}

impl LandmarkExtractor for GridLandmarks {
    fn landmarks(&self, _crop: &DynamicImage) -> Result<Vec<[f32; 3]>> {
        Ok(Self::grid())
    }
}

/// All-zero blendshapes (a neutral face).
pub struct NeutralBlendshapes;

impl Backend for NeutralBlendshapes {
    fn name(&self) -> &str {
        "neutral-blendshapes"
    }
    fn version(&self) -> &str {
        "1"
    }
}

impl BehavioralExtractor for NeutralBlendshapes {
    fn blendshapes(&self, _crop: &DynamicImage, _landmarks: &LandmarkFrame) -> Result<Vec<f32>> {
        Ok(vec![0.0; BEHAVIORAL_DIM])
    }
}

/// Grayscale 16×32 thumbnail of the crop, mean-centered, as a 512-vector.
/// Deterministic and content-dependent, but carries no learned identity.
pub struct ThumbnailIdentity;

impl Backend for ThumbnailIdentity {
    fn name(&self) -> &str {
        "thumbnail-identity"
    }
    fn version(&self) -> &str {
        "1"
    }
}

impl IdentityExtractor for ThumbnailIdentity {
    fn embed(&self, crop: &DynamicImage) -> Result<Vec<f32>> {
        let thumb = crop
            .resize_exact(32, 16, image::imageops::FilterType::Triangle)
            .to_luma32f();
        let values: Vec<f32> = thumb.pixels().map(|p| p.0[0]).collect();
        debug_assert_eq!(values.len(), IDENTITY_DIM);
        let mean = values.iter().sum::<f32>() / values.len() as f32;
        let mut out: Vec<f32> = values.iter().map(|v| v - mean).collect();
        if out.iter().all(|v| *v == 0.0) {
            // flat crop: fall back to a constant direction so normalization is defined
            out.iter_mut().for_each(|v| *v = 1.0);
        }
        Ok(out)
    }
}

/// Runs an external program per image. The crop (or frame) is written to a
/// temporary PNG whose path is appended as the last argument; the program
/// prints a JSON array on stdout.
///
/// * detector: `[[x, y, width, height, confidence], ...]`
/// * landmarks: 478 `[x, y, z]` triples (nested or flat)
/// * blendshapes / identity: a flat array of numbers
///
/// For blendshapes the landmark triples are passed as a JSON file path in the
/// `DBAG_LANDMARKS` environment variable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalCommand {
    pub name: String,
    pub version: String,
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
    /// Set when the program cannot be run concurrently with itself.
    #[serde(default)]
    pub single_caller: bool,
}

impl ExternalCommand {
    fn run(&self, image: &DynamicImage, env: Option<(&str, &std::path::Path)>) -> Result<serde_json::Value> {
        let fail = |reason: String| Error::BackendFailed {
            backend: self.name.clone(),
            reason,
        };
        let tmp = tempfile::Builder::new()
            .suffix(".png")
            .tempfile()
            .map_err(|e| fail(e.to_string()))?;
        image
            .save_with_format(tmp.path(), image::ImageFormat::Png)
            .map_err(|e| fail(e.to_string()))?;
        let mut cmd = Command::new(&self.program);
        cmd.args(&self.args).arg(tmp.path());
        if let Some((key, path)) = env {
            cmd.env(key, path);
        }
        let out = cmd.output().map_err(|e| fail(format!("spawn {}: {e}", self.program.display())))?;
        if !out.status.success() {
            return Err(fail(format!(
                "exit status {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        serde_json::from_slice(&out.stdout).map_err(|e| fail(format!("unparseable output: {e}")))
    }

    fn numbers(&self, value: &serde_json::Value) -> Result<Vec<f32>> {
        let mut out = Vec::new();
        flatten_numbers(value, &mut out).ok_or_else(|| Error::BackendFailed {
            backend: self.name.clone(),
            reason: "output is not a numeric array".into(),
        })?;
        Ok(out)
    }
}

fn flatten_numbers(value: &serde_json::Value, out: &mut Vec<f32>) -> Option<()> {
    match value {
        serde_json::Value::Number(n) => out.push(n.as_f64()? as f32),
        serde_json::Value::Array(items) => {
            for item in items {
                flatten_numbers(item, out)?;
            }
        }
        _ => return None,
    }
    Some(())
}

impl Backend for ExternalCommand {
    fn name(&self) -> &str {
        &self.name
    }
    fn version(&self) -> &str {
        &self.version
    }
    fn concurrent(&self) -> bool {
        !self.single_caller
    }
}

impl FaceDetector for ExternalCommand {
    fn detect(&self, frame: &DynamicImage) -> Result<Vec<FaceBox>> {
        let value = self.run(frame, None)?;
        let rows = value.as_array().ok_or_else(|| Error::BackendFailed {
            backend: self.name.clone(),
            reason: "detector output must be an array of boxes".into(),
        })?;
        rows.iter()
            .map(|row| {
                let v = self.numbers(row)?;
                match v.as_slice() {
                    [x, y, w, h, c] => Ok(FaceBox::new(*x, *y, *w, *h, *c)),
                    [x, y, w, h] => Ok(FaceBox::new(*x, *y, *w, *h, 1.0)),
                    _ => Err(Error::BackendFailed {
                        backend: self.name.clone(),
                        reason: format!("box needs 4 or 5 numbers, got {}", v.len()),
                    }),
                }
            })
            .collect()
    }
}

impl LandmarkExtractor for ExternalCommand {
    fn landmarks(&self, crop: &DynamicImage) -> Result<Vec<[f32; 3]>> {
        let v = self.numbers(&self.run(crop, None)?)?;
        if v.len() != LANDMARK_COUNT * 3 {
            return Err(Error::DimensionMismatch {
                what: "landmark coordinates",
                expected: LANDMARK_COUNT * 3,
                got: v.len(),
            });
        }
        Ok(v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}

impl BehavioralExtractor for ExternalCommand {
    fn blendshapes(&self, crop: &DynamicImage, landmarks: &LandmarkFrame) -> Result<Vec<f32>> {
        let lm = tempfile::Builder::new().suffix(".json").tempfile()?;
        serde_json::to_writer(lm.as_file(), landmarks.points())?;
        let value = self.run(crop, Some(("DBAG_LANDMARKS", lm.path())))?;
        self.numbers(&value)
    }
}

impl IdentityExtractor for ExternalCommand {
    fn embed(&self, crop: &DynamicImage) -> Result<Vec<f32>> {
        let value = self.run(crop, None)?;
        self.numbers(&value)
    }
}

/// Which adapter to construct for each role, as stored in pipeline configs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Builtin,
    External(ExternalSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ExternalSpec {
    pub name: String,
    pub version: String,
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default)]
    pub single_caller: bool,
}

impl From<&ExternalSpec> for ExternalCommand {
    fn from(s: &ExternalSpec) -> Self {
        ExternalCommand {
            name: s.name.clone(),
            version: s.version.clone(),
            program: s.program.clone(),
            args: s.args.clone(),
            single_caller: s.single_caller,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct BackendsConfig {
    pub face_detector: BackendSpec,
    pub landmark_extractor: BackendSpec,
    pub behavioral_extractor: BackendSpec,
    pub identity_extractor: BackendSpec,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self {
            face_detector: BackendSpec::Builtin,
            landmark_extractor: BackendSpec::Builtin,
            behavioral_extractor: BackendSpec::Builtin,
            identity_extractor: BackendSpec::Builtin,
        }
    }
}

impl BackendsConfig {
    pub fn build(&self) -> BackendRegistry {
        let mut reg = BackendRegistry::new();
        reg = match &self.face_detector {
            BackendSpec::Builtin => reg.with_face_detector(Arc::new(WholeFrameDetector)),
            BackendSpec::External(s) => reg.with_face_detector(Arc::new(ExternalCommand::from(s))),
        };
        reg = match &self.landmark_extractor {
            BackendSpec::Builtin => reg.with_landmark_extractor(Arc::new(GridLandmarks)),
            BackendSpec::External(s) => reg.with_landmark_extractor(Arc::new(ExternalCommand::from(s))),
        };
        reg = match &self.behavioral_extractor {
            BackendSpec::Builtin => reg.with_behavioral_extractor(Arc::new(NeutralBlendshapes)),
            BackendSpec::External(s) => reg.with_behavioral_extractor(Arc::new(ExternalCommand::from(s))),
        };
        match &self.identity_extractor {
            BackendSpec::Builtin => reg.with_identity_extractor(Arc::new(ThumbnailIdentity)),
            BackendSpec::External(s) => reg.with_identity_extractor(Arc::new(ExternalCommand::from(s))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_478_finite_points() {
        let g = GridLandmarks::grid();
        assert_eq!(g.len(), LANDMARK_COUNT);
        assert!(g.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn missing_backend_is_reported() {
        let reg = BackendRegistry::new();
        assert!(matches!(reg.detector(), Err(Error::BackendUnavailable(_))));
        assert!(matches!(reg.identity(), Err(Error::BackendUnavailable(_))));
    }

    #[test]
    fn single_caller_adapters_get_a_lock() {
        let ext = ExternalCommand {
            name: "x".into(),
            version: "0".into(),
            program: "true".into(),
            args: vec![],
            single_caller: true,
        };
        let slot: Slot<dyn FaceDetector> = Slot::new(Arc::new(ext));
        assert!(slot.lock.is_some());
        let slot: Slot<dyn FaceDetector> = Slot::new(Arc::new(WholeFrameDetector));
        assert!(slot.lock.is_none());
    }

    #[cfg(unix)]
    #[test]
    fn external_identity_reads_stdout() {
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("emb.sh");
        std::fs::write(&script, "#!/bin/sh\necho '[1, 2, [3, 4]]'\n").unwrap();
        let ext = ExternalCommand {
            name: "sh".into(),
            version: "0".into(),
            program: "sh".into(),
            args: vec![script.to_string_lossy().into_owned()],
            single_caller: false,
        };
        let img = DynamicImage::new_rgb8(4, 4);
        assert_eq!(ext.embed(&img).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    }
}
