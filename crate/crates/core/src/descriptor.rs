//! Per-frame descriptor assembly and temporal slicing.
//!
//! A frame vector is `[behavioral(52) | geometric(36) | identity(512)]`,
//! 600 values in that fixed column order. Frame vectors are windowed into
//! 120×600 slices with a stride of 60 frames.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::artifact::{self, ContainerKind};
use crate::geometry::GEOMETRY_DIM;
use crate::ingest::{BackendRegistry, BackendVersions, FaceFrames, LandmarkSequence};
use crate::{Error, Label, Result};

pub const BEHAVIORAL_DIM: usize = 52;
pub const IDENTITY_DIM: usize = 512;
pub const FRAME_DIM: usize = BEHAVIORAL_DIM + GEOMETRY_DIM + IDENTITY_DIM;
pub const SLICE_LEN: usize = 120;
pub const SLICE_STRIDE: usize = 60;

/// Column ranges of the three blocks inside a frame vector.
pub const BEHAVIORAL_COLS: std::ops::Range<usize> = 0..BEHAVIORAL_DIM;
pub const GEOMETRY_COLS: std::ops::Range<usize> = BEHAVIORAL_DIM..BEHAVIORAL_DIM + GEOMETRY_DIM;
pub const IDENTITY_COLS: std::ops::Range<usize> = BEHAVIORAL_DIM + GEOMETRY_DIM..FRAME_DIM;

/// Validate a raw blendshape vector and clamp it to [0, 1].
pub fn clamp_behavioral(raw: Vec<f32>) -> Result<Vec<f32>> {
    if raw.len() != BEHAVIORAL_DIM {
        return Err(Error::DimensionMismatch {
            what: "behavioral features",
            expected: BEHAVIORAL_DIM,
            got: raw.len(),
        });
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("behavioral features".into()));
    }
    Ok(raw.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Validate a raw identity embedding and scale it to unit L2 norm.
pub fn normalize_identity(raw: Vec<f32>) -> Result<Vec<f32>> {
    if raw.len() != IDENTITY_DIM {
        return Err(Error::DimensionMismatch {
            what: "identity features",
            expected: IDENTITY_DIM,
            got: raw.len(),
        });
    }
    let norm = raw.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::NonFinite("identity embedding norm".into()));
    }
    Ok(raw.into_iter().map(|v| (v as f64 / norm) as f32).collect())
}

fn rows_to_matrix(rows: Vec<Vec<f32>>, cols: usize) -> Array2<f32> {
    let n = rows.len();
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, cols), flat).expect("rows validated to the column count")
}

/// One clamped 52-vector per crop. `landmarks` must be aligned with `faces`.
pub fn behavioral_features(
    faces: &FaceFrames,
    landmarks: &LandmarkSequence,
    registry: &BackendRegistry,
) -> Result<Array2<f32>> {
    let backend = registry.behavioral()?;
    if faces.len() != landmarks.len() {
        return Err(Error::LengthMismatch(format!(
            "{} crops but {} landmark frames",
            faces.len(),
            landmarks.len()
        )));
    }
    let rows = faces
        .crops
        .iter()
        .zip(&landmarks.frames)
        .map(|(crop, lm)| clamp_behavioral(backend.call(|b| b.blendshapes(crop, lm))?))
        .collect::<Result<Vec<_>>>()?;
    Ok(rows_to_matrix(rows, BEHAVIORAL_DIM))
}

/// One unit-norm 512-vector per crop.
pub fn identity_features(faces: &FaceFrames, registry: &BackendRegistry) -> Result<Array2<f32>> {
    let backend = registry.identity()?;
    let rows = faces
        .crops
        .iter()
        .map(|crop| normalize_identity(backend.call(|b| b.embed(crop))?))
        .collect::<Result<Vec<_>>>()?;
    Ok(rows_to_matrix(rows, IDENTITY_DIM))
}

/// Concatenate the three blocks row by row into N×600.
pub fn fuse(f_b: ArrayView2<f32>, f_g: ArrayView2<f32>, f_i: ArrayView2<f32>) -> Result<Array2<f32>> {
    for (what, m, cols) in [
        ("behavioral block", &f_b, BEHAVIORAL_DIM),
        ("geometric block", &f_g, GEOMETRY_DIM),
        ("identity block", &f_i, IDENTITY_DIM),
    ] {
        if m.ncols() != cols {
            return Err(Error::DimensionMismatch {
                what,
                expected: cols,
                got: m.ncols(),
            });
        }
    }
    let n = f_b.nrows();
    if f_g.nrows() != n || f_i.nrows() != n {
        return Err(Error::LengthMismatch(format!(
            "behavioral {n}, geometric {}, identity {} rows",
            f_g.nrows(),
            f_i.nrows()
        )));
    }
    Ok(ndarray::concatenate(Axis(1), &[f_b, f_g, f_i]).expect("shapes checked"))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    /// Videos shorter than one window produce no slices.
    #[default]
    Off,
    /// A short video yields one slice, its last frame repeated to fill it.
    RepeatLast,
}

impl std::str::FromStr for PadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(PadMode::Off),
            "repeat_last" | "repeat-last" => Ok(PadMode::RepeatLast),
            other => Err(Error::InvalidConfig(format!("unknown pad mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceParams {
    pub window: usize,
    pub stride: usize,
    #[serde(default)]
    pub pad_mode: PadMode,
}

impl Default for SliceParams {
    fn default() -> Self {
        Self {
            window: SLICE_LEN,
            stride: SLICE_STRIDE,
            pad_mode: PadMode::Off,
        }
    }
}

impl SliceParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 || self.stride > self.window {
            return Err(Error::InvalidConfig(format!(
                "need window > 0 and 0 < stride <= window, got window {} stride {}",
                self.window, self.stride
            )));
        }
        Ok(())
    }

    /// Start frames of the windows over an `n`-frame video.
    pub fn starts(&self, n: usize) -> Vec<usize> {
        if n < self.window {
            return match (self.pad_mode, n) {
                (PadMode::RepeatLast, n) if n > 0 => vec![0],
                _ => Vec::new(),
            };
        }
        (0..=n - self.window).step_by(self.stride).collect()
    }
}

/// One window of consecutive frame vectors from a single video.
#[derive(Debug, Clone, PartialEq)]
pub struct DbagSlice {
    pub matrix: Array2<f32>,
    pub start_frame: usize,
    pub video_id: String,
    pub label: Option<Label>,
}

pub fn slice(
    fv: ArrayView2<f32>,
    params: &SliceParams,
    video_id: &str,
    label: Option<Label>,
) -> Result<Vec<DbagSlice>> {
    params.validate()?;
    let n = fv.nrows();
    Ok(params
        .starts(n)
        .into_iter()
        .map(|start| {
            let matrix = if start + params.window <= n {
                fv.slice(s![start..start + params.window, ..]).to_owned()
            } else {
                let mut m = Array2::zeros((params.window, fv.ncols()));
                for r in 0..params.window {
                    m.row_mut(r).assign(&fv.row((start + r).min(n - 1)));
                }
                m
            };
            DbagSlice {
                matrix,
                start_frame: start,
                video_id: video_id.to_string(),
                label,
            }
        })
        .collect())
}

/// Per-column mean and standard deviation from training frames, used to
/// z-score every frame vector before it reaches the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

const MIN_STD: f64 = 1e-6;

impl FeatureStats {
    pub fn fit<'a>(matrices: impl IntoIterator<Item = ArrayView2<'a, f32>>) -> Result<Self> {
        let mut sum = vec![0.0f64; FRAME_DIM];
        let mut sq = vec![0.0f64; FRAME_DIM];
        let mut count = 0usize;
        for m in matrices {
            if m.ncols() != FRAME_DIM {
                return Err(Error::DimensionMismatch {
                    what: "frame vectors",
                    expected: FRAME_DIM,
                    got: m.ncols(),
                });
            }
            for row in m.rows() {
                for (j, &v) in row.iter().enumerate() {
                    sum[j] += v as f64;
                    sq[j] += v as f64 * v as f64;
                }
            }
            count += m.nrows();
        }
        if count == 0 {
            return Err(Error::ShapeError("cannot fit feature statistics on zero frames".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0).sqrt().max(MIN_STD)) as f32)
            .collect();
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    /// Statistics that leave features unchanged.
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; FRAME_DIM],
            std: vec![1.0; FRAME_DIM],
        }
    }

    pub fn apply(&self, m: &mut Array2<f32>) {
        for mut row in m.rows_mut() {
            for ((v, mean), std) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mean) / std;
            }
        }
    }

    pub fn hash(&self) -> String {
        let mut all = self.mean.clone();
        all.extend_from_slice(&self.std);
        artifact::hash_f32s(&all)
    }
}

/// Sidecar metadata for a feature cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCacheMeta {
    pub video_id: String,
    pub label: Option<Label>,
    #[serde(default)]
    pub dataset: String,
    #[serde(default)]
    pub manipulation_type: Option<String>,
    pub backends: BackendVersions,
    pub region_spec_hash: String,
    /// Hash of the standardization statistics the features were prepared for,
    /// when they were stored already standardized.
    #[serde(default)]
    pub stats_hash: Option<String>,
    /// Source frame index of every row.
    pub source_indices: Vec<usize>,
    /// Frames in the source video, including those without a usable face.
    #[serde(default)]
    pub frame_count: usize,
    /// Fingerprint of the inputs; extraction skips caches whose fingerprint matches.
    #[serde(default)]
    pub input_fingerprint: String,
}

pub fn write_cache(path: &Path, features: &Array2<f32>, meta: &FeatureCacheMeta) -> Result<()> {
    if features.ncols() != FRAME_DIM {
        return Err(Error::DimensionMismatch {
            what: "feature cache",
            expected: FRAME_DIM,
            got: features.ncols(),
        });
    }
    if meta.source_indices.len() != features.nrows() {
        return Err(Error::LengthMismatch(format!(
            "{} source indices for {} rows",
            meta.source_indices.len(),
            features.nrows()
        )));
    }
    let data: Vec<f32> = features.iter().copied().collect();
    artifact::write_container(path, ContainerKind::Features, &[features.nrows(), FRAME_DIM], &data)?;
    artifact::write_json(&artifact::sidecar_path(path), meta)
}

pub fn read_cache(path: &Path) -> Result<(Array2<f32>, FeatureCacheMeta)> {
    let (shape, data) = artifact::read_container(path, ContainerKind::Features)?;
    if shape.len() != 2 || shape[1] != FRAME_DIM {
        return Err(Error::CorruptCache {
            path: path.to_path_buf(),
            reason: format!("feature cache shape {shape:?}, expected [n, {FRAME_DIM}]"),
        });
    }
    let meta: FeatureCacheMeta = artifact::read_json(&artifact::sidecar_path(path))?;
    if meta.source_indices.len() != shape[0] {
        return Err(Error::CorruptCache {
            path: path.to_path_buf(),
            reason: "sidecar row count does not match the cache".into(),
        });
    }
    let m = Array2::from_shape_vec((shape[0], shape[1]), data).expect("length checked by decoder");
    Ok((m, meta))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use image::DynamicImage;

    use super::*;
    use crate::ingest::backends::{
        Backend, BehavioralExtractor, GridLandmarks, IdentityExtractor, NeutralBlendshapes, ThumbnailIdentity,
    };
    use crate::ingest::LandmarkFrame;

    fn faces(n: usize) -> (FaceFrames, LandmarkSequence) {
        let mut f = FaceFrames::default();
        let mut l = LandmarkSequence::default();
        for i in 0..n {
            let img = image::RgbImage::from_fn(224, 224, |x, y| image::Rgb([(x + i as u32) as u8, y as u8, 40]));
            f.push(DynamicImage::ImageRgb8(img), i);
            l.frames.push(LandmarkFrame::new(GridLandmarks::grid()).unwrap());
            l.source_indices.push(i);
        }
        (f, l)
    }

    struct Fixed(Vec<f32>);
    impl Backend for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn version(&self) -> &str {
            "0"
        }
    }
    impl BehavioralExtractor for Fixed {
        fn blendshapes(&self, _c: &DynamicImage, _l: &LandmarkFrame) -> Result<Vec<f32>> {
            Ok(self.0.clone())
        }
    }
    impl IdentityExtractor for Fixed {
        fn embed(&self, _c: &DynamicImage) -> Result<Vec<f32>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn neutral_blendshapes_are_zero() {
        let (f, l) = faces(3);
        let reg = BackendRegistry::new().with_behavioral_extractor(Arc::new(NeutralBlendshapes));
        let m = behavioral_features(&f, &l, &reg).unwrap();
        assert_eq!(m.dim(), (3, 52));
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn behavioral_dimension_and_clamp() {
        let (f, l) = faces(1);
        let reg = BackendRegistry::new().with_behavioral_extractor(Arc::new(Fixed(vec![0.5; 51])));
        assert!(matches!(
            behavioral_features(&f, &l, &reg),
            Err(Error::DimensionMismatch { expected: 52, got: 51, .. })
        ));
        let mut raw = vec![0.5; 52];
        raw[0] = -0.2;
        raw[1] = 1.7;
        let reg = BackendRegistry::new().with_behavioral_extractor(Arc::new(Fixed(raw)));
        let m = behavioral_features(&f, &l, &reg).unwrap();
        assert_eq!((m[[0, 0]], m[[0, 1]], m[[0, 2]]), (0.0, 1.0, 0.5));
    }

    #[test]
    fn identity_is_unit_norm_and_deterministic() {
        let (mut f, _) = faces(2);
        f.crops[1] = f.crops[0].clone();
        let reg = BackendRegistry::new().with_identity_extractor(Arc::new(ThumbnailIdentity));
        let m = identity_features(&f, &reg).unwrap();
        for row in m.rows() {
            let norm: f64 = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-6);
        }
        assert_eq!(m.row(0), m.row(1));
        let reg = BackendRegistry::new().with_identity_extractor(Arc::new(Fixed(vec![1.0; 128])));
        assert!(matches!(
            identity_features(&f, &reg),
            Err(Error::DimensionMismatch { got: 128, .. })
        ));
    }

    #[test]
    fn fuse_block_layout() {
        let m = fuse(
            Array2::from_elem((2, 52), 1.0).view(),
            Array2::from_elem((2, 36), 2.0).view(),
            Array2::from_elem((2, 512), 3.0).view(),
        )
        .unwrap();
        assert_eq!(m.ncols(), 600);
        for row in m.rows() {
            assert!(row.slice(s![0..52]).iter().all(|&v| v == 1.0));
            assert!(row.slice(s![52..88]).iter().all(|&v| v == 2.0));
            assert!(row.slice(s![88..600]).iter().all(|&v| v == 3.0));
        }
        let empty = fuse(
            Array2::zeros((0, 52)).view(),
            Array2::zeros((0, 36)).view(),
            Array2::zeros((0, 512)).view(),
        )
        .unwrap();
        assert_eq!(empty.dim(), (0, 600));
        assert!(matches!(
            fuse(
                Array2::zeros((2, 52)).view(),
                Array2::zeros((3, 36)).view(),
                Array2::zeros((2, 512)).view()
            ),
            Err(Error::LengthMismatch(_))
        ));
    }

    #[test]
    fn slicing_examples() {
        let p = SliceParams::default();
        let fv = Array2::from_shape_fn((240, 600), |(r, _)| r as f32);
        let sl = slice(fv.view(), &p, "v", Some(Label::Real)).unwrap();
        assert_eq!(sl.iter().map(|s| s.start_frame).collect::<Vec<_>>(), vec![0, 60, 120]);
        assert_eq!(sl[1].matrix[[0, 0]], 60.0);
        assert_eq!(sl[2].matrix[[119, 5]], 239.0);

        let fv = Array2::zeros((120, 600));
        assert_eq!(slice(fv.view(), &p, "v", None).unwrap().len(), 1);

        let fv = Array2::from_shape_fn((119, 600), |(r, _)| r as f32);
        assert!(slice(fv.view(), &p, "v", None).unwrap().is_empty());
        let padded = SliceParams {
            pad_mode: PadMode::RepeatLast,
            ..p
        };
        let sl = slice(fv.view(), &padded, "v", None).unwrap();
        assert_eq!(sl.len(), 1);
        assert_eq!(sl[0].matrix.dim(), (120, 600));
        assert_eq!(sl[0].matrix[[118, 0]], 118.0);
        assert_eq!(sl[0].matrix[[119, 0]], 118.0);
    }

    #[test]
    fn invalid_slice_params() {
        let fv = Array2::zeros((10, 600));
        for (w, s) in [(0, 1), (10, 0), (10, 11)] {
            let p = SliceParams {
                window: w,
                stride: s,
                pad_mode: PadMode::Off,
            };
            assert!(slice(fv.view(), &p, "v", None).is_err());
        }
    }

    #[test]
    fn stats_standardize_columns() {
        let a = Array2::from_shape_fn((4, 600), |(r, c)| (r * 2 + c % 3) as f32);
        let stats = FeatureStats::fit([a.view()]).unwrap();
        let mut b = a.clone();
        stats.apply(&mut b);
        for c in 0..600 {
            let col = b.column(c);
            let mean: f32 = col.sum() / 4.0;
            assert!(mean.abs() < 1e-5);
        }
        assert_ne!(stats.hash(), FeatureStats::identity().hash());
    }

    #[test]
    fn cache_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.dbag");
        let feats = Array2::from_shape_fn((5, 600), |(r, c)| ((r * 600 + c) as f32).sin());
        let meta = FeatureCacheMeta {
            video_id: "v".into(),
            label: Some(Label::Fake),
            dataset: "synthetic".into(),
            manipulation_type: None,
            backends: BackendVersions::default(),
            region_spec_hash: "abc".into(),
            stats_hash: None,
            source_indices: (0..5).collect(),
            frame_count: 5,
            input_fingerprint: "fp".into(),
        };
        write_cache(&path, &feats, &meta).unwrap();
        let (back, back_meta) = read_cache(&path).unwrap();
        assert_eq!(back, feats);
        assert_eq!(back_meta, meta);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_cache(&path), Err(Error::CorruptCache { .. })));

        // header claims 599 columns
        let bytes = artifact::encode_container(ContainerKind::Features, &[1, 599], &vec![0.0; 599]).unwrap();
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_cache(&path), Err(Error::CorruptCache { .. })));

        let mut bad = feats.clone();
        bad[[0, 0]] = f32::NAN;
        assert!(write_cache(&path, &bad, &meta).is_err());
    }
}
