//! Stage wiring: extraction into feature caches, training with
//! standardization, reference building and prediction.

use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::descriptor::{self, slice, DbagSlice, FeatureCacheMeta, FeatureStats, SliceParams};
use crate::eval::SplitMode;
use crate::geometry::{geometric_features_sequence, RegionSpec};
use crate::inference::{self, InferenceConfig, VideoVerdict};
use crate::ingest::{self, backends::BackendRegistry};
use crate::manifest::{Manifest, ManifestRecord};
use crate::net::{Checkpoint, DbagNet, ModelConfig};
use crate::trainer::{self, ReferenceSet, TrainConfig, TrainHistory};
use crate::{Error, Label, Result};

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    /// Minimum face width and height in pixels.
    pub min_face: u32,
    /// Nominal frame rate recorded for frame-directory inputs.
    pub fps: f32,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            min_face: ingest::DEFAULT_MIN_FACE,
            fps: 25.0,
        }
    }
}

/// Cache file for a video; ids are made filesystem-safe.
pub fn feature_cache_path(cache_dir: &Path, video_id: &str) -> PathBuf {
    let safe: String = video_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    cache_dir.join(format!("{safe}.feat"))
}

/// Frame features of one video with the frame index of every row.
pub struct ExtractedVideo {
    pub features: Array2<f32>,
    pub source_indices: Vec<usize>,
    pub frame_count: usize,
}

/// Run every ingest stage on one video. Frames without a face or without
/// landmarks are dropped, so rows may skip frame indices.
pub fn extract_video(
    path: &Path,
    video_id: &str,
    registry: &BackendRegistry,
    region: &RegionSpec,
    cfg: &ExtractionConfig,
) -> Result<ExtractedVideo> {
    let video = ingest::video::load_video(path, video_id, cfg.fps)?;
    let track = ingest::detect_faces(&video, cfg.min_face, registry)?;
    let mut faces = ingest::crop_and_resize(&video, &track)?;
    let landmarks = ingest::extract_landmarks(&faces, registry)?;
    faces.retain_sources(&landmarks.source_indices);
    let f_g = geometric_features_sequence(&landmarks.frames, region)?;
    let f_b = descriptor::behavioral_features(&faces, &landmarks, registry)?;
    let f_i = descriptor::identity_features(&faces, registry)?;
    let features = descriptor::fuse(f_b.view(), f_g.view(), f_i.view())?;
    Ok(ExtractedVideo {
        features,
        source_indices: landmarks.source_indices,
        frame_count: video.len(),
    })
}

/// Hash of everything that determines a video's features.
pub fn input_fingerprint(
    path: &Path,
    registry: &BackendRegistry,
    region: &RegionSpec,
    cfg: &ExtractionConfig,
) -> Result<String> {
    let source = ingest::video::FrameSource::open(path)?;
    let mut parts = vec![
        artifact::hash_json(&registry.versions()),
        region.hash(),
        artifact::hash_json(cfg),
    ];
    for p in source.paths() {
        parts.push(artifact::hash_file(p)?);
    }
    Ok(artifact::sha256_hex(parts.join(":").as_bytes()))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub computed: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<(String, String)>,
}

/// Extract every manifest video into `cache_dir`, skipping caches whose
/// input fingerprint is unchanged. Per-video failures are collected rather
/// than aborting the batch.
pub fn extract_manifest(
    manifest: &Manifest,
    cache_dir: &Path,
    registry: &BackendRegistry,
    region: &RegionSpec,
    cfg: &ExtractionConfig,
    workers: usize,
) -> Result<ExtractSummary> {
    region.validate()?;
    std::fs::create_dir_all(cache_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    enum Outcome {
        Computed,
        Skipped,
    }
    let results: Vec<(String, Result<Outcome>)> = pool.install(|| {
        manifest
            .records
            .par_iter()
            .map(|rec| {
                let run = || -> Result<Outcome> {
                    let path = manifest.resolve(rec);
                    let fp = input_fingerprint(&path, registry, region, cfg)?;
                    let cache = feature_cache_path(cache_dir, &rec.video_id);
                    if let Ok((_, meta)) = descriptor::read_cache(&cache) {
                        if meta.input_fingerprint == fp {
                            return Ok(Outcome::Skipped);
                        }
                    }
                    let v = extract_video(&path, &rec.video_id, registry, region, cfg)?;
                    let meta = FeatureCacheMeta {
                        video_id: rec.video_id.clone(),
                        label: Some(rec.label),
                        dataset: rec.dataset_name.clone(),
                        manipulation_type: rec.manipulation_type.clone(),
                        backends: registry.versions(),
                        region_spec_hash: region.hash(),
                        stats_hash: None,
                        source_indices: v.source_indices,
                        frame_count: v.frame_count,
                        input_fingerprint: fp,
                    };
                    descriptor::write_cache(&cache, &v.features, &meta)?;
                    Ok(Outcome::Computed)
                };
                (rec.video_id.clone(), run())
            })
            .collect()
    });
    let mut summary = ExtractSummary::default();
    for (id, r) in results {
        match r {
            Ok(Outcome::Computed) => summary.computed.push(id),
            Ok(Outcome::Skipped) => summary.skipped.push(id),
            Err(e) => {
                log::error!("{id}: {e}");
                summary.failed.push((id, e.to_string()));
            }
        }
    }
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Cached features
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pub video_id: String,
    pub label: Label,
    pub features: Array2<f32>,
    pub source_indices: Vec<usize>,
    frame_count: usize,
    pub region_spec_hash: String,
}

impl VideoFeatures {
    pub fn new(video_id: impl Into<String>, label: Label, features: Array2<f32>) -> Self {
        let n = features.nrows();
        Self {
            video_id: video_id.into(),
            label,
            features,
            source_indices: (0..n).collect(),
            frame_count: n,
            region_spec_hash: String::new(),
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    /// Rows whose source frame lies in `range`.
    pub fn restrict_to_frames(&self, range: Range<usize>) -> Self {
        let keep: Vec<usize> = (0..self.source_indices.len())
            .filter(|&r| range.contains(&self.source_indices[r]))
            .collect();
        Self {
            video_id: self.video_id.clone(),
            label: self.label,
            features: self.features.select(Axis(0), &keep),
            source_indices: keep.iter().map(|&r| self.source_indices[r]).collect(),
            frame_count: self.frame_count,
            region_spec_hash: self.region_spec_hash.clone(),
        }
    }
}

/// Load a manifest record's feature cache. The manifest's label wins over
/// whatever the cache recorded.
pub fn load_video_features(rec: &ManifestRecord, cache_dir: &Path) -> Result<VideoFeatures> {
    let path = feature_cache_path(cache_dir, &rec.video_id);
    if !path.exists() {
        return Err(Error::MissingCache {
            video_id: rec.video_id.clone(),
            path,
        });
    }
    let (features, meta) = descriptor::read_cache(&path)?;
    if meta.video_id != rec.video_id {
        return Err(Error::CorruptCache {
            path,
            reason: format!("cache belongs to `{}`", meta.video_id),
        });
    }
    let frame_count = if meta.frame_count > 0 {
        meta.frame_count
    } else {
        meta.source_indices.iter().max().map_or(0, |m| m + 1)
    };
    Ok(VideoFeatures {
        video_id: rec.video_id.clone(),
        label: rec.label,
        features,
        source_indices: meta.source_indices,
        frame_count,
        region_spec_hash: meta.region_spec_hash,
    })
}

// ---------------------------------------------------------------------------
// Training and prediction
// ---------------------------------------------------------------------------

/// Optional training-set augmentation. Extra copies of each training video
/// are sliced from a randomly delayed start and perturbed with Gaussian noise
/// in standardized units. Off by default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentation {
    pub copies: usize,
    pub feature_noise_std: f32,
    pub max_jitter: usize,
}

/// Everything a train-and-evaluate run depends on besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub slicing: SliceParams,
    pub split: SplitMode,
    pub augmentation: Augmentation,
    /// Seeds the split, the initialization and triplet sampling.
    pub seed: u64,
    pub region_spec_hash: String,
    pub config_hash: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            slicing: SliceParams::default(),
            split: SplitMode::default(),
            augmentation: Augmentation::default(),
            seed: 0,
            region_spec_hash: RegionSpec::default().hash(),
            config_hash: String::new(),
        }
    }
}

pub struct TrainedModel {
    pub checkpoint: Checkpoint,
    pub checkpoint_bytes: Vec<u8>,
    pub checkpoint_hash: String,
    pub history: TrainHistory,
    /// Standardized training slices, in the order the reference set uses.
    pub slices: Vec<DbagSlice>,
    pub manifest_hash: String,
}

fn check_region(videos: &[VideoFeatures], expected: &str) -> Result<()> {
    for v in videos {
        if !v.region_spec_hash.is_empty() && v.region_spec_hash != expected {
            return Err(Error::ArtifactMismatch(format!(
                "features of `{}` were computed with region spec {}, expected {expected}",
                v.video_id, v.region_spec_hash
            )));
        }
    }
    Ok(())
}

/// Standardized slices of the training videos, plus augmented copies.
pub fn training_slices(
    videos: &[VideoFeatures],
    stats: &FeatureStats,
    slicing: &SliceParams,
    aug: &Augmentation,
    seed: u64,
) -> Result<Vec<DbagSlice>> {
    let mut out = Vec::new();
    for (vi, v) in videos.iter().enumerate() {
        let mut m = v.features.clone();
        stats.apply(&mut m);
        out.extend(slice(m.view(), slicing, &v.video_id, Some(v.label))?);
        for copy in 0..aug.copies {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((vi as u64) << 16) | (copy as u64 + 1));
            let offset = rand::Rng::random_range(&mut rng, 0..=aug.max_jitter).min(m.nrows());
            let shifted = m.slice(ndarray::s![offset.., ..]);
            let mut extra = slice(shifted, slicing, &v.video_id, Some(v.label))?;
            if aug.feature_noise_std > 0.0 {
                let noise = Normal::new(0.0, aug.feature_noise_std as f64)
                    .map_err(|e| Error::InvalidConfig(format!("feature_noise_std: {e}")))?;
                for s in &mut extra {
                    s.start_frame += offset;
                    s.matrix.mapv_inplace(|x| x + noise.sample(&mut rng) as f32);
                }
            }
            out.extend(extra);
        }
    }
    Ok(out)
}

/// Fit standardization on the training frames, train a fresh network and
/// package the checkpoint.
pub fn train_model(videos: &[VideoFeatures], cfg: &ExperimentConfig, manifest_hash: &str) -> Result<TrainedModel> {
    check_region(videos, &cfg.region_spec_hash)?;
    let stats = FeatureStats::fit(videos.iter().map(|v| v.features.view()))?;
    let slices = training_slices(videos, &stats, &cfg.slicing, &cfg.augmentation, cfg.seed)?;
    if slices.is_empty() {
        return Err(Error::NoSlices("training set".into()));
    }
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let mut net = DbagNet::new(cfg.model.clone(), cfg.seed)?;
    let history = trainer::train(&mut net, &slices, &train_cfg, |_| {})?;
    let metadata = serde_json::json!({
        "train": train_cfg,
        "augmentation": cfg.augmentation,
        "config_hash": cfg.config_hash,
        "manifest_hash": manifest_hash,
        "training_slices": slices.len(),
        "final_loss": history.epochs.last().map(|r| r.mean_loss),
    });
    let mut checkpoint = Checkpoint::new(net, stats, cfg.region_spec_hash.clone(), cfg.slicing, metadata);
    let checkpoint_bytes = checkpoint.to_bytes()?;
    let checkpoint_hash = artifact::sha256_hex(&checkpoint_bytes);
    Ok(TrainedModel {
        checkpoint,
        checkpoint_bytes,
        checkpoint_hash,
        history,
        slices,
        manifest_hash: manifest_hash.to_string(),
    })
}

pub fn reference_from(trained: &TrainedModel) -> Result<ReferenceSet> {
    trainer::build_reference_set(
        &trained.checkpoint.net,
        &trained.slices,
        &trained.checkpoint_hash,
        &trained.manifest_hash,
    )
}

/// Reference set for a saved checkpoint: training slices are rebuilt from
/// raw features with the checkpoint's statistics.
pub fn reference_for_checkpoint(
    ckpt: &Checkpoint,
    checkpoint_hash: &str,
    videos: &[VideoFeatures],
    manifest_hash: &str,
) -> Result<ReferenceSet> {
    check_region(videos, &ckpt.header.region_spec_hash)?;
    let slices = training_slices(
        videos,
        &ckpt.header.feature_stats,
        &ckpt.header.slice_params,
        &Augmentation::default(),
        0,
    )?;
    trainer::build_reference_set(&ckpt.net, &slices, checkpoint_hash, manifest_hash)
}

pub fn predict(
    ckpt: &Checkpoint,
    reference: &ReferenceSet,
    video: &VideoFeatures,
    cfg: &InferenceConfig,
) -> Result<VideoVerdict> {
    check_region(std::slice::from_ref(video), &ckpt.header.region_spec_hash)?;
    Ok(inference::predict_video(ckpt, reference, &video.video_id, video.features.view(), cfg)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_paths_are_safe() {
        let p = feature_cache_path(Path::new("/c"), "a/b c");
        assert_eq!(p, PathBuf::from("/c/a_b_c.feat"));
    }

    #[test]
    fn restrict_keeps_rows_in_range() {
        let mut v = VideoFeatures::new("v", Label::Real, Array2::from_shape_fn((5, 600), |(r, _)| r as f32));
        v.source_indices = vec![0, 2, 3, 7, 9];
        v.frame_count = 10;
        let r = v.restrict_to_frames(2..8);
        assert_eq!(r.source_indices, vec![2, 3, 7]);
        assert_eq!(r.features[[0, 0]], 1.0);
    }

    #[test]
    fn augmentation_adds_copies() {
        let v = VideoFeatures::new("v", Label::Fake, Array2::from_shape_fn((300, 600), |(r, c)| (r + c) as f32));
        let stats = FeatureStats::identity();
        let base = training_slices(std::slice::from_ref(&v), &stats, &SliceParams::default(), &Augmentation::default(), 1)
            .unwrap();
        assert_eq!(base.len(), 4);
        let aug = Augmentation {
            copies: 2,
            feature_noise_std: 0.1,
            max_jitter: 30,
        };
        let more = training_slices(std::slice::from_ref(&v), &stats, &SliceParams::default(), &aug, 1).unwrap();
        assert!(more.len() > base.len());
        assert_eq!(
            more,
            training_slices(std::slice::from_ref(&v), &stats, &SliceParams::default(), &aug, 1).unwrap()
        );
    }
}
