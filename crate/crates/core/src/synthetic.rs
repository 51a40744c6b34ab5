//! Seeded synthetic frame features for benchmarks and fixtures.
//!
//! Each video is a sequence of 600-dim frame vectors built from a latent
//! Gaussian process:
//!
//! ```text
//! z_t = mu_video + b * c_label + s_label * a * (t / T - 1/2) + sigma_label * eps_t
//! ```
//!
//! * `mu_video ~ N(0, tau^2 I)` is a per-video nuisance offset.
//! * `c_label` is a class mean direction scaled by a small `b`; the class
//!   structure is drawn from `world_seed`, so train and test sets drawn with
//!   different `seed`s share it.
//! * `s_label` is +1 for real and -1 for fake: real videos drift upward over
//!   time, fake ones downward, with amplitude `a`.
//! * Fake videos carry extra frame-to-frame flicker: `sigma_fake = sigma * flicker`.
//!
//! The latent is mapped onto the three descriptor blocks the way the real
//! extractors shape their outputs: blendshapes through a logistic squashing
//! into [0, 1], geometric distances as positive magnitudes, and identity as a
//! unit vector dominated by a per-video identity with a faint temporal cue.

use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::descriptor::{
    self, clamp_behavioral, fuse, normalize_identity, FeatureCacheMeta, BEHAVIORAL_DIM, FRAME_DIM, IDENTITY_DIM,
};
use crate::geometry::{RegionSpec, GEOMETRY_DIM};
use crate::ingest::backends::BackendVersions;
use crate::manifest::{Manifest, ManifestRecord};
use crate::pipeline::{feature_cache_path, VideoFeatures};
use crate::{artifact, Label, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_videos: usize,
    pub frames: usize,
    /// Fixes the class structure shared by every set drawn from it.
    pub world_seed: u64,
    /// Fixes this set's videos.
    pub seed: u64,
    /// Per-dimension class mean separation, in noise units.
    pub class_offset: f32,
    /// Drift amplitude over the whole video, in noise units.
    pub drift: f32,
    /// Noise scale of fake videos relative to real ones.
    pub flicker: f32,
    /// Per-video nuisance offset scale.
    pub video_spread: f32,
    pub noise: f32,
    pub dataset: String,
    pub id_prefix: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_videos: 250,
            frames: 240,
            world_seed: 2024,
            seed: 0,
            class_offset: 0.05,
            drift: 2.0,
            flicker: 1.4,
            video_spread: 0.3,
            noise: 1.0,
            dataset: "synthetic".into(),
            id_prefix: "syn".into(),
        }
    }
}

struct ClassStructure {
    mean: [Array1<f32>; 2],
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Array1<f32> {
    Array1::from_shape_fn(n, |_| StandardNormal.sample(rng))
}

impl ClassStructure {
    fn new(world_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(world_seed);
        let mean = [gaussian(&mut rng, FRAME_DIM), gaussian(&mut rng, FRAME_DIM)];
        Self { mean }
    }
}

fn logistic(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Map latent rows onto valid behavioral, geometric and identity blocks.
fn to_descriptor(latent: &Array2<f32>, identity: &Array1<f32>) -> Result<Array2<f32>> {
    let n = latent.nrows();
    let mut f_b = Array2::zeros((n, BEHAVIORAL_DIM));
    let mut f_g = Array2::zeros((n, GEOMETRY_DIM));
    let mut f_i = Array2::zeros((n, IDENTITY_DIM));
    for t in 0..n {
        let z = latent.row(t);
        let b: Vec<f32> = z.slice(s![..BEHAVIORAL_DIM]).iter().map(|&v| logistic(v)).collect();
        f_b.row_mut(t).assign(&Array1::from(clamp_behavioral(b)?));
        let g = z
            .slice(s![BEHAVIORAL_DIM..BEHAVIORAL_DIM + GEOMETRY_DIM])
            .mapv(|v| (40.0 + 4.0 * v).abs());
        f_g.row_mut(t).assign(&g);
        let cue = z.slice(s![BEHAVIORAL_DIM + GEOMETRY_DIM..]);
        let raw: Vec<f32> = identity.iter().zip(cue).map(|(&id, &c)| id + 0.1 * c).collect();
        f_i.row_mut(t).assign(&Array1::from(normalize_identity(raw)?));
    }
    fuse(f_b.view(), f_g.view(), f_i.view())
}

/// Balanced labels: even indices real, odd fake.
pub fn label_of(i: usize) -> Label {
    if i % 2 == 0 {
        Label::Real
    } else {
        Label::Fake
    }
}

pub fn generate(cfg: &SyntheticConfig) -> Result<Vec<VideoFeatures>> {
    let world = ClassStructure::new(cfg.world_seed);
    let mut out = Vec::with_capacity(cfg.n_videos);
    for i in 0..cfg.n_videos {
        let label = label_of(i);
        let c = usize::from(label.is_fake());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);
        let mu = gaussian(&mut rng, FRAME_DIM) * cfg.video_spread + &world.mean[c] * cfg.class_offset;
        let identity = gaussian(&mut rng, IDENTITY_DIM);
        let (direction, sigma) = if label.is_fake() {
            (-1.0, cfg.noise * cfg.flicker)
        } else {
            (1.0, cfg.noise)
        };
        let mut latent = Array2::zeros((cfg.frames, FRAME_DIM));
        for t in 0..cfg.frames {
            let phase = t as f32 / cfg.frames.max(1) as f32 - 0.5;
            let row = &mu + direction * cfg.drift * phase + gaussian(&mut rng, FRAME_DIM) * sigma;
            latent.row_mut(t).assign(&row);
        }
        let features = to_descriptor(&latent, &identity)?;
        let mut v = VideoFeatures::new(format!("{}_{i:04}", cfg.id_prefix), label, features);
        v.region_spec_hash = RegionSpec::default().hash();
        out.push(v);
    }
    Ok(out)
}

/// Manifest records for generated videos; paths point at nothing, since the
/// feature caches stand in for the videos.
pub fn manifest_for(videos: &[VideoFeatures], cfg: &SyntheticConfig) -> Manifest {
    let records = videos
        .iter()
        .map(|v| ManifestRecord {
            video_id: v.video_id.clone(),
            path: PathBuf::from(format!("synthetic/{}", v.video_id)),
            label: v.label,
            dataset_name: cfg.dataset.clone(),
            manipulation_type: v.label.is_fake().then(|| "synthetic".to_string()),
            identity_id: None,
        })
        .collect();
    Manifest {
        records,
        base_dir: PathBuf::new(),
    }
}

/// Write feature caches for `videos` into `cache_dir`.
pub fn write_caches(videos: &[VideoFeatures], cfg: &SyntheticConfig, cache_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(cache_dir)?;
    let fingerprint = format!("synthetic:{}", artifact::hash_json(cfg));
    for v in videos {
        let meta = FeatureCacheMeta {
            video_id: v.video_id.clone(),
            label: Some(v.label),
            dataset: cfg.dataset.clone(),
            manipulation_type: v.label.is_fake().then(|| "synthetic".to_string()),
            backends: BackendVersions::default(),
            region_spec_hash: v.region_spec_hash.clone(),
            stats_hash: None,
            source_indices: v.source_indices.clone(),
            frame_count: v.frame_count(),
            input_fingerprint: fingerprint.clone(),
        };
        descriptor::write_cache(&feature_cache_path(cache_dir, &v.video_id), &v.features, &meta)?;
    }
    Ok(())
}

/// Paths written by [`write_fixture_pack`].
#[derive(Debug, Clone)]
pub struct FixturePack {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub cache_dir: PathBuf,
}

/// Train and test sets sharing one class structure, as manifests plus caches
/// under `dir`.
pub fn write_fixture_pack(dir: &Path, train: &SyntheticConfig, test: &SyntheticConfig) -> Result<FixturePack> {
    let cache_dir = dir.join("cache");
    let mut paths = Vec::new();
    for (name, cfg) in [("train", train), ("test", test)] {
        let videos = generate(cfg)?;
        write_caches(&videos, cfg, &cache_dir)?;
        let manifest = manifest_for(&videos, cfg);
        let path = dir.join(format!("{name}.jsonl"));
        std::fs::create_dir_all(dir)?;
        manifest.save(&path)?;
        paths.push(path);
    }
    Ok(FixturePack {
        test_manifest: paths.pop().expect("two manifests"),
        train_manifest: paths.pop().expect("two manifests"),
        cache_dir,
    })
}

/// The benchmark's train and test set configurations: 200 and 50 videos of
/// 240 frames from one world.
pub fn benchmark_sets(seed: u64) -> (SyntheticConfig, SyntheticConfig) {
    let train = SyntheticConfig {
        n_videos: 200,
        seed: seed.wrapping_mul(2).wrapping_add(1),
        id_prefix: "train".into(),
        ..SyntheticConfig::default()
    };
    let test = SyntheticConfig {
        n_videos: 50,
        seed: seed.wrapping_mul(2).wrapping_add(2),
        id_prefix: "test".into(),
        ..SyntheticConfig::default()
    };
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{BEHAVIORAL_COLS, IDENTITY_COLS};

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_videos: 4,
            frames: 30,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn blocks_are_valid_and_generation_is_seeded() {
        let a = generate(&small()).unwrap();
        assert_eq!(a.len(), 4);
        for v in &a {
            assert_eq!(v.features.dim(), (30, FRAME_DIM));
            assert!(v.features.slice(s![.., BEHAVIORAL_COLS]).iter().all(|&x| (0.0..=1.0).contains(&x)));
            for row in v.features.slice(s![.., IDENTITY_COLS]).rows() {
                assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-5);
            }
        }
        assert_eq!(a, generate(&small()).unwrap());
        let other = generate(&SyntheticConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a[0].features, other[0].features);
        assert_eq!(a[1].label, Label::Fake);
    }

    #[test]
    fn fixture_pack_round_trips_through_caches() {
        let dir = tempfile::tempdir().unwrap();
        let pack = write_fixture_pack(dir.path(), &small(), &SyntheticConfig { seed: 9, id_prefix: "t".into(), ..small() })
            .unwrap();
        let m = Manifest::load(&pack.train_manifest).unwrap();
        assert_eq!(m.len(), 4);
        let v = crate::pipeline::load_video_features(&m.records[0], &pack.cache_dir).unwrap();
        assert_eq!(v, generate(&small()).unwrap()[0]);
    }
}
