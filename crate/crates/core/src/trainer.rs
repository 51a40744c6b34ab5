//! Triplet construction, triplet-loss training and the reference set.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, ContainerKind};
use crate::descriptor::DbagSlice;
use crate::net::{batch_triplet_loss, pairwise_distance, slices_to_tensor, DbagNet, Optimizer, OptimizerKind};
use crate::{Error, Label, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningStrategy {
    /// Positive and negative drawn uniformly at random.
    #[default]
    Uniform,
    /// Negatives drawn from those with `d(a,p) < d(a,n) < d(a,p) + margin`
    /// under the current weights, falling back to uniform when none exist.
    SemiHard,
}

impl std::str::FromStr for MiningStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "semi_hard" | "semi-hard" | "semihard" => Ok(Self::SemiHard),
            other => Err(Error::InvalidConfig(format!("unknown mining strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Triplets per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f32,
    pub margin: f32,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub triplets_per_anchor: usize,
    pub mining: MiningStrategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            margin: 1.0,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            triplets_per_anchor: 1,
            mining: MiningStrategy::Uniform,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.triplets_per_anchor == 0 {
            return bad("epochs, batch_size and triplets_per_anchor must be positive");
        }
        // zero is allowed so a run can be a pure no-op for diagnostics
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad("margin must be positive");
        }
        Ok(())
    }
}

/// Indices into the training slice list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

fn class_indices(labels: &[Label]) -> Result<(Vec<usize>, Vec<usize>)> {
    let (mut real, mut fake) = (Vec::new(), Vec::new());
    for (i, l) in labels.iter().enumerate() {
        if l.is_fake() {
            fake.push(i);
        } else {
            real.push(i);
        }
    }
    if real.len() < 2 || fake.len() < 2 {
        return Err(Error::InsufficientClassSamples {
            real: real.len(),
            fake: fake.len(),
        });
    }
    Ok((real, fake))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn pick_other(pool: &[usize], exclude: usize, rng: &mut impl Rng) -> usize {
    // pool has at least two entries and contains `exclude` at most once
    loop {
        let c = pool[rng.random_range(0..pool.len())];
        if c != exclude {
            return c;
        }
    }
}

/// Uniformly sampled triplets for one epoch, in shuffled order.
/// Every slice serves as anchor `per_anchor` times.
pub fn build_triplets(labels: &[Label], per_anchor: usize, rng: &mut impl Rng) -> Result<Vec<Triplet>> {
    let (real, fake) = class_indices(labels)?;
    let mut out = Vec::with_capacity(labels.len() * per_anchor);
    for (a, l) in labels.iter().enumerate() {
        let (same, other) = if l.is_fake() { (&fake, &real) } else { (&real, &fake) };
        for _ in 0..per_anchor {
            let positive = pick_other(same, a, rng);
            let negative = other[rng.random_range(0..other.len())];
            out.push(Triplet {
                anchor: a,
                positive,
                negative,
            });
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// Triplets for `epoch`, reproducible from `(labels, cfg.seed, epoch)` alone.
pub fn epoch_triplets(labels: &[Label], cfg: &TrainConfig, epoch: usize) -> Result<Vec<Triplet>> {
    build_triplets(labels, cfg.triplets_per_anchor, &mut epoch_rng(cfg.seed, epoch))
}

/// Replace each triplet's negative by a semi-hard one under `embeddings`.
fn mine_semi_hard(
    triplets: &mut [Triplet],
    labels: &[Label],
    embeddings: &Array2<f32>,
    margin: f32,
    rng: &mut impl Rng,
) -> Result<()> {
    let row = |i: usize| embeddings.row(i).to_vec();
    for t in triplets.iter_mut() {
        let a = row(t.anchor);
        let d_ap = pairwise_distance(&a, &row(t.positive))?;
        let candidates: Vec<usize> = (0..labels.len())
            .filter(|&j| labels[j] != labels[t.anchor])
            .filter(|&j| {
                let d = pairwise_distance(&a, &row(j)).unwrap_or(f32::INFINITY);
                d > d_ap && d < d_ap + margin
            })
            .collect();
        if !candidates.is_empty() {
            t.negative = candidates[rng.random_range(0..candidates.len())];
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Fraction of triplets with non-zero loss.
    pub active_fraction: f64,
    pub triplets: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }
}

/// Optimize `net` with the triplet margin loss over labeled `slices`.
///
/// Slices are expected to be standardized already. Each epoch resamples
/// triplets from the seed, so the run is fully determined by
/// `(seed, slices, cfg)` and the initial weights.
pub fn train(
    net: &mut DbagNet,
    slices: &[DbagSlice],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    cfg.validate()?;
    let labels = slice_labels(slices)?;
    class_indices(&labels)?;
    if let Some(bad) = slices.iter().find(|s| s.matrix.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!(
            "training slice of `{}` at frame {}",
            bad.video_id, bad.start_frame
        )));
    }
    let views: Vec<ArrayView2<f32>> = slices.iter().map(|s| s.matrix.view()).collect();
    slices_to_tensor(&views[..1])?;
    let dim = net.embedding_dim();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut triplets = build_triplets(&labels, cfg.triplets_per_anchor, &mut rng)?;
        if cfg.mining == MiningStrategy::SemiHard {
            let emb = net.embed(&views)?;
            mine_semi_hard(&mut triplets, &labels, &emb, cfg.margin, &mut rng)?;
        }
        let (mut loss_sum, mut active) = (0.0f64, 0usize);
        for batch in triplets.chunks(cfg.batch_size) {
            let b = batch.len();
            let batch_views: Vec<ArrayView2<f32>> = batch
                .iter()
                .map(|t| views[t.anchor])
                .chain(batch.iter().map(|t| views[t.positive]))
                .chain(batch.iter().map(|t| views[t.negative]))
                .collect();
            let x = slices_to_tensor(&batch_views)?;
            net.zero_grad();
            let (emb, cache) = net.forward_train(x)?;
            let (loss, grad) = batch_triplet_loss(&emb, b, dim, cfg.margin)?;
            if !loss.is_finite() {
                return Err(Error::DivergenceDetected { epoch, loss });
            }
            active += count_active(&emb, b, dim, cfg.margin);
            loss_sum += loss * b as f64;
            net.backward(cache, &grad);
            optimizer.step(net);
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / triplets.len() as f64,
            active_fraction: active as f64 / triplets.len() as f64,
            triplets: triplets.len(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5}, active {:.3}",
            record.mean_loss,
            record.active_fraction
        );
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(history)
}

fn count_active(emb: &[f32], b: usize, dim: usize, margin: f32) -> usize {
    (0..b)
        .filter(|&t| {
            let r = |k: usize| &emb[(k * b + t) * dim..(k * b + t + 1) * dim];
            crate::net::triplet_loss(r(0), r(1), r(2), margin).map_or(false, |l| l > 0.0)
        })
        .count()
}

fn slice_labels(slices: &[DbagSlice]) -> Result<Vec<Label>> {
    slices
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::InvalidConfig(format!("training slice from `{}` has no label", s.video_id)))
        })
        .collect()
}

/// Stored embeddings of the training slices with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub embeddings: Array2<f32>,
    pub labels: Vec<Label>,
    pub video_ids: Vec<String>,
    pub start_frames: Vec<usize>,
    pub checkpoint_hash: String,
    pub manifest_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReferenceMeta {
    labels: Vec<Label>,
    video_ids: Vec<String>,
    start_frames: Vec<usize>,
    checkpoint_hash: String,
    manifest_hash: String,
}

impl ReferenceSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    fn validate(&self) -> Result<()> {
        let n = self.embeddings.nrows();
        for (what, len) in [
            ("labels", self.labels.len()),
            ("video ids", self.video_ids.len()),
            ("start frames", self.start_frames.len()),
        ] {
            if len != n {
                return Err(Error::LengthMismatch(format!("{n} embeddings but {len} {what}")));
            }
        }
        if self.embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reference embeddings".into()));
        }
        Ok(())
    }

    /// Keep `k` rows chosen by a seeded draw, in original order.
    pub fn subsample(&self, k: usize, seed: u64) -> Self {
        if k >= self.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = rand::seq::index::sample(&mut rng, self.len(), k).into_vec();
        keep.sort_unstable();
        Self {
            embeddings: self.embeddings.select(ndarray::Axis(0), &keep),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            video_ids: keep.iter().map(|&i| self.video_ids[i].clone()).collect(),
            start_frames: keep.iter().map(|&i| self.start_frames[i]).collect(),
            checkpoint_hash: self.checkpoint_hash.clone(),
            manifest_hash: self.manifest_hash.clone(),
        }
    }

    /// Hash of the embedding matrix, labels and provenance.
    pub fn hash(&self) -> String {
        let mut s = artifact::hash_f32s(self.embeddings.as_slice().expect("standard layout"));
        s.push_str(&artifact::hash_json(&self.meta()));
        artifact::sha256_hex(s.as_bytes())
    }

    fn meta(&self) -> ReferenceMeta {
        ReferenceMeta {
            labels: self.labels.clone(),
            video_ids: self.video_ids.clone(),
            start_frames: self.start_frames.clone(),
            checkpoint_hash: self.checkpoint_hash.clone(),
            manifest_hash: self.manifest_hash.clone(),
        }
    }

    /// Binary matrix plus a JSON sidecar with labels and hashes.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let (n, d) = self.embeddings.dim();
        let data = self.embeddings.as_standard_layout();
        artifact::write_container(path, ContainerKind::Embeddings, &[n, d], data.as_slice().unwrap())?;
        artifact::write_json(&artifact::sidecar_path(path), &self.meta())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (shape, data) = artifact::read_container(path, ContainerKind::Embeddings)?;
        let corrupt = |reason: String| Error::CorruptCache {
            path: path.to_path_buf(),
            reason,
        };
        if shape.len() != 2 {
            return Err(corrupt(format!("expected a matrix, got rank {}", shape.len())));
        }
        let meta: ReferenceMeta = artifact::read_json(&artifact::sidecar_path(path))?;
        let set = Self {
            embeddings: Array2::from_shape_vec((shape[0], shape[1]), data).map_err(|e| corrupt(e.to_string()))?,
            labels: meta.labels,
            video_ids: meta.video_ids,
            start_frames: meta.start_frames,
            checkpoint_hash: meta.checkpoint_hash,
            manifest_hash: meta.manifest_hash,
        };
        set.validate().map_err(|e| corrupt(e.to_string()))?;
        Ok(set)
    }
}

/// Embed every training slice in inference mode, rows aligned with `slices`.
pub fn build_reference_set(
    net: &DbagNet,
    slices: &[DbagSlice],
    checkpoint_hash: &str,
    manifest_hash: &str,
) -> Result<ReferenceSet> {
    let labels = slice_labels(slices)?;
    let views: Vec<ArrayView2<f32>> = slices.iter().map(|s| s.matrix.view()).collect();
    let embeddings = net.embed(&views)?;
    let set = ReferenceSet {
        embeddings,
        labels,
        video_ids: slices.iter().map(|s| s.video_id.clone()).collect(),
        start_frames: slices.iter().map(|s| s.start_frame).collect(),
        checkpoint_hash: checkpoint_hash.to_string(),
        manifest_hash: manifest_hash.to_string(),
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{FRAME_DIM, SLICE_LEN};
    use crate::net::{flatten_weights, ModelConfig, Visit};

    fn labels(r: usize, f: usize) -> Vec<Label> {
        let mut v = vec![Label::Real; r];
        v.extend(vec![Label::Fake; f]);
        v
    }

    #[test]
    fn forced_triplet_in_three_item_dataset() {
        // {r1, r2, f1, f2}: anchor r1 must take r2 as positive
        let l = vec![Label::Real, Label::Real, Label::Fake, Label::Fake];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in build_triplets(&l, 3, &mut rng).unwrap() {
            if t.anchor == 0 {
                assert_eq!(t.positive, 1);
                assert!(t.negative >= 2);
            }
        }
    }

    #[test]
    fn one_class_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            build_triplets(&labels(5, 0), 1, &mut rng),
            Err(Error::InsufficientClassSamples { real: 5, fake: 0 })
        ));
        assert!(build_triplets(&labels(1, 1), 1, &mut rng).is_err());
    }

    #[test]
    fn seeded_triplets_replay() {
        let l = labels(10, 10);
        let cfg = TrainConfig {
            seed: 7,
            ..TrainConfig::default()
        };
        for epoch in 0..2 {
            let a = epoch_triplets(&l, &cfg, epoch).unwrap();
            let b = epoch_triplets(&l, &cfg, epoch).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 20);
        }
        assert_ne!(epoch_triplets(&l, &cfg, 0).unwrap(), epoch_triplets(&l, &cfg, 1).unwrap());
    }

    #[test]
    fn semi_hard_picks_band_negatives() {
        // 1-D embeddings: anchor 0 at 0, positive 1 at 0.5, negatives at 0.8 and 5
        let l = vec![Label::Real, Label::Real, Label::Fake, Label::Fake];
        let emb = Array2::from_shape_vec((4, 1), vec![0.0, 0.5, 0.8, 5.0]).unwrap();
        let mut t = vec![Triplet {
            anchor: 0,
            positive: 1,
            negative: 3,
        }];
        mine_semi_hard(&mut t, &l, &emb, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(t[0].negative, 2);
    }

    fn toy_slices(n_per_class: usize) -> Vec<DbagSlice> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..2 * n_per_class)
            .map(|i| {
                let label = if i < n_per_class { Label::Real } else { Label::Fake };
                let shift = if label.is_fake() { 1.0 } else { -1.0 };
                let matrix =
                    Array2::from_shape_fn((SLICE_LEN, FRAME_DIM), |_| shift + rng.random_range(-0.5f32..0.5));
                DbagSlice {
                    matrix,
                    start_frame: 0,
                    video_id: format!("v{i}"),
                    label: Some(label),
                }
            })
            .collect()
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            stem_channels: 2,
            stage_channels: vec![2, 2, 4, 4, 4],
            se_reduction_ratio: 2,
            embedding_dim: 4,
            fc_hidden: 8,
            ..ModelConfig::compact()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let slices = toy_slices(3);
        let mut net = DbagNet::new(small_model(), 1).unwrap();
        let params = |net: &mut DbagNet| {
            let mut w = Vec::new();
            net.visit_params("", &mut |_, p| w.extend_from_slice(&p.value));
            w
        };
        let before = params(&mut net);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let h = train(&mut net, &slices, &cfg, |_| {}).unwrap();
        assert_eq!(before, params(&mut net));
        assert_eq!(h.epochs.len(), 2);
        assert!(h.epochs.iter().all(|r| r.mean_loss.is_finite()));
    }

    #[test]
    fn nan_input_is_detected() {
        let mut slices = toy_slices(2);
        slices[0].matrix[[0, 0]] = f32::NAN;
        let mut net = DbagNet::new(small_model(), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&mut net, &slices, &cfg, |_| {}),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn training_is_deterministic_and_reference_aligned() {
        let slices = toy_slices(3);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut net = DbagNet::new(small_model(), 5).unwrap();
            let h = train(&mut net, &slices, &cfg, |_| {}).unwrap();
            (flatten_weights(&mut net), h, net)
        };
        let (w1, h1, net) = run();
        let (w2, h2, _) = run();
        assert_eq!(w1, w2);
        assert_eq!(h1, h2);

        let r = build_reference_set(&net, &slices, "c", "m").unwrap();
        assert_eq!(r.len(), 6);
        for (i, s) in slices.iter().enumerate() {
            assert_eq!(Some(r.labels[i]), s.label);
        }
        assert_eq!(r, build_reference_set(&net, &slices, "c", "m").unwrap());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ref.bin");
        r.save(&p).unwrap();
        let back = ReferenceSet::load(&p).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.hash(), r.hash());
        let sub = r.subsample(4, 1);
        assert_eq!(sub.len(), 4);
    }
}
