//! Split protocols, ACC/AUC/EER, and experiment drivers.

use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::manifest::Manifest;
use crate::pipeline::{self, ExperimentConfig, VideoFeatures};
use crate::{Error, Label, Result};

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Whole videos, 80% train / 20% test by seeded shuffle.
    #[default]
    #[serde(rename = "random_80_20")]
    Random8020,
    /// Every video contributes its first 20% of frames to training and its
    /// last 20% to testing; the middle is ignored.
    #[serde(rename = "segment_20_20")]
    Segment2020,
    /// The train manifest is used whole for training and the test manifest
    /// whole for testing.
    Predefined,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_80_20" => Ok(Self::Random8020),
            "segment_20_20" => Ok(Self::Segment2020),
            "predefined" => Ok(Self::Predefined),
            other => Err(Error::InvalidConfig(format!("unknown split mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for SplitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Random8020 => "random_80_20",
            Self::Segment2020 => "segment_20_20",
            Self::Predefined => "predefined",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    Train,
    Test,
    /// Frame ranges come from [`segment_ranges`] once the length is known.
    Segmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub seed: u64,
    /// `(video_id, assignment)` in manifest order.
    pub assignments: Vec<(String, Assignment)>,
}

impl SplitPlan {
    pub fn assignment(&self, video_id: &str) -> Option<Assignment> {
        self.assignments.iter().find(|(id, _)| id == video_id).map(|(_, a)| *a)
    }

    pub fn count(&self, a: Assignment) -> usize {
        self.assignments.iter().filter(|(_, x)| *x == a).count()
    }
}

/// Train frames `[0, 0.2N)` and test frames `[0.8N, N)`, with the bounds
/// taken exactly: frame `i` trains iff `i < 0.2N` and tests iff `i ≥ 0.8N`.
pub fn segment_ranges(n: usize) -> (Range<usize>, Range<usize>) {
    let train_end = n.div_ceil(5);
    let test_start = (4 * n).div_ceil(5);
    (0..train_end, test_start..n)
}

/// How many of `n` videos train under the 80/20 split.
fn random_train_count(n: usize) -> usize {
    (4 * n) / 5
}

pub fn make_split(manifest: &Manifest, mode: SplitMode, seed: u64) -> Result<SplitPlan> {
    if manifest.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let ids: Vec<String> = manifest.records.iter().map(|r| r.video_id.clone()).collect();
    let assignments = match mode {
        SplitMode::Segment2020 => ids.into_iter().map(|id| (id, Assignment::Segmented)).collect(),
        SplitMode::Predefined => ids.into_iter().map(|id| (id, Assignment::Train)).collect(),
        SplitMode::Random8020 => {
            if ids.len() < 2 {
                return Err(Error::InvalidConfig(
                    "random_80_20 needs at least two videos to leave one for testing".into(),
                ));
            }
            let mut order: Vec<usize> = (0..ids.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n_train = random_train_count(ids.len()).max(1);
            let mut roles = vec![Assignment::Test; ids.len()];
            for &i in &order[..n_train] {
                roles[i] = Assignment::Train;
            }
            ids.into_iter().zip(roles).collect()
        }
    };
    Ok(SplitPlan { mode, seed, assignments })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Percent.
    pub acc: f64,
    pub auc: f64,
    pub eer: f64,
    pub n: usize,
    pub n_real: usize,
    pub n_fake: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

fn check_inputs(scores: &[f64], labels: &[Label]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let fake = labels.iter().filter(|l| l.is_fake()).count();
    let real = labels.len() - fake;
    if fake == 0 || real == 0 {
        return Err(Error::SingleClassError { real, fake });
    }
    Ok((real, fake))
}

/// Scores sorted descending, grouped by equal value: `(score, reals, fakes)`.
fn tie_groups(scores: &[f64], labels: &[Label]) -> Vec<(f64, usize, usize)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for i in idx {
        let (s, fake) = (scores[i], labels[i].is_fake());
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if fake {
                    g.2 += 1
                } else {
                    g.1 += 1
                }
            }
            _ => groups.push((s, usize::from(!fake), usize::from(fake))),
        }
    }
    groups
}

/// Probability that a random fake outscores a random real, ties counted
/// one half, as a percentage.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (real, fake) = check_inputs(scores, labels)?;
    let mut reals_below = real as f64;
    let mut wins = 0.0f64;
    for (_, r, f) in tie_groups(scores, labels) {
        reals_below -= r as f64;
        wins += f as f64 * (reals_below + 0.5 * r as f64);
    }
    Ok(100.0 * wins / (real as f64 * fake as f64))
}

/// ROC from the origin to (1, 1), one point per distinct score; a video is
/// called fake when its score is at least the threshold.
pub fn roc_curve(scores: &[f64], labels: &[Label]) -> Result<Vec<RocPoint>> {
    let (real, fake) = check_inputs(scores, labels)?;
    let mut pts = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut fp, mut tp) = (0usize, 0usize);
    for (s, r, f) in tie_groups(scores, labels) {
        fp += r;
        tp += f;
        pts.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / real as f64,
            tpr: tp as f64 / fake as f64,
        });
    }
    Ok(pts)
}

/// Equal error rate in percent: where the false-reject rate (1 − TPR) meets
/// the false-accept rate (FPR), linearly interpolated along the ROC.
pub fn eer(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let pts = roc_curve(scores, labels)?;
    for w in pts.windows(2) {
        let g0 = (1.0 - w[0].tpr) - w[0].fpr;
        let g1 = (1.0 - w[1].tpr) - w[1].fpr;
        if g0 == 0.0 {
            return Ok(100.0 * w[0].fpr);
        }
        if g0 > 0.0 && g1 <= 0.0 {
            let t = g0 / (g0 - g1);
            return Ok(100.0 * (w[0].fpr + t * (w[1].fpr - w[0].fpr)));
        }
    }
    // the curve ends at (1, 1) where the gap is −1, so a crossing always exists
    unreachable!("ROC gap must change sign")
}

pub fn accuracy(scores: &[f64], labels: &[Label], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::LengthMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, l)| (s >= threshold) == l.is_fake())
        .count();
    Ok(100.0 * correct as f64 / scores.len() as f64)
}

pub fn compute_metrics(scores: &[f64], labels: &[Label], threshold: f64) -> Result<Metrics> {
    let (n_real, n_fake) = check_inputs(scores, labels)?;
    Ok(Metrics {
        acc: accuracy(scores, labels, threshold)?,
        auc: auc(scores, labels)?,
        eer: eer(scores, labels)?,
        n: scores.len(),
        n_real,
        n_fake,
    })
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    s
}

// ---------------------------------------------------------------------------
// Projection for plotting
// ---------------------------------------------------------------------------

/// Projection onto the two leading principal components, by power iteration
/// with deflation. Component signs are fixed so each has a positive largest
/// loading.
pub fn pca_2d(x: ArrayView2<f32>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, 2));
    if n == 0 || d == 0 {
        return out;
    }
    let xf = x.mapv(|v| v as f64);
    let mean = xf.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centered = &xf - &mean;
    let mut cov = centered.t().dot(&centered) / n.max(2).saturating_sub(1) as f64;
    for k in 0..2.min(d) {
        let mut v = ndarray::Array1::from_shape_fn(d, |i| 1.0 + (i as f64 * 0.618).fract());
        v /= v.dot(&v).sqrt();
        for _ in 0..500 {
            let w = cov.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm < 1e-300 {
                break;
            }
            v = w / norm;
        }
        let lead = v.iter().fold(0.0f64, |m, &a| if a.abs() > m.abs() { a } else { m });
        if lead < 0.0 {
            v.mapv_inplace(|a| -a);
        }
        let lambda = v.dot(&cov.dot(&v));
        let outer = v
            .view()
            .insert_axis(ndarray::Axis(1))
            .dot(&v.view().insert_axis(ndarray::Axis(0)));
        cov = cov - outer * lambda;
        out.column_mut(k).assign(&centered.dot(&v));
    }
    out
}

pub fn projection_csv(coords: &Array2<f64>, labels: &[Label], ids: &[String]) -> String {
    let mut s = String::from("id,label,pc1,pc2\n");
    for (i, row) in coords.rows().into_iter().enumerate() {
        s.push_str(&format!("{},{},{},{}\n", ids[i], labels[i], row[0], row[1]));
    }
    s
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredVideo {
    pub video_id: String,
    pub truth: Label,
    pub label: Label,
    pub fake_score: f64,
    pub n_slices: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportHashes {
    pub config: String,
    pub checkpoint: String,
    pub reference: String,
    pub train_manifest: String,
    pub test_manifest: String,
    pub region_spec: String,
    pub feature_stats: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub train: String,
    pub test: String,
    pub split: SplitMode,
    pub threshold: f64,
    pub acc: f64,
    pub auc: f64,
    pub eer: f64,
    pub n_videos: usize,
    pub n_real: usize,
    pub n_fake: usize,
    /// Test videos too short to yield a slice.
    pub skipped: Vec<String>,
    pub verdicts: Vec<ScoredVideo>,
    pub hashes: ReportHashes,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain report") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        artifact::read_json(path)
    }

    pub fn hash(&self) -> String {
        artifact::sha256_hex(self.to_json().as_bytes())
    }

    pub fn roc(&self) -> Result<Vec<RocPoint>> {
        let (s, l): (Vec<f64>, Vec<Label>) = self.verdicts.iter().map(|v| (v.fake_score, v.truth)).unzip();
        roc_curve(&s, &l)
    }
}

/// One side of an experiment: a manifest, optionally narrowed to real videos
/// plus one manipulation type.
#[derive(Debug, Clone)]
pub struct DataSpec<'a> {
    pub name: String,
    pub manifest: &'a Manifest,
    pub manipulation: Option<String>,
}

impl<'a> DataSpec<'a> {
    pub fn new(name: impl Into<String>, manifest: &'a Manifest) -> Self {
        Self {
            name: name.into(),
            manifest,
            manipulation: None,
        }
    }

    pub fn with_manipulation(mut self, m: impl Into<String>) -> Self {
        self.manipulation = Some(m.into());
        self
    }

    fn admits(&self, label: Label, manipulation: Option<&str>) -> bool {
        match &self.manipulation {
            None => true,
            Some(m) => !label.is_fake() || manipulation == Some(m.as_str()),
        }
    }
}

pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub checkpoint: crate::net::Checkpoint,
    pub checkpoint_bytes: Vec<u8>,
    pub reference: crate::trainer::ReferenceSet,
    pub history: crate::trainer::TrainHistory,
}

/// Videos of `spec` playing `role`, with frames cut to the split's ranges.
pub fn select_videos(
    spec: &DataSpec,
    plan: &SplitPlan,
    role: Assignment,
    cache_dir: &Path,
) -> Result<Vec<VideoFeatures>> {
    let mut out = Vec::new();
    for rec in &spec.manifest.records {
        if !spec.admits(rec.label, rec.manipulation_type.as_deref()) {
            continue;
        }
        let Some(a) = plan.assignment(&rec.video_id) else {
            continue;
        };
        let video = match (a, role) {
            (Assignment::Segmented, Assignment::Train | Assignment::Test) => {
                let v = pipeline::load_video_features(rec, cache_dir)?;
                let (train, test) = segment_ranges(v.frame_count());
                v.restrict_to_frames(if role == Assignment::Train { train } else { test })
            }
            (a, r) if a == r => pipeline::load_video_features(rec, cache_dir)?,
            _ => continue,
        };
        out.push(video);
    }
    Ok(out)
}

/// Split plan for a manifest playing one side of an experiment. Under
/// [`SplitMode::Predefined`] a test-side manifest is used whole for testing.
pub fn plan_for(manifest: &Manifest, mode: SplitMode, seed: u64, as_test: bool) -> Result<SplitPlan> {
    let mut plan = make_split(manifest, mode, seed)?;
    if mode == SplitMode::Predefined && as_test {
        for a in &mut plan.assignments {
            a.1 = Assignment::Test;
        }
    }
    Ok(plan)
}

/// Train on `train`, build the reference set, and score the test side.
///
/// The split is drawn over each whole manifest before any manipulation
/// filter, so when both sides share a manifest (same-dataset and
/// cross-manipulation runs) no video is used on both sides.
pub fn run_experiment(
    train: &DataSpec,
    test: &DataSpec,
    cache_dir: &Path,
    cfg: &ExperimentConfig,
) -> Result<ExperimentOutcome> {
    let train_plan = plan_for(train.manifest, cfg.split, cfg.seed, false)?;
    let test_plan = plan_for(test.manifest, cfg.split, cfg.seed, true)?;
    let train_videos = select_videos(train, &train_plan, Assignment::Train, cache_dir)?;
    let test_videos = select_videos(test, &test_plan, Assignment::Test, cache_dir)?;
    if test_videos.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let train_manifest_hash = train.manifest.hash();
    let trained = pipeline::train_model(&train_videos, cfg, &train_manifest_hash)?;
    let reference = pipeline::reference_from(&trained)?;

    let mut verdicts = Vec::new();
    let mut skipped = Vec::new();
    for v in &test_videos {
        match pipeline::predict(&trained.checkpoint, &reference, v, &cfg.inference) {
            Ok(verdict) => verdicts.push(ScoredVideo {
                video_id: verdict.video_id,
                truth: v.label,
                label: verdict.label,
                fake_score: verdict.fake_score,
                n_slices: verdict.n_slices,
            }),
            Err(Error::NoSlices(id)) => {
                log::warn!("test video `{id}` yields no slices; skipped");
                skipped.push(id);
            }
            Err(e) => return Err(e),
        }
    }
    let (scores, labels): (Vec<f64>, Vec<Label>) = verdicts.iter().map(|v| (v.fake_score, v.truth)).unzip();
    let m = compute_metrics(&scores, &labels, cfg.inference.threshold)?;
    let report = EvalReport {
        train: train.name.clone(),
        test: test.name.clone(),
        split: cfg.split,
        threshold: cfg.inference.threshold,
        acc: m.acc,
        auc: m.auc,
        eer: m.eer,
        n_videos: m.n,
        n_real: m.n_real,
        n_fake: m.n_fake,
        skipped,
        verdicts,
        hashes: ReportHashes {
            config: cfg.config_hash.clone(),
            checkpoint: trained.checkpoint_hash.clone(),
            reference: reference.hash(),
            train_manifest: train_manifest_hash,
            test_manifest: test.manifest.hash(),
            region_spec: cfg.region_spec_hash.clone(),
            feature_stats: trained.checkpoint.header.stats_hash.clone(),
        },
    };
    Ok(ExperimentOutcome {
        report,
        checkpoint_bytes: trained.checkpoint_bytes,
        checkpoint: trained.checkpoint,
        reference,
        history: trained.history,
    })
}
