//! Nearest-neighbor voting against the reference set and per-video
//! aggregation.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::descriptor::{slice, DbagSlice, SliceParams};
use crate::net::Checkpoint;
use crate::trainer::ReferenceSet;
use crate::{Error, Label, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub m_neighbors: usize,
    /// A video is fake iff its mean slice score is at least this.
    pub threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            m_neighbors: 5,
            threshold: 0.5,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_neighbors == 0 {
            return Err(Error::InvalidConfig("m_neighbors must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidConfig("threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceVerdict {
    pub label: Label,
    /// Fraction of fake labels among the neighbors.
    pub fake_score: f64,
    /// Reference rows, nearest first.
    pub neighbors: Vec<usize>,
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoVerdict {
    pub video_id: String,
    pub label: Label,
    pub fake_score: f64,
    pub n_slices: usize,
}

/// Embed slices with the checkpoint's network.
///
/// `stats_hash` states how the slices were prepared: `None` for raw features,
/// which are standardized here with the checkpoint's statistics, or the hash
/// of the statistics they were already standardized with, which must match.
pub fn embed_test(ckpt: &Checkpoint, slices: &[DbagSlice], stats_hash: Option<&str>) -> Result<Array2<f32>> {
    let dim = ckpt.net.embedding_dim();
    if slices.is_empty() {
        return Ok(Array2::zeros((0, dim)));
    }
    match stats_hash {
        Some(h) if h != ckpt.header.stats_hash => Err(Error::StatsMismatch {
            expected: ckpt.header.stats_hash.clone(),
            got: h.to_string(),
        }),
        Some(_) => {
            let views: Vec<ArrayView2<f32>> = slices.iter().map(|s| s.matrix.view()).collect();
            ckpt.net.embed(&views)
        }
        None => {
            let prepared: Vec<Array2<f32>> = slices
                .iter()
                .map(|s| {
                    let mut m = s.matrix.clone();
                    ckpt.header.feature_stats.apply(&mut m);
                    m
                })
                .collect();
            let views: Vec<ArrayView2<f32>> = prepared.iter().map(|m| m.view()).collect();
            ckpt.net.embed(&views)
        }
    }
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Majority vote of the `m` nearest reference embeddings.
///
/// Distance ties go to the lower reference row; a tied vote goes to the
/// nearest neighbor's label.
pub fn knn_predict(e_test: &[f32], reference: &ReferenceSet, m: usize) -> Result<SliceVerdict> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    if m == 0 || m > reference.len() {
        return Err(Error::MTooLarge { m, n: reference.len() });
    }
    if e_test.len() != reference.dim() {
        return Err(Error::DimensionMismatch {
            what: "test embedding",
            expected: reference.dim(),
            got: e_test.len(),
        });
    }
    let mut order: Vec<(f64, usize)> = reference
        .embeddings
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| (euclidean(e_test, row.as_slice().expect("standard layout")), i))
        .collect();
    // (distance, index) is a total order, so the m smallest are unique
    order.select_nth_unstable_by(m - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.truncate(m);
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let fakes = order.iter().filter(|(_, i)| reference.labels[*i].is_fake()).count();
    let label = match (2 * fakes).cmp(&m) {
        std::cmp::Ordering::Greater => Label::Fake,
        std::cmp::Ordering::Less => Label::Real,
        std::cmp::Ordering::Equal => reference.labels[order[0].1],
    };
    Ok(SliceVerdict {
        label,
        fake_score: fakes as f64 / m as f64,
        neighbors: order.iter().map(|p| p.1).collect(),
        distances: order.iter().map(|p| p.0).collect(),
    })
}

/// Mean slice score; fake iff the mean reaches `threshold`.
pub fn video_verdict(video_id: &str, slices: &[SliceVerdict], threshold: f64) -> Result<VideoVerdict> {
    if slices.is_empty() {
        return Err(Error::NoSlices(video_id.to_string()));
    }
    let fake_score = slices.iter().map(|s| s.fake_score).sum::<f64>() / slices.len() as f64;
    Ok(VideoVerdict {
        video_id: video_id.to_string(),
        label: if fake_score >= threshold { Label::Fake } else { Label::Real },
        fake_score,
        n_slices: slices.len(),
    })
}

/// Slice, embed and vote for one video's raw frame features.
pub fn predict_video(
    ckpt: &Checkpoint,
    reference: &ReferenceSet,
    video_id: &str,
    features: ArrayView2<f32>,
    cfg: &InferenceConfig,
) -> Result<(VideoVerdict, Vec<SliceVerdict>)> {
    cfg.validate()?;
    let params: &SliceParams = &ckpt.header.slice_params;
    let slices = slice(features, params, video_id, None)?;
    let emb = embed_test(ckpt, &slices, None)?;
    let verdicts = emb
        .rows()
        .into_iter()
        .map(|row| knn_predict(row.as_slice().expect("standard layout"), reference, cfg.m_neighbors))
        .collect::<Result<Vec<_>>>()?;
    Ok((video_verdict(video_id, &verdicts, cfg.threshold)?, verdicts))
}

/// One JSON record per video.
pub fn write_predictions(path: &Path, verdicts: &[VideoVerdict]) -> Result<()> {
    let text: String = verdicts
        .iter()
        .map(|v| serde_json::to_string(v).expect("plain record") + "\n")
        .collect();
    artifact::write_atomic(path, text.as_bytes())
}

pub fn read_predictions(path: &Path) -> Result<Vec<VideoVerdict>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference(values: &[(f32, Label)]) -> ReferenceSet {
        ReferenceSet {
            embeddings: Array2::from_shape_vec((values.len(), 1), values.iter().map(|v| v.0).collect()).unwrap(),
            labels: values.iter().map(|v| v.1).collect(),
            video_ids: vec![String::new(); values.len()],
            start_frames: vec![0; values.len()],
            checkpoint_hash: String::new(),
            manifest_hash: String::new(),
        }
    }

    #[test]
    fn one_dimensional_example() {
        let r = reference(&[(0.0, Label::Real), (1.0, Label::Real), (10.0, Label::Fake)]);
        let v = knn_predict(&[0.5], &r, 3).unwrap();
        assert_eq!(v.label, Label::Real);
        assert!((v.fake_score - 1.0 / 3.0).abs() < 1e-15);
        // 0 and 1 tie at distance 0.5; lower index first
        assert_eq!(v.neighbors, vec![0, 1, 2]);
    }

    #[test]
    fn exact_match_with_one_neighbor() {
        let r = reference(&[(0.0, Label::Real), (3.0, Label::Fake)]);
        let v = knn_predict(&[3.0], &r, 1).unwrap();
        assert_eq!((v.label, v.fake_score), (Label::Fake, 1.0));
    }

    #[test]
    fn all_fake_reference() {
        let r = reference(&[(0.0, Label::Fake), (1.0, Label::Fake), (2.0, Label::Fake)]);
        for q in [-5.0, 0.3, 9.0] {
            let v = knn_predict(&[q], &r, 3).unwrap();
            assert_eq!((v.label, v.fake_score), (Label::Fake, 1.0));
        }
    }

    #[test]
    fn even_vote_goes_to_nearest() {
        let r = reference(&[(0.0, Label::Fake), (1.0, Label::Real), (5.0, Label::Real)]);
        let v = knn_predict(&[0.1], &r, 2).unwrap();
        assert_eq!(v.label, Label::Fake);
        assert_eq!(v.fake_score, 0.5);
    }

    #[test]
    fn guards() {
        let r = reference(&[(0.0, Label::Real)]);
        assert!(matches!(knn_predict(&[0.0], &r, 2), Err(Error::MTooLarge { m: 2, n: 1 })));
        assert!(matches!(knn_predict(&[0.0], &reference(&[]), 1), Err(Error::EmptyReference)));
        assert!(matches!(video_verdict("v", &[], 0.5), Err(Error::NoSlices(_))));
    }

    fn sv(score: f64) -> SliceVerdict {
        SliceVerdict {
            label: if score >= 0.5 { Label::Fake } else { Label::Real },
            fake_score: score,
            neighbors: vec![],
            distances: vec![],
        }
    }

    #[test]
    fn video_aggregation() {
        let v = video_verdict("v", &[sv(1.0 / 3.0), sv(2.0 / 3.0), sv(1.0)], 0.5).unwrap();
        assert!((v.fake_score - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(v.label, Label::Fake);
        let v = video_verdict("v", &[sv(0.0), sv(0.0)], 0.5).unwrap();
        assert_eq!((v.label, v.fake_score), (Label::Real, 0.0));
        let one = video_verdict("v", &[sv(0.6)], 0.5).unwrap();
        assert_eq!((one.label, one.fake_score, one.n_slices), (Label::Fake, 0.6, 1));
    }

    #[test]
    fn predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.jsonl");
        let v = vec![video_verdict("a", &[sv(0.2)], 0.5).unwrap()];
        write_predictions(&p, &v).unwrap();
        assert_eq!(read_predictions(&p).unwrap(), v);
    }
}
