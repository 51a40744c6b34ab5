//! Outer-face geometric features.
//!
//! The face oval is split into an upper region `Q` and a lower region `P`.
//! Each region's central point is the centroid of its landmarks. The top
//! block holds the distances from the lower centroid to an 18-landmark window
//! of the upper region; the bottom block holds the distances from the upper
//! centroid to an 18-landmark window of the lower region. Together they form
//! a 36-value vector per frame.
//!
//! Windows address positions in the region's ordered index list: the window
//! starts `n` positions before the list's median position (`len / 2`) and
//! spans 18 entries.

use std::collections::HashSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::ingest::{LandmarkFrame, LANDMARK_COUNT};
use crate::{Error, Result};

pub const SIDE_DIM: usize = 18;
pub const GEOMETRY_DIM: usize = 2 * SIDE_DIM;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    /// Sum of absolute coordinate differences.
    #[default]
    L1,
    L2,
}

/// Which landmarks form the upper and lower outer-face regions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    /// Lower outer-face region, in ring order.
    pub p_indices: Vec<usize>,
    /// Upper outer-face region, in ring order.
    pub q_indices: Vec<usize>,
    /// Window offset before the median position.
    pub n: usize,
    #[serde(default)]
    pub metric: DistanceMetric,
}

/// Face-oval ring of the 478-point mesh, starting at the forehead top and
/// running clockwise in image space.
const FACE_OVAL: [usize; 36] = [
    10, 338, 297, 332, 284, 251, 389, 356, 454, 323, 361, 288, 397, 365, 379, 378, 400, 377, 152, 148, 176, 149, 150,
    136, 172, 58, 132, 93, 234, 127, 162, 21, 54, 103, 67, 109,
];

impl Default for RegionSpec {
    /// The face oval split at the horizontal midline: 18 upper landmarks
    /// centered on the forehead top (10) and 18 lower ones centered on the
    /// chin (152).
    fn default() -> Self {
        let q_indices: Vec<usize> = FACE_OVAL[27..].iter().chain(&FACE_OVAL[..9]).copied().collect();
        let p_indices = FACE_OVAL[9..27].to_vec();
        Self {
            name: "face-oval-v1".into(),
            p_indices,
            q_indices,
            n: 9,
            metric: DistanceMetric::L1,
        }
    }
}

impl RegionSpec {
    fn window_start(list: &[usize], n: usize) -> Option<usize> {
        let center = list.len() / 2;
        let start = center.checked_sub(n)?;
        (start + SIDE_DIM <= list.len()).then_some(start)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidRegionSpec(msg));
        if self.p_indices.is_empty() || self.q_indices.is_empty() {
            return invalid("P and Q must be non-empty".into());
        }
        for &i in self.p_indices.iter().chain(&self.q_indices) {
            if i >= LANDMARK_COUNT {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: LANDMARK_COUNT,
                });
            }
        }
        let p: HashSet<_> = self.p_indices.iter().collect();
        let q: HashSet<_> = self.q_indices.iter().collect();
        if p.len() != self.p_indices.len() || q.len() != self.q_indices.len() {
            return invalid("duplicate landmark index within a region".into());
        }
        if !p.is_disjoint(&q) {
            return invalid("P and Q overlap".into());
        }
        for (side, list) in [("P", &self.p_indices), ("Q", &self.q_indices)] {
            if Self::window_start(list, self.n).is_none() {
                return invalid(format!(
                    "{side} has {} landmarks; an 18-wide window starting {} before position {} does not fit",
                    list.len(),
                    self.n,
                    list.len() / 2
                ));
            }
        }
        Ok(())
    }

    /// Landmark indices whose distance to the lower centroid forms the top block.
    pub fn top_window(&self) -> &[usize] {
        let s = Self::window_start(&self.q_indices, self.n).expect("validated spec");
        &self.q_indices[s..s + SIDE_DIM]
    }

    /// Landmark indices whose distance to the upper centroid forms the bottom block.
    pub fn bottom_window(&self) -> &[usize] {
        let s = Self::window_start(&self.p_indices, self.n).expect("validated spec");
        &self.p_indices[s..s + SIDE_DIM]
    }

    pub fn hash(&self) -> String {
        artifact::hash_json(self)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("region spec serializes")
    }
}

/// Per-frame geometric descriptor: 18 top then 18 bottom distances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricVector {
    pub g_top: [f32; SIDE_DIM],
    pub g_bottom: [f32; SIDE_DIM],
}

impl GeometricVector {
    pub fn to_vec(&self) -> Vec<f32> {
        self.g_top.iter().chain(&self.g_bottom).copied().collect()
    }
}

/// Exact-sum form of a region: centroid = sum / count. Keeping the sum
/// instead of dividing up front makes centroid differences translation
/// invariant bit-for-bit whenever the coordinate sums are exact.
struct Region {
    sum: [f64; 3],
    count: f64,
}

impl Region {
    fn of(lm: &LandmarkFrame, indices: &[usize]) -> Result<Self> {
        let mut sum = [0.0f64; 3];
        for &i in indices {
            let p = lm.point(i)?;
            for a in 0..3 {
                sum[a] += p[a] as f64;
            }
        }
        Ok(Self {
            sum,
            count: indices.len() as f64,
        })
    }

    fn centroid(&self) -> [f64; 3] {
        self.sum.map(|s| s / self.count)
    }

    fn distance_to(&self, p: [f32; 3], metric: DistanceMetric) -> f64 {
        let d = [0, 1, 2].map(|a| self.count * p[a] as f64 - self.sum[a]);
        let scaled = match metric {
            DistanceMetric::L1 => d.iter().map(|v| v.abs()).sum::<f64>(),
            DistanceMetric::L2 => d.iter().map(|v| v * v).sum::<f64>().sqrt(),
        };
        scaled / self.count
    }
}

/// Centroids of the upper (`T`) and lower (`B`) regions.
pub fn region_centers(lm: &LandmarkFrame, spec: &RegionSpec) -> Result<([f64; 3], [f64; 3])> {
    let top = Region::of(lm, &spec.q_indices)?;
    let bottom = Region::of(lm, &spec.p_indices)?;
    Ok((top.centroid(), bottom.centroid()))
}

pub fn geometric_features_frame(lm: &LandmarkFrame, spec: &RegionSpec) -> Result<GeometricVector> {
    spec.validate()?;
    let top = Region::of(lm, &spec.q_indices)?;
    let bottom = Region::of(lm, &spec.p_indices)?;
    let mut out = GeometricVector {
        g_top: [0.0; SIDE_DIM],
        g_bottom: [0.0; SIDE_DIM],
    };
    for (k, &idx) in spec.top_window().iter().enumerate() {
        out.g_top[k] = bottom.distance_to(lm.point(idx)?, spec.metric) as f32;
    }
    for (k, &idx) in spec.bottom_window().iter().enumerate() {
        out.g_bottom[k] = top.distance_to(lm.point(idx)?, spec.metric) as f32;
    }
    Ok(out)
}

/// One 36-value row per frame.
pub fn geometric_features_sequence(lms: &[LandmarkFrame], spec: &RegionSpec) -> Result<Array2<f32>> {
    spec.validate()?;
    let mut out = Array2::zeros((lms.len(), GEOMETRY_DIM));
    for (t, lm) in lms.iter().enumerate() {
        let row = geometric_features_frame(lm, spec)?.to_vec();
        out.row_mut(t).assign(&ndarray::ArrayView1::from(&row));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_with(f: impl Fn(usize) -> [f32; 3]) -> LandmarkFrame {
        LandmarkFrame::new((0..LANDMARK_COUNT).map(f).collect()).unwrap()
    }

    #[test]
    fn default_spec_is_valid_face_oval_split() {
        let spec = RegionSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.p_indices.len(), 18);
        assert_eq!(spec.q_indices.len(), 18);
        assert_eq!(spec.q_indices[9], 10);
        assert_eq!(spec.p_indices[9], 152);
        assert_eq!(spec.top_window(), spec.q_indices.as_slice());
    }

    #[test]
    fn centroid_of_identical_points() {
        let spec = RegionSpec::default();
        let lm = frame_with(|_| [1.0, 2.0, 3.0]);
        let (t, b) = region_centers(&lm, &spec).unwrap();
        assert_eq!(t, [1.0, 2.0, 3.0]);
        assert_eq!(b, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn centroid_midpoint() {
        let mut spec = RegionSpec::default();
        spec.q_indices = vec![0, 1];
        let lm = frame_with(|i| if i == 1 { [2.0, 0.0, 0.0] } else { [0.0; 3] });
        let (t, _) = region_centers(&lm, &spec).unwrap();
        assert_eq!(t, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn all_origin_gives_zeros() {
        let v = geometric_features_frame(&frame_with(|_| [0.0; 3]), &RegionSpec::default()).unwrap();
        assert_eq!(v.to_vec(), vec![0.0; GEOMETRY_DIM]);
    }

    #[test]
    fn translation_by_integer_offset_is_exact() {
        let spec = RegionSpec::default();
        let lm = frame_with(|i| [(i % 17) as f32 / 64.0, (i % 23) as f32 / 32.0, (i % 5) as f32 / 128.0]);
        let moved = frame_with(|i| {
            let p = lm.points()[i];
            [p[0] + 5.0, p[1] - 3.0, p[2] + 1.0]
        });
        let a = geometric_features_frame(&lm, &spec).unwrap();
        let b = geometric_features_frame(&moved, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn toy_spec_matches_double_loop() {
        // 20-landmark regions at the low end of the index range
        let spec = RegionSpec {
            name: "toy".into(),
            p_indices: (0..20).collect(),
            q_indices: (20..40).collect(),
            n: 9,
            metric: DistanceMetric::L1,
        };
        let lm = frame_with(|i| [(i as f32 * 0.37).sin(), (i as f32 * 0.11).cos(), i as f32 * 0.01]);
        let got = geometric_features_frame(&lm, &spec).unwrap().to_vec();
        // window = positions 1..19 of each list
        let mean = |r: std::ops::Range<usize>| {
            let mut c = [0.0f64; 3];
            for i in r.clone() {
                for a in 0..3 {
                    c[a] += lm.points()[i][a] as f64;
                }
            }
            c.map(|v| v / r.len() as f64)
        };
        let (b, t) = (mean(0..20), mean(20..40));
        let mut want = Vec::new();
        for idx in 21..39 {
            want.push((0..3).map(|a| (b[a] - lm.points()[idx][a] as f64).abs()).sum::<f64>());
        }
        for idx in 1..19 {
            want.push((0..3).map(|a| (t[a] - lm.points()[idx][a] as f64).abs()).sum::<f64>());
        }
        for (g, w) in got.iter().zip(&want) {
            assert!((*g as f64 - w).abs() <= 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn l2_variant_is_euclidean() {
        let mut spec = RegionSpec::default();
        spec.metric = DistanceMetric::L2;
        let lm = frame_with(|i| if spec.q_indices.contains(&i) { [3.0, 4.0, 0.0] } else { [0.0; 3] });
        let v = geometric_features_frame(&lm, &spec).unwrap();
        assert!(v.g_top.iter().all(|&d| (d - 5.0).abs() < 1e-6));
        assert!(v.g_bottom.iter().all(|&d| (d - 5.0).abs() < 1e-6));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = RegionSpec::default();
        s.p_indices.push(s.q_indices[0]);
        assert!(matches!(s.validate(), Err(Error::InvalidRegionSpec(_))));
        let mut s = RegionSpec::default();
        s.q_indices[0] = 478;
        assert!(matches!(s.validate(), Err(Error::IndexOutOfRange { .. })));
        let mut s = RegionSpec::default();
        s.p_indices.truncate(17);
        assert!(s.validate().is_err());
        let mut s = RegionSpec::default();
        s.n = 10;
        assert!(s.validate().is_err());
    }

    #[test]
    fn sequence_rows_match_frames() {
        let spec = RegionSpec::default();
        let lm = frame_with(|i| [i as f32 / 478.0, 0.5, 0.0]);
        let m = geometric_features_sequence(&[lm.clone(), lm.clone(), lm.clone()], &spec).unwrap();
        assert_eq!(m.dim(), (3, 36));
        let row = geometric_features_frame(&lm, &spec).unwrap().to_vec();
        for r in m.rows() {
            assert_eq!(r.to_vec(), row);
        }
    }

    #[test]
    fn toml_round_trip() {
        let spec = RegionSpec::default();
        assert_eq!(RegionSpec::from_toml(&spec.to_toml()).unwrap(), spec);
    }
}
