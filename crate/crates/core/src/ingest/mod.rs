//! Face detection, cropping and landmark extraction.

pub mod backends;
pub mod video;

use std::path::Path;

use image::{imageops::FilterType, DynamicImage, GenericImageView};
use log::warn;
use serde::{Deserialize, Serialize};

pub use backends::{BackendRegistry, BackendVersions};
pub use video::{load_video, FrameSource};

use crate::artifact::{self, ContainerKind};
use crate::{Error, Result};

pub const LANDMARK_COUNT: usize = 478;
pub const CROP_SIZE: u32 = 224;
/// Smallest accepted face side, in pixels.
pub const DEFAULT_MIN_FACE: u32 = 120;

/// A decoded video: N ≥ 1 frames sharing one size and color layout.
#[derive(Debug, Clone)]
pub struct VideoFrames {
    pub video_id: String,
    pub fps: f32,
    frames: Vec<DynamicImage>,
}

impl VideoFrames {
    pub fn new(video_id: impl Into<String>, fps: f32, frames: Vec<DynamicImage>) -> Result<Self> {
        let video_id = video_id.into();
        let first = frames.first().ok_or_else(|| Error::DecodeError {
            path: video_id.clone().into(),
            reason: "video has no frames".into(),
        })?;
        let (w, h, color) = (first.width(), first.height(), first.color());
        if let Some(i) = frames
            .iter()
            .position(|f| f.width() != w || f.height() != h || f.color() != color)
        {
            return Err(Error::DecodeError {
                path: video_id.into(),
                reason: format!("frame {i} differs in size or channels from frame 0"),
            });
        }
        Ok(Self { video_id, fps, frames })
    }

    pub fn frames(&self) -> &[DynamicImage] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (u32, u32) {
        self.frames[0].dimensions()
    }
}

/// Detected face rectangle in pixel coordinates (top-left origin).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: f32,
    pub y: f32,
    pub width: f32,
    pub height: f32,
    pub confidence: f32,
}

impl FaceBox {
    pub fn new(x: f32, y: f32, width: f32, height: f32, confidence: f32) -> Self {
        Self {
            x,
            y,
            width,
            height,
            confidence,
        }
    }

    pub fn area(&self) -> f64 {
        self.width as f64 * self.height as f64
    }

    /// Intersect with the frame; `None` if nothing (or a non-finite box) remains.
    pub fn clamp_to(&self, frame_w: u32, frame_h: u32) -> Option<FaceBox> {
        if ![self.x, self.y, self.width, self.height].iter().all(|v| v.is_finite()) {
            return None;
        }
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.width).min(frame_w as f32);
        let y1 = (self.y + self.height).min(frame_h as f32);
        (x1 > x0 && y1 > y0).then(|| FaceBox::new(x0, y0, x1 - x0, y1 - y0, self.confidence.clamp(0.0, 1.0)))
    }
}

/// Per-frame primary face plus the surviving candidates it was chosen from.
#[derive(Debug, Clone, Default)]
pub struct FaceTrack {
    pub boxes: Vec<Option<FaceBox>>,
    pub candidates: Vec<Vec<FaceBox>>,
}

impl FaceTrack {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Fraction of frames holding a face.
    pub fn coverage(&self) -> f64 {
        if self.boxes.is_empty() {
            return 0.0;
        }
        self.boxes.iter().filter(|b| b.is_some()).count() as f64 / self.boxes.len() as f64
    }
}

/// 224×224 face crops and the frame index each came from.
#[derive(Debug, Clone, Default)]
pub struct FaceFrames {
    pub crops: Vec<DynamicImage>,
    pub source_indices: Vec<usize>,
}

impl FaceFrames {
    pub fn len(&self) -> usize {
        self.crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }

    pub fn push(&mut self, crop: DynamicImage, source: usize) {
        debug_assert_eq!(crop.dimensions(), (CROP_SIZE, CROP_SIZE));
        self.crops.push(crop);
        self.source_indices.push(source);
    }

    /// Keep only the crops whose source index is listed (in order).
    pub fn retain_sources(&mut self, keep: &[usize]) {
        let mut crops = Vec::with_capacity(keep.len());
        let mut idx = Vec::with_capacity(keep.len());
        let mut k = keep.iter().peekable();
        for (crop, src) in self.crops.drain(..).zip(self.source_indices.drain(..)) {
            if k.peek() == Some(&&src) {
                k.next();
                crops.push(crop);
                idx.push(src);
            }
        }
        self.crops = crops;
        self.source_indices = idx;
    }
}

/// The 478 (x, y, z) landmarks of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkFrame {
    points: Vec<[f32; 3]>,
}

impl LandmarkFrame {
    pub fn new(points: Vec<[f32; 3]>) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(Error::DimensionMismatch {
                what: "landmarks",
                expected: LANDMARK_COUNT,
                got: points.len(),
            });
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("landmark coordinates".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f32; 3]] {
        &self.points
    }

    pub fn point(&self, index: usize) -> Result<[f32; 3]> {
        self.points.get(index).copied().ok_or(Error::IndexOutOfRange {
            index,
            len: self.points.len(),
        })
    }

    pub fn flat(&self) -> impl Iterator<Item = f32> + '_ {
        self.points.iter().flatten().copied()
    }
}

/// Landmarks for the frames where extraction succeeded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LandmarkSequence {
    pub frames: Vec<LandmarkFrame>,
    pub source_indices: Vec<usize>,
    pub dropped: Vec<usize>,
}

impl LandmarkSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Remove candidates narrower or shorter than `min_face`.
pub fn filter_min_size(boxes: &[FaceBox], min_face: u32) -> Vec<FaceBox> {
    let min = min_face as f32;
    boxes
        .iter()
        .filter(|b| b.width >= min && b.height >= min)
        .copied()
        .collect()
}

/// Largest area wins; equal areas go to higher confidence, then lower index.
pub fn select_primary_face(candidates: &[FaceBox]) -> Result<FaceBox> {
    let mut best: Option<&FaceBox> = None;
    for cand in candidates {
        best = match best {
            None => Some(cand),
            Some(b) => {
                let better = cand.area() > b.area() || (cand.area() == b.area() && cand.confidence > b.confidence);
                Some(if better { cand } else { b })
            }
        };
    }
    best.copied().ok_or(Error::EmptyCandidates)
}

/// Detect, clamp and size-filter candidates for one frame.
pub fn detect_frame(
    frame: &DynamicImage,
    min_face: u32,
    detector: &backends::Slot<dyn backends::FaceDetector>,
) -> Result<Vec<FaceBox>> {
    let (w, h) = frame.dimensions();
    let raw = detector.call(|d| d.detect(frame))?;
    let clamped: Vec<FaceBox> = raw.iter().filter_map(|b| b.clamp_to(w, h)).collect();
    Ok(filter_min_size(&clamped, min_face))
}

pub fn detect_faces(video: &VideoFrames, min_face: u32, registry: &BackendRegistry) -> Result<FaceTrack> {
    if min_face == 0 {
        return Err(Error::InvalidConfig("min_face must be at least 1".into()));
    }
    let detector = registry.detector()?;
    let mut track = FaceTrack::default();
    for frame in video.frames() {
        let survivors = detect_frame(frame, min_face, detector)?;
        track.boxes.push(select_primary_face(&survivors).ok());
        track.candidates.push(survivors);
    }
    Ok(track)
}

/// Square region around a box: the shorter side is padded symmetrically to
/// match the longer one. Returns integer `(left, top, side)`; the region may
/// extend past the frame.
pub fn square_region(b: &FaceBox) -> (i64, i64, u32) {
    let side = b.width.max(b.height).round().max(1.0);
    let cx = b.x + b.width / 2.0;
    let cy = b.y + b.height / 2.0;
    let left = (cx - side / 2.0).round() as i64;
    let top = (cy - side / 2.0).round() as i64;
    (left, top, side as u32)
}

/// Cut the square region around `b` (zero-filled outside the frame) and
/// resize it to 224×224.
pub fn crop_face(frame: &DynamicImage, b: &FaceBox) -> DynamicImage {
    let (left, top, side) = square_region(b);
    let (fw, fh) = frame.dimensions();
    let inside = left >= 0 && top >= 0 && left + side as i64 <= fw as i64 && top + side as i64 <= fh as i64;
    let square = if inside {
        frame.crop_imm(left as u32, top as u32, side, side)
    } else {
        let mut canvas = blank_like(frame, side, side);
        image::imageops::overlay(&mut canvas, frame, -left, -top);
        canvas
    };
    if square.dimensions() == (CROP_SIZE, CROP_SIZE) {
        square
    } else {
        square.resize_exact(CROP_SIZE, CROP_SIZE, FilterType::Triangle)
    }
}

fn blank_like(frame: &DynamicImage, w: u32, h: u32) -> DynamicImage {
    match frame {
        DynamicImage::ImageLuma8(_) => DynamicImage::new_luma8(w, h),
        DynamicImage::ImageLumaA8(_) => DynamicImage::new_luma_a8(w, h),
        DynamicImage::ImageRgba8(_) => DynamicImage::new_rgba8(w, h),
        DynamicImage::ImageRgb32F(_) => DynamicImage::new_rgb32f(w, h),
        _ => DynamicImage::new_rgb8(w, h),
    }
}

pub fn crop_and_resize(video: &VideoFrames, track: &FaceTrack) -> Result<FaceFrames> {
    if track.len() != video.len() {
        return Err(Error::LengthMismatch(format!(
            "face track has {} entries for {} frames",
            track.len(),
            video.len()
        )));
    }
    let mut out = FaceFrames::default();
    for (i, (frame, b)) in video.frames().iter().zip(&track.boxes).enumerate() {
        if let Some(b) = b {
            out.push(crop_face(frame, b), i);
        }
    }
    Ok(out)
}

/// Landmarks for a single crop, validated (478 points, all finite).
pub fn landmarks_for_crop(
    crop: &DynamicImage,
    extractor: &backends::Slot<dyn backends::LandmarkExtractor>,
) -> Result<LandmarkFrame> {
    let points = extractor.call(|e| e.landmarks(crop))?;
    LandmarkFrame::new(points)
}

/// One landmark frame per crop; crops where the backend fails or returns
/// invalid points are dropped and their source indices recorded.
pub fn extract_landmarks(faces: &FaceFrames, registry: &BackendRegistry) -> Result<LandmarkSequence> {
    let extractor = registry.landmarks()?;
    let mut seq = LandmarkSequence::default();
    for (crop, &src) in faces.crops.iter().zip(&faces.source_indices) {
        match landmarks_for_crop(crop, extractor) {
            Ok(lm) => {
                seq.frames.push(lm);
                seq.source_indices.push(src);
            }
            Err(e) => {
                warn!("dropping frame {src}: landmark extraction failed: {e}");
                seq.dropped.push(src);
            }
        }
    }
    Ok(seq)
}

/// Metadata stored next to a landmark cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkCacheMeta {
    pub video_id: String,
    pub source_indices: Vec<usize>,
    pub backends: BackendVersions,
}

pub fn write_landmark_cache(path: &Path, seq: &LandmarkSequence, meta: &LandmarkCacheMeta) -> Result<()> {
    let data: Vec<f32> = seq.frames.iter().flat_map(|f| f.flat()).collect();
    artifact::write_container(path, ContainerKind::Landmarks, &[seq.len(), LANDMARK_COUNT, 3], &data)?;
    artifact::write_json(&artifact::sidecar_path(path), meta)
}

pub fn read_landmark_cache(path: &Path) -> Result<(LandmarkSequence, LandmarkCacheMeta)> {
    let (shape, data) = artifact::read_container(path, ContainerKind::Landmarks)?;
    if shape.len() != 3 || shape[1] != LANDMARK_COUNT || shape[2] != 3 {
        return Err(Error::CorruptCache {
            path: path.to_path_buf(),
            reason: format!("landmark cache shape {shape:?}, expected [n, 478, 3]"),
        });
    }
    let meta: LandmarkCacheMeta = artifact::read_json(&artifact::sidecar_path(path))?;
    if meta.source_indices.len() != shape[0] {
        return Err(Error::CorruptCache {
            path: path.to_path_buf(),
            reason: "sidecar source indices do not match frame count".into(),
        });
    }
    let frames = data
        .chunks_exact(LANDMARK_COUNT * 3)
        .map(|c| LandmarkFrame::new(c.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        LandmarkSequence {
            frames,
            source_indices: meta.source_indices.clone(),
            dropped: Vec::new(),
        },
        meta,
    ))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::backends::{FixedBoxDetector, GridLandmarks, LandmarkExtractor, Backend};
    use super::*;

    fn b(w: f32, h: f32) -> FaceBox {
        FaceBox::new(0.0, 0.0, w, h, 0.5)
    }

    #[test]
    fn min_size_gate() {
        let kept = filter_min_size(&[b(100.0, 100.0), b(150.0, 160.0)], 120);
        assert_eq!(kept, vec![b(150.0, 160.0)]);
        assert_eq!(filter_min_size(&[b(200.0, 200.0)], 120), vec![b(200.0, 200.0)]);
        let kept = filter_min_size(&[b(30.0, 30.0), b(130.0, 140.0), b(121.0, 121.0)], 120);
        assert_eq!(kept, vec![b(130.0, 140.0), b(121.0, 121.0)]);
    }

    #[test]
    fn detect_faces_over_three_frames() {
        let reg = BackendRegistry::new().with_face_detector(Arc::new(FixedBoxDetector {
            boxes: vec![b(30.0, 30.0), b(130.0, 140.0), b(121.0, 121.0)],
        }));
        let frames = vec![DynamicImage::new_rgb8(300, 300); 3];
        let video = VideoFrames::new("v", 30.0, frames).unwrap();
        let track = detect_faces(&video, 120, &reg).unwrap();
        assert_eq!(track.len(), 3);
        for (cands, primary) in track.candidates.iter().zip(&track.boxes) {
            assert_eq!(cands, &vec![b(130.0, 140.0), b(121.0, 121.0)]);
            assert_eq!(primary, &Some(b(130.0, 140.0)));
        }
        assert_eq!(track.coverage(), 1.0);
    }

    #[test]
    fn detect_without_backend_fails() {
        let video = VideoFrames::new("v", 30.0, vec![DynamicImage::new_rgb8(8, 8)]).unwrap();
        assert!(matches!(
            detect_faces(&video, 120, &BackendRegistry::new()),
            Err(Error::BackendUnavailable(_))
        ));
    }

    #[test]
    fn primary_face_selection() {
        assert_eq!(select_primary_face(&[b(10.0, 10.0), b(50.0, 60.0)]).unwrap(), b(50.0, 60.0));
        assert_eq!(select_primary_face(&[b(42.0, 42.0)]).unwrap(), b(42.0, 42.0));
        let hi = FaceBox::new(0.0, 0.0, 30.0, 40.0, 0.9);
        let lo = FaceBox::new(5.0, 5.0, 40.0, 30.0, 0.5);
        assert_eq!(select_primary_face(&[hi, lo]).unwrap(), hi);
        assert_eq!(select_primary_face(&[lo, hi]).unwrap(), hi);
        // full tie: first index wins
        let twin = FaceBox::new(9.0, 9.0, 40.0, 30.0, 0.9);
        assert_eq!(select_primary_face(&[hi, twin]).unwrap(), hi);
        assert!(matches!(select_primary_face(&[]), Err(Error::EmptyCandidates)));
    }

    #[test]
    fn square_padding_rule() {
        // 100 wide, 120 tall: pad 10 px on each side horizontally
        let (left, top, side) = square_region(&FaceBox::new(50.0, 40.0, 100.0, 120.0, 1.0));
        assert_eq!((left, top, side), (40, 40, 120));
        let frame = DynamicImage::new_rgb8(400, 400);
        let crop = crop_face(&frame, &FaceBox::new(50.0, 40.0, 100.0, 120.0, 1.0));
        assert_eq!(crop.dimensions(), (224, 224));
    }

    #[test]
    fn exact_224_box_is_passthrough() {
        let mut frame = image::RgbImage::new(300, 300);
        for (x, y, p) in frame.enumerate_pixels_mut() {
            *p = image::Rgb([(x % 256) as u8, (y % 256) as u8, 7]);
        }
        let frame = DynamicImage::ImageRgb8(frame);
        let crop = crop_face(&frame, &FaceBox::new(10.0, 20.0, 224.0, 224.0, 1.0));
        assert_eq!(crop.dimensions(), (224, 224));
        assert_eq!(crop.get_pixel(0, 0), frame.get_pixel(10, 20));
        assert_eq!(crop.get_pixel(223, 223), frame.get_pixel(233, 243));
    }

    #[test]
    fn out_of_frame_region_is_zero_padded() {
        let frame = DynamicImage::ImageRgb8(image::RgbImage::from_pixel(100, 100, image::Rgb([255, 255, 255])));
        // tall box at the left edge: the padded square pokes out of the frame
        let crop = crop_face(&frame, &FaceBox::new(0.0, 0.0, 50.0, 100.0, 1.0));
        assert_eq!(crop.dimensions(), (224, 224));
        assert_eq!(crop.get_pixel(0, 112).0[0], 0);
        assert_eq!(crop.get_pixel(223, 112).0[0], 255);
    }

    #[test]
    fn crops_only_frames_with_boxes() {
        let video = VideoFrames::new("v", 30.0, vec![DynamicImage::new_rgb8(250, 250); 10]).unwrap();
        let mut track = FaceTrack::default();
        for i in 0..10 {
            track.boxes.push((i != 3 && i != 7).then(|| b(130.0, 130.0)));
            track.candidates.push(vec![]);
        }
        let faces = crop_and_resize(&video, &track).unwrap();
        assert_eq!(faces.len(), 8);
        assert_eq!(faces.source_indices, vec![0, 1, 2, 4, 5, 6, 8, 9]);
        assert!(faces.crops.iter().all(|c| c.dimensions() == (224, 224)));
    }

    struct NanOnOdd(std::sync::atomic::AtomicUsize);
    impl Backend for NanOnOdd {
        fn name(&self) -> &str {
            "nan-on-odd"
        }
        fn version(&self) -> &str {
            "0"
        }
    }
    impl LandmarkExtractor for NanOnOdd {
        fn landmarks(&self, _crop: &DynamicImage) -> Result<Vec<[f32; 3]>> {
            let n = self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            let mut g = GridLandmarks::grid();
            if n % 2 == 1 {
                g[5][1] = f32::NAN;
            }
            Ok(g)
        }
    }

    #[test]
    fn landmark_extraction_drops_nan_frames() {
        let mut faces = FaceFrames::default();
        for i in 0..4 {
            faces.push(DynamicImage::new_rgb8(224, 224), i * 2);
        }
        let reg = BackendRegistry::new().with_landmark_extractor(Arc::new(NanOnOdd(Default::default())));
        let seq = extract_landmarks(&faces, &reg).unwrap();
        assert_eq!(seq.source_indices, vec![0, 4]);
        assert_eq!(seq.dropped, vec![2, 6]);
        assert!(seq.frames.iter().all(|f| f.points().len() == LANDMARK_COUNT));

        let empty = extract_landmarks(&FaceFrames::default(), &BackendRegistry::builtin()).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn stub_landmarks_are_identical_per_crop() {
        let mut faces = FaceFrames::default();
        faces.push(DynamicImage::new_rgb8(224, 224), 0);
        faces.push(DynamicImage::new_luma8(224, 224), 1);
        let seq = extract_landmarks(&faces, &BackendRegistry::builtin()).unwrap();
        assert_eq!(seq.frames[0], seq.frames[1]);
    }

    #[test]
    fn landmark_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.lm.dbag");
        let seq = LandmarkSequence {
            frames: vec![LandmarkFrame::new(GridLandmarks::grid()).unwrap(); 3],
            source_indices: vec![0, 2, 5],
            dropped: vec![],
        };
        let meta = LandmarkCacheMeta {
            video_id: "v".into(),
            source_indices: seq.source_indices.clone(),
            backends: BackendRegistry::builtin().versions(),
        };
        write_landmark_cache(&path, &seq, &meta).unwrap();
        let (back, back_meta) = read_landmark_cache(&path).unwrap();
        assert_eq!(back, seq);
        assert_eq!(back_meta, meta);
    }

    #[test]
    fn landmark_frame_validation() {
        assert!(LandmarkFrame::new(vec![[0.0; 3]; 477]).is_err());
        let mut pts = vec![[0.0; 3]; 478];
        pts[0][2] = f32::INFINITY;
        assert!(LandmarkFrame::new(pts).is_err());
    }

    #[test]
    fn video_frames_validate_shape() {
        assert!(VideoFrames::new("v", 30.0, vec![]).is_err());
        let mixed = vec![DynamicImage::new_rgb8(8, 8), DynamicImage::new_rgb8(9, 8)];
        assert!(VideoFrames::new("v", 30.0, mixed).is_err());
    }
}
