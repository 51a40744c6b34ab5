//! Frame sources. A video is either a directory of still frames (sorted by
//! file name) or a single image. Container formats such as MP4 must be
//! decoded to frames beforehand, e.g. `ffmpeg -i clip.mp4 clip/%06d.png`.

use std::fs;
use std::path::{Path, PathBuf};

use image::DynamicImage;

use super::VideoFrames;
use crate::{Error, Result};

const FRAME_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Lazily decodes frames one at a time so long videos never sit in memory.
#[derive(Debug, Clone)]
pub struct FrameSource {
    path: PathBuf,
    files: Vec<PathBuf>,
}

fn has_frame_extension(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

impl FrameSource {
    pub fn open(path: &Path) -> Result<Self> {
        let decode_err = |reason: String| Error::DecodeError {
            path: path.to_path_buf(),
            reason,
        };
        let meta = fs::metadata(path).map_err(|e| decode_err(e.to_string()))?;
        let files = if meta.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| decode_err(e.to_string()))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && has_frame_extension(p))
                .collect();
            files.sort();
            files
        } else if has_frame_extension(path) {
            vec![path.to_path_buf()]
        } else {
            return Err(decode_err(
                "unsupported container; extract frames to a directory of PNG/JPEG images first".into(),
            ));
        };
        if files.is_empty() {
            return Err(decode_err("no frame images found".into()));
        }
        Ok(Self {
            path: path.to_path_buf(),
            files,
        })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Frame files in decode order.
    pub fn paths(&self) -> &[PathBuf] {
        &self.files
    }

    pub fn frames(&self) -> impl Iterator<Item = Result<DynamicImage>> + '_ {
        self.files.iter().map(|f| {
            image::open(f).map_err(|e| Error::DecodeError {
                path: f.clone(),
                reason: e.to_string(),
            })
        })
    }
}

/// Decode every frame of a video into memory.
pub fn load_video(path: &Path, video_id: &str, fps: f32) -> Result<VideoFrames> {
    let source = FrameSource::open(path)?;
    let frames = source.frames().collect::<Result<Vec<_>>>()?;
    VideoFrames::new(video_id, fps, frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_frames_are_sorted() {
        let dir = tempfile::tempdir().unwrap();
        for (name, shade) in [("b.png", 20u8), ("a.png", 10), ("c.png", 30)] {
            image::GrayImage::from_pixel(4, 3, image::Luma([shade]))
                .save(dir.path().join(name))
                .unwrap();
        }
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let video = load_video(dir.path(), "v", 25.0).unwrap();
        assert_eq!(video.len(), 3);
        let shades: Vec<u8> = video.frames().iter().map(|f| f.to_luma8().get_pixel(0, 0).0[0]).collect();
        assert_eq!(shades, vec![10, 20, 30]);
    }

    #[test]
    fn unreadable_inputs_are_decode_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mp4 = dir.path().join("clip.mp4");
        fs::write(&mp4, b"not a video").unwrap();
        assert!(matches!(FrameSource::open(&mp4), Err(Error::DecodeError { .. })));
        assert!(matches!(
            FrameSource::open(&dir.path().join("missing")),
            Err(Error::DecodeError { .. })
        ));
        let bad = dir.path().join("bad.png");
        fs::write(&bad, b"garbage").unwrap();
        assert!(matches!(load_video(&bad, "v", 30.0), Err(Error::DecodeError { .. })));
    }
}
