//! Frame files, video directories and preview images.
//!
//! Frame file (`.ctf`), all integers little-endian:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `CTFR`                   |
//! | 4      | 2    | version (`1`)                  |
//! | 6      | 2    | reserved, `0`                  |
//! | 8      | 4    | height                         |
//! | 12     | 4    | width                          |
//! | 16     | 4    | channels                       |
//! | 20     | 8*n  | `f64` values, row-major, channel fastest |
//!
//! A video directory holds `frame_NNNNN.ctf` files plus `manifest.json`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::frame::{FrameShape, LatentFrame};
use crate::temporal::{ClipPlan, Video};

pub const FRAME_MAGIC: &[u8; 4] = b"CTFR";
pub const FRAME_VERSION: u16 = 1;
pub const FRAME_HEADER_LEN: usize = 20;

pub fn encode_frame(frame: &LatentFrame) -> Vec<u8> {
    let s = frame.shape();
    let mut buf = Vec::with_capacity(FRAME_HEADER_LEN + 8 * s.len());
    buf.extend_from_slice(FRAME_MAGIC);
    buf.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    for d in [s.height, s.width, s.channels] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in frame.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_frame(bytes: &[u8], origin: &Path) -> Result<LatentFrame> {
    let bad = |reason: String| Error::format("frame", origin, reason);
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != FRAME_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FRAME_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let dim = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let shape = FrameShape::new(dim(8), dim(12), dim(16));
    if shape.is_empty() {
        return Err(bad(format!("empty shape {shape}")));
    }
    let payload = &bytes[FRAME_HEADER_LEN..];
    if payload.len() != 8 * shape.len() {
        return Err(bad(format!(
            "payload is {} bytes, {shape} needs {}",
            payload.len(),
            8 * shape.len()
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LatentFrame::from_vec(shape, values)
}

pub fn write_frame(frame: &LatentFrame, path: &Path) -> Result<()> {
    std::fs::write(path, encode_frame(frame)).map_err(|e| Error::io(path, e))
}

pub fn read_frame(path: &Path) -> Result<LatentFrame> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_frame(&bytes, path)
}

/// 8-bit grayscale rendering of the channel mean, mapping `[-1, 1]` onto
/// `[0, 255]` with clamping.
pub fn preview_pixels(frame: &LatentFrame) -> Vec<u8> {
    frame
        .channel_mean()
        .into_iter()
        .map(|m| (((m + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn write_preview(frame: &LatentFrame, path: &Path) -> Result<()> {
    let s = frame.shape();
    let img = image::GrayImage::from_raw(s.width as u32, s.height as u32, preview_pixels(frame))
        .expect("preview buffer matches frame size");
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// Writes `<stem>.ctf` and its `<stem>.png` preview into `dir`.
pub fn write_frame_with_preview(frame: &LatentFrame, dir: &Path, stem: &str) -> Result<PathBuf> {
    let path = dir.join(format!("{stem}.ctf"));
    write_frame(frame, &path)?;
    write_preview(frame, &dir.join(format!("{stem}.png")))?;
    Ok(path)
}

/// `manifest.json` of a video directory.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoManifest {
    pub format: String,
    pub version: u32,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stride: Option<usize>,
    pub clip_len: Option<usize>,
    pub clip_count: Option<usize>,
    pub files: Vec<String>,
}

pub const VIDEO_FORMAT: &str = "cotune-video";

pub fn frame_file_name(j: usize) -> String {
    format!("frame_{j:05}")
}

pub fn write_video(video: &Video, plan: Option<&ClipPlan>, dir: &Path) -> Result<VideoManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(video.len());
    for (j, f) in video.frames().iter().enumerate() {
        let stem = frame_file_name(j);
        write_frame_with_preview(f, dir, &stem)?;
        files.push(format!("{stem}.ctf"));
    }
    let s = video.shape();
    let manifest = VideoManifest {
        format: VIDEO_FORMAT.into(),
        version: 1,
        frames: video.len(),
        height: s.height,
        width: s.width,
        channels: s.channels,
        stride: plan.map(|p| p.stride()),
        clip_len: plan.map(|p| p.clip_len()),
        clip_count: plan.map(|p| p.count()),
        files,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_video(dir: &Path) -> Result<(Video, VideoManifest)> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: VideoManifest =
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", &path, e.to_string()))?;
    if manifest.format != VIDEO_FORMAT {
        return Err(Error::format(
            "manifest",
            &path,
            format!("unknown format `{}`", manifest.format),
        ));
    }
    if manifest.files.len() != manifest.frames {
        return Err(Error::format(
            "manifest",
            &path,
            format!("{} files listed for {} frames", manifest.files.len(), manifest.frames),
        ));
    }
    let expected = FrameShape::new(manifest.height, manifest.width, manifest.channels);
    let frames = manifest
        .files
        .iter()
        .map(|name| {
            let fp = dir.join(name);
            let f = read_frame(&fp)?;
            if f.shape() != expected {
                return Err(Error::format(
                    "frame",
                    &fp,
                    format!("shape {} != manifest {expected}", f.shape()),
                ));
            }
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Video::new(frames)?, manifest))
}
