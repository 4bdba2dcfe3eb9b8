//! Foreground/background masks.
//!
//! The segmenter is pluggable through [`Segmenter`]; the built-in
//! [`ThresholdSegmenter`] marks pixels whose channel-mean intensity exceeds a
//! threshold. Masks can also be injected from disk.
//!
//! Mask file layout: one ASCII header line `CTMASK <width> <height> <layers>\n`
//! followed by `layers * width * height` bytes, each `0` or `1` (raw bytes,
//! not ASCII digits), row-major. Layer 1 is the foreground; an optional layer
//! 2 is the background and must be its exact complement.

use std::path::Path;

use crate::error::{Error, Result};
use crate::frame::{FrameShape, LatentFrame};

/// Binary `height x width` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl MaskGrid {
    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!("{height}x{width} mask"), bits.len()));
        }
        Ok(Self { height, width, bits })
    }

    pub fn filled(height: usize, width: usize, on: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![on; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn complement(&self) -> MaskGrid {
        MaskGrid {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// The mask broadcast over `channels` as a 0/1 frame.
    pub fn to_frame(&self, channels: usize) -> LatentFrame {
        let shape = FrameShape::new(self.height, self.width, channels);
        let values = self
            .bits
            .iter()
            .flat_map(|&b| std::iter::repeat_n(if b { 1.0 } else { 0.0 }, channels))
            .collect();
        LatentFrame::from_vec(shape, values).expect("mask frame shape")
    }

    fn check_spatial(&self, shape: FrameShape) -> Result<()> {
        if self.height != shape.height || self.width != shape.width {
            return Err(Error::shape(
                format!("{}x{} spatial grid", self.height, self.width),
                format!("{}x{}", shape.height, shape.width),
            ));
        }
        Ok(())
    }
}

/// Complementary foreground/background masks over one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    fg: MaskGrid,
    bg: MaskGrid,
}

impl MaskPair {
    /// Pair with the background derived as the foreground's complement.
    pub fn from_foreground(fg: MaskGrid) -> Self {
        let bg = fg.complement();
        Self { fg, bg }
    }

    /// Pair from both grids; rejects anything that is not an exact partition.
    pub fn new(fg: MaskGrid, bg: MaskGrid) -> Result<Self> {
        if fg.height != bg.height || fg.width != bg.width {
            return Err(Error::shape(
                format!("{}x{}", fg.height, fg.width),
                format!("{}x{}", bg.height, bg.width),
            ));
        }
        if fg.bits.iter().zip(&bg.bits).any(|(f, b)| f == b) {
            return Err(Error::invalid(
                "mask",
                "foreground and background do not partition the frame",
            ));
        }
        Ok(Self { fg, bg })
    }

    pub fn fg(&self) -> &MaskGrid {
        &self.fg
    }

    pub fn bg(&self) -> &MaskGrid {
        &self.bg
    }

    pub fn height(&self) -> usize {
        self.fg.height
    }

    pub fn width(&self) -> usize {
        self.fg.width
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = format!("CTMASK {} {} 2\n", self.width(), self.height()).into_bytes();
        buf.extend(self.fg.bits.iter().map(|&b| b as u8));
        buf.extend(self.bg.bits.iter().map(|&b| b as u8));
        buf
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format("mask", origin, reason);
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not ASCII".into()))?;
        let fields: Vec<&str> = header.split_ascii_whitespace().collect();
        let [magic, w, h, layers] = fields.as_slice() else {
            return Err(bad(format!("header `{header}` should have 4 fields")));
        };
        if *magic != "CTMASK" {
            return Err(bad(format!("bad magic `{magic}`")));
        }
        let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| bad(format!("bad {what} `{s}`")));
        let (width, height, layers) = (parse(w, "width")?, parse(h, "height")?, parse(layers, "layer count")?);
        if !(1..=2).contains(&layers) {
            return Err(bad(format!("layer count {layers} must be 1 or 2")));
        }
        let n = width * height;
        let payload = &bytes[nl + 1..];
        if payload.len() != layers * n {
            return Err(bad(format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                layers * n
            )));
        }
        let decode = |chunk: &[u8]| -> Result<Vec<bool>> {
            chunk
                .iter()
                .map(|&b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    other => Err(bad(format!("mask byte {other} is not 0 or 1"))),
                })
                .collect()
        };
        let fg = MaskGrid::from_bits(height, width, decode(&payload[..n])?)?;
        if layers == 1 {
            return Ok(Self::from_foreground(fg));
        }
        let bg = MaskGrid::from_bits(height, width, decode(&payload[n..])?)?;
        Self::new(fg, bg).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads a mask file; when `expected` is given the spatial size must match.
    pub fn load(path: &Path, expected: Option<FrameShape>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let pair = Self::from_bytes(&bytes, path)?;
        if let Some(shape) = expected {
            pair.fg
                .check_spatial(shape)
                .map_err(|e| Error::format("mask", path, e.to_string()))?;
        }
        Ok(pair)
    }
}

/// Produces a foreground/background split for a frame.
pub trait Segmenter {
    fn segment(&self, frame: &LatentFrame) -> Result<MaskPair>;
}

/// Foreground = pixels whose channel-mean intensity is strictly above
/// `threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdSegmenter {
    pub threshold: f64,
}

impl Segmenter for ThresholdSegmenter {
    fn segment(&self, frame: &LatentFrame) -> Result<MaskPair> {
        segment_threshold(frame, self.threshold)
    }
}

pub fn segment_threshold(frame: &LatentFrame, threshold: f64) -> Result<MaskPair> {
    if !frame.is_finite() {
        return Err(Error::NonFinite("cannot segment a non-finite frame".into()));
    }
    let shape = frame.shape();
    let bits = frame.channel_mean().into_iter().map(|m| m > threshold).collect();
    Ok(MaskPair::from_foreground(MaskGrid::from_bits(
        shape.height,
        shape.width,
        bits,
    )?))
}

/// Hadamard product with a spatial mask, broadcast across channels.
pub fn apply_mask(frame: &LatentFrame, mask: &MaskGrid) -> Result<LatentFrame> {
    mask.check_spatial(frame.shape())?;
    let c = frame.shape().channels;
    let mut out = frame.clone();
    for (px, &on) in out.values_mut().chunks_exact_mut(c).zip(&mask.bits) {
        if !on {
            px.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape(h: usize, w: usize, c: usize) -> FrameShape {
        FrameShape::new(h, w, c)
    }

    #[test]
    fn uniform_frame_is_all_background() {
        let f = LatentFrame::zeros(shape(4, 4, 2));
        let m = segment_threshold(&f, 0.5).unwrap();
        assert_eq!(m.fg().count(), 0);
        assert_eq!(m.bg().count(), 16);
    }

    #[test]
    fn left_half_is_foreground() {
        let mut f = LatentFrame::zeros(shape(3, 4, 1));
        for y in 0..3 {
            for x in 0..2 {
                f.set(y, x, 0, 1.0);
            }
        }
        let m = segment_threshold(&f, 0.5).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(m.fg().get(y, x), x < 2);
            }
        }
    }

    #[test]
    fn nonfinite_frame_is_rejected() {
        let mut f = LatentFrame::zeros(shape(2, 2, 1));
        f.set(0, 0, 0, f64::NAN);
        assert!(segment_threshold(&f, 0.0).is_err());
    }

    #[test]
    fn two_blob_count_matches_pixel_scan() {
        // two discs of intensity 1 on a 0 background, 3 channels with a small
        // per-channel offset
        let (h, w) = (16, 20);
        let mut f = LatentFrame::zeros(shape(h, w, 3));
        for y in 0..h {
            for x in 0..w {
                let d1 = (y as f64 - 4.0).powi(2) + (x as f64 - 5.0).powi(2);
                let d2 = (y as f64 - 11.0).powi(2) + (x as f64 - 14.0).powi(2);
                let v = if d1 <= 9.0 || d2 <= 16.0 { 1.0 } else { 0.0 };
                for c in 0..3 {
                    f.set(y, x, c, v + 0.1 * c as f64 - 0.1);
                }
            }
        }
        let mut scan = 0;
        for y in 0..h {
            for x in 0..w {
                let mean = (0..3).map(|c| f.get(y, x, c)).sum::<f64>() / 3.0;
                if mean > 0.5 {
                    scan += 1;
                }
            }
        }
        let m = segment_threshold(&f, 0.5).unwrap();
        assert_eq!(m.fg().count(), scan);
        assert_eq!(scan, 29 + 49);
    }

    #[test]
    fn mask_file_round_trip_and_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let fg = MaskGrid::from_bits(2, 3, vec![true, false, true, false, false, true]).unwrap();
        let pair = MaskPair::from_foreground(fg);
        let path = dir.path().join("m.ctmask");
        pair.save(&path).unwrap();
        assert_eq!(MaskPair::load(&path, Some(shape(2, 3, 4))).unwrap(), pair);
        assert!(MaskPair::load(&path, Some(shape(3, 2, 1))).is_err());

        // hand-written 2x2, foreground only
        let mut raw = b"CTMASK 2 2 1\n".to_vec();
        raw.extend([1, 0, 0, 1]);
        let m = MaskPair::from_bytes(&raw, Path::new("fixture")).unwrap();
        assert_eq!(m.fg().bits(), &[true, false, false, true]);
        assert_eq!(m.bg().bits(), &[false, true, true, false]);

        let mut ones = b"CTMASK 2 2 1\n".to_vec();
        ones.extend([1, 1, 1, 1]);
        let m = MaskPair::from_bytes(&ones, Path::new("fixture")).unwrap();
        assert_eq!(m.bg().count(), 0);
    }

    #[test]
    fn malformed_mask_files() {
        let p = Path::new("x");
        assert!(MaskPair::from_bytes(b"CTMASK 2 2 1", p).is_err());
        assert!(MaskPair::from_bytes(b"NOPE 1 1 1\n\x01", p).is_err());
        assert!(MaskPair::from_bytes(b"CTMASK 2 2 1\n\x01\x00\x01", p).is_err());
        assert!(MaskPair::from_bytes(b"CTMASK 1 1 1\n\x02", p).is_err());
        assert!(MaskPair::from_bytes(b"CTMASK 1 1 3\n\x01\x00\x01", p).is_err());
        // overlapping layers
        assert!(MaskPair::from_bytes(b"CTMASK 1 1 2\n\x01\x01", p).is_err());
    }

    #[test]
    fn apply_mask_identity_and_zero() {
        let f = LatentFrame::from_vec(shape(1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(apply_mask(&f, &MaskGrid::filled(1, 2, true)).unwrap(), f);
        assert_eq!(
            apply_mask(&f, &MaskGrid::filled(1, 2, false)).unwrap(),
            LatentFrame::zeros(f.shape())
        );
        assert!(apply_mask(&f, &MaskGrid::filled(2, 1, true)).is_err());
    }

    #[test]
    fn apply_mask_elementwise_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let f = LatentFrame::gaussian(shape(5, 4, 3), &mut rng);
        let bits: Vec<bool> = (0..20).map(|_| rng.random_bool(0.5)).collect();
        let m = MaskGrid::from_bits(5, 4, bits.clone()).unwrap();
        let out = apply_mask(&f, &m).unwrap();
        for y in 0..5 {
            for x in 0..4 {
                for c in 0..3 {
                    let k = if bits[y * 4 + x] { 1.0 } else { 0.0 };
                    assert_eq!(out.get(y, x, c), f.get(y, x, c) * k);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn masks_partition_every_frame(
            vals in proptest::collection::vec(-3.0f64..3.0, 24),
            threshold in -1.0f64..1.0,
        ) {
            let f = LatentFrame::from_vec(shape(2, 4, 3), vals).unwrap();
            let m = segment_threshold(&f, threshold).unwrap();
            let a = apply_mask(&f, m.fg()).unwrap();
            let b = apply_mask(&f, m.bg()).unwrap();
            let sum = a.lin_comb(1.0, &b, 1.0).unwrap();
            prop_assert_eq!(&sum, &f);
            prop_assert_eq!(apply_mask(&a, m.fg()).unwrap(), a);
            for (fg, bg) in m.fg().bits().iter().zip(m.bg().bits()) {
                prop_assert!(fg != bg);
            }
        }
    }
}
