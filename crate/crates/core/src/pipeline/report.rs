//! Adjacent-frame consistency metrics.

use crate::error::{Error, Result};
use crate::segmentation::MaskPair;
use crate::temporal::Video;

/// Mean absolute difference between consecutive frames.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConsistencyReport {
    /// One entry per adjacent pair `(j, j + 1)`, length `F - 1`.
    pub per_pair: Vec<f64>,
    pub mean: f64,
    pub max: f64,
    pub regions: Option<RegionBreakdown>,
}

/// Same metric restricted to foreground and background pixels. A region with
/// no pixels reports 0.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RegionBreakdown {
    pub fg_per_pair: Vec<f64>,
    pub bg_per_pair: Vec<f64>,
    pub fg_mean: f64,
    pub bg_mean: f64,
}

pub fn compute_consistency(video: &Video, masks: Option<&MaskPair>) -> Result<ConsistencyReport> {
    if video.len() < 2 {
        return Err(Error::invalid("video", "consistency needs at least two frames"));
    }
    let frames = video.frames();
    let per_pair = frames
        .windows(2)
        .map(|w| w[1].mean_abs_diff(&w[0]))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    let max = per_pair.iter().copied().fold(0.0, f64::max);

    let regions = masks
        .map(|m| {
            let s = video.shape();
            if m.height() != s.height || m.width() != s.width {
                return Err(Error::shape(
                    format!("{}x{} masks", s.height, s.width),
                    format!("{}x{}", m.height(), m.width()),
                ));
            }
            let region = |bits: &[bool]| -> Vec<f64> {
                let ch = s.channels;
                let n = bits.iter().filter(|b| **b).count() * ch;
                frames
                    .windows(2)
                    .map(|w| {
                        if n == 0 {
                            return 0.0;
                        }
                        let (a, b) = (w[0].values(), w[1].values());
                        let sum: f64 = (0..a.len()).filter(|k| bits[k / ch]).map(|k| (b[k] - a[k]).abs()).sum();
                        sum / n as f64
                    })
                    .collect()
            };
            let fg = region(m.fg().bits());
            let bg = region(m.bg().bits());
            let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            Ok(RegionBreakdown {
                fg_mean: avg(&fg),
                bg_mean: avg(&bg),
                fg_per_pair: fg,
                bg_per_pair: bg,
            })
        })
        .transpose()?;

    Ok(ConsistencyReport {
        per_pair,
        mean,
        max,
        regions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{FrameShape, LatentFrame};
    use crate::segmentation::MaskGrid;
    use rand::SeedableRng;

    #[test]
    fn identical_frames_score_zero() {
        let f = LatentFrame::filled(FrameShape::new(2, 2, 1), 0.3);
        let r = compute_consistency(&Video::new(vec![f.clone(), f.clone(), f]).unwrap(), None).unwrap();
        assert_eq!(r.per_pair, vec![0.0, 0.0]);
        assert_eq!((r.mean, r.max), (0.0, 0.0));
    }

    #[test]
    fn constant_jump_scores_one() {
        let s = FrameShape::new(2, 2, 2);
        let v = Video::new(vec![LatentFrame::filled(s, 0.0), LatentFrame::filled(s, 1.0)]).unwrap();
        let masks = MaskPair::from_foreground(MaskGrid::from_bits(2, 2, vec![true, false, false, false]).unwrap());
        let r = compute_consistency(&v, Some(&masks)).unwrap();
        assert_eq!(r.per_pair, vec![1.0]);
        let reg = r.regions.unwrap();
        assert_eq!((reg.fg_mean, reg.bg_mean), (1.0, 1.0));
    }

    #[test]
    fn single_frame_is_an_error() {
        let v = Video::new(vec![LatentFrame::zeros(FrameShape::new(1, 1, 1))]).unwrap();
        assert!(compute_consistency(&v, None).is_err());
    }

    #[test]
    fn matches_two_loop_script() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let s = FrameShape::new(3, 4, 2);
        let v = Video::gaussian(5, s, &mut rng).unwrap();
        let bits: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
        let masks = MaskPair::from_foreground(MaskGrid::from_bits(3, 4, bits.clone()).unwrap());
        let r = compute_consistency(&v, Some(&masks)).unwrap();
        let f = v.frames();
        for j in 0..4 {
            let (mut all, mut fg, mut nfg) = (0.0, 0.0, 0usize);
            for y in 0..3 {
                for x in 0..4 {
                    for c in 0..2 {
                        let d = (f[j + 1].get(y, x, c) - f[j].get(y, x, c)).abs();
                        all += d;
                        if bits[y * 4 + x] {
                            fg += d;
                            nfg += 1;
                        }
                    }
                }
            }
            assert!((r.per_pair[j] - all / 24.0).abs() < 1e-14);
            assert!((r.regions.as_ref().unwrap().fg_per_pair[j] - fg / nfg as f64).abs() < 1e-14);
        }
        let mean = r.per_pair.iter().sum::<f64>() / 4.0;
        assert!((r.mean - mean).abs() < 1e-15);
    }
}
