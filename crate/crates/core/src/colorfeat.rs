//! Quantized color histograms and the 25-dimensional color feature.
//!
//! Garment color is summarized by quantizing every pixel into a coarse
//! HSB grid — 15 hue levels, 8 saturation levels, 6 brightness levels —
//! and histogramming the resulting codes. The feature vector keeps the
//! five most frequent codes ("major colors"), each encoded as its
//! normalized bin center plus its pixel ratio and a presence flag:
//! 5 blocks x 5 values = 25 dims. Images with fewer than five distinct
//! codes pad with all-zero blocks, which the presence flag makes
//! distinguishable from a real dark color.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::record::{FeatureDims, OutfitRecord, RecordError};

pub const HUE_LEVELS: u8 = 15;
pub const SATURATION_LEVELS: u8 = 8;
pub const BRIGHTNESS_LEVELS: u8 = 6;

/// Number of major-color blocks kept in the feature.
pub const MAJOR_COLORS: usize = 5;
/// Values per block: normalized h, s, b bin centers, ratio, presence.
pub const BLOCK_DIM: usize = 5;
pub const COLOR_FEATURE_DIM: usize = MAJOR_COLORS * BLOCK_DIM;

#[derive(Debug, Error)]
pub enum ColorError {
    #[error("{channel} value {value} outside {lo}..{hi}")]
    OutOfRange { channel: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("cannot histogram an empty pixel list")]
    EmptyPixels,
}

/// A quantized color: 1-based bin indices into the HSB grid.
///
/// Ordering is lexicographic over (h, s, b), which is what every
/// deterministic tie-break in this module leans on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FocoCode {
    pub h_idx: u8,
    pub s_idx: u8,
    pub b_idx: u8,
}

impl FocoCode {
    pub fn new(h_idx: u8, s_idx: u8, b_idx: u8) -> Result<Self, ColorError> {
        let check = |channel, value: u8, hi: u8| {
            if value < 1 || value > hi {
                Err(ColorError::OutOfRange { channel, value: value as f64, lo: 1.0, hi: hi as f64 })
            } else {
                Ok(())
            }
        };
        check("h_idx", h_idx, HUE_LEVELS)?;
        check("s_idx", s_idx, SATURATION_LEVELS)?;
        check("b_idx", b_idx, BRIGHTNESS_LEVELS)?;
        Ok(FocoCode { h_idx, s_idx, b_idx })
    }

    /// Center of this code's bin in HSB space. Quantizing the
    /// representative always returns the same code back.
    pub fn representative_hsb(self) -> (f64, f64, f64) {
        (
            (self.h_idx as f64 - 0.5) * (360.0 / HUE_LEVELS as f64),
            (self.s_idx as f64 - 0.5) / SATURATION_LEVELS as f64,
            (self.b_idx as f64 - 0.5) / BRIGHTNESS_LEVELS as f64,
        )
    }
}

fn check_unit(channel: &'static str, value: f64) -> Result<(), ColorError> {
    if !(0.0..=1.0).contains(&value) {
        return Err(ColorError::OutOfRange { channel, value, lo: 0.0, hi: 1.0 });
    }
    Ok(())
}

/// Standard RGB → HSB conversion. Achromatic inputs (including pure black)
/// get hue 0 by convention.
pub fn rgb_to_hsb(r: f64, g: f64, b: f64) -> Result<(f64, f64, f64), ColorError> {
    check_unit("r", r)?;
    check_unit("g", g)?;
    check_unit("b", b)?;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let brightness = max;
    let saturation = if max == 0.0 { 0.0 } else { delta / max };
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let hue = hue.rem_euclid(360.0);
    // rem_euclid can round to exactly 360.0 for hues epsilon below zero.
    let hue = if hue >= 360.0 { 0.0 } else { hue };
    Ok((hue, saturation, brightness))
}

/// Quantize an HSB color onto the 15x8x6 grid.
///
/// Bins are 1-based, uniform, and left-closed; the channel maxima fold
/// into the top bin so the mapping is total on the valid range.
pub fn foco_quantize(h: f64, s: f64, b: f64) -> Result<FocoCode, ColorError> {
    if !(0.0..360.0).contains(&h) {
        return Err(ColorError::OutOfRange { channel: "h", value: h, lo: 0.0, hi: 360.0 });
    }
    check_unit("s", s)?;
    check_unit("b", b)?;
    let h_idx = ((h / 24.0).floor() as u8 + 1).min(HUE_LEVELS);
    let s_idx = (((s * SATURATION_LEVELS as f64).floor() as u8) + 1).min(SATURATION_LEVELS);
    let b_idx = (((b * BRIGHTNESS_LEVELS as f64).floor() as u8) + 1).min(BRIGHTNESS_LEVELS);
    Ok(FocoCode { h_idx, s_idx, b_idx })
}

/// Histogram of quantized colors: code → fraction of pixels.
pub type ColorHistogram = BTreeMap<FocoCode, f64>;

/// Quantize and count a pixel list. Ratios sum to 1 within 1e-9.
pub fn color_histogram(pixels: &[(f64, f64, f64)]) -> Result<ColorHistogram, ColorError> {
    if pixels.is_empty() {
        return Err(ColorError::EmptyPixels);
    }
    let mut counts: BTreeMap<FocoCode, usize> = BTreeMap::new();
    for &(r, g, b) in pixels {
        let (h, s, v) = rgb_to_hsb(r, g, b)?;
        let code = foco_quantize(h, s, v)?;
        *counts.entry(code).or_insert(0) += 1;
    }
    let total = pixels.len() as f64;
    Ok(counts.into_iter().map(|(code, n)| (code, n as f64 / total)).collect())
}

/// Encode a histogram as the 25-dim color feature: the five largest bins
/// by ratio (ties broken by code order), each as
/// `((h_idx-0.5)/15, (s_idx-0.5)/8, (b_idx-0.5)/6, ratio, 1.0)`, with
/// all-zero blocks when fewer than five colors are present.
pub fn build_color_feature(histogram: &ColorHistogram) -> Vec<f64> {
    let mut bins: Vec<(FocoCode, f64)> = histogram.iter().map(|(c, r)| (*c, *r)).collect();
    bins.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).expect("finite ratios").then_with(|| a.0.cmp(&b.0))
    });
    let mut feature = vec![0.0; COLOR_FEATURE_DIM];
    for (slot, (code, ratio)) in bins.iter().take(MAJOR_COLORS).enumerate() {
        let base = slot * BLOCK_DIM;
        feature[base] = (code.h_idx as f64 - 0.5) / HUE_LEVELS as f64;
        feature[base + 1] = (code.s_idx as f64 - 0.5) / SATURATION_LEVELS as f64;
        feature[base + 2] = (code.b_idx as f64 - 0.5) / BRIGHTNESS_LEVELS as f64;
        feature[base + 3] = *ratio;
        feature[base + 4] = 1.0;
    }
    feature
}

/// Load an NDJSON feature file (see [`crate::record`]).
pub fn load_feature_records(path: &Path) -> Result<Vec<OutfitRecord>, RecordError> {
    crate::record::read_ndjson_file(path)
}

/// Check every record's feature dimensions against the expected layout.
pub fn check_feature_dims(records: &[OutfitRecord], dims: &FeatureDims) -> Result<(), RecordError> {
    let expected = dims.as_array();
    for record in records {
        for garment in [&record.top, &record.bottom] {
            if garment.dims() != expected {
                return Err(RecordError::InvalidRecord {
                    outfit_id: record.outfit_id.clone(),
                    message: format!(
                        "feature dims {:?} do not match expected {:?}",
                        garment.dims(),
                        expected,
                    ),
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_to_hsb_known_points() {
        assert_eq!(rgb_to_hsb(0.0, 0.0, 0.0).unwrap(), (0.0, 0.0, 0.0));
        assert_eq!(rgb_to_hsb(1.0, 0.0, 0.0).unwrap(), (0.0, 1.0, 1.0));
        assert_eq!(rgb_to_hsb(0.5, 0.5, 0.5).unwrap(), (0.0, 0.0, 0.5));
        let (h, s, b) = rgb_to_hsb(0.0, 1.0, 0.0).unwrap();
        assert_eq!((h, s, b), (120.0, 1.0, 1.0));
        let (h, _, _) = rgb_to_hsb(0.0, 0.0, 1.0).unwrap();
        assert_eq!(h, 240.0);
        assert!(rgb_to_hsb(1.2, 0.0, 0.0).is_err());
        assert!(rgb_to_hsb(0.0, -0.1, 0.0).is_err());
    }

    #[test]
    fn quantize_boundaries() {
        assert_eq!(foco_quantize(0.0, 0.0, 0.0).unwrap(), FocoCode { h_idx: 1, s_idx: 1, b_idx: 1 });
        assert_eq!(
            foco_quantize(359.9, 1.0, 1.0).unwrap(),
            FocoCode { h_idx: 15, s_idx: 8, b_idx: 6 }
        );
        assert_eq!(foco_quantize(24.0, 0.125, 0.5).unwrap(), FocoCode { h_idx: 2, s_idx: 2, b_idx: 4 });
        assert!(foco_quantize(360.0, 0.0, 0.0).is_err());
        assert!(foco_quantize(-0.1, 0.0, 0.0).is_err());
        assert!(foco_quantize(0.0, 1.1, 0.0).is_err());
    }

    #[test]
    fn deep_red_reference_lands_on_1_8_4() {
        // Calibration check: a deep candy-apple red. With brightness 0.58
        // and near-full saturation the code comes out (1, 8, 4).
        let (h, s, b) = rgb_to_hsb(0.58, 0.03, 0.03).unwrap();
        assert_eq!(foco_quantize(h, s, b).unwrap(), FocoCode { h_idx: 1, s_idx: 8, b_idx: 4 });
    }

    #[test]
    fn quantize_is_idempotent_on_representatives() {
        for h in 1..=HUE_LEVELS {
            for s in 1..=SATURATION_LEVELS {
                for b in 1..=BRIGHTNESS_LEVELS {
                    let code = FocoCode::new(h, s, b).unwrap();
                    let (hh, ss, bb) = code.representative_hsb();
                    assert_eq!(foco_quantize(hh, ss, bb).unwrap(), code);
                }
            }
        }
    }

    #[test]
    fn histogram_of_uniform_image_is_single_bin() {
        let pixels = vec![(0.2, 0.4, 0.8); 100];
        let hist = color_histogram(&pixels).unwrap();
        assert_eq!(hist.len(), 1);
        assert_eq!(*hist.values().next().unwrap(), 1.0);
    }

    #[test]
    fn histogram_of_half_black_half_red() {
        let mut pixels = vec![(0.0, 0.0, 0.0); 32];
        pixels.extend(vec![(1.0, 0.0, 0.0); 32]);
        let hist = color_histogram(&pixels).unwrap();
        assert_eq!(hist.len(), 2);
        for ratio in hist.values() {
            assert_eq!(*ratio, 0.5);
        }
        assert!(color_histogram(&[]).is_err());
    }

    #[test]
    fn histogram_matches_independent_counting_oracle() {
        // Pseudo-random 64x64 image from a tiny LCG so the test needs no
        // RNG dependency; the oracle recounts with its own quantizer.
        let mut state = 0x2545f4914f6cdd1du64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64) / (u32::MAX as f64 + 1.0) * 0.9999
        };
        let pixels: Vec<(f64, f64, f64)> = (0..64 * 64).map(|_| (next(), next(), next())).collect();
        let hist = color_histogram(&pixels).unwrap();

        let mut oracle: std::collections::HashMap<(u8, u8, u8), usize> =
            std::collections::HashMap::new();
        for &(r, g, b) in &pixels {
            let max = r.max(g).max(b);
            let min = r.min(g).min(b);
            let delta = max - min;
            let s = if max == 0.0 { 0.0 } else { delta / max };
            let mut h = if delta == 0.0 {
                0.0
            } else if max == r {
                60.0 * ((g - b) / delta)
            } else if max == g {
                60.0 * ((b - r) / delta + 2.0)
            } else {
                60.0 * ((r - g) / delta + 4.0)
            };
            if h < 0.0 {
                h += 360.0;
            }
            let hi = ((h / 24.0) as u8 + 1).min(15);
            let si = ((s * 8.0) as u8 + 1).min(8);
            let bi = ((max * 6.0) as u8 + 1).min(6);
            *oracle.entry((hi, si, bi)).or_insert(0) += 1;
        }
        assert_eq!(hist.len(), oracle.len());
        for (code, ratio) in &hist {
            let count = oracle[&(code.h_idx, code.s_idx, code.b_idx)];
            assert!((ratio - count as f64 / 4096.0).abs() < 1e-12);
        }
        let total: f64 = hist.values().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_bin_feature_layout() {
        let mut hist = ColorHistogram::new();
        hist.insert(FocoCode::new(1, 8, 4).unwrap(), 1.0);
        let feature = build_color_feature(&hist);
        assert_eq!(feature.len(), COLOR_FEATURE_DIM);
        assert_eq!(feature[0], 0.5 / 15.0);
        assert_eq!(feature[1], 7.5 / 8.0);
        assert_eq!(feature[2], 3.5 / 6.0);
        assert_eq!(feature[3], 1.0);
        assert_eq!(feature[4], 1.0);
        assert!(feature[5..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ties_break_by_code_order() {
        let mut hist = ColorHistogram::new();
        hist.insert(FocoCode::new(9, 2, 2).unwrap(), 0.5);
        hist.insert(FocoCode::new(3, 7, 5).unwrap(), 0.5);
        let feature = build_color_feature(&hist);
        // (3,7,5) sorts before (9,2,2) at equal ratio.
        assert_eq!(feature[0], 2.5 / 15.0);
        assert_eq!(feature[5], 8.5 / 15.0);
    }

    #[test]
    fn top_five_selection_matches_sort_oracle() {
        let codes = [(1, 1, 1), (2, 2, 2), (3, 3, 3), (4, 4, 4), (5, 5, 5), (6, 6, 6)];
        let ratios = [0.05, 0.25, 0.1, 0.25, 0.3, 0.05];
        let mut hist = ColorHistogram::new();
        for ((h, s, b), r) in codes.iter().zip(ratios) {
            hist.insert(FocoCode::new(*h, *s, *b).unwrap(), r);
        }
        let feature = build_color_feature(&hist);

        let mut oracle: Vec<_> = codes.iter().zip(ratios).collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(b.0)));
        for (slot, ((h, _, _), ratio)) in oracle.iter().take(5).enumerate() {
            assert_eq!(feature[slot * BLOCK_DIM], (*h as f64 - 0.5) / 15.0);
            assert_eq!(feature[slot * BLOCK_DIM + 3], *ratio);
        }
        // The smallest bin — (1,1,1) at 0.05 ties (6,6,6) but sorts first,
        // so (6,6,6) is the one dropped.
        assert!(!feature.iter().any(|v| *v == 5.5 / 15.0));
        let ratio_sum: f64 = (0..5).map(|i| feature[i * BLOCK_DIM + 3]).sum();
        assert!(ratio_sum <= 1.0 + 1e-9);
    }
}
