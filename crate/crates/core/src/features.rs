//! Orientation histograms and the classifier's feature vector.

use thiserror::Error;

use crate::handgeom::HandGeometry;
use crate::imaging::{BinaryMask, Image};

pub const HIST_BINS: usize = 36;
pub const BIN_DEGREES: f64 = 10.0;
pub const FEATURE_LEN: usize = HIST_BINS + 1 + 2 * MAX_FINGERS;
pub const MAX_FINGERS: usize = 5;
/// Default minimum gradient magnitude on 0-255 samples.
pub const DEFAULT_MAG_THRESHOLD: f64 = 8.0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeatureError {
    #[error("dimension mismatch: image {image:?}, mask {mask:?}")]
    DimensionMismatch { image: (usize, usize), mask: (usize, usize) },
    #[error("expected a gray image")]
    NotGray,
}

/// 36 magnitude-weighted orientation bins of 10 degrees each, L1-normalized
/// (or all zero when no gradient passed the threshold).
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationHistogram {
    pub bins: [f64; HIST_BINS],
}

impl OrientationHistogram {
    pub fn zeros() -> Self {
        Self { bins: [0.0; HIST_BINS] }
    }

    pub fn is_degenerate(&self) -> bool {
        self.bins.iter().all(|&b| b == 0.0)
    }

    pub fn l1_distance(&self, other: &OrientationHistogram) -> f64 {
        self.bins.iter().zip(&other.bins).map(|(a, b)| (a - b).abs()).sum()
    }

    pub fn max_abs_diff(&self, other: &OrientationHistogram) -> f64 {
        self.bins.iter().zip(&other.bins).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Orientation histogram over a real-valued intensity field.
///
/// Exposed separately from [`orientation_histogram`] so that exact
/// intensity scalings (which cannot be represented in 8-bit samples) can
/// be analysed directly.
pub fn orientation_histogram_field(
    field: &[f64],
    width: usize,
    height: usize,
    mask: &BinaryMask,
    mag_threshold: f64,
) -> Result<OrientationHistogram, FeatureError> {
    if mask.width() != width || mask.height() != height || field.len() != width * height {
        return Err(FeatureError::DimensionMismatch { image: (width, height), mask: (mask.width(), mask.height()) });
    }
    let mut bins = [0.0f64; HIST_BINS];
    if width >= 3 && height >= 3 {
        for y in 1..height - 1 {
            for x in 1..width - 1 {
                if !mask.get(x, y) {
                    continue;
                }
                let i = y * width + x;
                let gx = field[i + 1] - field[i - 1];
                let gy = field[i + width] - field[i - width];
                let m = (gx * gx + gy * gy).sqrt();
                if m < mag_threshold || m == 0.0 {
                    continue;
                }
                let theta = gy.atan2(gx).to_degrees().rem_euclid(360.0);
                let bin = ((theta / BIN_DEGREES) as usize).min(HIST_BINS - 1);
                bins[bin] += m;
            }
        }
    }
    let total: f64 = bins.iter().sum();
    if total > 0.0 {
        for b in &mut bins {
            *b /= total;
        }
    }
    Ok(OrientationHistogram { bins })
}

/// Gradient orientation histogram of `gray` over the set pixels of `mask`,
/// skipping the raster border. Central differences; only gradients with
/// magnitude >= `mag_threshold` contribute, weighted by magnitude.
pub fn orientation_histogram(
    gray: &Image,
    mask: &BinaryMask,
    mag_threshold: f64,
) -> Result<OrientationHistogram, FeatureError> {
    if gray.channels() != 1 {
        return Err(FeatureError::NotGray);
    }
    let field: Vec<f64> = gray.data().iter().map(|&v| v as f64).collect();
    orientation_histogram_field(&field, gray.width(), gray.height(), mask, mag_threshold)
}

/// 47 entries in [0, 1]: 36 histogram bins, finger count / 5, then five
/// (r / 3·palm_radius, theta / 360) pairs in theta order, zero padded.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: [f64; FEATURE_LEN],
}

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

pub fn build_feature_vector(hist: &OrientationHistogram, geom: &HandGeometry) -> FeatureVector {
    debug_assert!(geom.palm_radius > 0.0);
    let mut values = [0.0; FEATURE_LEN];
    values[..HIST_BINS].copy_from_slice(&hist.bins);
    let mut tips = geom.fingertips.clone();
    tips.sort_by(|a, b| a.theta.total_cmp(&b.theta));
    tips.truncate(MAX_FINGERS);
    values[HIST_BINS] = tips.len() as f64 / MAX_FINGERS as f64;
    for (i, t) in tips.iter().enumerate() {
        let base = HIST_BINS + 1 + 2 * i;
        values[base] = (t.r / (3.0 * geom.palm_radius)).clamp(0.0, 1.0);
        values[base + 1] = (t.theta / 360.0).clamp(0.0, 1.0);
    }
    FeatureVector { values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handgeom::Fingertip;
    use proptest::prelude::*;

    fn full_mask(w: usize, h: usize) -> BinaryMask {
        BinaryMask::from_bits(w, h, vec![true; w * h]).unwrap()
    }

    #[test]
    fn constant_image_is_degenerate() {
        let img = Image::filled_gray(8, 8, 120);
        let h = orientation_histogram(&img, &full_mask(8, 8), 8.0).unwrap();
        assert!(h.is_degenerate());
    }

    #[test]
    fn vertical_step_edge_lands_in_bin_zero() {
        let data: Vec<u8> = (0..8 * 6).map(|i| if i % 8 < 4 { 20 } else { 200 }).collect();
        let img = Image::new(8, 6, 1, data).unwrap();
        let h = orientation_histogram(&img, &full_mask(8, 6), 8.0).unwrap();
        assert_eq!(h.bins[0], 1.0);
        assert_eq!(h.bins[1..].iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn downward_gradient_lands_in_bin_nine() {
        // Bright bottom: gy > 0 in y-down coordinates, theta = 90.
        let data: Vec<u8> = (0..6 * 6).map(|i| if i / 6 < 3 { 10 } else { 90 }).collect();
        let img = Image::new(6, 6, 1, data).unwrap();
        let h = orientation_histogram(&img, &full_mask(6, 6), 8.0).unwrap();
        assert_eq!(h.bins[9], 1.0);
    }

    #[test]
    fn threshold_and_mask_are_respected() {
        let data: Vec<u8> = (0..8 * 6).map(|i| if i % 8 < 4 { 100 } else { 105 }).collect();
        let img = Image::new(8, 6, 1, data).unwrap();
        assert!(orientation_histogram(&img, &full_mask(8, 6), 8.0).unwrap().is_degenerate());
        assert!(!orientation_histogram(&img, &full_mask(8, 6), 2.0).unwrap().is_degenerate());
        let empty = BinaryMask::new(8, 6);
        assert!(orientation_histogram(&img, &empty, 2.0).unwrap().is_degenerate());
    }

    #[test]
    fn dimension_mismatch() {
        let img = Image::filled_gray(4, 4, 0);
        assert!(matches!(
            orientation_histogram(&img, &full_mask(3, 4), 8.0),
            Err(FeatureError::DimensionMismatch { .. })
        ));
    }

    fn geom(tips: &[(f64, f64)]) -> HandGeometry {
        HandGeometry {
            centroid: (0.0, 0.0),
            palm_radius: 10.0,
            fingertips: tips.iter().map(|&(r, theta)| Fingertip { pos: (0, 0), r, theta }).collect(),
        }
    }

    #[test]
    fn feature_vector_layout() {
        let mut hist = OrientationHistogram::zeros();
        hist.bins[3] = 0.25;
        hist.bins[20] = 0.75;
        let fv = build_feature_vector(&hist, &geom(&[]));
        assert_eq!(&fv.values[..HIST_BINS], &hist.bins);
        assert!(fv.values[HIST_BINS..].iter().all(|&v| v == 0.0));

        let five = geom(&[(15.0, 250.0), (15.0, 230.0), (60.0, 270.0), (15.0, 290.0), (15.0, 310.0)]);
        let fv = build_feature_vector(&hist, &five);
        assert_eq!(fv.values[36], 1.0);
        assert_eq!(fv.values[37], 0.5);
        assert_eq!(fv.values[38], 230.0 / 360.0);
        assert_eq!(fv.values[40], 250.0 / 360.0);
        // r = 6 palm radii clamps to 1.
        assert_eq!(fv.values[41], 1.0);
        assert!(fv.values[37..].iter().all(|&v| v > 0.0));
    }

    proptest! {
        #[test]
        fn feature_entries_in_unit_interval(
            bins in proptest::collection::vec(0.0f64..1.0, HIST_BINS),
            tips in proptest::collection::vec((0.0f64..500.0, 0.0f64..360.0), 0..=5),
            radius in 0.5f64..80.0,
        ) {
            let total: f64 = bins.iter().sum();
            let mut hist = OrientationHistogram::zeros();
            if total > 0.0 {
                for (h, b) in hist.bins.iter_mut().zip(&bins) { *h = b / total; }
            }
            let mut g = geom(&tips);
            g.palm_radius = radius;
            let fv = build_feature_vector(&hist, &g);
            prop_assert_eq!(fv.values.len(), FEATURE_LEN);
            prop_assert!(fv.values.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn histogram_normalized_or_zero(data in proptest::collection::vec(any::<u8>(), 100)) {
            let img = Image::new(10, 10, 1, data).unwrap();
            let h = orientation_histogram(&img, &full_mask(10, 10), 8.0).unwrap();
            let s: f64 = h.bins.iter().sum();
            prop_assert!(h.is_degenerate() || (s - 1.0).abs() < 1e-9);
            prop_assert!(h.bins.iter().all(|&b| b >= 0.0));
        }

        #[test]
        fn histogram_invariant_under_exact_gain(
            data in proptest::collection::vec(0u8..=255, 144),
            gain in 0.2f64..3.0,
        ) {
            // Threshold 0 so that no gradient can cross it.
            let field: Vec<f64> = data.iter().map(|&v| v as f64).collect();
            let scaled: Vec<f64> = field.iter().map(|v| v * gain).collect();
            let mask = full_mask(12, 12);
            let a = orientation_histogram_field(&field, 12, 12, &mask, 0.0).unwrap();
            let b = orientation_histogram_field(&scaled, 12, 12, &mask, 0.0).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-9);
        }
    }
}
