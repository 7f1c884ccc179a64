//! Overlapping angular bins.
//!
//! Each bin spans its nominal width `range / n` plus `overlap` degrees on
//! either side. Training labels use the nearest bin center; a prediction
//! counts as correct when the ground-truth angle falls anywhere inside the
//! predicted bin's overlap-extended interval.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack for float round-off at interval borders.
const BORDER_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BinningError {
    #[error("bin count must be odd and at least 3, got {0}")]
    InvalidBinCount(usize),
    #[error("overlap must be finite and >= 0, got {0}")]
    InvalidOverlap(f64),
    #[error("range must be finite and > 0, got {0}")]
    InvalidRange(f64),
    #[error("angle is not finite: {0}")]
    NonFiniteAngle(f64),
    #[error("bin index {index} out of range for {n_bins} bins")]
    BinOutOfRange { index: usize, n_bins: usize },
}

/// Immutable bin layout over `[0, range)` (wrapping) or `[0, range]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BinSpecParams", into = "BinSpecParams")]
pub struct BinSpec {
    n_bins: usize,
    overlap_deg: f64,
    range_deg: f64,
    wraparound: bool,
    centers: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BinSpecParams {
    n_bins: usize,
    overlap_deg: f64,
    range_deg: f64,
    wraparound: bool,
}

impl TryFrom<BinSpecParams> for BinSpec {
    type Error = BinningError;
    fn try_from(p: BinSpecParams) -> Result<Self, Self::Error> {
        make_binspec(p.n_bins, p.overlap_deg, p.range_deg, p.wraparound)
    }
}

impl From<BinSpec> for BinSpecParams {
    fn from(s: BinSpec) -> Self {
        Self {
            n_bins: s.n_bins,
            overlap_deg: s.overlap_deg,
            range_deg: s.range_deg,
            wraparound: s.wraparound,
        }
    }
}

/// Builds a bin layout.
///
/// Wrapping layouts put bin `k` at `k * range / n`, so bin 0 is centered on
/// angle 0. Non-wrapping layouts tile the closed range with centers at
/// `(k + 0.5) * range / n`, which keeps both ends covered.
pub fn make_binspec(n_bins: usize, overlap_deg: f64, range_deg: f64, wraparound: bool) -> Result<BinSpec, BinningError> {
    if n_bins < 3 || n_bins.is_multiple_of(2) {
        return Err(BinningError::InvalidBinCount(n_bins));
    }
    if !(overlap_deg >= 0.0 && overlap_deg.is_finite()) {
        return Err(BinningError::InvalidOverlap(overlap_deg));
    }
    if !(range_deg > 0.0 && range_deg.is_finite()) {
        return Err(BinningError::InvalidRange(range_deg));
    }
    let width = range_deg / n_bins as f64;
    let offset = if wraparound { 0.0 } else { 0.5 };
    let centers = (0..n_bins).map(|k| (k as f64 + offset) * width).collect();
    Ok(BinSpec {
        n_bins,
        overlap_deg,
        range_deg,
        wraparound,
        centers,
    })
}

impl BinSpec {
    /// Azimuth layout over the full circle with the overlap that makes `n`
    /// bins as wide as `n - 1` plain bins: 5, 9, 13 and 25 bins use 9, 2.5,
    /// 1.15 and 0.3 degrees.
    pub fn azimuth(n_bins: usize) -> Result<Self, BinningError> {
        let overlap = match n_bins {
            5 => 9.0,
            9 => 2.5,
            13 => 1.15,
            25 => 0.3,
            _ => 0.0,
        };
        make_binspec(n_bins, overlap, 360.0, true)
    }

    /// Elevation layout over `[0, 90]` with no overlap.
    pub fn elevation(n_bins: usize) -> Result<Self, BinningError> {
        make_binspec(n_bins, 0.0, 90.0, false)
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn overlap_deg(&self) -> f64 {
        self.overlap_deg
    }

    pub fn range_deg(&self) -> f64 {
        self.range_deg
    }

    pub fn wraparound(&self) -> bool {
        self.wraparound
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn nominal_width(&self) -> f64 {
        self.range_deg / self.n_bins as f64
    }

    pub fn effective_width(&self) -> f64 {
        self.nominal_width() + 2.0 * self.overlap_deg
    }

    /// Distance between two angles, circular for wrapping layouts.
    pub fn distance(&self, a: f64, b: f64) -> f64 {
        let d = (a - b).abs();
        if self.wraparound {
            let d = d.rem_euclid(self.range_deg);
            d.min(self.range_deg - d)
        } else {
            d
        }
    }

    fn check_bin(&self, index: usize) -> Result<(), BinningError> {
        if index >= self.n_bins {
            return Err(BinningError::BinOutOfRange {
                index,
                n_bins: self.n_bins,
            });
        }
        Ok(())
    }

    /// Closed `[lo, hi]` interval of a bin in degrees. For wrapping layouts
    /// `lo` may be negative; compare with [`BinSpec::distance`].
    pub fn interval(&self, index: usize) -> Result<(f64, f64), BinningError> {
        self.check_bin(index)?;
        let half = self.effective_width() / 2.0;
        let c = self.centers[index];
        Ok((c - half, c + half))
    }
}

/// Result of mapping an angle to its nearest bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub bin: usize,
    /// Set when a non-wrapping angle fell outside the range and was clamped.
    pub clamped: bool,
}

/// Nearest bin center, ties toward the lower index. Wrapping layouts reduce
/// the angle modulo the range first; others clamp into range.
pub fn assign_bin(angle_deg: f64, spec: &BinSpec) -> Result<Assignment, BinningError> {
    if !angle_deg.is_finite() {
        return Err(BinningError::NonFiniteAngle(angle_deg));
    }
    let (angle, clamped) = if spec.wraparound {
        (angle_deg.rem_euclid(spec.range_deg), false)
    } else {
        let a = angle_deg.clamp(0.0, spec.range_deg);
        (a, a != angle_deg)
    };
    if clamped {
        log::warn!("angle {angle_deg} outside [0, {}], clamped", spec.range_deg);
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, &c) in spec.centers.iter().enumerate() {
        let d = spec.distance(angle, c);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    Ok(Assignment { bin: best, clamped })
}

/// Whether `gt_angle_deg` lies inside the predicted bin's extended interval,
/// borders included.
pub fn is_correct(pred_bin: usize, gt_angle_deg: f64, spec: &BinSpec) -> Result<bool, BinningError> {
    spec.check_bin(pred_bin)?;
    if !gt_angle_deg.is_finite() {
        return Err(BinningError::NonFiniteAngle(gt_angle_deg));
    }
    let angle = if spec.wraparound {
        gt_angle_deg.rem_euclid(spec.range_deg)
    } else {
        gt_angle_deg.clamp(0.0, spec.range_deg)
    };
    let half = spec.effective_width() / 2.0;
    Ok(spec.distance(angle, spec.centers[pred_bin]) <= half + BORDER_EPS)
}

/// Every bin whose extended interval contains the angle, ascending.
pub fn covering_bins(angle_deg: f64, spec: &BinSpec) -> Result<Vec<usize>, BinningError> {
    let mut out = Vec::with_capacity(2);
    for k in 0..spec.n_bins {
        if is_correct(k, angle_deg, spec)? {
            out.push(k);
        }
    }
    Ok(out)
}

/// How training labels are produced for angles inside an overlap region.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelPolicy {
    /// One label: the nearest bin.
    #[default]
    Nearest,
    /// One label per covering bin; the sample is duplicated per label.
    DuplicateOverlap,
}

pub fn training_labels(angle_deg: f64, spec: &BinSpec, policy: LabelPolicy) -> Result<Vec<usize>, BinningError> {
    let nearest = assign_bin(angle_deg, spec)?.bin;
    match policy {
        LabelPolicy::Nearest => Ok(vec![nearest]),
        LabelPolicy::DuplicateOverlap => {
            let bins = covering_bins(angle_deg, spec)?;
            debug_assert!(bins.contains(&nearest));
            Ok(bins)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round2(v: f64) -> f64 {
        (v * 100.0).round() / 100.0
    }

    #[test]
    fn effective_widths_of_azimuth_layouts() {
        let cases = [(5, 90.0), (9, 45.0), (13, 29.99), (25, 15.0)];
        for (n, w) in cases {
            assert_eq!(round2(BinSpec::azimuth(n).unwrap().effective_width()), w, "{n} bins");
        }
        assert_eq!(make_binspec(9, 2.5, 360.0, true).unwrap().effective_width(), 45.0);
        assert_eq!(make_binspec(5, 9.0, 360.0, true).unwrap().effective_width(), 90.0);
    }

    #[test]
    fn rejects_even_and_tiny_counts() {
        assert_eq!(make_binspec(8, 2.5, 360.0, true), Err(BinningError::InvalidBinCount(8)));
        assert!(make_binspec(1, 0.0, 360.0, true).is_err());
        assert!(make_binspec(9, -1.0, 360.0, true).is_err());
        assert!(make_binspec(9, 0.0, 0.0, true).is_err());
    }

    #[test]
    fn azimuth_assignment_examples() {
        let s = BinSpec::azimuth(9).unwrap();
        assert_eq!(assign_bin(0.0, &s).unwrap().bin, 0);
        assert_eq!(assign_bin(359.0, &s).unwrap().bin, 0);
        assert_eq!(assign_bin(90.0, &s).unwrap().bin, 2);
        assert_eq!(assign_bin(-1.0, &s).unwrap().bin, 0);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let s = BinSpec::azimuth(9).unwrap();
        assert_eq!(assign_bin(20.0, &s).unwrap().bin, 0);
        assert_eq!(assign_bin(340.0, &s).unwrap().bin, 0);
        assert_eq!(assign_bin(300.0, &s).unwrap().bin, 7);
    }

    #[test]
    fn correctness_examples() {
        let s = BinSpec::azimuth(9).unwrap();
        assert!(is_correct(0, 22.0, &s).unwrap());
        assert!(is_correct(0, 22.5, &s).unwrap());
        assert!(!is_correct(0, 23.0, &s).unwrap());
        assert!(is_correct(0, 338.0, &s).unwrap());
        assert!(is_correct(9, 0.0, &s).is_err());
    }

    #[test]
    fn elevation_clamps_and_flags() {
        let s = BinSpec::elevation(5).unwrap();
        assert_eq!(s.centers(), &[9.0, 27.0, 45.0, 63.0, 81.0]);
        assert_eq!(assign_bin(95.0, &s).unwrap(), Assignment { bin: 4, clamped: true });
        assert_eq!(assign_bin(-3.0, &s).unwrap(), Assignment { bin: 0, clamped: true });
        assert_eq!(assign_bin(90.0, &s).unwrap(), Assignment { bin: 4, clamped: false });
        assert!(is_correct(4, 90.0, &s).unwrap());
        assert!(is_correct(0, 0.0, &s).unwrap());
    }

    #[test]
    fn duplicate_policy_labels_both_overlapping_bins() {
        let s = BinSpec::azimuth(9).unwrap();
        assert_eq!(training_labels(19.0, &s, LabelPolicy::Nearest).unwrap(), vec![0]);
        assert_eq!(training_labels(19.0, &s, LabelPolicy::DuplicateOverlap).unwrap(), vec![0, 1]);
        assert_eq!(training_labels(10.0, &s, LabelPolicy::DuplicateOverlap).unwrap(), vec![0]);
    }

    #[test]
    fn serde_round_trip_validates() {
        let s = BinSpec::azimuth(13).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<BinSpec>(&json).unwrap(), s);
        let bad = r#"{"n_bins":4,"overlap_deg":0,"range_deg":360,"wraparound":true}"#;
        assert!(serde_json::from_str::<BinSpec>(bad).is_err());
    }

    #[test]
    fn non_finite_angle_is_an_error() {
        let s = BinSpec::azimuth(9).unwrap();
        assert!(assign_bin(f64::NAN, &s).is_err());
    }
}
