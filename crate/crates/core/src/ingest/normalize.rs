use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::VolumeGrid;

pub const DEFAULT_LO_PCT: f64 = 0.5;
pub const DEFAULT_HI_PCT: f64 = 99.5;

/// Percentile of already-sorted values, linear interpolation between order
/// statistics at rank `p/100 · (n − 1)`.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let t = rank - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizeInfo {
    pub lo_pct: f64,
    pub hi_pct: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Set when the clip window collapsed and the output is all zeros.
    pub degenerate: bool,
}

/// Percentile clipping followed by min-max mapping onto [0, 1].
pub fn normalize_intensity(volume: &VolumeGrid, lo_pct: f64, hi_pct: f64) -> Result<(VolumeGrid, NormalizeInfo)> {
    if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct > hi_pct {
        return Err(Error::invalid(format!("bad percentile window [{lo_pct}, {hi_pct}]")));
    }
    let mut sorted: Vec<f64> = volume.voxels().iter().copied().collect();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("volume intensities".into()));
    }
    sorted.sort_by(f64::total_cmp);
    let clip_lo = percentile_sorted(&sorted, lo_pct);
    let clip_hi = percentile_sorted(&sorted, hi_pct);
    let span = clip_hi - clip_lo;
    let degenerate = span <= 0.0;
    let out = if degenerate {
        log::warn!("constant intensity window ({clip_lo}); normalised volume is all zeros");
        volume.voxels().mapv(|_| 0.0)
    } else {
        volume
            .voxels()
            .mapv(|v| ((v.clamp(clip_lo, clip_hi) - clip_lo) / span).clamp(0.0, 1.0))
    };
    let info = NormalizeInfo {
        lo_pct,
        hi_pct,
        clip_lo,
        clip_hi,
        degenerate,
    };
    Ok((VolumeGrid::new(out, volume.spacing(), volume.origin())?, info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Spacing;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn vol(values: Vec<f64>) -> VolumeGrid {
        let n = values.len();
        VolumeGrid::new(Array3::from_shape_vec((1, 1, n), values).unwrap(), Spacing([1.0; 3]), [0.0; 3]).unwrap()
    }

    /// Percentile by explicit order-statistic interpolation on a fresh sort.
    fn oracle_percentile(values: &[f64], pct: f64) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = pct / 100.0 * (v.len() as f64 - 1.0);
        let below = pos.floor();
        let frac = pos - below;
        let i = below as usize;
        if i + 1 < v.len() {
            v[i] * (1.0 - frac) + v[i + 1] * frac
        } else {
            v[i]
        }
    }

    #[test]
    fn outliers_clip_to_window_and_endpoints_map_to_unit_range() {
        // ten bright voxels out of a thousand sit above the 99.5th percentile rank
        let mut values = vec![0.0; 990];
        values.extend(std::iter::repeat_n(1000.0, 10));
        let (out, info) = normalize_intensity(&vol(values), 0.5, 99.5).unwrap();
        assert!(!info.degenerate);
        let max = out.voxels().iter().cloned().fold(f64::MIN, f64::max);
        let min = out.voxels().iter().cloned().fold(f64::MAX, f64::min);
        assert_eq!((min, max), (0.0, 1.0));
    }

    #[test]
    fn single_bright_voxel_collapses_the_window() {
        // with 1 of 1000 voxels bright, both percentiles fall on the dark value
        let mut values = vec![0.0; 999];
        values.push(1000.0);
        let (out, info) = normalize_intensity(&vol(values), 0.5, 99.5).unwrap();
        assert!(info.degenerate);
        assert_eq!(info.clip_hi, 0.0);
        assert!(out.voxels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_volume_is_zero_and_flagged() {
        let (out, info) = normalize_intensity(&vol(vec![40.0; 27]), 0.5, 99.5).unwrap();
        assert!(info.degenerate);
        assert!(out.voxels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_matches_percentile_oracle() {
        let n = 1_000_000usize;
        let values: Vec<f64> = (0..n).map(|i| 1000.0 * i as f64 / (n - 1) as f64).collect();
        let (out, info) = normalize_intensity(&vol(values.clone()), 0.5, 99.5).unwrap();
        let lo = oracle_percentile(&values, 0.5);
        let hi = oracle_percentile(&values, 99.5);
        assert!((info.clip_lo - lo).abs() < 1e-9);
        assert!((info.clip_hi - hi).abs() < 1e-9);
        for idx in [0usize, 1000, 4_999, 5_000, 250_000, 500_000, 777_777, 995_000, n - 1] {
            let expected = ((values[idx] - lo) / (hi - lo)).clamp(0.0, 1.0);
            assert!((out.voxels()[[0, 0, idx]] - expected).abs() < 1e-6, "idx {idx}");
        }
    }

    #[test]
    fn rejects_inverted_window() {
        assert!(normalize_intensity(&vol(vec![1.0, 2.0]), 90.0, 10.0).is_err());
    }

    proptest! {
        #[test]
        fn output_always_in_unit_interval(values in prop::collection::vec(-3000.0f64..3000.0, 1..200), lo in 0.0f64..50.0, hi in 50.0f64..100.0) {
            let (out, _) = normalize_intensity(&vol(values), lo, hi).unwrap();
            prop_assert!(out.voxels().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
