//! Occlusion (`M_noc`) and photometric outlier (`M_ol`) masks.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::camera::FlowField;
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid};
use crate::warp::warp_with;

/// Relative tolerance of the forward-backward check.
pub const FB_ALPHA1: f64 = 0.01;
/// Absolute tolerance (px²) of the forward-backward check.
pub const FB_ALPHA2: f64 = 0.5;

/// Non-occlusion mask from forward-backward consistency: 1 where
/// `|F12 + F21(x + F12)|² < α1 (|F12|² + |F21(x + F12)|²) + α2`.
///
/// `F21` is sampled bilinearly; forward targets outside the grid (or touching invalid
/// backward flow) are occluded.
pub fn occlusion_mask(f12: &FlowField, f21: &FlowField) -> Result<BinaryMask> {
    f12.flow.check_dims(&f21.flow, "forward vs backward flow")?;
    let (back, back_valid) = warp_with(&f21.flow, f12, None, |x, y| *f21.valid.get(x, y))?;
    let (w, h) = f12.dims();
    Ok(Grid::from_fn(w, h, |x, y| {
        if !back_valid.get(x, y) {
            return false;
        }
        let f = f12.flow.get(x, y);
        let b = back.get(x, y);
        let du = f[0] + b[0];
        let dv = f[1] + b[1];
        let mag = f[0] * f[0] + f[1] * f[1] + b[0] * b[0] + b[1] * b[1];
        du * du + dv * dv < FB_ALPHA1 * mag + FB_ALPHA2
    }))
}

/// Quantile thresholds of the outlier mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutlierConfig {
    pub p_lo: f64,
    pub p_hi: f64,
    /// Below this many valid pixels the mask falls back to all-inlier.
    pub min_valid: usize,
}

impl Default for OutlierConfig {
    fn default() -> Self {
        OutlierConfig {
            p_lo: 0.05,
            p_hi: 0.80,
            min_valid: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutlierMask {
    /// 1 on inliers.
    pub mask: BinaryMask,
    /// Set when there were too few valid pixels and every pixel was kept.
    pub degenerate: bool,
}

/// Keeps pixels whose error lies between the `p_lo` and `p_hi` quantiles of the
/// valid errors (boundaries included). The `p` quantile of `n` sorted values is the
/// element at index `min(floor(p n), n - 1)`.
pub fn outlier_mask(
    pe: &Grid<f64>,
    valid: &BinaryMask,
    cfg: &OutlierConfig,
) -> Result<OutlierMask> {
    pe.check_dims(valid, "photometric error vs validity")?;
    if !(0.0 <= cfg.p_lo && cfg.p_lo <= cfg.p_hi && cfg.p_hi <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "outlier quantiles ({}, {}) out of order",
            cfg.p_lo, cfg.p_hi
        )));
    }
    let mut values: Vec<f64> = pe
        .iter()
        .zip(valid.iter())
        .filter(|(_, &v)| v)
        .map(|(&e, _)| e)
        .collect();
    let (w, h) = pe.dims();
    if values.len() < cfg.min_valid.max(1) {
        warn!(
            "outlier mask: only {} valid pixels, keeping every pixel",
            values.len()
        );
        return Ok(OutlierMask {
            mask: Grid::filled(w, h, true),
            degenerate: true,
        });
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let quantile = |p: f64| values[((p * n as f64).floor() as usize).min(n - 1)];
    let (lo, hi) = (quantile(cfg.p_lo), quantile(cfg.p_hi));
    let mask = Grid::from_fn(w, h, |x, y| {
        let e = *pe.get(x, y);
        *valid.get(x, y) && e >= lo && e <= hi
    });
    Ok(OutlierMask {
        mask,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn consistent_flows_are_visible() {
        let f12 = FlowField::constant(10, 8, [2.0, -1.0]);
        let f21 = FlowField::constant(10, 8, [-2.0, 1.0]);
        let m = occlusion_mask(&f12, &f21).unwrap();
        for y in 0..8 {
            for x in 0..10 {
                let inside = x + 2 <= 9 && y >= 1;
                assert_eq!(*m.get(x, y), inside, "({x},{y})");
            }
        }
    }

    #[test]
    fn inconsistent_flow_is_occluded() {
        let f12 = FlowField::constant(10, 8, [3.0, 0.0]);
        let f21 = FlowField::zeros(10, 8);
        let m = occlusion_mask(&f12, &f21).unwrap();
        assert!(m.iter().all(|&v| !v));
    }

    #[test]
    fn flow_leaving_image_is_occluded() {
        let f12 = FlowField::constant(6, 6, [20.0, 0.0]);
        let f21 = FlowField::constant(6, 6, [-20.0, 0.0]);
        assert!(occlusion_mask(&f12, &f21).unwrap().iter().all(|&v| !v));
    }

    #[test]
    fn constant_pe_keeps_everything() {
        let pe = Grid::filled(10, 10, 0.3);
        let valid = Grid::filled(10, 10, true);
        let m = outlier_mask(&pe, &valid, &OutlierConfig::default()).unwrap();
        assert!(!m.degenerate);
        assert!(m.mask.iter().all(|&v| v));
    }

    #[test]
    fn rank_ramp_keeps_ranks_5_to_80() {
        // shuffle the ranks over the grid so order in memory does not matter
        let pe = Grid::from_fn(10, 10, |x, y| ((x * 10 + y) * 37 % 100) as f64);
        let valid = Grid::filled(10, 10, true);
        let m = outlier_mask(&pe, &valid, &OutlierConfig::default()).unwrap();
        for (e, &keep) in pe.iter().zip(m.mask.iter()) {
            assert_eq!(keep, (5.0..=80.0).contains(e), "rank {e}");
        }
        assert_eq!(m.mask.iter().filter(|&&v| v).count(), 76);
    }

    #[test]
    fn too_few_valid_pixels_is_degenerate() {
        let pe = Grid::from_fn(10, 10, |x, _| x as f64);
        let valid = Grid::from_fn(10, 10, |_, y| y == 0);
        let m = outlier_mask(&pe, &valid, &OutlierConfig::default()).unwrap();
        assert!(m.degenerate);
        assert!(m.mask.iter().all(|&v| v));
    }

    proptest! {
        #[test]
        fn inlier_fraction_tracks_quantile_gap(values in prop::collection::vec(0.0f64..1.0, 64..400)) {
            let n = values.len();
            let pe = Grid::from_vec(n, 1, values).unwrap();
            let valid = Grid::filled(n, 1, true);
            let cfg = OutlierConfig::default();
            let m = outlier_mask(&pe, &valid, &cfg).unwrap();
            let frac = m.mask.iter().filter(|&&v| v).count() as f64 / n as f64;
            let gap = cfg.p_hi - cfg.p_lo;
            prop_assert!(frac >= gap - 2.0 / n as f64 && frac <= gap + 2.0 / n as f64);
        }
    }
}
