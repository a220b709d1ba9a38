//! KITTI-style scene-flow, depth and odometry metrics.
//!
//! Missing predictions (invalid pixels of a predicted map) are scored as zero
//! disparity or zero flow, so they count against the method rather than being
//! skipped. Rates are percentages over the ground-truth valid pixels.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{DepthMap, DisparityMap, FlowField};
use crate::error::{Error, Result};
use crate::grid::{stable_sum, BinaryMask, Grid};
use crate::lie::RigidTransform;

/// Outlier rule shared by disparity and flow: absolute error above `abs_px` and
/// relative error above `rel`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutlierThresholds {
    pub abs_px: f64,
    pub rel: f64,
}

impl Default for OutlierThresholds {
    fn default() -> Self {
        OutlierThresholds {
            abs_px: 3.0,
            rel: 0.05,
        }
    }
}

impl OutlierThresholds {
    #[inline]
    pub fn is_outlier(&self, err: f64, gt_magnitude: f64) -> bool {
        // NaN errors are outliers
        !(err <= self.abs_px || err <= self.rel * gt_magnitude)
    }
}

fn combined_valid(gt_valid: &BinaryMask, valid: Option<&BinaryMask>) -> Result<BinaryMask> {
    match valid {
        Some(v) => {
            gt_valid.check_dims(v, "evaluation mask vs ground truth")?;
            Ok(Grid::from_fn(
                gt_valid.width(),
                gt_valid.height(),
                |x, y| *gt_valid.get(x, y) && *v.get(x, y),
            ))
        }
        None => Ok(gt_valid.clone()),
    }
}

fn rate(outliers: &BinaryMask, valid: &BinaryMask, what: &'static str) -> Result<f64> {
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::NoValidPixels(what));
    }
    let k = outliers
        .iter()
        .zip(valid.iter())
        .filter(|(&o, &v)| o && v)
        .count();
    Ok(100.0 * k as f64 / n as f64)
}

/// Per-pixel disparity outliers over `gt.valid ∧ valid`.
pub fn disparity_outlier_mask(
    pred: &DisparityMap,
    gt: &DisparityMap,
    valid: Option<&BinaryMask>,
    th: &OutlierThresholds,
) -> Result<BinaryMask> {
    pred.disp
        .check_dims(&gt.disp, "predicted vs ground-truth disparity")?;
    let mask = combined_valid(&gt.valid, valid)?;
    let (w, h) = gt.dims();
    Ok(Grid::from_fn(w, h, |x, y| {
        if !mask.get(x, y) {
            return false;
        }
        let g = *gt.disp.get(x, y);
        let p = pred.at(x, y).unwrap_or(0.0);
        th.is_outlier((p - g).abs(), g.abs())
    }))
}

/// D1-all / D2-all: percentage of disparity outliers.
pub fn disparity_outliers(
    pred: &DisparityMap,
    gt: &DisparityMap,
    valid: Option<&BinaryMask>,
    th: &OutlierThresholds,
) -> Result<f64> {
    let out = disparity_outlier_mask(pred, gt, valid, th)?;
    rate(
        &out,
        &combined_valid(&gt.valid, valid)?,
        "disparity outliers",
    )
}

fn endpoint_errors(pred: &FlowField, gt: &FlowField) -> Result<Grid<f64>> {
    pred.flow
        .check_dims(&gt.flow, "predicted vs ground-truth flow")?;
    let (w, h) = gt.dims();
    Ok(Grid::from_fn(w, h, |x, y| {
        let g = gt.flow.get(x, y);
        let p = pred.at(x, y).unwrap_or([0.0; 2]);
        (p[0] - g[0]).hypot(p[1] - g[1])
    }))
}

pub fn flow_outlier_mask(
    pred: &FlowField,
    gt: &FlowField,
    valid: Option<&BinaryMask>,
    th: &OutlierThresholds,
) -> Result<BinaryMask> {
    let err = endpoint_errors(pred, gt)?;
    let mask = combined_valid(&gt.valid, valid)?;
    let (w, h) = gt.dims();
    Ok(Grid::from_fn(w, h, |x, y| {
        let g = gt.flow.get(x, y);
        *mask.get(x, y) && th.is_outlier(*err.get(x, y), g[0].hypot(g[1]))
    }))
}

/// F1-all: percentage of flow outliers.
pub fn flow_outliers(
    pred: &FlowField,
    gt: &FlowField,
    valid: Option<&BinaryMask>,
    th: &OutlierThresholds,
) -> Result<f64> {
    let out = flow_outlier_mask(pred, gt, valid, th)?;
    rate(&out, &combined_valid(&gt.valid, valid)?, "flow outliers")
}

/// Mean end-point error over `gt.valid ∧ mask`.
pub fn epe(pred: &FlowField, gt: &FlowField, mask: Option<&BinaryMask>) -> Result<f64> {
    let err = endpoint_errors(pred, gt)?;
    let m = combined_valid(&gt.valid, mask)?;
    let vals: Vec<f64> = err
        .iter()
        .zip(m.iter())
        .filter(|(_, &v)| v)
        .map(|(&e, _)| e)
        .collect();
    if vals.is_empty() {
        return Err(Error::NoValidPixels("end-point error"));
    }
    Ok(stable_sum(vals.iter().copied()) / vals.len() as f64)
}

/// End-point error over all valid pixels and split by a non-occlusion mask.
/// A side with no pixels is `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpeSplit {
    pub all: f64,
    pub noc: Option<f64>,
    pub occ: Option<f64>,
}

pub fn epe_split(pred: &FlowField, gt: &FlowField, noc: &BinaryMask) -> Result<EpeSplit> {
    let occ = noc.map(|v| !v);
    let side = |m: &BinaryMask| match epe(pred, gt, Some(m)) {
        Ok(v) => Ok(Some(v)),
        Err(Error::NoValidPixels(_)) => Ok(None),
        Err(e) => Err(e),
    };
    Ok(EpeSplit {
        all: epe(pred, gt, None)?,
        noc: side(noc)?,
        occ: side(&occ)?,
    })
}

/// Union of the three per-pixel outlier masks.
pub fn sceneflow_outlier_mask(
    d1_out: &BinaryMask,
    d2_out: &BinaryMask,
    f1_out: &BinaryMask,
) -> Result<BinaryMask> {
    d1_out.check_dims(d2_out, "D1 vs D2 outliers")?;
    d1_out.check_dims(f1_out, "D1 vs F1 outliers")?;
    Ok(Grid::from_fn(d1_out.width(), d1_out.height(), |x, y| {
        *d1_out.get(x, y) || *d2_out.get(x, y) || *f1_out.get(x, y)
    }))
}

/// SF-all: a pixel is an outlier if it is one on any of D1, D2 or F1.
pub fn sceneflow_outliers(
    d1_out: &BinaryMask,
    d2_out: &BinaryMask,
    f1_out: &BinaryMask,
    valid: &BinaryMask,
) -> Result<f64> {
    let union = sceneflow_outlier_mask(d1_out, d2_out, f1_out)?;
    union.check_dims(valid, "scene-flow outliers vs valid mask")?;
    rate(&union, valid, "scene-flow outliers")
}

/// Disparities of both frames registered to frame 1, plus optical flow.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFlowMaps {
    pub d1: DisparityMap,
    pub d2: DisparityMap,
    pub flow: FlowField,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFlowMetrics {
    pub d1_all: f64,
    pub d2_all: f64,
    pub f1_all: f64,
    pub sf_all: f64,
    pub epe: EpeSplit,
}

/// D1/D2/F1 are rated over their own ground-truth pixels; SF-all over pixels
/// where all three are valid. `noc` splits the end-point error.
pub fn evaluate_scene_flow(
    pred: &SceneFlowMaps,
    gt: &SceneFlowMaps,
    noc: Option<&BinaryMask>,
    th: &OutlierThresholds,
) -> Result<SceneFlowMetrics> {
    let d1_out = disparity_outlier_mask(&pred.d1, &gt.d1, None, th)?;
    let d2_out = disparity_outlier_mask(&pred.d2, &gt.d2, None, th)?;
    let f1_out = flow_outlier_mask(&pred.flow, &gt.flow, None, th)?;
    gt.d1.disp.check_dims(&gt.flow.flow, "disparity vs flow")?;
    let (w, h) = gt.d1.dims();
    let all_valid = Grid::from_fn(w, h, |x, y| {
        *gt.d1.valid.get(x, y) && *gt.d2.valid.get(x, y) && *gt.flow.valid.get(x, y)
    });
    let epe = match noc {
        Some(m) => epe_split(&pred.flow, &gt.flow, m)?,
        None => EpeSplit {
            all: epe(&pred.flow, &gt.flow, None)?,
            noc: None,
            occ: None,
        },
    };
    Ok(SceneFlowMetrics {
        d1_all: rate(&d1_out, &gt.d1.valid, "D1")?,
        d2_all: rate(&d2_out, &gt.d2.valid, "D2")?,
        f1_all: rate(&f1_out, &gt.flow.valid, "F1")?,
        sf_all: sceneflow_outliers(&d1_out, &d2_out, &f1_out, &all_valid)?,
        epe,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthConfig {
    pub min_depth: f64,
    pub max_depth: f64,
    /// Rescale predictions by median(gt) / median(pred) before scoring.
    pub median_scaling: bool,
}

impl Default for DepthConfig {
    fn default() -> Self {
        DepthConfig {
            min_depth: 1e-3,
            max_depth: 80.0,
            median_scaling: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Standard depth error metrics over pixels with `min_depth < gt < max_depth`
/// (and `valid`, if given). Predictions are clamped to `[min_depth, max_depth]`.
pub fn depth_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    valid: Option<&BinaryMask>,
    cfg: &DepthConfig,
) -> Result<DepthMetrics> {
    pred.check_dims(gt, "predicted vs ground-truth depth")?;
    if let Some(v) = valid {
        gt.check_dims(v, "depth mask vs ground truth")?;
    }
    if !(cfg.min_depth > 0.0 && cfg.max_depth > cfg.min_depth) {
        return Err(Error::InvalidArgument(format!(
            "depth range ({}, {}) is empty",
            cfg.min_depth, cfg.max_depth
        )));
    }
    let mut pairs = Vec::new();
    for (i, (&p, &g)) in pred.iter().zip(gt.iter()).enumerate() {
        let keep = valid.is_none_or(|v| v.as_slice()[i]);
        if keep && g > cfg.min_depth && g < cfg.max_depth {
            pairs.push((if p.is_finite() { p } else { cfg.max_depth }, g));
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoValidPixels("depth metrics"));
    }
    if cfg.median_scaling {
        let s = median(pairs.iter().map(|p| p.1).collect())
            / median(pairs.iter().map(|p| p.0).collect());
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Degenerate(
                "median scaling of a non-positive prediction".into(),
            ));
        }
        pairs.iter_mut().for_each(|p| p.0 *= s);
    }
    for p in &mut pairs {
        p.0 = p.0.clamp(cfg.min_depth, cfg.max_depth);
    }
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(f64, f64) -> f64| stable_sum(pairs.iter().map(|&(p, g)| f(p, g))) / n;
    let ratio = |p: f64, g: f64| (p / g).max(g / p);
    Ok(DepthMetrics {
        abs_rel: mean(&|p, g| (p - g).abs() / g),
        sq_rel: mean(&|p, g| (p - g).powi(2) / g),
        rmse: mean(&|p, g| (p - g).powi(2)).sqrt(),
        rmse_log: mean(&|p, g| (p.ln() - g.ln()).powi(2)).sqrt(),
        a1: mean(&|p, g| f64::from(u8::from(ratio(p, g) < 1.25))),
        a2: mean(&|p, g| f64::from(u8::from(ratio(p, g) < 1.25f64.powi(2)))),
        a3: mean(&|p, g| f64::from(u8::from(ratio(p, g) < 1.25f64.powi(3)))),
    })
}

/// Camera-to-world poses at strictly increasing frame indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    indices: Vec<usize>,
    poses: Vec<RigidTransform>,
}

impl Trajectory {
    /// Poses at frames `0..n`.
    pub fn new(poses: Vec<RigidTransform>) -> Result<Self> {
        Trajectory::with_indices((0..poses.len()).collect(), poses)
    }

    pub fn with_indices(indices: Vec<usize>, poses: Vec<RigidTransform>) -> Result<Self> {
        if indices.len() != poses.len() {
            return Err(Error::InvalidArgument(format!(
                "{} indices for {} poses",
                indices.len(),
                poses.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "frame indices must strictly increase".into(),
            ));
        }
        if let Some(i) = poses.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("pose {i}")));
        }
        Ok(Trajectory { indices, poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn poses(&self) -> &[RigidTransform] {
        &self.poses
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.translation).collect()
    }

    /// Cumulative path length along the camera centers.
    pub fn distances(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for (i, p) in self.poses.iter().enumerate() {
            if i > 0 {
                acc += (p.translation - self.poses[i - 1].translation).norm();
            }
            out.push(acc);
        }
        out
    }

    /// Applies `x ↦ s R x + t` to the trajectory: positions are mapped, orientations rotated.
    pub fn transformed(&self, sim: &Similarity) -> Trajectory {
        let r = sim.transform.rotation;
        let poses = self
            .poses
            .iter()
            .map(|p| RigidTransform::new(r * p.rotation, sim.apply(&p.translation)))
            .collect();
        Trajectory {
            indices: self.indices.clone(),
            poses,
        }
    }
}

/// `x ↦ scale · R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub transform: RigidTransform,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.transform.rotation * (self.scale * p) + self.transform.translation
    }
}

/// Least-squares similarity (rigid if `with_scale` is false) taking the predicted
/// camera centers onto the ground-truth ones.
pub fn umeyama_align(pred: &Trajectory, gt: &Trajectory, with_scale: bool) -> Result<Similarity> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectory lengths differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < 3 {
        return Err(Error::Degenerate("alignment needs at least 3 poses".into()));
    }
    let p = pred.positions();
    let g = gt.positions();
    let n = p.len() as f64;
    let mu_p = p.iter().sum::<Vector3<f64>>() / n;
    let mu_g = g.iter().sum::<Vector3<f64>>() / n;
    let var_p = p.iter().map(|x| (x - mu_p).norm_squared()).sum::<f64>() / n;
    let mut cov = Matrix3::zeros();
    for (a, b) in g.iter().zip(&p) {
        cov += (a - mu_g) * (b - mu_p).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = svd.singular_values;
    if !(var_p > 1e-12) || sv[order[1]] <= 1e-12 * sv[order[0]].max(f64::MIN_POSITIVE) {
        return Err(Error::Degenerate(
            "trajectory points are coincident or collinear".into(),
        ));
    }
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        // flip the axis of the smallest singular value
        s[(order[2], order[2])] = -1.0;
    }
    let r = u * s * v_t;
    let scale = if with_scale {
        (svd.singular_values.component_mul(&s.diagonal())).sum() / var_p
    } else {
        1.0
    };
    let t = mu_g - scale * (r * mu_p);
    Ok(Similarity {
        scale,
        transform: RigidTransform::from_matrix(&r, t)?,
    })
}

/// Average relative-pose errors over every start frame and every subsequence length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdometryErrors {
    /// Translation error, percent of the subsequence length.
    pub t_err: f64,
    /// Rotation error, degrees per 100 m.
    pub r_err: f64,
    pub segments: usize,
    pub per_length: Vec<LengthErrors>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthErrors {
    pub length: f64,
    pub t_err: f64,
    pub r_err: f64,
    pub segments: usize,
}

pub const DEFAULT_ODOMETRY_LENGTHS: [f64; 8] =
    [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

/// For each start frame `i` and length `L`, the end frame is the first `j` with
/// `dist[j] >= dist[i] + L` along the ground truth; the error of the relative
/// motions is divided by `L`.
pub fn odometry_errors(
    pred: &Trajectory,
    gt: &Trajectory,
    lengths: &[f64],
) -> Result<OdometryErrors> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectory lengths differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if lengths.is_empty() || lengths.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "bad subsequence lengths {lengths:?}"
        )));
    }
    let dist = gt.distances();
    let mut per_length = Vec::with_capacity(lengths.len());
    let (mut t_all, mut r_all) = (Vec::new(), Vec::new());
    for &len in lengths {
        let (mut t_errs, mut r_errs) = (Vec::new(), Vec::new());
        for first in 0..gt.len() {
            let target = dist[first] + len;
            // dist is non-decreasing, so the end frame is a partition point
            let last = first + dist[first..].partition_point(|&d| d < target);
            if last >= gt.len() {
                break;
            }
            let gt_rel = gt.poses[first].inverse().compose(&gt.poses[last]);
            let pred_rel = pred.poses[first].inverse().compose(&pred.poses[last]);
            let err = gt_rel.inverse().compose(&pred_rel);
            t_errs.push(err.translation.norm() / len);
            r_errs.push(err.rotation_angle() / len);
        }
        if t_errs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no subsequence of length {len} m (path is {:.3} m)",
                dist.last().copied().unwrap_or(0.0)
            )));
        }
        let k = t_errs.len() as f64;
        per_length.push(LengthErrors {
            length: len,
            t_err: 100.0 * stable_sum(t_errs.iter().copied()) / k,
            r_err: r_per_100m(stable_sum(r_errs.iter().copied()) / k),
            segments: t_errs.len(),
        });
        t_all.extend(t_errs);
        r_all.extend(r_errs);
    }
    let k = t_all.len() as f64;
    Ok(OdometryErrors {
        t_err: 100.0 * stable_sum(t_all) / k,
        r_err: r_per_100m(stable_sum(r_all) / k),
        segments: k as usize,
        per_length,
    })
}

fn r_per_100m(rad_per_m: f64) -> f64 {
    rad_per_m.to_degrees() * 100.0
}

/// Union of the metric groups; groups that were not evaluated are absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d1_all: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d2_all: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1_all: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sf_all: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epe_all: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epe_noc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epe_occ: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abs_rel: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sq_rel: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse_log: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a3: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_err: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_err: Option<f64>,
}

impl From<&SceneFlowMetrics> for MetricReport {
    fn from(m: &SceneFlowMetrics) -> Self {
        MetricReport {
            d1_all: Some(m.d1_all),
            d2_all: Some(m.d2_all),
            f1_all: Some(m.f1_all),
            sf_all: Some(m.sf_all),
            epe_all: Some(m.epe.all),
            epe_noc: m.epe.noc,
            epe_occ: m.epe.occ,
            ..Default::default()
        }
    }
}

impl From<&DepthMetrics> for MetricReport {
    fn from(m: &DepthMetrics) -> Self {
        MetricReport {
            abs_rel: Some(m.abs_rel),
            sq_rel: Some(m.sq_rel),
            rmse: Some(m.rmse),
            rmse_log: Some(m.rmse_log),
            a1: Some(m.a1),
            a2: Some(m.a2),
            a3: Some(m.a3),
            ..Default::default()
        }
    }
}

impl From<&OdometryErrors> for MetricReport {
    fn from(m: &OdometryErrors) -> Self {
        MetricReport {
            t_err: Some(m.t_err),
            r_err: Some(m.r_err),
            ..Default::default()
        }
    }
}

impl MetricReport {
    fn rows(&self) -> Vec<(&'static str, Option<f64>, &'static str)> {
        vec![
            ("D1-all", self.d1_all, "%"),
            ("D2-all", self.d2_all, "%"),
            ("F1-all", self.f1_all, "%"),
            ("SF-all", self.sf_all, "%"),
            ("EPE-all", self.epe_all, "px"),
            ("EPE-noc", self.epe_noc, "px"),
            ("EPE-occ", self.epe_occ, "px"),
            ("Abs Rel", self.abs_rel, ""),
            ("Sq Rel", self.sq_rel, ""),
            ("RMSE", self.rmse, "m"),
            ("RMSE log", self.rmse_log, ""),
            ("A1", self.a1, ""),
            ("A2", self.a2, ""),
            ("A3", self.a3, ""),
            ("t_err", self.t_err, "%"),
            ("r_err", self.r_err, "deg/100m"),
        ]
    }

    /// Two-column plain-text table of the present metrics.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>12}  unit", "metric", "value");
        for (name, value, unit) in self.rows() {
            if let Some(v) = value {
                let line = format!("{name:<10} {v:>12.6}  {unit}");
                let _ = writeln!(out, "{}", line.trim_end());
            }
        }
        out
    }
}
