//! Self-supervision losses and the iteration-weighted total.
//!
//! All masked means divide by the full pixel count `H·W`, not by the mask count.
//! Pixels whose warp sample is invalid contribute zero.

use serde::{Deserialize, Serialize};

use crate::camera::{
    depth_is_valid, rigid_flow, synthesize_scene_flow, DepthMap, FlowField, PinholeCamera,
    SceneFlowUVD,
};
use crate::error::{Error, Result};
use crate::grid::{stable_sum, BinaryMask, CompensatedSum, CropWindow, Grid, Image};
use crate::lie::Twist;
use crate::masks::{outlier_mask, OutlierConfig};
use crate::motion_field::{
    aggregate_twists, field_exp, field_log, EgoMotion, SE3Field, SoftMask, TwistGrid,
};
use crate::warp::{photometric_error, warp_bilinear, warp_depth};

/// Loss hyper-parameters. Defaults are the published training values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// SSIM vs L1 balance inside the photometric error.
    pub alpha: f64,
    /// Edge-awareness of the smoothness terms.
    pub beta: f64,
    /// Offset in the mask regularizer.
    pub gamma: f64,
    /// Per-iteration decay of the total loss.
    pub zeta: f64,
    pub lambda_g: f64,
    pub lambda_s: f64,
    pub lambda_c: f64,
    pub lambda_m: f64,
    pub lambda_st: f64,
    pub lambda_sd: f64,
    pub lambda_sf: f64,
    /// Divide D1 by its mean before the depth smoothness term.
    pub normalize_depth_smoothness: bool,
    pub outlier: OutlierConfig,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.15,
            beta: 10.0,
            gamma: 1.0,
            zeta: 0.9,
            lambda_g: 0.1,
            lambda_s: 0.1,
            lambda_c: 0.1,
            lambda_m: 0.1,
            lambda_st: 0.001,
            lambda_sd: 1.0,
            lambda_sf: 1.0,
            normalize_depth_smoothness: true,
            outlier: OutlierConfig::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda_g,
            self.lambda_s,
            self.lambda_c,
            self.lambda_m,
            self.lambda_st,
            self.lambda_sd,
            self.lambda_sf,
        ];
        if !(self.zeta > 0.0 && self.zeta <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "zeta {} outside (0, 1]",
                self.zeta
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma {} must be positive",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::InvalidArgument(
                "alpha must be in [0, 1] and beta >= 0".into(),
            ));
        }
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidArgument(
                "loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// `ζ^(n-i)` for iteration `i` in `1..=n`.
    pub fn iteration_weight(&self, i: usize, n: usize) -> f64 {
        self.zeta.powi((n - i) as i32)
    }
}

/// Inputs shared by every loss: crop-size images and depths, plus optional uncropped
/// second-frame data for full-image warping and an optional right stereo view.
#[derive(Clone, Debug)]
pub struct SceneFrame {
    pub i1: Image,
    pub i2: Image,
    pub i2_full: Option<Image>,
    pub d1: DepthMap,
    pub d2: DepthMap,
    pub d2_full: Option<DepthMap>,
    /// Intrinsics of the crop.
    pub camera: PinholeCamera,
    /// Placement of the crop inside the full images.
    pub window: Option<CropWindow>,
    /// Right view of the first frame (crop-size), baseline in `camera`.
    pub stereo_right: Option<Image>,
}

impl SceneFrame {
    pub fn dims(&self) -> (usize, usize) {
        self.i1.dims()
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.i1.check_dims(&self.i2, "I2 vs I1")?;
        self.i1.check_dims(&self.d1, "D1 vs I1")?;
        self.i1.check_dims(&self.d2, "D2 vs I1")?;
        if let Some(r) = &self.stereo_right {
            self.i1.check_dims(r, "right view vs I1")?;
        }
        let (w, h) = self.dims();
        if let Some(win) = &self.window {
            if (win.width, win.height) != (w, h) {
                return Err(Error::shape(
                    "crop window vs I1",
                    (w, h),
                    (win.width, win.height),
                ));
            }
            if let Some(full) = &self.i2_full {
                win.check_inside(full.width(), full.height())?;
            }
            if let Some(full) = &self.d2_full {
                win.check_inside(full.width(), full.height())?;
            }
        }
        Ok(())
    }

    /// Second-frame image to warp from, with the window when full-image warping applies.
    pub fn warp_image(&self) -> (&Image, Option<&CropWindow>) {
        match (&self.i2_full, &self.window) {
            (Some(full), Some(win)) => (full, Some(win)),
            _ => (&self.i2, None),
        }
    }

    pub fn warp_depth_source(&self) -> (&DepthMap, Option<&CropWindow>) {
        match (&self.d2_full, &self.window) {
            (Some(full), Some(win)) => (full, Some(win)),
            _ => (&self.d2, None),
        }
    }

    /// Copy with every depth multiplied by `scale`.
    pub fn with_depth_scale(&self, scale: f64) -> SceneFrame {
        let s = |d: &DepthMap| d.map(|v| v * scale);
        SceneFrame {
            d1: s(&self.d1),
            d2: s(&self.d2),
            d2_full: self.d2_full.as_ref().map(s),
            ..self.clone()
        }
    }

    /// Copy without the uncropped data, so warps only see the crop.
    pub fn crop_only(&self) -> SceneFrame {
        SceneFrame {
            i2_full: None,
            d2_full: None,
            ..self.clone()
        }
    }
}

/// One iteration's motion estimate and everything derived from it.
#[derive(Clone, Debug)]
pub struct MotionEstimate {
    pub twists: TwistGrid,
    pub field: SE3Field,
    pub mask: SoftMask,
    pub scene_flow: SceneFlowUVD,
    pub ego: EgoMotion,
    pub ego_flow: FlowField,
}

impl MotionEstimate {
    pub fn from_field(
        field: SE3Field,
        mask: SoftMask,
        d1: &DepthMap,
        cam: &PinholeCamera,
    ) -> Result<Self> {
        let twists = field_log(&field);
        Self::build(twists, field, mask, d1, cam)
    }

    pub fn from_twists(
        twists: &Grid<Twist>,
        mask: SoftMask,
        d1: &DepthMap,
        cam: &PinholeCamera,
    ) -> Result<Self> {
        let field = field_exp(twists);
        let logs = Grid::from_fn(twists.width(), twists.height(), |x, y| {
            field.get(x, y).map(|_| *twists.get(x, y))
        });
        Self::build(logs, field, mask, d1, cam)
    }

    fn build(
        twists: TwistGrid,
        field: SE3Field,
        mask: SoftMask,
        d1: &DepthMap,
        cam: &PinholeCamera,
    ) -> Result<Self> {
        d1.check_dims(field.transforms(), "SE3 field vs D1")?;
        d1.check_dims(mask.values(), "soft mask vs D1")?;
        let scene_flow = synthesize_scene_flow(d1, &field, cam)?;
        let ego = aggregate_twists(&twists, &mask)?;
        let ego_flow = rigid_flow(d1, &ego.transform, cam);
        Ok(MotionEstimate {
            twists,
            field,
            mask,
            scene_flow,
            ego,
            ego_flow,
        })
    }

    /// Rebuilds the flows for a different first-frame depth (same motion and mask).
    pub fn with_depth(&self, d1: &DepthMap, cam: &PinholeCamera) -> Result<Self> {
        Self::build(
            self.twists.clone(),
            self.field.clone(),
            self.mask.clone(),
            d1,
            cam,
        )
    }

    pub fn dims(&self) -> (usize, usize) {
        self.field.dims()
    }
}

fn masked_mean(values: &Grid<f64>, masks: &[&BinaryMask]) -> f64 {
    let n = values.len() as f64;
    let sum = stable_sum(
        values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| masks.iter().all(|m| m.as_slice()[i]).then_some(*v)),
    );
    sum / n
}

/// Photometric error map of `I1` against `I2` warped by `flow`, with warp validity.
pub fn warped_photometric_error(
    frame: &SceneFrame,
    flow: &FlowField,
    alpha: f64,
) -> Result<(Grid<f64>, BinaryMask)> {
    let (src, win) = frame.warp_image();
    let (warped, valid) = warp_bilinear(src, flow, win)?;
    Ok((photometric_error(&frame.i1, &warped, alpha)?, valid))
}

/// `L_p = 1/(HW) Σ M_noc ⊙ pe(I1, w(I2, F12))`. Samples outside the warp source are
/// zero and still count, so only `M_noc` removes them.
pub fn loss_temporal_photometric(
    frame: &SceneFrame,
    est: &MotionEstimate,
    noc: &BinaryMask,
    alpha: f64,
) -> Result<f64> {
    frame.i1.check_dims(noc, "M_noc vs I1")?;
    let (pe, _) = warped_photometric_error(frame, &est.scene_flow.flow, alpha)?;
    Ok(masked_mean(&pe, &[noc]))
}

/// Photometric error under the ego-motion's rigid flow, used for both `L_p^ego` and
/// the outlier mask.
pub fn ego_photometric_error(
    frame: &SceneFrame,
    est: &MotionEstimate,
    alpha: f64,
) -> Result<(Grid<f64>, BinaryMask)> {
    warped_photometric_error(frame, &est.ego_flow, alpha)
}

/// `L_p^ego = 1/(HW) Σ M_ol ⊙ M_noc ⊙ pe(I1, w(I2, F^ego))`.
pub fn loss_ego_photometric(
    frame: &SceneFrame,
    est: &MotionEstimate,
    noc: &BinaryMask,
    outliers: &BinaryMask,
    alpha: f64,
) -> Result<f64> {
    frame.i1.check_dims(noc, "M_noc vs I1")?;
    frame.i1.check_dims(outliers, "M_ol vs I1")?;
    let (pe, _) = ego_photometric_error(frame, est, alpha)?;
    Ok(masked_mean(&pe, &[noc, outliers]))
}

/// Outlier mask for the ego-photometric term, from the current estimate.
pub fn ego_outlier_mask(
    frame: &SceneFrame,
    est: &MotionEstimate,
    noc: &BinaryMask,
    weights: &LossWeights,
) -> Result<crate::masks::OutlierMask> {
    let (pe, valid) = ego_photometric_error(frame, est, weights.alpha)?;
    let support = Grid::from_fn(valid.width(), valid.height(), |x, y| {
        *valid.get(x, y) && *noc.get(x, y)
    });
    outlier_mask(&pe, &support, &weights.outlier)
}

/// Normalized depth difference `|a - b| / (a + b)`.
#[inline]
pub fn geometric_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a + b)
}

/// `L_g = 1/(HW) Σ M_noc ⊙ ge(D̄1, w(D2, F12))`.
pub fn loss_geometric(frame: &SceneFrame, est: &MotionEstimate, noc: &BinaryMask) -> Result<f64> {
    frame.i1.check_dims(noc, "M_noc vs I1")?;
    let (src, win) = frame.warp_depth_source();
    let (warped, valid) = warp_depth(src, &est.scene_flow.flow, win)?;
    let dbar = est.scene_flow.transformed_depth(&frame.d1);
    let (w, h) = frame.dims();
    let mut sum = CompensatedSum::new();
    for y in 0..h {
        for x in 0..w {
            if !(*noc.get(x, y) && *valid.get(x, y) && *est.scene_flow.flow.valid.get(x, y)) {
                continue;
            }
            let (a, b) = (*dbar.get(x, y), *warped.get(x, y));
            if !(depth_is_valid(a) && depth_is_valid(b)) {
                return Err(Error::InvalidArgument(format!(
                    "non-positive depth at ({x}, {y}): transformed {a}, warped {b}"
                )));
            }
            sum.add(geometric_error(a, b));
        }
    }
    Ok(sum.value() / (w * h) as f64)
}

/// `exp(-β |∂I|)` for forward differences along x (`(W-1)×H`) and y (`W×(H-1)`), with
/// the gradient averaged over channels.
pub(crate) fn edge_weights(image: &Image, beta: f64) -> (Grid<f64>, Grid<f64>) {
    let (w, h) = image.dims();
    let grad = |a: &[f64; 3], b: &[f64; 3]| {
        ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0
    };
    let wx = Grid::from_fn(w.saturating_sub(1), h, |x, y| {
        (-beta * grad(image.get(x + 1, y), image.get(x, y))).exp()
    });
    let wy = Grid::from_fn(w, h.saturating_sub(1), |x, y| {
        (-beta * grad(image.get(x, y + 1), image.get(x, y))).exp()
    });
    (wx, wy)
}

/// Edge-aware `order`-th order smoothness of the multi-channel prediction `channels`,
/// weighted by `exp(-β |∂I|)`; each direction is averaged over the positions where its
/// forward difference exists, then channels are averaged.
pub fn loss_smoothness(
    channels: &[Grid<f64>],
    image: &Image,
    order: usize,
    beta: f64,
) -> Result<f64> {
    if !(order == 1 || order == 2) {
        return Err(Error::InvalidArgument(format!(
            "smoothness order {order} not in {{1, 2}}"
        )));
    }
    if channels.is_empty() {
        return Err(Error::InvalidArgument(
            "smoothness needs at least one channel".into(),
        ));
    }
    for c in channels {
        image.check_dims(c, "smoothness channel vs image")?;
    }
    let (w, h) = image.dims();
    let (wx, wy) = edge_weights(image, beta);
    let diff = |o: &Grid<f64>, x: usize, y: usize, dx: usize, dy: usize| -> f64 {
        if order == 1 {
            o.get(x + dx, y + dy) - o.get(x, y)
        } else {
            o.get(x + 2 * dx, y + 2 * dy) - 2.0 * o.get(x + dx, y + dy) + o.get(x, y)
        }
    };
    let mut total = 0.0;
    for o in channels {
        let mut sx = CompensatedSum::new();
        let mut nx = 0usize;
        if w > order {
            for y in 0..h {
                for x in 0..w - order {
                    sx.add(diff(o, x, y, 1, 0).abs() * wx.get(x, y));
                    nx += 1;
                }
            }
        }
        let mut sy = CompensatedSum::new();
        let mut ny = 0usize;
        if h > order {
            for y in 0..h - order {
                for x in 0..w {
                    sy.add(diff(o, x, y, 0, 1).abs() * wy.get(x, y));
                    ny += 1;
                }
            }
        }
        if nx > 0 {
            total += sx.value() / nx as f64;
        }
        if ny > 0 {
            total += sy.value() / ny as f64;
        }
    }
    Ok(total / channels.len() as f64)
}

/// Smoothness sub-terms and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessTerms {
    /// First order on the twist channels.
    pub twist: f64,
    /// First order on (optionally mean-normalized) D1.
    pub depth: f64,
    /// Second order on the optical flow.
    pub flow: f64,
    /// `λ_st L_st + λ_sd L_sd + λ_sf L_sf`
    pub total: f64,
}

pub fn loss_smoothness_total(
    est: &MotionEstimate,
    d1: &DepthMap,
    i1: &Image,
    weights: &LossWeights,
) -> Result<SmoothnessTerms> {
    let (w, h) = i1.dims();
    let twist_channels: Vec<Grid<f64>> = (0..6)
        .map(|c| {
            Grid::from_fn(w, h, |x, y| {
                est.twists.get(x, y).map_or(0.0, |t| t.component(c))
            })
        })
        .collect();
    let twist = loss_smoothness(&twist_channels, i1, 1, weights.beta)?;

    let valid_depths: Vec<f64> = d1.iter().copied().filter(|d| depth_is_valid(*d)).collect();
    let mean_depth = if weights.normalize_depth_smoothness && !valid_depths.is_empty() {
        stable_sum(valid_depths.iter().copied()) / valid_depths.len() as f64
    } else {
        1.0
    };
    let depth_channel = d1.map(|&d| {
        if depth_is_valid(d) {
            d / mean_depth
        } else {
            0.0
        }
    });
    let depth = loss_smoothness(std::slice::from_ref(&depth_channel), i1, 1, weights.beta)?;

    let f = &est.scene_flow.flow;
    let flow_channels: Vec<Grid<f64>> = (0..2)
        .map(|c| Grid::from_fn(w, h, |x, y| f.at(x, y).map_or(0.0, |uv| uv[c])))
        .collect();
    let flow = loss_smoothness(&flow_channels, i1, 2, weights.beta)?;
    Ok(SmoothnessTerms {
        twist,
        depth,
        flow,
        total: weights.lambda_st * twist + weights.lambda_sd * depth + weights.lambda_sf * flow,
    })
}

/// `L_c = 1/(HW) Σ M_r |Log(T) - Log(T_ego)|₁`.
pub fn loss_motion_consistency(est: &MotionEstimate) -> f64 {
    let n = est.twists.len() as f64;
    let ego = est.ego.twist;
    stable_sum(
        est.twists
            .iter()
            .zip(est.mask.values().iter())
            .filter_map(|(xi, m)| xi.map(|xi| m * (xi - ego).l1_norm())),
    ) / n
}

/// `L_m = 1/(HW) Σ (1 - M_r) / (γ + M_r)`.
pub fn loss_mask_regularization(mask: &SoftMask, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma {gamma} must be positive"
        )));
    }
    let v = mask.values();
    Ok(stable_sum(v.iter().map(|m| (1.0 - m) / (gamma + m))) / v.len() as f64)
}

/// Stereo reprojection loss: `pe(I1, w(I_right, (-disp(D1), 0)))` averaged over
/// pixels with a valid sample. Pixels without a sample are filled from `I1` before
/// SSIM so they do not disturb their neighbours.
pub fn loss_spatial_photometric(frame: &SceneFrame, alpha: f64) -> Result<f64> {
    let right = frame
        .stereo_right
        .as_ref()
        .ok_or(Error::MissingInput("right stereo view"))?;
    let cam = &frame.camera;
    let (w, h) = frame.dims();
    let mut valid = Grid::filled(w, h, false);
    let flow = Grid::from_fn(w, h, |x, y| {
        match cam.disparity_from_depth(*frame.d1.get(x, y)) {
            Ok(d) => {
                valid.set(x, y, true);
                [-d, 0.0]
            }
            Err(_) => [0.0; 2],
        }
    });
    let stereo = FlowField { flow, valid };
    let (mut warped, sample_valid) = warp_bilinear(right, &stereo, None)?;
    // unsampled pixels borrow I1 so they do not leak into neighbouring SSIM windows
    for (i, ok) in sample_valid.iter().enumerate() {
        if !ok {
            warped.as_mut_slice()[i] = frame.i1.as_slice()[i];
        }
    }
    let pe = photometric_error(&frame.i1, &warped, alpha)?;
    let count = sample_valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::NoValidPixels("spatial photometric loss"));
    }
    let sum = stable_sum(
        pe.iter()
            .zip(sample_valid.iter())
            .filter(|(_, &v)| v)
            .map(|(e, _)| *e),
    );
    Ok(sum / count as f64)
}

/// Unweighted loss terms of one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTerms {
    pub l_p: f64,
    pub l_p_ego: f64,
    pub l_g: f64,
    pub l_s: SmoothnessTerms,
    pub l_c: f64,
    pub l_m: f64,
}

impl IterationTerms {
    /// `L_p + L_p^ego + λ_g L_g + λ_s L_s + λ_c L_c + λ_m L_m`.
    pub fn weighted_sum(&self, weights: &LossWeights) -> f64 {
        self.l_p
            + self.l_p_ego
            + weights.lambda_g * self.l_g
            + weights.lambda_s * self.l_s.total
            + weights.lambda_c * self.l_c
            + weights.lambda_m * self.l_m
    }
}

/// Evaluates every per-iteration term. With `outliers = None` the outlier mask is
/// recomputed from this estimate's ego-photometric error.
pub fn iteration_terms(
    frame: &SceneFrame,
    est: &MotionEstimate,
    noc: &BinaryMask,
    outliers: Option<&BinaryMask>,
    weights: &LossWeights,
) -> Result<IterationTerms> {
    let computed;
    let ol = match outliers {
        Some(m) => m,
        None => {
            computed = ego_outlier_mask(frame, est, noc, weights)?.mask;
            &computed
        }
    };
    Ok(IterationTerms {
        l_p: loss_temporal_photometric(frame, est, noc, weights.alpha)?,
        l_p_ego: loss_ego_photometric(frame, est, noc, ol, weights.alpha)?,
        l_g: loss_geometric(frame, est, noc)?,
        l_s: loss_smoothness_total(est, &frame.d1, &frame.i1, weights)?,
        l_c: loss_motion_consistency(est),
        l_m: loss_mask_regularization(&est.mask, weights.gamma)?,
    })
}

/// Occlusion and outlier masks for [`loss_total`].
#[derive(Clone, Debug)]
pub struct LossMasks {
    pub noc: BinaryMask,
    /// Fixed outlier mask; recomputed per iteration when `None`.
    pub outlier: Option<BinaryMask>,
}

impl LossMasks {
    pub fn all_visible(width: usize, height: usize) -> Self {
        LossMasks {
            noc: Grid::filled(width, height, true),
            outlier: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationBreakdown {
    /// 1-based iteration index.
    pub iteration: usize,
    /// `ζ^(N-i)`
    pub weight: f64,
    pub terms: IterationTerms,
    /// Unscaled by `weight`.
    pub sum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Absent when there is no stereo view.
    pub l_d: Option<f64>,
    pub iterations: Vec<IterationBreakdown>,
}

/// `L_d + Σ_i ζ^(N-i) (L_p^i + L_p^ego,i + λ_g L_g^i + λ_s L_s^i + λ_c L_c^i + λ_m L_m^i)`.
/// `L_d` is included only when the frame carries a right stereo view.
pub fn loss_total(
    frame: &SceneFrame,
    estimates: &[MotionEstimate],
    masks: &LossMasks,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    frame.validate()?;
    if estimates.is_empty() {
        return Err(Error::InvalidArgument(
            "loss_total needs at least one estimate".into(),
        ));
    }
    let n = estimates.len();
    let mut iterations = Vec::with_capacity(n);
    for (k, est) in estimates.iter().enumerate() {
        let i = k + 1;
        let terms = iteration_terms(frame, est, &masks.noc, masks.outlier.as_ref(), weights)?;
        iterations.push(IterationBreakdown {
            iteration: i,
            weight: weights.iteration_weight(i, n),
            sum: terms.weighted_sum(weights),
            terms,
        });
    }
    let l_d = match frame.stereo_right {
        Some(_) => Some(loss_spatial_photometric(frame, weights.alpha)?),
        None => None,
    };
    let total = l_d.unwrap_or(0.0) + stable_sum(iterations.iter().map(|it| it.weight * it.sum));
    Ok(LossBreakdown {
        total,
        l_d,
        iterations,
    })
}
