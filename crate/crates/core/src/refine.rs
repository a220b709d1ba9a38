//! Direct minimization of the iteration-weighted total loss over a blockwise twist
//! field, per-block mask logits and a global depth log-scale.
//!
//! The snapshot list entering the total is a ring buffer of the last `N` accepted
//! iterates; only the newest snapshot depends on the free motion parameters, while the
//! shared depth scale enters every snapshot.

use std::collections::VecDeque;
use std::io::Write;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{depth_is_valid, pixel_uvd, rigid_flow, DepthMap};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid, Image, Sample};
use crate::lie::{exp, Twist};
use crate::losses::{
    edge_weights, ego_outlier_mask, geometric_error, iteration_terms, loss_spatial_photometric,
    warped_photometric_error, IterationTerms, LossMasks, LossWeights, MotionEstimate, SceneFrame,
};
use crate::motion_field::{aggregate_gradients, SoftMask, TwistGrid};
use crate::warp::{pe_pixel, sample_bilinear};

/// Low-dimensional motion parameters: one twist and one mask logit per `B×B` block,
/// plus a global log-scale applied to both depth maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub block_size: usize,
    pub twists: Grid<Twist>,
    pub logits: Grid<f64>,
    pub depth_log_scale: f64,
}

impl BlockParams {
    /// Block-grid size `(⌈W/B⌉, ⌈H/B⌉)`.
    pub fn grid_dims(block_size: usize, width: usize, height: usize) -> (usize, usize) {
        (width.div_ceil(block_size), height.div_ceil(block_size))
    }

    /// Identity motion, mask 0.5 everywhere, unit depth scale.
    pub fn identity(block_size: usize, width: usize, height: usize) -> Result<Self> {
        if block_size == 0 || width == 0 || height == 0 {
            return Err(Error::InvalidArgument(
                "block size and image size must be positive".into(),
            ));
        }
        let (c, r) = Self::grid_dims(block_size, width, height);
        Ok(BlockParams {
            block_size,
            twists: Grid::filled(c, r, Twist::zero()),
            logits: Grid::filled(c, r, 0.0),
            depth_log_scale: 0.0,
        })
    }

    /// Block means of per-pixel twists; logits from the block-mean mask clamped to
    /// `[-max_logit, max_logit]`.
    pub fn from_pixels(
        twists: &Grid<Twist>,
        mask: &SoftMask,
        block_size: usize,
        max_logit: f64,
    ) -> Result<Self> {
        twists.check_dims(mask.values(), "mask vs twists")?;
        let (w, h) = twists.dims();
        let mut p = Self::identity(block_size, w, h)?;
        let (c, r) = p.twists.dims();
        for by in 0..r {
            for bx in 0..c {
                let mut sum = Twist::zero();
                let mut m = 0.0;
                let mut n = 0.0;
                for y in by * block_size..((by + 1) * block_size).min(h) {
                    for x in bx * block_size..((bx + 1) * block_size).min(w) {
                        sum += *twists.get(x, y);
                        m += mask.get(x, y);
                        n += 1.0;
                    }
                }
                p.twists.set(bx, by, sum * (1.0 / n));
                let mean = m / n;
                let logit = (mean / (1.0 - mean)).ln();
                p.logits.set(bx, by, logit.clamp(-max_logit, max_logit));
            }
        }
        Ok(p)
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::InvalidArgument("block size must be >= 1".into()));
        }
        let dims = Self::grid_dims(self.block_size, width, height);
        if self.twists.dims() != dims {
            return Err(Error::shape("block twists", dims, self.twists.dims()));
        }
        if self.logits.dims() != dims {
            return Err(Error::shape("block logits", dims, self.logits.dims()));
        }
        if !(self.twists.iter().all(Twist::is_finite)
            && self.logits.iter().all(|l| l.is_finite())
            && self.depth_log_scale.is_finite())
        {
            return Err(Error::NonFinite("block parameters".into()));
        }
        Ok(())
    }

    pub fn depth_scale(&self) -> f64 {
        self.depth_log_scale.exp()
    }

    fn num_blocks(&self) -> usize {
        self.twists.len()
    }

    /// Flat layout: 6 twist components per block, then one logit per block, then the
    /// depth log-scale.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(7 * self.num_blocks() + 1);
        for t in self.twists.iter() {
            v.extend_from_slice(&t.to_array());
        }
        v.extend(self.logits.iter().copied());
        v.push(self.depth_log_scale);
        v
    }

    pub fn from_vec_like(&self, v: &[f64]) -> Result<Self> {
        let nb = self.num_blocks();
        if v.len() != 7 * nb + 1 {
            return Err(Error::shape(
                "parameter vector",
                (7 * nb + 1, 1),
                (v.len(), 1),
            ));
        }
        let (c, r) = self.twists.dims();
        let twists = (0..nb)
            .map(|b| {
                let mut a = [0.0; 6];
                a.copy_from_slice(&v[6 * b..6 * b + 6]);
                Twist::from_array(a)
            })
            .collect();
        Ok(BlockParams {
            block_size: self.block_size,
            twists: Grid::from_vec(c, r, twists)?,
            logits: Grid::from_vec(c, r, v[6 * nb..7 * nb].to_vec())?,
            depth_log_scale: v[7 * nb],
        })
    }
}

#[inline]
fn logistic(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    a: f64,
}

fn axis_taps(pixels: usize, blocks: usize, b: usize) -> Vec<Tap> {
    (0..pixels)
        .map(|x| {
            let u = ((x as f64 + 0.5) / b as f64 - 0.5).clamp(0.0, (blocks - 1) as f64);
            let i0 = (u.floor() as usize).min(blocks.saturating_sub(2));
            let i1 = (i0 + 1).min(blocks - 1);
            Tap {
                i0,
                i1,
                a: u - i0 as f64,
            }
        })
        .collect()
}

impl Tap {
    #[inline]
    fn weight(&self, block: usize) -> f64 {
        let mut w = 0.0;
        if self.i0 == block {
            w += 1.0 - self.a;
        }
        if self.i1 == block {
            w += self.a;
        }
        w
    }
}

/// Bilinear block-to-pixel interpolation with block centers at `(j + 0.5) B - 0.5`.
#[derive(Clone, Debug)]
struct Upsampler {
    w: usize,
    h: usize,
    xt: Vec<Tap>,
    yt: Vec<Tap>,
    /// Inclusive pixel ranges with non-zero weight, per block column / row.
    col_support: Vec<(usize, usize)>,
    row_support: Vec<(usize, usize)>,
}

fn support(taps: &[Tap], blocks: usize) -> Vec<(usize, usize)> {
    (0..blocks)
        .map(|j| {
            let mut lo = usize::MAX;
            let mut hi = 0;
            for (x, t) in taps.iter().enumerate() {
                if t.weight(j) > 0.0 {
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
            }
            (lo, hi)
        })
        .collect()
}

impl Upsampler {
    fn new(block_size: usize, w: usize, h: usize) -> Self {
        let (c, r) = BlockParams::grid_dims(block_size, w, h);
        let xt = axis_taps(w, c, block_size);
        let yt = axis_taps(h, r, block_size);
        Upsampler {
            w,
            h,
            col_support: support(&xt, c),
            row_support: support(&yt, r),
            xt,
            yt,
        }
    }

    #[inline]
    fn interp<T: Sample>(&self, g: &Grid<T>, x: usize, y: usize) -> T {
        let (tx, ty) = (self.xt[x], self.yt[y]);
        let top = g.get(tx.i0, ty.i0).lerp(*g.get(tx.i1, ty.i0), tx.a);
        let bottom = g.get(tx.i0, ty.i1).lerp(*g.get(tx.i1, ty.i1), tx.a);
        top.lerp(bottom, ty.a)
    }

    #[inline]
    fn weight(&self, bx: usize, by: usize, x: usize, y: usize) -> f64 {
        self.xt[x].weight(bx) * self.yt[y].weight(by)
    }

    fn twists(&self, p: &BlockParams) -> Grid<Twist> {
        let arrays = p.twists.map(|t| t.to_array());
        Grid::from_fn(self.w, self.h, |x, y| {
            Twist::from_array(self.interp(&arrays, x, y))
        })
    }

    fn logits(&self, p: &BlockParams) -> Grid<f64> {
        Grid::from_fn(self.w, self.h, |x, y| self.interp(&p.logits, x, y))
    }

    /// Adjoint of the interpolation: `Σ_p w_pb g(p)` per block.
    fn reduce<const N: usize>(
        &self,
        g: impl Fn(usize, usize) -> [f64; N],
        blocks: (usize, usize),
    ) -> Grid<[f64; N]> {
        let mut out = Grid::filled(blocks.0, blocks.1, [0.0; N]);
        for y in 0..self.h {
            for x in 0..self.w {
                let (tx, ty) = (self.xt[x], self.yt[y]);
                let v = g(x, y);
                let corners = [
                    (tx.i0, ty.i0, (1.0 - tx.a) * (1.0 - ty.a)),
                    (tx.i1, ty.i0, tx.a * (1.0 - ty.a)),
                    (tx.i0, ty.i1, (1.0 - tx.a) * ty.a),
                    (tx.i1, ty.i1, tx.a * ty.a),
                ];
                for (bx, by, wgt) in corners {
                    if wgt != 0.0 {
                        let o = out.get_mut(bx, by);
                        for k in 0..N {
                            o[k] += wgt * v[k];
                        }
                    }
                }
            }
        }
        out
    }
}

/// Per-pixel twists and soft mask from block parameters.
pub fn upsample_pixels(
    params: &BlockParams,
    width: usize,
    height: usize,
) -> Result<(Grid<Twist>, SoftMask)> {
    params.validate(width, height)?;
    let up = Upsampler::new(params.block_size, width, height);
    let mask = SoftMask::new(up.logits(params).map(|&l| logistic(l)))?;
    Ok((up.twists(params), mask))
}

/// Bilinear upsampling of the block twists and logits, then exponential / logistic.
pub fn upsample_params(
    params: &BlockParams,
    width: usize,
    height: usize,
) -> Result<(crate::motion_field::SE3Field, SoftMask)> {
    let (twists, mask) = upsample_pixels(params, width, height)?;
    Ok((crate::motion_field::field_exp(&twists), mask))
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_diff_gradient(
    f: impl Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {h} must be positive"
        )));
    }
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe)?;
        probe[i] = x[i] - h;
        let fm = f(&probe)?;
        probe[i] = x[i];
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::NonFinite(format!("finite-difference probe {i}")));
        }
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub max_steps: usize,
    /// Initial line-search step.
    pub step_size: f64,
    /// Step multiplier after a rejected candidate.
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Step multiplier after an accepted step.
    pub growth: f64,
    /// Minimum loss decrease for a step to be accepted.
    pub tolerance: f64,
    /// Number of snapshots in the iteration-weighted total.
    pub n_iters: usize,
    /// Depth scale receives gradient only from `L_d` and the newest snapshot.
    pub detach_depth: bool,
    pub fd_step: f64,
    pub block_size: usize,
    /// Diagonal preconditioner per parameter kind.
    pub scale_translation: f64,
    pub scale_rotation: f64,
    pub scale_logit: f64,
    pub scale_depth: f64,
    /// Curvature pairs kept by the quasi-Newton direction; 0 gives plain
    /// preconditioned gradient descent.
    pub memory: usize,
    /// Gain on the block-sum twist direction in the initial inverse Hessian
    /// `D (I + k 1 1ᵀ)`; it lets all blocks move together.
    pub shared_gain: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_steps: 300,
            step_size: 1e-3,
            backtrack: 0.5,
            max_backtracks: 20,
            growth: 2.0,
            tolerance: 1e-7,
            n_iters: 12,
            detach_depth: true,
            fd_step: 1e-5,
            block_size: 8,
            scale_translation: 1.0,
            scale_rotation: 0.02,
            scale_logit: 500.0,
            scale_depth: 0.1,
            memory: 10,
            shared_gain: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.step_size,
            self.tolerance,
            self.fd_step,
            self.growth,
            self.scale_translation,
            self.scale_rotation,
            self.scale_logit,
            self.scale_depth,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument(
                "step size, tolerance, fd step, growth and scales must be positive".into(),
            ));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "backtrack factor {} outside (0, 1)",
                self.backtrack
            )));
        }
        if self.n_iters == 0 || self.block_size == 0 {
            return Err(Error::InvalidArgument(
                "n_iters and block_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Weights of the snapshots (oldest first) and of the stereo term in the objective.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub snapshot_weights: Vec<f64>,
    pub spatial_weight: f64,
}

impl Objective {
    /// `ζ^(N-i)` for `i = 1..=N` and unit stereo weight.
    pub fn decayed(n: usize, zeta: f64) -> Self {
        Objective {
            snapshot_weights: (1..=n).map(|i| zeta.powi((n - i) as i32)).collect(),
            spatial_weight: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineStatus {
    /// No step decreased the loss by more than the tolerance.
    Converged,
    MaxSteps,
    /// The line search ran out of tries on a direction that should have descended.
    LineSearchFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub l_d: f64,
    /// Terms of the newest snapshot.
    pub terms: IterationTerms,
    /// Line-search step of the accepted update (0 for the initial record).
    pub step_size: f64,
}

#[derive(Clone, Debug)]
pub struct RefineResult {
    pub params: BlockParams,
    /// Initial record followed by one record per accepted step; totals strictly decrease.
    pub history: Vec<StepRecord>,
    pub estimate: MotionEstimate,
    pub status: RefineStatus,
}

impl RefineResult {
    pub fn accepted_steps(&self) -> usize {
        self.history.len() - 1
    }
}

/// Writes `step,total,L_p,L_p_ego,L_g,L_s,L_c,L_m,L_d,step_size`.
pub fn write_loss_csv(history: &[StepRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "step,total,L_p,L_p_ego,L_g,L_s,L_c,L_m,L_d,step_size")?;
    for r in history {
        let t = &r.terms;
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.step, r.total, t.l_p, t.l_p_ego, t.l_g, t.l_s.total, t.l_c, t.l_m, r.l_d, r.step_size
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct Snapshot {
    params: BlockParams,
    outliers: BinaryMask,
}

/// Per-pixel decomposition of the warp-dependent terms
/// `L_p + λ_g L_g + λ_s (λ_st L_st + λ_sf L_sf)`, evaluable on sub-rectangles.
struct LocalModel<'a> {
    w: usize,
    h: usize,
    inv_hw: f64,
    alpha: f64,
    i1: &'a Image,
    src: &'a Image,
    dsrc: &'a DepthMap,
    offset: (f64, f64),
    d1: &'a DepthMap,
    noc: &'a BinaryMask,
    wx: Grid<f64>,
    wy: Grid<f64>,
    c_g: f64,
    c_st: (f64, f64),
    c_sf: (f64, f64),
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

impl<'a> LocalModel<'a> {
    fn new(frame: &'a SceneFrame, noc: &'a BinaryMask, weights: &LossWeights) -> Self {
        let (w, h) = frame.dims();
        let (src, win) = frame.warp_image();
        let (dsrc, _) = frame.warp_depth_source();
        let offset = win.map_or((0.0, 0.0), |w| (w.x0 as f64, w.y0 as f64));
        let (wx, wy) = edge_weights(&frame.i1, weights.beta);
        let per = |n: usize, channels: f64| {
            if n > 0 {
                1.0 / (n as f64 * channels)
            } else {
                0.0
            }
        };
        let ls = weights.lambda_s;
        LocalModel {
            w,
            h,
            inv_hw: 1.0 / (w * h) as f64,
            alpha: weights.alpha,
            i1: &frame.i1,
            src,
            dsrc,
            offset,
            d1: &frame.d1,
            noc,
            wx,
            wy,
            c_g: weights.lambda_g,
            c_st: (
                ls * weights.lambda_st * per(w.saturating_sub(1) * h, 6.0),
                ls * weights.lambda_st * per(w * h.saturating_sub(1), 6.0),
            ),
            c_sf: (
                ls * weights.lambda_sf * per(w.saturating_sub(2) * h, 2.0),
                ls * weights.lambda_sf * per(w * h.saturating_sub(2), 2.0),
            ),
        }
    }

    #[cfg(test)]
    fn full(&self) -> Rect {
        Rect {
            x0: 0,
            x1: self.w - 1,
            y0: 0,
            y1: self.h - 1,
        }
    }

    /// Rectangle of pixels whose cost reads any pixel of `r`.
    fn influence(&self, r: Rect) -> Rect {
        Rect {
            x0: r.x0.saturating_sub(2),
            x1: (r.x1 + 1).min(self.w - 1),
            y0: r.y0.saturating_sub(2),
            y1: (r.y1 + 1).min(self.h - 1),
        }
    }

    fn cost(
        &self,
        e: Rect,
        twist_at: impl Fn(usize, usize) -> Twist,
        uvd_at: impl Fn(usize, usize) -> Option<([f64; 2], f64)>,
    ) -> f64 {
        let (w, h) = (self.w, self.h);
        let g = Rect {
            x0: e.x0.saturating_sub(1),
            x1: (e.x1 + 1).min(w - 1),
            y0: e.y0.saturating_sub(1),
            y1: (e.y1 + 1).min(h - 1),
        };
        let gw = g.x1 - g.x0 + 1;
        let gh = g.y1 - g.y0 + 1;
        let mut warped: Vec<Option<[f64; 3]>> = Vec::with_capacity(gw * gh);
        for y in g.y0..=g.y1 {
            for x in g.x0..=g.x1 {
                warped.push(uvd_at(x, y).and_then(|(uv, _)| {
                    sample_bilinear(
                        self.src,
                        x as f64 + uv[0] + self.offset.0,
                        y as f64 + uv[1] + self.offset.1,
                        &|_, _| true,
                    )
                }));
            }
        }
        let warped_at = |x: usize, y: usize| warped[(y - g.y0) * gw + (x - g.x0)];
        let flow_or_zero = |x: usize, y: usize| uvd_at(x, y).map_or([0.0; 2], |(uv, _)| uv);

        let mut total = 0.0;
        for y in e.y0..=e.y1 {
            for x in e.x0..=e.x1 {
                let visible = *self.noc.get(x, y);
                if visible {
                    let pe = pe_pixel(
                        |i, j| *self.i1.get(i, j),
                        |i, j| warped_at(i, j).unwrap_or([0.0; 3]),
                        w,
                        h,
                        x,
                        y,
                        self.alpha,
                    );
                    total += pe * self.inv_hw;
                }
                if visible && self.c_g != 0.0 {
                    if let Some((uv, dd)) = uvd_at(x, y) {
                        let tap_ok = |i: usize, j: usize| depth_is_valid(*self.dsrc.get(i, j));
                        let sx = x as f64 + uv[0] + self.offset.0;
                        let sy = y as f64 + uv[1] + self.offset.1;
                        if let Some(b) = sample_bilinear(self.dsrc, sx, sy, &tap_ok) {
                            total +=
                                self.c_g * geometric_error(self.d1.get(x, y) + dd, b) * self.inv_hw;
                        }
                    }
                }
                if x + 1 < w {
                    let wgt = *self.wx.get(x, y);
                    if self.c_st.0 != 0.0 {
                        let d = twist_at(x + 1, y) - twist_at(x, y);
                        total += self.c_st.0 * wgt * d.l1_norm();
                    }
                    if x + 2 < w && self.c_sf.0 != 0.0 {
                        let (a, b, c) = (
                            flow_or_zero(x, y),
                            flow_or_zero(x + 1, y),
                            flow_or_zero(x + 2, y),
                        );
                        let s = (c[0] - 2.0 * b[0] + a[0]).abs() + (c[1] - 2.0 * b[1] + a[1]).abs();
                        total += self.c_sf.0 * wgt * s;
                    }
                }
                if y + 1 < h {
                    let wgt = *self.wy.get(x, y);
                    if self.c_st.1 != 0.0 {
                        let d = twist_at(x, y + 1) - twist_at(x, y);
                        total += self.c_st.1 * wgt * d.l1_norm();
                    }
                    if y + 2 < h && self.c_sf.1 != 0.0 {
                        let (a, b, c) = (
                            flow_or_zero(x, y),
                            flow_or_zero(x, y + 1),
                            flow_or_zero(x, y + 2),
                        );
                        let s = (c[0] - 2.0 * b[0] + a[0]).abs() + (c[1] - 2.0 * b[1] + a[1]).abs();
                        total += self.c_sf.1 * wgt * s;
                    }
                }
            }
        }
        total
    }
}

/// Everything fixed during one refinement run.
struct Problem<'a> {
    frame: &'a SceneFrame,
    masks: &'a LossMasks,
    weights: &'a LossWeights,
    cfg: &'a OptimizerConfig,
    objective: &'a Objective,
    up: Upsampler,
}

impl Problem<'_> {
    fn scaled_frame(&self, log_scale: f64) -> SceneFrame {
        if log_scale == 0.0 {
            self.frame.clone()
        } else {
            self.frame.with_depth_scale(log_scale.exp())
        }
    }

    fn estimate(&self, frame: &SceneFrame, p: &BlockParams) -> Result<MotionEstimate> {
        let twists = self.up.twists(p);
        let mask = SoftMask::new(self.up.logits(p).map(|&l| logistic(l)))?;
        MotionEstimate::from_twists(&twists, mask, &frame.d1, &frame.camera)
    }

    fn outliers(&self, frame: &SceneFrame, p: &BlockParams) -> Result<BinaryMask> {
        match &self.masks.outlier {
            Some(m) => Ok(m.clone()),
            None => Ok(ego_outlier_mask(
                frame,
                &self.estimate(frame, p)?,
                &self.masks.noc,
                self.weights,
            )?
            .mask),
        }
    }

    fn terms(&self, frame: &SceneFrame, snap: &Snapshot) -> Result<IterationTerms> {
        let est = self.estimate(frame, &snap.params)?;
        iteration_terms(
            frame,
            &est,
            &self.masks.noc,
            Some(&snap.outliers),
            self.weights,
        )
    }

    fn spatial(&self, frame: &SceneFrame) -> Result<f64> {
        if frame.stereo_right.is_some() && self.objective.spatial_weight != 0.0 {
            loss_spatial_photometric(frame, self.weights.alpha)
        } else {
            Ok(0.0)
        }
    }

    /// Objective value at depth log-scale `s`; `only_newest` drops the older snapshots.
    fn total(
        &self,
        snaps: &VecDeque<Snapshot>,
        s: f64,
        only_newest: bool,
    ) -> Result<(f64, f64, IterationTerms)> {
        let frame = self.scaled_frame(s);
        let l_d = self.spatial(&frame)?;
        let n = snaps.len();
        let results: Vec<Result<Option<IterationTerms>>> = snaps
            .par_iter()
            .enumerate()
            .map(|(i, snap)| {
                let wgt = self.objective.snapshot_weights[i];
                if (only_newest && i + 1 < n) || (wgt == 0.0 && i + 1 < n) {
                    Ok(None)
                } else {
                    self.terms(&frame, snap).map(Some)
                }
            })
            .collect();
        let mut total = self.objective.spatial_weight * l_d;
        let mut newest = IterationTerms::default();
        for (i, r) in results.into_iter().enumerate() {
            if let Some(t) = r? {
                total += self.objective.snapshot_weights[i] * t.weighted_sum(self.weights);
                if i + 1 == n {
                    newest = t;
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("total loss".into()));
        }
        Ok((total, l_d, newest))
    }

    /// Gradient of the newest snapshot's weighted terms with respect to its block
    /// twists and logits.
    fn motion_gradient(
        &self,
        frame: &SceneFrame,
        snap: &Snapshot,
    ) -> Result<(Grid<Twist>, Grid<f64>)> {
        let (w, h) = frame.dims();
        let wts = self.weights;
        let p = &snap.params;
        let blocks = p.twists.dims();
        let twists = self.up.twists(p);
        let logits = self.up.logits(p);
        let mask = SoftMask::new(logits.map(|&l| logistic(l)))?;
        let est = MotionEstimate::from_twists(&twists, mask.clone(), &frame.d1, &frame.camera)?;
        let cam = frame.camera;
        let hgt = self.cfg.fd_step;

        // warp-dependent local terms: central differences over block twists
        let model = LocalModel::new(frame, &self.masks.noc, wts);
        let base_uvd = Grid::from_fn(w, h, |x, y| {
            est.scene_flow
                .flow
                .at(x, y)
                .map(|uv| (uv, *est.scene_flow.delta_d.get(x, y)))
        });
        let probes: Vec<(usize, usize, usize)> = (0..blocks.1)
            .flat_map(|by| (0..blocks.0).flat_map(move |bx| (0..6).map(move |c| (bx, by, c))))
            .collect();
        let local: Vec<f64> = probes
            .par_iter()
            .map(|&(bx, by, c)| {
                let (sx0, sx1) = self.up.col_support[bx];
                let (sy0, sy1) = self.up.row_support[by];
                let sw = sx1 - sx0 + 1;
                let region = model.influence(Rect {
                    x0: sx0,
                    x1: sx1,
                    y0: sy0,
                    y1: sy1,
                });
                let eval = |sign: f64| {
                    let mut tw = Vec::with_capacity(sw * (sy1 - sy0 + 1));
                    let mut uvd = Vec::with_capacity(tw.capacity());
                    for y in sy0..=sy1 {
                        for x in sx0..=sx1 {
                            let mut t = *twists.get(x, y);
                            *t.component_mut(c) += sign * hgt * self.up.weight(bx, by, x, y);
                            tw.push(t);
                            uvd.push(
                                exp(&t)
                                    .ok()
                                    .and_then(|tr| pixel_uvd(&cam, x, y, *frame.d1.get(x, y), &tr)),
                            );
                        }
                    }
                    let inside = |x: usize, y: usize| x >= sx0 && x <= sx1 && y >= sy0 && y <= sy1;
                    model.cost(
                        region,
                        |x, y| {
                            if inside(x, y) {
                                tw[(y - sy0) * sw + (x - sx0)]
                            } else {
                                *twists.get(x, y)
                            }
                        },
                        |x, y| {
                            if inside(x, y) {
                                uvd[(y - sy0) * sw + (x - sx0)]
                            } else {
                                *base_uvd.get(x, y)
                            }
                        },
                    )
                };
                let plus = eval(1.0);
                let minus = eval(-1.0);
                (plus - minus) / (2.0 * hgt)
            })
            .collect();
        let mut g_blocks = Grid::filled(blocks.0, blocks.1, Twist::zero());
        for (&(bx, by, c), g) in probes.iter().zip(local) {
            *g_blocks.get_mut(bx, by).component_mut(c) = g;
        }

        // ego-photometric term through the aggregation
        let ego = est.ego.twist.to_array();
        let ego_loss = |xi: &[f64]| -> Result<f64> {
            let mut a = [0.0; 6];
            a.copy_from_slice(xi);
            let t = exp(&Twist::from_array(a))?;
            let flow = rigid_flow(&frame.d1, &t, &cam);
            let (pe, _) = warped_photometric_error(frame, &flow, wts.alpha)?;
            let mut s = 0.0;
            for i in 0..pe.len() {
                if self.masks.noc.as_slice()[i] && snap.outliers.as_slice()[i] {
                    s += pe.as_slice()[i];
                }
            }
            Ok(s / (w * h) as f64)
        };
        let upstream_ego = Twist::from_array(
            finite_diff_gradient(ego_loss, &ego, hgt)?
                .try_into()
                .expect("six components"),
        );

        // motion consistency: direct part plus the part through the mean
        let inv_hw = 1.0 / (w * h) as f64;
        let xbar = est.ego.twist;
        let mut g_twist = Grid::filled(w, h, Twist::zero());
        let mut g_mask = Grid::filled(w, h, 0.0);
        let mut upstream_c = Twist::zero();
        for y in 0..h {
            for x in 0..w {
                let r = *twists.get(x, y) - xbar;
                let sgn = Twist::from_array(r.to_array().map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }));
                let m = mask.get(x, y);
                *g_twist.get_mut(x, y) += sgn * (wts.lambda_c * m * inv_hw);
                upstream_c += sgn * (-wts.lambda_c * m * inv_hw);
                *g_mask.get_mut(x, y) += wts.lambda_c * r.l1_norm() * inv_hw
                    - wts.lambda_m * (1.0 + wts.gamma) / ((wts.gamma + m) * (wts.gamma + m))
                        * inv_hw;
            }
        }
        let twist_grid: TwistGrid = twists.map(|t| Some(*t));
        let agg = aggregate_gradients(&twist_grid, &mask, &(upstream_ego + upstream_c))?;
        for i in 0..w * h {
            g_twist.as_mut_slice()[i] += agg.twist.as_slice()[i];
            g_mask.as_mut_slice()[i] += agg.mask.as_slice()[i];
        }

        let reduced = self.up.reduce(|x, y| g_twist.get(x, y).to_array(), blocks);
        for (g, r) in g_blocks.as_mut_slice().iter_mut().zip(reduced.iter()) {
            *g += Twist::from_array(*r);
        }
        let g_logits = self.up.reduce(
            |x, y| {
                let m = mask.get(x, y);
                [g_mask.get(x, y) * m * (1.0 - m)]
            },
            blocks,
        );
        Ok((g_blocks, g_logits.map(|g| g[0])))
    }

    fn depth_gradient(&self, snaps: &VecDeque<Snapshot>, s: f64) -> Result<f64> {
        let f = |v: &[f64]| Ok(self.total(snaps, v[0], self.cfg.detach_depth)?.0);
        Ok(finite_diff_gradient(f, &[s], self.cfg.fd_step)?[0])
    }
}

/// Minimizes the iteration-weighted total with the default snapshot weights.
pub fn refine(
    frame: &SceneFrame,
    init: &BlockParams,
    masks: &LossMasks,
    weights: &LossWeights,
    cfg: &OptimizerConfig,
) -> Result<RefineResult> {
    refine_with_objective(
        frame,
        init,
        masks,
        weights,
        cfg,
        &Objective::decayed(cfg.n_iters, weights.zeta),
    )
}

/// Gradient descent with backtracking line search on the snapshot objective.
pub fn refine_with_objective(
    frame: &SceneFrame,
    init: &BlockParams,
    masks: &LossMasks,
    weights: &LossWeights,
    cfg: &OptimizerConfig,
    objective: &Objective,
) -> Result<RefineResult> {
    frame.validate()?;
    weights.validate()?;
    cfg.validate()?;
    let (w, h) = frame.dims();
    init.validate(w, h)?;
    frame.i1.check_dims(&masks.noc, "M_noc vs I1")?;
    if let Some(ol) = &masks.outlier {
        frame.i1.check_dims(ol, "M_ol vs I1")?;
    }
    if objective.snapshot_weights.len() != cfg.n_iters {
        return Err(Error::InvalidArgument(format!(
            "objective has {} snapshot weights for n_iters {}",
            objective.snapshot_weights.len(),
            cfg.n_iters
        )));
    }
    let problem = Problem {
        frame,
        masks,
        weights,
        cfg,
        objective,
        up: Upsampler::new(init.block_size, w, h),
    };

    let mut current = init.clone();
    let start_frame = problem.scaled_frame(current.depth_log_scale);
    let first = Snapshot {
        params: current.clone(),
        outliers: problem.outliers(&start_frame, &current)?,
    };
    let mut snaps: VecDeque<Snapshot> = std::iter::repeat_n(first, cfg.n_iters).collect();
    let (mut value, l_d, terms) = problem.total(&snaps, current.depth_log_scale, false)?;
    let mut history = vec![StepRecord {
        step: 0,
        total: value,
        l_d,
        terms,
        step_size: 0.0,
    }];
    info!("refine: initial total {value:.6e}");

    let nb = current.twists.len();
    let mut precond = Vec::with_capacity(7 * nb + 1);
    for _ in 0..nb {
        precond.extend_from_slice(&[cfg.scale_translation; 3]);
        precond.extend_from_slice(&[cfg.scale_rotation; 3]);
    }
    precond.extend(std::iter::repeat_n(cfg.scale_logit, nb));
    precond.push(cfg.scale_depth);

    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut last: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut alpha = cfg.step_size;
    let mut status = RefineStatus::MaxSteps;
    for step in 1..=cfg.max_steps {
        let s = current.depth_log_scale;
        let frame_s = problem.scaled_frame(s);
        // the newest snapshot carries the outlier mask of the iterate it starts from
        let mut shifted = snaps.clone();
        shifted.pop_front();
        shifted.push_back(Snapshot {
            params: current.clone(),
            outliers: problem.outliers(&frame_s, &current)?,
        });
        let newest_weight = objective.snapshot_weights[cfg.n_iters - 1];
        let (g_tw, g_lg) = if newest_weight != 0.0 {
            problem.motion_gradient(&frame_s, shifted.back().expect("non-empty"))?
        } else {
            let (c, r) = current.twists.dims();
            (Grid::filled(c, r, Twist::zero()), Grid::filled(c, r, 0.0))
        };
        let g_depth = problem.depth_gradient(&shifted, s)?;
        let mut grad = Vec::with_capacity(7 * nb + 1);
        for t in g_tw.iter() {
            grad.extend((*t * newest_weight).to_array());
        }
        grad.extend(g_lg.iter().map(|g| g * newest_weight));
        grad.push(g_depth);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient at step {step}")));
        }
        if let Some((x_prev, g_prev)) = last.take() {
            let sv: Vec<f64> = current
                .to_vec()
                .iter()
                .zip(&x_prev)
                .map(|(a, b)| a - b)
                .collect();
            let yv: Vec<f64> = grad.iter().zip(&g_prev).map(|(a, b)| a - b).collect();
            let sy = dot(&sv, &yv);
            if sy > 1e-12 * dot(&yv, &yv).sqrt() * dot(&sv, &sv).sqrt() {
                if pairs.len() == cfg.memory {
                    pairs.pop_front();
                }
                if cfg.memory > 0 {
                    pairs.push_back((sv, yv, 1.0 / sy));
                }
            }
        }
        let mut direction = lbfgs_direction(&grad, &precond, nb, cfg.shared_gain, &pairs);
        if dot(&grad, &direction) >= 0.0 {
            pairs.clear();
            direction = lbfgs_direction(&grad, &precond, nb, cfg.shared_gain, &pairs);
        }
        let slope = dot(&grad, &direction);
        if slope == 0.0 {
            status = RefineStatus::Converged;
            break;
        }
        let base = current.to_vec();
        if !pairs.is_empty() {
            alpha = 1.0;
        }
        let mut accepted = None;
        let mut any_decrease = false;
        let mut tried = alpha;
        for _ in 0..=cfg.max_backtracks {
            tried = alpha;
            let x: Vec<f64> = base
                .iter()
                .zip(&direction)
                .map(|(b, d)| b + alpha * d)
                .collect();
            let cand = current.from_vec_like(&x)?;
            let mut trial = shifted.clone();
            trial.back_mut().expect("non-empty").params = cand.clone();
            match problem.total(&trial, cand.depth_log_scale, false) {
                Ok((v, l_d, terms)) if v < value - cfg.tolerance => {
                    accepted = Some((cand, trial, v, l_d, terms));
                    break;
                }
                Ok((v, _, _)) => any_decrease |= v < value,
                Err(Error::NonFinite(_)) | Err(Error::EmptySupport { .. }) => {}
                Err(e) => return Err(e),
            }
            alpha *= cfg.backtrack;
        }
        match accepted {
            Some((cand, trial, v, l_d, terms)) => {
                debug!("refine step {step}: total {v:.6e} step {alpha:.3e}");
                history.push(StepRecord {
                    step,
                    total: v,
                    l_d,
                    terms,
                    step_size: alpha,
                });
                last = Some((base, grad));
                current = cand;
                snaps = trial;
                value = v;
                alpha *= cfg.growth;
            }
            None => {
                let predicted = -tried * slope;
                status = if any_decrease || predicted <= cfg.tolerance {
                    RefineStatus::Converged
                } else {
                    RefineStatus::LineSearchFailed
                };
                break;
            }
        }
    }
    info!(
        "refine: {:?} after {} accepted steps, total {:.6e}",
        status,
        history.len() - 1,
        value
    );
    let final_frame = problem.scaled_frame(current.depth_log_scale);
    let estimate = problem.estimate(&final_frame, &current)?;
    Ok(RefineResult {
        params: current,
        history,
        estimate,
        status,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// L-BFGS two-loop recursion; the initial inverse Hessian is `diag` rescaled by the
/// newest curvature pair.
fn lbfgs_direction(
    grad: &[f64],
    diag: &[f64],
    blocks: usize,
    shared_gain: f64,
    pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>,
) -> Vec<f64> {
    let h0 = |v: &[f64]| -> Vec<f64> {
        let mut sum = [0.0; 6];
        for b in 0..blocks {
            for (c, s) in sum.iter_mut().enumerate() {
                *s += v[6 * b + c];
            }
        }
        v.iter()
            .zip(diag)
            .enumerate()
            .map(|(i, (x, d))| {
                let shared = if i < 6 * blocks {
                    shared_gain * sum[i % 6]
                } else {
                    0.0
                };
                (x + shared) * d
            })
            .collect()
    };
    let mut q = grad.to_vec();
    let mut coeffs = Vec::with_capacity(pairs.len());
    for (sv, yv, rho) in pairs.iter().rev() {
        let a = rho * dot(sv, &q);
        q.iter_mut().zip(yv).for_each(|(qi, yi)| *qi -= a * yi);
        coeffs.push(a);
    }
    let gamma = match pairs.back() {
        Some((sv, yv, _)) => dot(sv, yv) / dot(yv, &h0(yv)),
        None => 1.0,
    };
    let mut q: Vec<f64> = h0(&q).into_iter().map(|v| v * gamma).collect();
    for ((sv, yv, rho), a) in pairs.iter().zip(coeffs.iter().rev()) {
        let b = rho * dot(yv, &q);
        q.iter_mut()
            .zip(sv)
            .for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Motion estimate for `params` on `frame` (depth scaled by the parameters' scale).
pub fn estimate_from_params(frame: &SceneFrame, params: &BlockParams) -> Result<MotionEstimate> {
    let (w, h) = frame.dims();
    let (twists, mask) = upsample_pixels(params, w, h)?;
    let scaled = frame.with_depth_scale(params.depth_scale());
    MotionEstimate::from_twists(&twists, mask, &scaled.d1, &scaled.camera)
}
