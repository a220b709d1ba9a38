//! View synthesis by bilinear warping, windowed SSIM, and the photometric error.

use crate::camera::{depth_is_valid, DepthMap, FlowField};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, CropWindow, Grid, Image, Sample};

/// SSIM stabilizers for unit-range intensities.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Samples `source` at `x + flow(x)`.
///
/// With a `window`, `source` is the full (uncropped) grid, the flow lives on the crop
/// grid, and sample positions are offset by the window origin. A sample is valid when
/// its flow is valid and the position lies inside `[0, W-1] x [0, H-1]` of the source;
/// invalid samples are zero.
pub fn warp_bilinear<T: Sample>(
    source: &Grid<T>,
    flow: &FlowField,
    window: Option<&CropWindow>,
) -> Result<(Grid<T>, BinaryMask)> {
    warp_with(source, flow, window, |_, _| true)
}

/// Warps a depth map; validity additionally requires all four bilinear taps to hold
/// valid depths.
pub fn warp_depth(
    source: &DepthMap,
    flow: &FlowField,
    window: Option<&CropWindow>,
) -> Result<(DepthMap, BinaryMask)> {
    warp_with(source, flow, window, |x, y| {
        depth_is_valid(*source.get(x, y))
    })
}

pub(crate) fn warp_with<T: Sample>(
    source: &Grid<T>,
    flow: &FlowField,
    window: Option<&CropWindow>,
    tap_ok: impl Fn(usize, usize) -> bool,
) -> Result<(Grid<T>, BinaryMask)> {
    let (fw, fh) = flow.dims();
    let (sw, sh) = source.dims();
    let (ox, oy) = match window {
        Some(win) => {
            win.check_inside(sw, sh)?;
            if (win.width, win.height) != (fw, fh) {
                return Err(Error::shape(
                    "flow vs crop window",
                    (win.width, win.height),
                    (fw, fh),
                ));
            }
            (win.x0 as f64, win.y0 as f64)
        }
        None => {
            if (sw, sh) != (fw, fh) {
                return Err(Error::shape("flow vs warp source", (sw, sh), (fw, fh)));
            }
            (0.0, 0.0)
        }
    };
    let mut out = Grid::filled(fw, fh, T::zero());
    let mut valid = Grid::filled(fw, fh, false);
    for y in 0..fh {
        for x in 0..fw {
            let Some(uv) = flow.at(x, y) else { continue };
            let sx = x as f64 + uv[0] + ox;
            let sy = y as f64 + uv[1] + oy;
            if let Some(v) = sample_bilinear(source, sx, sy, &tap_ok) {
                out.set(x, y, v);
                valid.set(x, y, true);
            }
        }
    }
    Ok((out, valid))
}

/// Bilinear sample at `(sx, sy)`, or `None` outside `[0, W-1] x [0, H-1]` or when a
/// tap is rejected.
#[inline]
pub(crate) fn sample_bilinear<T: Sample>(
    source: &Grid<T>,
    sx: f64,
    sy: f64,
    tap_ok: &impl Fn(usize, usize) -> bool,
) -> Option<T> {
    let (sw, sh) = source.dims();
    if !(sx >= 0.0 && sx <= (sw - 1) as f64 && sy >= 0.0 && sy <= (sh - 1) as f64) {
        return None;
    }
    let x0 = (sx.floor() as usize).min(sw.saturating_sub(2));
    let y0 = (sy.floor() as usize).min(sh.saturating_sub(2));
    let x1 = (x0 + 1).min(sw - 1);
    let y1 = (y0 + 1).min(sh - 1);
    if !(tap_ok(x0, y0) && tap_ok(x1, y0) && tap_ok(x0, y1) && tap_ok(x1, y1)) {
        return None;
    }
    let tx = sx - x0 as f64;
    let ty = sy - y0 as f64;
    let top = source.get(x0, y0).lerp(*source.get(x1, y0), tx);
    let bottom = source.get(x0, y1).lerp(*source.get(x1, y1), tx);
    Some(top.lerp(bottom, ty))
}

/// SSIM at one pixel of images given by accessors; same arithmetic as [`ssim`].
#[inline]
pub(crate) fn ssim_pixel(
    a: impl Fn(usize, usize) -> [f64; 3],
    b: impl Fn(usize, usize) -> [f64; 3],
    w: usize,
    h: usize,
    x: usize,
    y: usize,
) -> f64 {
    let xs = [x.saturating_sub(1), x, (x + 1).min(w - 1)];
    let ys = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
    let mut pa = [[0.0; 3]; 9];
    let mut pb = [[0.0; 3]; 9];
    for (j, &yy) in ys.iter().enumerate() {
        for (i, &xx) in xs.iter().enumerate() {
            pa[j * 3 + i] = a(xx, yy);
            pb[j * 3 + i] = b(xx, yy);
        }
    }
    let mut acc = 0.0;
    for c in 0..3 {
        // 3x3 box mean: row sums first, then the column
        let stat = |f: &dyn Fn(usize) -> f64| {
            let r = |j: usize| f(j * 3) + f(j * 3 + 1) + f(j * 3 + 2);
            (r(0) + r(1) + r(2)) / 9.0
        };
        let ma = stat(&|k| pa[k][c]);
        let mb = stat(&|k| pb[k][c]);
        let saa = stat(&|k| pa[k][c] * pa[k][c]);
        let sbb = stat(&|k| pb[k][c] * pb[k][c]);
        let sab = stat(&|k| pa[k][c] * pb[k][c]);
        let var_a = saa - ma * ma;
        let var_b = sbb - mb * mb;
        let cov = sab - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2);
        acc += num / den;
    }
    acc / 3.0
}

/// Photometric error at one pixel; same arithmetic as [`photometric_error`].
#[inline]
pub(crate) fn pe_pixel(
    a: impl Fn(usize, usize) -> [f64; 3],
    b: impl Fn(usize, usize) -> [f64; 3],
    w: usize,
    h: usize,
    x: usize,
    y: usize,
    alpha: f64,
) -> f64 {
    let (pa, pb) = (a(x, y), b(x, y));
    let l1 = ((pa[0] - pb[0]).abs() + (pa[1] - pb[1]).abs() + (pa[2] - pb[2]).abs()) / 3.0;
    let s = ssim_pixel(a, b, w, h, x, y);
    0.5 * alpha * (1.0 - s) + (1.0 - alpha) * l1
}

/// Per-pixel SSIM over 3x3 windows (replicate-padded), averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<Grid<f64>> {
    a.check_dims(b, "ssim inputs")?;
    let (w, h) = a.dims();
    Ok(Grid::from_fn(w, h, |x, y| {
        ssim_pixel(|i, j| *a.get(i, j), |i, j| *b.get(i, j), w, h, x, y)
    }))
}

/// `pe = α/2 (1 - SSIM) + (1 - α) |a - b|`, the L1 term averaged over channels.
pub fn photometric_error(a: &Image, b: &Image, alpha: f64) -> Result<Grid<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} outside [0, 1]"
        )));
    }
    a.check_dims(b, "photometric error inputs")?;
    let (w, h) = a.dims();
    Ok(Grid::from_fn(w, h, |x, y| {
        pe_pixel(|i, j| *a.get(i, j), |i, j| *b.get(i, j), w, h, x, y, alpha)
    }))
}
