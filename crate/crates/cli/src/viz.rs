//! Color encodings for flow, depth, masks and benchmark-style flow error maps.

use emrmsf_core::grid::Grid;
use emrmsf_core::{DepthMap, FlowField};

pub type Rgb8 = [u8; 3];

const WHEEL_SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

/// Middlebury color wheel: 55 hues from red through yellow, green, cyan, blue and
/// magenta back to red.
fn color_wheel() -> Vec<[f64; 3]> {
    let [ry, yg, gc, cb, bm, mr] = WHEEL_SEGMENTS;
    let mut wheel = Vec::with_capacity(55);
    let ramp = |i: usize, n: usize| (255 * i / n) as f64;
    for i in 0..ry {
        wheel.push([255.0, ramp(i, ry), 0.0]);
    }
    for i in 0..yg {
        wheel.push([255.0 - ramp(i, yg), 255.0, 0.0]);
    }
    for i in 0..gc {
        wheel.push([0.0, 255.0, ramp(i, gc)]);
    }
    for i in 0..cb {
        wheel.push([0.0, 255.0 - ramp(i, cb), 255.0]);
    }
    for i in 0..bm {
        wheel.push([ramp(i, bm), 0.0, 255.0]);
    }
    for i in 0..mr {
        wheel.push([255.0, 0.0, 255.0 - ramp(i, mr)]);
    }
    wheel
}

fn wheel_color(wheel: &[[f64; 3]], u: f64, v: f64) -> Rgb8 {
    let n = wheel.len();
    let rad = (u * u + v * v).sqrt();
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
    let k0 = (fk.floor() as usize).min(n - 1);
    let k1 = if k0 + 1 == n { 0 } else { k0 + 1 };
    let f = fk - k0 as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
        let col = if rad <= 1.0 {
            1.0 - rad * (1.0 - col)
        } else {
            col * 0.75
        };
        out[c] = (255.0 * col).floor().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Hue encodes direction, saturation the magnitude relative to `max_flow` (the
/// largest valid magnitude when `None`). Invalid pixels are black.
pub fn flow_to_color(flow: &FlowField, max_flow: Option<f64>) -> Grid<Rgb8> {
    let wheel = color_wheel();
    let max_rad = max_flow.unwrap_or_else(|| {
        flow.flow
            .iter()
            .zip(flow.valid.iter())
            .filter(|(_, &ok)| ok)
            .map(|(f, _)| f[0].hypot(f[1]))
            .fold(0.0, f64::max)
    });
    let norm = if max_rad > 0.0 { max_rad } else { 1.0 };
    let (w, h) = flow.dims();
    Grid::from_fn(w, h, |x, y| match flow.at(x, y) {
        Some([u, v]) => wheel_color(&wheel, u / norm, v / norm),
        None => [0, 0, 0],
    })
}

const VIRIDIS: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 81.0, 139.0],
    [44.0, 113.0, 142.0],
    [33.0, 144.0, 141.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

fn viridis(t: f64) -> Rgb8 {
    let s = t.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (s.floor() as usize).min(VIRIDIS.len() - 2);
    let f = s - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = ((1.0 - f) * VIRIDIS[i][c] + f * VIRIDIS[i + 1][c]).round() as u8;
    }
    out
}

/// Viridis on inverse depth scaled by its maximum, so near surfaces are bright.
/// Non-positive or non-finite depths are black.
pub fn depth_to_color(depth: &DepthMap) -> Grid<Rgb8> {
    let ok = |d: f64| d.is_finite() && d > 0.0;
    let max_inv = depth
        .iter()
        .filter(|&&d| ok(d))
        .map(|d| 1.0 / d)
        .fold(0.0, f64::max);
    depth.map(|&d| {
        if ok(d) && max_inv > 0.0 {
            viridis(1.0 / d / max_inv)
        } else {
            [0, 0, 0]
        }
    })
}

/// Gray levels, 0 is black and 1 is white.
pub fn mask_to_gray(mask: &Grid<f64>) -> Grid<Rgb8> {
    mask.map(|&m| {
        let g = (255.0 * m.clamp(0.0, 1.0)).round() as u8;
        [g, g, g]
    })
}

/// Normalized-error bins of the benchmark flow error map. Bins from index 5 on
/// hold outliers (normalized error above 1); each bin
/// includes its upper edge.
pub const ERROR_BINS: [(f64, f64, Rgb8); 10] = [
    (0.0, 0.0625, [49, 54, 149]),
    (0.0625, 0.125, [69, 117, 180]),
    (0.125, 0.25, [116, 173, 209]),
    (0.25, 0.5, [171, 217, 233]),
    (0.5, 1.0, [224, 243, 248]),
    (1.0, 2.0, [254, 224, 144]),
    (2.0, 4.0, [253, 174, 97]),
    (4.0, 8.0, [244, 109, 67]),
    (8.0, 16.0, [215, 48, 39]),
    (16.0, f64::INFINITY, [165, 0, 38]),
];

/// Error normalized so that 1 is the outlier boundary: the smaller of
/// `err / abs_px` and `err / (rel · |gt|)`.
pub fn normalized_error(err: f64, gt_magnitude: f64, abs_px: f64, rel: f64) -> f64 {
    (err / abs_px).min(err / (rel * gt_magnitude))
}

/// Log-scale flow error map against ground truth; pixels without ground truth are black.
pub fn flow_error_to_color(pred: &FlowField, gt: &FlowField, abs_px: f64, rel: f64) -> Grid<Rgb8> {
    let (w, h) = gt.dims();
    Grid::from_fn(w, h, |x, y| {
        let Some(g) = gt.at(x, y) else {
            return [0, 0, 0];
        };
        let p = pred.at(x, y).unwrap_or([0.0, 0.0]);
        let err = (p[0] - g[0]).hypot(p[1] - g[1]);
        let n = normalized_error(err, g[0].hypot(g[1]), abs_px, rel);
        ERROR_BINS
            .iter()
            .find(|(_, hi, _)| n <= *hi)
            .map_or(ERROR_BINS[9].2, |b| b.2)
    })
}
