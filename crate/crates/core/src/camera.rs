//! Pinhole camera model and the conversion of depth plus SE(3) motion into
//! optical flow, depth change and 3-D scene flow.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid};
use crate::lie::RigidTransform;
use crate::motion_field::SE3Field;

/// Points closer than this to the camera plane cannot be projected.
pub const MIN_Z: f64 = 1e-6;

/// Depth in meters. Entries that are not finite and positive are invalid.
pub type DepthMap = Grid<f64>;

#[inline]
pub fn depth_is_valid(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Stereo baseline in meters; only needed for disparity conversion.
    #[serde(default)]
    pub baseline: f64,
}

impl PinholeCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, baseline: f64) -> Result<Self> {
        let cam = PinholeCamera {
            fx,
            fy,
            cx,
            cy,
            baseline,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.baseline]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 || self.baseline < 0.0 {
            return Err(Error::InvalidArgument(format!("invalid camera {self:?}")));
        }
        Ok(())
    }

    /// Intrinsics of the same camera seen through a crop starting at `(x0, y0)`.
    pub fn cropped(&self, x0: usize, y0: usize) -> PinholeCamera {
        PinholeCamera {
            cx: self.cx - x0 as f64,
            cy: self.cy - y0 as f64,
            ..*self
        }
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<[f64; 2]> {
        if !(p.z > MIN_Z) {
            return Err(Error::BehindCamera { z: p.z });
        }
        Ok(self.project_unchecked(p))
    }

    #[inline]
    pub(crate) fn project_unchecked(&self, p: &Vector3<f64>) -> [f64; 2] {
        [self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy]
    }

    pub fn backproject(&self, pixel: [f64; 2], depth: f64) -> Result<Vector3<f64>> {
        if !depth_is_valid(depth) {
            return Err(Error::InvalidArgument(format!(
                "depth {depth} is not positive"
            )));
        }
        Ok(self.backproject_unchecked(pixel, depth))
    }

    #[inline]
    pub(crate) fn backproject_unchecked(&self, pixel: [f64; 2], depth: f64) -> Vector3<f64> {
        Vector3::new(
            (pixel[0] - self.cx) / self.fx * depth,
            (pixel[1] - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Stereo disparity `fx * baseline / Z`.
    pub fn disparity_from_depth(&self, depth: f64) -> Result<f64> {
        if !depth_is_valid(depth) {
            return Err(Error::InvalidArgument(format!(
                "depth {depth} is not positive"
            )));
        }
        self.require_baseline()?;
        Ok(self.fx * self.baseline / depth)
    }

    pub fn depth_from_disparity(&self, disparity: f64) -> Result<f64> {
        if !(disparity.is_finite() && disparity > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "disparity {disparity} is not positive"
            )));
        }
        self.require_baseline()?;
        Ok(self.fx * self.baseline / disparity)
    }

    fn require_baseline(&self) -> Result<()> {
        if self.baseline > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "disparity conversion needs a positive baseline".into(),
            ))
        }
    }
}

/// Per-pixel 2-D displacement with validity.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub flow: Grid<[f64; 2]>,
    pub valid: BinaryMask,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            flow: Grid::filled(width, height, [0.0; 2]),
            valid: Grid::filled(width, height, true),
        }
    }

    pub fn constant(width: usize, height: usize, uv: [f64; 2]) -> Self {
        FlowField {
            flow: Grid::filled(width, height, uv),
            valid: Grid::filled(width, height, true),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.flow.dims()
    }

    /// Flow vector if valid.
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Option<[f64; 2]> {
        if *self.valid.get(x, y) {
            Some(*self.flow.get(x, y))
        } else {
            None
        }
    }
}

/// Stereo disparity in pixels with validity.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    pub disp: Grid<f64>,
    pub valid: BinaryMask,
}

impl DisparityMap {
    /// Valid wherever the value is finite and positive.
    pub fn from_values(disp: Grid<f64>) -> Self {
        let valid = disp.map(|&d| d.is_finite() && d > 0.0);
        DisparityMap { disp, valid }
    }

    /// Disparity of a depth map; invalid depths give invalid pixels.
    pub fn from_depth(depth: &DepthMap, cam: &PinholeCamera) -> Result<Self> {
        cam.require_baseline()?;
        let disp = depth.map(|&d| {
            if depth_is_valid(d) {
                cam.fx * cam.baseline / d
            } else {
                0.0
            }
        });
        Ok(DisparityMap::from_values(disp))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.disp.dims()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Option<f64> {
        if *self.valid.get(x, y) {
            Some(*self.disp.get(x, y))
        } else {
            None
        }
    }
}

/// Optical flow `(u, v)` plus the depth change `ΔD` registered to the first frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFlowUVD {
    pub flow: FlowField,
    pub delta_d: Grid<f64>,
}

impl SceneFlowUVD {
    /// `D1 + ΔD`, the first-frame depth carried through the motion. Invalid pixels are 0.
    pub fn transformed_depth(&self, d1: &DepthMap) -> DepthMap {
        Grid::from_fn(d1.width(), d1.height(), |x, y| {
            if *self.flow.valid.get(x, y) {
                d1.get(x, y) + self.delta_d.get(x, y)
            } else {
                0.0
            }
        })
    }
}

/// 3-D displacement of the point seen at each first-frame pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFlow3d {
    pub motion: Grid<Vector3<f64>>,
    pub valid: BinaryMask,
}

struct PixelMotion {
    uv: [f64; 2],
    moved: Vector3<f64>,
    original: Vector3<f64>,
}

#[inline]
fn pixel_motion(
    cam: &PinholeCamera,
    x: usize,
    y: usize,
    depth: f64,
    t: &RigidTransform,
) -> Option<PixelMotion> {
    if !depth_is_valid(depth) {
        return None;
    }
    let px = [x as f64, y as f64];
    let p = cam.backproject_unchecked(px, depth);
    let moved = t.act(&p);
    if !(moved.z > MIN_Z) || !moved.iter().all(|c| c.is_finite()) {
        return None;
    }
    let q = cam.project_unchecked(&moved);
    Some(PixelMotion {
        uv: [q[0] - px[0], q[1] - px[1]],
        moved,
        original: p,
    })
}

/// Flow and depth change of one pixel under `t`.
#[inline]
pub(crate) fn pixel_uvd(
    cam: &PinholeCamera,
    x: usize,
    y: usize,
    depth: f64,
    t: &RigidTransform,
) -> Option<([f64; 2], f64)> {
    pixel_motion(cam, x, y, depth, t).map(|pm| (pm.uv, pm.moved.z - pm.original.z))
}

fn motion_grid(
    d1: &DepthMap,
    cam: &PinholeCamera,
    transform_at: impl Fn(usize, usize) -> Option<RigidTransform>,
) -> Grid<Option<PixelMotion>> {
    Grid::from_fn(d1.width(), d1.height(), |x, y| {
        transform_at(x, y).and_then(|t| pixel_motion(cam, x, y, *d1.get(x, y), &t))
    })
}

fn uvd_from_motion(m: Grid<Option<PixelMotion>>) -> SceneFlowUVD {
    let (w, h) = m.dims();
    let flow = m.map(|pm| pm.as_ref().map_or([0.0; 2], |pm| pm.uv));
    let delta_d = m.map(|pm| pm.as_ref().map_or(0.0, |pm| pm.moved.z - pm.original.z));
    let valid = m.map(|pm| pm.is_some());
    debug_assert_eq!(flow.dims(), (w, h));
    SceneFlowUVD {
        flow: FlowField { flow, valid },
        delta_d,
    }
}

/// Converts first-frame depth and a dense SE(3) field into `(u, v, ΔD)`.
///
/// Pixels whose transformed point lands at `z <= MIN_Z`, whose depth is invalid or
/// whose field entry is invalid are marked invalid.
pub fn synthesize_scene_flow(
    d1: &DepthMap,
    field: &SE3Field,
    cam: &PinholeCamera,
) -> Result<SceneFlowUVD> {
    d1.check_dims(field.transforms(), "SE3 field vs depth")?;
    Ok(uvd_from_motion(motion_grid(d1, cam, |x, y| {
        field.get(x, y)
    })))
}

/// Per-pixel 3-D scene flow `T_x p - p`.
pub fn scene_flow_3d(d1: &DepthMap, field: &SE3Field, cam: &PinholeCamera) -> Result<SceneFlow3d> {
    d1.check_dims(field.transforms(), "SE3 field vs depth")?;
    let m = motion_grid(d1, cam, |x, y| field.get(x, y));
    Ok(SceneFlow3d {
        motion: m.map(|pm| {
            pm.as_ref()
                .map_or(Vector3::zeros(), |pm| pm.moved - pm.original)
        }),
        valid: m.map(|pm| pm.is_some()),
    })
}

/// Full `(u, v, ΔD)` for a single rigid motion applied to every pixel.
pub fn rigid_scene_flow(d1: &DepthMap, t: &RigidTransform, cam: &PinholeCamera) -> SceneFlowUVD {
    uvd_from_motion(motion_grid(d1, cam, |_, _| Some(*t)))
}

/// Optical flow induced by a single rigid motion, e.g. the ego-motion.
pub fn rigid_flow(d1: &DepthMap, t: &RigidTransform, cam: &PinholeCamera) -> FlowField {
    rigid_scene_flow(d1, t, cam).flow
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{exp, Twist};
    use proptest::prelude::*;

    fn cam() -> PinholeCamera {
        PinholeCamera::new(100.0, 100.0, 32.0, 24.0, 0.5).unwrap()
    }

    #[test]
    fn principal_ray_backprojects_to_axis() {
        let c = cam();
        let p = c.backproject([c.cx, c.cy], 7.0).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 7.0));
    }

    #[test]
    fn similar_triangles() {
        let c = cam();
        let px = c.project(&Vector3::new(1.0, 0.0, 10.0)).unwrap();
        assert!((px[0] - c.cx - 10.0).abs() < 1e-12);
        assert!(matches!(
            c.project(&Vector3::new(1.0, 0.0, 0.0)),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn disparity_conversion() {
        let c = PinholeCamera::new(721.0, 721.0, 0.0, 0.0, 0.54).unwrap();
        let d = c.disparity_from_depth(38.934).unwrap();
        // fx * b / Z computed by hand: 389.34 / 38.934
        assert!((d - 10.0).abs() < 1e-12);
        let z = c.depth_from_disparity(d).unwrap();
        assert!((z - 38.934).abs() < 1e-12);
        assert!(c.depth_from_disparity(0.0).is_err());
        assert!(c.disparity_from_depth(-1.0).is_err());
    }

    #[test]
    fn identity_field_gives_zero_flow() {
        let d1 = Grid::filled(8, 6, 5.0);
        let field = SE3Field::constant(RigidTransform::identity(), 8, 6);
        let sf = synthesize_scene_flow(&d1, &field, &cam()).unwrap();
        assert!(sf
            .flow
            .flow
            .iter()
            .all(|uv| uv[0].abs() < 1e-12 && uv[1].abs() < 1e-12));
        assert!(sf.delta_d.iter().all(|d| d.abs() < 1e-12));
        assert!(sf.flow.valid.iter().all(|&v| v));
    }

    #[test]
    fn lateral_translation_flow() {
        let d1 = Grid::filled(8, 6, 10.0);
        let t = RigidTransform::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let field = SE3Field::constant(t, 8, 6);
        let sf = synthesize_scene_flow(&d1, &field, &cam()).unwrap();
        for uv in sf.flow.flow.iter() {
            assert!((uv[0] - 1.0).abs() < 1e-12);
            assert!(uv[1].abs() < 1e-12);
        }
        assert!(sf.delta_d.iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn forward_translation_changes_depth() {
        let d1 = Grid::filled(8, 6, 10.0);
        let t = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let field = SE3Field::constant(t, 8, 6);
        let sf = synthesize_scene_flow(&d1, &field, &cam()).unwrap();
        assert!(sf.delta_d.iter().all(|d| (d - 1.0).abs() < 1e-12));
    }

    #[test]
    fn behind_camera_invalidates_pixel() {
        let d1 = Grid::filled(4, 4, 1.0);
        let t = RigidTransform::from_translation(Vector3::new(0.0, 0.0, -2.0));
        let field = SE3Field::constant(t, 4, 4);
        let sf = synthesize_scene_flow(&d1, &field, &cam()).unwrap();
        assert!(sf.flow.valid.iter().all(|&v| !v));
    }

    #[test]
    fn invalid_depth_propagates() {
        let mut d1 = Grid::filled(4, 4, 3.0);
        d1.set(1, 2, 0.0);
        d1.set(2, 2, f64::NAN);
        let field = SE3Field::constant(RigidTransform::identity(), 4, 4);
        let sf = synthesize_scene_flow(&d1, &field, &cam()).unwrap();
        assert!(!sf.flow.valid.get(1, 2));
        assert!(!sf.flow.valid.get(2, 2));
        assert!(*sf.flow.valid.get(0, 0));
    }

    #[test]
    fn scene_flow_3d_cases() {
        let c = cam();
        let d1 = Grid::filled(64, 48, 4.0);
        let id = SE3Field::constant(RigidTransform::identity(), 64, 48);
        assert!(scene_flow_3d(&d1, &id, &c)
            .unwrap()
            .motion
            .iter()
            .all(|m| m.norm() < 1e-15));

        let t = Vector3::new(0.3, -0.2, 0.5);
        let tr = SE3Field::constant(RigidTransform::from_translation(t), 64, 48);
        assert!(scene_flow_3d(&d1, &tr, &c)
            .unwrap()
            .motion
            .iter()
            .all(|m| (m - t).norm() < 1e-12));

        // Rotation about the optical axis leaves the principal-point pixel fixed.
        let rot = exp(&Twist::from_array([0.0, 0.0, 0.0, 0.0, 0.0, 0.3])).unwrap();
        let sf = scene_flow_3d(&d1, &SE3Field::constant(rot, 64, 48), &c).unwrap();
        assert!(sf.motion.get(32, 24).norm() < 1e-12);
        assert!(sf.motion.get(0, 0).norm() > 0.1);
    }

    #[test]
    fn rigid_flow_matches_constant_field_bitwise() {
        let c = cam();
        let d1 = Grid::from_fn(16, 12, |x, y| 3.0 + 0.1 * x as f64 + 0.05 * y as f64);
        let t = exp(&Twist::from_array([0.1, -0.05, 0.2, 0.01, -0.02, 0.03])).unwrap();
        let a = rigid_flow(&d1, &t, &c);
        let b = synthesize_scene_flow(&d1, &SE3Field::constant(t, 16, 12), &c)
            .unwrap()
            .flow;
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn project_backproject_round_trip(x in -50.0f64..150.0, y in -50.0f64..100.0, d in 0.1f64..100.0) {
            let c = cam();
            let p = c.backproject([x, y], d).unwrap();
            let q = c.project(&p).unwrap();
            prop_assert!((q[0] - x).abs() < 1e-9 && (q[1] - y).abs() < 1e-9);
        }

        #[test]
        fn disparity_round_trip(z in 0.1f64..500.0) {
            let c = PinholeCamera::new(721.0, 721.0, 0.0, 0.0, 0.54).unwrap();
            let back = c.depth_from_disparity(c.disparity_from_depth(z).unwrap()).unwrap();
            prop_assert!((back - z).abs() <= 1e-12 * z.max(1.0));
        }

        #[test]
        fn transformed_depth_is_moved_z(v in prop::array::uniform3(-0.5f64..0.5), w in prop::array::uniform3(-0.1f64..0.1)) {
            let c = cam();
            let d1 = Grid::from_fn(12, 9, |x, y| 5.0 + 0.3 * x as f64 - 0.2 * y as f64);
            let t = exp(&Twist::new(Vector3::from(v), Vector3::from(w))).unwrap();
            let sf = synthesize_scene_flow(&d1, &SE3Field::constant(t, 12, 9), &c).unwrap();
            let dbar = sf.transformed_depth(&d1);
            for y in 0..9 {
                for x in 0..12 {
                    let p = c.backproject([x as f64, y as f64], *d1.get(x, y)).unwrap();
                    prop_assert!((dbar.get(x, y) - t.act(&p).z).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn joint_scaling_preserves_optical_flow(s in 0.2f64..5.0, v in prop::array::uniform3(-0.5f64..0.5), w in prop::array::uniform3(-0.1f64..0.1)) {
            let c = cam();
            let d1 = Grid::from_fn(10, 8, |x, y| 6.0 + 0.2 * x as f64 + 0.1 * y as f64);
            let xi = Twist::new(Vector3::from(v), Vector3::from(w));
            let t = exp(&xi).unwrap();
            let ts = RigidTransform::new(t.rotation, t.translation * s);
            let a = synthesize_scene_flow(&d1, &SE3Field::constant(t, 10, 8), &c).unwrap();
            let b = synthesize_scene_flow(&d1.map(|d| d * s), &SE3Field::constant(ts, 10, 8), &c).unwrap();
            for i in 0..a.delta_d.len() {
                let (fa, fb) = (a.flow.flow.as_slice()[i], b.flow.flow.as_slice()[i]);
                prop_assert!((fa[0] - fb[0]).abs() < 1e-9 && (fa[1] - fb[1]).abs() < 1e-9);
                prop_assert!((b.delta_d.as_slice()[i] - s * a.delta_d.as_slice()[i]).abs() < 1e-9);
            }
        }
    }
}
