//! Procedural ray-cast scenes with analytic ground truth.
//!
//! The world frame is the first camera. Static surfaces map to the second camera by the
//! ego-motion `T_ego`; an object with motion `M` maps by `T_ego ∘ M`. The right stereo
//! camera sits `baseline` metres along +x of the first camera.

use std::str::FromStr;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{DepthMap, FlowField, PinholeCamera, MIN_Z};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, CropWindow, Grid, Image};
use crate::lie::{RigidTransform, Twist};
use crate::losses::{MotionEstimate, SceneFrame};
use crate::motion_field::{field_log, SE3Field, SoftMask};

/// Rigid motion written as a rotation vector (axis times angle, radians) and a translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Motion {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl Motion {
    pub fn identity() -> Self {
        Motion::default()
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Motion {
            rotation: [0.0; 3],
            translation: t,
        }
    }

    pub fn to_transform(&self) -> RigidTransform {
        RigidTransform::new(
            UnitQuaternion::from_scaled_axis(Vector3::from(self.rotation)),
            Vector3::from(self.translation),
        )
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == [0.0; 3] && self.translation == [0.0; 3]
    }
}

/// Solid texture evaluated at rest-frame surface points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Texture {
    /// Smooth lattice value noise; `scale` is the lattice spacing in metres.
    Noise { scale: f64, octaves: u32 },
    /// Sum of sinusoids along the three axes with period `scale` metres.
    Waves { scale: f64 },
}

impl Texture {
    fn validate(&self) -> Result<()> {
        let (scale, ok) = match *self {
            Texture::Noise { scale, octaves } => (scale, (1..=6).contains(&octaves)),
            Texture::Waves { scale } => (scale, true),
        };
        if !(scale.is_finite() && scale > 0.0 && ok) {
            return Err(Error::InvalidArgument(format!("bad texture {self:?}")));
        }
        Ok(())
    }

    fn color(&self, p: &Vector3<f64>, seed: u64) -> [f64; 3] {
        let mut out = [0.0; 3];
        match *self {
            Texture::Noise { scale, octaves } => {
                for (c, o) in out.iter_mut().enumerate() {
                    let mut amp = 1.0;
                    let mut freq = 1.0 / scale;
                    let mut sum = 0.0;
                    let mut norm = 0.0;
                    for oct in 0..octaves {
                        let s = seed ^ ((c as u64) << 40) ^ ((oct as u64) << 48);
                        sum += amp * value_noise(p * freq, s);
                        norm += amp;
                        amp *= 0.5;
                        freq *= 2.0;
                    }
                    *o = 0.5 + 0.8 * (sum / norm - 0.5);
                }
            }
            Texture::Waves { scale } => {
                let k = std::f64::consts::TAU / scale;
                for (c, o) in out.iter_mut().enumerate() {
                    let phase = c as f64 * 1.3 + (seed % 97) as f64 * 0.1;
                    let s = (k * p.x + phase).sin()
                        + (k * p.y + 0.7 * phase).sin()
                        + (k * p.z - phase).sin();
                    *o = 0.5 + 0.12 * s;
                }
            }
        }
        out
    }
}

fn lattice_hash(i: i64, j: i64, k: i64, seed: u64) -> f64 {
    let mut h = seed
        ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (k as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h = h.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinear lattice noise with quintic fade, values in [0, 1].
fn value_noise(p: Vector3<f64>, seed: u64) -> f64 {
    let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
    let base = [p.x.floor(), p.y.floor(), p.z.floor()];
    let f = [
        fade(p.x - base[0]),
        fade(p.y - base[1]),
        fade(p.z - base[2]),
    ];
    let b = [base[0] as i64, base[1] as i64, base[2] as i64];
    let mut acc = 0.0;
    for corner in 0..8 {
        let d = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut w = 1.0;
        for a in 0..3 {
            w *= if d[a] == 1 { f[a] } else { 1.0 - f[a] };
        }
        acc += w * lattice_hash(
            b[0] + d[0] as i64,
            b[1] + d[1] as i64,
            b[2] + d[2] as i64,
            seed,
        );
    }
    acc
}

/// Infinite static plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    pub point: [f64; 3],
    pub normal: [f64; 3],
    pub texture: Texture,
}

/// Axis-aligned box (in its first-frame pose) with its own motion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub center: [f64; 3],
    pub half_size: [f64; 3],
    pub texture: Texture,
    #[serde(default)]
    pub motion: Motion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub full_width: usize,
    pub full_height: usize,
    pub window: CropWindow,
    /// Intrinsics of the full image.
    pub camera: PinholeCamera,
    pub background: Vec<PlaneSpec>,
    #[serde(default)]
    pub objects: Vec<BoxSpec>,
    #[serde(default)]
    pub ego_motion: Motion,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    /// 80×60 full image, 64×48 crop, one slanted textured wall 7.5 to 15 m away,
    /// no objects and no motion.
    pub fn default_static(seed: u64) -> Self {
        SceneSpec {
            full_width: 80,
            full_height: 60,
            window: CropWindow::centered_margin(80, 60, 0.1),
            camera: PinholeCamera {
                fx: 70.0,
                fy: 70.0,
                cx: 39.5,
                cy: 29.5,
                baseline: 0.54,
            },
            background: vec![PlaneSpec {
                point: [0.0, 0.0, 10.0],
                normal: [-0.25, -0.4, 1.0],
                texture: Texture::Noise {
                    scale: 2.5,
                    octaves: 2,
                },
            }],
            objects: Vec::new(),
            ego_motion: Motion::identity(),
            seed,
        }
    }

    pub fn crop_dims(&self) -> (usize, usize) {
        (self.window.width, self.window.height)
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        if self.full_width < 2 || self.full_height < 2 {
            return Err(Error::InvalidArgument("image must be at least 2x2".into()));
        }
        self.window
            .check_inside(self.full_width, self.full_height)?;
        if self.background.is_empty() {
            return Err(Error::InvalidArgument(
                "scene needs at least one background plane".into(),
            ));
        }
        let finite = |a: &[f64; 3]| a.iter().all(|v| v.is_finite());
        for m in std::iter::once(&self.ego_motion).chain(self.objects.iter().map(|o| &o.motion)) {
            if !(finite(&m.rotation) && finite(&m.translation)) {
                return Err(Error::NonFinite("scene motion".into()));
            }
        }
        for p in &self.background {
            p.texture.validate()?;
            let n = Vector3::from(p.normal);
            if !(finite(&p.point) && n.norm() > 0.0 && n.norm().is_finite()) {
                return Err(Error::InvalidArgument(
                    "plane needs a finite point and non-zero normal".into(),
                ));
            }
            if n.normalize().dot(&Vector3::from(p.point)).abs() < 1e-9 {
                return Err(Error::InvalidArgument(
                    "plane passes through the camera".into(),
                ));
            }
        }
        let views = [
            RigidTransform::identity(),
            self.ego_motion.to_transform(),
            RigidTransform::from_translation(Vector3::new(-self.camera.baseline, 0.0, 0.0)),
        ];
        for o in &self.objects {
            o.texture.validate()?;
            if !(finite(&o.center) && finite(&o.half_size) && o.half_size.iter().all(|h| *h > 0.0))
            {
                return Err(Error::InvalidArgument(
                    "box needs a finite center and positive half sizes".into(),
                ));
            }
            for (vi, view) in views.iter().enumerate() {
                let pose = if vi == 1 {
                    view.compose(&o.motion.to_transform())
                } else {
                    *view
                };
                for corner in 0..8 {
                    let s = |bit: usize, a: usize| {
                        if corner >> bit & 1 == 1 {
                            o.half_size[a]
                        } else {
                            -o.half_size[a]
                        }
                    };
                    let c = Vector3::new(
                        o.center[0] + s(0, 0),
                        o.center[1] + s(1, 1),
                        o.center[2] + s(2, 2),
                    );
                    let z = pose.act(&c).z;
                    if z <= MIN_Z {
                        return Err(Error::BehindCamera { z });
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Plane {
        point: Vector3<f64>,
        normal: Vector3<f64>,
    },
    Cuboid {
        min: Vector3<f64>,
        max: Vector3<f64>,
    },
}

#[derive(Clone, Copy, Debug)]
struct Surface {
    shape: Shape,
    texture: Texture,
    seed: u64,
    /// Motion in the world frame between the two captures.
    motion: RigidTransform,
    is_static: bool,
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    depth: f64,
    surface: usize,
}

impl Shape {
    /// Ray parameter of the first intersection in front of the origin.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match *self {
            Shape::Plane { point, normal } => {
                let denom = normal.dot(d);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = normal.dot(&(point - o)) / denom;
                (t > MIN_Z).then_some(t)
            }
            Shape::Cuboid { min, max } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    t0 = t0.max(ta);
                    t1 = t1.min(tb);
                }
                (t0 <= t1 && t0 > MIN_Z).then_some(t0)
            }
        }
    }
}

/// A scene as seen from one camera: per-surface pose mapping rest coordinates to the camera.
struct View<'a> {
    surfaces: &'a [Surface],
    inverses: Vec<RigidTransform>,
}

impl<'a> View<'a> {
    fn new(surfaces: &'a [Surface], pose_of: impl Fn(&Surface) -> RigidTransform) -> Self {
        let inverses = surfaces.iter().map(|s| pose_of(s).inverse()).collect();
        View { surfaces, inverses }
    }

    /// Casts the camera ray with direction `(dx, dy, 1)`; depth equals the ray parameter.
    fn cast(&self, dx: f64, dy: f64) -> Option<(Hit, Vector3<f64>)> {
        let d = Vector3::new(dx, dy, 1.0);
        let mut best: Option<(Hit, Vector3<f64>)> = None;
        for (k, s) in self.surfaces.iter().enumerate() {
            let inv = &self.inverses[k];
            let o = inv.translation;
            let dr = inv.rotation * d;
            if let Some(t) = s.shape.intersect(&o, &dr) {
                if best.as_ref().is_none_or(|(h, _)| t < h.depth) {
                    best = Some((
                        Hit {
                            depth: t,
                            surface: k,
                        },
                        o + dr * t,
                    ));
                }
            }
        }
        best
    }

    fn render(
        &self,
        cam: &PinholeCamera,
        w: usize,
        h: usize,
    ) -> Result<(Image, DepthMap, Grid<usize>)> {
        let pixels: Vec<Option<([f64; 3], f64, usize)>> = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                self.cast((x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy)
                    .map(|(hit, rest)| {
                        let s = &self.surfaces[hit.surface];
                        (s.texture.color(&rest, s.seed), hit.depth, hit.surface)
                    })
            })
            .collect();
        if pixels.iter().any(|p| p.is_none()) {
            return Err(Error::InvalidArgument(
                "some camera rays hit no surface".into(),
            ));
        }
        let mut img = Vec::with_capacity(w * h);
        let mut depth = Vec::with_capacity(w * h);
        let mut ids = Vec::with_capacity(w * h);
        for (c, d, k) in pixels.into_iter().flatten() {
            img.push(c);
            depth.push(d);
            ids.push(k);
        }
        Ok((
            Grid::from_vec(w, h, img)?,
            Grid::from_vec(w, h, depth)?,
            Grid::from_vec(w, h, ids)?,
        ))
    }
}

/// Everything known about a rendered scene. Unsuffixed grids are crop-size.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub window: CropWindow,
    /// Crop intrinsics.
    pub camera: PinholeCamera,
    pub camera_full: PinholeCamera,
    pub i1: Image,
    pub i2: Image,
    pub i1_full: Image,
    pub i2_full: Image,
    pub d1: DepthMap,
    pub d2: DepthMap,
    pub d1_full: DepthMap,
    pub d2_full: DepthMap,
    /// Right stereo view of the first capture.
    pub right: Image,
    pub right_full: Image,
    pub field: SE3Field,
    pub f12: FlowField,
    pub f21: FlowField,
    /// 1 where the first-frame point is hidden or leaves the full second image.
    pub occluded: BinaryMask,
    /// 1 on static pixels.
    pub rigid: BinaryMask,
    pub t_ego: RigidTransform,
}

impl GroundTruth {
    pub fn noc(&self) -> BinaryMask {
        self.occluded.map(|o| !o)
    }

    /// Loss inputs with full-image warping and the stereo view.
    pub fn frame(&self) -> SceneFrame {
        SceneFrame {
            i1: self.i1.clone(),
            i2: self.i2.clone(),
            i2_full: Some(self.i2_full.clone()),
            d1: self.d1.clone(),
            d2: self.d2.clone(),
            d2_full: Some(self.d2_full.clone()),
            camera: self.camera,
            window: Some(self.window),
            stereo_right: Some(self.right.clone()),
        }
    }

    /// Ground-truth field, rigidity mask and depth as a motion estimate.
    pub fn estimate(&self) -> Result<MotionEstimate> {
        MotionEstimate::from_field(
            self.field.clone(),
            SoftMask::from_binary(&self.rigid),
            &self.d1,
            &self.camera,
        )
    }
}

fn surfaces_of(spec: &SceneSpec) -> Vec<Surface> {
    let mut out = Vec::new();
    for (i, p) in spec.background.iter().enumerate() {
        out.push(Surface {
            shape: Shape::Plane {
                point: Vector3::from(p.point),
                normal: Vector3::from(p.normal).normalize(),
            },
            texture: p.texture,
            seed: spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            motion: RigidTransform::identity(),
            is_static: true,
        });
    }
    for (i, o) in spec.objects.iter().enumerate() {
        let c = Vector3::from(o.center);
        let h = Vector3::from(o.half_size);
        out.push(Surface {
            shape: Shape::Cuboid {
                min: c - h,
                max: c + h,
            },
            texture: o.texture,
            seed: spec
                .seed
                .wrapping_mul(1_000_003)
                .wrapping_add(1000 + i as u64),
            motion: o.motion.to_transform(),
            is_static: o.motion.is_identity(),
        });
    }
    out
}

/// Ray-casts both captures and the right view, and derives flows, field and masks from
/// the geometry.
pub fn render(spec: &SceneSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let (fw, fh) = (spec.full_width, spec.full_height);
    let cam = spec.camera;
    let t_ego = spec.ego_motion.to_transform();
    let surfaces = surfaces_of(spec);
    let second_pose = |s: &Surface| t_ego.compose(&s.motion);

    let v1 = View::new(&surfaces, |_| RigidTransform::identity());
    let v2 = View::new(&surfaces, second_pose);
    let right_offset = RigidTransform::from_translation(Vector3::new(-cam.baseline, 0.0, 0.0));
    let vr = View::new(&surfaces, |_| right_offset);

    let (i1_full, d1_full, ids1) = v1.render(&cam, fw, fh)?;
    let (i2_full, d2_full, ids2) = v2.render(&cam, fw, fh)?;
    let (right_full, _, _) = vr.render(&cam, fw, fh)?;

    let win = spec.window;
    let (w, h) = (win.width, win.height);
    let crop_cam = cam.cropped(win.x0, win.y0);

    let pose_of = |k: usize| second_pose(&surfaces[k]);
    let field = SE3Field::new(Grid::from_fn(w, h, |x, y| {
        pose_of(*ids1.get(x + win.x0, y + win.y0))
    }));
    let rigid = Grid::from_fn(w, h, |x, y| {
        surfaces[*ids1.get(x + win.x0, y + win.y0)].is_static
    });

    let mut f12 = FlowField::zeros(w, h);
    let mut f21 = FlowField::zeros(w, h);
    let mut occluded = Grid::filled(w, h, true);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x + win.x0, y + win.y0);
            let src = [xf as f64, yf as f64];

            let p1 = cam.backproject(src, *d1_full.get(xf, yf))?;
            let p2 = pose_of(*ids1.get(xf, yf)).act(&p1);
            if let Ok(t) = cam.project(&p2) {
                f12.flow.set(x, y, [t[0] - src[0], t[1] - src[1]]);
                f12.valid.set(x, y, true);
                let inside = t[0] >= 0.0
                    && t[0] <= (fw - 1) as f64
                    && t[1] >= 0.0
                    && t[1] <= (fh - 1) as f64;
                let visible = inside
                    && v2
                        .cast((t[0] - cam.cx) / cam.fx, (t[1] - cam.cy) / cam.fy)
                        .is_some_and(|(hit, _)| (hit.depth - p2.z).abs() <= 1e-6 * p2.z);
                occluded.set(x, y, !visible);
            }

            let q2 = cam.backproject(src, *d2_full.get(xf, yf))?;
            let q1 = pose_of(*ids2.get(xf, yf)).inverse().act(&q2);
            if let Ok(t) = cam.project(&q1) {
                f21.flow.set(x, y, [t[0] - src[0], t[1] - src[1]]);
                f21.valid.set(x, y, true);
            }
        }
    }

    Ok(GroundTruth {
        window: win,
        camera: crop_cam,
        camera_full: cam,
        i1: i1_full.crop(&win)?,
        i2: i2_full.crop(&win)?,
        d1: d1_full.crop(&win)?,
        d2: d2_full.crop(&win)?,
        right: right_full.crop(&win)?,
        i1_full,
        i2_full,
        d1_full,
        d2_full,
        right_full,
        field,
        f12,
        f21,
        occluded,
        rigid,
        t_ego,
    })
}

/// Kinds of controlled wrongness applied by [`perturb`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbKind {
    /// Gaussian noise with standard deviation `magnitude` on every twist component.
    TwistNoise,
    /// Each mask value `m` becomes `1 - m` with probability `magnitude`.
    MaskFlip,
    /// First-frame depth multiplied by `1 + magnitude`.
    DepthScale,
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "twist-noise" => Ok(PerturbKind::TwistNoise),
            "mask-flip" => Ok(PerturbKind::MaskFlip),
            "depth-scale" => Ok(PerturbKind::DepthScale),
            other => Err(Error::InvalidArgument(format!(
                "unknown perturbation kind '{other}'"
            ))),
        }
    }
}

/// Per-pixel estimate inputs: twists, soft mask and first-frame depth.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateInputs {
    pub twists: Grid<Twist>,
    pub mask: SoftMask,
    pub depth: DepthMap,
}

impl EstimateInputs {
    pub fn from_ground_truth(gt: &GroundTruth) -> Self {
        let logs = field_log(&gt.field);
        EstimateInputs {
            twists: logs.map(|t| t.unwrap_or_default()),
            mask: SoftMask::from_binary(&gt.rigid),
            depth: gt.d1.clone(),
        }
    }

    /// Replaces the frame's first depth with the estimated one and builds the estimate.
    pub fn apply(&self, frame: &SceneFrame) -> Result<(SceneFrame, MotionEstimate)> {
        let frame = SceneFrame {
            d1: self.depth.clone(),
            ..frame.clone()
        };
        let est =
            MotionEstimate::from_twists(&self.twists, self.mask.clone(), &frame.d1, &frame.camera)?;
        Ok((frame, est))
    }
}

/// Deterministic perturbation of the ground-truth estimate inputs.
pub fn perturb(
    gt: &GroundTruth,
    kind: PerturbKind,
    magnitude: f64,
    seed: u64,
) -> Result<EstimateInputs> {
    if !(magnitude.is_finite() && magnitude >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "perturbation magnitude {magnitude} must be >= 0"
        )));
    }
    let mut out = EstimateInputs::from_ground_truth(gt);
    if magnitude == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        PerturbKind::TwistNoise => {
            let normal =
                Normal::new(0.0, magnitude).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for t in out.twists.as_mut_slice() {
                for c in 0..6 {
                    *t.component_mut(c) += normal.sample(&mut rng);
                }
            }
        }
        PerturbKind::MaskFlip => {
            let p = magnitude.min(1.0);
            let flipped = out
                .mask
                .values()
                .map(|&m| if rng.random_bool(p) { 1.0 - m } else { m });
            out.mask = SoftMask::new(flipped)?;
        }
        PerturbKind::DepthScale => {
            out.depth = out.depth.map(|d| d * (1.0 + magnitude));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::synthesize_scene_flow;
    use crate::losses::{loss_geometric, loss_temporal_photometric};

    fn moving_box_spec() -> SceneSpec {
        let mut spec = SceneSpec::default_static(3);
        spec.objects.push(BoxSpec {
            center: [-0.5, 0.2, 6.0],
            half_size: [0.8, 0.7, 0.5],
            texture: Texture::Noise {
                scale: 1.2,
                octaves: 2,
            },
            motion: Motion::translation([0.4, 0.0, 0.0]),
        });
        spec
    }

    #[test]
    fn static_identity_scene_has_no_motion() {
        let gt = render(&SceneSpec::default_static(1)).unwrap();
        assert!(gt.f12.valid.iter().all(|&v| v));
        assert!(gt
            .f12
            .flow
            .iter()
            .all(|f| f[0].abs() < 1e-9 && f[1].abs() < 1e-9));
        assert!(gt.occluded.iter().all(|&o| !o));
        assert_eq!(gt.i1, gt.i2);
        assert!(gt.rigid.iter().all(|&r| r));
    }

    #[test]
    fn pure_ego_translation_gives_constant_field() {
        let mut spec = SceneSpec::default_static(2);
        spec.ego_motion = Motion::translation([0.1, 0.0, -0.3]);
        let gt = render(&spec).unwrap();
        let t = spec.ego_motion.to_transform();
        assert!(gt.field.transforms().iter().all(|x| *x == t));
        assert!(gt.rigid.iter().all(|&r| r));
    }

    #[test]
    fn flow_is_self_consistent_with_field() {
        let mut spec = moving_box_spec();
        spec.ego_motion = Motion {
            rotation: [0.0, 0.02, 0.0],
            translation: [0.05, 0.0, 0.3],
        };
        let gt = render(&spec).unwrap();
        let sf = synthesize_scene_flow(&gt.d1, &gt.field, &gt.camera).unwrap();
        for y in 0..48 {
            for x in 0..64 {
                let (a, b) = (gt.f12.flow.get(x, y), sf.flow.flow.get(x, y));
                assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn moving_box_occludes_a_band_ahead_of_it() {
        let spec = moving_box_spec();
        let gt = render(&spec).unwrap();
        let cam = gt.camera_full;
        let o = &spec.objects[0];
        // brute force: frame-2 footprint of the box front face, in full-image pixels
        let z = o.center[2] - o.half_size[2];
        let shift = o.motion.translation[0];
        let left = cam.fx * (o.center[0] - o.half_size[0] + shift) / z + cam.cx;
        let right = cam.fx * (o.center[0] + o.half_size[0] + shift) / z + cam.cx;
        let top = cam.fy * (o.center[1] - o.half_size[1]) / z + cam.cy;
        let bottom = cam.fy * (o.center[1] + o.half_size[1]) / z + cam.cy;
        let win = gt.window;
        let mut count = 0;
        for y in 0..48 {
            for x in 0..64 {
                let (xf, yf) = ((x + win.x0) as f64, (y + win.y0) as f64);
                let on_box = !gt.rigid.get(x, y);
                let f = gt.f12.flow.get(x, y);
                let (tx, ty) = (xf + f[0], yf + f[1]);
                let covered = !on_box && tx >= left && tx <= right && ty >= top && ty <= bottom;
                assert_eq!(*gt.occluded.get(x, y), covered, "({x},{y})");
                count += covered as usize;
            }
        }
        // band width is the box's image-space displacement
        let width = cam.fx * shift / z;
        let rows = (0..48)
            .filter(|&y| (0..64).any(|x| *gt.occluded.get(x, y)))
            .count();
        assert!(rows > 0);
        let per_row = count as f64 / rows as f64;
        assert!((per_row - width).abs() <= 1.0, "{per_row} vs {width}");
    }

    #[test]
    fn rendering_is_deterministic_and_seeded() {
        let a = render(&moving_box_spec()).unwrap();
        let b = render(&moving_box_spec()).unwrap();
        assert_eq!(a.i1, b.i1);
        assert_eq!(a.right, b.right);
        let mut other = moving_box_spec();
        other.seed = 99;
        assert_ne!(render(&other).unwrap().i1, a.i1);
    }

    #[test]
    fn right_view_matches_disparity_shift() {
        let gt = render(&SceneSpec::default_static(5)).unwrap();
        let cam = gt.camera;
        let (w, h) = gt.i1.dims();
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                let d = cam.disparity_from_depth(*gt.d1.get(x, y)).unwrap();
                let xr = x as f64 - d;
                if xr < 0.0 {
                    continue;
                }
                let x0 = (xr.floor() as usize).min(w - 2);
                let a = xr - x0 as f64;
                let sample: Vec<f64> = (0..3)
                    .map(|c| (1.0 - a) * gt.right.get(x0, y)[c] + a * gt.right.get(x0 + 1, y)[c])
                    .collect();
                for c in 0..3 {
                    let e = (sample[c] - gt.i1.get(x, y)[c]).abs();
                    worst = worst.max(e);
                }
                checked += 1;
            }
        }
        assert!(checked > w * h / 2);
        assert!(worst < 1e-2, "worst {worst}");
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        let mut spec = moving_box_spec();
        spec.objects[0].center[2] = 0.2;
        assert!(matches!(render(&spec), Err(Error::BehindCamera { .. })));
        let mut spec = SceneSpec::default_static(0);
        spec.background[0].point = [0.0, 0.0, 0.0];
        assert!(render(&spec).is_err());
    }

    #[test]
    fn perturbations() {
        let mut spec = SceneSpec::default_static(4);
        spec.ego_motion = Motion {
            rotation: [0.0, 0.03, 0.0],
            translation: [0.0; 3],
        };
        let gt = render(&spec).unwrap();
        let base = EstimateInputs::from_ground_truth(&gt);
        for kind in [
            PerturbKind::TwistNoise,
            PerturbKind::MaskFlip,
            PerturbKind::DepthScale,
        ] {
            assert_eq!(perturb(&gt, kind, 0.0, 1).unwrap(), base);
            assert_eq!(
                perturb(&gt, kind, 0.1, 1).unwrap(),
                perturb(&gt, kind, 0.1, 1).unwrap()
            );
        }
        assert!("bogus".parse::<PerturbKind>().is_err());
        assert_eq!(
            "mask-flip".parse::<PerturbKind>().unwrap(),
            PerturbKind::MaskFlip
        );

        let frame = gt.frame();
        let noc = gt.noc();
        let mut prev = -1.0;
        for sigma in [0.0, 0.01, 0.05] {
            let (f, est) = perturb(&gt, PerturbKind::TwistNoise, sigma, 7)
                .unwrap()
                .apply(&frame)
                .unwrap();
            let lp = loss_temporal_photometric(&f, &est, &noc, 0.15).unwrap();
            assert!(lp > prev, "sigma {sigma}: {lp} <= {prev}");
            prev = lp;
        }

        // rotation-only motion: flow does not depend on depth, geometry does
        let (f0, e0) = base.apply(&frame).unwrap();
        let (f1, e1) = perturb(&gt, PerturbKind::DepthScale, 0.1, 0)
            .unwrap()
            .apply(&frame)
            .unwrap();
        let lp0 = loss_temporal_photometric(&f0, &e0, &noc, 0.15).unwrap();
        let lp1 = loss_temporal_photometric(&f1, &e1, &noc, 0.15).unwrap();
        assert!((lp0 - lp1).abs() < 1e-12);
        assert!(loss_geometric(&f1, &e1, &noc).unwrap() > 1e-3);
    }
}
