//! Dense SE(3) motion fields, the rigidity soft mask, and ego-motion aggregation.
//!
//! The ego-motion is the mask-weighted mean of the per-pixel motions taken in
//! log-coordinates and mapped back with the exponential:
//!
//! ```text
//! T_ego = Exp( Σ M(x) Log(T(x)) / Σ M(x) )
//! ```
//!
//! Pixels whose logarithm is undefined (rotation angle near pi) are excluded with
//! zero weight and counted in [`EgoMotion::excluded`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, CompensatedSum, Grid};
use crate::lie::{exp, log, RigidTransform, Twist};

/// Minimum mask mass for the ego-motion to be defined.
pub const MASS_EPS: f64 = 1e-6;

/// A rigid transform per pixel (`T_{1->2}`), with per-pixel validity.
#[derive(Clone, Debug, PartialEq)]
pub struct SE3Field {
    transforms: Grid<RigidTransform>,
    valid: BinaryMask,
}

impl SE3Field {
    pub fn new(transforms: Grid<RigidTransform>) -> Self {
        let valid = transforms.map(|t| t.is_finite());
        SE3Field { transforms, valid }
    }

    pub fn constant(t: RigidTransform, width: usize, height: usize) -> Self {
        SE3Field::new(Grid::filled(width, height, t))
    }

    pub fn transforms(&self) -> &Grid<RigidTransform> {
        &self.transforms
    }

    pub fn valid(&self) -> &BinaryMask {
        &self.valid
    }

    pub fn dims(&self) -> (usize, usize) {
        self.transforms.dims()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<RigidTransform> {
        if *self.valid.get(x, y) {
            Some(*self.transforms.get(x, y))
        } else {
            None
        }
    }
}

/// Per-pixel log-coordinates; `None` where the logarithm is undefined.
pub type TwistGrid = Grid<Option<Twist>>;

pub fn field_from_constant(t: RigidTransform, width: usize, height: usize) -> SE3Field {
    SE3Field::constant(t, width, height)
}

pub fn field_log(field: &SE3Field) -> TwistGrid {
    Grid::from_fn(field.dims().0, field.dims().1, |x, y| {
        field.get(x, y).and_then(|t| log(&t).ok())
    })
}

/// Elementwise exponential; non-finite twists become invalid pixels.
pub fn field_exp(twists: &Grid<Twist>) -> SE3Field {
    let mut valid = Grid::filled(twists.width(), twists.height(), true);
    let transforms = Grid::from_fn(twists.width(), twists.height(), |x, y| {
        exp(twists.get(x, y)).unwrap_or_else(|_| {
            valid.set(x, y, false);
            RigidTransform::identity()
        })
    });
    SE3Field { transforms, valid }
}

/// Per-pixel rigidity probabilities in `[0, 1]` (`M_r`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Grid<f64>", into = "Grid<f64>")]
pub struct SoftMask(Grid<f64>);

impl SoftMask {
    pub fn new(values: Grid<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "soft mask value {bad} outside [0, 1]"
            )));
        }
        Ok(SoftMask(values))
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        SoftMask::new(Grid::filled(width, height, value))
    }

    pub fn from_binary(mask: &BinaryMask) -> Self {
        SoftMask(mask.map(|&b| if b { 1.0 } else { 0.0 }))
    }

    pub fn values(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        *self.0.get(x, y)
    }

    pub fn scaled(&self, c: f64) -> Result<SoftMask> {
        SoftMask::new(self.0.map(|v| v * c))
    }
}

impl TryFrom<Grid<f64>> for SoftMask {
    type Error = Error;
    fn try_from(g: Grid<f64>) -> Result<Self> {
        SoftMask::new(g)
    }
}

impl From<SoftMask> for Grid<f64> {
    fn from(m: SoftMask) -> Grid<f64> {
        m.0
    }
}

/// Result of ego-motion aggregation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoMotion {
    pub transform: RigidTransform,
    /// The weighted mean twist before the exponential.
    pub twist: Twist,
    /// Total mask weight over usable pixels.
    pub mass: f64,
    /// Pixels dropped because their logarithm is undefined.
    pub excluded: usize,
}

/// Mask-weighted Lie-algebra mean of the field, mapped back to SE(3).
pub fn aggregate_ego_motion(field: &SE3Field, mask: &SoftMask) -> Result<EgoMotion> {
    field
        .transforms
        .check_dims(&mask.0, "soft mask vs SE3 field")?;
    aggregate_twists(&field_log(field), mask)
}

/// [`aggregate_ego_motion`] on precomputed log-coordinates.
pub fn aggregate_twists(twists: &TwistGrid, mask: &SoftMask) -> Result<EgoMotion> {
    twists.check_dims(&mask.0, "soft mask vs twist grid")?;
    let mut num = [CompensatedSum::new(); 6];
    let mut mass = CompensatedSum::new();
    let mut excluded = 0;
    for (xi, &m) in twists.iter().zip(mask.0.iter()) {
        match xi {
            Some(xi) => {
                mass.add(m);
                for (i, s) in num.iter_mut().enumerate() {
                    s.add(m * xi.component(i));
                }
            }
            None => excluded += 1,
        }
    }
    let mass = mass.value();
    if !(mass > MASS_EPS) {
        return Err(Error::EmptySupport {
            mass,
            threshold: MASS_EPS,
        });
    }
    let mut mean = [0.0; 6];
    for (m, s) in mean.iter_mut().zip(num.iter()) {
        *m = s.value() / mass;
    }
    let twist = Twist::from_array(mean);
    Ok(EgoMotion {
        transform: exp(&twist)?,
        twist,
        mass,
        excluded,
    })
}

/// Gradients of a scalar loss through the aggregation, given the loss gradient with
/// respect to the aggregated twist.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateGradients {
    /// `∂L/∂M(x) = upstream · (ξ(x) - ξ̄) / ΣM`
    pub mask: Grid<f64>,
    /// `∂L/∂ξ(x) = upstream · M(x) / ΣM`
    pub twist: Grid<Twist>,
    pub ego: EgoMotion,
}

/// Backpropagates `upstream = ∂L/∂ξ̄` to the mask entries and per-pixel twists.
/// Excluded pixels receive zero gradient.
pub fn aggregate_gradients(
    twists: &TwistGrid,
    mask: &SoftMask,
    upstream: &Twist,
) -> Result<AggregateGradients> {
    let ego = aggregate_twists(twists, mask)?;
    let inv_mass = 1.0 / ego.mass;
    let (w, h) = twists.dims();
    let mut d_mask = Grid::filled(w, h, 0.0);
    let mut d_twist = Grid::filled(w, h, Twist::zero());
    for y in 0..h {
        for x in 0..w {
            if let Some(xi) = twists.get(x, y) {
                d_mask.set(x, y, upstream.dot(&(*xi - ego.twist)) * inv_mass);
                d_twist.set(x, y, *upstream * (mask.get(x, y) * inv_mass));
            }
        }
    }
    Ok(AggregateGradients {
        mask: d_mask,
        twist: d_twist,
        ego,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn grid_of(twists: &[Twist], w: usize, h: usize) -> TwistGrid {
        Grid::from_vec(w, h, twists.iter().map(|t| Some(*t)).collect()).unwrap()
    }

    #[test]
    fn constant_field_recovers_transform() {
        let t = exp(&Twist::from_array([0.2, -0.1, 0.4, 0.05, 0.1, -0.02])).unwrap();
        let field = field_from_constant(t, 5, 4);
        let mask = SoftMask::new(Grid::from_fn(5, 4, |x, y| ((x + y) % 3) as f64 / 2.0)).unwrap();
        let ego = aggregate_ego_motion(&field, &mask).unwrap();
        assert!(ego.transform.max_abs_diff(&t) < 1e-12);
        assert_eq!(ego.excluded, 0);
    }

    #[test]
    fn two_pixel_weighted_mean() {
        let a = Twist::from_array([0.1, 0.0, 0.3, 0.02, -0.01, 0.0]);
        let b = Twist::from_array([-0.2, 0.4, 0.1, 0.0, 0.03, 0.05]);
        let mask = SoftMask::new(Grid::from_vec(2, 1, vec![0.25, 0.75]).unwrap()).unwrap();
        let ego = aggregate_twists(&grid_of(&[a, b], 2, 1), &mask).unwrap();
        let expected = exp(&((a + b * 3.0) * 0.25)).unwrap();
        assert!(ego.transform.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn zero_mask_is_empty_support() {
        let field = field_from_constant(RigidTransform::identity(), 3, 3);
        let mask = SoftMask::filled(3, 3, 0.0).unwrap();
        assert!(matches!(
            aggregate_ego_motion(&field, &mask),
            Err(Error::EmptySupport { .. })
        ));
    }

    #[test]
    fn near_pi_pixels_are_excluded() {
        let flip = exp(&Twist::from_array([
            0.0,
            0.0,
            0.0,
            std::f64::consts::PI,
            0.0,
            0.0,
        ]))
        .unwrap();
        let t = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let mut g = Grid::filled(3, 1, t);
        g.set(1, 0, flip);
        let field = SE3Field::new(g);
        let ego = aggregate_ego_motion(&field, &SoftMask::filled(3, 1, 1.0).unwrap()).unwrap();
        assert_eq!(ego.excluded, 1);
        assert!(ego.transform.max_abs_diff(&t) < 1e-12);
    }

    #[test]
    fn gradient_trivial_cases() {
        let xi = Twist::from_array([0.1, 0.2, 0.3, 0.01, 0.02, 0.03]);
        let up = Twist::from_array([1.0, -2.0, 0.5, 3.0, 0.0, 1.0]);
        let twists = grid_of(&[xi; 4], 2, 2);
        let mask = SoftMask::filled(2, 2, 0.7).unwrap();
        let g = aggregate_gradients(&twists, &mask, &up).unwrap();
        assert!(g.mask.iter().all(|d| d.abs() < 1e-15));
        // uniform mask over N pixels: dξ̄/dξ_x = I/N
        for d in g.twist.iter() {
            assert!((*d - up * 0.25).max_abs() < 1e-15);
        }
    }

    #[test]
    fn mask_must_be_probabilities() {
        assert!(SoftMask::filled(2, 2, 1.5).is_err());
        assert!(SoftMask::filled(2, 2, f64::NAN).is_err());
    }

    #[test]
    fn field_exp_log_round_trip() {
        let zero = Grid::filled(4, 3, Twist::zero());
        let f = field_exp(&zero);
        assert!(f
            .transforms()
            .iter()
            .all(|t| t.max_abs_diff(&RigidTransform::identity()) == 0.0));
        let g = Grid::from_fn(4, 3, |x, y| {
            Twist::from_array([
                0.01 * x as f64,
                -0.02 * y as f64,
                0.03,
                0.001 * (x + y) as f64,
                -0.002 * x as f64,
                0.004 * y as f64,
            ])
        });
        let back = field_log(&field_exp(&g));
        for (a, b) in back.iter().zip(g.iter()) {
            assert!((a.unwrap() - *b).max_abs() < 1e-9);
        }
        let c = field_log(&field_from_constant(exp(&g.as_slice()[5]).unwrap(), 4, 3));
        assert!(c
            .iter()
            .all(|t| (t.unwrap() - g.as_slice()[5]).max_abs() < 1e-15));
    }
}
