//! Geometry and loss kernel for self-supervised monocular scene flow with dense
//! SE(3) motion fields.
//!
//! * [`lie`]: SE(3)/se(3) exponential, logarithm and group operations.
//! * [`camera`]: pinhole model; depth + motion to `(u, v, ΔD)`, 3-D and rigid flow.
//! * [`motion_field`]: dense SE(3) fields, rigidity soft masks, ego-motion aggregation.
//! * [`warp`]: bilinear view synthesis (with full-image warping), SSIM, photometric error.
//! * [`masks`]: forward-backward occlusion mask and photometric outlier mask.
//! * [`losses`]: the self-supervision loss suite and the iteration-weighted total.
//! * [`refine`]: direct blockwise minimization of the total loss.
//! * [`evaluation`]: scene-flow, depth and odometry metrics with Umeyama alignment.
//! * [`synthetic`]: procedural ray-cast scenes with analytic ground truth.
//! * [`io`]: KITTI-style PNG flow/disparity, PFM, mask, pose and intrinsics files.

pub mod camera;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod io;
pub mod lie;
pub mod losses;
pub mod masks;
pub mod motion_field;
pub mod refine;
pub mod synthetic;
pub mod warp;

pub use camera::{DepthMap, DisparityMap, FlowField, PinholeCamera, SceneFlowUVD};
pub use error::{Error, Result};
pub use grid::{BinaryMask, CropWindow, Grid, Image};
pub use lie::{RigidTransform, Twist};
pub use motion_field::{EgoMotion, SE3Field, SoftMask};
