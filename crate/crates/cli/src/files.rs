//! Directory layouts shared by the subcommands: scene directories described by a
//! `frame.json` manifest, and estimate directories of PFM twist and mask maps.

use std::fs;
use std::path::{Path, PathBuf};

use emrmsf_core::camera::{DisparityMap, PinholeCamera};
use emrmsf_core::grid::{BinaryMask, CropWindow, Grid, Image};
use emrmsf_core::io;
use emrmsf_core::lie::Twist;
use emrmsf_core::losses::{MotionEstimate, SceneFrame};
use emrmsf_core::motion_field::SoftMask;
use emrmsf_core::DepthMap;
use serde::{Deserialize, Serialize};

use crate::config::SCHEMA_VERSION;
use crate::CliError;

pub const MANIFEST: &str = "frame.json";
pub const TWIST_V: &str = "twist_v.pfm";
pub const TWIST_W: &str = "twist_w.pfm";
pub const MASK: &str = "mask.pfm";
pub const DEPTH: &str = "depth.pfm";
pub const FLOW: &str = "flow.png";
pub const DISP_1: &str = "disp_1.png";
pub const DISP_2: &str = "disp_2.png";
pub const NOC: &str = "noc.png";
pub const POSES: &str = "poses.txt";

/// Full-size inputs of one frame pair and where the crop sits in them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    /// Intrinsics of the full images.
    pub camera: PinholeCamera,
    pub window: CropWindow,
    pub image_1: PathBuf,
    pub image_2: PathBuf,
    pub depth_1: PathBuf,
    pub depth_2: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_1_right: Option<PathBuf>,
    /// Crop-size non-occlusion mask.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noc: Option<PathBuf>,
}

pub struct LoadedFrame {
    pub frame: SceneFrame,
    pub noc: Option<BinaryMask>,
}

fn crop_image(full: &Image, win: &CropWindow) -> Result<Image, CliError> {
    Ok(full.crop(win)?)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CliError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| emrmsf_core::Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(CliError::Data(format!(
            "{}: schema_version {} is not supported",
            path.display(),
            m.schema_version
        )));
    }
    Ok(m)
}

pub fn load_frame(dir: &Path) -> Result<LoadedFrame, CliError> {
    let m = read_manifest(dir)?;
    let i1_full = io::read_image_png(dir.join(&m.image_1))?;
    let i2_full = io::read_image_png(dir.join(&m.image_2))?;
    let d1_full = io::read_pfm_scalar(dir.join(&m.depth_1))?;
    let d2_full = io::read_pfm_scalar(dir.join(&m.depth_2))?;
    let (w, h) = i1_full.dims();
    for (what, dims) in [
        ("image_2", i2_full.dims()),
        ("depth_1", d1_full.dims()),
        ("depth_2", d2_full.dims()),
    ] {
        if dims != (w, h) {
            return Err(emrmsf_core::Error::ShapeMismatch {
                what,
                expected: (w, h),
                actual: dims,
            }
            .into());
        }
    }
    let win = m.window;
    win.check_inside(w, h)?;
    let right = match &m.image_1_right {
        Some(p) => {
            let full = io::read_image_png(dir.join(p))?;
            Some(crop_image(&full, &win)?)
        }
        None => None,
    };
    let noc = match &m.noc {
        Some(p) => Some(io::read_mask_png(dir.join(p))?),
        None => None,
    };
    let frame = SceneFrame {
        i1: crop_image(&i1_full, &win)?,
        i2: crop_image(&i2_full, &win)?,
        d1: d1_full.crop(&win)?,
        d2: d2_full.crop(&win)?,
        i2_full: Some(i2_full),
        d2_full: Some(d2_full),
        camera: m.camera.cropped(win.x0, win.y0),
        window: Some(win),
        stereo_right: right,
    };
    frame.validate()?;
    if let Some(n) = &noc {
        frame.d1.check_dims(n, "noc mask vs crop")?;
    }
    Ok(LoadedFrame { frame, noc })
}

/// Per-pixel twists, soft mask and (if present) first-frame depth.
pub struct EstimateFiles {
    pub twists: Grid<Twist>,
    pub mask: SoftMask,
    pub depth: Option<DepthMap>,
}

pub fn read_estimate(dir: &Path) -> Result<EstimateFiles, CliError> {
    let v = io::read_pfm::<3>(dir.join(TWIST_V))?;
    let w = io::read_pfm::<3>(dir.join(TWIST_W))?;
    v.check_dims(&w, "twist_w vs twist_v")?;
    let twists = Grid::from_fn(v.width(), v.height(), |x, y| {
        let (a, b) = (v.get(x, y), w.get(x, y));
        Twist::from_array([a[0], a[1], a[2], b[0], b[1], b[2]])
    });
    let mask = SoftMask::new(io::read_pfm_scalar(dir.join(MASK))?)?;
    v.check_dims(mask.values(), "mask vs twist_v")?;
    let depth_path = dir.join(DEPTH);
    let depth = if depth_path.exists() {
        let d = io::read_pfm_scalar(&depth_path)?;
        v.check_dims(&d, "depth vs twist_v")?;
        Some(d)
    } else {
        None
    };
    Ok(EstimateFiles {
        twists,
        mask,
        depth,
    })
}

fn twist_maps(twists: &Grid<Twist>) -> (Grid<[f64; 3]>, Grid<[f64; 3]>) {
    let v = twists.map(|t| [t.v.x, t.v.y, t.v.z]);
    let w = twists.map(|t| [t.w.x, t.w.y, t.w.z]);
    (v, w)
}

pub fn write_twists_and_mask(
    dir: &Path,
    twists: &Grid<Twist>,
    mask: &SoftMask,
) -> Result<(), CliError> {
    let (v, w) = twist_maps(twists);
    io::write_pfm(dir.join(TWIST_V), &v)?;
    io::write_pfm(dir.join(TWIST_W), &w)?;
    io::write_pfm_scalar(dir.join(MASK), mask.values())?;
    Ok(())
}

/// Twists, mask and depth of an estimate plus its flow and the disparities of the
/// first-frame and carried-through depths (when the camera has a baseline).
pub fn write_estimate(
    dir: &Path,
    est: &MotionEstimate,
    d1: &DepthMap,
    cam: &PinholeCamera,
) -> Result<(), CliError> {
    let twists = est.twists.map(|t| t.unwrap_or_default());
    write_twists_and_mask(dir, &twists, &est.mask)?;
    io::write_pfm_scalar(dir.join(DEPTH), d1)?;
    io::write_flow_png(dir.join(FLOW), &est.scene_flow.flow)?;
    if cam.baseline > 0.0 {
        let d2 = est.scene_flow.transformed_depth(d1);
        io::write_disparity_png(dir.join(DISP_1), &DisparityMap::from_depth(d1, cam)?)?;
        io::write_disparity_png(dir.join(DISP_2), &DisparityMap::from_depth(&d2, cam)?)?;
    }
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| {
        emrmsf_core::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }
        .into()
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(emrmsf_core::Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| {
        emrmsf_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}
