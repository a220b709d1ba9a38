mod config;
mod files;
mod viz;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use emrmsf_core::camera::DisparityMap;
use emrmsf_core::evaluation::{
    depth_metrics, evaluate_scene_flow, odometry_errors, umeyama_align, MetricReport,
    SceneFlowMaps, Similarity, Trajectory,
};
use emrmsf_core::grid::Grid;
use emrmsf_core::io;
use emrmsf_core::lie::RigidTransform;
use emrmsf_core::losses::{loss_total, LossMasks, MotionEstimate};
use emrmsf_core::refine::{
    estimate_from_params, refine, write_loss_csv, BlockParams, RefineStatus,
};
use emrmsf_core::synthetic::{render, SceneSpec};
use emrmsf_core::{Error, SoftMask};
use log::{info, warn};
use serde::Serialize;
use thiserror::Error as ThisError;

use config::{pick, Alignment, RunConfig};

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("optimizer stopped: {0}")]
    Diverged(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) | CliError::Data(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Core(e) => match e {
                Error::NearSingular { .. }
                | Error::EmptySupport { .. }
                | Error::Degenerate(_)
                | Error::NonFinite(_)
                | Error::NoValidPixels(_) => 3,
                _ => 2,
            },
        }
    }
}

/// Dense SE(3) motion-field scene flow: synthetic scenes, loss evaluation,
/// direct refinement, benchmark metrics and visualization.
#[derive(Parser, Debug)]
#[command(name = "emrmsf", version)]
struct Cli {
    /// Worker threads for data-parallel kernels (default: all cores).
    #[arg(long, global = true, env = "EMRMSF_THREADS")]
    threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene spec to a scene directory with ground truth.
    GenScene {
        /// Scene spec JSON.
        spec: PathBuf,
        /// Output directory (created if missing).
        outdir: PathBuf,
    },
    /// Evaluate the total loss of an estimate and print the breakdown as JSON.
    ComputeLoss {
        /// Scene directory containing frame.json.
        #[arg(long)]
        frame: Option<PathBuf>,
        /// Estimate directory with twist_v.pfm, twist_w.pfm, mask.pfm and optionally depth.pfm.
        #[arg(long)]
        estimate: Option<PathBuf>,
        /// Run config JSON (defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of identical snapshots in the weighted sum (default: optimizer.n_iters).
        #[arg(long)]
        snapshots: Option<usize>,
        /// Warp within the crop instead of into the full second image.
        #[arg(long)]
        crop_only: bool,
        /// Ignore the right stereo image, dropping the spatial term.
        #[arg(long)]
        no_stereo: bool,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Minimize the total loss over a blockwise motion field; exits 3 if the line search fails.
    Refine {
        /// Scene directory containing frame.json.
        #[arg(long)]
        frame: Option<PathBuf>,
        /// Starting estimate directory (identity motion and neutral mask when omitted).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Run config JSON (defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the estimate, loss.csv and result.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against ground truth and print a metric report.
    Evaluate {
        /// Metric set to compute.
        #[arg(long, value_enum)]
        task: Task,
        /// Prediction directory.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth directory.
        #[arg(long)]
        gt: PathBuf,
        /// Run config JSON (defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trajectory alignment for the odometry task (overrides the config).
        #[arg(long, value_enum)]
        alignment: Option<AlignArg>,
        /// Rendering printed to stdout.
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        /// Also write the JSON report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a flow, depth, mask or flow-error image as an 8-bit RGB PNG.
    Visualize {
        /// What the input holds and how to color it.
        #[arg(long, value_enum)]
        kind: Kind,
        /// Flow PNG (flow, error), depth PFM (depth), mask PFM or PNG (mask).
        #[arg(long)]
        input: PathBuf,
        /// Ground-truth flow PNG, required for kind=error.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
        /// Flow magnitude mapped to full saturation (default: the largest in the image).
        #[arg(long)]
        max_flow: Option<f64>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Task {
    Sceneflow,
    Depth,
    Odometry,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AlignArg {
    None,
    Scale,
    Sim3,
}

impl From<AlignArg> for Alignment {
    fn from(a: AlignArg) -> Self {
        match a {
            AlignArg::None => Alignment::None,
            AlignArg::Scale => Alignment::Scale,
            AlignArg::Sim3 => Alignment::Sim3,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Flow,
    Depth,
    Mask,
    Error,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            warn!("could not size the thread pool: {e}");
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenScene { spec, outdir } => gen_scene(&spec, &outdir),
        Command::ComputeLoss {
            frame,
            estimate,
            config,
            snapshots,
            crop_only,
            no_stereo,
            out,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let frame = pick(frame, &cfg.paths.frame, "frame")?;
            let estimate = pick(estimate, &cfg.paths.estimate, "estimate")?;
            let n = snapshots.unwrap_or(cfg.optimizer.n_iters);
            if n == 0 {
                return Err(CliError::Usage("--snapshots must be at least 1".into()));
            }
            let breakdown = compute_loss(&frame, &estimate, &cfg, n, crop_only, no_stereo)?;
            emit_json(&breakdown, out.as_deref())
        }
        Command::Refine {
            frame,
            init,
            config,
            out,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let frame = pick(frame, &cfg.paths.frame, "frame")?;
            let init = init.or_else(|| cfg.paths.estimate.clone());
            let out = pick(out, &cfg.paths.out, "out")?;
            run_refine(&frame, init.as_deref(), &out, &cfg)
        }
        Command::Evaluate {
            task,
            pred,
            gt,
            config,
            alignment,
            format,
            out,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let report = match task {
                Task::Sceneflow => evaluate_sceneflow(&pred, &gt, &cfg)?,
                Task::Depth => evaluate_depth(&pred, &gt, &cfg)?,
                Task::Odometry => {
                    let align =
                        alignment.map_or(cfg.evaluation.odometry_alignment, Alignment::from);
                    evaluate_odometry(&pred, &gt, &cfg, align)?
                }
            };
            if let Some(path) = &out {
                files::write_json(path, &report)?;
            }
            match format {
                Format::Table => write_stdout(&report.to_table())?,
                Format::Json => emit_json(&report, None)?,
            }
            Ok(())
        }
        Command::Visualize {
            kind,
            input,
            gt,
            out,
            max_flow,
        } => visualize(kind, &input, gt.as_deref(), &out, max_flow),
    }
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(p) => files::write_json(p, value),
        None => {
            let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
            text.push('\n');
            write_stdout(&text)
        }
    }
}

/// A closed pipe on stdout (e.g. `| head`) is not an error.
fn write_stdout(text: &str) -> Result<(), CliError> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }
        .into()),
        _ => Ok(()),
    }
}

fn gen_scene(spec_path: &Path, outdir: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::Io {
        path: spec_path.to_path_buf(),
        source: e,
    })?;
    let spec: SceneSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", spec_path.display())))?;
    let gt = render(&spec)?;
    files::ensure_dir(outdir)?;
    let p = |name: &str| outdir.join(name);

    io::write_image_png(p("image_1.png"), &gt.i1_full)?;
    io::write_image_png(p("image_2.png"), &gt.i2_full)?;
    io::write_image_png(p("image_1_right.png"), &gt.right_full)?;
    io::write_pfm_scalar(p("depth_1.pfm"), &gt.d1_full)?;
    io::write_pfm_scalar(p("depth_2.pfm"), &gt.d2_full)?;
    io::write_mask_png(p(files::NOC), &gt.noc())?;
    io::write_mask_png(p("rigid.png"), &gt.rigid)?;
    io::write_flow_png(p(files::FLOW), &gt.f12)?;

    let est = gt.estimate()?;
    let d2_at_1 = est.scene_flow.transformed_depth(&gt.d1);
    io::write_disparity_png(
        p(files::DISP_1),
        &DisparityMap::from_depth(&gt.d1, &gt.camera)?,
    )?;
    io::write_disparity_png(
        p(files::DISP_2),
        &DisparityMap::from_depth(&d2_at_1, &gt.camera)?,
    )?;
    io::write_pfm_scalar(p(files::DEPTH), &gt.d1)?;
    files::write_twists_and_mask(
        outdir,
        &est.twists.map(|t| t.unwrap_or_default()),
        &est.mask,
    )?;

    // Camera-to-world poses with the first camera as the world frame.
    let poses = [RigidTransform::identity(), gt.t_ego.inverse()];
    io::write_poses(p(files::POSES), &poses)?;
    io::write_intrinsics(p("calib.txt"), &gt.camera_full)?;

    let manifest = files::Manifest {
        schema_version: config::SCHEMA_VERSION,
        camera: gt.camera_full,
        window: gt.window,
        image_1: "image_1.png".into(),
        image_2: "image_2.png".into(),
        depth_1: "depth_1.pfm".into(),
        depth_2: "depth_2.pfm".into(),
        image_1_right: Some("image_1_right.png".into()),
        noc: Some(files::NOC.into()),
    };
    files::write_json(&p(files::MANIFEST), &manifest)?;
    info!("wrote scene to {}", outdir.display());
    Ok(())
}

fn prepared_frame(
    dir: &Path,
    crop_only: bool,
    no_stereo: bool,
) -> Result<(emrmsf_core::losses::SceneFrame, LossMasks), CliError> {
    let loaded = files::load_frame(dir)?;
    let mut frame = if crop_only {
        loaded.frame.crop_only()
    } else {
        loaded.frame
    };
    if no_stereo {
        frame.stereo_right = None;
    }
    let (w, h) = frame.dims();
    let masks = LossMasks {
        noc: loaded.noc.unwrap_or_else(|| Grid::filled(w, h, true)),
        outlier: None,
    };
    Ok((frame, masks))
}

fn compute_loss(
    frame_dir: &Path,
    estimate_dir: &Path,
    cfg: &RunConfig,
    n: usize,
    crop_only: bool,
    no_stereo: bool,
) -> Result<emrmsf_core::losses::LossBreakdown, CliError> {
    let (mut frame, masks) = prepared_frame(frame_dir, crop_only, no_stereo)?;
    let est_files = files::read_estimate(estimate_dir)?;
    frame
        .d1
        .check_dims(&est_files.twists, "estimate vs frame crop")?;
    if let Some(d) = est_files.depth {
        frame.d1 = d;
    }
    let est =
        MotionEstimate::from_twists(&est_files.twists, est_files.mask, &frame.d1, &frame.camera)?;
    let snapshots = vec![est; n];
    Ok(loss_total(&frame, &snapshots, &masks, &cfg.weights)?)
}

#[derive(Serialize)]
struct RefineSummary {
    status: RefineStatus,
    accepted_steps: usize,
    initial_total: f64,
    final_total: f64,
    depth_scale: f64,
    block_size: usize,
    /// Ego-motion twist `[v, w]` of the refined field.
    ego_twist: [f64; 6],
}

fn run_refine(
    frame_dir: &Path,
    init_dir: Option<&Path>,
    out: &Path,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    let (mut frame, masks) = prepared_frame(frame_dir, false, false)?;
    let (w, h) = frame.dims();
    let b = cfg.optimizer.block_size;
    let init = match init_dir {
        Some(dir) => {
            let e = files::read_estimate(dir)?;
            frame.d1.check_dims(&e.twists, "init vs frame crop")?;
            if let Some(d) = e.depth {
                frame.d1 = d;
            }
            BlockParams::from_pixels(&e.twists, &e.mask, b, INIT_MAX_LOGIT)?
        }
        None => BlockParams::identity(b, w, h)?,
    };
    let result = refine(&frame, &init, &masks, &cfg.weights, &cfg.optimizer)?;
    files::ensure_dir(out)?;
    let est = estimate_from_params(&frame, &result.params)?;
    let depth = frame.d1.map(|d| d * result.params.depth_scale());
    files::write_estimate(out, &est, &depth, &frame.camera)?;

    let csv_path = out.join("loss.csv");
    let mut csv = Vec::new();
    write_loss_csv(&result.history, &mut csv).map_err(|e| Error::Io {
        path: csv_path.clone(),
        source: e,
    })?;
    fs::write(&csv_path, csv).map_err(|e| Error::Io {
        path: csv_path.clone(),
        source: e,
    })?;

    let summary = RefineSummary {
        status: result.status,
        accepted_steps: result.accepted_steps(),
        initial_total: result.history[0].total,
        final_total: result.history.last().map_or(f64::NAN, |r| r.total),
        depth_scale: result.params.depth_scale(),
        block_size: b,
        ego_twist: est.ego.twist.to_array(),
    };
    files::write_json(&out.join("result.json"), &summary)?;
    info!(
        "{:?} after {} steps, total {:.6} -> {:.6}",
        summary.status, summary.accepted_steps, summary.initial_total, summary.final_total
    );
    if result.status == RefineStatus::LineSearchFailed {
        return Err(CliError::Diverged(format!(
            "line search failed after {} accepted steps; outputs written to {}",
            summary.accepted_steps,
            out.display()
        )));
    }
    Ok(())
}

/// Mask logits of a starting estimate are clamped to this magnitude.
const INIT_MAX_LOGIT: f64 = 6.0;

fn read_disparity_pair(dir: &Path) -> Result<(DisparityMap, DisparityMap), CliError> {
    Ok((
        io::read_disparity_png(dir.join(files::DISP_1))?,
        io::read_disparity_png(dir.join(files::DISP_2))?,
    ))
}

fn evaluate_sceneflow(pred: &Path, gt: &Path, cfg: &RunConfig) -> Result<MetricReport, CliError> {
    let (pd1, pd2) = read_disparity_pair(pred)?;
    let (gd1, gd2) = read_disparity_pair(gt)?;
    let pred_maps = SceneFlowMaps {
        d1: pd1,
        d2: pd2,
        flow: io::read_flow_png(pred.join(files::FLOW))?,
    };
    let gt_maps = SceneFlowMaps {
        d1: gd1,
        d2: gd2,
        flow: io::read_flow_png(gt.join(files::FLOW))?,
    };
    let noc_path = gt.join(files::NOC);
    let noc = if noc_path.exists() {
        Some(io::read_mask_png(&noc_path)?)
    } else {
        None
    };
    let m = evaluate_scene_flow(&pred_maps, &gt_maps, noc.as_ref(), &cfg.evaluation.outliers)?;
    Ok(MetricReport::from(&m))
}

fn evaluate_depth(pred: &Path, gt: &Path, cfg: &RunConfig) -> Result<MetricReport, CliError> {
    let p = io::read_pfm_scalar(pred.join(files::DEPTH))?;
    let g = io::read_pfm_scalar(gt.join(files::DEPTH))?;
    let m = depth_metrics(&p, &g, None, &cfg.evaluation.depth)?;
    Ok(MetricReport::from(&m))
}

fn scale_only(pred: &Trajectory, gt: &Trajectory) -> Result<Similarity, CliError> {
    let (pp, gp) = (pred.positions(), gt.positions());
    let num: f64 = pp.iter().zip(&gp).map(|(a, b)| a.dot(b)).sum();
    let den: f64 = pp.iter().map(|a| a.norm_squared()).sum();
    if den <= 0.0 {
        return Err(Error::Degenerate("predicted trajectory has no extent to scale".into()).into());
    }
    Ok(Similarity {
        scale: num / den,
        transform: RigidTransform::identity(),
    })
}

fn evaluate_odometry(
    pred: &Path,
    gt: &Path,
    cfg: &RunConfig,
    align: Alignment,
) -> Result<MetricReport, CliError> {
    let p = Trajectory::new(io::read_poses(pred.join(files::POSES))?)?;
    let g = Trajectory::new(io::read_poses(gt.join(files::POSES))?)?;
    if p.len() != g.len() {
        return Err(CliError::Data(format!(
            "trajectories have {} and {} poses",
            p.len(),
            g.len()
        )));
    }
    let p = match align {
        Alignment::None => p,
        Alignment::Scale => {
            let s = scale_only(&p, &g)?;
            p.transformed(&s)
        }
        Alignment::Sim3 => {
            let s = umeyama_align(&p, &g, true)?;
            p.transformed(&s)
        }
    };
    let e = odometry_errors(&p, &g, &cfg.evaluation.odometry_lengths)?;
    Ok(MetricReport::from(&e))
}

fn visualize(
    kind: Kind,
    input: &Path,
    gt: Option<&Path>,
    out: &Path,
    max_flow: Option<f64>,
) -> Result<(), CliError> {
    if let Some(m) = max_flow {
        if !(m.is_finite() && m > 0.0) {
            return Err(CliError::Usage(format!(
                "--max-flow must be positive, got {m}"
            )));
        }
    }
    let image = match kind {
        Kind::Flow => viz::flow_to_color(&io::read_flow_png(input)?, max_flow),
        Kind::Depth => viz::depth_to_color(&io::read_pfm_scalar(input)?),
        Kind::Mask => {
            let is_png = input
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            let values = if is_png {
                io::read_mask_png(input)?.map(|&b| if b { 1.0 } else { 0.0 })
            } else {
                SoftMask::new(io::read_pfm_scalar(input)?)?.values().clone()
            };
            viz::mask_to_gray(&values)
        }
        Kind::Error => {
            let gt =
                gt.ok_or_else(|| CliError::Usage("--gt is required for --kind error".into()))?;
            let pred = io::read_flow_png(input)?;
            let gt = io::read_flow_png(gt)?;
            pred.flow
                .check_dims(&gt.flow, "prediction vs ground truth")?;
            let th = emrmsf_core::evaluation::OutlierThresholds::default();
            viz::flow_error_to_color(&pred, &gt, th.abs_px, th.rel)
        }
    };
    io::write_rgb8_png(out, &image)?;
    Ok(())
}
