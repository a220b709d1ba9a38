use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use emrmsf_core::camera::DisparityMap;
use emrmsf_core::grid::Grid;
use emrmsf_core::io;
use emrmsf_core::lie::RigidTransform;
use emrmsf_core::FlowField;
use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn emrmsf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emrmsf"))
        .args(args)
        .env_remove("EMRMSF_THREADS")
        .output()
        .expect("spawn emrmsf")
}

fn ok(args: &[&str]) -> String {
    let out = emrmsf(args);
    assert!(
        out.status.success(),
        "{args:?} failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const WALL: &str = r#"{"point": [0, 0, 10], "normal": [-0.25, -0.4, 1],
    "texture": {"kind": "noise", "scale": 2.5, "octaves": 2}}"#;

fn spec_json(ego: &str, objects: &str) -> String {
    format!(
        r#"{{"full_width": 80, "full_height": 60,
  "window": {{"x0": 8, "y0": 6, "width": 64, "height": 48}},
  "camera": {{"fx": 70, "fy": 70, "cx": 39.5, "cy": 29.5, "baseline": 0.54}},
  "background": [{WALL}],
  "objects": [{objects}],
  "ego_motion": {ego},
  "seed": 5}}"#
    )
}

const STILL: &str = r#"{"rotation": [0, 0, 0], "translation": [0, 0, 0]}"#;
const EGO: &str = r#"{"rotation": [0, 0.01, 0], "translation": [0.1, 0, 0.3]}"#;
const BOX: &str = r#"{"center": [0.3, 0.2, 6.0], "half_size": [1.0, 0.8, 0.5],
    "texture": {"kind": "noise", "scale": 0.25, "octaves": 1},
    "motion": {"rotation": [0, 0, 0], "translation": [-0.4, 0, 1.5]}}"#;

fn scene(dir: &Path, name: &str, ego: &str, objects: &str) -> PathBuf {
    let spec = dir.join(format!("{name}.json"));
    fs::write(&spec, spec_json(ego, objects)).unwrap();
    let out = dir.join(name);
    ok(&["gen-scene", s(&spec), s(&out)]);
    out
}

fn hashes(dir: &Path) -> Vec<(String, String)> {
    let mut names: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let digest = Sha256::digest(fs::read(dir.join(&n)).unwrap());
            let hex = digest
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect::<String>();
            (n, hex)
        })
        .collect()
}

fn keys(v: &Value) -> BTreeSet<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

fn set(names: &[&str]) -> BTreeSet<String> {
    names.iter().map(|s| s.to_string()).collect()
}

#[test]
fn static_scene_has_zero_flow_and_equal_disparities() {
    let tmp = TempDir::new().unwrap();
    let dir = scene(tmp.path(), "still", STILL, "");
    let flow = io::read_flow_png(dir.join("flow.png")).unwrap();
    assert!(flow.valid.iter().all(|&v| v));
    assert!(flow.flow.iter().all(|f| *f == [0.0, 0.0]));
    let d1 = fs::read(dir.join("disp_1.png")).unwrap();
    let d2 = fs::read(dir.join("disp_2.png")).unwrap();
    assert_eq!(d1, d2);
    assert!(io::read_mask_png(dir.join("noc.png"))
        .unwrap()
        .iter()
        .all(|&v| v));
    let poses = io::read_poses(dir.join("poses.txt")).unwrap();
    assert_eq!(poses.len(), 2);
    assert!(poses[1].max_abs_diff(&RigidTransform::identity()) < 1e-12);
}

#[test]
fn seeded_scene_is_byte_identical_across_runs_and_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("spec.json");
    fs::write(&spec, spec_json(EGO, BOX)).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-scene", s(&spec), s(&a)]);
    ok(&["--threads", "1", "gen-scene", s(&spec), s(&b)]);
    let ha = hashes(&a);
    assert_eq!(ha.len(), 17);
    assert_eq!(ha, hashes(&b));
}

// Brute-force visibility: intersect rays analytically with the wall and the box in
// both captures and compare hit depths.

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn rodrigues(r: V3) -> [V3; 3] {
    let th = dot(r, r).sqrt();
    if th == 0.0 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let k = [r[0] / th, r[1] / th, r[2] / th];
    let (c, s) = (th.cos(), th.sin());
    let mut m = [[0.0; 3]; 3];
    let kx = [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { 1.0 } else { 0.0 };
            m[i][j] = c * id + s * kx[i][j] + (1.0 - c) * k[i] * k[j];
        }
    }
    m
}

#[derive(Clone, Copy)]
struct Pose {
    r: [V3; 3],
    t: V3,
}

impl Pose {
    fn apply(&self, p: V3) -> V3 {
        let mut q = self.t;
        for i in 0..3 {
            q[i] += dot(self.r[i], p);
        }
        q
    }

    fn rotate_back(&self, p: V3) -> V3 {
        let mut q = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                q[j] += self.r[i][j] * p[i];
            }
        }
        q
    }

    fn then(&self, outer: &Pose) -> Pose {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| outer.r[i][k] * self.r[k][j]).sum();
            }
        }
        Pose {
            r,
            t: outer.apply(self.t),
        }
    }
}

enum Shape {
    Plane { p: V3, n: V3 },
    Cuboid { lo: V3, hi: V3 },
}

impl Shape {
    /// Smallest positive ray parameter of `o + λ d`.
    fn hit(&self, o: V3, d: V3) -> Option<f64> {
        match self {
            Shape::Plane { p, n } => {
                let den = dot(*n, d);
                let lam = dot(*n, sub(*p, o)) / den;
                (den != 0.0 && lam > 0.0).then_some(lam)
            }
            Shape::Cuboid { lo, hi } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for i in 0..3 {
                    if d[i] == 0.0 {
                        if o[i] < lo[i] || o[i] > hi[i] {
                            return None;
                        }
                    } else {
                        let a = (lo[i] - o[i]) / d[i];
                        let b = (hi[i] - o[i]) / d[i];
                        t0 = t0.max(a.min(b));
                        t1 = t1.min(a.max(b));
                    }
                }
                (t1 >= t0 && t0 > 0.0).then_some(t0)
            }
        }
    }
}

fn nearest(surfaces: &[(Shape, Pose)], d: V3) -> Option<(usize, f64)> {
    surfaces
        .iter()
        .enumerate()
        .filter_map(|(i, (shape, pose))| {
            // Ray in the surface's rest frame: o' = R^T(0 - t), d' = R^T d.
            let o = pose.rotate_back(sub([0.0; 3], pose.t));
            shape.hit(o, pose.rotate_back(d)).map(|l| (i, l))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

#[test]
fn occlusion_mask_matches_brute_force_visibility() {
    let tmp = TempDir::new().unwrap();
    let dir = scene(tmp.path(), "dyn", EGO, BOX);
    let noc = io::read_mask_png(dir.join("noc.png")).unwrap();

    let (fx, fy, cx, cy) = (70.0, 70.0, 39.5, 29.5);
    let (fw, fh) = (80.0, 60.0);
    let n = {
        let n = [-0.25, -0.4, 1.0];
        let l = dot(n, n).sqrt();
        [n[0] / l, n[1] / l, n[2] / l]
    };
    let ego = Pose {
        r: rodrigues([0.0, 0.01, 0.0]),
        t: [0.1, 0.0, 0.3],
    };
    let ident = Pose {
        r: rodrigues([0.0; 3]),
        t: [0.0; 3],
    };
    let box_motion = Pose {
        r: rodrigues([0.0; 3]),
        t: [-0.4, 0.0, 1.5],
    };
    let wall = || Shape::Plane {
        p: [0.0, 0.0, 10.0],
        n,
    };
    let cuboid = || Shape::Cuboid {
        lo: [-0.7, -0.6, 5.5],
        hi: [1.3, 1.0, 6.5],
    };
    let first = [(wall(), ident), (cuboid(), ident)];
    let second_poses = [ego, box_motion.then(&ego)];
    let second = [(wall(), second_poses[0]), (cuboid(), second_poses[1])];

    let mut occluded = 0;
    let mut mismatches = Vec::new();
    for y in 0..48 {
        for x in 0..64 {
            let (u, v) = ((x + 8) as f64, (y + 6) as f64);
            let d = [(u - cx) / fx, (v - cy) / fy, 1.0];
            let (id, lam) = nearest(&first, d).expect("every ray hits the wall");
            let p2 = second_poses[id].apply([lam * d[0], lam * d[1], lam * d[2]]);
            let (u2, v2) = (fx * p2[0] / p2[2] + cx, fy * p2[1] / p2[2] + cy);
            let inside = p2[2] > 0.0 && u2 >= 0.0 && u2 <= fw - 1.0 && v2 >= 0.0 && v2 <= fh - 1.0;
            let visible = inside
                && nearest(&second, [(u2 - cx) / fx, (v2 - cy) / fy, 1.0])
                    .is_some_and(|(_, l)| (l - p2[2]).abs() <= 1e-6 * p2[2]);
            occluded += usize::from(!visible);
            if visible != *noc.get(x, y) {
                mismatches.push((x, y));
            }
        }
    }
    assert!(occluded > 20, "the moving box should hide some of the wall");
    assert!(mismatches.is_empty(), "mismatched pixels: {mismatches:?}");
}

fn breakdown(frame: &Path, estimate: &Path, extra: &[&str]) -> Value {
    let mut args = vec![
        "compute-loss",
        "--frame",
        s(frame),
        "--estimate",
        s(estimate),
    ];
    args.extend_from_slice(extra);
    serde_json::from_str(&ok(&args)).unwrap()
}

#[test]
fn ground_truth_loss_on_static_scene_is_small() {
    let tmp = TempDir::new().unwrap();
    let dir = scene(tmp.path(), "still", STILL, "");
    let b = breakdown(&dir, &dir, &[]);
    let total = b["total"].as_f64().unwrap();
    assert!(total < 1e-2, "total {total}");
    assert_eq!(b["iterations"].as_array().unwrap().len(), 12);
}

#[test]
fn zero_lambdas_leave_only_photometric_terms() {
    let tmp = TempDir::new().unwrap();
    let dir = scene(tmp.path(), "ego", EGO, "");
    let cfg = tmp.path().join("zero.json");
    fs::write(
        &cfg,
        r#"{"schema_version": 1, "weights": {"lambda_g": 0, "lambda_s": 0, "lambda_c": 0, "lambda_m": 0,
            "lambda_st": 0, "lambda_sd": 0, "lambda_sf": 0}}"#,
    )
    .unwrap();
    let b = breakdown(&dir, &dir, &["--config", s(&cfg), "--no-stereo"]);
    assert!(b["l_d"].is_null());
    let mut expected = 0.0;
    for it in b["iterations"].as_array().unwrap() {
        let t = &it["terms"];
        let photometric = t["l_p"].as_f64().unwrap() + t["l_p_ego"].as_f64().unwrap();
        assert_eq!(it["sum"].as_f64().unwrap(), photometric);
        expected += it["weight"].as_f64().unwrap() * photometric;
    }
    let total = b["total"].as_f64().unwrap();
    assert!(
        (total - expected).abs() <= 1e-15 * expected.max(1.0),
        "{total} vs {expected}"
    );
}

#[test]
fn identical_snapshots_weigh_one_to_one_plus_zeta() {
    let tmp = TempDir::new().unwrap();
    let dir = scene(tmp.path(), "ego", EGO, "");
    let one = breakdown(&dir, &dir, &["--snapshots", "1", "--no-stereo"]);
    let two = breakdown(&dir, &dir, &["--snapshots", "2", "--no-stereo"]);
    let ratio = two["total"].as_f64().unwrap() / one["total"].as_f64().unwrap();
    assert!((ratio - 1.9).abs() < 1e-12, "ratio {ratio}");
}

#[test]
fn empty_config_reproduces_defaults() {
    let tmp = TempDir::new().unwrap();
    let dir = scene(tmp.path(), "ego", EGO, "");
    let cfg = tmp.path().join("empty.json");
    fs::write(&cfg, "{}").unwrap();
    assert_eq!(
        breakdown(&dir, &dir, &[]),
        breakdown(&dir, &dir, &["--config", s(&cfg)])
    );
}

#[test]
fn config_paths_stand_in_for_flags() {
    let tmp = TempDir::new().unwrap();
    let dir = scene(tmp.path(), "ego", EGO, "");
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, r#"{"paths": {"frame": "ego", "estimate": "ego"}}"#).unwrap();
    let via_config: Value =
        serde_json::from_str(&ok(&["compute-loss", "--config", s(&cfg)])).unwrap();
    assert_eq!(via_config, breakdown(&dir, &dir, &[]));
}

#[test]
fn stationary_ground_truth_start_takes_no_steps() {
    let tmp = TempDir::new().unwrap();
    let dir = scene(tmp.path(), "still", STILL, "");
    let out = tmp.path().join("ref");
    ok(&[
        "refine",
        "--frame",
        s(&dir),
        "--init",
        s(&dir),
        "--out",
        s(&out),
    ]);
    let r: Value =
        serde_json::from_str(&fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
    assert_eq!(r["accepted_steps"], 0);
    assert_eq!(r["status"], "converged");
    assert_eq!(
        keys(&r),
        set(&[
            "status",
            "accepted_steps",
            "initial_total",
            "final_total",
            "depth_scale",
            "block_size",
            "ego_twist"
        ])
    );
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "step,total,L_p,L_p_ego,L_g,L_s,L_c,L_m,L_d,step_size"
    );
    assert_eq!(lines.len(), 2);
    for f in [
        "twist_v.pfm",
        "twist_w.pfm",
        "mask.pfm",
        "depth.pfm",
        "flow.png",
        "disp_1.png",
        "disp_2.png",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
}

fn short_refine(
    tmp: &Path,
    frame: &Path,
    name: &str,
    optimizer: &str,
    threads: &str,
) -> (Value, Vec<(String, String)>) {
    let cfg = tmp.join(format!("{name}.json"));
    fs::write(&cfg, format!(r#"{{"optimizer": {optimizer}}}"#)).unwrap();
    let out = tmp.join(name);
    ok(&[
        "--threads",
        threads,
        "refine",
        "--frame",
        s(frame),
        "--config",
        s(&cfg),
        "--out",
        s(&out),
    ]);
    let r = serde_json::from_str(&fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
    (r, hashes(&out))
}

#[test]
fn refine_is_deterministic_across_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let dir = scene(tmp.path(), "ego", EGO, "");
    let opt = r#"{"max_steps": 4}"#;
    let (ra, ha) = short_refine(tmp.path(), &dir, "a", opt, "1");
    let (rb, hb) = short_refine(tmp.path(), &dir, "b", opt, "3");
    assert_eq!(ra, rb);
    assert_eq!(ha, hb);
    assert_eq!(ra["accepted_steps"], 4);
    assert_eq!(ra["status"], "max_steps");
}

#[test]
fn detaching_depth_only_changes_the_depth_scale_path() {
    let tmp = TempDir::new().unwrap();
    let dir = scene(tmp.path(), "ego", EGO, "");
    let (att, _) = short_refine(
        tmp.path(),
        &dir,
        "att",
        r#"{"max_steps": 3, "detach_depth": false}"#,
        "1",
    );
    let (det, _) = short_refine(
        tmp.path(),
        &dir,
        "det",
        r#"{"max_steps": 3, "detach_depth": true}"#,
        "1",
    );
    assert_eq!(att["initial_total"], det["initial_total"]);
    assert_ne!(att["depth_scale"], det["depth_scale"]);
    // With a single snapshot there is nothing to detach from.
    let (a1, h1) = short_refine(
        tmp.path(),
        &dir,
        "a1",
        r#"{"max_steps": 3, "n_iters": 1, "detach_depth": false}"#,
        "1",
    );
    let (d1, g1) = short_refine(
        tmp.path(),
        &dir,
        "d1",
        r#"{"max_steps": 3, "n_iters": 1, "detach_depth": true}"#,
        "1",
    );
    assert_eq!(a1, d1);
    assert_eq!(h1, g1);
}

fn write_sceneflow(dir: &Path, flow: &FlowField, d1: &DisparityMap, d2: &DisparityMap) {
    fs::create_dir_all(dir).unwrap();
    io::write_flow_png(dir.join("flow.png"), flow).unwrap();
    io::write_disparity_png(dir.join("disp_1.png"), d1).unwrap();
    io::write_disparity_png(dir.join("disp_2.png"), d2).unwrap();
}

fn report(task: &str, pred: &Path, gt: &Path, extra: &[&str]) -> Value {
    let mut args = vec![
        "evaluate",
        "--task",
        task,
        "--pred",
        s(pred),
        "--gt",
        s(gt),
        "--format",
        "json",
    ];
    args.extend_from_slice(extra);
    serde_json::from_str(&ok(&args)).unwrap()
}

#[test]
fn evaluating_ground_truth_against_itself() {
    let tmp = TempDir::new().unwrap();
    let dir = scene(tmp.path(), "dyn", EGO, BOX);
    let sf = report("sceneflow", &dir, &dir, &[]);
    assert_eq!(
        keys(&sf),
        set(&["d1_all", "d2_all", "f1_all", "sf_all", "epe_all", "epe_noc", "epe_occ"])
    );
    for k in keys(&sf) {
        assert_eq!(sf[&k], 0.0, "{k}");
    }
    let depth = report("depth", &dir, &dir, &[]);
    assert_eq!(
        keys(&depth),
        set(&["abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3"])
    );
    for k in ["abs_rel", "sq_rel", "rmse", "rmse_log"] {
        assert_eq!(depth[k], 0.0);
    }
    for k in ["a1", "a2", "a3"] {
        assert_eq!(depth[k], 1.0);
    }
    let table = ok(&[
        "evaluate",
        "--task",
        "depth",
        "--pred",
        s(&dir),
        "--gt",
        s(&dir),
    ]);
    assert!(table.lines().next().unwrap().starts_with("metric"));
    assert!(table
        .lines()
        .any(|l| l.starts_with("Abs Rel") && l.ends_with("0.000000")));
}

#[test]
fn one_outlier_pixel_rates_as_one_over_valid_count() {
    let tmp = TempDir::new().unwrap();
    let (w, h) = (10, 7);
    let mut flow = FlowField::constant(w, h, [4.0, -2.0]);
    // Three pixels without ground truth.
    for (x, y) in [(0, 0), (9, 6), (4, 3)] {
        flow.valid.set(x, y, false);
        flow.flow.set(x, y, [0.0, 0.0]);
    }
    let disp = DisparityMap::from_values(Grid::filled(w, h, 20.0));
    write_sceneflow(&tmp.path().join("gt"), &flow, &disp, &disp);

    let mut pflow = FlowField::constant(w, h, [4.0, -2.0]);
    pflow.flow.set(2, 5, [12.0, -2.0]);
    let mut pdisp = disp.clone();
    pdisp.disp.set(7, 1, 26.0);
    write_sceneflow(&tmp.path().join("pred"), &pflow, &pdisp, &disp);

    let r = report(
        "sceneflow",
        &tmp.path().join("pred"),
        &tmp.path().join("gt"),
        &[],
    );
    let valid_flow = (w * h - 3) as f64;
    let valid_disp = (w * h) as f64;
    assert!((r["f1_all"].as_f64().unwrap() - 100.0 / valid_flow).abs() < 1e-12);
    assert!((r["d1_all"].as_f64().unwrap() - 100.0 / valid_disp).abs() < 1e-12);
    assert_eq!(r["d2_all"].as_f64().unwrap(), 0.0);
    // (7, 1) and (2, 5) both have all three ground truths.
    assert!((r["sf_all"].as_f64().unwrap() - 200.0 / valid_flow).abs() < 1e-12);
}

fn straight_line(n: usize, step: f64) -> Vec<RigidTransform> {
    (0..n)
        .map(|i| RigidTransform::from_translation([0.0, 0.0, step * i as f64].into()))
        .collect()
}

#[test]
fn scaled_trajectory_gives_closed_form_translation_error() {
    let tmp = TempDir::new().unwrap();
    let (pred, gt) = (tmp.path().join("pred"), tmp.path().join("gt"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&gt).unwrap();
    io::write_poses(gt.join("poses.txt"), &straight_line(901, 1.0)).unwrap();
    io::write_poses(pred.join("poses.txt"), &straight_line(901, 1.01)).unwrap();

    let raw = report("odometry", &pred, &gt, &[]);
    assert_eq!(keys(&raw), set(&["t_err", "r_err"]));
    assert!((raw["t_err"].as_f64().unwrap() - 1.0).abs() < 1e-9, "{raw}");
    assert!(raw["r_err"].as_f64().unwrap().abs() < 1e-12);
    let r = report("odometry", &pred, &gt, &["--alignment", "scale"]);
    assert!(r["t_err"].as_f64().unwrap() < 1e-9, "{r}");

    // A straight line leaves the rotation about it free, so the similarity fit
    // needs a bent path.
    let bent = |k: f64| -> Vec<RigidTransform> {
        (0..901)
            .map(|i| {
                let z = i as f64;
                RigidTransform::from_translation([k * 1e-3 * z * z, 0.0, k * z].into())
            })
            .collect()
    };
    io::write_poses(gt.join("poses.txt"), &bent(1.0)).unwrap();
    io::write_poses(pred.join("poses.txt"), &bent(1.01)).unwrap();
    assert!(
        report("odometry", &pred, &gt, &[])["t_err"]
            .as_f64()
            .unwrap()
            > 0.5
    );
    let r = report("odometry", &pred, &gt, &["--alignment", "sim3"]);
    assert!(r["t_err"].as_f64().unwrap() < 1e-6, "{r}");
}

#[test]
fn degenerate_alignment_is_a_numeric_failure() {
    let tmp = TempDir::new().unwrap();
    let (pred, gt) = (tmp.path().join("pred"), tmp.path().join("gt"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&gt).unwrap();
    io::write_poses(gt.join("poses.txt"), &straight_line(901, 1.0)).unwrap();
    io::write_poses(pred.join("poses.txt"), &straight_line(901, 0.0)).unwrap();
    let out = emrmsf(&[
        "evaluate",
        "--task",
        "odometry",
        "--pred",
        s(&pred),
        "--gt",
        s(&gt),
        "--alignment",
        "sim3",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

fn png_pixels(path: &Path) -> Vec<[u8; 3]> {
    let img = io::read_image_png(path).unwrap();
    img.iter()
        .map(|p| [0, 1, 2].map(|c| (p[c] * 255.0).round() as u8))
        .collect()
}

fn visualize(tmp: &Path, kind: &str, input: &Path, extra: &[&str]) -> Vec<[u8; 3]> {
    let out = tmp.join(format!("{kind}-viz.png"));
    let mut args = vec![
        "visualize",
        "--kind",
        kind,
        "--input",
        s(input),
        "--out",
        s(&out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    png_pixels(&out)
}

#[test]
fn zero_flow_renders_uniform_white() {
    let tmp = TempDir::new().unwrap();
    let f = tmp.path().join("zero.png");
    io::write_flow_png(&f, &FlowField::zeros(6, 4)).unwrap();
    let px = visualize(tmp.path(), "flow", &f, &[]);
    assert_eq!(px.len(), 24);
    assert!(
        px.iter().all(|p| p.iter().all(|&c| c >= 250)),
        "{:?}",
        px[0]
    );
}

#[test]
fn constant_rightward_flow_renders_one_hue() {
    let tmp = TempDir::new().unwrap();
    let f = tmp.path().join("right.png");
    io::write_flow_png(&f, &FlowField::constant(6, 4, [3.0, 0.0])).unwrap();
    let px = visualize(tmp.path(), "flow", &f, &[]);
    assert!(px.iter().all(|p| *p == px[0]));
    assert_ne!(px[0], [255, 255, 255]);
}

#[test]
fn error_map_flags_exactly_the_outlier_pixels() {
    let tmp = TempDir::new().unwrap();
    let (w, h) = (9, 5);
    let gt = FlowField::constant(w, h, [10.0, 0.0]);
    let mut pred = gt.clone();
    let outliers = [(0, 0), (3, 2), (8, 4), (5, 1)];
    for &(x, y) in &outliers {
        pred.flow.set(x, y, [10.0, 5.0]);
    }
    // Large error but within 5% of a large flow: not an outlier.
    let mut gt_big = gt.clone();
    gt_big.flow.set(1, 1, [100.0, 0.0]);
    pred.flow.set(1, 1, [104.0, 0.0]);
    let (gp, pp) = (tmp.path().join("gt.png"), tmp.path().join("pred.png"));
    io::write_flow_png(&gp, &gt_big).unwrap();
    io::write_flow_png(&pp, &pred).unwrap();
    let px = visualize(tmp.path(), "error", &pp, &["--gt", s(&gp)]);
    let outlier_colors: [[u8; 3]; 5] = [
        [254, 224, 144],
        [253, 174, 97],
        [244, 109, 67],
        [215, 48, 39],
        [165, 0, 38],
    ];
    let flagged = px.iter().filter(|p| outlier_colors.contains(p)).count();
    assert_eq!(flagged, outliers.len());
}

#[test]
fn mask_and_depth_render_deterministically() {
    let tmp = TempDir::new().unwrap();
    let dir = scene(tmp.path(), "still", STILL, "");
    let m = visualize(tmp.path(), "mask", &dir.join("mask.pfm"), &[]);
    assert!(m.iter().all(|p| *p == [255, 255, 255]));
    let a = visualize(tmp.path(), "depth", &dir.join("depth.pfm"), &[]);
    let b = visualize(tmp.path(), "depth", &dir.join("depth.pfm"), &[]);
    assert_eq!(a, b);
    assert!(a.iter().any(|p| *p == [253, 231, 37]));
}

#[test]
fn exit_codes() {
    assert_eq!(emrmsf(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(
        emrmsf(&["visualize", "--kind", "bogus", "--input", "x", "--out", "y"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(emrmsf(&["compute-loss"]).status.code(), Some(1));
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nothing");
    let out = emrmsf(&[
        "compute-loss",
        "--frame",
        s(&missing),
        "--estimate",
        s(&missing),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frame.json"));
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"weights": {"lambda_q": 1}}"#).unwrap();
    let out = emrmsf(&[
        "compute-loss",
        "--config",
        s(&bad),
        "--frame",
        "x",
        "--estimate",
        "x",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(emrmsf(&["--help"]).status.code(), Some(0));
}

#[test]
fn help_documents_every_flag() {
    let cases: [(&str, &[&str]); 5] = [
        ("gen-scene", &["<SPEC>", "<OUTDIR>"]),
        (
            "compute-loss",
            &[
                "--frame",
                "--estimate",
                "--config",
                "--snapshots",
                "--crop-only",
                "--no-stereo",
                "--out",
            ],
        ),
        ("refine", &["--frame", "--init", "--config", "--out"]),
        (
            "evaluate",
            &[
                "--task",
                "--pred",
                "--gt",
                "--config",
                "--alignment",
                "--format",
                "--out",
            ],
        ),
        (
            "visualize",
            &["--kind", "--input", "--gt", "--out", "--max-flow"],
        ),
    ];
    for (cmd, flags) in cases {
        let help = ok(&[cmd, "--help"]);
        for f in flags.iter().chain(&["--threads", "--verbose"]) {
            assert!(help.contains(f), "{cmd} --help lacks {f}");
        }
        // Every option line carries a description.
        for line in help.lines().filter(|l| l.trim_start().starts_with("--")) {
            assert!(
                line.trim().contains("  "),
                "{cmd}: undocumented `{}`",
                line.trim()
            );
        }
    }
    assert!(ok(&["--help"]).contains("EMRMSF_THREADS"));
}

#[test]
fn scene_manifest_schema() {
    let tmp = TempDir::new().unwrap();
    let dir = scene(tmp.path(), "still", STILL, "");
    let m: Value =
        serde_json::from_str(&fs::read_to_string(dir.join("frame.json")).unwrap()).unwrap();
    assert_eq!(
        keys(&m),
        set(&[
            "schema_version",
            "camera",
            "window",
            "image_1",
            "image_2",
            "depth_1",
            "depth_2",
            "image_1_right",
            "noc"
        ])
    );
    assert_eq!(m["schema_version"], 1);
    assert_eq!(
        keys(&m["camera"]),
        set(&["fx", "fy", "cx", "cy", "baseline"])
    );
    assert_eq!(keys(&m["window"]), set(&["x0", "y0", "width", "height"]));

    let b = breakdown(&dir, &dir, &["--snapshots", "1"]);
    assert_eq!(keys(&b), set(&["total", "l_d", "iterations"]));
    let it = &b["iterations"][0];
    assert_eq!(keys(it), set(&["iteration", "weight", "terms", "sum"]));
    assert_eq!(
        keys(&it["terms"]),
        set(&["l_p", "l_p_ego", "l_g", "l_s", "l_c", "l_m"])
    );
    assert_eq!(
        keys(&it["terms"]["l_s"]),
        set(&["twist", "depth", "flow", "total"])
    );
}
