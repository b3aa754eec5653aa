//! Runs the built binary end to end on rendered inputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use spherestereo::pfm::load_depth;
use spherestereo::DepthMap;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spherestereo"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed");
    String::from_utf8(out.stdout).unwrap()
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
        .display()
        .to_string()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn sidecar(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn render(dir: &Path, name: &str, scene: &[&str], position: &str, euler: &str, height: &str) -> PathBuf {
    let out = p(dir, name);
    let mut args = vec!["render"];
    args.extend_from_slice(scene);
    args.extend_from_slice(&[
        "--position",
        position,
        "--euler",
        euler,
        "--height",
        height,
        "--out",
        &out,
    ]);
    ok(&args);
    dir.join(name)
}

fn png(prefix: &Path) -> String {
    format!("{}.png", prefix.display())
}

fn depth_of(prefix: &Path) -> DepthMap {
    load_depth(format!("{}_depth.pfm", prefix.display())).unwrap()
}

fn median_rel_error(est: &DepthMap, gt: &DepthMap) -> f64 {
    let mut errs: Vec<f64> = est
        .values()
        .iter()
        .zip(gt.values())
        .filter(|(e, g)| **e > 0.0 && **g > 0.0)
        .map(|(e, g)| ((e - g) / g).abs() as f64)
        .collect();
    assert!(!errs.is_empty());
    errs.sort_by(|a, b| a.total_cmp(b));
    errs[errs.len() / 2]
}

#[test]
fn render_then_binocular_on_room() {
    let dir = tempfile::tempdir().unwrap();
    let room = ["--preset", "room"];
    let lower = render(dir.path(), "lower", &room, "0,0,0", "0,0,0", "256");
    let upper = render(dir.path(), "upper", &room, "0,0.2,0", "0,0,0", "256");
    let gt = depth_of(&lower);
    assert_eq!(sidecar(format!("{}.json", lower.display()))["results"]["height"], 256);

    let out = dir.path().join("bino");
    let stdout = ok(&[
        "binocular",
        "--upper",
        &png(&upper),
        "--lower",
        &png(&lower),
        "--baseline",
        "0.2",
        "--out",
        &out.display().to_string(),
    ]);
    assert!(stdout.trim().ends_with("bino_depth.pfm"));
    assert!(dir.path().join("bino_depth.png").exists());
    let meta = sidecar(dir.path().join("bino.json"));
    assert_eq!(meta["command"], "binocular");
    assert_eq!(meta["results"]["num_disparities"], 96);
    assert_eq!(meta["results"]["baseline_m"], 0.2);
    let err = median_rel_error(&depth_of(&out), &gt);
    assert!(err < 0.05, "median error {:.2}%", err * 100.0);
}

#[test]
fn mismatched_dimensions_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let ff = ["--preset", "far-field"];
    let a = render(dir.path(), "a", &ff, "0,0,0", "0,0,0", "32");
    let b = render(dir.path(), "b", &ff, "0,0,0", "0,0,0", "16");
    let out = run(&[
        "binocular",
        "--upper",
        &png(&a),
        "--lower",
        &png(&b),
        "--out",
        &p(dir.path(), "x"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("64x32") && msg.contains("32x16"), "{msg}");
}

#[test]
fn monocular_recovers_object_at_thirty_meters() {
    let dir = tempfile::tempdir().unwrap();
    let scene = fixture("scenes/driving_30m.json");
    let args = ["--scene", scene.as_str()];
    // 30 km/h at 30 fps: 0.2778 m between frames, with some camera shake.
    let a = render(dir.path(), "f0001", &args, "0,0,0", "0,0,0", "512");
    let b = render(dir.path(), "f0002", &args, "0,0,0.2777777778", "0.5,-1,0.3", "512");
    let out = dir.path().join("mono");
    ok(&[
        "monocular",
        "--frame-a",
        &png(&a),
        "--frame-b",
        &png(&b),
        "--speed-kmh",
        "30",
        "--fps",
        "30",
        "--out",
        &out.display().to_string(),
    ]);
    let meta = sidecar(dir.path().join("mono.json"));
    let baseline = meta["results"]["baseline_m"].as_f64().unwrap();
    assert!((baseline - 0.277_777_8).abs() < 1e-6);

    // Face of the test box, 30 m to the left, straight across from the camera.
    let est = depth_of(&out);
    let gt = depth_of(&a);
    let dims = gt.dims();
    let mut errs = Vec::new();
    for v in dims.height / 2 - 8..dims.height / 2 + 8 {
        for u in dims.width / 4 - 8..dims.width / 4 + 8 {
            if let (Some(e), Some(g)) = (est.get(u, v), gt.get(u, v)) {
                assert!((g - 30.0).abs() < 1.0, "ground truth {g} at ({u}, {v})");
                errs.push(((e - g) / g).abs());
            }
        }
    }
    assert!(errs.len() > 64, "only {} valid pixels on the object", errs.len());
    errs.sort_by(|a, b| a.total_cmp(b));
    let med = errs[errs.len() / 2];
    assert!(med < 0.15, "median error {:.1}% at 30 m", med * 100.0);
}

#[test]
fn static_pair_has_no_direction() {
    let dir = tempfile::tempdir().unwrap();
    let room = ["--preset", "room"];
    let a = render(dir.path(), "a", &room, "0,0,0", "0,0,0", "128");
    let out = run(&[
        "monocular",
        "--frame-a",
        &png(&a),
        "--frame-b",
        &png(&a),
        "--out",
        &p(dir.path(), "m"),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn frames_dir_and_seed_give_identical_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    std::fs::create_dir(&frames).unwrap();
    let room = ["--preset", "room"];
    render(&frames, "frame_0007", &room, "0,0,0", "0,0,0", "128");
    render(&frames, "frame_0008", &room, "0,0,0.2", "1,-2,0.5", "128");
    // Renders leave depth maps and sidecars next to the images; only images count as frames.
    let frames_dir = frames.display().to_string();
    let mut outputs = Vec::new();
    for name in ["r1", "r2"] {
        let out = p(dir.path(), name);
        ok(&[
            "--seed",
            "11",
            "monocular",
            "--frames-dir",
            &frames_dir,
            "--frame-a",
            "7",
            "--frame-b",
            "8",
            "--out",
            &out,
        ]);
        outputs.push(std::fs::read(format!("{out}_depth.pfm")).unwrap());
        assert_eq!(sidecar(format!("{out}.json"))["seed"], 11);
    }
    assert_eq!(outputs[0], outputs[1]);

    let missing = run(&[
        "monocular",
        "--frames-dir",
        &frames_dir,
        "--frame-a",
        "7",
        "--frame-b",
        "9",
        "--out",
        &p(dir.path(), "x"),
    ]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn pointcloud_counts_and_accumulation() {
    let dir = tempfile::tempdir().unwrap();
    let room = ["--preset", "room"];
    let a = render(dir.path(), "a", &room, "0,0,0", "0,0,0", "64");
    let pfm = format!("{}_depth.pfm", a.display());
    let valid = load_depth(&pfm).unwrap().valid_count();

    let single = p(dir.path(), "one.ply");
    let stdout = ok(&["pointcloud", &pfm, "--stride", "1", "--out", &single]);
    let res: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(res["points"], valid);
    let cloud = spherestereo::ply::load_ply(&single).unwrap();
    assert_eq!(cloud.len(), valid);
    assert!(dir.path().join("one.json").exists());

    // Stride 2 keeps every other row and column.
    let strided = ok(&["pointcloud", &pfm, "--stride", "2", "--out", &p(dir.path(), "s.ply")]);
    let n: usize = serde_json::from_str::<Value>(strided.trim()).unwrap()["points"]
        .as_u64()
        .unwrap() as usize;
    assert!(n <= valid / 4 + 64 && n + 64 >= valid / 4, "{n} vs {}", valid / 4);

    let eight: Vec<&str> = std::iter::repeat_n(pfm.as_str(), 8).collect();
    let mut args = vec!["pointcloud"];
    args.extend_from_slice(&eight);
    let out8 = p(dir.path(), "eight.ply");
    args.extend_from_slice(&["--stride", "1", "--out", &out8, "--ascii"]);
    let res: Value = serde_json::from_str(ok(&args).trim()).unwrap();
    assert_eq!(res["points"], 8 * valid);
    // 20 km/h, 30 fps, a capture every 30 frames.
    assert!((res["capture_spacing_m"].as_f64().unwrap() - 20.0 / 3.6).abs() < 1e-9);
}

#[test]
fn pointcloud_icp_recovers_offset_of_duplicate() {
    let dir = tempfile::tempdir().unwrap();
    let room = ["--preset", "room"];
    let a = render(dir.path(), "a", &room, "0,0,0", "0,0,0", "64");
    let pfm = format!("{}_depth.pfm", a.display());
    // 3 m/s at 10 fps, one frame apart: the duplicate lands 0.3 m away.
    let stdout = ok(&[
        "pointcloud",
        &pfm,
        &pfm,
        "--speed-kmh",
        "10.8",
        "--fps",
        "10",
        "--cadence",
        "1",
        "--icp",
        "--out",
        &p(dir.path(), "icp.ply"),
    ]);
    let res: Value = serde_json::from_str(stdout.trim()).unwrap();
    let reg = &res["icp"][0];
    assert_eq!(reg["converged"], true);
    let t: Vec<f64> = reg["translation"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    let norm = t.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 0.3).abs() < 1e-6, "{t:?}");
    assert!(reg["rotation_deg"].as_f64().unwrap() < 1e-6);
}

#[test]
fn malformed_depth_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = p(dir.path(), "bad.pfm");
    std::fs::write(&bad, b"Pf\n4 4\n-1.0\n\x01\x02").unwrap();
    let out = run(&["pointcloud", &bad, "--out", &p(dir.path(), "x.ply")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.pfm"));
    assert!(!dir.path().join("x.ply").exists());
}

#[test]
fn coverage_matches_closed_form() {
    assert_eq!(ok(&["coverage", "--psi", "13"]).trim(), "0.974370");
    assert_eq!(ok(&["coverage", "--psi", "0"]).trim(), "1.000000");
    assert_eq!(run(&["coverage", "--psi", "95"]).status.code(), Some(1));
}

#[test]
fn calibrate_then_binocular_with_alignment_file() {
    let dir = tempfile::tempdir().unwrap();
    let ff = ["--preset", "far-field"];
    let lower = render(dir.path(), "lower", &ff, "0,0,0", "0,0,0", "256");
    // Upper camera pitched by 2 degrees.
    let upper = render(dir.path(), "upper", &ff, "0,0.2,0", "2,0,0", "256");
    let cal = p(dir.path(), "cal.json");
    ok(&[
        "calibrate",
        "--upper",
        &png(&upper),
        "--lower",
        &png(&lower),
        "--out",
        &cal,
    ]);
    let m = sidecar(&cal);
    let deg = &m["degrees"];
    assert!((deg["alpha_deg"].as_f64().unwrap() - 2.0).abs() < 0.1, "{deg}");
    assert!(deg["beta_deg"].as_f64().unwrap().abs() < 0.1, "{deg}");
    assert!(deg["gamma_deg"].as_f64().unwrap().abs() < 0.1, "{deg}");

    let out = p(dir.path(), "b");
    ok(&[
        "binocular",
        "--upper",
        &png(&upper),
        "--lower",
        &png(&lower),
        "--alignment-file",
        &cal,
        "--out",
        &out,
    ]);
    let used = &sidecar(format!("{out}.json"))["results"]["alignment"];
    assert_eq!(used, deg);
}

#[test]
fn bad_arguments_are_usage_errors() {
    let out = run(&["render", "--preset", "room", "--position", "1,2", "--out", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(2), "clap reports usage errors with status 2");
    let dir = tempfile::tempdir().unwrap();
    let cfg = p(dir.path(), "cfg.json");
    std::fs::write(&cfg, r#"{"fps": -1}"#).unwrap();
    let out = run(&["--config", &cfg, "coverage", "--psi", "10"]);
    assert!(out.status.success(), "coverage ignores the pipeline config");
    let out = run(&[
        "--config",
        &cfg,
        "pointcloud",
        "x.pfm",
        "--out",
        &p(dir.path(), "y.ply"),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
