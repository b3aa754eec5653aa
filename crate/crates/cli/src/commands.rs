use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use spherestereo::cloud::{accumulate, depth_to_points, icp_register, PointCloud, RigidTransform};
use spherestereo::colormap::colorize_inverse_depth;
use spherestereo::geom::rotation_from_euler;
use spherestereo::motion::monocular_depth;
use spherestereo::pfm::{load_depth, save_depth, Pfm};
use spherestereo::ply::{save_ply, PlyFormat};
use spherestereo::stabilize::estimate_rig_misalignment;
use spherestereo::stereo::{binocular_depth, coverage_ratio};
use spherestereo::synth::{presets, render_flow, render_with, CameraPose, RenderOptions, Scene};
use spherestereo::{DepthMap, Dims, Direction3, EquirectImage, Error, EulerAngles};

use crate::config::PipelineConfig;
use crate::error::{with_path, CliError};
use crate::{BinocularArgs, CalibrateArgs, CoverageArgs, MonocularArgs, PointcloudArgs, Preset, RenderArgs, Triple};

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(prefix.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e)),
        _ => Ok(()),
    }
}

fn display(paths: &[&Path]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

#[derive(Serialize)]
struct Sidecar<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: Option<&'a PipelineConfig>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    results: Value,
}

fn write_sidecar(path: &Path, sidecar: &Sidecar) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn load_image(path: &Path) -> Result<EquirectImage, CliError> {
    with_path(path, EquirectImage::load(path))
}

/// Halves `img` until it is no taller than `max_height`.
fn shrink(mut img: EquirectImage, max_height: Option<usize>) -> EquirectImage {
    if let Some(h) = max_height {
        while img.height() > h && img.height().is_multiple_of(2) && img.height() >= 4 {
            img = img.half_size();
        }
    }
    img
}

fn check_same_dims(a: &EquirectImage, b: &EquirectImage) -> Result<(), CliError> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            a_width: a.width(),
            a_height: a.height(),
            b_width: b.width(),
            b_height: b.height(),
        }
        .into());
    }
    Ok(())
}

fn degrees(t: Triple) -> EulerAngles {
    EulerAngles::from_degrees(t.0[0], t.0[1], t.0[2])
}

fn euler_json(e: &EulerAngles) -> Value {
    let [a, b, g] = e.to_degrees();
    json!({ "alpha_deg": a, "beta_deg": b, "gamma_deg": g })
}

fn write_depth_outputs(depth: &DepthMap, prefix: &Path) -> Result<(PathBuf, PathBuf), CliError> {
    let pfm = suffixed(prefix, "_depth.pfm");
    let png = suffixed(prefix, "_depth.png");
    ensure_parent(&pfm)?;
    with_path(&pfm, save_depth(depth, &pfm))?;
    with_path(&png, colorize_inverse_depth(depth).save(&png))?;
    Ok((pfm, png))
}

fn depth_summary(depth: &DepthMap) -> Value {
    let dims = depth.dims();
    json!({
        "width": dims.width,
        "height": dims.height,
        "valid_pixels": depth.valid_count(),
        "solid_angle_coverage": depth.solid_angle_coverage(),
    })
}

pub fn render(args: &RenderArgs, cfg: &PipelineConfig) -> Result<(), CliError> {
    let (scene, scene_name) = match (&args.scene, args.preset) {
        (Some(p), _) => (with_path(p, Scene::load(p))?, p.display().to_string()),
        (None, Some(Preset::Room)) => (presets::room(), "room".into()),
        (None, Some(Preset::Street)) => (presets::street(), "street".into()),
        (None, Some(Preset::FarField)) => (presets::far_field(), "far_field".into()),
        (None, None) => return Err(CliError::Usage("either --scene or --preset is required".into())),
    };
    if args.height < 2 || args.supersample == 0 || args.supersample > 4 {
        return Err(CliError::Usage(
            "height must be at least 2 and supersample in 1..=4".into(),
        ));
    }
    let dims = Dims::from_height(args.height);
    let pose = CameraPose::new(args.position.0, rotation_from_euler(&degrees(args.euler)));
    let opts = RenderOptions {
        supersample: args.supersample,
        grayscale: args.gray,
    };
    let (img, depth) = render_with(&scene, &pose, dims, &opts);

    let png = suffixed(&args.out, ".png");
    let pfm = suffixed(&args.out, "_depth.pfm");
    ensure_parent(&png)?;
    with_path(&png, img.save(&png))?;
    with_path(&pfm, save_depth(&depth, &pfm))?;
    let mut outputs = vec![png, pfm];
    let mut results = json!({
        "scene": scene_name,
        "position": args.position.0,
        "euler_deg": args.euler.0,
        "width": dims.width,
        "height": dims.height,
        "supersample": args.supersample,
    });
    if let Some(to) = args.flow_to {
        let target = CameraPose::new(to.0, rotation_from_euler(&degrees(args.flow_to_euler)));
        let flow = render_flow(&scene, &pose, &target, dims);
        let path = suffixed(&args.out, "_flow.pfm");
        let pfm = Pfm {
            width: dims.width,
            height: dims.height,
            channels: 3,
            data: flow.to_rgb_triplets(),
        };
        with_path(&path, pfm.save(&path))?;
        results["flow_to"] = json!({ "position": to.0, "euler_deg": args.flow_to_euler.0 });
        outputs.push(path);
    }
    let sidecar = suffixed(&args.out, ".json");
    write_sidecar(
        &sidecar,
        &Sidecar {
            command: "render",
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.stabilize.pose.seed,
            config: None,
            inputs: args.scene.iter().map(|p| p.display().to_string()).collect(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            results,
        },
    )?;
    println!("{}", outputs[0].display());
    Ok(())
}

fn read_alignment_file(path: &Path) -> Result<EulerAngles, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let angles = v.get("angles").cloned().unwrap_or(v);
    serde_json::from_value(angles)
        .map_err(|e| CliError::Usage(format!("{}: expected alignment angles: {e}", path.display())))
}

pub fn binocular(args: &BinocularArgs, mut cfg: PipelineConfig) -> Result<(), CliError> {
    if let Some(b) = args.baseline {
        cfg.stereo.baseline_m = b;
    }
    if let Some(n) = args.num_disparities {
        cfg.stereo.num_disparities = n;
    }
    if args.max_height.is_some() {
        cfg.max_height = args.max_height;
    }
    cfg.validate()?;
    let upper = load_image(&args.upper)?;
    let lower = load_image(&args.lower)?;
    check_same_dims(&upper, &lower)?;
    let upper = shrink(upper, cfg.max_height);
    let lower = shrink(lower, cfg.max_height);

    let mut results = json!({});
    let alignment = if args.calibrate {
        let m = estimate_rig_misalignment(&upper, &lower, &cfg.calibration)?;
        results["calibration"] = serde_json::to_value(&m).expect("serializable");
        m.angles
    } else if let Some(t) = args.alignment {
        degrees(t)
    } else if let Some(p) = &args.alignment_file {
        read_alignment_file(p)?
    } else {
        EulerAngles::zero()
    };
    let depth = binocular_depth(&upper, &lower, &cfg.stereo, &alignment)?;
    let (pfm, png) = write_depth_outputs(&depth, &args.out)?;

    results["alignment"] = euler_json(&alignment);
    results["num_disparities"] = json!(cfg.stereo.num_disparities);
    results["baseline_m"] = json!(cfg.stereo.baseline_m);
    results["depth"] = depth_summary(&depth);
    write_sidecar(
        &suffixed(&args.out, ".json"),
        &Sidecar {
            command: "binocular",
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.stabilize.pose.seed,
            config: Some(&cfg),
            inputs: display(&[&args.upper, &args.lower]),
            outputs: display(&[&pfm, &png]),
            results,
        },
    )?;
    println!("{}", pfm.display());
    Ok(())
}

/// Trailing decimal digits of a file stem, e.g. `frame_0042` -> 42.
fn frame_number(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem.chars().rev().take_while(char::is_ascii_digit).collect();
    if digits.is_empty() {
        return None;
    }
    digits.chars().rev().collect::<String>().parse().ok()
}

fn numbered_frames(dir: &Path) -> Result<BTreeMap<u64, PathBuf>, CliError> {
    let mut frames = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png" | "ppm" | "pgm" | "pnm")) {
            continue;
        }
        if let Some(n) = frame_number(&path) {
            if let Some(prev) = frames.insert(n, path.clone()) {
                return Err(CliError::Usage(format!(
                    "frame {n} is ambiguous: {} and {}",
                    prev.display(),
                    path.display()
                )));
            }
        }
    }
    Ok(frames)
}

fn resolve_frame(spec: &str, frames: Option<&BTreeMap<u64, PathBuf>>, dir: Option<&Path>) -> Result<PathBuf, CliError> {
    match (frames, dir) {
        (Some(frames), Some(dir)) => {
            let n: u64 = spec
                .parse()
                .map_err(|_| CliError::Usage(format!("with --frames-dir, frames are numbers; got {spec:?}")))?;
            frames
                .get(&n)
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("no frame numbered {n} in {}", dir.display())))
        }
        _ => Ok(PathBuf::from(spec)),
    }
}

pub fn monocular(args: &MonocularArgs, mut cfg: PipelineConfig) -> Result<(), CliError> {
    if let Some(s) = args.speed_kmh {
        cfg.speed_kmh = s;
    }
    if let Some(f) = args.fps {
        cfg.fps = f;
    }
    if let Some(n) = args.num_disparities {
        cfg.stereo.num_disparities = n;
    }
    if args.max_height.is_some() {
        cfg.max_height = args.max_height;
    }
    cfg.stereo.baseline_m = cfg.frame_baseline_m();
    cfg.validate()?;

    let frames = args.frames_dir.as_deref().map(numbered_frames).transpose()?;
    let dir = args.frames_dir.as_deref();
    let path_a = resolve_frame(&args.frame_a, frames.as_ref(), dir)?;
    let path_b = resolve_frame(&args.frame_b, frames.as_ref(), dir)?;
    let a = load_image(&path_a)?;
    let b = load_image(&path_b)?;
    check_same_dims(&a, &b)?;
    let a = shrink(a, cfg.max_height);
    let b = shrink(b, cfg.max_height);

    let res = monocular_depth(&a, &b, &cfg.monocular())?;
    let (pfm, png) = write_depth_outputs(&res.depth, &args.out)?;
    let d = res.motion.direction;
    let results = json!({
        "baseline_m": cfg.stereo.baseline_m,
        "motion": {
            "direction": [d.x(), d.y(), d.z()],
            "downward_offset_deg": res.motion.downward_offset.to_degrees(),
            "leftward_offset_deg": res.motion.leftward_offset.to_degrees(),
        },
        "rotation": euler_json(&res.rotation.to_euler()),
        "rotation_only_fallback": res.rotation_only_fallback,
        "matches": res.matches,
        "flow_vectors": res.flow_vectors,
        "num_disparities": cfg.stereo.num_disparities,
        "depth": depth_summary(&res.depth),
    });
    write_sidecar(
        &suffixed(&args.out, ".json"),
        &Sidecar {
            command: "monocular",
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.stabilize.pose.seed,
            config: Some(&cfg),
            inputs: display(&[&path_a, &path_b]),
            outputs: display(&[&pfm, &png]),
            results,
        },
    )?;
    println!("{}", pfm.display());
    Ok(())
}

pub fn calibrate(args: &CalibrateArgs, mut cfg: PipelineConfig) -> Result<(), CliError> {
    if args.max_height.is_some() {
        cfg.max_height = args.max_height;
    }
    cfg.validate()?;
    let upper = load_image(&args.upper)?;
    let lower = load_image(&args.lower)?;
    check_same_dims(&upper, &lower)?;
    let upper = shrink(upper, cfg.max_height);
    let lower = shrink(lower, cfg.max_height);
    let m = estimate_rig_misalignment(&upper, &lower, &cfg.calibration)?;
    let mut v = serde_json::to_value(&m).expect("serializable");
    v["degrees"] = euler_json(&m.angles);
    let text = serde_json::to_string_pretty(&v).expect("serializable");
    if let Some(out) = &args.out {
        ensure_parent(out)?;
        std::fs::write(out, format!("{text}\n")).map_err(|e| CliError::io(out, e))?;
    }
    println!("{text}");
    Ok(())
}

fn transform_json(t: &RigidTransform) -> Value {
    json!({
        "rotation_deg": t.rotation.angle().to_degrees(),
        "euler": euler_json(&t.rotation.to_euler()),
        "translation": t.translation,
    })
}

pub fn pointcloud(args: &PointcloudArgs, mut cfg: PipelineConfig) -> Result<(), CliError> {
    if let Some(s) = args.stride {
        cfg.cloud.stride = s;
    }
    if let Some(r) = args.max_range {
        cfg.cloud.max_range_m = r;
    }
    if let Some(s) = args.speed_kmh {
        cfg.speed_kmh = s;
    }
    if let Some(f) = args.fps {
        cfg.fps = f;
    }
    if let Some(c) = args.cadence {
        cfg.cloud.cadence_frames = c;
    }
    cfg.validate()?;
    if !args.color.is_empty() && args.color.len() != args.depth.len() {
        return Err(CliError::Usage(format!(
            "{} color images for {} depth maps",
            args.color.len(),
            args.depth.len()
        )));
    }
    let axis = Direction3::normalize(args.axis.0.into())?;

    let mut clouds = Vec::with_capacity(args.depth.len());
    for (k, path) in args.depth.iter().enumerate() {
        let depth = with_path(path, load_depth(path))?;
        let color = match args.color.get(k) {
            Some(c) => Some(load_image(c)?),
            None => None,
        };
        clouds.push(depth_to_points(
            &depth,
            color.as_ref(),
            cfg.cloud.stride,
            cfg.cloud.max_range_m,
        )?);
    }
    let counts: Vec<usize> = clouds.iter().map(PointCloud::len).collect();
    let speed_mps = cfg.speed_kmh / 3.6;
    let interval_s = cfg.cloud.cadence_frames / cfg.fps;
    let mut merged = accumulate(&clouds, speed_mps, interval_s, &axis);

    let mut registrations = Vec::new();
    if args.icp && clouds.len() > 1 {
        let mut parts = split_by_capture(&merged, clouds.len());
        for k in 1..parts.len() {
            let target = concat(&parts[..k]);
            let res = icp_register(&parts[k], &target, &cfg.cloud.icp)?;
            log::info!(
                "capture {k}: icp rms {:.4} -> {:.4}, converged {}",
                res.rms_history.first().copied().unwrap_or(f64::NAN),
                res.rms_history.last().copied().unwrap_or(f64::NAN),
                res.converged
            );
            parts[k] = parts[k].transformed(&res.transform);
            let mut entry = transform_json(&res.transform);
            entry["capture"] = json!(k);
            entry["converged"] = json!(res.converged);
            entry["final_rms"] = json!(res.rms_history.last());
            registrations.push(entry);
        }
        merged = concat(&parts);
    }

    let format = if args.ascii {
        PlyFormat::Ascii
    } else {
        PlyFormat::BinaryLittleEndian
    };
    ensure_parent(&args.out)?;
    with_path(&args.out, save_ply(&merged, format, &args.out))?;
    let mut inputs = display(&args.depth.iter().map(PathBuf::as_path).collect::<Vec<_>>());
    inputs.extend(args.color.iter().map(|p| p.display().to_string()));
    let results = json!({
        "points": merged.len(),
        "points_per_capture": counts,
        "capture_spacing_m": speed_mps * interval_s,
        "icp": registrations,
    });
    write_sidecar(
        &args.out.with_extension("json"),
        &Sidecar {
            command: "pointcloud",
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.stabilize.pose.seed,
            config: Some(&cfg),
            inputs,
            outputs: display(&[&args.out]),
            results: results.clone(),
        },
    )?;
    println!("{}", serde_json::to_string(&results).expect("serializable"));
    Ok(())
}

fn split_by_capture(cloud: &PointCloud, n: usize) -> Vec<PointCloud> {
    let mut parts: Vec<PointCloud> = (0..n).map(|_| PointCloud::default()).collect();
    let with_color = cloud.colors.is_some();
    for (i, p) in cloud.points.iter().enumerate() {
        let k = cloud.capture_index[i] as usize;
        parts[k].points.push(*p);
        parts[k].capture_index.push(k as u32);
        if let Some(c) = &cloud.colors {
            parts[k].colors.get_or_insert_with(Vec::new).push(c[i]);
        }
    }
    if with_color {
        for p in &mut parts {
            p.colors.get_or_insert_with(Vec::new);
        }
    }
    parts
}

fn concat(parts: &[PointCloud]) -> PointCloud {
    let mut out = PointCloud::default();
    let with_color = parts.iter().all(|p| p.colors.is_some());
    let mut colors = Vec::new();
    for p in parts {
        out.points.extend_from_slice(&p.points);
        out.capture_index.extend_from_slice(&p.capture_index);
        if with_color {
            colors.extend_from_slice(p.colors.as_ref().expect("checked"));
        }
    }
    if with_color && !parts.is_empty() {
        out.colors = Some(colors);
    }
    out
}

pub fn coverage(args: &CoverageArgs) -> Result<(), CliError> {
    if !(0.0..=90.0).contains(&args.psi) {
        return Err(CliError::Usage(format!(
            "psi must be within [0, 90] degrees, got {}",
            args.psi
        )));
    }
    println!("{:.6}", coverage_ratio(args.psi.to_radians()));
    Ok(())
}
