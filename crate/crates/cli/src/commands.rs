//! One function per subcommand. Each validates its inputs, runs the core
//! operation and writes its outputs; `main` only parses flags.

use std::path::{Path, PathBuf};

use forensic3d::cloud::{
    align, cloud_distance, read_ply, sor_filter, write_ply, AlignmentResult, CorrespondenceSet, PlyFormat, PointCloud,
};
use forensic3d::geometry::{CameraIntrinsics, Point3, SimilarityTransform};
use forensic3d::keyframing::{select_keyframes, FrameDir, KeyframeSet};
use forensic3d::scene::{
    generate_report, load_project, save_project, AlignmentRecord, PresetStats, Project, ReconstructionSummary,
    ReportFormat,
};
use forensic3d::sfm::reconstruct_all;
use forensic3d::synth::{generate_scene, SynthParams};
use nalgebra::Matrix4;

use crate::config::PipelineConfig;
use crate::error::CliError;

pub const KEYFRAME_LIST: &str = "keyframes.txt";
pub const KEYFRAME_STATS: &str = "keyframe_stats.txt";
pub const KEYFRAME_SET: &str = "keyframes.json";
pub const CLUSTER_SUMMARY: &str = "clusters.txt";

/// UTC wall-clock time as `YYYY-MM-DDTHH:MM:SSZ`.
pub fn now_utc() -> String {
    chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn read_to_string(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// `path` relative to the directory of `project_file` when it lies below it,
/// absolute otherwise.
fn project_relative(project_file: &Path, path: &Path) -> String {
    let base = project_file
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let (Ok(base), Ok(full)) = (base.canonicalize(), path.canonicalize()) else {
        return path.display().to_string();
    };
    match full.strip_prefix(&base) {
        Ok(rel) => rel.display().to_string(),
        Err(_) => full.display().to_string(),
    }
}

fn open_project(path: &Path) -> Result<Project, CliError> {
    Ok(load_project(path)?)
}

pub fn run_init(
    path: &Path,
    name: &str,
    frames_dir: Option<&Path>,
    metric_scale: Option<f64>,
    created: &str,
) -> Result<Project, CliError> {
    if path.exists() {
        return Err(CliError::data("project_exists", format!("{} already exists", path.display())));
    }
    if let Some(s) = metric_scale {
        if !(s > 0.0 && s.is_finite()) {
            return Err(CliError::usage("invalid_metric_scale", "metric scale must be a positive number"));
        }
    }
    let mut project = Project::new(name, created);
    project.frames_dir = frames_dir.map(|d| project_relative(path, d));
    project.metric_scale = metric_scale;
    save_project(&project, path)?;
    Ok(project)
}

fn keyframe_list(set: &KeyframeSet) -> String {
    let mut out = String::from("# frame_index trigger_inliers\n");
    for (f, c) in set.frame_indices.iter().zip(&set.trigger_inlier_counts) {
        out.push_str(&format!("{f} {c}\n"));
    }
    out
}

fn keyframe_stats_table(preset: &str, set: &KeyframeSet) -> String {
    format!(
        "{:<10} {:>7}  keyframes\n{:<10} {:>7}  {}\n",
        "preset",
        "frames",
        preset,
        set.total_frames,
        set.stats()
    )
}

/// Select keyframes from `cfg.frames_dir` and write the index list, the
/// statistics table, the full keyframe set and the config.
pub fn run_keyframes(cfg: &PipelineConfig, project: Option<&Path>) -> Result<KeyframeSet, CliError> {
    cfg.validate()?;
    let dir = cfg
        .frames_dir
        .as_deref()
        .ok_or_else(|| CliError::usage("missing_frames_dir", "no frames directory given"))?;
    if !dir.is_dir() {
        return Err(CliError::data("frames_not_found", format!("{} is not a directory", dir.display())));
    }
    let frames = FrameDir::open(dir)?;
    let set = select_keyframes(&frames, &cfg.detector, &cfg.keyframe)?;
    let out = &cfg.output_dir;
    write(&out.join(KEYFRAME_LIST), keyframe_list(&set))?;
    write(&out.join(KEYFRAME_STATS), keyframe_stats_table(cfg.detector_preset.name(), &set))?;
    let json = serde_json::to_string(&set).expect("keyframe set serializes");
    write(&out.join(KEYFRAME_SET), json)?;
    cfg.save()?;
    if let Some(path) = project {
        let mut p = open_project(path)?;
        let preset = cfg.detector_preset.name().to_string();
        p.keyframe_stats.retain(|s| s.preset != preset);
        p.keyframe_stats.push(PresetStats {
            preset,
            stats: set.stats(),
        });
        if p.frames_dir.is_none() {
            p.frames_dir = Some(project_relative(path, dir));
        }
        save_project(&p, path)?;
    }
    Ok(set)
}

fn load_keyframe_set(path: &Path) -> Result<KeyframeSet, CliError> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::data("malformed_keyframes", format!("{}: {e}", path.display())))
}

fn resolve_intrinsics(cfg: &PipelineConfig) -> Result<CameraIntrinsics, CliError> {
    if let Some(k) = cfg.intrinsics {
        return Ok(k);
    }
    let Some(dir) = &cfg.frames_dir else {
        return Err(CliError::usage("missing_intrinsics", "no intrinsics given and no frames directory to read them from"));
    };
    let path = dir.join("intrinsics.json");
    if !path.exists() {
        return Err(CliError::data("missing_intrinsics", format!("{} not found", path.display())));
    }
    serde_json::from_str(&read_to_string(&path)?)
        .map_err(|e| CliError::data("malformed_intrinsics", format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterOutcome {
    pub cluster_id: usize,
    pub frames: Vec<usize>,
    /// PLY path and point count, or the failure reason.
    pub result: Result<(PathBuf, usize), String>,
}

pub fn cluster_file(out: &Path, id: usize, suffix: &str) -> PathBuf {
    out.join(format!("cluster_{id:02}{suffix}"))
}

/// Reconstruct every cluster. Keyframes come from `keyframes` (a
/// `keyframes.json` written earlier) or are selected from the frames first.
/// Fails only when no cluster could be reconstructed.
pub fn run_reconstruct(
    cfg: &PipelineConfig,
    keyframes: Option<&Path>,
    project: Option<&Path>,
) -> Result<Vec<ClusterOutcome>, CliError> {
    cfg.validate()?;
    let k = resolve_intrinsics(cfg)?;
    let set = match keyframes {
        Some(path) => load_keyframe_set(path)?,
        None => run_keyframes(cfg, project)?,
    };
    let (plan, results) = reconstruct_all(&set, &k, &cfg.sfm)?;
    let out = &cfg.output_dir;
    let mut outcomes = Vec::new();
    let mut summary = String::from("# cluster keyframes cameras points mean_reproj_px status\n");
    let mut first_error = None;
    let mut project_clouds = Vec::new();
    for (id, (range, result)) in plan.clusters.iter().zip(results).enumerate() {
        let frames: Vec<usize> = set.frame_indices[range.clone()].to_vec();
        match result {
            Ok(rec) => {
                let cloud = rec.point_cloud();
                let ply = cluster_file(out, id, ".ply");
                write_ply(&cloud, &ply, PlyFormat::BinaryLittleEndian)?;
                write(&cluster_file(out, id, "_path.txt"), rec.camera_path())?;
                write(&cluster_file(out, id, "_ba.txt"), rec.ba_trace_text())?;
                summary.push_str(&format!(
                    "{id} {} {} {} {:.4} ok\n",
                    frames.len(),
                    rec.poses.len(),
                    cloud.len(),
                    rec.mean_reproj_error_px
                ));
                project_clouds.push((ply.clone(), cloud.source_id.clone(), cloud.len(), rec.poses.len(), rec.mean_reproj_error_px));
                outcomes.push(ClusterOutcome {
                    cluster_id: id,
                    frames,
                    result: Ok((ply, cloud.len())),
                });
            }
            Err(e) => {
                summary.push_str(&format!("{id} {} 0 0 - failed[{}]\n", frames.len(), e.code()));
                log::warn!("cluster {id} failed: {e}");
                let reason = format!("{}: {e}", e.code());
                first_error.get_or_insert(e);
                outcomes.push(ClusterOutcome {
                    cluster_id: id,
                    frames,
                    result: Err(reason),
                });
            }
        }
    }
    write(&out.join(CLUSTER_SUMMARY), summary)?;
    cfg.save()?;
    if outcomes.iter().all(|o| o.result.is_err()) {
        return Err(first_error.expect("at least one cluster").into());
    }
    if let Some(path) = project {
        let mut p = open_project(path)?;
        for (ply, source, count, cameras, err) in project_clouds {
            p.add_cloud(
                project_relative(path, &ply),
                source,
                count,
                Some(ReconstructionSummary {
                    cameras,
                    mean_reproj_error_px: err,
                }),
            );
        }
        save_project(&p, path)?;
    }
    Ok(outcomes)
}

/// SOR-filter a cloud; writes `<stem>_clean.ply` and `<stem>_removed.txt`.
pub fn run_clean(input: &Path, cfg: &PipelineConfig) -> Result<(PathBuf, Vec<usize>), CliError> {
    cfg.validate()?;
    let cloud = read_ply(input)?;
    let (clean, removed) = sor_filter(&cloud, &cfg.sor)?;
    let stem = input.file_stem().map_or("cloud".into(), |s| s.to_string_lossy().into_owned());
    let out = cfg.output_dir.join(format!("{stem}_clean.ply"));
    write_ply(&clean, &out, PlyFormat::BinaryLittleEndian)?;
    let list: String = removed.iter().map(|i| format!("{i}\n")).collect();
    write(&cfg.output_dir.join(format!("{stem}_removed.txt")), list)?;
    cfg.save()?;
    Ok((out, removed))
}

/// Parse a correspondence file: one `i j` pair of point indices per line
/// (data index, model index). Blank lines and `#` comments are skipped.
pub fn parse_correspondences(text: &str) -> Result<CorrespondenceSet, CliError> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed = match fields.as_slice() {
            [i, j] => i.parse::<usize>().ok().zip(j.parse::<usize>().ok()),
            _ => None,
        };
        let Some(pair) = parsed else {
            return Err(CliError::data(
                "malformed_correspondences",
                format!("line {}: expected two point indices, got '{line}'", n + 1),
            ));
        };
        pairs.push(pair);
    }
    Ok(CorrespondenceSet::new(pairs))
}

/// The 4x4 homogeneous matrix, one row per line, shortest round-trip
/// decimal for every entry.
pub fn format_transform(t: &SimilarityTransform) -> String {
    let m = t.to_matrix4();
    let mut out = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{}", m[(r, c)] + 0.0)).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_transform(text: &str) -> Result<SimilarityTransform, CliError> {
    let bad = |m: String| CliError::data("malformed_transform", m);
    let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != 4 {
        return Err(bad(format!("expected 4 rows, got {}", rows.len())));
    }
    let mut m = Matrix4::zeros();
    for (r, row) in rows.iter().enumerate() {
        let vals: Vec<f64> = row
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(format!("row {}: {e}", r + 1)))?;
        if vals.len() != 4 {
            return Err(bad(format!("row {} has {} entries", r + 1, vals.len())));
        }
        for (c, v) in vals.into_iter().enumerate() {
            m[(r, c)] = v;
        }
    }
    SimilarityTransform::from_matrix4(&m).ok_or_else(|| bad("matrix is not a similarity transform".into()))
}

/// Files written by `align`.
pub const TRANSFORM_FILE: &str = "transform.txt";
pub const ALIGNMENT_FILE: &str = "alignment.json";

/// Rough alignment from the correspondence file, then ICP. Writes the
/// transform and the result summary; with a project, both clouds are
/// registered in it (if not already) and the alignment is recorded.
pub fn run_align(
    data_path: &Path,
    model_path: &Path,
    corr_path: &Path,
    with_scale: bool,
    cfg: &PipelineConfig,
    project: Option<&Path>,
) -> Result<AlignmentResult, CliError> {
    cfg.validate()?;
    let corr = parse_correspondences(&read_to_string(corr_path)?)?;
    let data = read_ply(data_path)?;
    let model = read_ply(model_path)?;
    let result = align(&data, &model, &corr, with_scale, &cfg.icp)?;
    write(&cfg.output_dir.join(TRANSFORM_FILE), format_transform(&result.transform))?;
    let json = serde_json::to_string_pretty(&result).expect("result serializes") + "\n";
    write(&cfg.output_dir.join(ALIGNMENT_FILE), json)?;
    cfg.save()?;
    if let Some(path) = project {
        let mut p = open_project(path)?;
        let mut id_of = |ply: &Path, cloud: &PointCloud| {
            let rel = project_relative(path, ply);
            match p.clouds.iter().find(|c| c.path == rel) {
                Some(c) => c.id,
                None => p.add_cloud(rel, cloud.source_id.clone(), cloud.len(), None),
            }
        };
        let data_id = id_of(data_path, &data);
        let model_id = id_of(model_path, &model);
        let distance = cloud_distance(&data.transformed(&result.transform), &model)?;
        p.alignments.push(AlignmentRecord {
            data_id,
            model_id,
            correspondences: corr.pairs.clone(),
            with_scale,
            result: result.clone(),
            cloud_distance: Some(distance),
        });
        save_project(&p, path)?;
    }
    Ok(result)
}

pub enum MeasureEnds {
    Points(Point3, Point3),
    Annotations(u64, u64),
}

pub fn run_measure(project: &Path, ends: MeasureEnds) -> Result<forensic3d::scene::Measurement, CliError> {
    let mut p = open_project(project)?;
    let m = match ends {
        MeasureEnds::Points(a, b) => p.measure(a, b)?,
        MeasureEnds::Annotations(a, b) => p.measure_annotations(a, b)?,
    };
    save_project(&p, project)?;
    Ok(m)
}

pub fn run_annotate(
    project: &Path,
    anchor: Point3,
    label: &str,
    author: &str,
    comment: &str,
    timestamp: &str,
) -> Result<forensic3d::scene::EvidenceAnnotation, CliError> {
    let mut p = open_project(project)?;
    let a = p.add_annotation(anchor, label, author, comment, timestamp)?;
    save_project(&p, project)?;
    Ok(a)
}

pub fn run_delete_annotation(project: &Path, id: u64) -> Result<forensic3d::scene::EvidenceAnnotation, CliError> {
    let mut p = open_project(project)?;
    let a = p.delete_annotation(id)?;
    save_project(&p, project)?;
    Ok(a)
}

pub fn run_report(project: &Path, format: ReportFormat, generated: &str) -> Result<String, CliError> {
    Ok(generate_report(&open_project(project)?, format, generated))
}

/// Generate a synthetic scene: frames, intrinsics, ground-truth camera path,
/// the full scene (points and per-camera observations) as JSON and the
/// ground-truth points as PLY.
pub fn run_synth(params: &SynthParams, out: &Path, frames: bool) -> Result<forensic3d::synth::SynthScene, CliError> {
    let scene = generate_scene(params)?;
    if frames {
        scene.write_frames(out)?;
    } else {
        std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    }
    let json = serde_json::to_string(&scene).expect("scene serializes");
    write(&out.join("scene.json"), json)?;
    let mut cloud = PointCloud::new(scene.points.clone(), "ground_truth");
    cloud.colors = Some(scene.colors.clone());
    write_ply(&cloud, &out.join("ground_truth.ply"), PlyFormat::BinaryLittleEndian)?;
    Ok(scene)
}
