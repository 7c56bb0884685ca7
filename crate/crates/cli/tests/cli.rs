mod common;

use std::path::Path;
use std::process::{Command, Output};

use forensic3d::cloud::AlignmentResult;
use forensic3d::features::DetectorConfig;
use forensic3d::keyframing::{select_keyframes, FrameDir, KeyframePolicy};
use forensic3d::scene::load_project;
use forensic3d_cli::commands::{parse_transform, ALIGNMENT_FILE, KEYFRAME_STATS, TRANSFORM_FILE};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forensic3d")).args(args).output().unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn keyframe_stats_file_matches_module() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    let out = dir.path().join("out");
    let o = run(&[
        "synth", arg(&frames), "--seed", "3", "--cameras", "12", "--trajectory", "line", "--line-step", "0.15",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["keyframes", arg(&frames), "-o", arg(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let set = select_keyframes(&FrameDir::open(&frames).unwrap(), &DetectorConfig::default(), &KeyframePolicy::default())
        .unwrap();
    assert!(set.len() > 1 && set.len() < 12, "{} keyframes", set.len());
    let stats = std::fs::read_to_string(out.join(KEYFRAME_STATS)).unwrap();
    let row = stats.lines().nth(1).unwrap();
    let fields: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(fields[..2], ["sift-like", "12"]);
    assert_eq!(fields[2..].join(" "), set.stats().to_string());

    let list = std::fs::read_to_string(out.join("keyframes.txt")).unwrap();
    let listed: Vec<usize> = list
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(' ').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(listed, set.frame_indices);
    assert!(out.join("pipeline_config.json").is_file());
}

#[test]
fn three_correspondences_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, picks) = common::alignment_project(dir.path(), 1);
    let corr = dir.path().join("corr.txt");
    std::fs::write(&corr, common::corr_text(&picks[..3])).unwrap();
    let o = run(&[
        "align",
        arg(&dir.path().join("data.ply")),
        arg(&dir.path().join("model.ply")),
        "--corr",
        arg(&corr),
        "-o",
        arg(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[too_few_correspondences]: "), "{err}");
}

#[test]
fn malformed_correspondence_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    common::alignment_project(dir.path(), 1);
    let corr = dir.path().join("corr.txt");
    std::fs::write(&corr, "0 1\n2 x\n").unwrap();
    let o = run(&[
        "align",
        arg(&dir.path().join("data.ply")),
        arg(&dir.path().join("model.ply")),
        "--corr",
        arg(&corr),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[malformed_correspondences]"));
}

#[test]
fn align_writes_transform_and_records_in_project() {
    let dir = tempfile::tempdir().unwrap();
    let (project, picks) = common::alignment_project(dir.path(), 2);
    let corr = dir.path().join("corr.txt");
    std::fs::write(&corr, common::corr_text(&picks)).unwrap();
    let out = dir.path().join("out");
    let o = run(&[
        "align",
        arg(&dir.path().join("data.ply")),
        arg(&dir.path().join("model.ply")),
        "--corr",
        arg(&corr),
        "-o",
        arg(&out),
        "--project",
        arg(&project),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let result: AlignmentResult = serde_json::from_str(&std::fs::read_to_string(out.join(ALIGNMENT_FILE)).unwrap()).unwrap();
    assert!(result.final_rms <= 1e-3, "{result:?}");
    let text = std::fs::read_to_string(out.join(TRANSFORM_FILE)).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.split(' ').count() == 4));
    let t = parse_transform(&text).unwrap();
    assert!((t.to_matrix4() - result.transform.to_matrix4()).abs().max() < 1e-15);
    let p = load_project(&project).unwrap();
    assert_eq!(p.clouds.len(), 2);
    assert_eq!(p.alignments.len(), 1);
    assert_eq!((p.alignments[0].data_id, p.alignments[0].model_id), (0, 1));
    assert_eq!(p.alignments[0].result, result);
}

#[test]
fn report_matches_golden_files() {
    let fixtures = common::core_fixtures();
    let project = fixtures.join("project.json");
    for (format, golden) in [("txt", "report.txt"), ("html", "report.html")] {
        let o = run(&["report", arg(&project), "--format", format, "--generated", "2024-05-02T10:00:00Z"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(o.stdout, std::fs::read(fixtures.join(golden)).unwrap(), "{format}");
    }
}

#[test]
fn project_commands_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let project = dir.path().join("case.json");
    let p = arg(&project);
    let o = run(&["init", p, "--name", "Case 7", "--metric-scale", "10", "--created", "2024-05-01T09:00:00Z"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(run(&["init", p, "--name", "again"]).status.code(), Some(2));
    for anchor in ["0,0,0", "3,4,0"] {
        let o = run(&["annotate", p, "--anchor", anchor, "--label", "mark", "--author", "inv", "--timestamp", "2024-05-01T10:00:00Z"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = run(&["measure", p, "--annotations", "1,2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(m["distance_units"], 5.0);
    assert_eq!(m["distance_mm"], 50.0);
    let o = run(&["annotate", p, "--delete", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["annotate", p, "--delete", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[not_found]"));
    let saved = load_project(&project).unwrap();
    assert_eq!(saved.annotations.len(), 1);
    assert_eq!(saved.annotations[0].id, 2);
    assert_eq!(saved.measurements.len(), 1);
}

#[test]
fn usage_errors_exit_one() {
    let o = run(&["measure", "p.json", "--p1", "1,2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[usage]: "));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let o = run(&["keyframes", "--threshold", "0", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn missing_inputs_exit_two() {
    let o = run(&["keyframes", "/nonexistent/frames", "-o", "/tmp/unused"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[frames_not_found]"));
    let o = run(&["clean", "/nonexistent/cloud.ply"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["report", "/nonexistent/project.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn clean_writes_filtered_cloud_and_removed_list() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = forensic3d::rng::SplitMix64::new(9);
    let mut pts = common::unit_cube(500, &mut rng);
    pts.push(forensic3d::geometry::Point3::new(50.0, 50.0, 50.0));
    let input = dir.path().join("room.ply");
    let cloud = forensic3d::cloud::PointCloud::new(pts, "room");
    forensic3d::cloud::write_ply(&cloud, &input, forensic3d::cloud::PlyFormat::BinaryLittleEndian).unwrap();
    let o = run(&["clean", arg(&input)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let kept = forensic3d::cloud::read_ply(&dir.path().join("room_clean.ply")).unwrap();
    let removed = std::fs::read_to_string(dir.path().join("room_removed.txt")).unwrap();
    let removed: Vec<usize> = removed.lines().filter(|l| !l.starts_with('#')).map(|l| l.parse().unwrap()).collect();
    assert!(removed.contains(&500));
    assert_eq!(kept.len() + removed.len(), 501);
}
