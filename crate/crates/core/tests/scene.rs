use std::path::PathBuf;

use forensic3d::cloud::AlignmentResult;
use forensic3d::geometry::{exp_so3, Point3, SimilarityTransform};
use forensic3d::keyframing::keyframe_stats;
use forensic3d::scene::{
    generate_report, load_project, project_from_json, project_to_json, save_project, AlignmentRecord, PresetStats,
    Project, ReconstructionSummary, ReportFormat, SceneError,
};
use nalgebra::Vector3;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

const GENERATED: &str = "2024-05-02T10:00:00Z";

/// Compare against a fixture file; `BLESS=1` rewrites it instead.
fn check_golden(name: &str, actual: &str) {
    let path = fixtures().join(name);
    if std::env::var_os("BLESS").is_some() {
        std::fs::create_dir_all(fixtures()).unwrap();
        std::fs::write(&path, actual).unwrap();
    }
    let golden = std::fs::read_to_string(&path).unwrap();
    assert!(golden == actual, "{name} differs from the golden file");
}

/// The report fixture: two presets of keyframe statistics (the first with
/// the sequence-1 counts 3675 frames / 867 keyframes), two cluster clouds,
/// one alignment, two annotations and one measurement with a metric scale.
fn fixture_project() -> Project {
    let mut p = Project::new("Apartment 4B", "2024-05-01T09:30:00Z");
    p.frames_dir = Some("frames/sequence1".into());
    p.metric_scale = Some(2.5);
    p.keyframe_stats = vec![
        PresetStats {
            preset: "sift-like".into(),
            stats: keyframe_stats(867, 3675),
        },
        PresetStats {
            preset: "surf-like".into(),
            stats: keyframe_stats(40, 300),
        },
    ];
    let a = p.add_cloud(
        "clouds/cluster0.ply",
        "cluster0",
        1520,
        Some(ReconstructionSummary {
            cameras: 30,
            mean_reproj_error_px: 0.4321,
        }),
    );
    let b = p.add_cloud(
        "clouds/cluster1.ply",
        "cluster1",
        1288,
        Some(ReconstructionSummary {
            cameras: 28,
            mean_reproj_error_px: 0.5,
        }),
    );
    p.alignments.push(AlignmentRecord {
        data_id: b,
        model_id: a,
        correspondences: vec![(3, 10), (40, 52), (77, 90), (120, 131)],
        with_scale: true,
        result: AlignmentResult {
            transform: SimilarityTransform::new(1.25, exp_so3(&Vector3::new(0.0, 0.1, 0.0)), Vector3::new(0.5, 0.0, -1.0)),
            rough_rms: 0.012345,
            final_rms: 0.000987,
            icp_iterations: 7,
            overlap_fraction: 0.876,
            no_overlap: false,
            rms_trace: vec![0.012345, 0.003, 0.000987],
        },
        cloud_distance: Some((0.0011, 0.0421)),
    });
    p.add_annotation(
        Point3::new(1.0, 0.0, 2.0),
        "Knife",
        "Examiner A",
        "Blade towards the door, <visible> stains",
        "2024-05-01T10:00:00Z",
    )
    .unwrap();
    p.add_annotation(Point3::new(1.0, 0.0, 6.0), "Victim position", "Examiner B", "", "2024-05-01T10:05:00Z")
        .unwrap();
    p.measure_annotations(1, 2).unwrap();
    p
}

#[test]
fn fixture_file_matches_builder() {
    check_golden("project.json", &project_to_json(&fixture_project()));
}

#[test]
fn text_report_matches_golden() {
    check_golden("report.txt", &generate_report(&fixture_project(), ReportFormat::Txt, GENERATED));
}

#[test]
fn html_report_matches_golden() {
    check_golden("report.html", &generate_report(&fixture_project(), ReportFormat::Html, GENERATED));
}

#[test]
fn report_content() {
    let report = generate_report(&fixture_project(), ReportFormat::Txt, GENERATED);
    assert!(report.contains("867 (23.59%)"));
    let measurements = &report[report.find("Measurements").unwrap()..];
    // Anchors 4 units apart at 2.5 mm per unit.
    assert!(measurements.contains("4.000000"));
    assert!(measurements.contains("10.000"));
    let annotations = &report[report.find("Annotations").unwrap()..report.find("Measurements").unwrap()];
    assert!(annotations.contains("\n1 ") && annotations.contains("\n2 "));
    // Sections keep their order.
    let order = ["Project:", "Keyframe statistics", "Cluster reconstructions", "Alignments", "Annotations", "Measurements"];
    let pos: Vec<usize> = order.iter().map(|s| report.find(s).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
    let html = generate_report(&fixture_project(), ReportFormat::Html, GENERATED);
    assert!(html.contains("&lt;visible&gt;"));
    assert!(!html.contains("<visible>"));
}

#[test]
fn empty_project_report_has_every_section() {
    let p = Project::new("Empty", "2024-01-01T00:00:00Z");
    let report = generate_report(&p, ReportFormat::Txt, GENERATED);
    for s in ["Keyframe statistics", "Cluster reconstructions", "Alignments", "Annotations", "Measurements"] {
        assert!(report.contains(s), "{s}");
    }
    assert_eq!(report.matches("(none)").count(), 5);
    assert_eq!(report, generate_report(&p, ReportFormat::Txt, GENERATED));
}

#[test]
fn project_round_trip_is_lossless() {
    let p = fixture_project();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("project.json");
    save_project(&p, &path).unwrap();
    let back = load_project(&path).unwrap();
    assert_eq!(back, p);
    let t = &back.alignments[0].result.transform;
    let u = &p.alignments[0].result.transform;
    for (x, y) in t.rotation.iter().zip(u.rotation.iter()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn malformed_project_files() {
    let text = project_to_json(&fixture_project());
    assert!(matches!(project_from_json(&text[..200]), Err(SceneError::ParseError(_))));
    let future = text.replacen("\"schema_version\": 1", "\"schema_version\": 7", 1);
    assert!(matches!(project_from_json(&future), Err(SceneError::SchemaVersionMismatch { found: 7, .. })));
    let dangling = text.replacen("\"model_id\": 0", "\"model_id\": 9", 1);
    assert!(matches!(project_from_json(&dangling), Err(SceneError::ParseError(_))));
}

#[test]
fn measurements_rederive_from_endpoints() {
    let p = fixture_project();
    for m in &p.measurements {
        assert!(((m.p2 - m.p1).norm() - m.distance_units).abs() < 1e-9);
        assert_eq!(m.distance_mm, Some(m.distance_units * 2.5));
    }
}
