mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use forensic3d::cloud::{read_ply, AlignmentResult, IcpParams};
use forensic3d::scene::{load_project, ReportFormat};
use forensic3d_cli::commands::{run_align, run_report};
use forensic3d_cli::service::{router, AppState};
use forensic3d_cli::PipelineConfig;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn send(state: &Arc<AppState>, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn fixture(seed: u64) -> (tempfile::TempDir, Arc<AppState>, Vec<(usize, usize)>) {
    let dir = tempfile::tempdir().unwrap();
    let (project, picks) = common::alignment_project(dir.path(), seed);
    let state = AppState::open(&project, IcpParams::default()).unwrap();
    (dir, state, picks)
}

fn alignment_body(picks: &[(usize, usize)]) -> String {
    json!({ "data_id": 0, "model_id": 1, "correspondences": picks, "with_scale": true }).to_string()
}

#[tokio::test]
async fn alignment_with_four_exact_picks_converges() {
    let (_dir, state, picks) = fixture(3);
    let (status, body) = send(&state, "POST", "/api/alignments", Some(&alignment_body(&picks))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let r: AlignmentResult = serde_json::from_slice(&body).unwrap();
    assert!(r.final_rms <= 1e-3, "{r:?}");
    assert!(!r.no_overlap);
    assert!(r.rms_trace.windows(2).all(|w| w[1] <= w[0]));
    let p = state.snapshot();
    assert_eq!(p.alignments.len(), 1);
    assert_eq!(p.alignments[0].result, r);
    assert_eq!(state.status().completed_jobs, 1);
}

#[tokio::test]
async fn alignment_with_three_picks_is_unprocessable() {
    let (_dir, state, picks) = fixture(3);
    let (status, body) = send(&state, "POST", "/api/alignments", Some(&alignment_body(&picks[..3]))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(json_of(&body)["error"]["code"], "too_few_correspondences");
    assert!(state.snapshot().alignments.is_empty());
    assert!(!state.status().busy);
}

#[tokio::test]
async fn unknown_cloud_is_not_found() {
    let (_dir, state, picks) = fixture(3);
    let (status, body) = send(&state, "GET", "/api/clouds/999", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(json_of(&body)["error"]["code"], "not_found");
    let body = json!({ "data_id": 0, "model_id": 999, "correspondences": picks }).to_string();
    assert_eq!(send(&state, "POST", "/api/alignments", Some(&body)).await.0, StatusCode::NOT_FOUND);
    assert_eq!(send(&state, "DELETE", "/api/annotations/5", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn malformed_bodies_are_bad_requests() {
    let (_dir, state, _) = fixture(3);
    for (uri, body) in [
        ("/api/alignments", "{\"data_id\": 0"),
        ("/api/alignments", "{\"data_id\": 0, \"model_id\": 1}"),
        ("/api/annotations", "{\"anchor\": [0, 0], \"label\": \"a\", \"author\": \"b\"}"),
        ("/api/measurements", "{\"p1\": [0, 0, 0]}"),
        ("/api/measurements", "[]"),
    ] {
        let (status, resp) = send(&state, "POST", uri, Some(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri} {body}");
        assert_eq!(json_of(&resp)["error"]["code"], "malformed_body");
    }
}

#[tokio::test]
async fn mutations_conflict_with_a_running_job() {
    let (_dir, state, picks) = fixture(3);
    let guard = state.begin_job("reconstruct").unwrap();
    assert!(state.status().busy);
    let annotation = json!({ "anchor": [0.0, 0.0, 0.0], "label": "a", "author": "b" }).to_string();
    for (method, uri, body) in [
        ("POST", "/api/alignments", Some(alignment_body(&picks))),
        ("POST", "/api/annotations", Some(annotation.clone())),
        ("POST", "/api/measurements", Some(json!({ "p1": [0, 0, 0], "p2": [1, 0, 0] }).to_string())),
        ("DELETE", "/api/annotations/1", None),
    ] {
        let (status, resp) = send(&state, method, uri, body.as_deref()).await;
        assert_eq!(status, StatusCode::CONFLICT, "{method} {uri}");
        assert_eq!(json_of(&resp)["error"]["code"], "busy");
    }
    // Reads stay available.
    assert_eq!(send(&state, "GET", "/api/project", None).await.0, StatusCode::OK);
    drop(guard);
    assert_eq!(send(&state, "POST", "/api/annotations", Some(&annotation)).await.0, StatusCode::CREATED);
}

#[tokio::test]
async fn annotations_and_measurements_persist() {
    let (dir, state, _) = fixture(3);
    let mut ids = Vec::new();
    for anchor in [[0.0, 0.0, 0.0], [0.0, 3.0, 4.0]] {
        let body = json!({ "anchor": anchor, "label": "blood", "author": "inv", "comment": "c" }).to_string();
        let (status, resp) = send(&state, "POST", "/api/annotations", Some(&body)).await;
        assert_eq!(status, StatusCode::CREATED);
        ids.push(json_of(&resp)["id"].as_u64().unwrap());
    }
    assert_eq!(ids, vec![1, 2]);
    let (status, resp) = send(&state, "POST", "/api/measurements", Some(&json!({ "annotations": [1, 2] }).to_string())).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(json_of(&resp)["distance_units"], 5.0);
    assert_eq!(send(&state, "DELETE", "/api/annotations/2", None).await.0, StatusCode::OK);
    let body = json!({ "anchor": [1.0, 1.0, 1.0], "label": "x", "author": "inv" }).to_string();
    let (_, resp) = send(&state, "POST", "/api/annotations", Some(&body)).await;
    assert_eq!(json_of(&resp)["id"], 3, "deleted ids are not reused");
    let on_disk = load_project(&dir.path().join("project.json")).unwrap();
    assert_eq!(on_disk, *state.snapshot());
    let (_, resp) = send(&state, "GET", "/api/project", None).await;
    assert_eq!(json_of(&resp), serde_json::to_value(&*state.snapshot()).unwrap());
}

#[tokio::test]
async fn clouds_are_listed_and_streamed_as_ply() {
    let (dir, state, _) = fixture(3);
    let (status, body) = send(&state, "GET", "/api/clouds", None).await;
    assert_eq!(status, StatusCode::OK);
    let list = json_of(&body);
    let data = read_ply(&dir.path().join("data.ply")).unwrap();
    assert_eq!(list[0], json!({ "id": 0, "point_count": data.len(), "source": "data" }));
    assert_eq!(list.as_array().unwrap().len(), 2);
    let (status, body) = send(&state, "GET", "/api/clouds/0", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, std::fs::read(dir.path().join("data.ply")).unwrap());
}

#[tokio::test]
async fn health_and_report() {
    let fixtures = common::core_fixtures();
    let dir = tempfile::tempdir().unwrap();
    let project = dir.path().join("project.json");
    std::fs::copy(fixtures.join("project.json"), &project).unwrap();
    let state = AppState::open(&project, IcpParams::default()).unwrap();
    let (_, body) = send(&state, "GET", "/api/health", None).await;
    assert_eq!(json_of(&body)["project"], "Apartment 4B");
    assert_eq!(json_of(&body)["version"], env!("CARGO_PKG_VERSION"));
    let generated = "2024-05-02T10:00:00Z";
    for (format, golden) in [("txt", "report.txt"), ("html", "report.html")] {
        let (status, body) = send(&state, "GET", &format!("/api/report?format={format}&generated={generated}"), None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body, std::fs::read(fixtures.join(golden)).unwrap());
    }
    let (status, body) = send(&state, "GET", &format!("/api/report?generated={generated}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(String::from_utf8(body).unwrap(), run_report(&project, ReportFormat::Html, generated).unwrap());
    assert_eq!(send(&state, "GET", "/api/report?format=pdf", None).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn cli_and_http_alignment_results_agree() {
    for seed in [4, 5] {
        let (dir, state, picks) = fixture(seed);
        let corr = dir.path().join("corr.txt");
        std::fs::write(&corr, common::corr_text(&picks)).unwrap();
        let cfg = PipelineConfig::new(forensic3d::features::DetectorPreset::SiftLike, dir.path().join("out"), 0);
        let cli = run_align(&dir.path().join("data.ply"), &dir.path().join("model.ply"), &corr, true, &cfg, None).unwrap();
        let (status, body) = send(&state, "POST", "/api/alignments", Some(&alignment_body(&picks))).await;
        assert_eq!(status, StatusCode::OK);
        let http: AlignmentResult = serde_json::from_slice(&body).unwrap();
        assert_eq!(cli, http, "seed {seed}");
        let from_file: AlignmentResult =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/alignment.json")).unwrap()).unwrap();
        assert_eq!(from_file, http);
    }
}
