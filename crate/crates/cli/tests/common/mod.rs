#![allow(dead_code)]

use std::path::{Path, PathBuf};

use forensic3d::cloud::{write_ply, PlyFormat, PointCloud};
use forensic3d::geometry::{exp_so3, Point3, SimilarityTransform};
use forensic3d::rng::SplitMix64;
use forensic3d::scene::{save_project, Project};
use forensic3d::synth::{generate_scene, SynthParams};
use nalgebra::Vector3;

pub fn core_fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

pub fn unit_cube(n: usize, rng: &mut SplitMix64) -> Vec<Point3> {
    (0..n).map(|_| Point3::new(rng.next_f64(), rng.next_f64(), rng.next_f64())).collect()
}

/// Scale in [0.5, 2], rotation up to 30 degrees, translation up to 3 units.
pub fn random_similarity(rng: &mut SplitMix64) -> SimilarityTransform {
    let axis = Vector3::new(rng.gaussian(), rng.gaussian(), rng.gaussian()).normalize();
    let angle = rng.uniform(0.0, 30.0).to_radians();
    SimilarityTransform::new(
        rng.uniform(0.5, 2.0),
        exp_so3(&(axis * angle)),
        Vector3::new(rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)),
    )
}

/// Two overlapping clouds cut from one synthetic room, the data displaced by
/// a planted similarity. Returns data, model and the data-to-model map.
pub fn cluster_pair(seed: u64) -> (PointCloud, PointCloud, SimilarityTransform) {
    let scene = generate_scene(&SynthParams {
        seed,
        n_points: 1500,
        n_cameras: 2,
        ..SynthParams::default()
    })
    .unwrap();
    let mut rng = SplitMix64::new(seed ^ 0x5eed);
    let t = random_similarity(&mut rng);
    let inv = t.invert();
    let mut model = Vec::new();
    let mut data = Vec::new();
    for p in &scene.points {
        if p.x < 1.8 || rng.below(3) > 0 {
            model.push(*p);
        }
        if p.x > -1.8 || rng.below(3) > 0 {
            data.push(inv.apply(p));
        }
    }
    (PointCloud::new(data, "data"), PointCloud::new(model, "model"), t)
}

/// Index pairs of data points whose image under `truth` is a model point.
pub fn shared_pairs(data: &PointCloud, model: &PointCloud, truth: &SimilarityTransform) -> Vec<(usize, usize)> {
    data.points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let w = truth.apply(p);
            model.points.iter().position(|m| (m - w).norm() < 1e-9).map(|j| (i, j))
        })
        .collect()
}

/// Writes the cluster pair for `seed` as `data.ply` and `model.ply` plus a
/// project registering them as clouds 0 and 1. Returns the project path and
/// four exact correspondences spread over the shared points.
pub fn alignment_project(dir: &Path, seed: u64) -> (PathBuf, Vec<(usize, usize)>) {
    let (data, model, truth) = cluster_pair(seed);
    write_ply(&data, &dir.join("data.ply"), PlyFormat::BinaryLittleEndian).unwrap();
    write_ply(&model, &dir.join("model.ply"), PlyFormat::BinaryLittleEndian).unwrap();
    let mut p = Project::new("Alignment fixture", "2024-05-01T09:00:00Z");
    p.add_cloud("data.ply", "data", data.len(), None);
    p.add_cloud("model.ply", "model", model.len(), None);
    let path = dir.join("project.json");
    save_project(&p, &path).unwrap();
    let shared = shared_pairs(&data, &model, &truth);
    let step = shared.len() / 4;
    let picks = (0..4).map(|k| shared[k * step]).collect();
    (path, picks)
}

pub fn corr_text(pairs: &[(usize, usize)]) -> String {
    pairs.iter().map(|(i, j)| format!("{i} {j}\n")).collect()
}
