use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CloudError, KdTree, PointCloud};
use crate::geometry::{umeyama, Point3, SimilarityTransform};

/// Both clouds need at least this many points for ICP.
pub const MIN_ICP_POINTS: usize = 10;
/// Median nearest-neighbour distance after the initial transform, in units of
/// the model's median point spacing, above which the clouds do not overlap.
pub const NO_OVERLAP_FACTOR: f64 = 10.0;
/// A data point overlaps the model when its nearest model point is within
/// this many median spacings.
pub const OVERLAP_RADIUS_FACTOR: f64 = 3.0;

/// Index pairs `(data, model)` picked on the two clouds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(usize, usize)>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<(usize, usize)>) -> Self {
        Self { pairs }
    }

    pub fn validate(&self, data_len: usize, model_len: usize) -> Result<(), CloudError> {
        if self.pairs.len() < 4 {
            return Err(CloudError::TooFewCorrespondences(self.pairs.len()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &(d, m) in &self.pairs {
            if d >= data_len || m >= model_len {
                return Err(CloudError::InvalidCorrespondences(format!(
                    "pair ({d}, {m}) out of range for clouds of {data_len} and {model_len} points"
                )));
            }
            if !seen.insert(d) {
                return Err(CloudError::InvalidCorrespondences(format!("data index {d} used twice")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpParams {
    pub max_iterations: usize,
    pub trim_fraction: f64,
    pub convergence_tol: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            trim_fraction: 0.9,
            convergence_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// Maps data coordinates into the model frame.
    pub transform: SimilarityTransform,
    pub rough_rms: f64,
    pub final_rms: f64,
    pub icp_iterations: usize,
    pub overlap_fraction: f64,
    /// Set when the clouds did not overlap after the initial transform; the
    /// initial transform is returned unchanged.
    pub no_overlap: bool,
    /// Trimmed RMS at the initial transform followed by one entry per
    /// accepted update.
    pub rms_trace: Vec<f64>,
}

/// Closed-form transform from picked correspondences. With `with_scale`
/// the result is a similarity, otherwise rigid.
pub fn rough_align(
    data: &PointCloud,
    model: &PointCloud,
    corr: &CorrespondenceSet,
    with_scale: bool,
) -> Result<SimilarityTransform, CloudError> {
    corr.validate(data.len(), model.len())?;
    let src: Vec<Point3> = corr.pairs.iter().map(|&(d, _)| data.points[d]).collect();
    let dst: Vec<Point3> = corr.pairs.iter().map(|&(_, m)| model.points[m]).collect();
    umeyama(&src, &dst, with_scale)
        .ok_or_else(|| CloudError::DegenerateConfiguration("correspondences are collinear or coincident".into()))
}

struct Matching {
    /// `(squared distance, data index, model index)`, nearest first.
    pairs: Vec<(f64, usize, usize)>,
}

impl Matching {
    fn compute(tree: &KdTree, data: &[Point3], t: &SimilarityTransform) -> Matching {
        let mut pairs: Vec<(f64, usize, usize)> = data
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let (j, d2) = tree.nearest(&t.apply(p));
                (d2, i, j)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Matching { pairs }
    }

    fn trimmed(&self, fraction: f64) -> &[(f64, usize, usize)] {
        let n = self.pairs.len();
        let keep = ((fraction * n as f64).ceil() as usize).clamp(3.min(n), n);
        &self.pairs[..keep]
    }

    fn rms(&self, fraction: f64) -> f64 {
        let kept = self.trimmed(fraction);
        (kept.iter().map(|p| p.0).sum::<f64>() / kept.len() as f64).sqrt()
    }

    fn median_distance(&self) -> f64 {
        self.pairs[self.pairs.len() / 2].0.sqrt()
    }
}

fn median_spacing(tree: &KdTree, points: &[Point3]) -> f64 {
    let mut d: Vec<f64> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            tree.knn(p, 2)
                .into_iter()
                .find(|&(j, _)| j != i)
                .map_or(0.0, |(_, d2)| d2.sqrt())
        })
        .collect();
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// Trimmed ICP with rigid updates from `init`. Each iteration matches every
/// transformed data point to its nearest model point, keeps the closest
/// `trim_fraction` of the pairs and applies the rigid transform that best
/// aligns them. An update that would raise the trimmed RMS is discarded
/// and ends the iteration, so `rms_trace` never increases.
pub fn icp_refine(
    data: &PointCloud,
    model: &PointCloud,
    init: &SimilarityTransform,
    params: &IcpParams,
) -> Result<AlignmentResult, CloudError> {
    for c in [data, model] {
        if c.len() < MIN_ICP_POINTS {
            return Err(CloudError::CloudTooSmall {
                got: c.len(),
                need: MIN_ICP_POINTS - 1,
            });
        }
        c.validate()?;
    }
    if !init.is_finite() {
        return Err(CloudError::BadParameters("initial transform is not finite".into()));
    }
    if !(params.trim_fraction > 0.0 && params.trim_fraction <= 1.0) || !(params.convergence_tol >= 0.0) {
        return Err(CloudError::BadParameters(format!(
            "trim_fraction = {}, convergence_tol = {}",
            params.trim_fraction, params.convergence_tol
        )));
    }
    let tree = KdTree::build(&model.points);
    let spacing = median_spacing(&tree, &model.points);
    let overlap = |m: &Matching| {
        let r2 = (OVERLAP_RADIUS_FACTOR * spacing).powi(2);
        m.pairs.iter().filter(|p| p.0 <= r2).count() as f64 / m.pairs.len() as f64
    };

    let mut transform = *init;
    let mut matching = Matching::compute(&tree, &data.points, &transform);
    let mut rms = matching.rms(params.trim_fraction);
    let rough_rms = rms;
    let mut trace = vec![rms];
    if matching.median_distance() > NO_OVERLAP_FACTOR * spacing {
        return Ok(AlignmentResult {
            transform,
            rough_rms,
            final_rms: rms,
            icp_iterations: 0,
            overlap_fraction: overlap(&matching),
            no_overlap: true,
            rms_trace: trace,
        });
    }

    let mut iterations = 0;
    while iterations < params.max_iterations {
        iterations += 1;
        let kept = matching.trimmed(params.trim_fraction);
        let src: Vec<Point3> = kept.iter().map(|&(_, i, _)| transform.apply(&data.points[i])).collect();
        let dst: Vec<Point3> = kept.iter().map(|&(_, _, j)| model.points[j]).collect();
        let Some(delta) = umeyama(&src, &dst, false) else {
            break;
        };
        let candidate = delta.compose(&transform);
        let next = Matching::compute(&tree, &data.points, &candidate);
        let next_rms = next.rms(params.trim_fraction);
        if next_rms > rms {
            break;
        }
        let change = rms - next_rms;
        transform = candidate;
        matching = next;
        rms = next_rms;
        trace.push(rms);
        if change < params.convergence_tol {
            break;
        }
    }
    Ok(AlignmentResult {
        transform,
        rough_rms,
        final_rms: rms,
        icp_iterations: iterations,
        overlap_fraction: overlap(&matching),
        no_overlap: false,
        rms_trace: trace,
    })
}

/// Rough alignment from correspondences followed by ICP refinement.
pub fn align(
    data: &PointCloud,
    model: &PointCloud,
    corr: &CorrespondenceSet,
    with_scale: bool,
    params: &IcpParams,
) -> Result<AlignmentResult, CloudError> {
    let rough = rough_align(data, model, corr, with_scale)?;
    icp_refine(data, model, &rough, params)
}
