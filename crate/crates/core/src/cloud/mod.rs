//! Point clouds: PLY interchange, nearest-neighbour search, statistical
//! outlier removal, correspondence-seeded alignment with trimmed ICP,
//! merging and cloud-to-cloud distance.

mod align;
mod kdtree;
mod ply;
mod sor;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point3, SimilarityTransform};

pub use align::{align, icp_refine, rough_align, AlignmentResult, CorrespondenceSet, IcpParams, MIN_ICP_POINTS};
pub use kdtree::{brute_force_knn, brute_force_nearest, KdTree};
pub use ply::{parse_ply, ply_bytes, read_ply, write_ply, PlyFormat};
pub use sor::{mean_knn_distances, sor_filter, SorParams};

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("malformed PLY header: {0}")]
    MalformedHeader(String),
    #[error("truncated PLY body: {0}")]
    TruncatedBody(String),
    #[error("cloud has {got} points, need more than {need}")]
    CloudTooSmall { got: usize, need: usize },
    #[error("{0} correspondences, at least 4 are required")]
    TooFewCorrespondences(usize),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("invalid correspondences: {0}")]
    InvalidCorrespondences(String),
    #[error("{clouds} clouds but {transforms} transforms")]
    LengthMismatch { clouds: usize, transforms: usize },
    #[error("cloud is empty")]
    EmptyCloud,
    #[error("invalid cloud: {0}")]
    InvalidCloud(String),
    #[error("bad parameters: {0}")]
    BadParameters(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CloudError {
    pub fn code(&self) -> &'static str {
        match self {
            CloudError::MalformedHeader(_) => "malformed_header",
            CloudError::TruncatedBody(_) => "truncated_body",
            CloudError::CloudTooSmall { .. } => "cloud_too_small",
            CloudError::TooFewCorrespondences(_) => "too_few_correspondences",
            CloudError::DegenerateConfiguration(_) => "degenerate_configuration",
            CloudError::InvalidCorrespondences(_) => "invalid_correspondences",
            CloudError::LengthMismatch { .. } => "length_mismatch",
            CloudError::EmptyCloud => "empty_cloud",
            CloudError::InvalidCloud(_) => "invalid_cloud",
            CloudError::BadParameters(_) => "bad_parameters",
            CloudError::Io { .. } => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub colors: Option<Vec<[u8; 3]>>,
    /// Provenance label of the whole cloud (cluster or file).
    pub source_id: String,
    /// Per-point provenance: index of the input cloud a merged point came
    /// from. Written to PLY as the `source` vertex property.
    pub sources: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, source_id: impl Into<String>) -> Self {
        Self {
            points,
            colors: None,
            source_id: source_id.into(),
            sources: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), CloudError> {
        if let Some(c) = &self.colors {
            if c.len() != self.points.len() {
                return Err(CloudError::InvalidCloud(format!(
                    "{} colors for {} points",
                    c.len(),
                    self.points.len()
                )));
            }
        }
        if let Some(s) = &self.sources {
            if s.len() != self.points.len() {
                return Err(CloudError::InvalidCloud(format!(
                    "{} sources for {} points",
                    s.len(),
                    self.points.len()
                )));
            }
        }
        if let Some(i) = self.points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(CloudError::InvalidCloud(format!("point {i} is not finite")));
        }
        Ok(())
    }

    pub fn transformed(&self, t: &SimilarityTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            ..self.clone()
        }
    }

    /// Cloud restricted to the given indices, in order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            colors: self.colors.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
            source_id: self.source_id.clone(),
            sources: self.sources.as_ref().map(|s| indices.iter().map(|&i| s[i]).collect()),
        }
    }

    /// Largest distance between two points (exact, quadratic).
    pub fn diameter(&self) -> f64 {
        let pts = &self.points;
        (0..pts.len())
            .into_par_iter()
            .map(|i| pts[i + 1..].iter().map(|q| (pts[i] - q).norm()).fold(0.0, f64::max))
            .reduce(|| 0.0, f64::max)
    }
}

/// Concatenate transformed clouds. `sources` records which input each point
/// came from; colors are kept when every input has them.
pub fn merge(clouds: &[PointCloud], transforms: &[SimilarityTransform]) -> Result<PointCloud, CloudError> {
    if clouds.len() != transforms.len() {
        return Err(CloudError::LengthMismatch {
            clouds: clouds.len(),
            transforms: transforms.len(),
        });
    }
    let mut points = Vec::new();
    let mut sources = Vec::new();
    let keep_colors = clouds.iter().all(|c| c.colors.is_some());
    let mut colors = Vec::new();
    for (i, (c, t)) in clouds.iter().zip(transforms).enumerate() {
        c.validate()?;
        points.extend(c.points.iter().map(|p| t.apply(p)));
        sources.extend(std::iter::repeat(i as u32).take(c.len()));
        if keep_colors {
            colors.extend_from_slice(c.colors.as_ref().unwrap());
        }
    }
    let ids: Vec<&str> = clouds.iter().map(|c| c.source_id.as_str()).collect();
    Ok(PointCloud {
        points,
        colors: keep_colors.then_some(colors),
        source_id: ids.join("+"),
        sources: Some(sources),
    })
}

/// Distance from every point of `a` to its nearest neighbour in `b`;
/// returns `(rms, max)`. Not symmetric: the direction is `a` to `b`.
pub fn cloud_distance(a: &PointCloud, b: &PointCloud) -> Result<(f64, f64), CloudError> {
    if a.is_empty() || b.is_empty() {
        return Err(CloudError::EmptyCloud);
    }
    let tree = KdTree::build(&b.points);
    let d2: Vec<f64> = a.points.par_iter().map(|p| tree.nearest(p).1).collect();
    let rms = (d2.iter().sum::<f64>() / d2.len() as f64).sqrt();
    let max = d2.iter().copied().fold(0.0, f64::max).sqrt();
    Ok((rms, max))
}
