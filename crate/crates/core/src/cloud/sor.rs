use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CloudError, KdTree, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SorParams {
    pub k: usize,
    pub alpha: f64,
}

impl Default for SorParams {
    fn default() -> Self {
        Self { k: 16, alpha: 1.0 }
    }
}

/// Mean distance from every point to its `k` nearest other points.
pub fn mean_knn_distances(cloud: &PointCloud, k: usize) -> Vec<f64> {
    let tree = KdTree::build(&cloud.points);
    cloud
        .points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = tree.knn(p, k + 1);
            // Drop the query point itself; with duplicates it may not come first.
            let others: Vec<f64> = match nn.iter().position(|&(j, _)| j == i) {
                Some(pos) => nn.iter().enumerate().filter(|&(m, _)| m != pos).map(|(_, &(_, d))| d).collect(),
                None => nn[..k].iter().map(|&(_, d)| d).collect(),
            };
            others.iter().map(|d| d.sqrt()).sum::<f64>() / k as f64
        })
        .collect()
}

/// Statistical outlier removal: drops points whose mean k-NN distance
/// exceeds `mu + alpha * sigma` of those means over the cloud. Returns the
/// kept cloud and the removed indices in ascending order.
pub fn sor_filter(cloud: &PointCloud, params: &SorParams) -> Result<(PointCloud, Vec<usize>), CloudError> {
    if params.k == 0 || !params.alpha.is_finite() {
        return Err(CloudError::BadParameters(format!("k = {}, alpha = {}", params.k, params.alpha)));
    }
    if cloud.len() <= params.k {
        return Err(CloudError::CloudTooSmall {
            got: cloud.len(),
            need: params.k,
        });
    }
    cloud.validate()?;
    let means = mean_knn_distances(cloud, params.k);
    let n = means.len() as f64;
    let mu = means.iter().sum::<f64>() / n;
    let sigma = (means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / n).sqrt();
    let threshold = mu + params.alpha * sigma;
    let (kept, removed): (Vec<usize>, Vec<usize>) = (0..cloud.len()).partition(|&i| means[i] <= threshold);
    Ok((cloud.select(&kept), removed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;

    #[test]
    fn too_small() {
        let c = PointCloud::new(vec![Point3::origin(); 16], "s");
        assert!(matches!(
            sor_filter(&c, &SorParams::default()),
            Err(CloudError::CloudTooSmall { got: 16, need: 16 })
        ));
    }

    #[test]
    fn duplicates_exclude_only_self() {
        let mut pts = vec![Point3::origin(); 3];
        pts.push(Point3::new(1.0, 0.0, 0.0));
        let c = PointCloud::new(pts, "d");
        let m = mean_knn_distances(&c, 2);
        assert_eq!(m[0], 0.0);
        assert_eq!(m[3], 1.0);
    }
}
