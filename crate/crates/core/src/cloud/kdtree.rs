use crate::geometry::Point3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static k-d tree over a point set with exact nearest and k-nearest
/// queries. Equal distances are broken by the smaller point index, so
/// results match [`brute_force_nearest`] and [`brute_force_knn`] exactly.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn better(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

impl KdTree {
    pub fn build(points: &[Point3]) -> KdTree {
        let mut tree = KdTree {
            points: points.iter().map(|p| [p.x, p.y, p.z]).collect(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3).fold(0, |best, a| if hi[a] - lo[a] > hi[best] - lo[best] { a } else { best });
        let mid = (start + end) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&x, &y| {
            points[x][axis].total_cmp(&points[y][axis]).then(x.cmp(&y))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Index of the nearest point and the squared distance to it.
    pub fn nearest(&self, q: &Point3) -> (usize, f64) {
        assert!(!self.is_empty(), "nearest on empty tree");
        let q = [q.x, q.y, q.z];
        let mut best = (f64::INFINITY, usize::MAX);
        self.nearest_in(0, &q, &mut best);
        (best.1, best.0)
    }

    fn nearest_in(&self, node: usize, q: &[f64; 3], best: &mut (f64, usize)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = (dist2(&self.points[i], q), i);
                    if better(cand, *best) {
                        *best = cand;
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.nearest_in(near, q, best);
                if diff * diff <= best.0 {
                    self.nearest_in(far, q, best);
                }
            }
        }
    }

    /// The `k` nearest points as `(index, squared distance)`, closest first.
    pub fn knn(&self, q: &Point3, k: usize) -> Vec<(usize, f64)> {
        let q = [q.x, q.y, q.z];
        let mut found: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k > 0 && !self.is_empty() {
            self.knn_in(0, &q, k, &mut found);
        }
        found.into_iter().map(|(d, i)| (i, d)).collect()
    }

    fn knn_in(&self, node: usize, q: &[f64; 3], k: usize, found: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = (dist2(&self.points[i], q), i);
                    if found.len() == k && !better(cand, found[k - 1]) {
                        continue;
                    }
                    let pos = found.partition_point(|&f| better(f, cand));
                    found.insert(pos, cand);
                    found.truncate(k);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.knn_in(near, q, k, found);
                if found.len() < k || diff * diff <= found[k - 1].0 {
                    self.knn_in(far, q, k, found);
                }
            }
        }
    }
}

/// Exhaustive nearest neighbour with the same tie-breaking as [`KdTree`].
pub fn brute_force_nearest(points: &[Point3], q: &Point3) -> (usize, f64) {
    let q = [q.x, q.y, q.z];
    let mut best = (f64::INFINITY, usize::MAX);
    for (i, p) in points.iter().enumerate() {
        let cand = (dist2(&[p.x, p.y, p.z], &q), i);
        if better(cand, best) {
            best = cand;
        }
    }
    (best.1, best.0)
}

/// Exhaustive k nearest neighbours with the same ordering as [`KdTree::knn`].
pub fn brute_force_knn(points: &[Point3], q: &Point3, k: usize) -> Vec<(usize, f64)> {
    let q = [q.x, q.y, q.z];
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(&[p.x, p.y, p.z], &q), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all.into_iter().map(|(d, i)| (i, d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn agrees_with_brute_force() {
        let mut rng = SplitMix64::new(5);
        for n in [1, 7, 9, 100, 2000] {
            let pts: Vec<Point3> = (0..n)
                .map(|_| Point3::new(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)))
                .collect();
            let tree = KdTree::build(&pts);
            for _ in 0..200 {
                let q = Point3::new(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5));
                assert_eq!(tree.nearest(&q), brute_force_nearest(&pts, &q));
                assert_eq!(tree.knn(&q, 16), brute_force_knn(&pts, &q, 16));
            }
        }
    }

    #[test]
    fn ties_resolve_to_lower_index() {
        // A lattice with duplicated points has many equal distances.
        let mut pts = Vec::new();
        for x in 0..6 {
            for y in 0..6 {
                for z in 0..6 {
                    pts.push(Point3::new(x as f64, y as f64, z as f64));
                }
            }
        }
        pts.extend(pts.clone());
        let tree = KdTree::build(&pts);
        for q in [Point3::new(2.5, 2.5, 2.5), Point3::new(0.0, 0.0, 0.0), Point3::new(3.0, 1.5, 4.0)] {
            assert_eq!(tree.nearest(&q), brute_force_nearest(&pts, &q));
            assert_eq!(tree.knn(&q, 20), brute_force_knn(&pts, &q, 20));
        }
    }
}
