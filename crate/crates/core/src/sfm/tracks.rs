use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{SfmParams, Track};
use crate::features::{match_descriptors, ransac_fundamental, RansacParams};
use crate::keyframing::Keyframe;

/// RANSAC-verified matches between keyframes `a < b` (cluster-local indices).
#[derive(Debug, Clone, PartialEq)]
pub struct PairMatches {
    pub a: usize,
    pub b: usize,
    /// `(keypoint in a, keypoint in b)`.
    pub matches: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    pub tracks: Vec<Track>,
    pub pairs: Vec<PairMatches>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // The smaller root wins so the result does not depend on merge order.
        if ra < rb {
            self.parent[rb] = ra;
        } else if rb < ra {
            self.parent[ra] = rb;
        }
    }
}

/// Chain pairwise matches into tracks with union-find. `keypoint_counts[k]`
/// is the number of keypoints of keyframe `k`. Components with two
/// keypoints in one keyframe are inconsistent and dropped. Tracks are
/// ordered by their first observation; colors are left black.
pub fn chain_matches(keypoint_counts: &[usize], pairs: &[PairMatches]) -> Vec<Track> {
    let mut offsets = Vec::with_capacity(keypoint_counts.len() + 1);
    let mut total = 0;
    for &c in keypoint_counts {
        offsets.push(total);
        total += c;
    }
    offsets.push(total);
    let mut uf = UnionFind::new(total);
    for p in pairs {
        for &(ka, kb) in &p.matches {
            uf.union(offsets[p.a] + ka, offsets[p.b] + kb);
        }
    }
    let mut components: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    let mut seen = vec![false; total];
    for p in pairs {
        for &(ka, kb) in &p.matches {
            for (kf, kp) in [(p.a, ka), (p.b, kb)] {
                let node = offsets[kf] + kp;
                if !std::mem::replace(&mut seen[node], true) {
                    components.entry(uf.find(node)).or_default().push((kf, kp));
                }
            }
        }
    }
    components
        .into_values()
        .filter_map(|mut obs| {
            obs.sort_unstable();
            let consistent = obs.windows(2).all(|w| w[0].0 != w[1].0);
            (consistent && obs.len() >= 2).then(|| Track {
                observations: obs,
                point: None,
                color: [0, 0, 0],
            })
        })
        .collect()
}

/// Match every keyframe against its `window` successors, keep the RANSAC
/// inliers, and chain them into tracks. Track colors average the keyframe
/// colors under each observation.
pub fn build_tracks(keyframes: &[Keyframe], params: &SfmParams) -> TrackSet {
    let n = keyframes.len();
    let jobs: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (a + 1..=(a + params.window).min(n.saturating_sub(1))).map(move |b| (a, b)))
        .collect();
    let ransac = RansacParams {
        epsilon_px: params.ransac_epsilon_px,
        seed: params.seed,
        ..Default::default()
    };
    let pairs: Vec<PairMatches> = jobs
        .par_iter()
        .map(|&(a, b)| {
            let (fa, fb) = (&keyframes[a].features, &keyframes[b].features);
            let matches = match_descriptors(&fa.descriptors, &fb.descriptors, params.ratio_test)
                .ok()
                .and_then(|m| {
                    let r = ransac_fundamental(&m, &fa.keypoints, &fb.keypoints, &ransac).ok()?;
                    Some(
                        m.iter()
                            .zip(&r.inliers)
                            .filter(|(_, &inl)| inl)
                            .map(|(m, _)| (m.index_a, m.index_b))
                            .collect(),
                    )
                })
                .unwrap_or_default();
            PairMatches { a, b, matches }
        })
        .collect();
    let counts: Vec<usize> = keyframes.iter().map(|k| k.features.len()).collect();
    let mut tracks = chain_matches(&counts, &pairs);
    for t in &mut tracks {
        let mut sum = [0u32; 3];
        for &(kf, kp) in &t.observations {
            let c = keyframes[kf].colors[kp];
            for ch in 0..3 {
                sum[ch] += c[ch] as u32;
            }
        }
        let n = t.observations.len() as u32;
        t.color = sum.map(|s| ((s + n / 2) / n) as u8);
    }
    log::debug!("{} keyframes, {} pairs, {} tracks", n, pairs.len(), tracks.len());
    TrackSet { tracks, pairs }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_keyframes_give_two_view_tracks() {
        let pairs = vec![PairMatches {
            a: 0,
            b: 1,
            matches: (0..100).map(|i| (i, 99 - i)).collect(),
        }];
        let tracks = chain_matches(&[100, 100], &pairs);
        assert_eq!(tracks.len(), 100);
        assert!(tracks.iter().all(|t| t.observations.len() == 2));
    }

    #[test]
    fn transitive_chain() {
        let pairs = vec![
            PairMatches {
                a: 0,
                b: 1,
                matches: vec![(3, 5)],
            },
            PairMatches {
                a: 1,
                b: 2,
                matches: vec![(5, 7)],
            },
        ];
        let tracks = chain_matches(&[10, 10, 10], &pairs);
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].observations, vec![(0, 3), (1, 5), (2, 7)]);
    }

    #[test]
    fn inconsistent_chain_is_dropped() {
        // 0:1 -> 1:2 -> 2:4 and 0:1 -> 2:5 puts two keypoints of frame 2 in
        // one component.
        let pairs = vec![
            PairMatches {
                a: 0,
                b: 1,
                matches: vec![(1, 2), (6, 6)],
            },
            PairMatches {
                a: 1,
                b: 2,
                matches: vec![(2, 4)],
            },
            PairMatches {
                a: 0,
                b: 2,
                matches: vec![(1, 5)],
            },
        ];
        let tracks = chain_matches(&[10, 10, 10], &pairs);
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].observations, vec![(0, 6), (1, 6)]);
    }
}
