use rayon::prelude::*;

use super::{Descriptor, FeatureError, Match};

/// Brute-force matching with Lowe's ratio test and a mutual-best cross-check.
///
/// A descriptor `a[i]` is matched to its nearest neighbour `b[j]` iff
/// `d1 / d2 < ratio` (nearest over second-nearest distance) and `a[i]` is in
/// turn the nearest neighbour of `b[j]` among all of `a`. Output is sorted by
/// `index_a`.
pub fn match_descriptors(a: &[Descriptor], b: &[Descriptor], ratio: f32) -> Result<Vec<Match>, FeatureError> {
    if a.is_empty() || b.is_empty() {
        return Err(FeatureError::EmptyInput);
    }
    // One distance table serves both directions; squared distance is
    // exactly symmetric, so this equals matching each way separately.
    let m = b.len();
    let mut table = vec![0f32; a.len() * m];
    table.par_chunks_mut(m).zip(a.par_iter()).for_each(|(row, d)| {
        for (cell, e) in row.iter_mut().zip(b) {
            *cell = d.distance_squared(e);
        }
    });
    let forward: Vec<(usize, f32, f32)> = table.par_chunks(m).map(|row| two_nearest(row.iter().copied())).collect();
    // Nearest `a` for each `b`, scanning rows in order so ties keep the
    // lower index.
    let mut backward = vec![(usize::MAX, f32::INFINITY); m];
    for (i, row) in table.chunks(m).enumerate() {
        for (best, &dist) in backward.iter_mut().zip(row) {
            if dist < best.1 {
                *best = (i, dist);
            }
        }
    }
    let ratio2 = ratio * ratio;
    let matches = forward
        .iter()
        .enumerate()
        .filter_map(|(i, &(j, d1, d2))| {
            // Squared distances: d1/d2 < r  <=>  d1² < r² d2².
            let passes_ratio = d1 < ratio2 * d2;
            (passes_ratio && backward[j].0 == i).then(|| Match {
                index_a: i,
                index_b: j,
                distance: d1.sqrt(),
            })
        })
        .collect();
    Ok(matches)
}

/// Index of the smallest distance and the smallest and second-smallest
/// values. Ties resolve to the lower index.
fn two_nearest(dists: impl Iterator<Item = f32>) -> (usize, f32, f32) {
    let mut best = (usize::MAX, f32::INFINITY);
    let mut second = f32::INFINITY;
    for (j, dist) in dists.enumerate() {
        if dist < best.1 {
            second = best.1;
            best = (j, dist);
        } else if dist < second {
            second = dist;
        }
    }
    (best.0, best.1, second)
}
