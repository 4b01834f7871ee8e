//! Balanced K-means: every cluster receives exactly `|V| / K` points.
//!
//! Each sweep starts with every point unassigned and visits clusters in
//! fixed order. Cluster `k` takes the `w` unassigned points nearest to its
//! centroid (ties by point index), recomputes its centroid as their mean,
//! and removes them from the pool. Sweeps repeat until the assignment stops
//! changing. Later clusters see the centroids of earlier clusters only
//! through which points are left; their own centroid is the one from the
//! previous sweep (or the initial sample) until their turn.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BalancedKMeans {
    /// `k` centroids, each of the input dimension.
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index of every input point.
    pub assignment: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

impl BalancedKMeans {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Clusters `points` into `k` equal-size groups. When `|points|` is not a
/// multiple of `k`, the last cluster absorbs the remainder.
pub fn balanced_kmeans<P, R>(points: &[P], k: usize, max_iters: usize, rng: &mut R) -> Result<BalancedKMeans>
where
    P: AsRef<[f64]>,
    R: Rng + ?Sized,
{
    let n = points.len();
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Argument(format!("k = {k} exceeds the number of points ({n})")));
    }
    let dim = points[0].as_ref().len();
    if points.iter().any(|p| p.as_ref().len() != dim) {
        return Err(Error::Dimension("points have differing dimensions".into()));
    }
    let w = n / k;

    let mut centroids: Vec<Vec<f64>> = sample(rng, n, k).into_iter().map(|i| points[i].as_ref().to_vec()).collect();
    let mut assignment = vec![usize::MAX; n];
    let mut iterations = 0;
    let mut converged = false;
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut remaining: Vec<usize> = Vec::with_capacity(n);

    while iterations < max_iters {
        iterations += 1;
        let mut next = vec![usize::MAX; n];
        remaining.clear();
        remaining.extend(0..n);
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let take = if c == k - 1 { remaining.len() } else { w };
            keyed.clear();
            keyed.extend(remaining.iter().map(|&i| (squared_distance(points[i].as_ref(), centroid), i)));
            if take < keyed.len() {
                keyed.select_nth_unstable_by(take, by_distance_then_index);
            }
            let mut members: Vec<usize> = keyed[..take].iter().map(|&(_, i)| i).collect();
            members.sort_unstable();
            let mut mean = vec![0.0; dim];
            for &i in &members {
                next[i] = c;
                for (m, &v) in mean.iter_mut().zip(points[i].as_ref()) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= take as f64);
            *centroid = mean;
            remaining.clear();
            remaining.extend(keyed[take..].iter().map(|&(_, i)| i));
        }
        let unchanged = next == assignment;
        assignment = next;
        if unchanged {
            converged = true;
            break;
        }
    }
    Ok(BalancedKMeans { centroids, assignment, iterations, converged })
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}
