//! Seeded k-means (k-means++ seeding, Lloyd iterations) on feature rows.

use rand::Rng;

use crate::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    /// Index of the nearest centroid for every input point.
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroids.
    pub inertia: f64,
    /// Inertia after every assignment pass, first to last.
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Member indices of every cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (i, &c) in self.assignments.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by Euclidean distance; ties go to the lowest index.
pub fn nearest_centroid(model: &ClusterModel, point: &[f64]) -> usize {
    nearest(&model.centroids, point).0
}

fn nearest(centroids: &[Vec<f64>], point: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (a, p) in assignments.iter_mut().zip(points) {
        let (j, d) = nearest(centroids, p);
        *a = j;
        inertia += d;
    }
    inertia
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut crate::Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if r < d {
                        break;
                    }
                    r -= d;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            // every point coincides with a chosen seed
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (dd, p) in d2.iter_mut().zip(points) {
            *dd = dd.min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

pub fn kmeans_fit(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<ClusterModel> {
    let n = points.len();
    if k == 0 {
        return Err(Error::invalid("k-means needs k >= 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("k-means with k = {k} > {n} points")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("k-means points have mixed dimensions"));
    }
    let mut rng = crate::rng(seed);
    let mut centroids = plus_plus_seeds(points, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut inertia = assign(points, &centroids, &mut assignments);
    let mut inertia_history = vec![inertia];

    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut next: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .zip(&centroids)
            .map(|((s, &c), old)| {
                if c == 0 {
                    old.clone()
                } else {
                    s.into_iter().map(|v| v / c as f64).collect()
                }
            })
            .collect();

        // Empty clusters take the point farthest from its own centroid.
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| !taken[i] && counts[assignments[i]] > 1)
                .map(|i| (i, sq_dist(&points[i], &next[assignments[i]])))
                .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                });
            if let Some((i, _)) = far {
                taken[i] = true;
                counts[assignments[i]] -= 1;
                counts[j] = 1;
                assignments[i] = j;
                next[j] = points[i].clone();
            }
        }

        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        inertia = assign(points, &centroids, &mut assignments);
        inertia_history.push(inertia);
        if shift < tol {
            break;
        }
    }

    Ok(ClusterModel {
        centroids,
        assignments,
        inertia,
        inertia_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> Vec<Vec<f64>> {
        let mut rng = crate::rng(5);
        let mut pts = Vec::new();
        for center in [0.0, 100.0] {
            for _ in 0..20 {
                pts.push(vec![center + rng.gen_range(-1.0..1.0), center + rng.gen_range(-1.0..1.0)]);
            }
        }
        pts
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = vec![vec![0.0, 0.0], vec![2.0, 4.0], vec![4.0, 2.0]];
        let m = kmeans_fit(&pts, 1, 0, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert!((m.centroids[0][0] - 2.0).abs() < 1e-12);
        assert!((m.centroids[0][1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn separates_two_blobs() {
        let pts = blobs();
        let m = kmeans_fit(&pts, 2, 11, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        let first = m.assignments[0];
        assert!(m.assignments[..20].iter().all(|&a| a == first));
        assert!(m.assignments[20..].iter().all(|&a| a != first));
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let pts = blobs();
        let m = kmeans_fit(&pts, pts.len(), 2, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert_eq!(m.inertia, 0.0);
    }

    #[test]
    fn invalid_k() {
        let pts = blobs();
        assert!(kmeans_fit(&pts, 0, 0, 10, 1e-6).is_err());
        assert!(kmeans_fit(&pts, 41, 0, 10, 1e-6).is_err());
    }

    #[test]
    fn nearest_centroid_ties_and_exact_hits() {
        let model = ClusterModel {
            centroids: vec![vec![-1.0, 0.0], vec![1.0, 0.0], vec![5.0, 5.0]],
            assignments: vec![],
            inertia: 0.0,
            inertia_history: vec![],
        };
        assert_eq!(nearest_centroid(&model, &[5.0, 5.0]), 2);
        assert_eq!(nearest_centroid(&model, &[0.0, 3.0]), 0);
    }

    #[test]
    fn duplicate_points_do_not_break_seeding() {
        let pts = vec![vec![1.0]; 5];
        let m = kmeans_fit(&pts, 3, 0, 10, 1e-6).unwrap();
        assert_eq!(m.k(), 3);
        assert_eq!(m.inertia, 0.0);
    }
}
