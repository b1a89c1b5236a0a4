//! Lloyd's k-means with k-means++ seeding, used to initialise memberships.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::rng;

const MAX_ITERS: usize = 100;

/// Outcome of clustering `n` points of dimension `dim` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansLabels {
    pub labels: Vec<usize>,
    /// True when there were fewer distinct points than clusters and the
    /// labels are a random balanced assignment instead.
    pub fallback: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distinct_points(points: &[f64], dim: usize, cap: usize) -> usize {
    let mut seen: Vec<&[f64]> = Vec::new();
    for p in points.chunks_exact(dim) {
        if !seen.iter().any(|s| s.iter().zip(p).all(|(a, b)| a.to_bits() == b.to_bits())) {
            seen.push(p);
            if seen.len() >= cap {
                break;
            }
        }
    }
    seen.len()
}

fn balanced_labels(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut rng::from_seed(seed));
    labels
}

pub fn kmeans(points: &[f64], dim: usize, k: usize, seed: u64) -> KMeansLabels {
    let n = points.len() / dim;
    assert!(k >= 1 && n >= k, "need at least k points");
    if k == 1 {
        return KMeansLabels { labels: vec![0; n], fallback: false };
    }
    if distinct_points(points, dim, k) < k {
        return KMeansLabels { labels: balanced_labels(n, k, seed), fallback: true };
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = rng::from_seed(seed);

    // k-means++ seeding
    let mut centers: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.extend_from_slice(row(pick));
        let c = &centers[centers.len() - dim..];
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), c));
        }
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (best, dist) = (0..k)
                .map(|c| (c, sq_dist(row(i), &centers[c * dim..(c + 1) * dim])))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
            dists[i] = dist;
        }
        // reseed empty clusters with the points farthest from their centre
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]))
                    .expect("n >= k");
                counts[labels[far]] -= 1;
                labels[far] = c;
                counts[c] = 1;
                dists[far] = 0.0;
                changed = true;
            }
        }
        centers.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let c = labels[i];
            for (acc, v) in centers[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *acc += v;
            }
        }
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            centers[c * dim..(c + 1) * dim].iter_mut().for_each(|v| *v *= inv);
        }
        if !changed {
            break;
        }
    }
    KMeansLabels { labels, fallback: false }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_two_groups() {
        let mut pts = Vec::new();
        for i in 0..20 {
            let m = if i < 10 { -5.0 } else { 5.0 };
            pts.extend([m + 0.01 * i as f64, m]);
        }
        let res = kmeans(&pts, 2, 2, 3);
        assert!(!res.fallback);
        assert!(res.labels[..10].iter().all(|&l| l == res.labels[0]));
        assert!(res.labels[10..].iter().all(|&l| l == res.labels[10]));
        assert_ne!(res.labels[0], res.labels[10]);
    }

    #[test]
    fn degenerate_input_falls_back() {
        let pts = vec![1.0; 12];
        let res = kmeans(&pts, 2, 3, 1);
        assert!(res.fallback);
        for c in 0..3 {
            assert_eq!(res.labels.iter().filter(|&&l| l == c).count(), 2);
        }
    }

    #[test]
    fn every_cluster_nonempty() {
        let pts: Vec<f64> = (0..30).map(|i| (i % 7) as f64).collect();
        let res = kmeans(&pts, 1, 5, 9);
        for c in 0..5 {
            assert!(res.labels.contains(&c));
        }
    }
}
