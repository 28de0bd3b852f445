use crate::error::{Error, Result};
use crate::kernel::RngState;

pub const KMEANS_ITERATIONS: usize = 50;

/// Lloyd's k-means with k-means++ seeding and a fixed iteration count.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KMeans {
    pub fn fit(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Input("k-means over no points".into()));
        }
        if k == 0 {
            return Err(Error::Input("k-means needs k >= 1".into()));
        }
        let mut rng = RngState::derived(seed, "kmeans");
        let mut centroids = vec![points[rng.range_inclusive(0, points.len() - 1)].clone()];
        while centroids.len() < k {
            let d: Vec<f64> = points
                .iter()
                .map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d.iter().sum();
            if total == 0.0 {
                // Fewer distinct points than clusters: duplicate an existing one.
                centroids.push(centroids[centroids.len() - 1].clone());
                continue;
            }
            let mut target = rng.uniform() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            centroids.push(points[pick].clone());
        }
        let mut model = Self { centroids };
        let dim = points[0].len();
        for _ in 0..KMEANS_ITERATIONS {
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for p in points {
                let c = model.assign(p);
                counts[c] += 1;
                sums[c].iter_mut().zip(p).for_each(|(s, v)| *s += v);
            }
            for (c, (sum, &n)) in sums.into_iter().zip(&counts).enumerate() {
                if n > 0 {
                    model.centroids[c] = sum.into_iter().map(|s| s / n as f64).collect();
                }
            }
        }
        Ok(model)
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Index of the nearest centroid (lowest index on ties).
    pub fn assign(&self, p: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centroids.iter().enumerate() {
            let d = sq_dist(p, c);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_two_blobs() {
        let mut rng = RngState::new(1);
        let mut pts = Vec::new();
        for i in 0..40 {
            let c = if i % 2 == 0 { -5.0 } else { 5.0 };
            pts.push(vec![c + 0.1 * rng.normal(), c + 0.1 * rng.normal()]);
        }
        let km = KMeans::fit(&pts, 2, 0).unwrap();
        assert_ne!(km.assign(&[-5.0, -5.0]), km.assign(&[5.0, 5.0]));
        assert_eq!(km, KMeans::fit(&pts, 2, 0).unwrap());
    }

    #[test]
    fn more_clusters_than_distinct_points() {
        let pts = vec![vec![1.0]; 5];
        let km = KMeans::fit(&pts, 3, 0).unwrap();
        assert_eq!(km.k(), 3);
        assert!(KMeans::fit(&[], 2, 0).is_err());
    }
}
