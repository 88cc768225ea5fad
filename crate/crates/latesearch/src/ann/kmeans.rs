//! Lloyd's k-means with k-means++ initialization, used both for the coarse
//! quantizer and for the per-sub-space PQ codebooks.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KmeansResult {
    /// Row-major `k x dim` centroids.
    pub centroids: Vec<f32>,
    /// Cluster id per input row, from the final assignment pass.
    pub assignments: Vec<u32>,
    /// Within-cluster SSE recorded at each assignment pass; non-increasing.
    pub sse_history: Vec<f64>,
}

#[inline]
fn dist2(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    acc
}

fn row(data: &[f32], dim: usize, i: usize) -> &[f32] {
    &data[i * dim..(i + 1) * dim]
}

fn plusplus_init(data: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = data.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(data, dim, first));
    let mut best_dist: Vec<f64> = (0..n)
        .map(|i| dist2(row(data, dim, i), row(data, dim, first)))
        .collect();
    for _ in 1..k {
        let total: f64 = best_dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in best_dist.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // all remaining points coincide with a centroid
            rng.random_range(0..n)
        };
        let c = row(data, dim, pick).to_vec();
        for i in 0..n {
            let d = dist2(row(data, dim, i), &c);
            if d < best_dist[i] {
                best_dist[i] = d;
            }
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Cluster `data` (row-major, `dim` columns) into `k` centroids.
/// Deterministic given the seed. Empty clusters are re-seeded from the
/// farthest point of the largest cluster.
pub fn kmeans(data: &[f32], dim: usize, k: usize, iters: usize, seed: u64) -> Result<KmeansResult> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: data.len(),
        });
    }
    let n = data.len() / dim;
    if k == 0 || n < k {
        return Err(Error::InvalidConfig(format!(
            "kmeans needs at least k={k} samples, got {n}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plusplus_init(data, dim, k, &mut rng);
    let mut assignments = vec![0u32; n];
    let mut sse_history = Vec::with_capacity(iters);

    for _ in 0..iters.max(1) {
        // assignment pass; ties go to the lower cluster id
        let mut sse = 0.0f64;
        for i in 0..n {
            let p = row(data, dim, i);
            let mut best = f64::INFINITY;
            let mut best_c = 0u32;
            for c in 0..k {
                let d = dist2(p, &centroids[c * dim..(c + 1) * dim]);
                if d < best {
                    best = d;
                    best_c = c as u32;
                }
            }
            assignments[i] = best_c;
            sse += best;
        }
        sse_history.push(sse);

        // update pass
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0u64; k];
        for i in 0..n {
            let c = assignments[i] as usize;
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(data, dim, i)) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for (out, &s) in centroids[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(&sums[c * dim..(c + 1) * dim])
            {
                *out = (s / counts[c] as f64) as f32;
            }
        }

        // re-seed empty clusters from the farthest point of the largest cluster
        let mut claimed: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let largest = (0..k).max_by_key(|&l| counts[l]).unwrap();
            let farthest = (0..n)
                .filter(|&i| assignments[i] as usize == largest && !claimed.contains(&i))
                .max_by(|&a, &b| {
                    let da = dist2(row(data, dim, a), &centroids[largest * dim..(largest + 1) * dim]);
                    let db = dist2(row(data, dim, b), &centroids[largest * dim..(largest + 1) * dim]);
                    da.partial_cmp(&db).unwrap()
                });
            if let Some(i) = farthest {
                centroids[c * dim..(c + 1) * dim].copy_from_slice(row(data, dim, i));
                claimed.push(i);
                counts[c] += 1;
                counts[largest] -= 1;
            }
        }
    }

    // final assignment so callers see memberships matching the centroids
    for i in 0..n {
        let p = row(data, dim, i);
        let mut best = f64::INFINITY;
        let mut best_c = 0u32;
        for c in 0..k {
            let d = dist2(p, &centroids[c * dim..(c + 1) * dim]);
            if d < best {
                best = d;
                best_c = c as u32;
            }
        }
        assignments[i] = best_c;
    }

    Ok(KmeansResult {
        centroids,
        assignments,
        sse_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn random_data(n: usize, dim: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * dim).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn k_equals_n_reaches_zero_sse() {
        let data = random_data(16, 4, 1);
        let res = kmeans(&data, 4, 16, 10, 1).unwrap();
        assert_eq!(*res.sse_history.last().unwrap(), 0.0);
    }

    #[test]
    fn separated_blobs_are_found() {
        let mut data = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for sign in [-1.0f32, 1.0] {
            for _ in 0..50 {
                data.push(sign * 10.0 + rng.random::<f32>() * 0.5);
                data.push(rng.random::<f32>() * 0.5);
            }
        }
        let res = kmeans(&data, 2, 2, 10, 2).unwrap();
        let x0 = res.centroids[0];
        let x1 = res.centroids[2];
        assert!(x0.abs() > 9.0 && x1.abs() > 9.0);
        assert!(x0.signum() != x1.signum());
    }

    #[test]
    fn sse_is_non_increasing() {
        let data = random_data(300, 6, 3);
        let res = kmeans(&data, 6, 10, 15, 3).unwrap();
        for w in res.sse_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "SSE rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let data = random_data(100, 4, 4);
        let a = kmeans(&data, 4, 8, 10, 4).unwrap();
        let b = kmeans(&data, 4, 8, 10, 4).unwrap();
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn too_few_samples_rejected() {
        let data = random_data(3, 4, 5);
        assert!(kmeans(&data, 4, 5, 10, 5).is_err());
    }
}
