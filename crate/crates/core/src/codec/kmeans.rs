//! Lloyd's k-means with k-means++ seeding and an optional frozen zero centroid.

use rand::Rng;

use crate::linalg::matmul_nt;
use crate::util::rng_from_seed;

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn sq_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Exact nearest centroid; ties go to the lowest index.
pub(crate) fn nearest(x: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

#[derive(Clone, Copy, Debug)]
pub struct KMeansParams {
    pub k: usize,
    pub iters: usize,
    pub seed: u64,
    /// Keep centroid 0 pinned at the origin.
    pub frozen_zero: bool,
}

/// Squared distances from every point to every centroid via
/// `‖x‖² − 2x·c + ‖c‖²`. Used only for the bulk Lloyd assignment.
fn distance_table(data: &[f64], n: usize, centroids: &[f64], k: usize, dim: usize) -> Vec<f64> {
    let mut dots = vec![0.0; n * k];
    matmul_nt(data, centroids, &mut dots, n, dim, k, false);
    let cn: Vec<f64> = centroids.chunks_exact(dim).map(sq_norm).collect();
    for (i, row) in dots.chunks_exact_mut(k).enumerate() {
        let xn = sq_norm(&data[i * dim..(i + 1) * dim]);
        for (d, c) in row.iter_mut().zip(&cn) {
            *d = (xn - 2.0 * *d + c).max(0.0);
        }
    }
    dots
}

fn plus_plus_init(data: &[f64], n: usize, dim: usize, p: &KMeansParams) -> Vec<f64> {
    let mut rng = rng_from_seed(p.seed);
    let mut centroids: Vec<f64> = Vec::with_capacity(p.k * dim);
    let mut best = vec![f64::INFINITY; n];
    let add = |centroids: &mut Vec<f64>, c: &[f64], best: &mut Vec<f64>| {
        centroids.extend_from_slice(c);
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(&data[i * dim..(i + 1) * dim], c));
        }
    };
    if p.frozen_zero {
        add(&mut centroids, &vec![0.0; dim], &mut best);
    } else {
        let i = rng.gen_range(0..n);
        add(&mut centroids, &data[i * dim..(i + 1) * dim], &mut best);
    }
    while centroids.len() < p.k * dim {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &b) in best.iter().enumerate() {
                if u < b {
                    chosen = i;
                    break;
                }
                u -= b;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = data[pick * dim..(pick + 1) * dim].to_vec();
        add(&mut centroids, &c, &mut best);
    }
    centroids
}

/// Clusters `n` points of dimension `dim` (row-major in `data`) into `k`
/// centroids. Deterministic for a given seed.
pub fn kmeans(data: &[f64], dim: usize, p: &KMeansParams) -> Vec<f64> {
    let n = data.len() / dim;
    assert!(n >= p.k && p.k >= 1, "need at least k points");
    let mut centroids = plus_plus_init(data, n, dim, p);
    let first_free = usize::from(p.frozen_zero);
    let mut assign = vec![0usize; n];
    for _ in 0..p.iters {
        let table = distance_table(data, n, &centroids, p.k, dim);
        let mut changed = false;
        let mut far = Vec::with_capacity(n);
        for (i, row) in table.chunks_exact(p.k).enumerate() {
            let (j, d) = row
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |b, (j, &d)| if d < b.1 { (j, d) } else { b });
            changed |= assign[i] != j;
            assign[i] = j;
            far.push((d, i));
        }
        let mut sums = vec![0.0; p.k * dim];
        let mut counts = vec![0usize; p.k];
        for (i, &j) in assign.iter().enumerate() {
            counts[j] += 1;
            sums[j * dim..(j + 1) * dim]
                .iter_mut()
                .zip(&data[i * dim..(i + 1) * dim])
                .for_each(|(s, x)| *s += x);
        }
        // Empty clusters take the worst-served points, farthest first.
        far.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut donors = far.into_iter().map(|(_, i)| i);
        for j in first_free..p.k {
            let c = &mut centroids[j * dim..(j + 1) * dim];
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                c.iter_mut()
                    .zip(&sums[j * dim..(j + 1) * dim])
                    .for_each(|(c, s)| *c = s * inv);
            } else if let Some(i) = donors.next() {
                c.copy_from_slice(&data[i * dim..(i + 1) * dim]);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    centroids
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(k: usize, per: usize, spread: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = rng_from_seed(seed);
        let centers: Vec<f64> = (0..k * 3).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let noise = Normal::new(0.0, spread).unwrap();
        let mut data = Vec::new();
        for _ in 0..per {
            for c in centers.chunks_exact(3) {
                data.extend(c.iter().map(|x| x + noise.sample(&mut rng)));
            }
        }
        (data, centers)
    }

    fn quantization_error(data: &[f64], centroids: &[f64], dim: usize) -> f64 {
        data.chunks_exact(dim).map(|x| nearest(x, centroids, dim).1).sum::<f64>() / (data.len() / dim) as f64
    }

    #[test]
    fn separable_clusters_error_shrinks_with_iters() {
        let (data, _) = blobs(6, 50, 0.01, 1);
        let errs: Vec<f64> = [0, 2, 30]
            .iter()
            .map(|&iters| {
                let c = kmeans(&data, 3, &KMeansParams { k: 6, iters, seed: 5, frozen_zero: false });
                quantization_error(&data, &c, 3)
            })
            .collect();
        assert!(errs[2] <= errs[0]);
        assert!(errs[2] < 1e-3, "{errs:?}");
    }

    #[test]
    fn frozen_zero_stays_zero_and_is_deterministic() {
        let (data, _) = blobs(4, 40, 0.5, 2);
        let p = KMeansParams { k: 5, iters: 10, seed: 9, frozen_zero: true };
        let a = kmeans(&data, 3, &p);
        assert!(a[..3].iter().all(|&v| v == 0.0));
        assert_eq!(a, kmeans(&data, 3, &p));
    }

    #[test]
    fn nearest_breaks_ties_low() {
        let c = vec![1.0, 0.0, -1.0, 0.0, 1.0, 0.0];
        assert_eq!(nearest(&[0.0, 0.0], &c, 2).0, 0);
    }
}
