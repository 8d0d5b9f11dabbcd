use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EvalError;
use crate::affinity::{AffinityMatrix, GraphKind};

pub const KMEANS_RESTARTS: usize = 20;
const KMEANS_MAX_ITER: usize = 300;
const EIGEN_EPS: f64 = 1e-12;
const EIGEN_MAX_ITER: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralResult {
    pub labels: Vec<usize>,
    pub k: usize,
    /// Laplacian spectrum in ascending order.
    pub eigenvalues: Vec<f64>,
}

/// Relabels so ids follow first appearance.
fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// Index `k` (1-based, in `2..=k_max`) maximizing `λ_{k+1} − λ_k`; the first
/// maximum wins.
pub fn eigen_gap_k(eigenvalues: &[f64], k_max: usize) -> usize {
    let upper = k_max.min(eigenvalues.len().saturating_sub(1));
    let mut best = (2, f64::NEG_INFINITY);
    for k in 2..=upper {
        let gap = eigenvalues[k] - eigenvalues[k - 1];
        if gap > best.1 {
            best = (k, gap);
        }
    }
    best.0.min(eigenvalues.len().max(1))
}

/// Spectral clustering on `L = I − D^{-1/2} W D^{-1/2}`.
///
/// With `k` unset the cluster count comes from the eigen-gap over
/// `2..=k_max`. Rows of the first `k` eigenvectors are normalized and
/// clustered by k-means++ with [`KMEANS_RESTARTS`] seeded restarts.
pub fn spectral_baseline(
    w: &AffinityMatrix,
    k: Option<usize>,
    k_max: usize,
    seed: u64,
) -> Result<SpectralResult, EvalError> {
    if w.kind() != GraphKind::NCut {
        return Err(EvalError::Argument(
            "spectral baseline needs a nonnegative N-cut graph".into(),
        ));
    }
    let n = w.n();
    if let Some(k) = k {
        if k == 0 || k > n {
            return Err(EvalError::Argument(format!("k = {k} outside 1..={n}")));
        }
    }
    let inv_sqrt: Vec<f64> = w
        .degree_vector()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let weights = w.weights();
    let laplacian = DMatrix::from_fn(n, n, |i, j| {
        let norm = inv_sqrt[i] * weights[[i, j]] * inv_sqrt[j];
        if i == j {
            1.0 - norm
        } else {
            -norm
        }
    });
    let eigen = SymmetricEigen::try_new(laplacian, EIGEN_EPS, EIGEN_MAX_ITER)
        .ok_or(EvalError::Numeric("eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[a].total_cmp(&eigen.eigenvalues[b]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eigen.eigenvalues[i]).collect();
    let k = k.unwrap_or_else(|| eigen_gap_k(&eigenvalues, k_max));

    let mut embedding = vec![vec![0.0; k]; n];
    for (col, &idx) in order.iter().take(k).enumerate() {
        for (row, point) in embedding.iter_mut().enumerate() {
            point[col] = eigen.eigenvectors[(row, idx)];
        }
    }
    for point in &mut embedding {
        let norm = point.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            point.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let labels = kmeans(&embedding, k, KMEANS_RESTARTS, seed);
    Ok(SpectralResult {
        labels: canonical(&labels),
        k,
        eigenvalues,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let center = points[pick].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &center));
        }
        centers.push(center);
    }
    centers
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> (Vec<usize>, f64) {
    let dim = points[0].len();
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (label, p) in labels.iter_mut().zip(points) {
            let nearest = (0..centers.len())
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .expect("k >= 1");
            if *label != nearest {
                *label = nearest;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (&l, p) in labels.iter().zip(points) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for ((center, sum), &count) in centers.iter_mut().zip(sums).zip(&counts) {
            // an emptied cluster keeps its previous center
            if count > 0 {
                *center = sum.into_iter().map(|s| s / count as f64).collect();
            }
        }
    }
    let inertia = labels.iter().zip(points).map(|(&l, p)| sq_dist(p, &centers[l])).sum();
    (labels, inertia)
}

/// Best-inertia k-means over seeded k-means++ restarts.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Vec<usize> {
    if points.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..restarts.max(1) {
        let centers = kmeans_pp_init(points, k, &mut rng);
        let (labels, inertia) = lloyd(points, centers);
        if best.as_ref().is_none_or(|(_, b)| inertia < *b) {
            best = Some((labels, inertia));
        }
    }
    best.expect("at least one restart").0
}

/// Connected components over edges with `W_ij > 0`, `i != j`.
pub fn cc_components_baseline(w: &AffinityMatrix) -> Vec<usize> {
    let n = w.n();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if w.get(i, j) > 0.0 || w.get(j, i) > 0.0 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    canonical(&roots)
}
