//! Clustering objectives.
//!
//! Two families live here: the differentiable relaxations optimized by the
//! network (soft N-cut with an orthogonality regularizer, and correlation
//! clustering), and their discrete counterparts evaluated on hard partitions,
//! together with exhaustive minimizers used as test oracles.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affinity::{AffinityMatrix, GraphKind};

/// Largest graph the exhaustive oracles accept by default.
pub const DEFAULT_N_MAX: usize = 10;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("expected a {expected:?} graph, got {actual:?}")]
    KindMismatch {
        expected: GraphKind,
        actual: GraphKind,
    },
    #[error("assignment has {rows} rows but the graph has {n} nodes")]
    Shape { rows: usize, n: usize },
    #[error("N-cut denominator Tr(S^T D S) = {0} is degenerate")]
    DegenerateDenominator(f64),
    #[error("cluster {cluster} has non-positive association")]
    DegeneratePartition { cluster: usize },
    #[error("graph with {n} nodes exceeds exhaustive search limit {n_max}")]
    TooLarge { n: usize, n_max: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Sign convention for the association ratio of the N-cut loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NcutSign {
    /// `-Tr(SᵀWS)/Tr(SᵀDS)`: rewards association within clusters.
    #[default]
    Default,
    /// `+Tr(SᵀWS)/Tr(SᵀDS)` exactly as the formula is usually printed.
    Literal,
}

/// Loss value together with its gradient with respect to `S`.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grad: Array2<f64>,
}

fn check_rows(s: &ArrayView2<'_, f64>, w: &AffinityMatrix) -> Result<(), ObjectiveError> {
    if s.nrows() != w.n() {
        return Err(ObjectiveError::Shape {
            rows: s.nrows(),
            n: w.n(),
        });
    }
    Ok(())
}

/// Relaxed N-cut with the orthogonality regularizer
/// `|| SᵀS/||SᵀS||_F - I_K/sqrt(K) ||_F`.
pub fn ncut_loss(
    s: ArrayView2<'_, f64>,
    w: &AffinityMatrix,
    sign: NcutSign,
) -> Result<LossValue, ObjectiveError> {
    if w.kind() != GraphKind::NCut {
        return Err(ObjectiveError::KindMismatch {
            expected: GraphKind::NCut,
            actual: w.kind(),
        });
    }
    check_rows(&s, w)?;
    let weights = w.weights();
    let degree = w.degree_vector();

    let ws = weights.dot(&s);
    let wts = weights.t().dot(&s);
    let ds = &s * &degree.view().insert_axis(Axis(1));
    let num = (&s * &ws).sum();
    let den = (&s * &ds).sum();
    if !(den > 1e-12) {
        return Err(ObjectiveError::DegenerateDenominator(den));
    }
    let ratio = num / den;
    // d(num/den) = ((W + Wᵀ)S den - num 2DS) / den²
    let d_ratio = ((&ws + &wts) * den - &ds * (2.0 * num)) / (den * den);
    let sign_factor = match sign {
        NcutSign::Default => -1.0,
        NcutSign::Literal => 1.0,
    };
    let mut grad = d_ratio * sign_factor;

    let k = s.ncols();
    let gram = s.t().dot(&s);
    let gram_norm = frobenius(&gram);
    if gram_norm == 0.0 {
        return Err(ObjectiveError::DegenerateDenominator(0.0));
    }
    let target = Array2::<f64>::eye(k) / (k as f64).sqrt();
    let diff = &gram / gram_norm - &target;
    let ortho = frobenius(&diff);
    if ortho > 0.0 {
        let unit = &diff / ortho;
        let inner = (&unit * &gram).sum();
        let d_gram = &unit / gram_norm - &gram * (inner / gram_norm.powi(3));
        grad += &s.dot(&(&d_gram + &d_gram.t()));
    }

    Ok(LossValue {
        value: sign_factor * ratio + ortho,
        grad,
    })
}

/// Correlation-clustering loss `-Tr(W S Sᵀ)` with gradient `-(W + Wᵀ) S`.
pub fn cc_loss(s: ArrayView2<'_, f64>, w: &AffinityMatrix) -> Result<LossValue, ObjectiveError> {
    check_rows(&s, w)?;
    let weights = w.weights();
    let ws = weights.dot(&s);
    let value = -(&s * &ws).sum();
    let grad = -(ws + weights.t().dot(&s));
    Ok(LossValue { value, grad })
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Hard partition of `n` nodes into labels `0..k` (labels may be unused).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Partition {
    pub labels: Vec<usize>,
    pub k: usize,
}

impl Partition {
    pub fn from_labels(labels: Vec<usize>) -> Self {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        Self { labels, k }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Relabels clusters in order of first appearance (restricted growth form).
    pub fn canonical(&self) -> Self {
        let mut map = vec![usize::MAX; self.k];
        let mut next = 0;
        let labels = self
            .labels
            .iter()
            .map(|&l| {
                if map[l] == usize::MAX {
                    map[l] = next;
                    next += 1;
                }
                map[l]
            })
            .collect();
        Self { labels, k: next }
    }

    /// Number of non-empty clusters.
    pub fn n_clusters(&self) -> usize {
        crate::mask::count_distinct(&self.labels)
    }

    /// `n x k` indicator matrix.
    pub fn one_hot(&self) -> Array2<f64> {
        let mut s = Array2::zeros((self.n(), self.k));
        for (i, &l) in self.labels.iter().enumerate() {
            s[[i, l]] = 1.0;
        }
        s
    }
}

/// K-way normalized cut `Σ_c cut(A_c, V∖A_c) / assoc(A_c, V)`; empty
/// clusters contribute nothing.
pub fn discrete_ncut(p: &Partition, w: &AffinityMatrix) -> Result<f64, ObjectiveError> {
    if w.kind() != GraphKind::NCut {
        return Err(ObjectiveError::KindMismatch {
            expected: GraphKind::NCut,
            actual: w.kind(),
        });
    }
    if p.n() != w.n() {
        return Err(ObjectiveError::Shape { rows: p.n(), n: w.n() });
    }
    let mut assoc = vec![0.0; p.k];
    let mut within = vec![0.0; p.k];
    let mut members = vec![0usize; p.k];
    for i in 0..p.n() {
        let li = p.labels[i];
        members[li] += 1;
        assoc[li] += w.degree_vector()[i];
        for j in 0..p.n() {
            if p.labels[j] == li {
                within[li] += w.get(i, j);
            }
        }
    }
    let mut total = 0.0;
    for c in 0..p.k {
        if members[c] == 0 {
            continue;
        }
        if !(assoc[c] > 0.0) {
            return Err(ObjectiveError::DegeneratePartition { cluster: c });
        }
        total += (assoc[c] - within[c]) / assoc[c];
    }
    Ok(total)
}

/// `-Σ W_ij` over ordered same-cluster pairs, diagonal included.
pub fn discrete_cc(p: &Partition, w: &AffinityMatrix) -> Result<f64, ObjectiveError> {
    if p.n() != w.n() {
        return Err(ObjectiveError::Shape { rows: p.n(), n: w.n() });
    }
    let mut total = 0.0;
    for i in 0..p.n() {
        for j in 0..p.n() {
            if p.labels[i] == p.labels[j] {
                total += w.get(i, j);
            }
        }
    }
    Ok(-total)
}

/// Best-so-far bookkeeping shared by the exhaustive searches.
///
/// Candidates arrive in lexicographic restricted-growth order, so among equal
/// values the first one seen is already the lexicographically smallest; only
/// a strictly better value or fewer clusters replaces the incumbent.
struct Incumbent {
    value: f64,
    blocks: usize,
    labels: Vec<usize>,
}

impl Incumbent {
    fn offer(best: &mut Option<Self>, value: f64, blocks: usize, labels: &[usize]) {
        let replace = match best {
            None => true,
            Some(b) => {
                let tol = 1e-12 * b.value.abs().max(1.0);
                value < b.value - tol || (value <= b.value + tol && blocks < b.blocks)
            }
        };
        if replace {
            *best = Some(Self {
                value,
                blocks,
                labels: labels.to_vec(),
            });
        }
    }
}

fn check_size(w: &AffinityMatrix, n_max: usize) -> Result<(), ObjectiveError> {
    if w.n() > n_max {
        return Err(ObjectiveError::TooLarge { n: w.n(), n_max });
    }
    if w.n() == 0 {
        return Err(ObjectiveError::Argument("graph is empty".into()));
    }
    Ok(())
}

/// Exact correlation-clustering minimizer over all set partitions.
///
/// Ties are broken by fewer clusters, then by the lexicographically smallest
/// canonical labeling.
pub fn brute_force_cc(w: &AffinityMatrix, n_max: usize) -> Result<Partition, ObjectiveError> {
    check_size(w, n_max)?;
    let n = w.n();
    let mut labels = vec![0usize; n];
    let mut best = None;
    cc_search(w, 0, 0, 0.0, &mut labels, &mut best);
    let best = best.expect("at least one partition exists");
    Ok(Partition {
        labels: best.labels,
        k: best.blocks,
    })
}

/// Depth-first placement of node `i` into an existing block or a new one,
/// accumulating the objective incrementally.
fn cc_search(
    w: &AffinityMatrix,
    i: usize,
    blocks: usize,
    cost: f64,
    labels: &mut [usize],
    best: &mut Option<Incumbent>,
) {
    let n = labels.len();
    if i == n {
        Incumbent::offer(best, cost, blocks, labels);
        return;
    }
    for b in 0..=blocks {
        let mut delta = w.get(i, i);
        for (j, &lj) in labels.iter().enumerate().take(i) {
            if lj == b {
                delta += w.get(i, j) + w.get(j, i);
            }
        }
        labels[i] = b;
        cc_search(w, i + 1, blocks.max(b + 1), cost - delta, labels, best);
    }
}

/// Exact N-cut minimizer over all partitions with exactly `k` non-empty
/// clusters (equivalently all surjective labelings, up to relabeling).
pub fn brute_force_ncut(
    w: &AffinityMatrix,
    k: usize,
    n_max: usize,
) -> Result<Partition, ObjectiveError> {
    check_size(w, n_max)?;
    if k == 0 || k > w.n() {
        return Err(ObjectiveError::Argument(format!(
            "k = {k} is not in 1..={}",
            w.n()
        )));
    }
    let mut labels = vec![0usize; w.n()];
    let mut best = None;
    let mut err = None;
    ncut_search(w, k, 0, 0, &mut labels, &mut best, &mut err);
    if let Some(e) = err {
        return Err(e);
    }
    let best = best.expect("k <= n guarantees a surjective labeling");
    Ok(Partition {
        labels: best.labels,
        k,
    })
}

fn ncut_search(
    w: &AffinityMatrix,
    k: usize,
    i: usize,
    blocks: usize,
    labels: &mut [usize],
    best: &mut Option<Incumbent>,
    err: &mut Option<ObjectiveError>,
) {
    let n = labels.len();
    if err.is_some() || blocks + (n - i) < k {
        return;
    }
    if i == n {
        let p = Partition {
            labels: labels.to_vec(),
            k,
        };
        match discrete_ncut(&p, w) {
            Ok(value) => Incumbent::offer(best, value, blocks, labels),
            Err(e) => *err = Some(e),
        }
        return;
    }
    for b in 0..=blocks.min(k - 1) {
        labels[i] = b;
        ncut_search(w, k, i + 1, blocks.max(b + 1), labels, best, err);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graph(w: Array2<f64>, kind: GraphKind) -> AffinityMatrix {
        AffinityMatrix::from_weights(w, kind)
    }

    fn random_symmetric(n: usize, lo: f64, hi: f64, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let v = rng.random_range(lo..hi);
                m[[i, j]] = v;
                m[[j, i]] = v;
            }
        }
        m
    }

    fn random_assignment(n: usize, k: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Array2::from_shape_simple_fn((n, k), || rng.random_range(0.05..1.0));
        for mut row in s.rows_mut() {
            let sum = row.sum();
            row /= sum;
        }
        s
    }

    fn two_cliques() -> AffinityMatrix {
        graph(
            array![
                [1.0, 1.0, 0.0, 0.0],
                [1.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 1.0],
                [0.0, 0.0, 1.0, 1.0]
            ],
            GraphKind::NCut,
        )
    }

    fn check_gradient<F: Fn(&Array2<f64>) -> LossValue>(s: &Array2<f64>, f: F, tol: f64) {
        let analytic = f(s).grad;
        let eps = 1e-6;
        for idx in ndarray::indices(s.dim()) {
            let mut plus = s.clone();
            plus[idx] += eps;
            let mut minus = s.clone();
            minus[idx] -= eps;
            let fd = (f(&plus).value - f(&minus).value) / (2.0 * eps);
            let an = analytic[idx];
            let scale = fd.abs().max(an.abs()).max(1e-2);
            assert!((fd - an).abs() <= tol * scale, "{idx:?}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn ncut_perfect_partition() {
        let s = Partition::from_labels(vec![0, 0, 1, 1]).one_hot();
        let loss = ncut_loss(s.view(), &two_cliques(), NcutSign::Default).unwrap();
        assert!((loss.value + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ncut_uniform_assignment() {
        let w = graph(random_symmetric(6, 0.0, 2.0, 3), GraphKind::NCut);
        let k = 3;
        let s = Array2::from_elem((6, k), 1.0 / k as f64);
        let loss = ncut_loss(s.view(), &w, NcutSign::Default).unwrap();
        // SᵀS = (n/k²) J, so SᵀS/||SᵀS|| = J/k
        let j_over_k = Array2::from_elem((k, k), 1.0 / k as f64);
        let ortho = frobenius(&(j_over_k - Array2::<f64>::eye(k) / (k as f64).sqrt()));
        assert!(ortho > 0.0);
        assert!((loss.value - (-1.0 + ortho)).abs() < 1e-12);
        let literal = ncut_loss(s.view(), &w, NcutSign::Literal).unwrap();
        assert!((literal.value - (1.0 + ortho)).abs() < 1e-12);
    }

    #[test]
    fn ncut_gradient_finite_differences() {
        for seed in 0..5 {
            let w = graph(random_symmetric(7, 0.0, 1.0, seed), GraphKind::NCut);
            let s = random_assignment(7, 3, seed + 100);
            for sign in [NcutSign::Default, NcutSign::Literal] {
                check_gradient(&s, |s| ncut_loss(s.view(), &w, sign).unwrap(), 1e-5);
            }
        }
    }

    #[test]
    fn ncut_orthogonality_vanishes_on_balanced_one_hot() {
        let w = graph(random_symmetric(6, 0.1, 1.0, 1), GraphKind::NCut);
        let balanced = Partition::from_labels(vec![0, 1, 2, 2, 1, 0]).one_hot();
        let first = |s: &Array2<f64>| {
            let ws = w.weights().dot(s);
            let ds = s * &w.degree_vector().view().insert_axis(Axis(1));
            -(s * &ws).sum() / (s * &ds).sum()
        };
        let loss = ncut_loss(balanced.view(), &w, NcutSign::Default).unwrap();
        assert!((loss.value - first(&balanced)).abs() < 1e-12);
        let unbalanced = Partition::from_labels(vec![0, 0, 0, 0, 1, 2]).one_hot();
        let loss = ncut_loss(unbalanced.view(), &w, NcutSign::Default).unwrap();
        assert!(loss.value - first(&unbalanced) > 1e-3);
    }

    #[test]
    fn ncut_rejects_signed_graph_and_zero_denominator() {
        let w = graph(array![[1.0, -1.0], [-1.0, 1.0]], GraphKind::Cc);
        let s = Array2::from_elem((2, 2), 0.5);
        assert!(matches!(
            ncut_loss(s.view(), &w, NcutSign::Default),
            Err(ObjectiveError::KindMismatch { .. })
        ));
        let zero = graph(Array2::zeros((2, 2)), GraphKind::NCut);
        assert!(matches!(
            ncut_loss(s.view(), &zero, NcutSign::Default),
            Err(ObjectiveError::DegenerateDenominator(_))
        ));
    }

    #[test]
    fn cc_two_node_hand_computation() {
        let w = graph(array![[1.0, -1.0], [-1.0, 1.0]], GraphKind::Cc);
        let split = Partition::from_labels(vec![0, 1]).one_hot();
        let merged = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let a = cc_loss(split.view(), &w).unwrap().value;
        let b = cc_loss(merged.view(), &w).unwrap().value;
        assert_eq!(a, -2.0);
        assert_eq!(b, 0.0);
        assert!(a < b);
    }

    #[test]
    fn cc_gradient_is_minus_two_ws() {
        let w = graph(random_symmetric(9, -1.0, 1.0, 4), GraphKind::Cc);
        let s = random_assignment(9, 4, 5);
        let loss = cc_loss(s.view(), &w).unwrap();
        let want = w.weights().dot(&s) * -2.0;
        for (a, b) in loss.grad.iter().zip(want.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
        check_gradient(&s, |s| cc_loss(s.view(), &w).unwrap(), 1e-5);
    }

    fn three_node() -> AffinityMatrix {
        graph(
            array![[0.0, 2.0, -1.0], [2.0, 0.0, -1.0], [-1.0, -1.0, 0.0]],
            GraphKind::Cc,
        )
    }

    #[test]
    fn discrete_cc_enumeration() {
        let w = three_node();
        let value = |labels: Vec<usize>| discrete_cc(&Partition::from_labels(labels), &w).unwrap();
        assert_eq!(value(vec![0, 0, 1]), -4.0);
        assert_eq!(value(vec![0, 0, 0]), 0.0);
        assert_eq!(value(vec![0, 1, 2]), 0.0);
        assert_eq!(value(vec![0, 1, 0]), 2.0);
        assert_eq!(value(vec![0, 1, 1]), 2.0);
    }

    #[test]
    fn discrete_cc_single_cluster_is_total_weight() {
        let m = random_symmetric(5, -1.0, 1.0, 8);
        let w = graph(m.clone(), GraphKind::Cc);
        let v = discrete_cc(&Partition::from_labels(vec![0; 5]), &w).unwrap();
        assert!((v + m.sum()).abs() < 1e-12);
    }

    #[test]
    fn brute_force_cc_cases() {
        let best = brute_force_cc(&three_node(), DEFAULT_N_MAX).unwrap();
        assert_eq!(best.labels, vec![0, 0, 1]);
        assert_eq!(discrete_cc(&best, &three_node()).unwrap(), -4.0);

        let positive = graph(random_symmetric(6, 0.1, 1.0, 2), GraphKind::Cc);
        assert_eq!(brute_force_cc(&positive, 10).unwrap().labels, vec![0; 6]);

        let n = 5;
        let repulsive = graph(
            Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 } else { -1.0 }),
            GraphKind::Cc,
        );
        assert_eq!(brute_force_cc(&repulsive, 10).unwrap().labels, vec![0, 1, 2, 3, 4]);

        let big = graph(Array2::zeros((11, 11)), GraphKind::Cc);
        assert!(matches!(
            brute_force_cc(&big, DEFAULT_N_MAX),
            Err(ObjectiveError::TooLarge { n: 11, n_max: 10 })
        ));
    }

    #[test]
    fn brute_force_cc_prefers_fewer_clusters_on_ties() {
        // all-zero graph: every partition scores 0, the single cluster wins
        let w = graph(Array2::zeros((4, 4)), GraphKind::Cc);
        let best = brute_force_cc(&w, 10).unwrap();
        assert_eq!(best.labels, vec![0; 4]);
        assert_eq!(best.k, 1);
    }

    #[test]
    fn discrete_ncut_cases() {
        assert_eq!(
            discrete_ncut(&Partition::from_labels(vec![0, 0, 1, 1]), &two_cliques()).unwrap(),
            0.0
        );
        let wt = 0.3;
        let pair = graph(array![[1.0, wt], [wt, 1.0]], GraphKind::NCut);
        let v = discrete_ncut(&Partition::from_labels(vec![0, 1]), &pair).unwrap();
        assert!((v - 2.0 * wt / (1.0 + wt)).abs() < 1e-15);
    }

    #[test]
    fn discrete_ncut_matches_cut_assoc_oracle() {
        let n = 7;
        let w = graph(random_symmetric(n, 0.0, 1.0, 21), GraphKind::NCut);
        for mask in 1u32..(1 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let (mut cut, mut assoc_a, mut assoc_b) = (0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == 0 {
                        assoc_a += w.get(i, j);
                        if labels[j] == 1 {
                            cut += w.get(i, j);
                        }
                    } else {
                        assoc_b += w.get(i, j);
                    }
                }
            }
            let want = cut / assoc_a + cut / assoc_b;
            let got = discrete_ncut(&Partition::from_labels(labels), &w).unwrap();
            assert!((got - want).abs() <= 1e-12, "mask {mask}: {got} vs {want}");
        }
    }

    #[test]
    fn discrete_ncut_zero_assoc_cluster() {
        let w = graph(array![[1.0, 0.0], [0.0, 0.0]], GraphKind::NCut);
        assert!(matches!(
            discrete_ncut(&Partition::from_labels(vec![0, 1]), &w),
            Err(ObjectiveError::DegeneratePartition { cluster: 1 })
        ));
    }

    #[test]
    fn brute_force_ncut_components_and_path() {
        let mut m = Array2::<f64>::zeros((6, 6));
        for i in 0..6 {
            for j in 0..6 {
                if i / 3 == j / 3 {
                    m[[i, j]] = 1.0;
                }
            }
        }
        let w = graph(m, GraphKind::NCut);
        let best = brute_force_ncut(&w, 2, 10).unwrap();
        assert_eq!(best.labels, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(discrete_ncut(&best, &w).unwrap(), 0.0);

        // path 0-1-2 with unit edges and self-loops: both end cuts score 0.7
        let path = graph(
            array![[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0]],
            GraphKind::NCut,
        );
        let best = brute_force_ncut(&path, 2, 10).unwrap();
        assert_eq!(best.labels, vec![0, 0, 1]);
        assert!((discrete_ncut(&best, &path).unwrap() - 0.7).abs() < 1e-12);
        let other_end = discrete_ncut(&Partition::from_labels(vec![0, 1, 1]), &path).unwrap();
        let middle = discrete_ncut(&Partition::from_labels(vec![0, 1, 0]), &path).unwrap();
        assert!((other_end - 0.7).abs() < 1e-12);
        assert!(middle > 0.7);
    }

    #[test]
    fn partition_canonical_form() {
        let p = Partition::from_labels(vec![3, 3, 1, 0, 1]);
        assert_eq!(p.k, 4);
        let c = p.canonical();
        assert_eq!(c.labels, vec![0, 0, 1, 2, 1]);
        assert_eq!(c.k, 3);
        assert_eq!(p.n_clusters(), 3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn signed_graph() -> impl Strategy<Value = (AffinityMatrix, Vec<usize>)> {
            (2usize..8).prop_flat_map(|n| {
                (
                    proptest::collection::vec(-2.0f64..2.0, n * n),
                    proptest::collection::vec(0usize..4, n),
                )
                    .prop_map(move |(v, labels)| {
                        let m = Array2::from_shape_vec((n, n), v).unwrap();
                        (graph(&m + &m.t(), GraphKind::Cc), labels)
                    })
            })
        }

        proptest! {
            #[test]
            fn one_hot_cc_loss_equals_discrete((w, labels) in signed_graph()) {
                let p = Partition::from_labels(labels);
                let soft = cc_loss(p.one_hot().view(), &w).unwrap().value;
                let hard = discrete_cc(&p, &w).unwrap();
                prop_assert!((soft - hard).abs() <= 1e-9 * hard.abs().max(1.0));
            }

            #[test]
            fn shift_changes_cc_by_cluster_sizes((w, labels) in signed_graph(), shift in -3.0f64..3.0) {
                let p = Partition::from_labels(labels);
                let shifted = graph(w.weights().mapv(|x| x - shift), GraphKind::Cc);
                let sizes: f64 = (0..p.k)
                    .map(|c| p.labels.iter().filter(|&&l| l == c).count() as f64)
                    .map(|s| s * s)
                    .sum();
                let lhs = discrete_cc(&p, &shifted).unwrap();
                let rhs = discrete_cc(&p, &w).unwrap() + shift * sizes;
                prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1.0));
            }

            #[test]
            fn brute_force_cc_is_minimal((w, labels) in signed_graph()) {
                let best = brute_force_cc(&w, 10).unwrap();
                let best_value = discrete_cc(&best, &w).unwrap();
                let other = discrete_cc(&Partition::from_labels(labels), &w).unwrap();
                prop_assert!(best_value <= other + 1e-9 * other.abs().max(1.0));
            }
        }
    }
}
