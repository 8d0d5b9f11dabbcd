//! Dense affinity graphs built from patch features.
//!
//! The raw graph is the Gram matrix `F F^T`. The normalized-cut graph clips it
//! at zero; the correlation-clustering graph shifts every entry down by
//! `max(F F^T) / alpha` so that weak similarities become repulsive.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_io::{self, FeatureField, FeatureIoError, GeometryMeta};

#[derive(Debug, Error)]
pub enum AffinityError {
    #[error("alpha must be >= 1 (or infinite), got {0}")]
    Alpha(f64),
    #[error("node {node} has no positive affinity (all-zero feature row)")]
    DegenerateGraph { node: usize },
    #[error("invalid node subset: {0}")]
    Subset(String),
    #[error(transparent)]
    Features(#[from] FeatureIoError),
}

/// Which loss the graph is prepared for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    NCut,
    Cc,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityConfig {
    /// k-sensitivity; `f64::INFINITY` disables the shift.
    #[serde(with = "alpha_serde")]
    pub alpha: f64,
    pub normalize_features: bool,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self {
            alpha: 3.0,
            normalize_features: false,
        }
    }
}

impl AffinityConfig {
    pub fn validate(&self) -> Result<(), AffinityError> {
        // NaN fails this comparison too
        if !(self.alpha >= 1.0) {
            return Err(AffinityError::Alpha(self.alpha));
        }
        Ok(())
    }
}

/// JSON has no infinity; an unshifted graph is written as `null`.
mod alpha_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(alpha: &f64, s: S) -> Result<S::Ok, S::Error> {
        if alpha.is_finite() {
            s.serialize_some(alpha)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Symmetric dense weight matrix with cached row sums.
#[derive(Clone, Debug)]
pub struct AffinityMatrix {
    weights: Array2<f64>,
    degree: Array1<f64>,
    kind: GraphKind,
}

impl AffinityMatrix {
    /// Wraps an arbitrary symmetric matrix (used by tests and baselines).
    pub fn from_weights(weights: Array2<f64>, kind: GraphKind) -> Self {
        assert_eq!(weights.nrows(), weights.ncols(), "affinity must be square");
        let degree = weights.sum_axis(ndarray::Axis(1));
        Self {
            weights,
            degree,
            kind,
        }
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[[i, j]]
    }

    /// Row sums of the weights (the degree matrix diagonal).
    pub fn degree_vector(&self) -> &Array1<f64> {
        &self.degree
    }

    /// Row sums of absolute weights; equals the degree on non-negative graphs.
    pub fn abs_degree(&self) -> Array1<f64> {
        self.weights.map(|w| w.abs()).sum_axis(ndarray::Axis(1))
    }

    /// Writes `W` as a diagnostic DCUT file (`n x n` grid, one value per cell).
    pub fn write_debug_dump<W: Write>(&self, sink: W) -> Result<u64, FeatureIoError> {
        let n = self.n();
        let values: Vec<f32> = self.weights.iter().map(|&w| w as f32).collect();
        let meta = GeometryMeta::for_grid(n, n, 1, 1, "affinity-debug");
        let field = FeatureField::new(n, n, 1, values, meta)?;
        feature_io::write_feature_field(&field, sink)
    }
}

fn prepared_features(
    field: &FeatureField,
    cfg: &AffinityConfig,
) -> Result<Array2<f64>, AffinityError> {
    cfg.validate()?;
    if cfg.normalize_features {
        Ok(feature_io::l2_normalize(field)?.to_matrix())
    } else {
        Ok(field.to_matrix())
    }
}

/// `F F^T`, made exactly symmetric by mirroring the upper triangle.
pub fn gram_matrix(features: &Array2<f64>) -> Array2<f64> {
    let mut gram = features.dot(&features.t());
    let n = gram.nrows();
    for i in 0..n {
        for j in 0..i {
            gram[[i, j]] = gram[[j, i]];
        }
    }
    gram
}

/// Zero-thresholded correlation graph for the normalized-cut loss.
///
/// The diagonal (`|f_i|^2`) is always kept, so a node only becomes isolated
/// when its feature row is entirely zero.
pub fn build_ncut_affinity(
    field: &FeatureField,
    cfg: &AffinityConfig,
) -> Result<AffinityMatrix, AffinityError> {
    let features = prepared_features(field, cfg)?;
    let mut weights = gram_matrix(&features);
    weights.mapv_inplace(|w| if w > 0.0 { w } else { 0.0 });
    let matrix = AffinityMatrix::from_weights(weights, GraphKind::NCut);
    if let Some(node) = matrix.degree.iter().position(|&d| d <= 0.0) {
        return Err(AffinityError::DegenerateGraph { node });
    }
    Ok(matrix)
}

/// Signed graph for correlation clustering, shifted by `max(F F^T) / alpha`.
pub fn build_cc_affinity(
    field: &FeatureField,
    cfg: &AffinityConfig,
) -> Result<AffinityMatrix, AffinityError> {
    let features = prepared_features(field, cfg)?;
    let mut weights = gram_matrix(&features);
    let shift = cc_shift(&weights, cfg.alpha);
    if shift != 0.0 {
        weights.mapv_inplace(|w| w - shift);
    }
    Ok(AffinityMatrix::from_weights(weights, GraphKind::Cc))
}

/// The constant subtracted from the Gram matrix (global max, diagonal included).
pub fn cc_shift(gram: &Array2<f64>, alpha: f64) -> f64 {
    if alpha.is_infinite() {
        return 0.0;
    }
    let max = gram.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max / alpha
}

/// Patches kept from a parent field, with their original flat indices.
#[derive(Clone, Debug)]
pub struct Subfield {
    pub field: FeatureField,
    /// `members[i]` is the parent patch index of row `i`.
    pub members: Vec<usize>,
}

/// Restricts `field` to the patches in `keep`, flattened in ascending order.
pub fn induced_subfield(field: &FeatureField, keep: &[usize]) -> Result<Subfield, AffinityError> {
    if keep.is_empty() {
        return Err(AffinityError::Subset("subset is empty".into()));
    }
    let n = field.n_nodes();
    let mut members = keep.to_vec();
    members.sort_unstable();
    members.dedup();
    if let Some(&bad) = members.iter().find(|&&i| i >= n) {
        return Err(AffinityError::Subset(format!(
            "index {bad} out of range for {n} nodes"
        )));
    }
    let c = field.embed_dim();
    let mut features = Vec::with_capacity(members.len() * c);
    for &i in &members {
        features.extend_from_slice(field.row(i));
    }
    let sub = FeatureField::from_items(
        members.len(),
        c,
        features,
        format!("{}#subset", field.meta().source_id),
    )?;
    Ok(Subfield {
        field: sub,
        members,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_io::synth_planted_features;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn items(rows: &[&[f32]]) -> FeatureField {
        let c = rows[0].len();
        let flat: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FeatureField::from_items(rows.len(), c, flat, "t").unwrap()
    }

    fn random_field(n: usize, c: usize, seed: u64) -> FeatureField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat: Vec<f32> = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureField::from_items(n, c, flat, "r").unwrap()
    }

    fn naive_dot(a: &[f32], b: &[f32]) -> f64 {
        let mut s = 0.0;
        for k in 0..a.len() {
            s += a[k] as f64 * b[k] as f64;
        }
        s
    }

    #[test]
    fn orthonormal_rows_give_identity() {
        let w = build_ncut_affinity(&items(&[&[1.0, 0.0], &[0.0, 1.0]]), &Default::default())
            .unwrap();
        assert_eq!(w.weights(), array![[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn negative_correlation_is_clipped() {
        let w = build_ncut_affinity(&items(&[&[1.0, 0.0], &[-1.0, 0.0]]), &Default::default())
            .unwrap();
        assert_eq!(w.weights(), array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(w.kind(), GraphKind::NCut);
    }

    #[test]
    fn ncut_matches_double_loop() {
        let field = random_field(6, 8, 5);
        let w = build_ncut_affinity(&field, &Default::default()).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let want = naive_dot(field.row(i), field.row(j)).max(0.0);
                assert!((w.get(i, j) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_feature_row_is_degenerate() {
        let err = build_ncut_affinity(&items(&[&[1.0, 0.0], &[0.0, 0.0]]), &Default::default())
            .unwrap_err();
        assert!(matches!(err, AffinityError::DegenerateGraph { node: 1 }));
    }

    #[test]
    fn cc_shift_arithmetic() {
        // max(ff^T) = 10 on the diagonal of the second row
        let field = items(&[&[1.0, 0.0], &[3.0, 1.0]]);
        let cfg = AffinityConfig {
            alpha: 2.0,
            normalize_features: false,
        };
        let w = build_cc_affinity(&field, &cfg).unwrap();
        assert_eq!(w.weights(), array![[1.0 - 5.0, 3.0 - 5.0], [3.0 - 5.0, 10.0 - 5.0]]);
        let raw = build_cc_affinity(
            &field,
            &AffinityConfig {
                alpha: f64::INFINITY,
                normalize_features: false,
            },
        )
        .unwrap();
        assert_eq!(raw.weights(), array![[1.0, 3.0], [3.0, 10.0]]);
    }

    #[test]
    fn cc_sign_census_on_planted_blocks() {
        let planted = synth_planted_features(8, 8, 3, 0.05, 2).unwrap();
        let cfg = AffinityConfig {
            alpha: 3.0,
            normalize_features: false,
        };
        let w = build_cc_affinity(&planted.field, &cfg).unwrap();
        let truth = &planted.truth.labels;
        let f = &planted.field;
        let max = (0..64)
            .flat_map(|i| (0..64).map(move |j| (i, j)))
            .map(|(i, j)| naive_dot(f.row(i), f.row(j)))
            .fold(f64::MIN, f64::max);
        let (mut within_pos, mut within) = (0, 0);
        for i in 0..64 {
            for j in 0..64 {
                let recomputed = naive_dot(f.row(i), f.row(j)) - max / 3.0;
                assert!((recomputed - w.get(i, j)).abs() < 1e-6);
                if truth[i] == truth[j] {
                    within += 1;
                    within_pos += usize::from(recomputed > 0.0);
                } else {
                    assert!(recomputed < 0.0);
                }
            }
        }
        assert!(within_pos * 10 > within * 9, "{within_pos}/{within}");
    }

    #[test]
    fn rejects_small_alpha() {
        let cfg = AffinityConfig {
            alpha: 0.5,
            normalize_features: false,
        };
        assert!(matches!(
            build_cc_affinity(&items(&[&[1.0]]), &cfg),
            Err(AffinityError::Alpha(_))
        ));
        let nan = AffinityConfig {
            alpha: f64::NAN,
            normalize_features: false,
        };
        assert!(nan.validate().is_err());
    }

    #[test]
    fn degree_vector_hand_sums() {
        let w = AffinityMatrix::from_weights(array![[1.0, 2.0], [2.0, 3.0]], GraphKind::Cc);
        assert_eq!(w.degree_vector(), &array![3.0, 5.0]);
        let eye = AffinityMatrix::from_weights(Array2::eye(5), GraphKind::NCut);
        assert_eq!(eye.degree_vector(), &Array1::<f64>::ones(5));
    }

    #[test]
    fn degree_matches_naive_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 17;
        let mut m = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let v = rng.random_range(-2.0..2.0);
                m[[i, j]] = v;
                m[[j, i]] = v;
            }
        }
        let w = AffinityMatrix::from_weights(m.clone(), GraphKind::Cc);
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += m[[i, j]];
            }
            assert!((w.degree_vector()[i] - s).abs() <= 1e-12 * s.abs().max(1.0));
        }
    }

    #[test]
    fn subfield_identity_and_singleton() {
        let field = random_field(5, 3, 1);
        let all = induced_subfield(&field, &[4, 3, 2, 1, 0, 0]).unwrap();
        assert_eq!(all.members, vec![0, 1, 2, 3, 4]);
        assert_eq!(all.field.features(), field.features());

        let one = induced_subfield(&field, &[3]).unwrap();
        assert_eq!(one.field.n_nodes(), 1);
        assert_eq!(one.field.row(0), field.row(3));

        assert!(induced_subfield(&field, &[]).is_err());
        assert!(induced_subfield(&field, &[5]).is_err());
    }

    #[test]
    fn subfield_rebuild_uses_own_maximum() {
        // Block 0 has small features, block 1 large: the global max comes from
        // block 1, so slicing the full graph over-shifts block 0.
        let mut truth = [0usize; 16];
        truth[8..].fill(1);
        let mut rows: Vec<Vec<f32>> = Vec::new();
        for (i, &l) in truth.iter().enumerate() {
            let scale = if l == 0 { 1.0 } else { 3.0 };
            rows.push(vec![scale, 0.1 * (i % 3) as f32]);
        }
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let field = items(&refs);
        let cfg = AffinityConfig {
            alpha: 2.0,
            normalize_features: false,
        };
        let full = build_cc_affinity(&field, &cfg).unwrap();
        let keep: Vec<usize> = (0..8).collect();
        let sub = induced_subfield(&field, &keep).unwrap();
        let rebuilt = build_cc_affinity(&sub.field, &cfg).unwrap();
        for (a, &i) in sub.members.iter().enumerate() {
            for (b, &j) in sub.members.iter().enumerate() {
                assert!(rebuilt.get(a, b) > full.get(i, j));
            }
        }
    }

    #[test]
    fn debug_dump_round_trips() {
        let w = AffinityMatrix::from_weights(array![[1.0, 0.5], [0.5, 2.0]], GraphKind::NCut);
        let mut buf = Vec::new();
        w.write_debug_dump(&mut buf).unwrap();
        let back = feature_io::read_feature_field(&buf[..]).unwrap();
        assert_eq!(back.features(), &[1.0, 0.5, 0.5, 2.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn field_strategy() -> impl Strategy<Value = FeatureField> {
            (1usize..7, 1usize..5).prop_flat_map(|(n, c)| {
                proptest::collection::vec(-2.0f32..2.0, n * c)
                    .prop_map(move |v| FeatureField::from_items(n, c, v, "p").unwrap())
            })
        }

        proptest! {
            #[test]
            fn shift_is_constant(field in field_strategy(), alpha in 1.0f64..20.0) {
                let raw = build_cc_affinity(&field, &AffinityConfig { alpha: f64::INFINITY, normalize_features: false }).unwrap();
                let shifted = build_cc_affinity(&field, &AffinityConfig { alpha, normalize_features: false }).unwrap();
                let s = cc_shift(&raw.weights().to_owned(), alpha);
                for (a, b) in raw.weights().iter().zip(shifted.weights().iter()) {
                    prop_assert!(((a - b) - s).abs() <= 1e-9 * s.abs().max(1.0));
                }
            }

            #[test]
            fn alpha_monotone(field in field_strategy(), a1 in 1.0f64..10.0, gap in 0.0f64..10.0) {
                let lo = build_cc_affinity(&field, &AffinityConfig { alpha: a1, normalize_features: false }).unwrap();
                let hi = build_cc_affinity(&field, &AffinityConfig { alpha: a1 + gap, normalize_features: false }).unwrap();
                for (a, b) in lo.weights().iter().zip(hi.weights().iter()) {
                    prop_assert!(a <= b);
                }
            }

            #[test]
            fn ncut_graph_symmetric_nonnegative(field in field_strategy()) {
                if let Ok(w) = build_ncut_affinity(&field, &Default::default()) {
                    let n = w.n();
                    for i in 0..n {
                        for j in 0..n {
                            prop_assert!(w.get(i, j) >= 0.0);
                            prop_assert_eq!(w.get(i, j), w.get(j, i));
                        }
                        let sq: f64 = field.row(i).iter().map(|&v| (v as f64).powi(2)).sum();
                        prop_assert!((w.get(i, i) - sq).abs() <= 1e-6 * sq.max(1.0));
                    }
                }
            }
        }
    }
}
