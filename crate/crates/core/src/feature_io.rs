//! Patch-feature fields and the DCUT interchange format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DCUT" | u32 version=1 | u32 grid_h | u32 grid_w | u32 embed_dim | u32 meta_len
//! meta_len bytes of UTF-8 JSON {"image_h","image_w","patch_size","stride","source_id"}
//! grid_h * grid_w * embed_dim f32 values, row-major, patch index = row * grid_w + col
//! ```

use std::io::{self, Read, Write};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{BBox, LabelMask};

pub const MAGIC: &[u8; 4] = b"DCUT";
pub const VERSION: u32 = 1;
/// Smallest embedding width produced by the planted-field generators.
pub const MIN_PLANTED_DIM: usize = 8;

#[derive(Debug, Error)]
pub enum FeatureIoError {
    #[error("I/O error at byte offset {offset}: {source}")]
    Io { offset: u64, source: io::Error },
    #[error("bad magic {found:?}, expected \"DCUT\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported DCUT version {0} (only version 1 is understood)")]
    UnsupportedVersion(u32),
    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    PayloadLength { expected: u64, actual: u64 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("non-finite feature value at flat index {index}")]
    NonFinite { index: usize },
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("grid {grid_h}x{grid_w} does not match geometry {meta:?}")]
    Geometry {
        grid_h: usize,
        grid_w: usize,
        meta: GeometryMeta,
    },
    #[error("patch {patch} has an all-zero feature vector")]
    DegenerateFeature { patch: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Image and tokenizer geometry that produced a feature grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometryMeta {
    pub image_h: usize,
    pub image_w: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub source_id: String,
}

impl GeometryMeta {
    /// Geometry whose token grid is exactly `grid_h x grid_w`.
    pub fn for_grid(
        grid_h: usize,
        grid_w: usize,
        patch_size: usize,
        stride: usize,
        source_id: impl Into<String>,
    ) -> Self {
        Self {
            image_h: (grid_h - 1) * stride + patch_size,
            image_w: (grid_w - 1) * stride + patch_size,
            patch_size,
            stride,
            source_id: source_id.into(),
        }
    }

    /// Token-grid dimensions, `floor((dim - p) / stride) + 1` per axis.
    pub fn grid_dims(&self) -> Option<(usize, usize)> {
        if self.stride == 0 || self.stride > self.patch_size {
            return None;
        }
        let axis = |dim: usize| {
            dim.checked_sub(self.patch_size)
                .map(|rest| rest / self.stride + 1)
        };
        Some((axis(self.image_h)?, axis(self.image_w)?))
    }
}

/// Grid of per-patch feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField {
    grid_h: usize,
    grid_w: usize,
    embed_dim: usize,
    features: Vec<f32>,
    meta: GeometryMeta,
}

impl FeatureField {
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        embed_dim: usize,
        features: Vec<f32>,
        meta: GeometryMeta,
    ) -> Result<Self, FeatureIoError> {
        if grid_h == 0 || grid_w == 0 || embed_dim == 0 {
            return Err(FeatureIoError::Shape(format!(
                "grid {grid_h}x{grid_w} with embed_dim {embed_dim} has an empty axis"
            )));
        }
        let expected = grid_h * grid_w * embed_dim;
        if features.len() != expected {
            return Err(FeatureIoError::Shape(format!(
                "expected {expected} feature values, got {}",
                features.len()
            )));
        }
        if let Some(index) = features.iter().position(|v| !v.is_finite()) {
            return Err(FeatureIoError::NonFinite { index });
        }
        if meta.grid_dims() != Some((grid_h, grid_w)) {
            return Err(FeatureIoError::Geometry {
                grid_h,
                grid_w,
                meta,
            });
        }
        Ok(Self {
            grid_h,
            grid_w,
            embed_dim,
            features,
            meta,
        })
    }

    /// A `1 x n` field of free-standing items (no spatial layout).
    pub fn from_items(
        n: usize,
        embed_dim: usize,
        features: Vec<f32>,
        source_id: impl Into<String>,
    ) -> Result<Self, FeatureIoError> {
        if n == 0 {
            return Err(FeatureIoError::Shape("item set is empty".into()));
        }
        let meta = GeometryMeta::for_grid(1, n, 1, 1, source_id);
        Self::new(1, n, embed_dim, features, meta)
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn meta(&self) -> &GeometryMeta {
        &self.meta
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    /// Number of patches (graph nodes).
    pub fn n_nodes(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn row(&self, node: usize) -> &[f32] {
        &self.features[node * self.embed_dim..(node + 1) * self.embed_dim]
    }

    /// Features widened to `f64`, one row per node.
    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n_nodes(), self.embed_dim), |(i, j)| {
            self.features[i * self.embed_dim + j] as f64
        })
    }
}

/// A feature field with the labels it was generated from.
#[derive(Clone, Debug)]
pub struct PlantedField {
    pub field: FeatureField,
    pub truth: LabelMask,
}

fn io_at(offset: u64) -> impl FnOnce(io::Error) -> FeatureIoError {
    move |source| FeatureIoError::Io { offset, source }
}

/// Serializes `field` in DCUT format and returns the number of bytes written.
pub fn write_feature_field<W: Write>(
    field: &FeatureField,
    mut sink: W,
) -> Result<u64, FeatureIoError> {
    let meta = serde_json::to_vec(&field.meta)
        .map_err(|e| FeatureIoError::Header(format!("cannot encode metadata: {e}")))?;
    let dim = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| FeatureIoError::Shape(format!("{what} {v} exceeds u32")))
    };

    let mut header = Vec::with_capacity(24 + meta.len());
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&dim(field.grid_h, "grid_h")?.to_le_bytes());
    header.extend_from_slice(&dim(field.grid_w, "grid_w")?.to_le_bytes());
    header.extend_from_slice(&dim(field.embed_dim, "embed_dim")?.to_le_bytes());
    header.extend_from_slice(&dim(meta.len(), "meta_len")?.to_le_bytes());
    header.extend_from_slice(&meta);
    sink.write_all(&header).map_err(io_at(0))?;
    let mut offset = header.len() as u64;

    let payload: Vec<u8> = field.features.iter().flat_map(|v| v.to_le_bytes()).collect();
    sink.write_all(&payload).map_err(io_at(offset))?;
    offset += payload.len() as u64;
    sink.flush().map_err(io_at(offset))?;
    Ok(offset)
}

/// Parses a DCUT stream, validating every field invariant.
pub fn read_feature_field<R: Read>(mut source: R) -> Result<FeatureField, FeatureIoError> {
    let mut magic = [0u8; 4];
    source.read_exact(&mut magic).map_err(io_at(0))?;
    if &magic != MAGIC {
        return Err(FeatureIoError::BadMagic { found: magic });
    }
    let mut words = [0u32; 5];
    for (i, word) in words.iter_mut().enumerate() {
        let mut buf = [0u8; 4];
        source
            .read_exact(&mut buf)
            .map_err(io_at(4 + 4 * i as u64))?;
        *word = u32::from_le_bytes(buf);
    }
    let [version, grid_h, grid_w, embed_dim, meta_len] = words;
    if version != VERSION {
        return Err(FeatureIoError::UnsupportedVersion(version));
    }

    let mut meta_bytes = vec![0u8; meta_len as usize];
    source.read_exact(&mut meta_bytes).map_err(io_at(24))?;
    let meta: GeometryMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| FeatureIoError::Header(format!("metadata JSON: {e}")))?;

    let expected = (grid_h as u64)
        .checked_mul(grid_w as u64)
        .and_then(|v| v.checked_mul(embed_dim as u64))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| FeatureIoError::Header("payload size overflows".into()))?;
    let mut payload = Vec::new();
    source
        .read_to_end(&mut payload)
        .map_err(io_at(24 + meta_len as u64))?;
    if payload.len() as u64 != expected {
        return Err(FeatureIoError::PayloadLength {
            expected,
            actual: payload.len() as u64,
        });
    }
    let features: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureField::new(
        grid_h as usize,
        grid_w as usize,
        embed_dim as usize,
        features,
        meta,
    )
}

/// Planted field with `k` contiguous rectangular regions.
///
/// Rows of the grid are split into bands and each band into column runs, so
/// every region is a rectangle and region sizes differ by at most one band or
/// column. Region `r` is represented by basis vector `e_r` of dimension
/// `max(k, 8)` plus isotropic Gaussian noise.
pub fn synth_planted_features(
    grid_h: usize,
    grid_w: usize,
    k: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<PlantedField, FeatureIoError> {
    if grid_h == 0 || grid_w == 0 {
        return Err(FeatureIoError::Argument("grid must be non-empty".into()));
    }
    if k == 0 || k > grid_h * grid_w {
        return Err(FeatureIoError::Argument(format!(
            "cannot plant {k} regions in {} nodes",
            grid_h * grid_w
        )));
    }
    let bands = k.div_ceil(grid_w).max(ceil_sqrt(k).min(grid_h)).min(k);
    let mut labels = vec![0usize; grid_h * grid_w];
    let mut region = 0;
    for band in 0..bands {
        let regions_here = k / bands + usize::from(band < k % bands);
        let (r0, r1) = even_split(grid_h, bands, band);
        for part in 0..regions_here {
            let (c0, c1) = even_split(grid_w, regions_here, part);
            for r in r0..r1 {
                labels[r * grid_w + c0..r * grid_w + c1].fill(region);
            }
            region += 1;
        }
    }
    let truth = LabelMask::new(grid_h, grid_w, labels).expect("grid is non-empty");
    synth_from_labels(truth, noise_sigma, seed)
}

/// Planted single-object field with its ground-truth box.
#[derive(Clone, Debug)]
pub struct PlantedObject {
    pub planted: PlantedField,
    pub object: BBox,
}

/// One rectangular object (label 1) on background (label 0), placed so its
/// center sits at least `grid / 8` cells away from the grid center on some
/// axis. Object sides are drawn from `[grid / 4, grid / 2]`.
pub fn synth_planted_object(
    grid_h: usize,
    grid_w: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<PlantedObject, FeatureIoError> {
    if grid_h < 4 || grid_w < 4 {
        return Err(FeatureIoError::Argument(format!(
            "object fields need a grid of at least 4x4, got {grid_h}x{grid_w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f62_6a65_6374);
    let h = rng.random_range(grid_h / 4..=grid_h / 2);
    let w = rng.random_range(grid_w / 4..=grid_w / 2);
    let min_offset = (grid_h.min(grid_w) / 8).max(1) as f64;
    let mut object = BBox::new(0, 0, h - 1, w - 1);
    for _ in 0..64 {
        let row0 = rng.random_range(0..=grid_h - h);
        let col0 = rng.random_range(0..=grid_w - w);
        object = BBox::new(row0, col0, row0 + h - 1, col0 + w - 1);
        let dr = (row0 as f64 + (h as f64 - 1.0) / 2.0 - (grid_h as f64 - 1.0) / 2.0).abs();
        let dc = (col0 as f64 + (w as f64 - 1.0) / 2.0 - (grid_w as f64 - 1.0) / 2.0).abs();
        if dr.max(dc) >= min_offset {
            break;
        }
    }
    let labels = (0..grid_h * grid_w)
        .map(|i| usize::from(object.contains(i / grid_w, i % grid_w)))
        .collect();
    let truth = LabelMask::new(grid_h, grid_w, labels).expect("grid is non-empty");
    let planted = synth_from_labels(truth, noise_sigma, seed)?;
    Ok(PlantedObject { planted, object })
}

/// Planted field for an arbitrary ground-truth layout.
///
/// Label `l` maps to basis vector `e_l` in dimension `max(max_label + 1, 8)`.
pub fn synth_from_labels(
    truth: LabelMask,
    noise_sigma: f64,
    seed: u64,
) -> Result<PlantedField, FeatureIoError> {
    let dim = truth.labels.iter().max().map_or(1, |m| m + 1).max(MIN_PLANTED_DIM);
    let centers: Vec<Vec<f32>> = (0..dim)
        .map(|l| (0..dim).map(|j| if j == l { 1.0 } else { 0.0 }).collect())
        .collect();
    synth_with_centers(truth, &centers, noise_sigma, seed)
}

/// Planted field using caller-supplied cluster centers (one per label).
pub fn synth_with_centers(
    truth: LabelMask,
    centers: &[Vec<f32>],
    noise_sigma: f64,
    seed: u64,
) -> Result<PlantedField, FeatureIoError> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(FeatureIoError::Argument(format!(
            "noise_sigma must be finite and non-negative, got {noise_sigma}"
        )));
    }
    let dim = centers.first().map_or(0, Vec::len);
    if dim == 0 || centers.iter().any(|c| c.len() != dim) {
        return Err(FeatureIoError::Argument("centers must share a non-zero width".into()));
    }
    if let Some(&bad) = truth.labels.iter().find(|&&l| l >= centers.len()) {
        return Err(FeatureIoError::Argument(format!("label {bad} has no center")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(truth.len() * dim);
    for &label in &truth.labels {
        for &base in &centers[label] {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push((base as f64 + noise_sigma * z) as f32);
        }
    }
    let meta = GeometryMeta::for_grid(
        truth.grid_h,
        truth.grid_w,
        8,
        8,
        format!("planted-{}x{}-seed{seed}", truth.grid_h, truth.grid_w),
    );
    let field = FeatureField::new(truth.grid_h, truth.grid_w, dim, features, meta)?;
    Ok(PlantedField { field, truth })
}

/// Rescales every feature row to unit Euclidean norm.
pub fn l2_normalize(field: &FeatureField) -> Result<FeatureField, FeatureIoError> {
    let c = field.embed_dim;
    let mut features = Vec::with_capacity(field.features.len());
    for (patch, row) in field.features.chunks_exact(c).enumerate() {
        let norm = row
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(FeatureIoError::DegenerateFeature { patch });
        }
        features.extend(row.iter().map(|&v| (v as f64 / norm) as f32));
    }
    Ok(FeatureField {
        features,
        ..field.clone()
    })
}

fn ceil_sqrt(k: usize) -> usize {
    let mut r = (k as f64).sqrt() as usize;
    while r * r < k {
        r += 1;
    }
    r
}

/// Half-open range of part `i` when `len` items are split into `parts` runs.
fn even_split(len: usize, parts: usize, i: usize) -> (usize, usize) {
    (i * len / parts, (i + 1) * len / parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_1x1(value: f32) -> FeatureField {
        FeatureField::new(1, 1, 1, vec![value], GeometryMeta::for_grid(1, 1, 8, 8, "one")).unwrap()
    }

    #[test]
    fn zero_field_layout() {
        let field = field_1x1(0.0);
        let mut buf = Vec::new();
        let written = write_feature_field(&field, &mut buf).unwrap();
        let meta_len = serde_json::to_vec(field.meta()).unwrap().len();
        assert_eq!(written as usize, 4 + 4 + 16 + meta_len + 4);
        assert_eq!(buf.len() as u64, written);
        assert_eq!(&buf[..4], b"DCUT");
        assert_eq!(&buf[buf.len() - 4..], &[0, 0, 0, 0]);
    }

    #[test]
    fn metadata_json_key_order() {
        let meta = GeometryMeta::for_grid(35, 35, 8, 8, "img");
        let json = serde_json::to_string(&meta).unwrap();
        assert_eq!(
            json,
            r#"{"image_h":280,"image_w":280,"patch_size":8,"stride":8,"source_id":"img"}"#
        );
    }

    #[test]
    fn payload_size_for_vit_small_grid() {
        let meta = GeometryMeta::for_grid(35, 35, 8, 8, "vit");
        let field = FeatureField::new(35, 35, 384, vec![0.5; 35 * 35 * 384], meta).unwrap();
        let mut buf = Vec::new();
        let written = write_feature_field(&field, &mut buf).unwrap() as usize;
        let header = 24 + serde_json::to_vec(field.meta()).unwrap().len();
        assert_eq!(written - header, 1_881_600);
    }

    #[test]
    fn grid_formula() {
        let meta = |stride| GeometryMeta {
            image_h: 280,
            image_w: 280,
            patch_size: 8,
            stride,
            source_id: String::new(),
        };
        assert_eq!(meta(8).grid_dims(), Some((35, 35)));
        assert_eq!(meta(4).grid_dims(), Some((69, 69)));
        assert_eq!(meta(9).grid_dims(), None);
        assert_eq!(meta(0).grid_dims(), None);
    }

    #[test]
    fn truncated_payload_reports_counts() {
        let meta = GeometryMeta::for_grid(2, 2, 8, 8, "t");
        let field = FeatureField::new(2, 2, 3, vec![1.0; 12], meta).unwrap();
        let mut buf = Vec::new();
        write_feature_field(&field, &mut buf).unwrap();
        buf.truncate(buf.len() - 5);
        match read_feature_field(&buf[..]) {
            Err(FeatureIoError::PayloadLength { expected, actual }) => {
                assert_eq!((expected, actual), (48, 43));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_errors() {
        let mut buf = Vec::new();
        write_feature_field(&field_1x1(1.0), &mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            read_feature_field(&bad_magic[..]),
            Err(FeatureIoError::BadMagic { .. })
        ));

        let mut bad_version = buf.clone();
        bad_version[4] = 2;
        assert!(matches!(
            read_feature_field(&bad_version[..]),
            Err(FeatureIoError::UnsupportedVersion(2))
        ));

        let mut nan = buf.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            read_feature_field(&nan[..]),
            Err(FeatureIoError::NonFinite { index: 0 })
        ));
    }

    #[test]
    fn rejects_grid_geometry_mismatch() {
        let meta = GeometryMeta::for_grid(3, 3, 8, 8, "m");
        let err = FeatureField::new(2, 3, 1, vec![0.0; 6], meta).unwrap_err();
        assert!(matches!(err, FeatureIoError::Geometry { .. }));
    }

    #[test]
    fn failing_sink_reports_offset() {
        struct Limited(usize);
        impl Write for Limited {
            fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
                if buf.len() > self.0 {
                    return Err(io::Error::other("full"));
                }
                self.0 -= buf.len();
                Ok(buf.len())
            }
            fn flush(&mut self) -> io::Result<()> {
                Ok(())
            }
        }
        let field = field_1x1(1.0);
        let header = 24 + serde_json::to_vec(field.meta()).unwrap().len();
        match write_feature_field(&field, Limited(header)) {
            Err(FeatureIoError::Io { offset, .. }) => assert_eq!(offset as usize, header),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn planted_noise_free_is_orthonormal() {
        let planted = synth_planted_features(6, 6, 2, 0.0, 3).unwrap();
        let f = &planted.field;
        let t = &planted.truth;
        for i in 0..f.n_nodes() {
            for j in 0..f.n_nodes() {
                let dot: f32 = f.row(i).iter().zip(f.row(j)).map(|(a, b)| a * b).sum();
                let want = if t.labels[i] == t.labels[j] { 1.0 } else { 0.0 };
                assert_eq!(dot, want);
            }
        }
    }

    #[test]
    fn planted_regions_are_rectangles() {
        for k in 1..=12 {
            let planted = synth_planted_features(7, 5, k, 0.0, 0).unwrap();
            let truth = &planted.truth;
            assert_eq!(truth.k_found, k);
            for label in 0..k {
                let cells: Vec<bool> = truth.labels.iter().map(|&l| l == label).collect();
                let bbox = crate::mask::BBox::enclosing(&cells, 5).unwrap();
                let count = cells.iter().filter(|&&c| c).count();
                assert_eq!(bbox.area(), count, "k={k} label={label}");
            }
        }
        assert!(synth_planted_features(2, 2, 5, 0.0, 0).is_err());
    }

    #[test]
    fn planted_is_deterministic() {
        let a = synth_planted_features(8, 8, 3, 0.2, 11).unwrap();
        let b = synth_planted_features(8, 8, 3, 0.2, 11).unwrap();
        let c = synth_planted_features(8, 8, 3, 0.2, 12).unwrap();
        assert_eq!(a.field, b.field);
        assert_ne!(a.field, c.field);
    }

    #[test]
    fn normalize_three_four_five() {
        let meta = GeometryMeta::for_grid(1, 1, 8, 8, "n");
        let field = FeatureField::new(1, 1, 2, vec![3.0, 4.0], meta).unwrap();
        let unit = l2_normalize(&field).unwrap();
        assert_eq!(unit.features(), &[0.6, 0.8]);
        let again = l2_normalize(&unit).unwrap();
        for (a, b) in again.features().iter().zip(unit.features()) {
            assert!((a - b).abs() <= f32::EPSILON * a.abs().max(1.0));
        }
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let meta = GeometryMeta::for_grid(1, 2, 8, 8, "z");
        let field = FeatureField::new(1, 2, 2, vec![1.0, 0.0, 0.0, 0.0], meta).unwrap();
        assert!(matches!(
            l2_normalize(&field),
            Err(FeatureIoError::DegenerateFeature { patch: 1 })
        ));
    }

    #[test]
    fn planted_object_is_off_center() {
        for seed in 0..20 {
            let obj = synth_planted_object(16, 16, 0.0, seed).unwrap();
            let b = obj.object;
            assert!((4..=8).contains(&b.height()) && (4..=8).contains(&b.width()));
            let dr = (b.row0 + b.row1) as f64 / 2.0 - 7.5;
            let dc = (b.col0 + b.col1) as f64 / 2.0 - 7.5;
            assert!(dr.abs().max(dc.abs()) >= 2.0);
            let fg = obj.planted.truth.labels.iter().filter(|&&l| l == 1).count();
            assert_eq!(fg, b.area());
        }
        assert!(synth_planted_object(3, 8, 0.0, 0).is_err());
    }
}
