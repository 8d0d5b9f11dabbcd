//! Per-image test-time optimization and the tasks built on it.
//!
//! Every task reduces to [`segment`]: build the affinity graph, train a fresh
//! model for a fixed number of full-graph Adam steps, then take the per-node
//! argmax of an eval-mode forward pass.

use std::collections::VecDeque;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affinity::{self, AffinityConfig, AffinityError, AffinityMatrix};
use crate::feature_io::{FeatureField, FeatureIoError, GeometryMeta};
use crate::mask::{BBox, LabelMask, MaskError};
use crate::nn::{self, ClusterAssignment, ModelParams, Mode, NnError};
use crate::objectives::{self, NcutSign, ObjectiveError};
use crate::optim::{self, AdamConfig, OptState};

pub const DEFAULT_EPOCHS: usize = 10;
pub const PART_EPOCHS: usize = 100;
pub const DEFAULT_K_MAX: usize = 10;
pub const DEFAULT_K_FG: usize = 4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Affinity(#[from] AffinityError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Features(#[from] FeatureIoError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("non-finite loss at epoch {epoch}")]
    Optimization { epoch: usize },
    #[error("no foreground object found")]
    NoObject,
    #[error("foreground has {found} nodes, fewer than the {needed} requested parts")]
    InsufficientForeground { found: usize, needed: usize },
    #[error("geometry mismatch: {0}")]
    Geometry(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    NCut,
    Cc,
}

/// Everything that determines one optimization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Number of clusters for the N-cut head.
    pub k: usize,
    /// Assignment width for the correlation-clustering head.
    pub k_max: usize,
    pub affinity: AffinityConfig,
    pub epochs: usize,
    pub hidden: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub dropout: f64,
    pub ncut_sign: NcutSign,
    pub reset_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::NCut,
            k: 2,
            k_max: DEFAULT_K_MAX,
            affinity: AffinityConfig::default(),
            epochs: DEFAULT_EPOCHS,
            hidden: nn::DEFAULT_HIDDEN,
            seed: 0,
            adam: AdamConfig::default(),
            dropout: nn::DROPOUT_RATE,
            ncut_sign: NcutSign::Default,
            reset_weights: true,
        }
    }
}

impl TrainConfig {
    pub fn ncut(k: usize) -> Self {
        Self {
            loss: LossKind::NCut,
            k,
            ..Self::default()
        }
    }

    pub fn cc(alpha: f64, k_max: usize) -> Self {
        Self {
            loss: LossKind::Cc,
            k_max,
            affinity: AffinityConfig {
                alpha,
                ..AffinityConfig::default()
            },
            ..Self::default()
        }
    }

    /// Width of the softmax output.
    pub fn k_out(&self) -> usize {
        match self.loss {
            LossKind::NCut => self.k,
            LossKind::Cc => self.k_max,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.epochs == 0 {
            return Err(PipelineError::Config("epochs must be at least 1".into()));
        }
        if self.loss == LossKind::NCut && self.k < 2 {
            return Err(PipelineError::Config(format!("N-cut needs k >= 2, got {}", self.k)));
        }
        if self.loss == LossKind::Cc && self.k_max < 1 {
            return Err(PipelineError::Config("k_max must be at least 1".into()));
        }
        if self.hidden < 2 || !self.hidden.is_multiple_of(2) {
            return Err(PipelineError::Config(format!(
                "hidden size {} must be even and positive",
                self.hidden
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(PipelineError::Config(format!(
                "dropout {} must be in [0, 1)",
                self.dropout
            )));
        }
        if !(self.adam.lr > 0.0) {
            return Err(PipelineError::Config(format!("learning rate {} must be positive", self.adam.lr)));
        }
        self.affinity.validate()?;
        Ok(())
    }

    fn dropout_mode(&self, epoch: usize) -> Mode {
        Mode::Train {
            dropout_rate: self.dropout,
            seed: derive_seed(self.seed, DROPOUT_STREAM, epoch as u64),
        }
    }
}

const DROPOUT_STREAM: u64 = 1;
const STAGE2_STREAM: u64 = 2;

/// Deterministic child seed (splitmix64 finalizer over the mixed inputs).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Affinity graph plus the degree-normalized node features fed to the GCN.
pub struct PreparedGraph {
    pub affinity: AffinityMatrix,
    pub propagated: Array2<f64>,
}

pub fn prepare_graph(field: &FeatureField, cfg: &TrainConfig) -> Result<PreparedGraph, PipelineError> {
    let affinity = match cfg.loss {
        LossKind::NCut => affinity::build_ncut_affinity(field, &cfg.affinity)?,
        LossKind::Cc => affinity::build_cc_affinity(field, &cfg.affinity)?,
    };
    let node_features = if cfg.affinity.normalize_features {
        crate::feature_io::l2_normalize(field)?.to_matrix()
    } else {
        field.to_matrix()
    };
    let propagated = nn::propagate_features(&affinity, &node_features)?;
    Ok(PreparedGraph {
        affinity,
        propagated,
    })
}

/// A model instance: parameters plus optimizer state.
#[derive(Clone, Debug)]
pub struct Model {
    pub params: ModelParams,
    pub opt: OptState,
}

impl Model {
    pub fn new(embed_dim: usize, cfg: &TrainConfig) -> Result<Self, PipelineError> {
        let params = ModelParams::init(embed_dim, cfg.hidden, cfg.k_out(), cfg.seed)?;
        let opt = OptState::new(&params, cfg.adam);
        Ok(Self { params, opt })
    }

    /// Runs `cfg.epochs` full-graph Adam steps and returns the loss per step.
    pub fn fit(&mut self, graph: &PreparedGraph, cfg: &TrainConfig) -> Result<Vec<f64>, PipelineError> {
        let mut trace = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let (s, cache) = nn::forward(&self.params, graph.propagated.view(), cfg.dropout_mode(epoch))?;
            let loss = match cfg.loss {
                LossKind::NCut => objectives::ncut_loss(s.probs.view(), &graph.affinity, cfg.ncut_sign)?,
                LossKind::Cc => objectives::cc_loss(s.probs.view(), &graph.affinity)?,
            };
            if !loss.value.is_finite() {
                return Err(PipelineError::Optimization { epoch });
            }
            let grads = nn::backward(&self.params, graph.propagated.view(), &cache, &loss.grad)?;
            optim::adam_step(&mut self.params, &grads, &mut self.opt);
            if !self.params.is_finite() {
                return Err(PipelineError::Optimization { epoch });
            }
            trace.push(loss.value);
        }
        Ok(trace)
    }

    /// Eval-mode (no dropout) assignment.
    pub fn predict(&self, graph: &PreparedGraph) -> Result<ClusterAssignment, PipelineError> {
        Ok(nn::forward(&self.params, graph.propagated.view(), Mode::Eval)?.0)
    }
}

#[derive(Clone, Debug)]
pub struct Segmentation {
    pub mask: LabelMask,
    pub loss_trace: Vec<f64>,
    pub assignment: ClusterAssignment,
}

fn mask_for(field: &FeatureField, labels: Vec<usize>) -> Result<LabelMask, PipelineError> {
    Ok(LabelMask::new(field.grid_h(), field.grid_w(), labels)?)
}

/// Clusters the patches of one image with a freshly initialized model.
pub fn segment(field: &FeatureField, cfg: &TrainConfig) -> Result<Segmentation, PipelineError> {
    cfg.validate()?;
    let graph = prepare_graph(field, cfg)?;
    let mut model = Model::new(field.embed_dim(), cfg)?;
    let loss_trace = model.fit(&graph, cfg)?;
    let assignment = model.predict(&graph)?;
    let mask = mask_for(field, assignment.hard_labels())?;
    Ok(Segmentation {
        mask,
        loss_trace,
        assignment,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlessResult {
    pub labels: Vec<usize>,
    pub k_found: usize,
    pub loss_trace: Vec<f64>,
}

/// Correlation clustering of arbitrary items; the cluster count is read off
/// the number of non-empty argmax clusters.
pub fn kless_cluster(items: &FeatureField, cfg: &TrainConfig) -> Result<KlessResult, PipelineError> {
    if cfg.loss != LossKind::Cc {
        return Err(PipelineError::Config(
            "k-less clustering requires the correlation-clustering loss".into(),
        ));
    }
    let seg = segment(items, cfg)?;
    Ok(KlessResult {
        k_found: seg.mask.k_found,
        labels: seg.mask.labels,
        loss_trace: seg.loss_trace,
    })
}

/// Picks the background cluster as the one touching the most image borders.
///
/// Ties go to the cluster with more cells, then to the smaller label id.
pub fn identify_background(mask: &LabelMask) -> usize {
    let (h, w) = (mask.grid_h, mask.grid_w);
    let labels = mask.label_set();
    let border_count = |label: usize| {
        let top = (0..w).any(|c| mask.get(0, c) == label);
        let bottom = (0..w).any(|c| mask.get(h - 1, c) == label);
        let left = (0..h).any(|r| mask.get(r, 0) == label);
        let right = (0..h).any(|r| mask.get(r, w - 1) == label);
        [top, bottom, left, right].iter().filter(|&&b| b).count()
    };
    let cells = |label: usize| mask.labels.iter().filter(|&&l| l == label).count();
    labels
        .iter()
        .copied()
        .max_by(|&a, &b| {
            border_count(a)
                .cmp(&border_count(b))
                .then(cells(a).cmp(&cells(b)))
                .then(b.cmp(&a))
        })
        .expect("mask has at least one label")
}

/// Splits a mask into foreground cells; a single-cluster mask has no
/// background and is entirely foreground.
fn foreground_cells(mask: &LabelMask) -> (Option<usize>, Vec<bool>) {
    if mask.k_found <= 1 {
        return (None, vec![true; mask.len()]);
    }
    let bg = identify_background(mask);
    (Some(bg), mask.labels.iter().map(|&l| l != bg).collect())
}

/// Binary mask (1 = foreground) and the background label it was derived from.
pub fn foreground_mask(mask: &LabelMask) -> (Option<usize>, LabelMask) {
    let (background, fg) = foreground_cells(mask);
    let labels = fg.into_iter().map(usize::from).collect();
    let binary = LabelMask::new(mask.grid_h, mask.grid_w, labels).expect("same shape as input");
    (background, binary)
}

/// 4-connected components of the `true` cells, largest first (ties by
/// earliest cell in row-major order).
pub fn connected_components(cells: &[bool], grid_h: usize, grid_w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; cells.len()];
    let mut components = Vec::new();
    for start in 0..cells.len() {
        if !cells[start] || seen[start] {
            continue;
        }
        let mut component = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(idx) = queue.pop_front() {
            component.push(idx);
            let (r, c) = (idx / grid_w, idx % grid_w);
            let mut visit = |nr: usize, nc: usize| {
                let n = nr * grid_w + nc;
                if cells[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            };
            if r > 0 {
                visit(r - 1, c);
            }
            if r + 1 < grid_h {
                visit(r + 1, c);
            }
            if c > 0 {
                visit(r, c - 1);
            }
            if c + 1 < grid_w {
                visit(r, c + 1);
            }
        }
        component.sort_unstable();
        components.push(component);
    }
    // stable sort keeps discovery order among equal sizes
    components.sort_by_key(|c| std::cmp::Reverse(c.len()));
    components
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxMode {
    /// Box the largest 4-connected foreground component.
    #[default]
    Largest,
    /// Box every foreground cell.
    All,
}

/// Box around the foreground of a segmentation mask.
pub fn box_foreground(mask: &LabelMask, mode: BoxMode) -> Result<(Option<usize>, BBox), PipelineError> {
    let (background, fg) = foreground_cells(mask);
    let cells = match mode {
        BoxMode::All => fg,
        BoxMode::Largest => {
            let components = connected_components(&fg, mask.grid_h, mask.grid_w);
            let mut cells = vec![false; mask.len()];
            for &idx in components.first().ok_or(PipelineError::NoObject)? {
                cells[idx] = true;
            }
            cells
        }
    };
    let bbox = BBox::enclosing(&cells, mask.grid_w).ok_or(PipelineError::NoObject)?;
    Ok((background, bbox))
}

#[derive(Clone, Debug)]
pub struct Localization {
    pub patch_box: BBox,
    pub pixel_box: BBox,
    pub background: Option<usize>,
    pub segmentation: Segmentation,
}

/// Two-way segmentation followed by a box around the main object.
pub fn localize(field: &FeatureField, cfg: &TrainConfig, mode: BoxMode) -> Result<Localization, PipelineError> {
    let mut cfg = cfg.clone();
    if cfg.loss == LossKind::NCut {
        cfg.k = 2;
    }
    let segmentation = segment(field, &cfg)?;
    let (background, patch_box) = box_foreground(&segmentation.mask, mode)?;
    let pixel_box = pixel_box(&patch_box, field.meta())?;
    Ok(Localization {
        patch_box,
        pixel_box,
        background,
        segmentation,
    })
}

#[derive(Clone, Debug)]
pub struct TwoStage {
    /// 0 = background, 1..=parts_found = foreground parts.
    pub mask: LabelMask,
    pub stage1: Segmentation,
    pub background: Option<usize>,
    pub parts_found: usize,
    pub loss_trace: Vec<f64>,
}

/// Foreground/background split, then a separate clustering of the foreground.
pub fn two_stage_segment(field: &FeatureField, cfg: &TrainConfig, k_fg: usize) -> Result<TwoStage, PipelineError> {
    if k_fg < 2 {
        return Err(PipelineError::Config(format!("k_fg must be at least 2, got {k_fg}")));
    }
    let mut stage1_cfg = cfg.clone();
    stage1_cfg.k = 2;
    let stage1 = segment(field, &stage1_cfg)?;
    let (background, fg) = foreground_cells(&stage1.mask);
    let keep: Vec<usize> = (0..fg.len()).filter(|&i| fg[i]).collect();
    if keep.len() < k_fg {
        return Err(PipelineError::InsufficientForeground {
            found: keep.len(),
            needed: k_fg,
        });
    }
    let sub = affinity::induced_subfield(field, &keep)?;
    let mut stage2_cfg = cfg.clone();
    stage2_cfg.k = k_fg;
    stage2_cfg.seed = derive_seed(cfg.seed, STAGE2_STREAM, 0);
    let stage2 = segment(&sub.field, &stage2_cfg)?;

    let parts = stage2.mask.label_set();
    let mut labels = vec![0usize; field.n_nodes()];
    for (&node, &raw) in sub.members.iter().zip(&stage2.mask.labels) {
        labels[node] = 1 + parts.binary_search(&raw).expect("label is present");
    }
    let mut loss_trace = stage1.loss_trace.clone();
    loss_trace.extend(&stage2.loss_trace);
    Ok(TwoStage {
        mask: mask_for(field, labels)?,
        stage1,
        background,
        parts_found: parts.len(),
        loss_trace,
    })
}

/// How sequence mode segments each image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Composition {
    /// The shared model clusters every patch of the image.
    Direct,
    /// A fresh two-way split per image; the shared model clusters only the
    /// foreground into `k_fg` parts. Background is label 0, parts are
    /// `1 + part id` so ids stay comparable across images.
    TwoStage { k_fg: usize, stage1_epochs: usize },
}

impl Default for Composition {
    fn default() -> Self {
        Composition::TwoStage {
            k_fg: DEFAULT_K_FG,
            stage1_epochs: DEFAULT_EPOCHS,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SequenceItem {
    pub mask: LabelMask,
    pub loss_trace: Vec<f64>,
}

/// Segments images in order with one persistent model (unless
/// `cfg.reset_weights`), so cluster ids carry meaning across images.
pub fn sequence_segment(
    fields: &[FeatureField],
    cfg: &TrainConfig,
    composition: Composition,
) -> Result<Vec<SequenceItem>, PipelineError> {
    cfg.validate()?;
    let Some(first) = fields.first() else {
        return Ok(Vec::new());
    };
    let c = first.embed_dim();
    if let Some(bad) = fields.iter().position(|f| f.embed_dim() != c) {
        return Err(PipelineError::Config(format!(
            "field {bad} has embed_dim {}, expected {c}",
            fields[bad].embed_dim()
        )));
    }
    let mut part_cfg = cfg.clone();
    if let Composition::TwoStage { k_fg, .. } = composition {
        if k_fg < 2 {
            return Err(PipelineError::Config(format!("k_fg must be at least 2, got {k_fg}")));
        }
        part_cfg.k = k_fg;
    }
    let mut shared = Model::new(c, &part_cfg)?;
    let mut out = Vec::with_capacity(fields.len());
    for field in fields {
        if cfg.reset_weights {
            shared = Model::new(c, &part_cfg)?;
        }
        let item = match composition {
            Composition::Direct => {
                let graph = prepare_graph(field, &part_cfg)?;
                let loss_trace = shared.fit(&graph, &part_cfg)?;
                let labels = shared.predict(&graph)?.hard_labels();
                SequenceItem {
                    mask: mask_for(field, labels)?,
                    loss_trace,
                }
            }
            Composition::TwoStage { k_fg, stage1_epochs } => {
                let mut stage1_cfg = cfg.clone();
                stage1_cfg.k = 2;
                stage1_cfg.epochs = stage1_epochs;
                let stage1 = segment(field, &stage1_cfg)?;
                let (_, fg) = foreground_cells(&stage1.mask);
                let keep: Vec<usize> = (0..fg.len()).filter(|&i| fg[i]).collect();
                if keep.len() < k_fg {
                    return Err(PipelineError::InsufficientForeground {
                        found: keep.len(),
                        needed: k_fg,
                    });
                }
                let sub = affinity::induced_subfield(field, &keep)?;
                let graph = prepare_graph(&sub.field, &part_cfg)?;
                let mut loss_trace = stage1.loss_trace;
                loss_trace.extend(shared.fit(&graph, &part_cfg)?);
                let parts = shared.predict(&graph)?.hard_labels();
                let mut labels = vec![0usize; field.n_nodes()];
                for (&node, &part) in sub.members.iter().zip(&parts) {
                    labels[node] = 1 + part;
                }
                SequenceItem {
                    mask: mask_for(field, labels)?,
                    loss_trace,
                }
            }
        };
        out.push(item);
    }
    Ok(out)
}

/// For each pixel along one axis, the index of the token whose center is
/// nearest; ties go to the lower index.
fn nearest_token_axis(pixels: usize, tokens: usize, patch: usize, stride: usize) -> Vec<usize> {
    // compare doubled coordinates to stay in integers: pixel center 2y+1,
    // token center 2*r*stride + patch
    (0..pixels)
        .map(|y| {
            let t = 2 * y as i64 + 1 - patch as i64;
            let step = 2 * stride as i64;
            let lo = t.div_euclid(step).clamp(0, tokens as i64 - 1);
            let hi = (lo + 1).min(tokens as i64 - 1);
            let d_lo = (t - lo * step).abs();
            let d_hi = (t - hi * step).abs();
            if d_hi < d_lo {
                hi as usize
            } else {
                lo as usize
            }
        })
        .collect()
}

fn check_geometry(mask: &LabelMask, meta: &GeometryMeta) -> Result<(), PipelineError> {
    if meta.grid_dims() != Some((mask.grid_h, mask.grid_w)) {
        return Err(PipelineError::Geometry(format!(
            "mask grid {}x{} does not match geometry {meta:?}",
            mask.grid_h, mask.grid_w
        )));
    }
    Ok(())
}

/// Nearest-token upsampling of a patch mask to pixel resolution.
pub fn upsample_mask(mask: &LabelMask, meta: &GeometryMeta) -> Result<LabelMask, PipelineError> {
    check_geometry(mask, meta)?;
    let rows = nearest_token_axis(meta.image_h, mask.grid_h, meta.patch_size, meta.stride);
    let cols = nearest_token_axis(meta.image_w, mask.grid_w, meta.patch_size, meta.stride);
    let mut labels = Vec::with_capacity(meta.image_h * meta.image_w);
    for &r in &rows {
        labels.extend(cols.iter().map(|&c| mask.get(r, c)));
    }
    Ok(LabelMask::new(meta.image_h, meta.image_w, labels)?)
}

/// Pixel extent of a patch box under the same nearest-token assignment.
pub fn pixel_box(bbox: &BBox, meta: &GeometryMeta) -> Result<BBox, PipelineError> {
    let (grid_h, grid_w) = meta
        .grid_dims()
        .ok_or_else(|| PipelineError::Geometry(format!("invalid geometry {meta:?}")))?;
    bbox.validate(grid_h, grid_w)?;
    let rows = nearest_token_axis(meta.image_h, grid_h, meta.patch_size, meta.stride);
    let cols = nearest_token_axis(meta.image_w, grid_w, meta.patch_size, meta.stride);
    let span = |map: &[usize], lo: usize, hi: usize| {
        let first = map.iter().position(|&t| t >= lo).expect("token has pixels");
        let last = map.iter().rposition(|&t| t <= hi).expect("token has pixels");
        (first, last)
    };
    let (row0, row1) = span(&rows, bbox.row0, bbox.row1);
    let (col0, col1) = span(&cols, bbox.col0, bbox.col1);
    Ok(BBox::new(row0, col0, row1, col1))
}
