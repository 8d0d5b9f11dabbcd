//! One-layer GCN clustering head with hand-derived gradients.
//!
//! ```text
//! P  = D^-1 W N             propagated node features (fixed per graph)
//! Z0 = P Θ                  graph convolution
//! H0 = elu(Z0)
//! Z1 = H0 W1 + b1
//! H1 = dropout(elu(Z1))     inverted dropout, train mode only
//! Z2 = H1 W2 + b2
//! S  = softmax(Z2)          row-wise
//! ```
//!
//! `D` is the row sum of `|W|`, which is the ordinary degree on the
//! non-negative N-cut graph and keeps the operator bounded on signed graphs.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::affinity::AffinityMatrix;

pub const DEFAULT_HIDDEN: usize = 64;
pub const DROPOUT_RATE: f64 = 0.25;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("node {node} has zero total affinity")]
    DegenerateGraph { node: usize },
    #[error("non-finite values after layer `{layer}`")]
    NumericFailure { layer: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Trainable tensors of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `c x h`
    pub gcn_weight: Array2<f64>,
    /// `h x h/2`
    pub mlp1_weight: Array2<f64>,
    pub mlp1_bias: Array1<f64>,
    /// `h/2 x k_out`
    pub mlp2_weight: Array2<f64>,
    pub mlp2_bias: Array1<f64>,
}

/// Gradients share the parameter layout.
pub type ParamGradients = ModelParams;

impl ModelParams {
    /// Glorot-uniform weights and zero biases, deterministic in `seed`.
    pub fn init(c: usize, hidden: usize, k_out: usize, seed: u64) -> Result<Self, NnError> {
        if c == 0 || hidden == 0 || k_out == 0 {
            return Err(NnError::Argument(format!(
                "dimensions must be positive (c={c}, hidden={hidden}, k_out={k_out})"
            )));
        }
        if !hidden.is_multiple_of(2) {
            return Err(NnError::Argument(format!("hidden size {hidden} must be even")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
        };
        let half = hidden / 2;
        Ok(Self {
            gcn_weight: glorot(c, hidden),
            mlp1_weight: glorot(hidden, half),
            mlp1_bias: Array1::zeros(half),
            mlp2_weight: glorot(half, k_out),
            mlp2_bias: Array1::zeros(k_out),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gcn_weight: Array2::zeros(self.gcn_weight.raw_dim()),
            mlp1_weight: Array2::zeros(self.mlp1_weight.raw_dim()),
            mlp1_bias: Array1::zeros(self.mlp1_bias.raw_dim()),
            mlp2_weight: Array2::zeros(self.mlp2_weight.raw_dim()),
            mlp2_bias: Array1::zeros(self.mlp2_bias.raw_dim()),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.gcn_weight.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.gcn_weight.ncols()
    }

    pub fn k_out(&self) -> usize {
        self.mlp2_bias.len()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// The five tensors as flat slices, in declaration order.
    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            self.gcn_weight.as_slice().expect("standard layout"),
            self.mlp1_weight.as_slice().expect("standard layout"),
            self.mlp1_bias.as_slice().expect("standard layout"),
            self.mlp2_weight.as_slice().expect("standard layout"),
            self.mlp2_bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.gcn_weight.as_slice_mut().expect("standard layout"),
            self.mlp1_weight.as_slice_mut().expect("standard layout"),
            self.mlp1_bias.as_slice_mut().expect("standard layout"),
            self.mlp2_weight.as_slice_mut().expect("standard layout"),
            self.mlp2_bias.as_slice_mut().expect("standard layout"),
        ]
    }

    /// Tensor shapes as `(rows, cols)`; biases are `(1, len)`.
    pub fn shapes(&self) -> [(usize, usize); 5] {
        [
            self.gcn_weight.dim(),
            self.mlp1_weight.dim(),
            (1, self.mlp1_bias.len()),
            self.mlp2_weight.dim(),
            (1, self.mlp2_bias.len()),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Row-stochastic soft assignment of nodes to clusters.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub probs: Array2<f64>,
}

impl ClusterAssignment {
    pub fn n(&self) -> usize {
        self.probs.nrows()
    }

    pub fn k(&self) -> usize {
        self.probs.ncols()
    }

    /// Per-row argmax; ties go to the lowest cluster id.
    pub fn hard_labels(&self) -> Vec<usize> {
        self.probs
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (j, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Eval,
    Train { dropout_rate: f64, seed: u64 },
}

impl Mode {
    /// Train mode with the default 0.25 dropout rate.
    pub fn train(seed: u64) -> Self {
        Mode::Train {
            dropout_rate: DROPOUT_RATE,
            seed,
        }
    }
}

/// Intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct ActivationCache {
    train: bool,
    /// graph-convolution output (pre-activation)
    z0: Array2<f64>,
    h0: Array2<f64>,
    z1: Array2<f64>,
    h1: Array2<f64>,
    /// inverted-dropout multipliers (0 or 1/(1-rate)); `None` when no dropout
    mask: Option<Array2<f64>>,
    h1_dropped: Array2<f64>,
    probs: Array2<f64>,
}

impl ActivationCache {
    pub fn propagated_embedding(&self) -> &Array2<f64> {
        &self.z0
    }

    pub fn dropout_mask(&self) -> Option<&Array2<f64>> {
        self.mask.as_ref()
    }
}

/// Degree-normalized aggregation `D^-1 W N` with `D = rowsum(|W|)`.
pub fn propagate_features(
    w: &AffinityMatrix,
    node_features: &Array2<f64>,
) -> Result<Array2<f64>, NnError> {
    if w.n() != node_features.nrows() {
        return Err(NnError::Argument(format!(
            "graph has {} nodes but feature matrix has {} rows",
            w.n(),
            node_features.nrows()
        )));
    }
    let norm = w.abs_degree();
    if let Some(node) = norm.iter().position(|&d| d == 0.0 || !d.is_finite()) {
        return Err(NnError::DegenerateGraph { node });
    }
    let mut aggregated = w.weights().dot(node_features);
    for (mut row, &d) in aggregated.rows_mut().into_iter().zip(norm.iter()) {
        row /= d;
    }
    Ok(aggregated)
}

/// `D^-1 W N Θ`; no nonlinearity.
pub fn gcn_propagate(
    w: &AffinityMatrix,
    node_features: &Array2<f64>,
    theta: &Array2<f64>,
) -> Result<Array2<f64>, NnError> {
    let aggregated = propagate_features(w, node_features)?;
    if aggregated.ncols() != theta.nrows() {
        return Err(NnError::Argument(format!(
            "feature width {} does not match GCN weight rows {}",
            aggregated.ncols(),
            theta.nrows()
        )));
    }
    Ok(aggregated.dot(theta))
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// ELU derivative from the cached pre- and post-activation values.
fn elu_grad(pre: f64, post: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        post + 1.0
    }
}

fn check(layer: &'static str, values: &Array2<f64>) -> Result<(), NnError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NnError::NumericFailure { layer })
    }
}

/// Runs the network on pre-propagated features `P = D^-1 W N`.
pub fn forward(
    params: &ModelParams,
    propagated: ArrayView2<'_, f64>,
    mode: Mode,
) -> Result<(ClusterAssignment, ActivationCache), NnError> {
    if propagated.ncols() != params.embed_dim() {
        return Err(NnError::Argument(format!(
            "input width {} does not match model input {}",
            propagated.ncols(),
            params.embed_dim()
        )));
    }
    let z0 = propagated.dot(&params.gcn_weight);
    check("gcn", &z0)?;
    let h0 = z0.mapv(elu);

    let z1 = h0.dot(&params.mlp1_weight) + &params.mlp1_bias;
    check("mlp1", &z1)?;
    let h1 = z1.mapv(elu);

    let (mask, h1_dropped) = match mode {
        Mode::Train { dropout_rate, seed } if dropout_rate > 0.0 => {
            if !(dropout_rate < 1.0) {
                return Err(NnError::Argument(format!(
                    "dropout rate {dropout_rate} must be in [0, 1)"
                )));
            }
            let keep_scale = 1.0 / (1.0 - dropout_rate);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = Array2::from_shape_simple_fn(h1.raw_dim(), || {
                if rng.random::<f64>() < dropout_rate {
                    0.0
                } else {
                    keep_scale
                }
            });
            let dropped = &h1 * &mask;
            (Some(mask), dropped)
        }
        _ => (None, h1.clone()),
    };

    let z2 = h1_dropped.dot(&params.mlp2_weight) + &params.mlp2_bias;
    check("mlp2", &z2)?;
    let probs = softmax_rows(&z2);
    check("softmax", &probs)?;

    let cache = ActivationCache {
        train: matches!(mode, Mode::Train { .. }),
        z0,
        h0,
        z1,
        h1,
        mask,
        h1_dropped,
        probs: probs.clone(),
    };
    Ok((ClusterAssignment { probs }, cache))
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Exact parameter gradients for a loss whose gradient w.r.t. `S` is `d_probs`.
pub fn backward(
    params: &ModelParams,
    propagated: ArrayView2<'_, f64>,
    cache: &ActivationCache,
    d_probs: &Array2<f64>,
) -> Result<ParamGradients, NnError> {
    if !cache.train {
        return Err(NnError::Contract(
            "backward requires a cache from a train-mode forward".into(),
        ));
    }
    if d_probs.dim() != cache.probs.dim() || propagated.nrows() != cache.z0.nrows() {
        return Err(NnError::Contract(format!(
            "gradient shape {:?} does not match cached output {:?}",
            d_probs.dim(),
            cache.probs.dim()
        )));
    }

    // softmax: dZ2 = S ⊙ (dS - <dS, S>_row)
    let s = &cache.probs;
    let row_dots = (d_probs * s).sum_axis(Axis(1)).insert_axis(Axis(1));
    let dz2 = s * &(d_probs - &row_dots);

    let g_mlp2_weight = cache.h1_dropped.t().dot(&dz2);
    let g_mlp2_bias = dz2.sum_axis(Axis(0));

    let mut dz1 = dz2.dot(&params.mlp2_weight.t());
    if let Some(mask) = &cache.mask {
        dz1 *= mask;
    }
    Zip::from(&mut dz1)
        .and(&cache.z1)
        .and(&cache.h1)
        .for_each(|g, &pre, &post| *g *= elu_grad(pre, post));

    let g_mlp1_weight = cache.h0.t().dot(&dz1);
    let g_mlp1_bias = dz1.sum_axis(Axis(0));

    let mut dz0 = dz1.dot(&params.mlp1_weight.t());
    Zip::from(&mut dz0)
        .and(&cache.z0)
        .and(&cache.h0)
        .for_each(|g, &pre, &post| *g *= elu_grad(pre, post));

    let g_gcn_weight = propagated.t().dot(&dz0);

    Ok(ModelParams {
        gcn_weight: g_gcn_weight,
        mlp1_weight: g_mlp1_weight,
        mlp1_bias: g_mlp1_bias,
        mlp2_weight: g_mlp2_weight,
        mlp2_bias: g_mlp2_bias,
    })
}
