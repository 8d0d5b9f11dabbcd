//! Adam optimizer and binary checkpoints of model state.

use std::io::{self, Read, Write};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{ModelParams, ParamGradients};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates and step counter for one model instance.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: ModelParams,
    pub second_moment: ModelParams,
}

impl OptState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update on a flat tensor; `step` is 1-based.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    cfg: &AdamConfig,
) {
    let bias1 = 1.0 - cfg.beta1.powf(step as f64);
    let bias2 = 1.0 - cfg.beta2.powf(step as f64);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Applies one Adam step to every tensor and advances the step counter.
pub fn adam_step(params: &mut ModelParams, grads: &ParamGradients, opt: &mut OptState) {
    assert_eq!(
        params.shapes(),
        grads.shapes(),
        "gradient shapes must match parameters"
    );
    opt.step += 1;
    let step = opt.step;
    let cfg = opt.config;
    let grads = grads.tensors();
    for (((param, grad), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads)
        .zip(opt.first_moment.tensors_mut())
        .zip(opt.second_moment.tensors_mut())
    {
        adam_update(param, grad, m, v, step, &cfg);
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    embed_dim: usize,
    hidden: usize,
    k_out: usize,
    step: u64,
    adam: AdamConfig,
}

/// Writes parameters followed by both Adam moments.
///
/// ```text
/// "DCKP" | u32 version=1 | u32 tensor_count=15 | u32 meta_len | meta JSON
/// per tensor: u32 rows | u32 cols | rows*cols f64 little-endian
/// ```
pub fn write_checkpoint<W: Write>(
    params: &ModelParams,
    opt: &OptState,
    mut sink: W,
) -> Result<(), CheckpointError> {
    let meta = serde_json::to_vec(&CheckpointMeta {
        embed_dim: params.embed_dim(),
        hidden: params.hidden(),
        k_out: params.k_out(),
        step: opt.step,
        adam: opt.config,
    })
    .map_err(|e| CheckpointError::Format(e.to_string()))?;
    sink.write_all(CHECKPOINT_MAGIC)?;
    sink.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    sink.write_all(&15u32.to_le_bytes())?;
    sink.write_all(&(meta.len() as u32).to_le_bytes())?;
    sink.write_all(&meta)?;
    for set in [params, &opt.first_moment, &opt.second_moment] {
        for (data, (rows, cols)) in set.tensors().into_iter().zip(set.shapes()) {
            sink.write_all(&(rows as u32).to_le_bytes())?;
            sink.write_all(&(cols as u32).to_le_bytes())?;
            let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            sink.write_all(&bytes)?;
        }
    }
    sink.flush()?;
    Ok(())
}

fn read_u32<R: Read>(source: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    source.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_checkpoint<R: Read>(mut source: R) -> Result<(ModelParams, OptState), CheckpointError> {
    let mut magic = [0u8; 4];
    source.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = read_u32(&mut source)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = read_u32(&mut source)?;
    if count != 15 {
        return Err(CheckpointError::Format(format!("expected 15 tensors, found {count}")));
    }
    let meta_len = read_u32(&mut source)? as usize;
    let mut meta = vec![0u8; meta_len];
    source.read_exact(&mut meta)?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&meta).map_err(|e| CheckpointError::Format(e.to_string()))?;

    let template = ModelParams {
        gcn_weight: Array2::zeros((meta.embed_dim, meta.hidden)),
        mlp1_weight: Array2::zeros((meta.hidden, meta.hidden / 2)),
        mlp1_bias: Array1::zeros(meta.hidden / 2),
        mlp2_weight: Array2::zeros((meta.hidden / 2, meta.k_out)),
        mlp2_bias: Array1::zeros(meta.k_out),
    };
    let mut sets = [template.clone(), template.clone(), template];
    for set in sets.iter_mut() {
        let shapes = set.shapes();
        for (data, (rows, cols)) in set.tensors_mut().into_iter().zip(shapes) {
            let (r, c) = (read_u32(&mut source)? as usize, read_u32(&mut source)? as usize);
            if (r, c) != (rows, cols) {
                return Err(CheckpointError::Format(format!(
                    "tensor shape {r}x{c}, expected {rows}x{cols}"
                )));
            }
            let mut bytes = vec![0u8; data.len() * 8];
            source.read_exact(&mut bytes)?;
            for (dst, chunk) in data.iter_mut().zip(bytes.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
        }
    }
    let [params, first_moment, second_moment] = sets;
    if !params.is_finite() {
        return Err(CheckpointError::Format("non-finite parameter".into()));
    }
    Ok((
        params,
        OptState {
            config: meta.adam,
            step: meta.step,
            first_moment,
            second_moment,
        },
    ))
}
