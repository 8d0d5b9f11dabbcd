//! Run manifests: the fully resolved invocation plus content digests.

use std::path::PathBuf;

use deepcut_core::pipeline::{BoxMode, Composition, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::args::{Metric, SynthKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub grid_h: usize,
    pub grid_w: usize,
    pub k: usize,
    pub sigma: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub truth_out: Option<PathBuf>,
    pub truth_pgm: Option<PathBuf>,
    pub truth_boxes: Option<PathBuf>,
}

/// A command with every default and override already applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    Segment {
        inputs: Vec<PathBuf>,
        config: TrainConfig,
        /// Foreground part count when running two-stage.
        two_stage: Option<usize>,
        out_dir: Option<PathBuf>,
        jobs: usize,
    },
    Localize {
        inputs: Vec<PathBuf>,
        config: TrainConfig,
        box_mode: BoxMode,
        out_dir: Option<PathBuf>,
        jobs: usize,
    },
    Parts {
        inputs: Vec<PathBuf>,
        config: TrainConfig,
        composition: Composition,
        out_dir: Option<PathBuf>,
    },
    Cluster {
        inputs: Vec<PathBuf>,
        config: TrainConfig,
        out_dir: Option<PathBuf>,
    },
    Synth {
        spec: SynthSpec,
    },
    Eval {
        metric: Metric,
        pred: Vec<PathBuf>,
        truth: Vec<PathBuf>,
    },
    ExtractCheck {
        inputs: Vec<PathBuf>,
        expect_embed_dim: Option<usize>,
    },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Segment { two_stage: None, .. } => "segment",
            Invocation::Segment { .. } => "two-stage",
            Invocation::Localize { .. } => "localize",
            Invocation::Parts { .. } => "parts",
            Invocation::Cluster { .. } => "cluster",
            Invocation::Synth { .. } => "synth",
            Invocation::Eval { .. } => "eval",
            Invocation::ExtractCheck { .. } => "extract-check",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Invocation::Segment { config, .. }
            | Invocation::Localize { config, .. }
            | Invocation::Parts { config, .. }
            | Invocation::Cluster { config, .. } => Some(config.seed),
            Invocation::Synth { spec } => Some(spec.seed),
            Invocation::Eval { .. } | Invocation::ExtractCheck { .. } => None,
        }
    }

    pub fn out_dir(&self) -> Option<&PathBuf> {
        match self {
            Invocation::Segment { out_dir, .. }
            | Invocation::Localize { out_dir, .. }
            | Invocation::Parts { out_dir, .. }
            | Invocation::Cluster { out_dir, .. } => out_dir.as_ref(),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Digest {
    pub name: String,
    pub sha256: String,
}

impl Digest {
    pub fn of(name: impl Into<String>, bytes: &[u8]) -> Self {
        Self {
            name: name.into(),
            sha256: hex::encode(Sha256::digest(bytes)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: Option<u64>,
    pub invocation: Invocation,
    pub inputs: Vec<Digest>,
    /// `stdout` first, then every written file in write order.
    pub outputs: Vec<Digest>,
    pub wall_time_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub ok: bool,
    pub command: String,
    pub mismatches: Vec<String>,
}

fn compare(kind: &str, recorded: &[Digest], actual: &[Digest], out: &mut Vec<String>) {
    if recorded.len() != actual.len() {
        out.push(format!("{kind}: recorded {} entries, replay produced {}", recorded.len(), actual.len()));
    }
    for (r, a) in recorded.iter().zip(actual) {
        if r.name != a.name {
            out.push(format!("{kind}: recorded {} but replay produced {}", r.name, a.name));
        } else if r.sha256 != a.sha256 {
            out.push(format!("{kind} {}: recorded {} but got {}", r.name, r.sha256, a.sha256));
        }
    }
}

impl ReplayReport {
    pub fn compare(recorded: &RunManifest, inputs: &[Digest], outputs: &[Digest]) -> Self {
        let mut mismatches = Vec::new();
        compare("input", &recorded.inputs, inputs, &mut mismatches);
        compare("output", &recorded.outputs, outputs, &mut mismatches);
        Self {
            ok: mismatches.is_empty(),
            command: recorded.invocation.name().to_string(),
            mismatches,
        }
    }
}
