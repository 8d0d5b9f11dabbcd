//! Unsupervised image segmentation by test-time optimization of a small graph
//! neural network under classical graph-clustering losses.
//!
//! The input is a grid of pre-extracted patch features ([`feature_io`]). Each
//! image becomes a dense affinity graph ([`affinity`]); a one-layer GCN with an
//! MLP head ([`nn`], trained with [`optim`]) produces soft cluster assignments
//! that minimize a relaxed normalized cut or correlation-clustering objective
//! ([`objectives`]). [`pipeline`] turns the assignments into masks, boxes and
//! part labels, and [`evaluation`] scores them against ground truth.

// `!(x >= lo)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod affinity;
pub mod evaluation;
pub mod feature_io;
pub mod mask;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod pipeline;
