//! Streaming ridge router over expanded features.
//!
//! Training only ever adds to two sufficient statistics: the Gram matrix
//! `G = sum phi phi^T` (M x M) and the prototype matrix `Q` (M x T) whose
//! column `t` is the sum of the codes seen while expert `t` was active.
//! The router `U` (T x M) solves `(G + lambda I) U^T = Q` and is recomputed
//! lazily the first time it is needed after new data arrives.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::{Activation, ExpandedBatch, RandomExpansion};
use crate::linalg::{axpy, dot, solve_spd_with_jitter, Matrix};

pub const SNAPSHOT_VERSION: u32 = 1;

/// Index of the largest entry; ties go to the lowest index, NaN never wins.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Solved router weights `U` (one row per expert).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Router {
    weights: Matrix,
}

impl Router {
    pub fn from_weights(weights: Matrix) -> Self {
        Self { weights }
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn num_experts(&self) -> usize {
        self.weights.rows()
    }

    pub fn code_dim(&self) -> usize {
        self.weights.cols()
    }

    /// Routing scores `phi U^T` for one expanded code.
    pub fn scores(&self, code: &[f64]) -> Vec<f64> {
        self.weights.row_iter().map(|u| dot(u, code)).collect()
    }

    /// Expands `features`, scores every row and picks the best expert.
    pub fn route(&self, features: &Matrix, expansion: &RandomExpansion) -> Result<Routing> {
        if expansion.output_dim() != self.code_dim() {
            return Err(Error::Shape {
                context: "route: router width",
                expected: expansion.output_dim(),
                actual: self.code_dim(),
            });
        }
        let codes = expansion.expand(features, 0)?.values;
        let scores = codes.matmul_transposed(&self.weights)?;
        let selections = scores.row_iter().map(argmax).collect();
        Ok(Routing { scores, selections })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    /// B x T score matrix.
    pub scores: Matrix,
    pub selections: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterState {
    gram: Matrix,
    proto: Matrix,
    lambda: f64,
    #[serde(skip)]
    solved: Option<Router>,
    samples_seen: u64,
}

impl RouterState {
    pub fn new(code_dim: usize, num_experts: usize, lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda <= 0.0 {
            return Err(Error::Invalid(alloc::format!(
                "ridge lambda must be positive and finite, got {lambda}"
            )));
        }
        Ok(Self {
            gram: Matrix::zeros(code_dim, code_dim),
            proto: Matrix::zeros(code_dim, num_experts),
            lambda,
            solved: None,
            samples_seen: 0,
        })
    }

    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    pub fn proto(&self) -> &Matrix {
        &self.proto
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    pub fn num_experts(&self) -> usize {
        self.proto.cols()
    }

    pub fn code_dim(&self) -> usize {
        self.gram.rows()
    }

    pub fn solved(&self) -> Option<&Router> {
        self.solved.as_ref()
    }

    /// `G += Phi^T Phi`, `Q[:, expert] += Phi^T 1`.
    ///
    /// The batch is validated completely before anything is touched.
    pub fn accumulate(&mut self, batch: &ExpandedBatch) -> Result<()> {
        if batch.expert_id >= self.num_experts() {
            return Err(Error::UnknownExpert {
                id: batch.expert_id,
                count: self.num_experts(),
            });
        }
        if batch.is_empty() {
            return Ok(());
        }
        let m = self.code_dim();
        if batch.values.cols() != m {
            return Err(Error::Shape {
                context: "accumulate: code width",
                expected: m,
                actual: batch.values.cols(),
            });
        }
        if !batch.values.is_finite() {
            return Err(Error::NonFinite("accumulate: expanded batch"));
        }

        let expert = batch.expert_id;
        let codes = &batch.values;
        // Upper triangle only, one row of G at a time so it stays in cache
        // across the batch; mirrored below so G stays exactly symmetric.
        for i in 0..m {
            let g = &mut self.gram.row_mut(i)[i..];
            let mut col_sum = 0.0;
            for code in codes.row_iter() {
                let ci = code[i];
                if ci != 0.0 {
                    axpy(ci, &code[i..], g);
                    col_sum += ci;
                }
            }
            self.proto[(i, expert)] += col_sum;
        }
        self.gram.mirror_upper();
        self.samples_seen += batch.len() as u64;
        self.solved = None;
        Ok(())
    }

    /// Solves for the router, or returns the cached one.
    pub fn solve(&mut self) -> Result<&Router> {
        if self.solved.is_none() {
            let ut = solve_spd_with_jitter(&self.gram, self.lambda, &self.proto)?;
            self.solved = Some(Router::from_weights(ut.transpose()));
        }
        Ok(self.solved.as_ref().expect("just solved"))
    }

    /// Routes with the cached router. Fails if it has not been solved since
    /// the last `accumulate`.
    pub fn route(&self, features: &Matrix, expansion: &RandomExpansion) -> Result<Routing> {
        self.solved.as_ref().ok_or(Error::Unsolved)?.route(features, expansion)
    }

    /// Zero-pads `Q` up to `new_count` experts.
    pub fn grow(&mut self, new_count: usize) -> Result<()> {
        let current = self.num_experts();
        if new_count < current {
            return Err(Error::Shrink {
                current,
                requested: new_count,
            });
        }
        if new_count > current {
            self.proto.pad_columns(new_count);
            self.solved = None;
        }
        Ok(())
    }

    /// Multiplies `Q` by `factor` (used by the scale-invariance property).
    pub fn scale_proto(&mut self, factor: f64) {
        self.proto.scale(factor);
        self.solved = None;
    }

    pub fn snapshot(&self, expansion: &RandomExpansion) -> RouterSnapshot {
        RouterSnapshot {
            version: SNAPSHOT_VERSION,
            expansion_seed: expansion.seed(),
            input_dim: expansion.input_dim(),
            code_dim: self.code_dim(),
            activation: expansion.activation(),
            lambda: self.lambda,
            num_experts: self.num_experts(),
            samples_seen: self.samples_seen,
            gram: self.gram.clone(),
            proto: self.proto.clone(),
        }
    }

    pub fn from_snapshot(snap: RouterSnapshot) -> Result<Self> {
        if snap.version != SNAPSHOT_VERSION {
            return Err(Error::Invalid(alloc::format!(
                "router snapshot version {} (this build reads {})",
                snap.version,
                SNAPSHOT_VERSION
            )));
        }
        let m = snap.code_dim;
        if snap.gram.rows() != m || snap.gram.cols() != m {
            return Err(Error::Shape {
                context: "snapshot gram",
                expected: m,
                actual: snap.gram.rows(),
            });
        }
        if snap.proto.rows() != m || snap.proto.cols() != snap.num_experts {
            return Err(Error::Shape {
                context: "snapshot proto",
                expected: snap.num_experts,
                actual: snap.proto.cols(),
            });
        }
        let mut state = RouterState::new(m, snap.num_experts, snap.lambda)?;
        state.gram = snap.gram;
        state.proto = snap.proto;
        state.samples_seen = snap.samples_seen;
        Ok(state)
    }
}

/// Checkpoint form of [`RouterState`]. Fields: format version, expansion
/// seed, input width `d`, code width `M`, activation, ridge `lambda`,
/// expert count `T`, sample count `N`, `G` (M x M) and `Q` (M x T).
/// The solved router is not stored; it is recomputed on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterSnapshot {
    pub version: u32,
    pub expansion_seed: u64,
    pub input_dim: usize,
    pub code_dim: usize,
    pub activation: Activation,
    pub lambda: f64,
    pub num_experts: usize,
    pub samples_seen: u64,
    pub gram: Matrix,
    pub proto: Matrix,
}
