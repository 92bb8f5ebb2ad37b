//! Fixed random feature expansion `phi(h) = act(h R)`.

use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};
use crate::rng::{keyed, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
            Activation::Tanh => libm::tanh(x),
        }
    }
}

/// The projection matrix `R` (d x M) and its activation.
///
/// `R` never changes after construction. Column `j` is drawn from its own
/// generator stream keyed by `(seed, j)`, so the first `M` columns are the
/// same whatever the total width.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomExpansion {
    weights: Matrix,
    activation: Activation,
    seed: u64,
}

impl RandomExpansion {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation, seed: u64) -> Self {
        let mut weights = Matrix::zeros(input_dim, output_dim);
        for j in 0..output_dim {
            let mut rng = keyed(seed, Purpose::Expansion, j as u64);
            for i in 0..input_dim {
                weights[(i, j)] = StandardNormal.sample(&mut rng);
            }
        }
        Self {
            weights,
            activation,
            seed,
        }
    }

    /// Wraps an explicit projection matrix (mostly for tests).
    pub fn from_weights(weights: Matrix, activation: Activation) -> Self {
        Self {
            weights,
            activation,
            seed: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    /// Expands one feature row into `out` (length M).
    pub fn expand_row(&self, h: &[f64], out: &mut [f64]) -> Result<()> {
        if h.len() != self.input_dim() {
            return Err(Error::Shape {
                context: "expand: feature width",
                expected: self.input_dim(),
                actual: h.len(),
            });
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, &hi) in h.iter().enumerate() {
            if hi != 0.0 {
                axpy(hi, self.weights.row(i), out);
            }
        }
        let act = self.activation;
        out.iter_mut().for_each(|v| *v = act.apply(*v));
        Ok(())
    }

    /// Expands every row of `features` (B x d) into a B x M matrix.
    pub fn expand(&self, features: &Matrix, expert_id: usize) -> Result<ExpandedBatch> {
        if features.cols() != self.input_dim() && features.rows() > 0 {
            return Err(Error::Shape {
                context: "expand: feature width",
                expected: self.input_dim(),
                actual: features.cols(),
            });
        }
        let mut values = Matrix::zeros(features.rows(), self.output_dim());
        for r in 0..features.rows() {
            self.expand_row(features.row(r), values.row_mut(r))?;
        }
        Ok(ExpandedBatch { values, expert_id })
    }

    pub fn expand_one(&self, h: &[f64]) -> Result<Vec<f64>> {
        let mut out = alloc::vec![0.0; self.output_dim()];
        self.expand_row(h, &mut out)?;
        Ok(out)
    }
}

/// Expanded features of one batch, tagged with the expert active when the
/// batch was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedBatch {
    pub values: Matrix,
    pub expert_id: usize,
}

impl ExpandedBatch {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }
}
