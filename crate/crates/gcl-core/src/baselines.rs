//! Alternative routers fitted online on the same expanded codes as the
//! ridge router.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::{ExpandedBatch, RandomExpansion};
use crate::experts::{masked_softmax, LogitMask};
use crate::linalg::{axpy, dot, Matrix};
use crate::metrics::TrainingHistory;
use crate::rng::{keyed, mix64, Purpose};
use crate::router::argmax;

/// Variance floor for the naive Bayes router.
pub const NB_EPSILON: f64 = 1e-6;
pub const RESERVOIR_CAPACITY: usize = 512;
pub const LLOYD_ITERATIONS: usize = 25;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineKind {
    Prototype {
        similarity: Similarity,
    },
    NaiveBayes,
    #[serde(rename = "kmeans")]
    KMeans {
        k: usize,
    },
    TrainedShallow {
        hidden: usize,
        lr: f64,
        iters: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BaselineRouter {
    Prototype(PrototypeRouter),
    NaiveBayes(NaiveBayesRouter),
    KMeans(KMeansRouter),
    TrainedShallow(ShallowRouter),
}

impl BaselineRouter {
    pub fn new(kind: BaselineKind, code_dim: usize, num_experts: usize, seed: u64) -> Result<Self> {
        Ok(match kind {
            BaselineKind::Prototype { similarity } => {
                Self::Prototype(PrototypeRouter::new(code_dim, num_experts, similarity))
            }
            BaselineKind::NaiveBayes => Self::NaiveBayes(NaiveBayesRouter::new(code_dim, num_experts)),
            BaselineKind::KMeans { k } => Self::KMeans(KMeansRouter::new(code_dim, num_experts, k, seed)?),
            BaselineKind::TrainedShallow { hidden, lr, iters } => {
                Self::TrainedShallow(ShallowRouter::new(code_dim, num_experts, hidden, lr, iters, seed)?)
            }
        })
    }

    pub fn num_experts(&self) -> usize {
        match self {
            Self::Prototype(r) => r.sums.len(),
            Self::NaiveBayes(r) => r.stats.len(),
            Self::KMeans(r) => r.reservoirs.len(),
            Self::TrainedShallow(r) => r.out.rows(),
        }
    }

    pub fn code_dim(&self) -> usize {
        match self {
            Self::Prototype(r) => r.code_dim,
            Self::NaiveBayes(r) => r.code_dim,
            Self::KMeans(r) => r.code_dim,
            Self::TrainedShallow(r) => r.input.cols(),
        }
    }

    pub fn update(&mut self, batch: &ExpandedBatch) -> Result<()> {
        check_batch(batch, self.code_dim(), self.num_experts())?;
        if batch.is_empty() {
            return Ok(());
        }
        match self {
            Self::Prototype(r) => r.update(batch),
            Self::NaiveBayes(r) => r.update(batch),
            Self::KMeans(r) => r.update(batch),
            Self::TrainedShallow(r) => r.update(batch)?,
        }
        Ok(())
    }

    /// Registers experts up to `new_count`.
    pub fn grow(&mut self, new_count: usize) -> Result<()> {
        let current = self.num_experts();
        if new_count < current {
            return Err(Error::Shrink {
                current,
                requested: new_count,
            });
        }
        match self {
            Self::Prototype(r) => {
                r.sums.resize(new_count, vec![0.0; r.code_dim]);
                r.counts.resize(new_count, 0);
            }
            Self::NaiveBayes(r) => r.stats.resize(new_count, RunningMoments::new(r.code_dim)),
            Self::KMeans(r) => {
                r.reservoirs.resize(new_count, Reservoir::default());
                r.centroids = None;
            }
            Self::TrainedShallow(r) => {
                r.out.pad_rows(new_count);
                r.out_bias.resize(new_count, 0.0);
            }
        }
        Ok(())
    }

    /// Prepares for routing. Only k-means has work to do.
    pub fn finalize(&mut self) -> Result<()> {
        if let Self::KMeans(r) = self {
            r.finalize();
        }
        Ok(())
    }

    pub fn select(&self, code: &[f64]) -> Result<usize> {
        if code.len() != self.code_dim() {
            return Err(Error::Shape {
                context: "baseline route: code width",
                expected: self.code_dim(),
                actual: code.len(),
            });
        }
        match self {
            Self::Prototype(r) => Ok(r.select(code)),
            Self::NaiveBayes(r) => Ok(r.select(code)),
            Self::KMeans(r) => r.select(code),
            Self::TrainedShallow(r) => Ok(argmax(&r.forward(code).1)),
        }
    }

    pub fn route(&self, features: &Matrix, expansion: &RandomExpansion) -> Result<Vec<usize>> {
        let codes = expansion.expand(features, 0)?;
        codes.values.row_iter().map(|c| self.select(c)).collect()
    }
}

/// Evaluation-only oracle: the lowest-id expert that trained on `label`,
/// or `None` if no expert did.
pub fn oracle_route(label: usize, history: &TrainingHistory) -> Option<usize> {
    history.lowest_expert(label)
}

fn check_batch(batch: &ExpandedBatch, code_dim: usize, experts: usize) -> Result<()> {
    if batch.expert_id >= experts {
        return Err(Error::UnknownExpert {
            id: batch.expert_id,
            count: experts,
        });
    }
    if !batch.is_empty() && batch.values.cols() != code_dim {
        return Err(Error::Shape {
            context: "baseline update: code width",
            expected: code_dim,
            actual: batch.values.cols(),
        });
    }
    if !batch.values.is_finite() {
        return Err(Error::NonFinite("baseline update: expanded batch"));
    }
    Ok(())
}

/// Argmax over experts that have data; experts without data never win.
fn best_of(scores: impl Iterator<Item = Option<f64>>) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (t, s) in scores.enumerate() {
        if let Some(s) = s {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((t, s));
            }
        }
    }
    best.map_or(0, |(t, _)| t)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-expert mean code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeRouter {
    code_dim: usize,
    similarity: Similarity,
    sums: Vec<Vec<f64>>,
    counts: Vec<u64>,
}

impl PrototypeRouter {
    pub fn new(code_dim: usize, num_experts: usize, similarity: Similarity) -> Self {
        Self {
            code_dim,
            similarity,
            sums: vec![vec![0.0; code_dim]; num_experts],
            counts: vec![0; num_experts],
        }
    }

    fn update(&mut self, batch: &ExpandedBatch) {
        let t = batch.expert_id;
        for row in batch.values.row_iter() {
            axpy(1.0, row, &mut self.sums[t]);
        }
        self.counts[t] += batch.len() as u64;
    }

    pub fn mean(&self, expert: usize) -> Option<Vec<f64>> {
        let n = *self.counts.get(expert)?;
        (n > 0).then(|| self.sums[expert].iter().map(|s| s / n as f64).collect())
    }

    fn select(&self, code: &[f64]) -> usize {
        let code_norm = libm::sqrt(dot(code, code));
        best_of((0..self.sums.len()).map(|t| {
            let mu = self.mean(t)?;
            Some(match self.similarity {
                Similarity::Cosine => {
                    let denom = code_norm * libm::sqrt(dot(&mu, &mu));
                    if denom > 0.0 {
                        dot(code, &mu) / denom
                    } else {
                        0.0
                    }
                }
                Similarity::Euclidean => -sq_dist(code, &mu),
            })
        }))
    }
}

/// Count, mean and sum of squared deviations per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningMoments {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl RunningMoments {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    /// Merges a batch by the pairwise (Chan et al.) combination rule.
    pub fn merge_rows(&mut self, rows: &Matrix) {
        let nb = rows.rows();
        if nb == 0 {
            return;
        }
        let nbf = nb as f64;
        let mut bmean = vec![0.0; self.mean.len()];
        for r in rows.row_iter() {
            axpy(1.0, r, &mut bmean);
        }
        bmean.iter_mut().for_each(|v| *v /= nbf);
        let mut bm2 = vec![0.0; self.mean.len()];
        for r in rows.row_iter() {
            for ((m2, &x), &mu) in bm2.iter_mut().zip(r).zip(&bmean) {
                *m2 += (x - mu) * (x - mu);
            }
        }
        let na = self.count as f64;
        let n = na + nbf;
        for i in 0..self.mean.len() {
            let delta = bmean[i] - self.mean[i];
            self.mean[i] += delta * nbf / n;
            self.m2[i] += bm2[i] + delta * delta * na * nbf / n;
        }
        self.count += nb as u64;
    }

    /// Population variance per coordinate.
    pub fn variance(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.m2.iter().map(|m| m / n).collect()
    }
}

/// Diagonal Gaussian per expert, equal priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveBayesRouter {
    code_dim: usize,
    stats: Vec<RunningMoments>,
}

impl NaiveBayesRouter {
    pub fn new(code_dim: usize, num_experts: usize) -> Self {
        Self {
            code_dim,
            stats: vec![RunningMoments::new(code_dim); num_experts],
        }
    }

    pub fn moments(&self, expert: usize) -> Option<&RunningMoments> {
        self.stats.get(expert)
    }

    fn update(&mut self, batch: &ExpandedBatch) {
        self.stats[batch.expert_id].merge_rows(&batch.values);
    }

    fn select(&self, code: &[f64]) -> usize {
        best_of(self.stats.iter().map(|s| {
            if s.count == 0 {
                return None;
            }
            let var = s.variance();
            let mut ll = 0.0;
            for ((&x, &mu), &v) in code.iter().zip(&s.mean).zip(&var) {
                let v = v + NB_EPSILON;
                ll -= 0.5 * (libm::log(2.0 * core::f64::consts::PI * v) + (x - mu) * (x - mu) / v);
            }
            Some(ll)
        }))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Reservoir {
    pub rows: Vec<Vec<f64>>,
    pub seen: u64,
}

/// Bounded per-expert reservoir, clustered by Lloyd's algorithm on
/// finalize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansRouter {
    code_dim: usize,
    k: usize,
    seed: u64,
    reservoirs: Vec<Reservoir>,
    /// `(expert, centroid)` pairs, present once finalized.
    centroids: Option<Vec<(usize, Vec<f64>)>>,
}

impl KMeansRouter {
    pub fn new(code_dim: usize, num_experts: usize, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Invalid("k-means needs k >= 1".into()));
        }
        Ok(Self {
            code_dim,
            k,
            seed,
            reservoirs: vec![Reservoir::default(); num_experts],
            centroids: None,
        })
    }

    pub fn reservoir(&self, expert: usize) -> Option<&Reservoir> {
        self.reservoirs.get(expert)
    }

    pub fn centroids(&self) -> Option<&[(usize, Vec<f64>)]> {
        self.centroids.as_deref()
    }

    fn update(&mut self, batch: &ExpandedBatch) {
        let t = batch.expert_id;
        let res = &mut self.reservoirs[t];
        for row in batch.values.row_iter() {
            res.seen += 1;
            if res.rows.len() < RESERVOIR_CAPACITY {
                res.rows.push(row.to_vec());
            } else {
                let counter = mix64(((t as u64) << 40) ^ res.seen);
                let j = keyed(self.seed, Purpose::Reservoir, counter).random_range(0..res.seen);
                if (j as usize) < RESERVOIR_CAPACITY {
                    res.rows[j as usize] = row.to_vec();
                }
            }
        }
        self.centroids = None;
    }

    fn finalize(&mut self) {
        let mut all = Vec::new();
        for (t, res) in self.reservoirs.iter().enumerate() {
            if res.rows.is_empty() {
                continue;
            }
            let mut rng = keyed(self.seed, Purpose::KMeansInit, t as u64);
            let mut order: Vec<usize> = (0..res.rows.len()).collect();
            order.shuffle(&mut rng);
            let k = self.k.min(res.rows.len());
            let mut centers: Vec<Vec<f64>> = order[..k].iter().map(|&i| res.rows[i].clone()).collect();
            lloyd(&res.rows, &mut centers, LLOYD_ITERATIONS);
            all.extend(centers.into_iter().map(|c| (t, c)));
        }
        self.centroids = Some(all);
    }

    fn select(&self, code: &[f64]) -> Result<usize> {
        let centroids = self.centroids.as_ref().ok_or(Error::Unfinalized)?;
        let mut best = (0, f64::INFINITY);
        for (t, c) in centroids {
            let d = sq_dist(code, c);
            if d < best.1 {
                best = (*t, d);
            }
        }
        Ok(best.0)
    }
}

/// Lloyd iterations in place. A centre that loses all its points stays put.
pub fn lloyd(rows: &[Vec<f64>], centers: &mut [Vec<f64>], iterations: usize) {
    let dim = centers.first().map_or(0, Vec::len);
    let mut assign = vec![usize::MAX; rows.len()];
    for _ in 0..iterations {
        let mut changed = false;
        for (a, r) in assign.iter_mut().zip(rows) {
            let mut best = (0, f64::INFINITY);
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(r, center);
                if d < best.1 {
                    best = (c, d);
                }
            }
            changed |= *a != best.0;
            *a = best.0;
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (&a, r) in assign.iter().zip(rows) {
            axpy(1.0, r, &mut sums[a]);
            counts[a] += 1;
        }
        for ((center, sum), &n) in centers.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *center = sum.into_iter().map(|s| s / n as f64).collect();
            }
        }
    }
}

/// Two-layer rectifier scorer trained online with experts as labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShallowRouter {
    /// `H x M`.
    input: Matrix,
    input_bias: Vec<f64>,
    /// `T x H`.
    out: Matrix,
    out_bias: Vec<f64>,
    lr: f64,
    iters: usize,
}

impl ShallowRouter {
    pub fn new(code_dim: usize, num_experts: usize, hidden: usize, lr: f64, iters: usize, seed: u64) -> Result<Self> {
        if hidden == 0 || iters == 0 {
            return Err(Error::Invalid("shallow router needs hidden >= 1 and iters >= 1".into()));
        }
        let mut rng = keyed(seed, Purpose::ShallowInit, 0);
        let bound = 1.0 / libm::sqrt(code_dim.max(1) as f64);
        let data = (0..hidden * code_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Ok(Self {
            input: Matrix::from_vec(hidden, code_dim, data)?,
            input_bias: vec![0.0; hidden],
            out: Matrix::zeros(num_experts, hidden),
            out_bias: vec![0.0; num_experts],
            lr,
            iters,
        })
    }

    /// Hidden activations and expert scores.
    pub fn forward(&self, code: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hidden: Vec<f64> = self
            .input
            .row_iter()
            .zip(&self.input_bias)
            .map(|(w, b)| (dot(w, code) + b).max(0.0))
            .collect();
        let scores = self
            .out
            .row_iter()
            .zip(&self.out_bias)
            .map(|(w, b)| dot(w, &hidden) + b)
            .collect();
        (hidden, scores)
    }

    /// Gradient steps on the mean cross-entropy over experts registered so
    /// far, all of which are left unmasked.
    fn update(&mut self, batch: &ExpandedBatch) -> Result<()> {
        let t = self.out.rows();
        let mask = LogitMask::open(t);
        let inv = 1.0 / batch.len() as f64;
        for _ in 0..self.iters {
            let mut g_in = Matrix::zeros(self.input.rows(), self.input.cols());
            let mut g_in_b = vec![0.0; self.input.rows()];
            let mut g_out = Matrix::zeros(t, self.out.cols());
            let mut g_out_b = vec![0.0; t];
            for code in batch.values.row_iter() {
                let (hidden, scores) = self.forward(code);
                let mut g = masked_softmax(&scores, &mask)?;
                g[batch.expert_id] -= 1.0;
                let mut dh = vec![0.0; hidden.len()];
                for (c, &gc) in g.iter().enumerate() {
                    axpy(gc * inv, &hidden, g_out.row_mut(c));
                    g_out_b[c] += gc * inv;
                    axpy(gc * inv, self.out.row(c), &mut dh);
                }
                for (j, (&hj, &dj)) in hidden.iter().zip(&dh).enumerate() {
                    if hj > 0.0 && dj != 0.0 {
                        axpy(dj, code, g_in.row_mut(j));
                        g_in_b[j] += dj;
                    }
                }
            }
            if !(g_in.is_finite() && g_out.is_finite()) {
                return Err(Error::NonFinite("shallow router gradient"));
            }
            axpy(-self.lr, g_in.as_slice(), self.input.as_mut_slice());
            axpy(-self.lr, &g_in_b, &mut self.input_bias);
            axpy(-self.lr, g_out.as_slice(), self.out.as_mut_slice());
            axpy(-self.lr, &g_out_b, &mut self.out_bias);
        }
        Ok(())
    }
}
