//! Blurry-boundary stream construction and frozen-feature sources.
//!
//! Classes are split into a disjoint subset, each class confined to a
//! single session, and a blurry subset whose classes have a home session
//! but leak a fixed fraction of their samples into the other sessions.
//! The schedule is consumed batch by batch, exactly once.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{keyed, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub num_classes: usize,
    pub sessions: usize,
    pub disjoint_ratio: f64,
    pub blurry_ratio: f64,
    pub batch_size: usize,
    pub samples_per_class: usize,
    /// Batches between anytime evaluations.
    pub eval_interval: usize,
    /// Fraction of each class held out for evaluation before scheduling.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            sessions: 5,
            disjoint_ratio: 0.5,
            blurry_ratio: 0.1,
            batch_size: 64,
            samples_per_class: 100,
            eval_interval: 10,
            holdout_fraction: 0.2,
            seed: 1,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Invalid(msg.into()));
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if self.sessions == 0 {
            return bad("sessions must be positive");
        }
        if !(0.0..=1.0).contains(&self.disjoint_ratio) {
            return bad("disjoint_ratio must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.blurry_ratio) {
            return bad("blurry_ratio must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn disjoint_count(&self) -> usize {
        libm::round(self.disjoint_ratio * self.num_classes as f64) as usize
    }
}

/// Number of a class's samples that leave its home session.
pub fn scatter_count(blurry_ratio: f64, class_samples: usize) -> usize {
    // The epsilon keeps e.g. 0.1 * 70 = 7.000000000000001 from rounding up.
    let raw = libm::ceil(blurry_ratio * class_samples as f64 - 1e-9);
    (raw.max(0.0) as usize).min(class_samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Disjoint class -> the one session that holds all of its samples.
    pub disjoint: BTreeMap<usize, usize>,
    /// Blurry classes, ascending.
    pub blurry: Vec<usize>,
}

/// Picks `round(r_D |Y|)` disjoint classes uniformly and spreads them over
/// the sessions round-robin, so session loads differ by at most one.
pub fn partition_classes(config: &StreamConfig) -> Result<Partition> {
    config.validate()?;
    let mut classes: Vec<usize> = (0..config.num_classes).collect();
    classes.shuffle(&mut keyed(config.seed, Purpose::Partition, 0));
    let n_disjoint = config.disjoint_count();
    let disjoint = classes[..n_disjoint]
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i % config.sessions))
        .collect();
    let mut blurry = classes[n_disjoint..].to_vec();
    blurry.sort_unstable();
    Ok(Partition { disjoint, blurry })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub sample: usize,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSchedule {
    pub sessions: Vec<Vec<Entry>>,
    pub disjoint: BTreeMap<usize, usize>,
    /// Blurry class -> home session.
    pub home: BTreeMap<usize, usize>,
    pub batch_size: usize,
}

impl SessionSchedule {
    pub fn num_sessions(&self) -> usize {
        self.sessions.len()
    }

    pub fn total_len(&self) -> usize {
        self.sessions.iter().map(Vec::len).sum()
    }

    pub fn session_sizes(&self) -> Vec<usize> {
        self.sessions.iter().map(Vec::len).collect()
    }

    pub fn num_batches(&self) -> usize {
        self.sessions.iter().map(|s| s.len().div_ceil(self.batch_size)).sum()
    }

    /// Session -> classes with at least one sample in it.
    pub fn classes_per_session(&self) -> Vec<Vec<usize>> {
        self.sessions
            .iter()
            .map(|s| {
                let mut c: Vec<usize> = s.iter().map(|e| e.class).collect();
                c.sort_unstable();
                c.dedup();
                c
            })
            .collect()
    }
}

/// Lays out the training samples of every class over the sessions.
///
/// `class_samples[c]` lists the sample ids of class `c` available for
/// training. Disjoint classes go entirely to their assigned session. Each
/// blurry class draws a home session uniformly; `ceil(r_B n_c)` of its
/// samples are scattered one by one, uniformly over the other sessions.
/// With a single session the scatter is a no-op. Each session is then
/// shuffled.
pub fn build_schedule(
    config: &StreamConfig,
    partition: &Partition,
    class_samples: &[Vec<usize>],
) -> Result<SessionSchedule> {
    config.validate()?;
    if class_samples.len() != config.num_classes {
        return Err(Error::Shape {
            context: "schedule: classes",
            expected: config.num_classes,
            actual: class_samples.len(),
        });
    }
    let t = config.sessions;
    let mut sessions: Vec<Vec<Entry>> = vec![Vec::new(); t];
    let mut home = BTreeMap::new();
    for (class, samples) in class_samples.iter().enumerate() {
        let mut rng = keyed(config.seed, Purpose::Schedule, class as u64);
        let mut samples = samples.clone();
        samples.shuffle(&mut rng);
        let entry = |sample| Entry { sample, class };
        if let Some(&s) = partition.disjoint.get(&class) {
            sessions[s].extend(samples.into_iter().map(entry));
            continue;
        }
        let h = rng.random_range(0..t);
        home.insert(class, h);
        let scatter = if t > 1 {
            scatter_count(config.blurry_ratio, samples.len())
        } else {
            0
        };
        for (k, sample) in samples.into_iter().enumerate() {
            let s = if k < scatter {
                let other = rng.random_range(0..t - 1);
                if other >= h {
                    other + 1
                } else {
                    other
                }
            } else {
                h
            };
            sessions[s].push(entry(sample));
        }
    }
    for (i, s) in sessions.iter_mut().enumerate() {
        s.shuffle(&mut keyed(config.seed, Purpose::Schedule, (1u64 << 32) + i as u64));
    }
    Ok(SessionSchedule {
        sessions,
        disjoint: partition.disjoint.clone(),
        home,
        batch_size: config.batch_size,
    })
}

/// A read position in a schedule. Batches never straddle sessions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    session: usize,
    offset: usize,
    batches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<usize>,
    pub session: usize,
    /// Set on the first batch of every non-empty session.
    pub is_session_boundary: bool,
    /// Position of this batch in the stream, from 0.
    pub index: usize,
}

impl Cursor {
    pub fn batches_emitted(&self) -> usize {
        self.batches
    }

    /// Session of the next batch, or `None` at the end of the stream.
    pub fn peek_session(&self, schedule: &SessionSchedule) -> Option<usize> {
        let mut c = *self;
        c.skip_exhausted(schedule);
        (c.session < schedule.num_sessions()).then_some(c.session)
    }

    fn skip_exhausted(&mut self, schedule: &SessionSchedule) {
        while self.session < schedule.num_sessions() && self.offset >= schedule.sessions[self.session].len() {
            self.session += 1;
            self.offset = 0;
        }
    }

    pub fn next_batch(&mut self, schedule: &SessionSchedule, source: &dyn FeatureSource) -> Result<Option<Batch>> {
        self.skip_exhausted(schedule);
        let Some(entries) = schedule.sessions.get(self.session) else {
            return Ok(None);
        };
        let end = (self.offset + schedule.batch_size).min(entries.len());
        let slice = &entries[self.offset..end];
        let mut features = Matrix::zeros(slice.len(), source.dim());
        for (r, e) in slice.iter().enumerate() {
            source.write_features(e.sample, features.row_mut(r))?;
        }
        let batch = Batch {
            features,
            labels: slice.iter().map(|e| e.class).collect(),
            sample_ids: slice.iter().map(|e| e.sample).collect(),
            session: self.session,
            is_session_boundary: self.offset == 0,
            index: self.batches,
        };
        self.offset = end;
        self.batches += 1;
        Ok(Some(batch))
    }
}

/// Frozen-embedding provider: sample id -> (feature row, label).
pub trait FeatureSource {
    fn dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn len(&self) -> usize;
    fn label(&self, sample: usize) -> usize;
    fn write_features(&self, sample: usize, out: &mut [f64]) -> Result<()>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample ids grouped by class, ascending.
    fn class_samples(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for s in 0..self.len() {
            out[self.label(s)].push(s);
        }
        out
    }

    fn features_of(&self, samples: &[usize]) -> Result<Matrix> {
        let mut m = Matrix::zeros(samples.len(), self.dim());
        for (r, &s) in samples.iter().enumerate() {
            self.write_features(s, m.row_mut(r))?;
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    pub noise_scale: f64,
    /// Class `c` gets `samples_per_class * (c + 1)^-exponent` samples
    /// (at least one). Zero keeps classes balanced.
    pub long_tail_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            num_classes: 20,
            samples_per_class: 100,
            cluster_spread: 1.0,
            noise_scale: 0.3,
            long_tail_exponent: 0.0,
            seed: 1,
        }
    }
}

/// Gaussian class prototypes plus isotropic noise, standing in for a frozen
/// pretrained backbone. Sample features are recomputed from
/// `(seed, sample id)` on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBackbone {
    config: SyntheticConfig,
    prototypes: Matrix,
    /// Start offset of each class's ids, plus the total at the end.
    offsets: Vec<usize>,
}

impl SyntheticBackbone {
    pub fn new(config: SyntheticConfig) -> Self {
        let mut prototypes = Matrix::zeros(config.num_classes, config.dim);
        for c in 0..config.num_classes {
            let mut rng = keyed(config.seed, Purpose::Prototypes, c as u64);
            for v in prototypes.row_mut(c) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = config.cluster_spread * z;
            }
        }
        let mut offsets = Vec::with_capacity(config.num_classes + 1);
        let mut total = 0;
        for c in 0..config.num_classes {
            offsets.push(total);
            let scale = libm::pow((c + 1) as f64, -config.long_tail_exponent);
            total += ((config.samples_per_class as f64 * scale) as usize).max(1);
        }
        offsets.push(total);
        Self {
            config,
            prototypes,
            offsets,
        }
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }
}

impl FeatureSource for SyntheticBackbone {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    fn label(&self, sample: usize) -> usize {
        self.offsets.partition_point(|&o| o <= sample) - 1
    }

    fn write_features(&self, sample: usize, out: &mut [f64]) -> Result<()> {
        if sample >= self.len() {
            return Err(Error::Invalid(alloc::format!("sample {sample} out of range")));
        }
        let mut rng = keyed(self.config.seed, Purpose::SampleNoise, sample as u64);
        let mu = self.prototypes.row(self.label(sample));
        for (o, &m) in out.iter_mut().zip(mu) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *o = m + self.config.noise_scale * z;
        }
        Ok(())
    }
}

/// Features held in memory, e.g. loaded from a feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    num_classes: usize,
    labels: Vec<usize>,
    rows: Matrix,
}

impl FeatureTable {
    pub fn new(num_classes: usize, labels: Vec<usize>, rows: Matrix) -> Result<Self> {
        if labels.len() != rows.rows() {
            return Err(Error::Shape {
                context: "feature table labels",
                expected: rows.rows(),
                actual: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(Self {
            num_classes,
            labels,
            rows,
        })
    }

    pub fn from_source(source: &dyn FeatureSource) -> Result<Self> {
        let ids: Vec<usize> = (0..source.len()).collect();
        let rows = source.features_of(&ids)?;
        let labels = ids.iter().map(|&s| source.label(s)).collect();
        Self::new(source.num_classes(), labels, rows)
    }

    pub fn rows(&self) -> &Matrix {
        &self.rows
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

impl FeatureSource for FeatureTable {
    fn dim(&self) -> usize {
        self.rows.cols()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    fn label(&self, sample: usize) -> usize {
        self.labels[sample]
    }

    fn write_features(&self, sample: usize, out: &mut [f64]) -> Result<()> {
        if sample >= self.len() {
            return Err(Error::Invalid(alloc::format!("sample {sample} out of range")));
        }
        out.copy_from_slice(self.rows.row(sample));
        Ok(())
    }
}

/// Per-class split into training ids and held-out ids. `round(f n_c)` of
/// each class, chosen by a seeded shuffle, go to the holdout.
pub fn split_holdout(class_samples: &[Vec<usize>], fraction: f64, seed: u64) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut train = Vec::with_capacity(class_samples.len());
    let mut holdout = Vec::new();
    for (c, ids) in class_samples.iter().enumerate() {
        let mut ids = ids.clone();
        ids.shuffle(&mut keyed(seed, Purpose::Holdout, c as u64));
        let n_hold = (libm::round(fraction * ids.len() as f64) as usize).min(ids.len());
        holdout.extend_from_slice(&ids[..n_hold]);
        let mut rest = ids[n_hold..].to_vec();
        rest.sort_unstable();
        train.push(rest);
    }
    holdout.sort_unstable();
    (train, holdout)
}
