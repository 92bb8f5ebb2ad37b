//! Per-expert feature adapters, the shared online head, masked
//! cross-entropy training and EMA head banks.
//!
//! An expert modulates the frozen embedding element-wise,
//! `u = (1 + a) * h + c`, and owns a bank of EMA shadows of the shared
//! online head. Only the newest expert trains; older ones are frozen.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::rng::{keyed, Purpose};

/// Finite stand-in for a masked logit. Probabilities of masked entries are
/// forced to exactly zero after the softmax.
pub const MASKED: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertAdapter {
    pub id: usize,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub frozen: bool,
}

impl ExpertAdapter {
    pub fn identity(id: usize, dim: usize) -> Self {
        Self {
            id,
            scale: vec![0.0; dim],
            shift: vec![0.0; dim],
            frozen: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn adapt_into(&self, h: &[f64], out: &mut [f64]) {
        for ((o, &x), (&a, &c)) in out.iter_mut().zip(h).zip(self.scale.iter().zip(&self.shift)) {
            *o = (1.0 + a) * x + c;
        }
    }

    pub fn adapt(&self, h: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; h.len()];
        self.adapt_into(h, &mut out);
        out
    }

    pub fn adapt_batch(&self, features: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(features.rows(), features.cols());
        for r in 0..features.rows() {
            self.adapt_into(features.row(r), out.row_mut(r));
        }
        out
    }
}

/// New adapter for expert `id`: the mean of all earlier adapters, or a
/// small uniform(-0.01, 0.01) draw for the first expert.
pub fn warm_start(existing: &[ExpertAdapter], id: usize, dim: usize, seed: u64) -> ExpertAdapter {
    if existing.is_empty() {
        let mut rng = keyed(seed, Purpose::AdapterInit, id as u64);
        let mut draw = || rng.random_range(-0.01..0.01);
        let scale = (0..dim).map(|_| draw()).collect();
        let shift = (0..dim).map(|_| draw()).collect();
        return ExpertAdapter {
            id,
            scale,
            shift,
            frozen: false,
        };
    }
    let n = existing.len() as f64;
    let mut out = ExpertAdapter::identity(id, existing[0].dim());
    for a in existing {
        for (o, v) in out.scale.iter_mut().zip(&a.scale) {
            *o += v;
        }
        for (o, v) in out.shift.iter_mut().zip(&a.shift) {
            *o += v;
        }
    }
    out.scale.iter_mut().for_each(|v| *v /= n);
    out.shift.iter_mut().for_each(|v| *v /= n);
    out
}

/// Linear classifier `W u + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Head {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            weights: Matrix::zeros(num_classes, dim),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn logits(&self, u: &[f64]) -> Vec<f64> {
        self.weights
            .row_iter()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, u) + b)
            .collect()
    }

    fn same_shape(&self, other: &Head) -> bool {
        self.weights.rows() == other.weights.rows() && self.weights.cols() == other.weights.cols()
    }
}

/// EMA shadows of the online head, one per decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaBank {
    decays: Vec<f64>,
    heads: Vec<Head>,
}

impl EmaBank {
    /// Every head starts as a clone of `online`. Decays must lie in (0, 1)
    /// and be strictly increasing; an empty list gives an online-only bank.
    pub fn new(decays: &[f64], online: &Head) -> Result<Self> {
        validate_decays(decays)?;
        Ok(Self {
            decays: decays.to_vec(),
            heads: vec![online.clone(); decays.len()],
        })
    }

    pub fn decays(&self) -> &[f64] {
        &self.decays
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Effective averaging window `1 / (1 - alpha)` of head `j`.
    pub fn window(&self, j: usize) -> f64 {
        1.0 / (1.0 - self.decays[j])
    }

    /// `shadow <- alpha * shadow + (1 - alpha) * online` for every head.
    pub fn update(&mut self, online: &Head) -> Result<()> {
        for head in &self.heads {
            if !head.same_shape(online) {
                return Err(Error::Shape {
                    context: "ema update: head rows",
                    expected: head.weights.rows(),
                    actual: online.weights.rows(),
                });
            }
        }
        for (head, &alpha) in self.heads.iter_mut().zip(&self.decays) {
            blend(head.weights.as_mut_slice(), online.weights.as_slice(), alpha);
            blend(&mut head.bias, &online.bias, alpha);
        }
        Ok(())
    }
}

fn blend(shadow: &mut [f64], online: &[f64], alpha: f64) {
    for (s, &o) in shadow.iter_mut().zip(online) {
        *s = alpha * *s + (1.0 - alpha) * o;
    }
}

pub fn validate_decays(decays: &[f64]) -> Result<()> {
    for &a in decays {
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::Invalid(alloc::format!("EMA decay {a} outside (0, 1)")));
        }
    }
    if decays.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("EMA decays must be strictly increasing".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    None,
    Random,
    SeenClass,
    #[default]
    BatchSeenClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitMask {
    pub values: Vec<f64>,
    pub kind: MaskKind,
}

impl LogitMask {
    pub fn open(num_classes: usize) -> Self {
        Self {
            values: vec![0.0; num_classes],
            kind: MaskKind::None,
        }
    }

    /// Opens exactly the listed classes.
    pub fn only(classes: impl IntoIterator<Item = usize>, num_classes: usize, kind: MaskKind) -> Self {
        let mut values = vec![MASKED; num_classes];
        for c in classes {
            values[c] = 0.0;
        }
        Self { values, kind }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn is_masked(&self, class: usize) -> bool {
        self.values[class] <= MASKED
    }

    pub fn open_classes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&c| !self.is_masked(c))
    }
}

/// Builds the logit mask for one training batch.
///
/// `rng_key` seeds the coin flips of the random kind; other kinds ignore it.
pub fn build_mask(
    batch_labels: &BTreeSet<usize>,
    seen: &BTreeSet<usize>,
    kind: MaskKind,
    num_classes: usize,
    rng_key: (u64, u64),
) -> Result<LogitMask> {
    for &c in batch_labels.iter().chain(seen) {
        if c >= num_classes {
            return Err(Error::LabelOutOfRange { label: c, num_classes });
        }
    }
    if let Some(&c) = batch_labels.iter().find(|c| !seen.contains(c)) {
        return Err(Error::Invalid(alloc::format!(
            "batch class {c} missing from the seen set"
        )));
    }
    Ok(match kind {
        MaskKind::None => LogitMask::open(num_classes),
        MaskKind::SeenClass => LogitMask::only(seen.iter().copied(), num_classes, kind),
        MaskKind::BatchSeenClass => LogitMask::only(batch_labels.iter().copied(), num_classes, kind),
        MaskKind::Random => {
            let mut rng = keyed(rng_key.0, Purpose::Mask, rng_key.1);
            let mut mask = LogitMask::only(batch_labels.iter().copied(), num_classes, kind);
            for &c in seen {
                // One draw per seen class, batch classes included.
                let open = rng.random_bool(0.5);
                if open && !batch_labels.contains(&c) {
                    mask.values[c] = 0.0;
                }
            }
            mask
        }
    })
}

/// `softmax(logits + m)`; masked classes get probability exactly 0.
pub fn masked_softmax(logits: &[f64], mask: &LogitMask) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::Shape {
            context: "masked softmax: mask length",
            expected: logits.len(),
            actual: mask.len(),
        });
    }
    let mut max = f64::NEG_INFINITY;
    for (c, &z) in logits.iter().enumerate() {
        if !mask.is_masked(c) {
            max = max.max(z + mask.values[c]);
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::Empty("unmasked class support"));
    }
    let mut probs: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(c, &z)| {
            if mask.is_masked(c) {
                0.0
            } else {
                libm::exp(z + mask.values[c] - max)
            }
        })
        .collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(probs)
}

/// `-log softmax(logits + m)[label]`.
pub fn masked_ce_loss(logits: &[f64], mask: &LogitMask, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: logits.len(),
        });
    }
    if mask.len() != logits.len() {
        return Err(Error::Shape {
            context: "masked ce: mask length",
            expected: logits.len(),
            actual: mask.len(),
        });
    }
    if mask.is_masked(label) {
        return Err(Error::MaskedLabel(label));
    }
    let open: Vec<f64> = mask.open_classes().map(|c| logits[c] + mask.values[c]).collect();
    let max = open.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(open.iter().map(|z| libm::exp(z - max)).sum::<f64>());
    Ok(lse - (logits[label] + mask.values[label]))
}

/// Gradients of the mean masked cross-entropy for all four parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl Gradients {
    fn is_finite(&self) -> bool {
        self.weights.is_finite()
            && self
                .bias
                .iter()
                .chain(&self.scale)
                .chain(&self.shift)
                .all(|v| v.is_finite())
    }
}

/// Mean loss over the batch and its exact gradients through
/// `logits = W((1 + a) * h + c) + b + m`.
pub fn loss_and_gradients(
    adapter: &ExpertAdapter,
    head: &Head,
    features: &Matrix,
    labels: &[usize],
    mask: &LogitMask,
) -> Result<(f64, Gradients)> {
    if features.rows() != labels.len() {
        return Err(Error::Shape {
            context: "train: labels per batch",
            expected: features.rows(),
            actual: labels.len(),
        });
    }
    if features.cols() != head.dim() || adapter.dim() != head.dim() {
        return Err(Error::Shape {
            context: "train: feature width",
            expected: head.dim(),
            actual: features.cols(),
        });
    }
    let (k, d) = (head.num_classes(), head.dim());
    let mut grads = Gradients {
        weights: Matrix::zeros(k, d),
        bias: vec![0.0; k],
        scale: vec![0.0; d],
        shift: vec![0.0; d],
    };
    if labels.is_empty() {
        return Ok((0.0, grads));
    }
    let mut loss = 0.0;
    let mut u = vec![0.0; d];
    let mut du = vec![0.0; d];
    for (h, &y) in features.row_iter().zip(labels) {
        adapter.adapt_into(h, &mut u);
        let logits = head.logits(&u);
        loss += masked_ce_loss(&logits, mask, y)?;
        let mut g = masked_softmax(&logits, mask)?;
        g[y] -= 1.0;
        du.iter_mut().for_each(|v| *v = 0.0);
        for (c, &gc) in g.iter().enumerate() {
            if gc != 0.0 {
                axpy(gc, &u, grads.weights.row_mut(c));
                grads.bias[c] += gc;
                axpy(gc, head.weights.row(c), &mut du);
            }
        }
        for i in 0..d {
            grads.scale[i] += du[i] * h[i];
            grads.shift[i] += du[i];
        }
    }
    let inv = 1.0 / labels.len() as f64;
    grads.weights.scale(inv);
    for v in grads.bias.iter_mut().chain(&mut grads.scale).chain(&mut grads.shift) {
        *v *= inv;
    }
    Ok((loss * inv, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    pub adapter: ExpertAdapter,
    pub bank: EmaBank,
}

impl Expert {
    pub fn id(&self) -> usize {
        self.adapter.id
    }

    pub fn is_frozen(&self) -> bool {
        self.adapter.frozen
    }
}

/// `iters` plain gradient-descent steps on the batch, each followed by an
/// EMA update of the expert's bank. Returns the loss before the last step.
pub fn train_step(
    expert: &mut Expert,
    online: &mut Head,
    features: &Matrix,
    labels: &[usize],
    mask: &LogitMask,
    lr: f64,
    iters: usize,
) -> Result<f64> {
    if expert.is_frozen() {
        return Err(Error::Frozen(expert.id()));
    }
    if iters == 0 {
        return Err(Error::Invalid("iters must be at least 1".into()));
    }
    let mut loss = 0.0;
    for _ in 0..iters {
        let (l, g) = loss_and_gradients(&expert.adapter, online, features, labels, mask)?;
        if !g.is_finite() || !l.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        loss = l;
        axpy(-lr, g.weights.as_slice(), online.weights.as_mut_slice());
        axpy(-lr, &g.bias, &mut online.bias);
        axpy(-lr, &g.scale, &mut expert.adapter.scale);
        axpy(-lr, &g.shift, &mut expert.adapter.shift);
        expert.bank.update(online)?;
    }
    Ok(loss)
}

/// When a new expert is started.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpawnPolicy {
    /// One expert for the whole stream.
    Single,
    /// A new expert at every session boundary flag.
    SessionAligned,
    /// A new expert once the current one has seen this many samples.
    SampleBudget(u64),
}

impl SpawnPolicy {
    /// Decides before a batch is trained. An expert that has not seen any
    /// sample yet is never replaced.
    pub fn should_spawn(&self, is_session_boundary: bool, seen_by_current: u64) -> bool {
        if seen_by_current == 0 {
            return false;
        }
        match *self {
            SpawnPolicy::Single => false,
            SpawnPolicy::SessionAligned => is_session_boundary,
            SpawnPolicy::SampleBudget(w) => seen_by_current >= w,
        }
    }
}

/// All experts plus the shared online head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertPool {
    experts: Vec<Expert>,
    online: Head,
    decays: Vec<f64>,
    seen_by_current: u64,
    reset_head_on_spawn: bool,
    seed: u64,
}

impl ExpertPool {
    pub fn new(dim: usize, num_classes: usize, decays: &[f64], reset_head_on_spawn: bool, seed: u64) -> Result<Self> {
        let online = Head::zeros(num_classes, dim);
        let first = Expert {
            adapter: warm_start(&[], 0, dim, seed),
            bank: EmaBank::new(decays, &online)?,
        };
        Ok(Self {
            experts: vec![first],
            online,
            decays: decays.to_vec(),
            seen_by_current: 0,
            reset_head_on_spawn,
            seed,
        })
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn expert(&self, id: usize) -> Result<&Expert> {
        self.experts.get(id).ok_or(Error::UnknownExpert {
            id,
            count: self.experts.len(),
        })
    }

    pub fn online(&self) -> &Head {
        &self.online
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn current_id(&self) -> usize {
        self.experts.len() - 1
    }

    pub fn seen_by_current(&self) -> u64 {
        self.seen_by_current
    }

    /// Freezes the current expert and starts a warm-started successor whose
    /// EMA heads are clones of the online head. Returns the new id.
    pub fn spawn(&mut self) -> Result<usize> {
        let id = self.experts.len();
        let dim = self.online.dim();
        if let Some(last) = self.experts.last_mut() {
            last.adapter.frozen = true;
        }
        let adapters: Vec<ExpertAdapter> = self.experts.iter().map(|e| e.adapter.clone()).collect();
        let mut adapter = warm_start(&adapters, id, dim, self.seed);
        adapter.frozen = false;
        if self.reset_head_on_spawn {
            self.online = Head::zeros(self.online.num_classes(), dim);
        }
        let bank = EmaBank::new(&self.decays, &self.online)?;
        self.experts.push(Expert { adapter, bank });
        self.seen_by_current = 0;
        Ok(id)
    }

    /// Trains the current expert and the online head on one batch.
    pub fn train(
        &mut self,
        features: &Matrix,
        labels: &[usize],
        mask: &LogitMask,
        lr: f64,
        iters: usize,
    ) -> Result<f64> {
        let expert = self.experts.last_mut().expect("pool is never empty");
        let loss = train_step(expert, &mut self.online, features, labels, mask, lr, iters)?;
        self.seen_by_current += labels.len() as u64;
        Ok(loss)
    }
}
