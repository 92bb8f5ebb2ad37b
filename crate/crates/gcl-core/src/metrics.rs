//! Session-matrix metrics, anytime accuracy, routing accuracy and linear
//! CKA, plus the logged prediction format they can be recomputed from.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ensemble::PredictionRecord;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Lower-triangular accuracy matrix: row `i` holds `R[i][0..=i]`, the
/// accuracy right after session `i` on the test pool of each session `j <= i`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionMatrix {
    sessions: usize,
    rows: Vec<Vec<f64>>,
}

impl SessionMatrix {
    pub fn new(sessions: usize) -> Self {
        Self {
            sessions,
            rows: Vec::new(),
        }
    }

    /// Builds a complete matrix from its rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let i = self.rows.len();
        if i >= self.sessions {
            return Err(Error::Invalid("session matrix already complete".into()));
        }
        if row.len() != i + 1 {
            return Err(Error::Shape {
                context: "session matrix row",
                expected: i + 1,
                actual: row.len(),
            });
        }
        if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("accuracy outside [0, 1]".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn sessions(&self) -> usize {
        self.sessions
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }

    pub fn is_complete(&self) -> bool {
        self.sessions > 0 && self.rows.len() == self.sessions
    }

    fn complete(&self) -> Result<&[Vec<f64>]> {
        if self.is_complete() {
            Ok(&self.rows)
        } else {
            Err(Error::Undefined("session matrix is incomplete"))
        }
    }

    /// Mean of the final row.
    pub fn a_last(&self) -> Result<f64> {
        let rows = self.complete()?;
        Ok(mean(&rows[rows.len() - 1]))
    }

    /// Mean of the diagonal.
    pub fn a_avg(&self) -> Result<f64> {
        let rows = self.complete()?;
        let diag: Vec<f64> = rows.iter().enumerate().map(|(i, r)| r[i]).collect();
        Ok(mean(&diag))
    }

    /// Mean over columns of (column maximum over all rows) minus the final
    /// entry. The maximum includes the final row, so every term is >= 0.
    pub fn f_last(&self) -> Result<f64> {
        let rows = self.complete()?;
        let t = rows.len();
        let last = &rows[t - 1];
        let drops: Vec<f64> = (0..t)
            .map(|j| {
                let best = rows[j..].iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
                best - last[j]
            })
            .collect();
        Ok(mean(&drops))
    }

    /// `(1 / (T - 1)) * sum_{i < T} (R[T][i] - R[i][i])`.
    pub fn bwt(&self) -> Result<f64> {
        let rows = self.complete()?;
        let t = rows.len();
        if t < 2 {
            return Err(Error::Undefined("backward transfer needs at least two sessions"));
        }
        let last = &rows[t - 1];
        let sum: f64 = (0..t - 1).map(|i| last[i] - rows[i][i]).sum();
        Ok(sum / (t - 1) as f64)
    }
}

/// Mean of the anytime accuracy history.
pub fn a_auc(anytime: &[f64]) -> Result<f64> {
    if anytime.is_empty() {
        return Err(Error::Empty("anytime accuracy history"));
    }
    Ok(mean(anytime))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Which experts trained on which classes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingHistory {
    by_class: BTreeMap<usize, BTreeSet<usize>>,
}

impl TrainingHistory {
    pub fn record(&mut self, expert: usize, labels: &[usize]) {
        for &y in labels {
            self.by_class.entry(y).or_default().insert(expert);
        }
    }

    pub fn experts_for(&self, class: usize) -> impl Iterator<Item = usize> + '_ {
        self.by_class.get(&class).into_iter().flatten().copied()
    }

    pub fn trained(&self, expert: usize, class: usize) -> bool {
        self.by_class.get(&class).is_some_and(|s| s.contains(&expert))
    }

    /// Lowest-id expert whose training data contained `class`.
    pub fn lowest_expert(&self, class: usize) -> Option<usize> {
        self.by_class.get(&class).and_then(|s| s.first()).copied()
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_class.keys().copied()
    }
}

/// Fraction of `(selected expert, true label)` pairs where the expert
/// trained on the label. Empty input gives 0.
pub fn routing_accuracy(pairs: impl IntoIterator<Item = (usize, usize)>, history: &TrainingHistory) -> f64 {
    let mut counter = Counter::default();
    for (selected, label) in pairs {
        counter.add(history.trained(selected, label));
    }
    counter.rate()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counter {
    pub hits: u64,
    pub attempts: u64,
}

impl Counter {
    pub fn add(&mut self, hit: bool) {
        self.hits += hit as u64;
        self.attempts += 1;
    }

    /// `hits / attempts`, or 0 before any attempt.
    pub fn rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.hits as f64 / self.attempts as f64
        }
    }
}

/// Linear CKA between two representations of the same samples, after
/// centring each column.
pub fn linear_cka(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::Shape {
            context: "cka: row count",
            expected: a.rows(),
            actual: b.rows(),
        });
    }
    let (mut a, mut b) = (a.clone(), b.clone());
    a.center_columns();
    b.center_columns();
    let at = a.transpose();
    let bt = b.transpose();
    let cross = at.matmul(&b)?.frobenius_norm();
    let na = at.matmul(&a)?.frobenius_norm();
    let nb = bt.matmul(&b)?.frobenius_norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Undefined("cka: zero-norm operand"));
    }
    Ok((cross * cross / (na * nb)).clamp(0.0, 1.0))
}

/// Where a logged prediction was made.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Phase {
    /// The `step`-th anytime evaluation.
    Anytime { step: usize },
    /// Evaluation right after session `row`, on the test pool of `column`.
    Session { row: usize, column: usize },
}

/// One evaluated held-out sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedPrediction {
    #[serde(flatten)]
    pub phase: Phase,
    pub sample: usize,
    pub label: usize,
    /// Experts that had trained on `label` when the prediction was made.
    pub trained_experts: Vec<usize>,
    #[serde(flatten)]
    pub record: PredictionRecord,
}

impl LoggedPrediction {
    pub fn correct(&self) -> bool {
        self.record.predicted == self.label
    }

    pub fn routed_correctly(&self) -> bool {
        self.trained_experts.contains(&self.record.selected)
    }
}

/// Headline metrics of one run. `None` marks an undefined value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub a_auc: Option<f64>,
    pub a_last: Option<f64>,
    pub a_avg: Option<f64>,
    pub f_last: Option<f64>,
    pub bwt: Option<f64>,
    pub routing_accuracy: Option<f64>,
}

impl MetricSet {
    pub const NAMES: [&'static str; 6] = ["a_auc", "a_last", "a_avg", "f_last", "bwt", "routing_accuracy"];

    pub fn values(&self) -> [Option<f64>; 6] {
        [
            self.a_auc,
            self.a_last,
            self.a_avg,
            self.f_last,
            self.bwt,
            self.routing_accuracy,
        ]
    }

    pub fn from_parts(matrix: &SessionMatrix, anytime: &[f64], routing: Option<f64>) -> Self {
        Self {
            a_auc: a_auc(anytime).ok(),
            a_last: matrix.a_last().ok(),
            a_avg: matrix.a_avg().ok(),
            f_last: matrix.f_last().ok(),
            bwt: matrix.bwt().ok(),
            routing_accuracy: routing,
        }
    }
}

/// Streaming evaluation state of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLedger {
    pub session_matrix: SessionMatrix,
    pub anytime: Vec<f64>,
    /// Routing outcomes of the final-row evaluation.
    pub routing: Counter,
}

impl MetricsLedger {
    pub fn new(sessions: usize) -> Self {
        Self {
            session_matrix: SessionMatrix::new(sessions),
            ..Self::default()
        }
    }

    pub fn metrics(&self) -> MetricSet {
        let routing = (self.routing.attempts > 0).then(|| self.routing.rate());
        MetricSet::from_parts(&self.session_matrix, &self.anytime, routing)
    }
}

/// Rebuilds the ledger of a run from its logged predictions alone.
///
/// Accuracies are `hits / attempts` per anytime step and per session-matrix
/// cell; routing accuracy is taken over the final row.
pub fn recompute_ledger(logs: &[LoggedPrediction], sessions: usize) -> Result<MetricsLedger> {
    let mut anytime: BTreeMap<usize, Counter> = BTreeMap::new();
    let mut cells: BTreeMap<(usize, usize), Counter> = BTreeMap::new();
    let mut routing = Counter::default();
    for log in logs {
        match log.phase {
            Phase::Anytime { step } => anytime.entry(step).or_default().add(log.correct()),
            Phase::Session { row, column } => {
                cells.entry((row, column)).or_default().add(log.correct());
                if row + 1 == sessions {
                    routing.add(log.routed_correctly());
                }
            }
        }
    }
    let mut ledger = MetricsLedger::new(sessions);
    for (expected, (&step, c)) in anytime.iter().enumerate() {
        if step != expected {
            return Err(Error::Invalid(alloc::format!(
                "anytime step {expected} missing from the log"
            )));
        }
        ledger.anytime.push(c.rate());
    }
    for i in 0..sessions {
        if !(0..=i).any(|j| cells.contains_key(&(i, j))) {
            break;
        }
        let row = (0..=i).map(|j| cells.get(&(i, j)).map_or(0.0, Counter::rate)).collect();
        ledger.session_matrix.push_row(row)?;
    }
    ledger.routing = routing;
    Ok(ledger)
}
