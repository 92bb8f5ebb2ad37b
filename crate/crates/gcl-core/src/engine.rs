//! The per-seed run loop: stream batches once, spawn and train experts,
//! accumulate router statistics, evaluate anytime and at session ends.
//!
//! All mutable run data lives in [`RunState`], which is serializable at
//! batch boundaries; everything else is rebuilt from the configuration.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::{oracle_route, BaselineKind, BaselineRouter, Similarity};
use crate::ensemble::{full_inference, Aggregation, PredictionRecord, RouteChoice};
use crate::error::{Error, Result};
use crate::expansion::{Activation, RandomExpansion};
use crate::experts::{build_mask, validate_decays, ExpertPool, LogitMask, MaskKind, SpawnPolicy};
use crate::linalg::Matrix;
use crate::metrics::{linear_cka, Counter, LoggedPrediction, MetricSet, MetricsLedger, Phase, TrainingHistory};
use crate::rng::{keyed, Purpose};
use crate::router::RouterState;
use crate::stream::{
    build_schedule, partition_classes, split_holdout, Cursor, FeatureSource, SessionSchedule, StreamConfig,
};

/// How the expert is chosen at inference time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingAlgorithm {
    #[default]
    Rear,
    Prototype,
    NaiveBayes,
    #[serde(rename = "kmeans")]
    KMeans,
    TrainedShallow,
    /// Ground-truth lowest-id expert that trained on the label.
    Oracle,
    /// Always the newest expert; no router.
    Latest,
}

impl RoutingAlgorithm {
    pub const ALL: [RoutingAlgorithm; 7] = [
        RoutingAlgorithm::Rear,
        RoutingAlgorithm::Prototype,
        RoutingAlgorithm::NaiveBayes,
        RoutingAlgorithm::KMeans,
        RoutingAlgorithm::TrainedShallow,
        RoutingAlgorithm::Oracle,
        RoutingAlgorithm::Latest,
    ];
}

/// Which embedding feeds the router statistics during training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterFeatures {
    /// Features after the current expert's adapter.
    #[default]
    Adapted,
    /// Backbone features as they come.
    Raw,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evaluation {
    /// Anytime evaluations plus a session-matrix row after every session.
    #[default]
    Full,
    /// Only the evaluation after the last session, logged but not entered
    /// into the session matrix.
    FinalOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// `stream.seed` is replaced by the run seed.
    pub stream: StreamConfig,
    pub expansion_dim: usize,
    pub activation: Activation,
    /// Defaults to the run seed.
    pub expansion_seed: Option<u64>,
    pub lambda: f64,
    pub ema_decays: Vec<f64>,
    pub aggregation: Aggregation,
    pub mask: MaskKind,
    pub routing: RoutingAlgorithm,
    pub spawn: SpawnPolicy,
    pub lr: f64,
    pub iters: usize,
    pub router_features: RouterFeatures,
    pub reset_head_on_spawn: bool,
    pub similarity: Similarity,
    pub kmeans_k: usize,
    pub shallow_hidden: usize,
    /// Held-out samples used for expert CKA.
    pub cka_samples: usize,
    pub evaluation: Evaluation,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            stream: StreamConfig::default(),
            expansion_dim: 1024,
            activation: Activation::Relu,
            expansion_seed: None,
            lambda: 1e4,
            ema_decays: vec![0.9, 0.99],
            aggregation: Aggregation::SoftmaxMax,
            mask: MaskKind::BatchSeenClass,
            routing: RoutingAlgorithm::Rear,
            spawn: SpawnPolicy::SessionAligned,
            lr: 0.005,
            iters: 3,
            router_features: RouterFeatures::Adapted,
            reset_head_on_spawn: false,
            similarity: Similarity::Cosine,
            kmeans_k: 10,
            shallow_hidden: 512,
            cka_samples: 256,
            evaluation: Evaluation::Full,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        let bad = |msg: &str| Err(Error::Invalid(msg.into()));
        if self.expansion_dim == 0 {
            return bad("expansion_dim must be positive");
        }
        if !self.lambda.is_finite() || self.lambda <= 0.0 {
            return bad("lambda must be positive and finite");
        }
        validate_decays(&self.ema_decays)?;
        if !self.lr.is_finite() || self.lr < 0.0 {
            return bad("lr must be finite and non-negative");
        }
        if self.iters == 0 {
            return bad("iters must be at least 1");
        }
        if self.kmeans_k == 0 || self.shallow_hidden == 0 {
            return bad("kmeans_k and shallow_hidden must be positive");
        }
        if let SpawnPolicy::SampleBudget(0) = self.spawn {
            return bad("sample budget must be positive");
        }
        Ok(())
    }

    fn baseline_kind(&self) -> Option<BaselineKind> {
        Some(match self.routing {
            RoutingAlgorithm::Prototype => BaselineKind::Prototype {
                similarity: self.similarity,
            },
            RoutingAlgorithm::NaiveBayes => BaselineKind::NaiveBayes,
            RoutingAlgorithm::KMeans => BaselineKind::KMeans { k: self.kmeans_k },
            RoutingAlgorithm::TrainedShallow => BaselineKind::TrainedShallow {
                hidden: self.shallow_hidden,
                lr: self.lr,
                iters: self.iters,
            },
            _ => return None,
        })
    }
}

/// Everything that changes while a seed runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub seed: u64,
    pub cursor: Cursor,
    pub pool: ExpertPool,
    pub router: RouterState,
    pub baseline: Option<BaselineRouter>,
    pub history: TrainingHistory,
    pub seen_classes: BTreeSet<usize>,
    /// Bitset over sample ids already trained on.
    pub trained: Vec<u64>,
    pub ledger: MetricsLedger,
    pub predictions: Vec<LoggedPrediction>,
    /// Oracle evaluations that fell back to the ridge router.
    pub oracle_fallbacks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub seed: u64,
    pub metrics: MetricSet,
    pub ledger: MetricsLedger,
    pub predictions: Vec<LoggedPrediction>,
    pub session_sizes: Vec<usize>,
    pub num_experts: usize,
    pub batches: usize,
    pub oracle_fallbacks: u64,
    /// Mean linear CKA over expert pairs, on adapter residual features.
    pub cka_mean: Option<f64>,
}

pub struct Engine<'a> {
    config: EngineConfig,
    source: &'a dyn FeatureSource,
    expansion: RandomExpansion,
    schedule: SessionSchedule,
    /// Held-out sample ids, ascending.
    holdout: Vec<usize>,
    /// Held-out ids per session column.
    session_pools: Vec<Vec<usize>>,
    state: RunState,
}

impl<'a> Engine<'a> {
    pub fn new(config: &EngineConfig, source: &'a dyn FeatureSource, seed: u64) -> Result<Self> {
        let (config, expansion, schedule, holdout, session_pools) = Self::prepare(config, source, seed)?;
        let k = source.num_classes();
        let d = source.dim();
        let m = config.expansion_dim;
        let baseline = match config.baseline_kind() {
            Some(kind) => Some(BaselineRouter::new(kind, m, 1, seed)?),
            None => None,
        };
        let state = RunState {
            seed,
            cursor: Cursor::default(),
            pool: ExpertPool::new(d, k, &config.ema_decays, config.reset_head_on_spawn, seed)?,
            router: RouterState::new(m, 1, config.lambda)?,
            baseline,
            history: TrainingHistory::default(),
            seen_classes: BTreeSet::new(),
            trained: vec![0; source.len().div_ceil(64)],
            ledger: MetricsLedger::new(config.stream.sessions),
            predictions: Vec::new(),
            oracle_fallbacks: 0,
        };
        Ok(Self {
            config,
            source,
            expansion,
            schedule,
            holdout,
            session_pools,
            state,
        })
    }

    /// Continues from a state captured at a batch boundary of a run with
    /// the same configuration and source.
    pub fn resume(config: &EngineConfig, source: &'a dyn FeatureSource, state: RunState) -> Result<Self> {
        let mut engine = Self::new(config, source, state.seed)?;
        if state.trained.len() != engine.state.trained.len()
            || state.router.code_dim() != config.expansion_dim
            || state.ledger.session_matrix.sessions() != config.stream.sessions
        {
            return Err(Error::Invalid("run state does not match the configuration".into()));
        }
        engine.state = state;
        Ok(engine)
    }

    #[allow(clippy::type_complexity)]
    fn prepare(
        config: &EngineConfig,
        source: &dyn FeatureSource,
        seed: u64,
    ) -> Result<(
        EngineConfig,
        RandomExpansion,
        SessionSchedule,
        Vec<usize>,
        Vec<Vec<usize>>,
    )> {
        let mut config = config.clone();
        config.stream.seed = seed;
        config.validate()?;
        if source.num_classes() != config.stream.num_classes {
            return Err(Error::Invalid(alloc::format!(
                "stream declares {} classes but the feature source has {}",
                config.stream.num_classes,
                source.num_classes()
            )));
        }
        if source.is_empty() {
            return Err(Error::Empty("feature source"));
        }
        let (train, holdout) = split_holdout(&source.class_samples(), config.stream.holdout_fraction, seed);
        let partition = partition_classes(&config.stream)?;
        let schedule = build_schedule(&config.stream, &partition, &train)?;
        if let Some(s) = schedule.sessions.iter().position(Vec::is_empty) {
            return Err(Error::Invalid(alloc::format!("session {s} receives no samples")));
        }
        // Column j tests the classes owned by session j: disjoint classes by
        // assignment, blurry ones by home. A session owning nothing tests
        // every class that occurs in it.
        let mut owner = vec![usize::MAX; config.stream.num_classes];
        for (&c, &s) in schedule.disjoint.iter().chain(&schedule.home) {
            owner[c] = s;
        }
        let present = schedule.classes_per_session();
        let mut session_pools = Vec::with_capacity(config.stream.sessions);
        for (j, present_j) in present.iter().enumerate() {
            let mut classes: BTreeSet<usize> = (0..owner.len()).filter(|&c| owner[c] == j).collect();
            if classes.is_empty() {
                classes = present_j.iter().copied().collect();
            }
            let pool: Vec<usize> = holdout
                .iter()
                .copied()
                .filter(|&s| classes.contains(&source.label(s)))
                .collect();
            if pool.is_empty() {
                return Err(Error::Invalid(alloc::format!("session {j} has no held-out samples")));
            }
            session_pools.push(pool);
        }
        let expansion = RandomExpansion::new(
            source.dim(),
            config.expansion_dim,
            config.activation,
            config.expansion_seed.unwrap_or(seed),
        );
        Ok((config, expansion, schedule, holdout, session_pools))
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn schedule(&self) -> &SessionSchedule {
        &self.schedule
    }

    pub fn expansion(&self) -> &RandomExpansion {
        &self.expansion
    }

    pub fn holdout(&self) -> &[usize] {
        &self.holdout
    }

    pub fn is_finished(&self) -> bool {
        self.state.cursor.peek_session(&self.schedule).is_none()
    }

    /// Processes one batch. Returns `false` once the stream is exhausted.
    pub fn step(&mut self) -> Result<bool> {
        let Some(batch) = self.state.cursor.next_batch(&self.schedule, self.source)? else {
            return Ok(false);
        };
        let st = &mut self.state;
        for &id in &batch.sample_ids {
            let (word, bit) = (id / 64, 1u64 << (id % 64));
            if st.trained[word] & bit != 0 {
                return Err(Error::Invalid(alloc::format!("sample {id} streamed twice")));
            }
            st.trained[word] |= bit;
        }

        if self
            .config
            .spawn
            .should_spawn(batch.is_session_boundary, st.pool.seen_by_current())
        {
            let n = st.pool.spawn()? + 1;
            st.router.grow(n)?;
            if let Some(b) = st.baseline.as_mut() {
                b.grow(n)?;
            }
        }

        let batch_labels: BTreeSet<usize> = batch.labels.iter().copied().collect();
        st.seen_classes.extend(&batch_labels);
        let mask = build_mask(
            &batch_labels,
            &st.seen_classes,
            self.config.mask,
            self.source.num_classes(),
            (st.seed, batch.index as u64),
        )?;
        st.pool
            .train(&batch.features, &batch.labels, &mask, self.config.lr, self.config.iters)?;
        let current = st.pool.current_id();
        st.history.record(current, &batch.labels);

        let router_input = match self.config.router_features {
            RouterFeatures::Adapted => st.pool.experts()[current].adapter.adapt_batch(&batch.features),
            RouterFeatures::Raw => batch.features.clone(),
        };
        let codes = self.expansion.expand(&router_input, current)?;
        st.router.accumulate(&codes)?;
        if let Some(b) = st.baseline.as_mut() {
            b.update(&codes)?;
        }

        let done = self.state.cursor.batches_emitted();
        let full = self.config.evaluation == Evaluation::Full;
        if full && done.is_multiple_of(self.config.stream.eval_interval) {
            self.evaluate_anytime()?;
        }
        if self.state.cursor.peek_session(&self.schedule) != Some(batch.session) {
            let last = batch.session + 1 == self.config.stream.sessions;
            if full || last {
                self.evaluate_session(batch.session, full)?;
            }
        }
        Ok(true)
    }

    /// Runs the remaining stream and the final analysis.
    pub fn run(mut self) -> Result<RunOutput> {
        while self.step()? {}
        self.finish()
    }

    /// Final analysis; the stream must be exhausted.
    pub fn finish(self) -> Result<RunOutput> {
        if !self.is_finished() {
            return Err(Error::Invalid("finish called before the end of the stream".into()));
        }
        let cka_mean = self.cka_mean()?;
        let st = self.state;
        Ok(RunOutput {
            seed: st.seed,
            metrics: st.ledger.metrics(),
            session_sizes: self.schedule.session_sizes(),
            num_experts: st.pool.len(),
            batches: st.cursor.batches_emitted(),
            oracle_fallbacks: st.oracle_fallbacks,
            cka_mean,
            ledger: st.ledger,
            predictions: st.predictions,
        })
    }

    fn evaluate_anytime(&mut self) -> Result<()> {
        let step = self.state.ledger.anytime.len();
        let pool: Vec<usize> = self
            .holdout
            .iter()
            .copied()
            .filter(|&s| self.state.seen_classes.contains(&self.source.label(s)))
            .collect();
        let logs = self.predict(&pool, |_| Phase::Anytime { step })?;
        let mut acc = Counter::default();
        for l in &logs {
            acc.add(l.correct());
        }
        self.state.ledger.anytime.push(acc.rate());
        self.state.predictions.extend(logs);
        Ok(())
    }

    fn evaluate_session(&mut self, row: usize, record_row: bool) -> Result<()> {
        let mut accuracies = Vec::with_capacity(row + 1);
        let mut all = Vec::new();
        for column in 0..=row {
            let pool = self.session_pools[column].clone();
            let logs = self.predict(&pool, |_| Phase::Session { row, column })?;
            let mut acc = Counter::default();
            for l in &logs {
                acc.add(l.correct());
            }
            accuracies.push(acc.rate());
            all.extend(logs);
        }
        if row + 1 == self.config.stream.sessions {
            for l in &all {
                self.state.ledger.routing.add(l.routed_correctly());
            }
        }
        if record_row {
            self.state.ledger.session_matrix.push_row(accuracies)?;
        }
        self.state.predictions.extend(all);
        Ok(())
    }

    /// Full inference on held-out samples with the current model.
    fn predict(&mut self, samples: &[usize], phase: impl Fn(usize) -> Phase) -> Result<Vec<LoggedPrediction>> {
        let st = &mut self.state;
        let k = self.source.num_classes();
        let mask = match self.config.mask {
            MaskKind::None => LogitMask::open(k),
            _ => LogitMask::only(st.seen_classes.iter().copied(), k, MaskKind::SeenClass),
        };
        if matches!(self.config.routing, RoutingAlgorithm::Rear | RoutingAlgorithm::Oracle) {
            st.router.solve()?;
        }
        if let Some(b) = st.baseline.as_mut() {
            b.finalize()?;
        }
        let features = self.source.features_of(samples)?;
        let mut out = Vec::with_capacity(samples.len());
        for (r, &sample) in samples.iter().enumerate() {
            let h = features.row(r);
            let label = self.source.label(sample);
            let rear = || -> Result<RouteChoice<'_>> {
                Ok(RouteChoice::Router(
                    st.router.solved().ok_or(Error::Unsolved)?,
                    &self.expansion,
                ))
            };
            let route = match self.config.routing {
                RoutingAlgorithm::Rear => rear()?,
                RoutingAlgorithm::Latest => RouteChoice::Fixed(st.pool.current_id()),
                RoutingAlgorithm::Oracle => match oracle_route(label, &st.history) {
                    Some(t) => RouteChoice::Fixed(t),
                    None => {
                        st.oracle_fallbacks += 1;
                        rear()?
                    }
                },
                _ => {
                    let b = st.baseline.as_ref().expect("baseline routing has a baseline");
                    RouteChoice::Fixed(b.select(&self.expansion.expand_one(h)?)?)
                }
            };
            let record: PredictionRecord = full_inference(
                h,
                route,
                st.pool.experts(),
                st.pool.online(),
                &mask,
                self.config.aggregation,
            )?;
            out.push(LoggedPrediction {
                phase: phase(sample),
                sample,
                label,
                trained_experts: st.history.experts_for(label).collect(),
                record,
            });
        }
        Ok(out)
    }

    /// Mean pairwise linear CKA of the experts' residual features
    /// `adapted(h) - h` on a seeded subset of the holdout.
    fn cka_mean(&self) -> Result<Option<f64>> {
        let experts = self.state.pool.experts();
        if experts.len() < 2 || self.config.cka_samples == 0 {
            return Ok(None);
        }
        let mut ids = self.holdout.clone();
        ids.shuffle(&mut keyed(self.state.seed, Purpose::CkaSubset, 0));
        ids.truncate(self.config.cka_samples);
        ids.sort_unstable();
        let h = self.source.features_of(&ids)?;
        let residuals: Vec<Matrix> = experts
            .iter()
            .map(|e| {
                let mut z = e.adapter.adapt_batch(&h);
                for (zv, hv) in z.as_mut_slice().iter_mut().zip(h.as_slice()) {
                    *zv -= hv;
                }
                z
            })
            .collect();
        let mut sum = 0.0;
        let mut n = 0usize;
        for a in 0..residuals.len() {
            for b in a + 1..residuals.len() {
                match linear_cka(&residuals[a], &residuals[b]) {
                    Ok(v) => {
                        sum += v;
                        n += 1;
                    }
                    Err(Error::Undefined(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        Ok((n > 0).then(|| sum / n as f64))
    }
}

/// Convenience: one full run for one seed.
pub fn run_seed(config: &EngineConfig, source: &dyn FeatureSource, seed: u64) -> Result<RunOutput> {
    Engine::new(config, source, seed)?.run()
}
