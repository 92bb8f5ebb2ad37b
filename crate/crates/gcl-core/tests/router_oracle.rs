//! Streamed ridge statistics against a direct batch ridge solve.

use gcl_core::expansion::{Activation, ExpandedBatch, RandomExpansion};
use gcl_core::router::{RouterState, SNAPSHOT_VERSION};
use gcl_core::{Error, Matrix};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `((Phi^T Phi + lambda I)^{-1} Phi^T Y)^T` from the retained design matrix.
fn batch_ridge(rows: &[Vec<f64>], labels: &[usize], experts: usize, lambda: f64) -> DMatrix<f64> {
    let m = rows[0].len();
    let phi = DMatrix::from_fn(rows.len(), m, |i, j| rows[i][j]);
    let y = DMatrix::from_fn(rows.len(), experts, |i, t| f64::from(u8::from(labels[i] == t)));
    let lhs = phi.transpose() * &phi + DMatrix::identity(m, m) * lambda;
    let rhs = phi.transpose() * y;
    lhs.lu().solve(&rhs).expect("regular system").transpose()
}

fn rel_err(ours: &Matrix, oracle: &DMatrix<f64>) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for i in 0..oracle.nrows() {
        for j in 0..oracle.ncols() {
            num = num.max((ours[(i, j)] - oracle[(i, j)]).abs());
            den = den.max(oracle[(i, j)].abs());
        }
    }
    num / den.max(f64::MIN_POSITIVE)
}

struct Instance {
    rows: Vec<Vec<f64>>,
    labels: Vec<usize>,
    experts: usize,
    lambda: f64,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..=32);
    let n = rng.random_range(1..=200);
    let experts = rng.random_range(1..=4);
    let lambda = [0.1, 1.0, 10.0][rng.random_range(0..3)];
    let rows = (0..n)
        .map(|_| (0..m).map(|_| rng.random_range(0.0..2.0f64).max(0.3) - 0.3).collect())
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..experts)).collect();
    Instance {
        rows,
        labels,
        experts,
        lambda,
    }
}

/// Feeds the rows in consecutive runs of equal label, in random chunk sizes.
fn stream(inst: &Instance, order: &[usize], rng: &mut ChaCha8Rng) -> RouterState {
    let m = inst.rows[0].len();
    let mut state = RouterState::new(m, inst.experts, inst.lambda).unwrap();
    let mut i = 0;
    while i < order.len() {
        let t = inst.labels[order[i]];
        let len = rng.random_range(1..=16);
        let mut chunk = Vec::new();
        while i < order.len() && chunk.len() < len && inst.labels[order[i]] == t {
            chunk.push(inst.rows[order[i]].clone());
            i += 1;
        }
        state
            .accumulate(&ExpandedBatch {
                values: Matrix::from_rows(&chunk),
                expert_id: t,
            })
            .unwrap();
        assert!(state.gram().asymmetry() <= 1e-12);
    }
    state
}

#[test]
fn streamed_solve_matches_batch_ridge() {
    for seed in 0..50 {
        let inst = instance(seed);
        let order: Vec<usize> = (0..inst.rows.len()).collect();
        let mut state = stream(&inst, &order, &mut ChaCha8Rng::seed_from_u64(seed + 1000));
        assert_eq!(state.samples_seen(), inst.rows.len() as u64);
        let oracle = batch_ridge(&inst.rows, &inst.labels, inst.experts, inst.lambda);
        let err = rel_err(state.solve().unwrap().weights(), &oracle);
        assert!(err <= 1e-9, "seed {seed}: {err:e}");
    }
}

#[test]
fn batch_order_does_not_matter() {
    for seed in 0..10 {
        let inst = instance(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let forward: Vec<usize> = (0..inst.rows.len()).collect();
        let mut reversed = forward.clone();
        reversed.reverse();
        let a = stream(&inst, &forward, &mut rng).solve().unwrap().clone();
        let b = stream(&inst, &reversed, &mut rng).solve().unwrap().clone();
        let scale = a.weights().as_slice().iter().fold(0.0f64, |s, v| s.max(v.abs()));
        assert!(a.weights().max_abs_diff(b.weights()) <= 1e-9 * scale.max(1e-300));
    }
}

#[test]
fn growth_mid_stream_matches_batch_ridge() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let m = 12;
    let mut state = RouterState::new(m, 1, 1.0).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for t in 0..3 {
        if t > 0 {
            state.grow(t + 1).unwrap();
        }
        for _ in 0..4 {
            let chunk: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            rows.extend(chunk.iter().cloned());
            labels.extend(std::iter::repeat_n(t, 5));
            state
                .accumulate(&ExpandedBatch {
                    values: Matrix::from_rows(&chunk),
                    expert_id: t,
                })
                .unwrap();
        }
    }
    let oracle = batch_ridge(&rows, &labels, 3, 1.0);
    assert!(rel_err(state.solve().unwrap().weights(), &oracle) <= 1e-9);
}

#[test]
fn grown_expert_without_data_scores_zero() {
    let mut state = RouterState::new(3, 1, 1.0).unwrap();
    state
        .accumulate(&ExpandedBatch {
            values: Matrix::from_rows(&[[1.0, 0.0, 2.0]]),
            expert_id: 0,
        })
        .unwrap();
    state.grow(2).unwrap();
    assert_eq!(state.proto().column(1), [0.0; 3]);
    let router = state.solve().unwrap();
    assert_eq!(router.weights().row(1), [0.0; 3]);
    assert_eq!(router.scores(&[4.0, -1.0, 3.0])[1], 0.0);
    assert_eq!(
        state.grow(1).unwrap_err(),
        Error::Shrink {
            current: 2,
            requested: 1
        }
    );
}

#[test]
fn positive_rescaling_keeps_selections() {
    let inst = instance(3);
    let order: Vec<usize> = (0..inst.rows.len()).collect();
    let mut state = stream(&inst, &order, &mut ChaCha8Rng::seed_from_u64(9));
    let before = state.solve().unwrap().clone();
    state.scale_proto(2.5);
    let after = state.solve().unwrap().clone();
    for (a, b) in before.weights().as_slice().iter().zip(after.weights().as_slice()) {
        assert!((a * 2.5 - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
    for row in &inst.rows {
        let sa = before.scores(row);
        let sb = after.scores(row);
        assert_eq!(gcl_core::router::argmax(&sa), gcl_core::router::argmax(&sb));
    }
}

#[test]
fn route_through_expansion() {
    let expansion = RandomExpansion::new(4, 16, Activation::Relu, 2);
    let mut state = RouterState::new(16, 2, 1.0).unwrap();
    let features = Matrix::from_rows(&[[1.0, 2.0, 0.0, -1.0], [0.0, -1.0, 3.0, 1.0]]);
    assert_eq!(state.route(&features, &expansion).unwrap_err(), Error::Unsolved);
    for t in 0..2 {
        let batch = expansion.expand(&Matrix::from_rows(&[features.row(t)]), t).unwrap();
        state.accumulate(&batch).unwrap();
    }
    state.solve().unwrap();
    let routing = state.route(&features, &expansion).unwrap();
    assert_eq!(routing.scores.rows(), 2);
    assert_eq!(routing.selections, [0, 1]);
}

#[test]
fn rejected_batches_leave_state_untouched() {
    let mut state = RouterState::new(2, 1, 1.0).unwrap();
    let before = state.clone();
    let nan = ExpandedBatch {
        values: Matrix::from_rows(&[[1.0, f64::NAN]]),
        expert_id: 0,
    };
    assert!(matches!(state.accumulate(&nan), Err(Error::NonFinite(_))));
    let unknown = ExpandedBatch {
        values: Matrix::from_rows(&[[1.0, 0.0]]),
        expert_id: 3,
    };
    assert!(matches!(state.accumulate(&unknown), Err(Error::UnknownExpert { .. })));
    assert_eq!(state, before);
}

#[test]
fn snapshot_round_trip_is_lossless() {
    let inst = instance(11);
    let order: Vec<usize> = (0..inst.rows.len()).collect();
    let state = stream(&inst, &order, &mut ChaCha8Rng::seed_from_u64(4));
    let expansion = RandomExpansion::new(3, state.code_dim(), Activation::Relu, 8);
    let snap = state.snapshot(&expansion);
    assert_eq!(snap.version, SNAPSHOT_VERSION);
    let json = serde_json::to_string(&snap).unwrap();
    let back = RouterState::from_snapshot(serde_json::from_str(&json).unwrap()).unwrap();
    assert_eq!(back.gram(), state.gram());
    assert_eq!(back.proto(), state.proto());
    assert_eq!(back.samples_seen(), state.samples_seen());
    let mut bad = snap.clone();
    bad.version += 1;
    assert!(RouterState::from_snapshot(bad).is_err());
}

#[test]
fn identical_inputs_give_identical_statistics() {
    let inst = instance(21);
    let order: Vec<usize> = (0..inst.rows.len()).collect();
    let a = stream(&inst, &order, &mut ChaCha8Rng::seed_from_u64(1));
    let b = stream(&inst, &order, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(a.gram().as_slice(), b.gram().as_slice());
    assert_eq!(a.proto().as_slice(), b.proto().as_slice());
}
