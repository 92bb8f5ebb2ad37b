//! Inference-time aggregation over the online head and the selected
//! expert's EMA heads.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::RandomExpansion;
use crate::experts::{masked_softmax, Expert, Head, LogitMask};
use crate::router::Router;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of the masked raw logits, then one softmax.
    Mean,
    /// Element-wise max of the masked raw logits, then one softmax.
    MaxProb,
    /// Softmax of the head with the lowest-entropy prediction.
    MinEntropy,
    SoftmaxMean,
    #[default]
    SoftmaxMax,
    SoftmaxMinEntropy,
}

impl Aggregation {
    pub const ALL: [Aggregation; 6] = [
        Aggregation::Mean,
        Aggregation::MaxProb,
        Aggregation::MinEntropy,
        Aggregation::SoftmaxMean,
        Aggregation::SoftmaxMax,
        Aggregation::SoftmaxMinEntropy,
    ];
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * libm::log(p))
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutput {
    /// Aggregated score vector. Under `SoftmaxMax` it need not sum to 1.
    pub scores: Vec<f64>,
    pub predicted: usize,
    /// Raw logits per head; index 0 is the online head.
    pub head_logits: Vec<Vec<f64>>,
}

/// Combines per-head logits (index 0 = online head) under `mask`.
pub fn aggregate(head_logits: Vec<Vec<f64>>, mask: &LogitMask, agg: Aggregation) -> Result<EnsembleOutput> {
    let first = head_logits.first().ok_or(Error::Empty("ensemble head set"))?;
    let k = first.len();
    if mask.len() != k {
        return Err(Error::Shape {
            context: "ensemble: mask length",
            expected: k,
            actual: mask.len(),
        });
    }
    let masked: Vec<Vec<f64>> = head_logits
        .iter()
        .map(|z| z.iter().zip(&mask.values).map(|(z, m)| z + m).collect())
        .collect();
    let min_entropy_head = |probs: &[Vec<f64>]| {
        // Strictly smaller entropy wins, so ties keep the earlier head.
        let mut best = 0;
        let mut best_h = entropy(&probs[0]);
        for (j, p) in probs.iter().enumerate().skip(1) {
            let h = entropy(p);
            if h < best_h {
                best = j;
                best_h = h;
            }
        }
        best
    };
    let scores = match agg {
        Aggregation::Mean => masked_softmax(&elementwise(&masked, Reduce::Mean), mask)?,
        Aggregation::MaxProb => masked_softmax(&elementwise(&masked, Reduce::Max), mask)?,
        Aggregation::MinEntropy | Aggregation::SoftmaxMinEntropy => {
            let probs = softmaxes(&head_logits, mask)?;
            let j = min_entropy_head(&probs);
            probs.into_iter().nth(j).expect("index from same list")
        }
        Aggregation::SoftmaxMean => elementwise(&softmaxes(&head_logits, mask)?, Reduce::Mean),
        Aggregation::SoftmaxMax => elementwise(&softmaxes(&head_logits, mask)?, Reduce::Max),
    };
    let mut predicted = None;
    for c in mask.open_classes() {
        if predicted.is_none_or(|p: usize| scores[c] > scores[p]) {
            predicted = Some(c);
        }
    }
    Ok(EnsembleOutput {
        scores,
        predicted: predicted.ok_or(Error::Empty("unmasked class support"))?,
        head_logits,
    })
}

fn softmaxes(head_logits: &[Vec<f64>], mask: &LogitMask) -> Result<Vec<Vec<f64>>> {
    head_logits.iter().map(|z| masked_softmax(z, mask)).collect()
}

enum Reduce {
    Mean,
    Max,
}

fn elementwise(rows: &[Vec<f64>], how: Reduce) -> Vec<f64> {
    let k = rows[0].len();
    let mut out = match how {
        Reduce::Mean => vec![0.0; k],
        Reduce::Max => vec![f64::NEG_INFINITY; k],
    };
    for r in rows {
        for (o, &v) in out.iter_mut().zip(r) {
            match how {
                Reduce::Mean => *o += v,
                Reduce::Max => *o = o.max(v),
            }
        }
    }
    if let Reduce::Mean = how {
        let n = rows.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Adapts `h` with the expert's adapter and aggregates the online head with
/// the expert's EMA heads.
pub fn ensemble_predict(
    h: &[f64],
    expert: &Expert,
    online: &Head,
    mask: &LogitMask,
    agg: Aggregation,
) -> Result<EnsembleOutput> {
    if h.len() != online.dim() {
        return Err(Error::Shape {
            context: "ensemble: feature width",
            expected: online.dim(),
            actual: h.len(),
        });
    }
    let u = expert.adapter.adapt(h);
    let mut logits = Vec::with_capacity(expert.bank.len() + 1);
    logits.push(online.logits(&u));
    logits.extend(expert.bank.heads().iter().map(|head| head.logits(&u)));
    aggregate(logits, mask, agg)
}

/// How the expert for a test sample is chosen.
#[derive(Debug, Clone, Copy)]
pub enum RouteChoice<'a> {
    /// Ridge router over the expansion of the raw features.
    Router(&'a Router, &'a RandomExpansion),
    /// A fixed expert, e.g. supplied by the oracle or the latest expert.
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub selected: usize,
    /// Empty when routing was bypassed.
    pub routing_scores: Vec<f64>,
    pub head_logits: Vec<Vec<f64>>,
    pub predicted: usize,
}

/// Route, adapt, aggregate.
pub fn full_inference(
    h: &[f64],
    route: RouteChoice<'_>,
    experts: &[Expert],
    online: &Head,
    mask: &LogitMask,
    agg: Aggregation,
) -> Result<PredictionRecord> {
    if experts.is_empty() {
        return Err(Error::Empty("expert list"));
    }
    let (selected, routing_scores) = match route {
        RouteChoice::Router(router, expansion) => {
            if router.num_experts() != experts.len() {
                return Err(Error::Shape {
                    context: "inference: router experts",
                    expected: experts.len(),
                    actual: router.num_experts(),
                });
            }
            let code = expansion.expand_one(h)?;
            let scores = router.scores(&code);
            (crate::router::argmax(&scores), scores)
        }
        RouteChoice::Fixed(id) => (id, Vec::new()),
    };
    let expert = experts.get(selected).ok_or(Error::UnknownExpert {
        id: selected,
        count: experts.len(),
    })?;
    let out = ensemble_predict(h, expert, online, mask, agg)?;
    Ok(PredictionRecord {
        selected,
        routing_scores,
        head_logits: out.head_logits,
        predicted: out.predicted,
    })
}
