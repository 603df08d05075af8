use std::collections::BTreeSet;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AoSParameters, ModelConfig, ModelError, POSITIVE};

/// Floor applied to probabilities before taking logs in the loss.
pub const LOG_FLOOR: f64 = 1e-12;

/// Whether dropout is active for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Inverted dropout on the hidden layer, masks drawn from `seed`.
    Train { seed: u64 },
}

/// Query, keys and attention of one head, computed key-by-key.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAttention {
    pub query: Array1<f64>,
    /// One row per sentence.
    pub keys: Array2<f64>,
    pub logits: Array1<f64>,
    pub weights: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace {
    pub logits: Array1<f64>,
    pub weights: Array1<f64>,
    pub context: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatuteTrace {
    pub heads: Vec<HeadTrace>,
    pub concat: Array1<f64>,
    /// Hidden pre-activation `W_h c + b_h`.
    pub hidden_pre: Array1<f64>,
    /// Hidden activation after ReLU and dropout.
    pub hidden: Array1<f64>,
    /// Inverted-dropout multipliers (0 or `1/(1-p)`), present in training mode.
    pub dropout_mask: Option<Array1<f64>>,
    /// `[not applicable, applicable]`.
    pub probs: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub statutes: Vec<StatuteTrace>,
}

impl ForwardTrace {
    pub fn probabilities(&self) -> Vec<f64> {
        self.statutes.iter().map(|s| s.probs[POSITIVE]).collect()
    }
}

/// Statute-side quantities that do not depend on the case.
///
/// Since `k_j . q = x_j . (W_k^T q) + b_k . q`, each head reduces to a
/// projection vector `u` over sentence embeddings plus a scalar offset.
#[derive(Debug, Clone)]
pub struct StatuteQueries {
    pub(crate) query: Vec<Vec<Array1<f64>>>,
    pub(crate) proj: Vec<Vec<Array1<f64>>>,
    pub(crate) offset: Vec<Vec<f64>>,
}

impl StatuteQueries {
    pub fn new(
        params: &AoSParameters,
        config: &ModelConfig,
        statutes: ArrayView2<'_, f64>,
    ) -> Result<Self, ModelError> {
        if statutes.dim() != (config.num_statutes, config.input_dim) {
            return Err(ModelError::Shape(format!(
                "statute matrix is {:?}, expected ({}, {})",
                statutes.dim(),
                config.num_statutes,
                config.input_dim
            )));
        }
        let mut query = Vec::with_capacity(config.num_statutes);
        let mut proj = Vec::with_capacity(config.num_statutes);
        let mut offset = Vec::with_capacity(config.num_statutes);
        for (i, heads) in params.heads.iter().enumerate() {
            let y = statutes.row(i);
            let mut qs = Vec::with_capacity(heads.len());
            let mut us = Vec::with_capacity(heads.len());
            let mut bs = Vec::with_capacity(heads.len());
            for head in heads {
                let q = head.w_q.dot(&y) + &head.b_q;
                us.push(head.w_k.t().dot(&q));
                bs.push(head.b_k.dot(&q));
                qs.push(q);
            }
            query.push(qs);
            proj.push(us);
            offset.push(bs);
        }
        Ok(Self {
            query,
            proj,
            offset,
        })
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let total = exp.sum();
    exp / total
}

fn check_case(config: &ModelConfig, case: ArrayView2<'_, f64>) -> Result<(), ModelError> {
    let (rows, cols) = case.dim();
    if rows == 0 {
        return Err(ModelError::Shape("case has no sentences".into()));
    }
    if cols != config.input_dim {
        return Err(ModelError::Shape(format!(
            "case embeddings have dimension {cols}, expected {}",
            config.input_dim
        )));
    }
    if rows > config.max_sentences {
        return Err(ModelError::Shape(format!(
            "case has {rows} sentences, limit is {}",
            config.max_sentences
        )));
    }
    Ok(())
}

/// Attention of head `head` of statute `statute` over the case's sentences,
/// with the query and every key materialized.
pub fn attention_weights(
    params: &AoSParameters,
    config: &ModelConfig,
    statute: usize,
    head: usize,
    case: ArrayView2<'_, f64>,
    statute_embedding: ArrayView1<'_, f64>,
) -> Result<HeadAttention, ModelError> {
    check_case(config, case)?;
    if statute >= config.num_statutes || head >= config.heads {
        return Err(ModelError::Shape(format!(
            "no head ({statute}, {head}) in a model with {} statutes and {} heads",
            config.num_statutes, config.heads
        )));
    }
    if statute_embedding.len() != config.input_dim {
        return Err(ModelError::Shape(format!(
            "statute embedding has dimension {}, expected {}",
            statute_embedding.len(),
            config.input_dim
        )));
    }
    let p = &params.heads[statute][head];
    let query = p.w_q.dot(&statute_embedding) + &p.b_q;
    let keys = case.dot(&p.w_k.t()) + &p.b_k;
    let logits = keys.dot(&query) / (config.attn_dim as f64).sqrt();
    let weights = softmax(logits.view());
    Ok(HeadAttention {
        query,
        keys,
        logits,
        weights,
    })
}

fn dropout_mask(rng: &mut ChaCha8Rng, len: usize, p: f64) -> Array1<f64> {
    let keep = 1.0 / (1.0 - p);
    Array1::from_shape_fn(len, |_| if rng.random::<f64>() < p { 0.0 } else { keep })
}

/// Forward pass over all statutes with precomputed statute queries.
pub fn forward_with(
    params: &AoSParameters,
    config: &ModelConfig,
    queries: &StatuteQueries,
    case: ArrayView2<'_, f64>,
    mode: Mode,
) -> Result<ForwardTrace, ModelError> {
    check_case(config, case)?;
    let scale = (config.attn_dim as f64).sqrt();
    let mut rng = match mode {
        Mode::Train { seed } if config.dropout > 0.0 => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let d = config.input_dim;
    let mut statutes = Vec::with_capacity(config.num_statutes);
    for i in 0..config.num_statutes {
        let mut heads = Vec::with_capacity(config.heads);
        let mut concat = Array1::zeros(config.concat_dim());
        for h in 0..config.heads {
            let logits = (case.dot(&queries.proj[i][h]) + queries.offset[i][h]) / scale;
            if logits.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite {
                    statute: i,
                    head: Some(h),
                });
            }
            let weights = softmax(logits.view());
            let context = weights.dot(&case);
            concat.slice_mut(s![h * d..(h + 1) * d]).assign(&context);
            heads.push(HeadTrace {
                logits,
                weights,
                context,
            });
        }
        let hidden_pre = params.w_h.dot(&concat) + &params.b_h;
        let mut hidden = hidden_pre.mapv(|v| v.max(0.0));
        let dropout_mask = rng
            .as_mut()
            .map(|r| dropout_mask(r, config.hidden_dim, config.dropout));
        if let Some(mask) = &dropout_mask {
            hidden *= mask;
        }
        let out = params.w_o[i].dot(&hidden) + &params.b_o[i];
        let probs = softmax(out.view());
        let probs = [probs[0], probs[1]];
        if probs.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite {
                statute: i,
                head: None,
            });
        }
        statutes.push(StatuteTrace {
            heads,
            concat,
            hidden_pre,
            hidden,
            dropout_mask,
            probs,
        });
    }
    Ok(ForwardTrace { statutes })
}

/// Full forward pass. `case` is `|C| x D_in`, `statutes` is `N x D_in`.
pub fn forward(
    params: &AoSParameters,
    config: &ModelConfig,
    case: ArrayView2<'_, f64>,
    statutes: ArrayView2<'_, f64>,
    mode: Mode,
) -> Result<ForwardTrace, ModelError> {
    let queries = StatuteQueries::new(params, config, statutes)?;
    forward_with(params, config, &queries, case, mode)
}

/// Weighted cross-entropy, per statute and summed.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss {
    pub total: f64,
    pub per_statute: Vec<f64>,
}

pub fn class_weight(config: &ModelConfig, positive: bool) -> f64 {
    if positive {
        config.positive_weight
    } else {
        config.negative_weight
    }
}

pub fn loss(trace: &ForwardTrace, gold: &BTreeSet<usize>, config: &ModelConfig) -> Loss {
    let per_statute: Vec<f64> = trace
        .statutes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let positive = gold.contains(&i);
            let p = s.probs[usize::from(positive)];
            -class_weight(config, positive) * p.max(LOG_FLOOR).ln()
        })
        .collect();
    Loss {
        total: per_statute.iter().sum(),
        per_statute,
    }
}

/// Per-statute probabilities and the statutes predicted applicable.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub probs: Vec<f64>,
    pub predicted: BTreeSet<usize>,
}

impl PredictionSet {
    /// Statute `i` is predicted iff `p_i > 0.5`; an exact tie is negative.
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let predicted = probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.5)
            .map(|(i, _)| i)
            .collect();
        Self { probs, predicted }
    }

    /// The `k` most probable statutes, ties broken toward the lower id.
    pub fn top_k(&self, k: usize) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = self.probs.iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }
}

/// A parameter set bound to statute embeddings, ready for repeated inference.
pub struct Predictor<'a> {
    pub params: &'a AoSParameters,
    pub config: &'a ModelConfig,
    queries: StatuteQueries,
}

impl<'a> Predictor<'a> {
    pub fn new(
        params: &'a AoSParameters,
        config: &'a ModelConfig,
        statutes: ArrayView2<'_, f64>,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            params,
            config,
            queries: StatuteQueries::new(params, config, statutes)?,
        })
    }

    pub fn trace(&self, case: ArrayView2<'_, f64>) -> Result<ForwardTrace, ModelError> {
        forward_with(self.params, self.config, &self.queries, case, Mode::Eval)
    }

    pub fn predict(&self, case: ArrayView2<'_, f64>) -> Result<PredictionSet, ModelError> {
        Ok(PredictionSet::from_probs(self.trace(case)?.probabilities()))
    }

    /// Predictions for the case restricted to the given sentence rows. An
    /// empty selection predicts nothing.
    pub fn predict_rows(
        &self,
        case: ArrayView2<'_, f64>,
        rows: &[usize],
    ) -> Result<PredictionSet, ModelError> {
        if rows.is_empty() {
            return Ok(PredictionSet::from_probs(vec![0.0; self.config.num_statutes]));
        }
        self.predict(case.select(Axis(0), rows).view())
    }
}

pub fn predict(
    params: &AoSParameters,
    config: &ModelConfig,
    case: ArrayView2<'_, f64>,
    statutes: ArrayView2<'_, f64>,
) -> Result<PredictionSet, ModelError> {
    Predictor::new(params, config, statutes)?.predict(case)
}

pub fn top_k(
    params: &AoSParameters,
    config: &ModelConfig,
    case: ArrayView2<'_, f64>,
    statutes: ArrayView2<'_, f64>,
    k: usize,
) -> Result<Vec<(usize, f64)>, ModelError> {
    if k == 0 || k > config.num_statutes {
        return Err(ModelError::Config(format!(
            "k must be in 1..={}, got {k}",
            config.num_statutes
        )));
    }
    Ok(predict(params, config, case, statutes)?.top_k(k))
}
