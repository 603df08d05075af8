use std::collections::BTreeSet;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::forward::{class_weight, ForwardTrace, StatuteQueries, LOG_FLOOR};
use super::{AoSParameters, ModelConfig};

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(r, c)| a[r] * b[c])
}

fn add_outer(acc: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    ndarray::linalg::general_mat_mul(
        1.0,
        &a.view().insert_axis(Axis(1)),
        &b.view().insert_axis(Axis(0)),
        1.0,
        acc,
    );
}

/// Gradient accumulator for a batch.
///
/// Query-side gradients are kept as `dL/du` and `dL/d(offset)` per head and
/// only expanded to `W_q, b_q, W_k, b_k` once per batch by [`finish`](Self::finish).
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    w_h: Array2<f64>,
    b_h: Array1<f64>,
    w_o: Vec<Array2<f64>>,
    b_o: Vec<Array1<f64>>,
    proj: Vec<Vec<Array1<f64>>>,
    offset: Vec<Vec<f64>>,
}

impl GradAccumulator {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            w_h: Array2::zeros((config.hidden_dim, config.concat_dim())),
            b_h: Array1::zeros(config.hidden_dim),
            w_o: vec![Array2::zeros((2, config.hidden_dim)); config.num_statutes],
            b_o: vec![Array1::zeros(2); config.num_statutes],
            proj: vec![vec![Array1::zeros(config.input_dim); config.heads]; config.num_statutes],
            offset: vec![vec![0.0; config.heads]; config.num_statutes],
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.w_h += &other.w_h;
        self.b_h += &other.b_h;
        for (a, b) in self.w_o.iter_mut().zip(&other.w_o) {
            *a += b;
        }
        for (a, b) in self.b_o.iter_mut().zip(&other.b_o) {
            *a += b;
        }
        for (a, b) in self.proj.iter_mut().flatten().zip(other.proj.iter().flatten()) {
            *a += b;
        }
        for (a, b) in self.offset.iter_mut().flatten().zip(other.offset.iter().flatten()) {
            *a += b;
        }
    }

    /// Adds the gradient of `loss_total` for one case. `trace` must come
    /// from a forward pass over `case` with the same parameters.
    pub fn accumulate(
        &mut self,
        params: &AoSParameters,
        config: &ModelConfig,
        case: ArrayView2<'_, f64>,
        trace: &ForwardTrace,
        gold: &BTreeSet<usize>,
    ) {
        let d = config.input_dim;
        let scale = (config.attn_dim as f64).sqrt();
        for (i, st) in trace.statutes.iter().enumerate() {
            let positive = gold.contains(&i);
            let target = usize::from(positive);
            if st.probs[target] < LOG_FLOOR {
                // Clamped region: the loss is flat here.
                continue;
            }
            let w = class_weight(config, positive);
            let mut d_out = Array1::from_vec(vec![w * st.probs[0], w * st.probs[1]]);
            d_out[target] -= w;

            add_outer(&mut self.w_o[i], &d_out, &st.hidden);
            self.b_o[i] += &d_out;

            let mut d_pre = params.w_o[i].t().dot(&d_out);
            if let Some(mask) = &st.dropout_mask {
                d_pre *= mask;
            }
            d_pre.zip_mut_with(&st.hidden_pre, |g, &pre| {
                if pre <= 0.0 {
                    *g = 0.0;
                }
            });

            add_outer(&mut self.w_h, &d_pre, &st.concat);
            self.b_h += &d_pre;
            let d_concat = params.w_h.t().dot(&d_pre);

            for (h, head) in st.heads.iter().enumerate() {
                let d_context = d_concat.slice(s![h * d..(h + 1) * d]);
                let d_weights = case.dot(&d_context);
                let mean = head.weights.dot(&d_weights);
                let d_logits = &head.weights * &(d_weights - mean);
                self.proj[i][h].scaled_add(1.0 / scale, &d_logits.dot(&case));
                self.offset[i][h] += d_logits.sum() / scale;
            }
        }
    }

    /// Expands the accumulated query-side gradients through `u = W_k^T q`,
    /// `offset = b_k . q` and `q = W_q y + b_q`.
    pub fn finish(
        self,
        params: &AoSParameters,
        queries: &StatuteQueries,
        statutes: ArrayView2<'_, f64>,
    ) -> AoSParameters {
        let mut heads = Vec::with_capacity(params.heads.len());
        for (i, statute) in params.heads.iter().enumerate() {
            let y = statutes.row(i).to_owned();
            let mut hs = Vec::with_capacity(statute.len());
            for (h, head) in statute.iter().enumerate() {
                let q = &queries.query[i][h];
                let g_u = &self.proj[i][h];
                let g_off = self.offset[i][h];
                let w_k = outer(q, g_u);
                let b_k = q * g_off;
                let d_q = head.w_k.dot(g_u) + &head.b_k * g_off;
                let w_q = outer(&d_q, &y);
                hs.push(super::HeadParams {
                    w_q,
                    b_q: d_q,
                    w_k,
                    b_k,
                });
            }
            heads.push(hs);
        }
        AoSParameters {
            heads,
            w_h: self.w_h,
            b_h: self.b_h,
            w_o: self.w_o,
            b_o: self.b_o,
        }
    }
}

/// Gradient of `loss_total` for one case with respect to every parameter.
/// Embeddings are inputs and receive no gradient. Dropout masks, if any,
/// are taken from `trace`.
pub fn backward(
    params: &AoSParameters,
    config: &ModelConfig,
    case: ArrayView2<'_, f64>,
    statutes: ArrayView2<'_, f64>,
    gold: &BTreeSet<usize>,
    trace: &ForwardTrace,
) -> Result<AoSParameters, super::ModelError> {
    let queries = StatuteQueries::new(params, config, statutes)?;
    let mut acc = GradAccumulator::zeros(config);
    acc.accumulate(params, config, case, trace, gold);
    Ok(acc.finish(params, &queries, statutes))
}
