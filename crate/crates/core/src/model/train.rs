use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backward::GradAccumulator;
use super::forward::{forward_with, loss, Mode, Predictor, StatuteQueries};
use super::{AoSParameters, ModelConfig, ModelError};
use crate::metrics::LabelConfusion;

/// Instances per gradient-accumulation chunk. Fixed so that the summation
/// order, and therefore the result, does not depend on the thread count.
const CHUNK: usize = 4;

/// Adam settings and the training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerOptions {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a dev macro-F1 improvement.
    pub patience: Option<usize>,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainerOptions {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 32,
            epochs: 30,
            patience: Some(5),
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One embedded training or evaluation case.
#[derive(Debug, Clone)]
pub struct Example {
    pub case_id: String,
    pub sentences: Array2<f64>,
    pub gold: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_micro_f1: f64,
    pub dev_macro_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: AoSParameters,
    pub history: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were returned; 0 if none ran.
    pub best_epoch: usize,
}

struct Adam {
    m: AoSParameters,
    v: AoSParameters,
    step: i32,
}

impl Adam {
    fn new(config: &ModelConfig) -> Self {
        Self {
            m: AoSParameters::zeros(config),
            v: AoSParameters::zeros(config),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut AoSParameters, grads: &AoSParameters, opts: &TrainerOptions) {
        self.step += 1;
        let c1 = 1.0 - opts.beta1.powi(self.step);
        let c2 = 1.0 - opts.beta2.powi(self.step);
        let grads = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(&grads).zip(ms).zip(vs) {
            for (((p, &g), m), v) in p.iter_mut().zip(g.values).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = opts.beta1 * *m + (1.0 - opts.beta1) * g;
                *v = opts.beta2 * *v + (1.0 - opts.beta2) * g * g;
                *p -= opts.learning_rate * (*m / c1) / ((*v / c2).sqrt() + opts.epsilon);
            }
        }
    }
}

/// Distinct dropout stream per (seed, epoch, instance).
fn dropout_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut z = seed
        ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Micro- and macro-F1 of eval-mode predictions over `examples`.
pub(crate) fn evaluate(
    params: &AoSParameters,
    config: &ModelConfig,
    statutes: ArrayView2<'_, f64>,
    examples: &[Example],
) -> Result<(f64, f64), ModelError> {
    let predictor = Predictor::new(params, config, statutes)?;
    let predicted: Vec<BTreeSet<usize>> = examples
        .par_iter()
        .map(|e| predictor.predict(e.sentences.view()).map(|p| p.predicted))
        .collect::<Result<_, _>>()?;
    let mut confusion = LabelConfusion::new(config.num_statutes);
    for (e, p) in examples.iter().zip(&predicted) {
        confusion.add(p, &e.gold);
    }
    Ok((confusion.micro().f1, confusion.macro_avg().f1))
}

/// Mini-batch Adam on the summed batch loss. After every epoch the dev set
/// is scored and the parameters with the best dev macro-F1 are kept.
pub fn train(
    initial: AoSParameters,
    config: &ModelConfig,
    train_set: &[Example],
    dev_set: &[Example],
    statutes: ArrayView2<'_, f64>,
    opts: &TrainerOptions,
) -> Result<TrainOutcome, ModelError> {
    config.validate()?;
    initial.check_shapes(config)?;
    if opts.batch_size == 0 {
        return Err(ModelError::Config("batch size must be at least 1".into()));
    }
    let mut params = initial;
    let mut best = (params.clone(), f64::NEG_INFINITY, 0usize);
    let mut history = Vec::new();
    let mut adam = Adam::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stale = 0usize;

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(opts.batch_size).enumerate() {
            let queries = StatuteQueries::new(&params, config, statutes)?;
            let chunks: Vec<Result<(f64, GradAccumulator), ModelError>> = batch
                .par_chunks(CHUNK)
                .enumerate()
                .map(|(chunk_no, chunk)| {
                    let mut acc = GradAccumulator::zeros(config);
                    let mut total = 0.0;
                    for (k, &idx) in chunk.iter().enumerate() {
                        let ex = &train_set[idx];
                        let position = batch_no * opts.batch_size + chunk_no * CHUNK + k;
                        let mode = Mode::Train {
                            seed: dropout_seed(opts.seed, epoch, position),
                        };
                        let trace = forward_with(&params, config, &queries, ex.sentences.view(), mode)?;
                        total += loss(&trace, &ex.gold, config).total;
                        acc.accumulate(&params, config, ex.sentences.view(), &trace, &ex.gold);
                    }
                    Ok((total, acc))
                })
                .collect();
            let mut batch_loss = 0.0;
            let mut acc = GradAccumulator::zeros(config);
            for r in chunks {
                let (l, a) = r?;
                batch_loss += l;
                acc.merge(&a);
            }
            if !batch_loss.is_finite() {
                return Err(ModelError::Divergence {
                    epoch,
                    batch: batch_no,
                    loss: batch_loss,
                });
            }
            epoch_loss += batch_loss;
            let grads = acc.finish(&params, &queries, statutes);
            adam.update(&mut params, &grads, opts);
            if !params.is_finite() {
                return Err(ModelError::Divergence {
                    epoch,
                    batch: batch_no,
                    loss: f64::NAN,
                });
            }
        }

        let (dev_micro_f1, dev_macro_f1) = evaluate(&params, config, statutes, dev_set)?;
        log::info!(
            "epoch {epoch}: train loss {epoch_loss:.4}, dev micro-F1 {dev_micro_f1:.4}, dev macro-F1 {dev_macro_f1:.4}"
        );
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss,
            dev_micro_f1,
            dev_macro_f1,
        });
        if dev_set.is_empty() || dev_macro_f1 > best.1 {
            best = (params.clone(), dev_macro_f1, epoch);
            stale = 0;
        } else {
            stale += 1;
            if opts.patience.is_some_and(|p| stale >= p) {
                log::info!("early stop after epoch {epoch}; best epoch {}", best.2);
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: best.0,
        history,
        best_epoch: best.2,
    })
}
