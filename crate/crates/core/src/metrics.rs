//! Multi-label evaluation: micro/macro precision, recall and F1, average
//! Jaccard similarity, and per-statute reports.
//!
//! Every 0/0 ratio is defined as 0, except Jaccard of two empty sets, which
//! is 1. Macro averages run over every label in the registry, including
//! labels that never occur.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::StatuteRegistry;
use crate::embeddings::EmbeddingMatrix;

/// Cosine similarity at or above which two statutes count as confusable.
pub const CONFUSABLE_COSINE: f64 = 0.75;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("prediction for case {predicted:?} aligned with gold case {gold:?}")]
    Misaligned { predicted: String, gold: String },
    #[error("{predictions} predictions but {golds} gold cases")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl Counts {
    pub fn prf(&self) -> Prf {
        let tp = self.tp as f64;
        let precision = ratio(tp, tp + self.fp as f64);
        let recall = ratio(tp, tp + self.fn_ as f64);
        Prf {
            precision,
            recall,
            f1: ratio(2.0 * precision * recall, precision + recall),
        }
    }
}

/// Per-label TP/FP/FN counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelConfusion {
    per_label: Vec<Counts>,
}

impl LabelConfusion {
    pub fn new(num_labels: usize) -> Self {
        Self {
            per_label: vec![Counts::default(); num_labels],
        }
    }

    pub fn from_sets<'a, I>(num_labels: usize, pairs: I) -> Self
    where
        I: IntoIterator<Item = (&'a BTreeSet<usize>, &'a BTreeSet<usize>)>,
    {
        let mut c = Self::new(num_labels);
        for (p, g) in pairs {
            c.add(p, g);
        }
        c
    }

    /// Records one case. Labels outside `0..num_labels` are ignored.
    pub fn add(&mut self, predicted: &BTreeSet<usize>, gold: &BTreeSet<usize>) {
        for &l in predicted {
            if let Some(c) = self.per_label.get_mut(l) {
                if gold.contains(&l) {
                    c.tp += 1;
                } else {
                    c.fp += 1;
                }
            }
        }
        for &l in gold.difference(predicted) {
            if let Some(c) = self.per_label.get_mut(l) {
                c.fn_ += 1;
            }
        }
    }

    pub fn num_labels(&self) -> usize {
        self.per_label.len()
    }

    pub fn label(&self, i: usize) -> Counts {
        self.per_label[i]
    }

    pub fn totals(&self) -> Counts {
        self.per_label.iter().fold(Counts::default(), |a, c| Counts {
            tp: a.tp + c.tp,
            fp: a.fp + c.fp,
            fn_: a.fn_ + c.fn_,
        })
    }

    pub fn micro(&self) -> Prf {
        micro_prf(&self.totals())
    }

    pub fn macro_avg(&self) -> Prf {
        macro_prf(&self.per_label)
    }
}

/// Precision, recall and F1 over pooled counts.
pub fn micro_prf(totals: &Counts) -> Prf {
    totals.prf()
}

/// Per-label precision, recall and F1, each averaged over all labels.
pub fn macro_prf(per_label: &[Counts]) -> Prf {
    if per_label.is_empty() {
        return Prf::default();
    }
    let n = per_label.len() as f64;
    let sum = per_label.iter().map(Counts::prf).fold(Prf::default(), |a, p| Prf {
        precision: a.precision + p.precision,
        recall: a.recall + p.recall,
        f1: a.f1 + p.f1,
    });
    Prf {
        precision: sum.precision / n,
        recall: sum.recall / n,
        f1: sum.f1 / n,
    }
}

pub fn jaccard(predicted: &BTreeSet<usize>, gold: &BTreeSet<usize>) -> f64 {
    let union = predicted.union(gold).count();
    if union == 0 {
        return 1.0;
    }
    predicted.intersection(gold).count() as f64 / union as f64
}

/// Mean per-case Jaccard similarity. Case ids must line up pairwise.
pub fn avg_jaccard(
    predictions: &[(String, BTreeSet<usize>)],
    golds: &[(String, BTreeSet<usize>)],
) -> Result<f64, MetricsError> {
    if predictions.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ((pid, p), (gid, g)) in predictions.iter().zip(golds) {
        if pid != gid {
            return Err(MetricsError::Misaligned {
                predicted: pid.clone(),
                gold: gid.clone(),
            });
        }
        total += jaccard(p, g);
    }
    Ok(total / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatuteRow {
    pub statute: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub train_frequency: usize,
    pub confusable: usize,
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    ratio(dot, (na * nb).sqrt())
}

/// Unordered statute pairs whose content embeddings have cosine similarity
/// at or above [`CONFUSABLE_COSINE`].
pub fn confusable_pairs(statute_embeddings: &EmbeddingMatrix) -> Vec<(usize, usize)> {
    let n = statute_embeddings.rows();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if cosine(statute_embeddings.row(i), statute_embeddings.row(j)) >= CONFUSABLE_COSINE {
                out.push((i, j));
            }
        }
    }
    out
}

/// Per-statute F1 next to its training frequency and how many other statutes
/// it is confusable with.
pub fn per_statute_report(
    confusion: &LabelConfusion,
    registry: &StatuteRegistry,
    train_counts: &[usize],
    statute_embeddings: Option<&EmbeddingMatrix>,
) -> Vec<StatuteRow> {
    let mut confusable = vec![0usize; registry.len()];
    if let Some(m) = statute_embeddings {
        for (i, j) in confusable_pairs(m) {
            confusable[i] += 1;
            confusable[j] += 1;
        }
    }
    registry
        .iter()
        .map(|s| {
            let c = confusion.label(s.id);
            let prf = c.prf();
            StatuteRow {
                statute: s.name.clone(),
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
                precision: prf.precision,
                recall: prf.recall,
                f1: prf.f1,
                train_frequency: train_counts.get(s.id).copied().unwrap_or(0),
                confusable: confusable[s.id],
            }
        })
        .collect()
}

/// Training-set occurrence count of every label.
pub fn label_frequencies<'a, I>(num_labels: usize, golds: I) -> Vec<usize>
where
    I: IntoIterator<Item = &'a BTreeSet<usize>>,
{
    let mut counts = vec![0; num_labels];
    for g in golds {
        for &l in g {
            if l < num_labels {
                counts[l] += 1;
            }
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub micro: Prf,
    #[serde(rename = "macro")]
    pub macro_: Prf,
    pub avg_jaccard: f64,
    pub cases: usize,
    pub per_statute: Vec<StatuteRow>,
}

impl Report {
    pub fn build(
        registry: &StatuteRegistry,
        predictions: &[(String, BTreeSet<usize>)],
        golds: &[(String, BTreeSet<usize>)],
        train_counts: &[usize],
        statute_embeddings: Option<&EmbeddingMatrix>,
    ) -> Result<Self, MetricsError> {
        let avg_jaccard = avg_jaccard(predictions, golds)?;
        let confusion = LabelConfusion::from_sets(
            registry.len(),
            predictions.iter().zip(golds).map(|((_, p), (_, g))| (p, g)),
        );
        Ok(Self {
            micro: confusion.micro(),
            macro_: confusion.macro_avg(),
            avg_jaccard,
            cases: predictions.len(),
            per_statute: per_statute_report(&confusion, registry, train_counts, statute_embeddings),
        })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MetricsError> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.per_statute {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }
}
