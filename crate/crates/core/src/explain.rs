//! Attention explanations and their counterfactual evaluation.
//!
//! The explanation for a predicted statute is the union over heads of each
//! head's highest-attention sentence. Necessity removes those sentences and
//! checks that the statute is no longer predicted; sufficiency keeps only
//! those sentences and checks that it still is. Both re-run the classifier on
//! row subsets of the cached sentence embeddings.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::StatuteRegistry;
use crate::model::{ForwardTrace, ModelError, Predictor};

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error("statute {statute} is not predicted for case {case_id}")]
    NotPredicted { case_id: String, statute: usize },
    #[error("statute {0} is out of range")]
    UnknownStatute(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadPick {
    pub head: usize,
    pub sentence: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub case_id: String,
    pub statute: usize,
    pub sentence_indices: BTreeSet<usize>,
    pub heads: Vec<HeadPick>,
}

/// First index of the maximum; NaN never wins.
fn argmax(values: impl IntoIterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

/// Per-head argmax sentences for `statute`, read off an existing trace.
/// Does not check that the statute is predicted.
pub fn explanation_from_trace(case_id: &str, trace: &ForwardTrace, statute: usize) -> Result<Explanation, ExplainError> {
    let st = trace
        .statutes
        .get(statute)
        .ok_or(ExplainError::UnknownStatute(statute))?;
    let heads: Vec<HeadPick> = st
        .heads
        .iter()
        .enumerate()
        .map(|(head, h)| {
            let (sentence, weight) = argmax(h.weights.iter().copied());
            HeadPick { head, sentence, weight }
        })
        .collect();
    Ok(Explanation {
        case_id: case_id.to_string(),
        statute,
        sentence_indices: heads.iter().map(|p| p.sentence).collect(),
        heads,
    })
}

/// Explanation for a statute the classifier predicts for this case.
pub fn explain(
    predictor: &Predictor<'_>,
    case_id: &str,
    case: ArrayView2<'_, f64>,
    statute: usize,
) -> Result<Explanation, ExplainError> {
    if statute >= predictor.config.num_statutes {
        return Err(ExplainError::UnknownStatute(statute));
    }
    let trace = predictor.trace(case)?;
    if trace.statutes[statute].probs[crate::model::POSITIVE] <= 0.5 {
        return Err(ExplainError::NotPredicted {
            case_id: case_id.to_string(),
            statute,
        });
    }
    explanation_from_trace(case_id, &trace, statute)
}

/// Explanations for every predicted statute of a case, in statute order.
pub fn explain_predicted(
    predictor: &Predictor<'_>,
    case_id: &str,
    case: ArrayView2<'_, f64>,
) -> Result<Vec<Explanation>, ExplainError> {
    let trace = predictor.trace(case)?;
    trace
        .statutes
        .iter()
        .enumerate()
        .filter(|(_, s)| s.probs[crate::model::POSITIVE] > 0.5)
        .map(|(i, _)| explanation_from_trace(case_id, &trace, i))
        .collect()
}

/// JSON-lines form of an explanation: one entry per explanation sentence,
/// attributed to the first head that selected it, plus the per-head picks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub case_id: String,
    pub statute: String,
    pub sentences: Vec<ExplainedSentence>,
    pub heads: Vec<HeadPick>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedSentence {
    pub index: usize,
    pub text: String,
    pub weight: f64,
    pub head: usize,
}

impl ExplanationRecord {
    pub fn new(e: &Explanation, sentences: &[String], registry: &StatuteRegistry) -> Self {
        let sentences = e
            .sentence_indices
            .iter()
            .map(|&index| {
                let pick = e.heads.iter().find(|p| p.sentence == index).expect("index came from a head");
                ExplainedSentence {
                    index,
                    text: sentences.get(index).cloned().unwrap_or_default(),
                    weight: pick.weight,
                    head: pick.head,
                }
            })
            .collect();
        Self {
            case_id: e.case_id.clone(),
            statute: registry.name(e.statute).to_string(),
            sentences,
            heads: e.heads.clone(),
        }
    }
}

/// One case for counterfactual evaluation: its id and sentence embeddings.
#[derive(Debug, Clone, Copy)]
pub struct CaseInput<'a> {
    pub case_id: &'a str,
    pub sentences: ArrayView2<'a, f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualCounts {
    pub total: usize,
    pub nf_numerator: usize,
    pub sf_numerator: usize,
}

impl CounterfactualCounts {
    fn add(&mut self, other: &Self) {
        self.total += other.total;
        self.nf_numerator += other.nf_numerator;
        self.sf_numerator += other.sf_numerator;
    }

    fn ratio(num: usize, total: usize) -> f64 {
        if total == 0 {
            0.0
        } else {
            num as f64 / total as f64
        }
    }

    pub fn nf(&self) -> f64 {
        Self::ratio(self.nf_numerator, self.total)
    }

    pub fn sf(&self) -> f64 {
        Self::ratio(self.sf_numerator, self.total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatuteCounterfactual {
    pub statute: String,
    #[serde(flatten)]
    pub counts: CounterfactualCounts,
    pub nf: f64,
    pub sf: f64,
}

/// NF and SF over a set of cases. Both ratios share `total`, the number of
/// (case, predicted statute) pairs. With no predictions both ratios are 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    pub total: usize,
    pub nf_numerator: usize,
    pub nf: f64,
    pub sf_numerator: usize,
    pub sf: f64,
    pub per_statute: Vec<StatuteCounterfactual>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PairOutcome {
    statute: usize,
    removed_repredicted: bool,
    retained_repredicted: bool,
}

fn case_outcomes(predictor: &Predictor<'_>, case: &CaseInput<'_>) -> Result<Vec<PairOutcome>, ModelError> {
    let trace = predictor.trace(case.sentences)?;
    let n = case.sentences.nrows();
    let mut out = Vec::new();
    for (i, st) in trace.statutes.iter().enumerate() {
        if st.probs[crate::model::POSITIVE] <= 0.5 {
            continue;
        }
        let e = explanation_from_trace(case.case_id, &trace, i).expect("statute in range");
        let kept: Vec<usize> = (0..n).filter(|j| !e.sentence_indices.contains(j)).collect();
        let only: Vec<usize> = e.sentence_indices.iter().copied().collect();
        let removed = predictor.predict_rows(case.sentences, &kept)?;
        let retained = predictor.predict_rows(case.sentences, &only)?;
        out.push(PairOutcome {
            statute: i,
            removed_repredicted: removed.predicted.contains(&i),
            retained_repredicted: retained.predicted.contains(&i),
        });
    }
    Ok(out)
}

fn tally(predictor: &Predictor<'_>, cases: &[CaseInput<'_>]) -> Result<Vec<CounterfactualCounts>, ModelError> {
    let per_case: Vec<Vec<PairOutcome>> = cases
        .par_iter()
        .map(|c| case_outcomes(predictor, c))
        .collect::<Result<_, _>>()?;
    let mut counts = vec![CounterfactualCounts::default(); predictor.config.num_statutes];
    for o in per_case.iter().flatten() {
        let c = &mut counts[o.statute];
        c.total += 1;
        c.nf_numerator += usize::from(!o.removed_repredicted);
        c.sf_numerator += usize::from(o.retained_repredicted);
    }
    Ok(counts)
}

/// Runs both counterfactuals for every predicted (case, statute) pair.
pub fn counterfactual_report(
    predictor: &Predictor<'_>,
    cases: &[CaseInput<'_>],
    registry: &StatuteRegistry,
) -> Result<CounterfactualReport, ModelError> {
    let counts = tally(predictor, cases)?;
    let mut all = CounterfactualCounts::default();
    let mut per_statute = Vec::new();
    for (i, c) in counts.iter().enumerate() {
        all.add(c);
        if c.total > 0 {
            per_statute.push(StatuteCounterfactual {
                statute: registry.name(i).to_string(),
                counts: *c,
                nf: c.nf(),
                sf: c.sf(),
            });
        }
    }
    Ok(CounterfactualReport {
        total: all.total,
        nf_numerator: all.nf_numerator,
        nf: all.nf(),
        sf_numerator: all.sf_numerator,
        sf: all.sf(),
        per_statute,
    })
}

/// `(numerator, total)` for the necessity factor.
pub fn necessity_factor(predictor: &Predictor<'_>, cases: &[CaseInput<'_>]) -> Result<(usize, usize), ModelError> {
    let counts = tally(predictor, cases)?;
    Ok((
        counts.iter().map(|c| c.nf_numerator).sum(),
        counts.iter().map(|c| c.total).sum(),
    ))
}

/// `(numerator, total)` for the sufficiency factor.
pub fn sufficiency_factor(predictor: &Predictor<'_>, cases: &[CaseInput<'_>]) -> Result<(usize, usize), ModelError> {
    let counts = tally(predictor, cases)?;
    Ok((
        counts.iter().map(|c| c.sf_numerator).sum(),
        counts.iter().map(|c| c.total).sum(),
    ))
}

/// Sentence indices of each explanation grouped by case, handy for reports.
pub fn indices_by_case(explanations: &[Explanation]) -> BTreeMap<&str, BTreeSet<usize>> {
    let mut out: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    for e in explanations {
        out.entry(e.case_id.as_str()).or_default().extend(&e.sentence_indices);
    }
    out
}
