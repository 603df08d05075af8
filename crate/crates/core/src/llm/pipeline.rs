use std::collections::BTreeSet;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_prompt, parse_lenient, prompt_key, summarize_case, ChatClient, LlmError, PromptMode, SUMMARY_SENTENCES};
use crate::corpus::{mask_numerics, StatuteRegistry};
use crate::model::Predictor;

/// A case as the pipeline sees it: its text and sentence embeddings.
#[derive(Debug, Clone, Copy)]
pub struct PipelineCase<'a> {
    pub case_id: &'a str,
    pub sentences: &'a [String],
    pub embeddings: ArrayView2<'a, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub k: usize,
    pub mode: PromptMode,
    pub summary_sentences: usize,
}

impl PipelineOptions {
    pub fn new(k: usize, mode: PromptMode) -> Self {
        Self {
            k,
            mode,
            summary_sentences: SUMMARY_SENTENCES,
        }
    }
}

/// One output line per answered (case, statute) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub case_id: String,
    pub statute: String,
    pub mode: PromptMode,
    pub applicable: bool,
    pub explanation: String,
    pub common_aspects: Option<Vec<String>>,
    pub raw_sha: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErroredPair {
    pub case_id: String,
    pub statute: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseOutcome {
    pub case_id: String,
    /// Statutes sent to the LLM, most probable first.
    pub candidates: Vec<usize>,
    pub predicted: BTreeSet<usize>,
    /// Candidates whose request failed; leave them out of metrics.
    pub errored: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub cases: Vec<CaseOutcome>,
    pub verdicts: Vec<VerdictRecord>,
    pub errors: Vec<ErroredPair>,
    /// Raw replies by prompt hash, for writing a replay fixture.
    pub raw: Vec<(String, String)>,
}

struct Job {
    case: usize,
    statute: usize,
    prompt: String,
}

/// Asks the LLM about each case's top-`k` statutes, one prompt per statute.
///
/// Case text is digit-masked before summarization. Requests run concurrently
/// up to the client's limit; results are gathered in (case, rank) order, so
/// the output does not depend on completion order.
pub fn run_pipeline(
    cases: &[PipelineCase<'_>],
    predictor: &Predictor<'_>,
    registry: &StatuteRegistry,
    client: &dyn ChatClient,
    opts: &PipelineOptions,
) -> Result<PipelineOutput, LlmError> {
    let n = predictor.config.num_statutes;
    if opts.k == 0 || opts.k > n {
        return Err(LlmError::Config(format!("k must be in 1..={n}, got {}", opts.k)));
    }
    let mut candidates = Vec::with_capacity(cases.len());
    let mut jobs = Vec::new();
    for (ci, c) in cases.iter().enumerate() {
        let top: Vec<usize> = predictor
            .predict(c.embeddings)?
            .top_k(opts.k)
            .into_iter()
            .map(|(i, _)| i)
            .collect();
        let masked: Vec<String> = c.sentences.iter().map(|s| mask_numerics(s)).collect();
        let summary = summarize_case(c.case_id, &masked, c.embeddings, opts.summary_sentences);
        for &statute in &top {
            let content = &registry.get(statute).expect("statute id in range").content;
            jobs.push(Job {
                case: ci,
                statute,
                prompt: build_prompt(content, &summary.text, opts.mode).text,
            });
        }
        candidates.push(top);
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(client.max_in_flight().max(1))
        .build()
        .map_err(|e| LlmError::Config(e.to_string()))?;
    let replies: Vec<Result<String, LlmError>> =
        pool.install(|| jobs.par_iter().map(|j| client.complete(&j.prompt)).collect());

    let mut out = PipelineOutput {
        cases: cases
            .iter()
            .zip(candidates)
            .map(|(c, candidates)| CaseOutcome {
                case_id: c.case_id.to_string(),
                candidates,
                predicted: BTreeSet::new(),
                errored: BTreeSet::new(),
            })
            .collect(),
        verdicts: Vec::new(),
        errors: Vec::new(),
        raw: Vec::new(),
    };
    for (job, reply) in jobs.iter().zip(replies) {
        let case_id = cases[job.case].case_id;
        let statute = registry.name(job.statute).to_string();
        let outcome = &mut out.cases[job.case];
        match reply {
            Err(e) => {
                log::warn!("{case_id} / {statute}: {e}");
                outcome.errored.insert(job.statute);
                out.errors.push(ErroredPair {
                    case_id: case_id.to_string(),
                    statute,
                    error: e.to_string(),
                });
            }
            Ok(raw) => {
                let (verdict, issue) = parse_lenient(&raw, opts.mode);
                if let Some(issue) = issue {
                    log::warn!("{case_id} / {statute}: {issue}");
                }
                if verdict.applicable {
                    outcome.predicted.insert(job.statute);
                }
                out.verdicts.push(VerdictRecord {
                    case_id: case_id.to_string(),
                    statute,
                    mode: opts.mode,
                    applicable: verdict.applicable,
                    explanation: verdict.explanation,
                    common_aspects: verdict.common_aspects,
                    raw_sha: prompt_key(&raw),
                });
                out.raw.push((prompt_key(&job.prompt), raw));
            }
        }
    }
    Ok(out)
}
