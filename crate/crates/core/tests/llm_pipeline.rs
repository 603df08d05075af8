mod common;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use common::http::serve;
use common::synth;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statute_core::corpus::{mask_numerics, CaseDescription, Dataset, Split};
use statute_core::embeddings::EmbeddedCorpus;
use statute_core::llm::{
    build_prompt, parse_response, prompt_key, render_response, run_pipeline, summarize_case, ChatClient,
    HttpChatClient, LlmClientConfig, LlmError, PipelineCase, PipelineOptions, PipelineOutput, PromptMode,
    RecordingClient, ReplayClient,
};
use statute_core::model::{AoSParameters, Predictor};
use statute_core::synthetic;

struct FnClient<F>(F, usize);

impl<F: Fn(&str) -> Result<String, LlmError> + Send + Sync> ChatClient for FnClient<F> {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        (self.0)(prompt)
    }
    fn max_in_flight(&self) -> usize {
        self.1
    }
}

struct Fixture {
    dataset: Dataset,
    corpus: EmbeddedCorpus,
    params: AoSParameters,
    embeddings: Vec<Array2<f64>>,
}

impl Fixture {
    fn new() -> Self {
        let (dataset, corpus) = synth::embedded();
        let config = synthetic::model_config(dataset.registry.len());
        let params = AoSParameters::init(&config, 4);
        let embeddings = dataset.split(Split::Test)[..30]
            .iter()
            .map(|c| corpus.case(&c.case_id).unwrap().to_f64())
            .collect();
        Self {
            dataset,
            corpus,
            params,
            embeddings,
        }
    }

    fn cases(&self) -> &[CaseDescription] {
        &self.dataset.split(Split::Test)[..30]
    }

    fn run(&self, client: &dyn ChatClient, k: usize, mode: PromptMode) -> PipelineOutput {
        let config = synthetic::model_config(self.dataset.registry.len());
        let y = self.corpus.statutes.to_f64();
        let pred = Predictor::new(&self.params, &config, y.view()).unwrap();
        let cases: Vec<PipelineCase> = self
            .cases()
            .iter()
            .zip(&self.embeddings)
            .map(|(c, e)| PipelineCase {
                case_id: &c.case_id,
                sentences: &c.sentences,
                embeddings: e.view(),
            })
            .collect();
        run_pipeline(&cases, &pred, &self.dataset.registry, client, &PipelineOptions::new(k, mode)).unwrap()
    }

    /// Replies for every (case, statute) prompt, decided by `answer`.
    fn replay(&self, mode: PromptMode, answer: impl Fn(&CaseDescription, usize) -> bool) -> ReplayClient {
        let mut fx = ReplayClient::default();
        for (c, e) in self.cases().iter().zip(&self.embeddings) {
            let masked: Vec<String> = c.sentences.iter().map(|s| mask_numerics(s)).collect();
            let summary = summarize_case(&c.case_id, &masked, e.view(), 25);
            for s in self.dataset.registry.iter() {
                let prompt = build_prompt(&s.content, &summary.text, mode);
                let aspects: Option<Vec<String>> = (mode == PromptMode::Cot).then(Vec::new);
                fx.insert(
                    &prompt.text,
                    render_response(answer(c, s.id), "Recorded.", aspects.as_deref()),
                );
            }
        }
        fx
    }
}

#[test]
fn yes_for_gold_is_limited_by_top_k_recall() {
    let f = Fixture::new();
    let client = f.replay(PromptMode::Standard, |c, s| c.gold_labels.contains(&s));
    for k in [1, 3, 5] {
        let out = f.run(&client, k, PromptMode::Standard);
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (o, c) in out.cases.iter().zip(f.cases()) {
            assert_eq!(o.candidates.len(), k);
            let top: BTreeSet<usize> = o.candidates.iter().copied().collect();
            let expected: BTreeSet<usize> = top.intersection(&c.gold_labels).copied().collect();
            assert_eq!(o.predicted, expected, "{}", c.case_id);
            tp += o.predicted.intersection(&c.gold_labels).count();
            fp += o.predicted.difference(&c.gold_labels).count();
            fn_ += c.gold_labels.difference(&o.predicted).count();
        }
        let (p, r) = (tp as f64 / (tp + fp).max(1) as f64, tp as f64 / (tp + fn_) as f64);
        // No false positives, so F1 is determined by recall of the gating step.
        assert_eq!(fp, 0);
        let gold_total: usize = f.cases().iter().map(|c| c.gold_labels.len()).sum();
        let covered: usize = out
            .cases
            .iter()
            .zip(f.cases())
            .map(|(o, c)| o.candidates.iter().filter(|s| c.gold_labels.contains(s)).count())
            .sum();
        assert_eq!(r, covered as f64 / gold_total as f64);
        if tp > 0 {
            assert_eq!(p, 1.0);
        }
    }
}

#[test]
fn all_no_gives_empty_predictions() {
    let f = Fixture::new();
    let client = f.replay(PromptMode::Cot, |_, _| false);
    let out = f.run(&client, 3, PromptMode::Cot);
    assert!(out.cases.iter().all(|c| c.predicted.is_empty()));
    assert!(out.errors.is_empty());
    assert_eq!(out.verdicts.len(), 30 * 3);
    assert!(out.verdicts.iter().all(|v| v.common_aspects == Some(vec![])));
}

#[test]
fn at_most_k_calls_per_case() {
    let f = Fixture::new();
    let calls = AtomicUsize::new(0);
    let client = FnClient(
        |_: &str| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok("Applicable: Yes\nExplanation: e".to_string())
        },
        4,
    );
    let out = f.run(&client, 3, PromptMode::Standard);
    assert_eq!(calls.load(Ordering::SeqCst), 30 * 3);
    assert!(out.cases.iter().all(|c| c.predicted.len() == 3));
}

#[test]
fn failed_requests_are_excluded_and_reported() {
    let f = Fixture::new();
    let client = FnClient(
        |p: &str| {
            if p.contains("Whoever commits arson shall") {
                Err(LlmError::Transport("boom".into()))
            } else {
                Ok("I cannot determine this.".to_string())
            }
        },
        2,
    );
    let out = f.run(&client, 12, PromptMode::Standard);
    assert_eq!(out.errors.len(), 30);
    assert!(out.errors.iter().all(|e| e.statute == "Section 101" && e.error.contains("boom")));
    for c in &out.cases {
        assert_eq!(c.errored, BTreeSet::from([0]));
        assert!(c.predicted.is_empty(), "unparseable replies count as not applicable");
    }
    assert_eq!(out.verdicts.len(), 30 * 11);
}

#[test]
fn output_order_ignores_completion_order() {
    let f = Fixture::new();
    let slow = FnClient(
        |p: &str| {
            let h = prompt_key(p);
            std::thread::sleep(Duration::from_micros(u64::from_str_radix(&h[..2], 16).unwrap() * 20));
            Ok(format!("Applicable: {}\nExplanation: {}", if h.as_bytes()[0] % 2 == 0 { "Yes" } else { "No" }, &h[..8]))
        },
        8,
    );
    let serial = FnClient(|p: &str| slow.complete(p), 1);
    let a = f.run(&slow, 4, PromptMode::Standard);
    let b = f.run(&serial, 4, PromptMode::Standard);
    assert_eq!(a, b);
}

#[test]
fn recorded_run_replays_identically() {
    let f = Fixture::new();
    let live = FnClient(|p: &str| Ok(format!("Applicable: Yes\nExplanation: {}", &prompt_key(p)[..6])), 4);
    let recorder = RecordingClient::new(&live);
    let first = f.run(&recorder, 2, PromptMode::Cot);
    let fixture = recorder.into_fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fx.jsonl");
    fixture.save(&path).unwrap();
    let replayed = f.run(&ReplayClient::load(&path).unwrap(), 2, PromptMode::Cot);
    assert_eq!(first, replayed);
    assert_eq!(first.raw.len(), fixture.len());
}

#[test]
fn http_client_sends_chat_request_and_retries() {
    let ok = r#"{"choices": [{"message": {"role": "assistant", "content": "Applicable: Yes\nExplanation: ok"}}]}"#;
    let (url, server) = serve(vec![(503, "{}".into()), (200, ok.into())]);
    let client = HttpChatClient::new(LlmClientConfig {
        endpoint: format!("{url}/v1/chat/completions"),
        model: "mock-model".into(),
        backoff_ms: 1,
        ..Default::default()
    })
    .unwrap();
    let reply = client.complete("PROMPT").unwrap();
    assert_eq!(parse_response(&reply, PromptMode::Standard).unwrap().explanation, "ok");
    let bodies = server.join().unwrap();
    assert_eq!(bodies.len(), 2);
    let sent: serde_json::Value = serde_json::from_str(&bodies[1]).unwrap();
    assert_eq!(
        sent,
        serde_json::json!({
            "model": "mock-model",
            "messages": [{"role": "user", "content": "PROMPT"}],
            "temperature": 0.3,
            "max_tokens": 200
        })
    );
}

#[test]
fn http_client_gives_up_on_client_errors() {
    let (url, server) = serve(vec![(400, "{}".into())]);
    let client = HttpChatClient::new(LlmClientConfig {
        endpoint: url,
        model: "m".into(),
        backoff_ms: 1,
        ..Default::default()
    })
    .unwrap();
    assert!(matches!(client.complete("p"), Err(LlmError::Transport(_))));
    assert_eq!(server.join().unwrap().len(), 1);
}

#[test]
fn centroid_summary_picks_the_on_topic_sentences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 64;
    let mut e = Array2::<f64>::zeros((60, d));
    let mut on_topic = BTreeSet::new();
    let mut order: Vec<usize> = (0..60).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    for (rank, &j) in order.iter().enumerate() {
        if rank < 25 {
            on_topic.insert(j);
            e[[j, 0]] = 1.0;
            e[[j, 1]] = rng.random_range(-0.05..0.05);
        } else {
            // Each noise sentence gets its own axis, orthogonal to the topic.
            e[[j, 2 + (rank - 25)]] = 1.0;
        }
    }
    let sentences: Vec<String> = (0..60).map(|j| format!("s{j}")).collect();
    let summary = summarize_case("c", &sentences, e.view(), 25);
    assert_eq!(summary.indices.iter().copied().collect::<BTreeSet<_>>(), on_topic);

    // Brute force: every kept sentence scores at least as high as every dropped one.
    let centroid = e.mean_axis(ndarray::Axis(0)).unwrap();
    let score = |j: usize| {
        let r = e.row(j);
        r.dot(&centroid) / (r.dot(&r).sqrt() * centroid.dot(&centroid).sqrt())
    };
    let kept_min = summary.indices.iter().map(|&j| score(j)).fold(f64::INFINITY, f64::min);
    let dropped_max = (0..60).filter(|j| !on_topic.contains(j)).map(score).fold(f64::NEG_INFINITY, f64::max);
    assert!(kept_min > dropped_max);
    assert_eq!(summary.text.split(' ').count(), 25);
}

fn phrase() -> impl Strategy<Value = String> {
    proptest::collection::vec("[a-zA-Z]{1,8}", 1..5).prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn parse_inverts_render(
        yes in any::<bool>(),
        explanation in phrase(),
        aspects in proptest::option::of(proptest::collection::vec(phrase(), 0..4)),
    ) {
        let explanation = format!("{explanation}.");
        let mode = if aspects.is_some() { PromptMode::Cot } else { PromptMode::Standard };
        let raw = render_response(yes, &explanation, aspects.as_deref());
        let v = parse_response(&raw, mode).unwrap();
        prop_assert_eq!(v.applicable, yes);
        prop_assert_eq!(v.explanation, explanation);
        prop_assert_eq!(v.common_aspects, aspects);
    }

    #[test]
    fn summaries_keep_order_and_size(n in 1usize..80, max in 1usize..30, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Array2::from_shape_simple_fn((n, 5), || rng.random_range(-1.0..1.0));
        let sentences: Vec<String> = (0..n).map(|j| format!("s{j}")).collect();
        let s = summarize_case("c", &sentences, e.view(), max);
        prop_assert_eq!(s.indices.len(), n.min(max));
        prop_assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn parser_never_panics(raw in "(?s).{0,200}") {
        let _ = parse_response(&raw, PromptMode::Cot);
        let _ = parse_response(&raw, PromptMode::Standard);
    }
}
