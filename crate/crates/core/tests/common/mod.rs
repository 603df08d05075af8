//! Test-only reference implementations, kept independent of the library's
//! factored attention path and ndarray arithmetic.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statute_core::model::{AoSParameters, ModelConfig};

pub struct OracleStatute {
    pub alphas: Vec<Vec<f64>>,
    pub contexts: Vec<Vec<f64>>,
    pub probs: [f64; 2],
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Loop-by-loop evaluation with explicit query and key vectors.
pub fn oracle_forward(
    p: &AoSParameters,
    c: &ModelConfig,
    x: &[Vec<f64>],
    y: &[Vec<f64>],
) -> Vec<OracleStatute> {
    let mut out = Vec::new();
    for i in 0..c.num_statutes {
        let mut alphas = Vec::new();
        let mut contexts = Vec::new();
        let mut concat = Vec::new();
        for h in 0..c.heads {
            let hp = &p.heads[i][h];
            let mut q = vec![0.0; c.attn_dim];
            for r in 0..c.attn_dim {
                q[r] = hp.b_q[r];
                for d in 0..c.input_dim {
                    q[r] += hp.w_q[[r, d]] * y[i][d];
                }
            }
            let mut logits = Vec::new();
            for xj in x {
                let mut a = 0.0;
                for r in 0..c.attn_dim {
                    let mut k = hp.b_k[r];
                    for d in 0..c.input_dim {
                        k += hp.w_k[[r, d]] * xj[d];
                    }
                    a += k * q[r];
                }
                logits.push(a / (c.attn_dim as f64).sqrt());
            }
            let alpha = softmax(&logits);
            let mut ctx = vec![0.0; c.input_dim];
            for (j, xj) in x.iter().enumerate() {
                for d in 0..c.input_dim {
                    ctx[d] += alpha[j] * xj[d];
                }
            }
            concat.extend_from_slice(&ctx);
            contexts.push(ctx);
            alphas.push(alpha);
        }
        let mut hidden = vec![0.0; c.hidden_dim];
        for u in 0..c.hidden_dim {
            let mut v = p.b_h[u];
            for (k, cv) in concat.iter().enumerate() {
                v += p.w_h[[u, k]] * cv;
            }
            hidden[u] = v.max(0.0);
        }
        let mut z = [p.b_o[i][0], p.b_o[i][1]];
        for (k, zk) in z.iter_mut().enumerate() {
            for u in 0..c.hidden_dim {
                *zk += p.w_o[i][[k, u]] * hidden[u];
            }
        }
        let s = softmax(&z);
        out.push(OracleStatute {
            alphas,
            contexts,
            probs: [s[0], s[1]],
        });
    }
    out
}

/// Class-weighted cross-entropy summed over statutes, log floored at 1e-12.
pub fn oracle_loss(out: &[OracleStatute], gold: &BTreeSet<usize>, c: &ModelConfig) -> f64 {
    out.iter()
        .enumerate()
        .map(|(i, s)| {
            if gold.contains(&i) {
                -c.positive_weight * s.probs[1].max(1e-12).ln()
            } else {
                -c.negative_weight * s.probs[0].max(1e-12).ln()
            }
        })
        .sum()
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        num_statutes: 3,
        heads: 2,
        input_dim: 4,
        attn_dim: 2,
        hidden_dim: 3,
        dropout: 0.1,
        ..ModelConfig::new(3)
    }
}

/// Every parameter entry uniform in (-1, 1), biases included.
pub fn random_params(c: &ModelConfig, rng: &mut ChaCha8Rng) -> AoSParameters {
    let mut p = AoSParameters::zeros(c);
    for t in p.tensors_mut() {
        for v in t {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    p
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

pub fn random_gold(n: usize, rng: &mut ChaCha8Rng) -> BTreeSet<usize> {
    (0..n).filter(|_| rng.random_bool(0.4)).collect()
}

pub fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

pub struct Instance {
    pub params: AoSParameters,
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub gold: BTreeSet<usize>,
}

pub fn random_instance(c: &ModelConfig, seed: u64, max_sentences: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sent = rng.random_range(1..=max_sentences);
    Instance {
        params: random_params(c, &mut rng),
        x: random_matrix(n_sent, c.input_dim, &mut rng),
        y: random_matrix(c.num_statutes, c.input_dim, &mut rng),
        gold: random_gold(c.num_statutes, &mut rng),
    }
}

/// Relative error with a floor on the denominator so entries that are zero
/// in exact arithmetic are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

pub mod synth {
    use std::time::{Duration, Instant};

    use statute_core::corpus::{Dataset, Split};
    use statute_core::embeddings::{embed_dataset, examples, EmbeddedCorpus, EmbeddingCache, HashingEmbedder};
    use statute_core::model::{train, AoSParameters, Example, ModelConfig, TrainOutcome};
    use statute_core::synthetic::{self, generate, SyntheticSpec};

    /// The synthetic corpus, masked, embedded and trained with the default recipe.
    pub struct Run {
        pub dataset: Dataset,
        pub corpus: EmbeddedCorpus,
        pub config: ModelConfig,
        pub outcome: TrainOutcome,
        pub test: Vec<Example>,
        pub train_time: Duration,
    }

    pub fn embedded() -> (Dataset, EmbeddedCorpus) {
        let dataset = generate(&SyntheticSpec::default()).masked();
        let embedder = HashingEmbedder::new(synthetic::EMBED_DIM, synthetic::EMBED_SEED);
        let corpus = embed_dataset(&embedder, &EmbeddingCache::in_memory(), &dataset).unwrap();
        (dataset, corpus)
    }

    pub fn run(seed: u64) -> Run {
        let (dataset, corpus) = embedded();
        let config = synthetic::model_config(dataset.registry.len());
        let start = Instant::now();
        let tr = examples(dataset.split(Split::Train), &corpus).unwrap();
        let dv = examples(dataset.split(Split::Dev), &corpus).unwrap();
        let y = corpus.statutes.to_f64();
        let outcome = train(
            AoSParameters::init(&config, seed),
            &config,
            &tr,
            &dv,
            y.view(),
            &synthetic::trainer_options(seed),
        )
        .unwrap();
        let train_time = start.elapsed();
        let test = examples(dataset.split(Split::Test), &corpus).unwrap();
        Run {
            dataset,
            corpus,
            config,
            outcome,
            test,
            train_time,
        }
    }
}

pub mod http {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread::JoinHandle;

    /// Serves the given `(status, body)` replies to successive requests on a
    /// local port, one connection per request. Returns the base URL and a
    /// handle yielding the request bodies received.
    pub fn serve(replies: Vec<(u16, String)>) -> (String, JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = l.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            length = v.trim().parse().unwrap();
                        }
                    }
                }
                let mut buf = vec![0; length];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
                stream.flush().unwrap();
            }
            bodies
        });
        (url, handle)
    }
}
