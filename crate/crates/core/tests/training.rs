mod common;

use common::synth;
use statute_core::corpus::Split;
use statute_core::embeddings::{examples, random_statute_embeddings};
use statute_core::metrics::LabelConfusion;
use statute_core::model::{
    train, AoSParameters, Checkpoint, CheckpointHeader, Example, ModelConfig, ModelError, OptimizerInfo, Predictor,
    TrainerOptions,
};
use statute_core::synthetic;

fn macro_f1(params: &AoSParameters, config: &ModelConfig, y: ndarray::ArrayView2<'_, f64>, set: &[Example]) -> f64 {
    let pred = Predictor::new(params, config, y).unwrap();
    let mut c = LabelConfusion::new(config.num_statutes);
    for ex in set {
        c.add(&pred.predict(ex.sentences.view()).unwrap().predicted, &ex.gold);
    }
    c.macro_avg().f1
}

fn small_run(seed: u64, epochs: usize) -> (AoSParameters, Vec<statute_core::model::EpochRecord>) {
    let (dataset, corpus) = synth::embedded();
    let config = synthetic::model_config(dataset.registry.len());
    let tr = examples(&dataset.split(Split::Train)[..64], &corpus).unwrap();
    let dv = examples(&dataset.split(Split::Dev)[..16], &corpus).unwrap();
    let y = corpus.statutes.to_f64();
    let opts = TrainerOptions {
        epochs,
        patience: None,
        batch_size: 16,
        ..synthetic::trainer_options(seed)
    };
    let out = train(AoSParameters::init(&config, seed), &config, &tr, &dv, y.view(), &opts).unwrap();
    (out.params, out.history)
}

#[test]
fn same_seed_gives_identical_parameters() {
    let (a, ha) = small_run(5, 3);
    let (b, hb) = small_run(5, 3);
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    let (c, _) = small_run(6, 3);
    assert_ne!(a, c);
}

#[test]
fn trained_checkpoint_reloads_with_the_same_predictions() {
    let (params, history) = small_run(9, 2);
    let (dataset, corpus) = synth::embedded();
    let config = synthetic::model_config(dataset.registry.len());
    let header = CheckpointHeader {
        config: config.clone(),
        optimizer: Some(OptimizerInfo::from(&TrainerOptions::default())),
        seed: 9,
        epoch: 2,
        dev_metrics: history,
        statutes: dataset.registry.iter().map(|s| s.name.clone()).collect(),
        dtype: String::new(),
        tensors: Vec::new(),
        provenance: None,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::new(header, params.clone()).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.header.config, config);
    let y = corpus.statutes.to_f64();
    let original = Predictor::new(&params, &config, y.view()).unwrap();
    let reloaded = Predictor::new(&back.params, &config, y.view()).unwrap();
    for ex in examples(dataset.split(Split::Test), &corpus).unwrap() {
        let a = original.predict(ex.sentences.view()).unwrap();
        let b = reloaded.predict(ex.sentences.view()).unwrap();
        for (pa, pb) in a.probs.iter().zip(&b.probs) {
            assert!((pa - pb).abs() < 1e-4, "{pa} vs {pb}");
        }
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let (dataset, corpus) = synth::embedded();
    let config = synthetic::model_config(dataset.registry.len());
    let tr = examples(&dataset.split(Split::Train)[..4], &corpus).unwrap();
    let y = corpus.statutes.to_f64();
    let zero_batch = TrainerOptions {
        batch_size: 0,
        ..TrainerOptions::default()
    };
    assert!(matches!(
        train(AoSParameters::init(&config, 1), &config, &tr, &tr, y.view(), &zero_batch),
        Err(ModelError::Config(_))
    ));
    let wrong = ModelConfig {
        hidden_dim: 7,
        ..config.clone()
    };
    assert!(train(AoSParameters::init(&config, 1), &wrong, &tr, &tr, y.view(), &TrainerOptions::default()).is_err());
}

/// Replacing statute-content embeddings with random vectors should cost
/// quality on the synthetic corpus. Compared on mean test macro-F1 over
/// three seeds, each seed drawing its own random statute matrix.
#[test]
fn random_statute_embeddings_ablation() {
    let (dataset, corpus) = synth::embedded();
    let config = synthetic::model_config(dataset.registry.len());
    let tr = examples(dataset.split(Split::Train), &corpus).unwrap();
    let dv = examples(dataset.split(Split::Dev), &corpus).unwrap();
    let te = examples(dataset.split(Split::Test), &corpus).unwrap();
    let content = corpus.statutes.to_f64();
    let seeds = [1u64, 2, 3];
    let (mut with_content, mut with_random) = (0.0, 0.0);
    for seed in seeds {
        let random = random_statute_embeddings(config.num_statutes, config.input_dim, seed).to_f64();
        let run = |y: &ndarray::Array2<f64>| {
            let out = train(
                AoSParameters::init(&config, seed),
                &config,
                &tr,
                &dv,
                y.view(),
                &synthetic::trainer_options(seed),
            )
            .unwrap();
            macro_f1(&out.params, &config, y.view(), &te) / seeds.len() as f64
        };
        with_content += run(&content);
        with_random += run(&random);
    }
    println!("mean test macro-F1: content {with_content:.4}, random {with_random:.4}");
    assert!(
        with_random < with_content,
        "no drop with random statute embeddings: content {with_content:.4} vs random {with_random:.4}"
    );
}
