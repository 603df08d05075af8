use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;

use anyhow::{Context, Result};
use ndarray::Array2;
use serde_json::json;
use statute_core::corpus::{load_statutes, CaseDescription, Dataset, Split, StatuteRegistry};
use statute_core::embeddings::{
    embed_dataset, examples, random_statute_embeddings, EmbeddingCache, EmbeddingProvider,
    HashingEmbedder, HttpEmbeddingProvider, PrecomputedProvider,
};
use statute_core::explain::{counterfactual_report, explain_predicted, CaseInput, ExplanationRecord};
use statute_core::llm::{
    run_pipeline, ChatClient, HttpChatClient, PipelineCase, PipelineOptions, RecordingClient, ReplayClient,
};
use statute_core::metrics::{confusable_pairs, label_frequencies, LabelConfusion, Report};
use statute_core::model::{
    train, AoSParameters, Checkpoint, CheckpointHeader, OptimizerInfo, Predictor,
};
use statute_core::synthetic::{self, SyntheticSpec};

use crate::config::{synthetic_recipe, EmbedderKind, RunConfig};
use crate::error::user_bail;
use crate::io::{self, JsonLines, LabelRecord, RunContext};
use crate::{Cli, Command, EmbedArgs, EvalArgs, IngestArgs, InputArgs, LlmArgs, ReportArgs};

pub fn run(cli: Cli) -> Result<String> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        config.seed = cli.seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| config.paths.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    config.paths.out = Some(out.clone());
    let ctx = RunContext {
        command: command_name(&cli.command),
        seed: config.seed(),
        config,
        out,
    };
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    match &cli.command {
        Command::Synth => synth(&ctx),
        Command::Ingest(a) => ingest(&ctx, a),
        Command::Embed(a) => embed(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Predict(a) => predict(&ctx, a),
        Command::Explain(a) => explain(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Nfsf(a) => nfsf(&ctx, a),
        Command::Llm(a) => llm(&ctx, a),
        Command::Report(a) => report(&ctx, a),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth => "synth",
        Command::Ingest(_) => "ingest",
        Command::Embed(_) => "embed",
        Command::Train(_) => "train",
        Command::Predict(_) => "predict",
        Command::Explain(_) => "explain",
        Command::Eval(_) => "eval",
        Command::Nfsf(_) => "nfsf",
        Command::Llm(_) => "llm",
        Command::Report(_) => "report",
    }
}

fn sizes(d: &Dataset) -> String {
    d.split_sizes()
        .iter()
        .map(|(s, n)| format!("{s} {n}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn synth(ctx: &RunContext) -> Result<String> {
    let dataset = synthetic::generate(&SyntheticSpec {
        seed: ctx.seed,
        ..SyntheticSpec::default()
    });
    let dir = ctx.out_path("synthetic");
    dataset.save(&dir, Some(&ctx.provenance()))?;
    let recipe = ctx.out_path("synthetic.toml");
    std::fs::write(&recipe, toml::to_string(&synthetic_recipe(ctx.seed))?)?;
    Ok(format!(
        "synth: {} statutes, {} -> {} (recipe {})",
        dataset.registry.len(),
        sizes(&dataset),
        dir.display(),
        recipe.display()
    ))
}

fn ingest(ctx: &RunContext, a: &IngestArgs) -> Result<String> {
    let paths = &ctx.config.paths;
    let Some(statutes) = a.statutes.clone().or_else(|| paths.statutes.clone()) else {
        user_bail!("ingest needs --statutes");
    };
    let Some(manifest) = a.manifest.clone().or_else(|| paths.manifest.clone()) else {
        user_bail!("ingest needs --manifest");
    };
    io::require(&statutes, "statute file")?;
    io::require(&manifest, "manifest")?;
    let raw = Dataset::load(&statutes, &statute_core::corpus::Manifest::load(&manifest)?)?;
    let max = ctx.config.model.resolve(raw.registry.len(), 1).max_sentences;
    let dataset = raw.masked().truncated(max);
    let dir = ctx.out_path("data");
    dataset.save(&dir, Some(&ctx.provenance()))?;
    Ok(format!(
        "ingest: {} statutes, {} (masked, at most {max} sentences) -> {}",
        dataset.registry.len(),
        sizes(&dataset),
        dir.display()
    ))
}

fn provider(ctx: &RunContext) -> Result<Box<dyn EmbeddingProvider>> {
    let e = &ctx.config.embedder;
    Ok(match e.kind {
        EmbedderKind::Hashing => Box::new(HashingEmbedder::new(e.dim, e.hash_seed)),
        EmbedderKind::Http => {
            let (Some(endpoint), Some(model)) = (&e.endpoint, &e.model) else {
                user_bail!("the http embedder needs embedder.endpoint and embedder.model");
            };
            Box::new(HttpEmbeddingProvider::new(endpoint, model, e.dim, e.in_flight.max(1)))
        }
        EmbedderKind::Precomputed => {
            let Some(matrix) = &e.matrix else {
                user_bail!("the precomputed embedder needs embedder.matrix");
            };
            io::require(matrix, "embedding matrix")?;
            Box::new(PrecomputedProvider::open(matrix)?)
        }
    })
}

fn embed(ctx: &RunContext, a: &EmbedArgs) -> Result<String> {
    let dataset = io::load_dataset(&ctx.data_dir(&a.data))?;
    let provider = provider(ctx)?;
    let cache_dir = ctx.config.embedder.cache.clone().unwrap_or_else(|| ctx.out_path("cache"));
    let cache = EmbeddingCache::open(&cache_dir)?;
    let mut corpus = embed_dataset(provider.as_ref(), &cache, &dataset)?;
    if a.random_statutes {
        corpus.statutes = random_statute_embeddings(dataset.registry.len(), corpus.dim, ctx.seed);
    }
    let texts: HashMap<&str, &[String]> = dataset
        .cases()
        .map(|c| (c.case_id.as_str(), c.sentences.as_slice()))
        .collect();
    let dir = ctx.out_path("embeddings");
    corpus.save(&dir, &dataset.registry.contents(), &texts, Some(&ctx.provenance()))?;
    Ok(format!(
        "embed: {} statutes and {} cases with {} ({}-dim{}) -> {}",
        dataset.registry.len(),
        corpus.num_cases(),
        corpus.provider,
        corpus.dim,
        if a.random_statutes { ", random statute vectors" } else { "" },
        dir.display()
    ))
}

fn train_cmd(ctx: &RunContext, a: &InputArgs) -> Result<String> {
    let dataset = io::load_dataset(&ctx.data_dir(&a.data))?;
    let corpus = io::load_embeddings(&ctx.embeddings_dir(&a.embeddings))?;
    let config = ctx.config.model.resolve(dataset.registry.len(), corpus.dim);
    if let Err(e) = config.validate() {
        user_bail!("invalid model config: {e}");
    }
    let opts = ctx.config.trainer.resolve(ctx.seed);
    if opts.batch_size == 0 || !(opts.learning_rate > 0.0) {
        user_bail!("trainer needs batch_size >= 1 and learning_rate > 0");
    }
    let tr = examples(dataset.split(Split::Train), &corpus)?;
    let dv = examples(dataset.split(Split::Dev), &corpus)?;
    let y = corpus.statutes.to_f64();
    let outcome = train(AoSParameters::init(&config, ctx.seed), &config, &tr, &dv, y.view(), &opts)?;
    let best = outcome
        .history
        .iter()
        .find(|r| r.epoch == outcome.best_epoch)
        .map(|r| r.dev_macro_f1)
        .unwrap_or(0.0);
    let header = CheckpointHeader {
        config,
        optimizer: Some(OptimizerInfo::from(&opts)),
        seed: ctx.seed,
        epoch: outcome.best_epoch,
        dev_metrics: outcome.history.clone(),
        statutes: dataset.registry.iter().map(|s| s.name.clone()).collect(),
        dtype: String::new(),
        tensors: Vec::new(),
        provenance: Some(ctx.provenance()),
    };
    let path = ctx.out_path("checkpoint.ckpt");
    Checkpoint::new(header, outcome.params).save(&path)?;
    Ok(format!(
        "train: {} epochs, best epoch {} with dev macro-F1 {best:.4} -> {}",
        outcome.history.len(),
        outcome.best_epoch,
        path.display()
    ))
}

/// Dataset, embeddings, checkpoint and the selected cases with their
/// sentence matrices.
struct Loaded {
    dataset: Dataset,
    checkpoint: Checkpoint,
    statutes: Array2<f64>,
    cases: Vec<CaseDescription>,
    matrices: Vec<Array2<f64>>,
}

impl Loaded {
    fn new(ctx: &RunContext, a: &InputArgs) -> Result<Self> {
        let dataset = io::load_dataset(&ctx.data_dir(&a.data))?;
        let corpus = io::load_embeddings(&ctx.embeddings_dir(&a.embeddings))?;
        let checkpoint = io::load_checkpoint(&ctx.checkpoint_path(&a.checkpoint), &dataset, &corpus)?;
        let cases = io::select_cases(&dataset, a.split, &a.cases, checkpoint.header.config.max_sentences)?;
        let matrices = cases
            .iter()
            .map(|c| {
                let m = corpus.case(&c.case_id)?;
                if m.rows() != c.sentences.len() {
                    user_bail!(
                        "case {} has {} sentences but {} embedded rows",
                        c.case_id,
                        c.sentences.len(),
                        m.rows()
                    );
                }
                Ok(m.to_f64())
            })
            .collect::<Result<_>>()?;
        let statutes = corpus.statutes.to_f64();
        Ok(Self {
            dataset,
            checkpoint,
            statutes,
            cases,
            matrices,
        })
    }

    fn predictor(&self) -> Result<Predictor<'_>> {
        Ok(Predictor::new(
            &self.checkpoint.params,
            &self.checkpoint.header.config,
            self.statutes.view(),
        )?)
    }

    fn names(&self, ids: &BTreeSet<usize>) -> Vec<String> {
        ids.iter().map(|&i| self.dataset.registry.name(i).to_string()).collect()
    }

    fn gold(&self) -> Vec<(String, BTreeSet<usize>)> {
        self.cases.iter().map(|c| (c.case_id.clone(), c.gold_labels.clone())).collect()
    }
}

fn predict(ctx: &RunContext, a: &InputArgs) -> Result<String> {
    let l = Loaded::new(ctx, a)?;
    let pred = l.predictor()?;
    let mut w = JsonLines::create(&ctx.out_path("predictions.jsonl"), &ctx.provenance())?;
    let mut confusion = LabelConfusion::new(l.dataset.registry.len());
    for (c, x) in l.cases.iter().zip(&l.matrices) {
        let p = pred.predict(x.view())?;
        confusion.add(&p.predicted, &c.gold_labels);
        let probabilities = l
            .dataset
            .registry
            .iter()
            .map(|s| (s.name.clone(), json!(p.probs[s.id])))
            .collect();
        w.write(&LabelRecord {
            case_id: c.case_id.clone(),
            labels: l.names(&p.predicted),
            probabilities: Some(probabilities),
        })?;
    }
    let path = w.finish()?;
    Ok(format!(
        "predict: {} cases, micro-F1 {:.4} against gold -> {}",
        l.cases.len(),
        confusion.micro().f1,
        path.display()
    ))
}

fn explain(ctx: &RunContext, a: &InputArgs) -> Result<String> {
    let l = Loaded::new(ctx, a)?;
    let pred = l.predictor()?;
    let mut w = JsonLines::create(&ctx.out_path("explanations.jsonl"), &ctx.provenance())?;
    let mut n = 0;
    for (c, x) in l.cases.iter().zip(&l.matrices) {
        for e in explain_predicted(&pred, &c.case_id, x.view())? {
            w.write(&ExplanationRecord::new(&e, &c.sentences, &l.dataset.registry))?;
            n += 1;
        }
    }
    let path = w.finish()?;
    Ok(format!(
        "explain: {n} explanations for {} cases -> {}",
        l.cases.len(),
        path.display()
    ))
}

fn nfsf(ctx: &RunContext, a: &InputArgs) -> Result<String> {
    let l = Loaded::new(ctx, a)?;
    let pred = l.predictor()?;
    let inputs: Vec<CaseInput> = l
        .cases
        .iter()
        .zip(&l.matrices)
        .map(|(c, x)| CaseInput {
            case_id: &c.case_id,
            sentences: x.view(),
        })
        .collect();
    let r = counterfactual_report(&pred, &inputs, &l.dataset.registry)?;
    let path = ctx.out_path("nfsf.json");
    io::write_json(&path, &r, &ctx.provenance())?;
    Ok(format!(
        "nfsf: {} predicted pairs, NF {:.4} ({}), SF {:.4} ({}) -> {}",
        r.total,
        r.nf,
        r.nf_numerator,
        r.sf,
        r.sf_numerator,
        path.display()
    ))
}

fn eval(ctx: &RunContext, a: &EvalArgs) -> Result<String> {
    let pred_path = a.pred.clone().unwrap_or_else(|| ctx.out_path("predictions.jsonl"));
    let predictions = io::read_labels(&pred_path)?;
    let golds = io::read_labels(&a.gold)?;
    let registry = match &a.statutes {
        Some(path) => {
            io::require(path, "statute file")?;
            load_statutes(path)?
        }
        None => {
            let names: BTreeSet<&str> = predictions
                .iter()
                .chain(&golds)
                .flat_map(|r| r.labels.iter().map(String::as_str))
                .collect();
            StatuteRegistry::from_pairs(names.into_iter().map(|n| (n, n))).map_err(crate::error::UserError)?
        }
    };
    let report = score(&registry, &predictions, &golds, None, None)?;
    let path = ctx.out_path("metrics.json");
    io::write_json(&path, &report, &ctx.provenance())?;
    report.write_csv(std::fs::File::create(ctx.out_path("metrics.csv"))?)?;
    Ok(format!(
        "eval: {} cases, micro-F1 {:.4}, macro-F1 {:.4}, Jaccard {:.4} -> {}",
        report.cases,
        report.micro.f1,
        report.macro_.f1,
        report.avg_jaccard,
        path.display()
    ))
}

fn ids(registry: &StatuteRegistry, r: &LabelRecord) -> Result<BTreeSet<usize>> {
    r.label_set()
        .into_iter()
        .map(|n| match registry.id_of(n) {
            Some(id) => Ok(id),
            None => user_bail!("case {}: unknown statute {n:?}", r.case_id),
        })
        .collect()
}

/// Metrics over the predicted cases, each matched to its gold record by id.
fn score(
    registry: &StatuteRegistry,
    predictions: &[LabelRecord],
    golds: &[LabelRecord],
    train_counts: Option<&[usize]>,
    statute_embeddings: Option<&statute_core::embeddings::EmbeddingMatrix>,
) -> Result<Report> {
    let by_id: BTreeMap<&str, &LabelRecord> = golds.iter().map(|g| (g.case_id.as_str(), g)).collect();
    let mut p = Vec::new();
    let mut g = Vec::new();
    for r in predictions {
        let Some(gold) = by_id.get(r.case_id.as_str()) else {
            user_bail!("no gold labels for case {}", r.case_id);
        };
        p.push((r.case_id.clone(), ids(registry, r)?));
        g.push((r.case_id.clone(), ids(registry, gold)?));
    }
    if p.is_empty() {
        user_bail!("no predictions to score");
    }
    let zeros = vec![0; registry.len()];
    Ok(Report::build(
        registry,
        &p,
        &g,
        train_counts.unwrap_or(&zeros),
        statute_embeddings,
    )?)
}

fn llm(ctx: &RunContext, a: &LlmArgs) -> Result<String> {
    let l = Loaded::new(ctx, &a.input)?;
    let n = l.dataset.registry.len();
    if a.k == 0 || a.k > n {
        user_bail!("--k must be between 1 and {n}");
    }
    let live = || -> Result<HttpChatClient> {
        let mut cfg = ctx.config.llm.clone();
        if let Some(e) = &a.endpoint {
            cfg.endpoint = e.clone();
        }
        if let Some(m) = &a.model {
            cfg.model = m.clone();
        }
        if cfg.endpoint.is_empty() {
            user_bail!("llm needs --replay, --endpoint or llm.endpoint in the config");
        }
        cfg.validate().map_err(|e| crate::error::UserError(e.to_string()))?;
        Ok(HttpChatClient::new(cfg)?)
    };
    let pred = l.predictor()?;
    let cases: Vec<PipelineCase> = l
        .cases
        .iter()
        .zip(&l.matrices)
        .map(|(c, x)| PipelineCase {
            case_id: &c.case_id,
            sentences: &c.sentences,
            embeddings: x.view(),
        })
        .collect();
    let opts = PipelineOptions::new(a.k, a.mode);
    let run = |client: &dyn ChatClient| run_pipeline(&cases, &pred, &l.dataset.registry, client, &opts);
    let output = match (&a.replay, &a.record) {
        (Some(path), _) => {
            io::require(path, "replay fixture")?;
            run(&ReplayClient::load(path)?)?
        }
        (None, Some(path)) => {
            let recorder = RecordingClient::new(live()?);
            let output = run(&recorder)?;
            recorder.into_fixture().save(path)?;
            output
        }
        (None, None) => run(&live()?)?,
    };

    let prov = ctx.provenance();
    let prefix = format!("llm_{}", a.mode);
    let mut w = JsonLines::create(&ctx.out_path(&format!("{prefix}_verdicts.jsonl")), &prov)?;
    for v in &output.verdicts {
        w.write(v)?;
    }
    w.finish()?;
    let mut w = JsonLines::create(&ctx.out_path(&format!("{prefix}_errors.jsonl")), &prov)?;
    for e in &output.errors {
        w.write(e)?;
    }
    w.finish()?;
    let mut w = JsonLines::create(&ctx.out_path(&format!("{prefix}_predictions.jsonl")), &prov)?;
    let mut predictions = Vec::new();
    for o in &output.cases {
        let record = LabelRecord {
            case_id: o.case_id.clone(),
            labels: l.names(&o.predicted),
            probabilities: None,
        };
        w.write(&json!({
            "case_id": o.case_id,
            "labels": record.labels,
            "candidates": o.candidates.iter().map(|&i| l.dataset.registry.name(i)).collect::<Vec<_>>(),
            "errored": l.names(&o.errored),
        }))?;
        predictions.push(record);
    }
    w.finish()?;

    let golds: Vec<LabelRecord> = l
        .gold()
        .into_iter()
        .map(|(case_id, g)| LabelRecord {
            labels: l.names(&g),
            case_id,
            probabilities: None,
        })
        .collect();
    let report = score(&l.dataset.registry, &predictions, &golds, None, None)?;
    let path = ctx.out_path(&format!("{prefix}_metrics.json"));
    io::write_json(
        &path,
        &json!({
            "k": a.k,
            "mode": a.mode,
            "errored_pairs": output.errors.len(),
            "metrics": report,
        }),
        &prov,
    )?;
    Ok(format!(
        "llm: {} cases, {} prompts, {} errored, micro-F1 {:.4}, macro-F1 {:.4} -> {}",
        output.cases.len(),
        output.verdicts.len() + output.errors.len(),
        output.errors.len(),
        report.micro.f1,
        report.macro_.f1,
        path.display()
    ))
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn report(ctx: &RunContext, a: &ReportArgs) -> Result<String> {
    let dataset = io::load_dataset(&ctx.data_dir(&a.input.data))?;
    let corpus = io::load_embeddings(&ctx.embeddings_dir(&a.input.embeddings))?;
    let pred_path = a.pred.clone().unwrap_or_else(|| ctx.out_path("predictions.jsonl"));
    let predictions = io::read_labels(&pred_path)?;
    let max = ctx.config.model.resolve(dataset.registry.len(), corpus.dim).max_sentences;
    let cases = io::select_cases(&dataset, a.input.split, &a.input.cases, max)?;
    let golds: Vec<LabelRecord> = cases
        .iter()
        .map(|c| LabelRecord {
            case_id: c.case_id.clone(),
            labels: c.gold_labels.iter().map(|&i| dataset.registry.name(i).to_string()).collect(),
            probabilities: None,
        })
        .collect();
    let train_counts = label_frequencies(
        dataset.registry.len(),
        dataset.split(Split::Train).iter().map(|c| &c.gold_labels),
    );
    let r = score(&dataset.registry, &predictions, &golds, Some(&train_counts), Some(&corpus.statutes))?;
    let pairs: Vec<[&str; 2]> = confusable_pairs(&corpus.statutes)
        .into_iter()
        .map(|(i, j)| [dataset.registry.name(i), dataset.registry.name(j)])
        .collect();
    let f1: Vec<f64> = r.per_statute.iter().map(|s| s.f1).collect();
    let freq: Vec<f64> = r.per_statute.iter().map(|s| s.train_frequency as f64).collect();
    let correlation = pearson(&f1, &freq);
    r.write_csv(std::fs::File::create(ctx.out_path("report.csv"))?)?;
    let path = ctx.out_path("report.json");
    io::write_json(
        &path,
        &json!({
            "per_statute": r.per_statute,
            "confusable_pairs": pairs,
            "f1_train_frequency_correlation": correlation,
        }),
        &ctx.provenance(),
    )?;
    Ok(format!(
        "report: {} statutes, {} confusable pairs, F1/frequency correlation {} -> {}",
        r.per_statute.len(),
        pairs.len(),
        correlation.map_or("undefined".to_string(), |c| format!("{c:.3}")),
        path.display()
    ))
}
