use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{AnalyzeArgs, BenchArgs, CliError, Command, Context, DataArgs, EvalArgs, PatternArgs, RerankArgs, TrainArgs};
use super::config::RunConfig;
use crate::analysis::{role_entropy, role_max_attention, top_attended_sentences, write_top_sentences_csv, Source, TopSentenceRow};
use crate::attention::KernelOptions;
use crate::bench::{run_bench, synthetic_layout, write_bench_csv, BenchMetadata};
use crate::model::{load_model, save_model, LossKind, Model};
use crate::pattern::{build_pattern, sparsity, PatternConfig, Preset};
use crate::pipeline::{
    evaluate, fit, format_run, generate, load_queries, read_qrels, read_run, rerank, Corpus, EvalOptions, FitOptions,
    Gain, Qrels, RankingData, Run, Vocabulary,
};
use crate::tensor::{Precision, Real};

pub(super) fn dispatch(command: &Command, ctx: &mut Context) -> Result<(), CliError> {
    match (command, ctx.precision) {
        (Command::Pattern(a), _) => pattern(a, ctx),
        (Command::Eval(a), _) => eval(a, ctx),
        (Command::Train(a), Precision::F32) => train::<f32>(a, ctx),
        (Command::Train(a), Precision::F64) => train::<f64>(a, ctx),
        (Command::Rerank(a), Precision::F32) => rerank_cmd::<f32>(a, ctx),
        (Command::Rerank(a), Precision::F64) => rerank_cmd::<f64>(a, ctx),
        (Command::Bench(a), Precision::F32) => bench::<f32>(a, ctx),
        (Command::Bench(a), Precision::F64) => bench::<f64>(a, ctx),
        (Command::Analyze(a), Precision::F32) => analyze::<f32>(a, ctx),
        (Command::Analyze(a), Precision::F64) => analyze::<f64>(a, ctx),
    }
}

fn parse_preset(s: &str) -> Result<Preset, CliError> {
    s.parse().map_err(|e: crate::QdstError| CliError::Config(e.to_string()))
}

fn config_err(e: crate::QdstError) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Serialize)]
struct PatternSummary {
    n: usize,
    preset: Preset,
    window: usize,
    half_window: Option<usize>,
    global_rows: Vec<usize>,
    global_cols: Vec<usize>,
    full: bool,
    nonzeros: usize,
    total: usize,
    fraction: f64,
    roles: Vec<&'static str>,
}

fn pattern(args: &PatternArgs, ctx: &mut Context) -> Result<(), CliError> {
    let base = ctx.config.model.pattern;
    let cfg = PatternConfig {
        preset: args.preset.as_deref().map(parse_preset).transpose()?.unwrap_or(base.preset),
        window: args.window.unwrap_or(base.window),
        symmetric_globals: base.symmetric_globals,
    };
    cfg.validate().map_err(config_err)?;
    if args.n < 3 {
        return Err(CliError::Config(format!("n must be >= 3 ([CLS] q [SEP]), got {}", args.n)));
    }
    if args.sentence_len == 0 {
        return Err(CliError::Config("sentence_len must be >= 1".into()));
    }
    let query_len = args.query_len.clamp(1, args.n - 2);
    let layout = synthetic_layout(args.n, query_len, args.sentence_len, 1000, ctx.config.seed()).map_err(config_err)?;
    let pattern = build_pattern(&layout, &cfg).map_err(config_err)?;
    ctx.config.model.pattern = cfg;
    let stats = sparsity(&pattern);
    let summary = PatternSummary {
        n: args.n,
        preset: cfg.preset,
        window: cfg.window,
        half_window: pattern.half_window(),
        global_rows: pattern.global_rows().to_vec(),
        global_cols: pattern.global_cols().to_vec(),
        full: pattern.is_full(),
        nonzeros: stats.nonzeros,
        total: stats.total,
        fraction: stats.fraction,
        roles: layout.roles().iter().map(|r| r.as_str()).collect(),
    };

    ctx.ensure_out()?;
    if args.n <= 512 {
        let mut csv = String::with_capacity(args.n * args.n * 2);
        for row in pattern.to_dense() {
            let line: Vec<&str> = row.iter().map(|&v| if v == 1 { "1" } else { "0" }).collect();
            csv.push_str(&line.join(","));
            csv.push('\n');
        }
        super::write_file(&ctx.path("pattern.csv"), csv)?;
    }
    super::write_file(
        &ctx.path("pattern_summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serialises"),
    )?;
    ctx.write_manifest("pattern")?;
    println!(
        "{} n={} window={} nonzeros={} fraction={:.6}",
        cfg.preset.name(),
        args.n,
        cfg.window,
        stats.nonzeros,
        stats.fraction
    );
    Ok(())
}

fn apply_data_args(config: &mut RunConfig, data: &DataArgs) {
    let d = &mut config.data;
    for (slot, arg) in [
        (&mut d.dir, &data.data),
        (&mut d.corpus, &data.corpus),
        (&mut d.queries, &data.queries),
        (&mut d.candidates, &data.candidates),
        (&mut d.qrels, &data.qrels),
    ] {
        if arg.is_some() {
            *slot = arg.clone();
        }
    }
}

/// Loads the dataset named by the config, or generates the synthetic task.
/// A given vocabulary is used frozen; otherwise one is built from the data.
fn load_data(config: &RunConfig, vocab: Option<Vocabulary>, need_qrels: bool) -> Result<RankingData, CliError> {
    if config.data.is_synthetic() {
        return generate(&config.synthetic).map_err(config_err);
    }
    let build = vocab.is_none();
    let mut vocab = vocab.unwrap_or_default();
    let required = |p: Option<PathBuf>, what: &str| p.ok_or_else(|| CliError::Config(format!("no {what} file given")));
    let corpus = Corpus::load(&required(config.data.corpus_path(), "corpus")?, &mut vocab, build).map_err(CliError::data)?;
    let queries = load_queries(&required(config.data.queries_path(), "queries")?, &mut vocab, build).map_err(CliError::data)?;
    let candidates = read_run(&required(config.data.candidates_path(), "candidates")?).map_err(CliError::data)?;
    let qrels = match config.data.qrels_path() {
        Some(p) if p.exists() || need_qrels => read_qrels(&p).map_err(CliError::data)?,
        _ if need_qrels => return Err(CliError::Config("no qrels file given".into())),
        _ => Qrels::new(),
    };
    Ok(RankingData {
        queries,
        corpus,
        qrels,
        candidates,
        vocab,
    })
}

fn kernel(ctx: &Context) -> KernelOptions {
    KernelOptions {
        threads: ctx.threads,
        ..KernelOptions::default()
    }
}

#[derive(Serialize)]
struct TrainSummary {
    steps: u64,
    steps_to_target: Option<u64>,
    metric: String,
    final_value: f64,
    final_loss: f64,
}

fn train<T: Real>(args: &TrainArgs, ctx: &mut Context) -> Result<(), CliError> {
    let kernel_opts = kernel(ctx);
    let cfg = &mut ctx.config;
    apply_data_args(cfg, &args.data);
    if let Some(p) = &args.preset {
        cfg.model.pattern.preset = parse_preset(p)?;
    }
    if let Some(w) = args.window {
        cfg.model.pattern.window = w;
    }
    if let Some(s) = args.steps {
        cfg.train.max_steps = s;
    }
    if let Some(lr) = args.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(l) = &args.loss {
        cfg.train.loss_kind = match l.as_str() {
            "pointwise" => LossKind::PointwiseBce,
            "pairwise" => LossKind::PairwiseSoftmax,
            other => return Err(CliError::Config(format!("unknown loss '{other}' (pointwise or pairwise)"))),
        };
    }
    if let Some(e) = args.eval_every {
        cfg.eval.eval_every = e;
    }
    if args.target.is_some() {
        cfg.eval.target = args.target;
    }
    cfg.validate()?;
    let metric = cfg.metric()?;
    let data = load_data(cfg, None, true)?;
    let model_cfg = cfg.model.model_config(data.vocab.len());
    let mut model = Model::<T>::init(model_cfg, cfg.seed()).map_err(config_err)?.with_kernel(kernel_opts);
    let opts = FitOptions {
        eval_every: cfg.eval.eval_every,
        metric,
        eval: EvalOptions {
            gain: cfg.eval.gain,
            positive_threshold: cfg.eval.positive_threshold,
        },
        target: cfg.eval.target,
    };
    let train_cfg = cfg.train.clone();

    ctx.ensure_out()?;
    let outcome = fit(&mut model, &data, &train_cfg, &opts, |p| {
        if let Some(m) = p.metric {
            eprintln!("step {} loss {:.5} {} {:.4}", p.step, p.loss, metric, m);
        }
    })?;
    save_model(&model, &ctx.path("model.qdst"))?;
    data.vocab.save(&ctx.path("vocab.json"))?;
    let mut curve = String::from("step,loss,metric\n");
    for p in &outcome.curve {
        let m = p.metric.map(|m| m.to_string()).unwrap_or_default();
        let _ = writeln!(curve, "{},{},{}", p.step, p.loss, m);
    }
    super::write_file(&ctx.path("loss_curve.csv"), curve)?;
    let summary = TrainSummary {
        steps: outcome.curve.last().map_or(0, |p| p.step),
        steps_to_target: outcome.steps_to_target,
        metric: metric.to_string(),
        final_value: outcome.final_report.mean,
        final_loss: outcome.curve.last().map_or(f64::NAN, |p| p.loss),
    };
    super::write_file(
        &ctx.path("train_summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serialises"),
    )?;
    ctx.write_manifest("train")?;
    println!("{}\t{}", metric, outcome.final_report.mean);
    Ok(())
}

fn load_trained<T: Real>(
    model_path: &Path,
    vocab_path: &Option<PathBuf>,
    ctx: &Context,
) -> Result<(Model<T>, Vocabulary), CliError> {
    let model = load_model::<T>(model_path).map_err(CliError::data)?.with_kernel(kernel(ctx));
    let vocab_path = vocab_path
        .clone()
        .unwrap_or_else(|| model_path.parent().unwrap_or(Path::new(".")).join("vocab.json"));
    let vocab = Vocabulary::load(&vocab_path).map_err(CliError::data)?;
    if vocab.len() > model.config.vocab_size {
        return Err(CliError::Data(format!(
            "vocabulary of {} tokens does not fit the model's {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    Ok((model, vocab))
}

fn rerank_cmd<T: Real>(args: &RerankArgs, ctx: &mut Context) -> Result<(), CliError> {
    apply_data_args(&mut ctx.config, &args.data);
    let (model, vocab) = load_trained::<T>(&args.model, &args.vocab, ctx)?;
    let data = load_data(&ctx.config, Some(vocab), false)?;
    if data.vocab.len() > model.config.vocab_size {
        return Err(CliError::Data("dataset vocabulary does not fit the model".into()));
    }
    let mut run = Run::default();
    for q in &data.queries {
        let candidates = data.candidate_ids(&q.query_id);
        if candidates.is_empty() {
            eprintln!("qdst: query {} has no candidates, skipped", q.query_id);
            continue;
        }
        run.insert(rerank(&q.query_id, &q.tokens, &candidates, &data.corpus, &model).map_err(CliError::data)?);
    }
    if run.is_empty() {
        return Err(CliError::Data("no query has candidates".into()));
    }
    ctx.ensure_out()?;
    super::write_file(&ctx.path("run.txt"), format_run(&run, &args.tag))?;
    ctx.write_manifest("rerank")?;
    println!("{}", ctx.path("run.txt").display());
    Ok(())
}

fn eval(args: &EvalArgs, ctx: &mut Context) -> Result<(), CliError> {
    let cfg = &mut ctx.config;
    if let Some(m) = &args.metric {
        cfg.eval.metric = m.clone();
    }
    if let Some(g) = &args.gain {
        cfg.eval.gain = g.parse::<Gain>().map_err(config_err)?;
    }
    if let Some(t) = args.threshold {
        cfg.eval.positive_threshold = t;
    }
    cfg.validate()?;
    let metric = cfg.metric()?;
    let opts = EvalOptions {
        gain: cfg.eval.gain,
        positive_threshold: cfg.eval.positive_threshold,
    };
    let run = read_run(&args.run).map_err(CliError::data)?;
    let qrels = read_qrels(&args.qrels).map_err(CliError::data)?;
    if qrels.is_empty() {
        return Err(CliError::Data(format!("{} contains no judgments", args.qrels.display())));
    }
    if qrels.negative_grades_mapped > 0 {
        eprintln!("qdst: {} negative grades mapped to 0", qrels.negative_grades_mapped);
    }
    let report = evaluate(metric, &run, &qrels, opts)?;
    if !report.flagged.is_empty() {
        eprintln!("qdst: queries without relevant documents: {}", report.flagged.join(" "));
    }
    if !report.unjudged.is_empty() {
        eprintln!("qdst: run queries without judgments (skipped): {}", report.unjudged.join(" "));
    }
    let mut out = String::new();
    for (qid, v) in &report.per_query {
        let _ = writeln!(out, "{qid}\t{metric}\t{v}");
    }
    let _ = writeln!(out, "all\t{metric}\t{}", report.mean);
    print!("{out}");
    ctx.ensure_out()?;
    ctx.write_manifest("eval")
}

fn bench<T: Real>(args: &BenchArgs, ctx: &mut Context) -> Result<(), CliError> {
    let spec = &mut ctx.config.bench;
    if let Some(p) = &args.presets {
        spec.presets = p.iter().map(|s| parse_preset(s)).collect::<Result<_, _>>()?;
    }
    if let Some(l) = &args.lengths {
        spec.lengths = l.clone();
    }
    if let Some(w) = &args.windows {
        spec.windows = w.clone();
    }
    if let Some(r) = args.reps {
        spec.repetitions = r;
    }
    if let Some(w) = args.warmup {
        spec.warmup = w;
    }
    if let Some(d) = args.dim {
        spec.dim = d;
    }
    if let Some(h) = args.heads {
        spec.heads = h;
    }
    if let Some(l) = args.layers {
        spec.layers = l;
    }
    spec.parallel |= args.parallel;
    spec.threads = ctx.threads;
    spec.validate().map_err(config_err)?;
    let spec = spec.clone();

    ctx.ensure_out()?;
    let records = run_bench::<T>(&spec, |r| {
        eprintln!(
            "{} n={} w={} forward {:.2} ms train {:.2} ms{}",
            r.preset.name(),
            r.length,
            r.window.map_or("-".into(), |w| w.to_string()),
            r.forward_ms_mean,
            r.train_ms_mean,
            r.error.as_deref().map(|e| format!(" FAILED: {e}")).unwrap_or_default()
        )
    })?;
    write_bench_csv(&records, &ctx.path("bench.csv"))?;
    let precision = match ctx.precision {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    };
    BenchMetadata::collect(&spec, precision).write(&ctx.path("bench_meta.json"))?;
    ctx.write_manifest("bench")
}

fn analyze<T: Real>(args: &AnalyzeArgs, ctx: &mut Context) -> Result<(), CliError> {
    apply_data_args(&mut ctx.config, &args.data);
    if args.max_queries == 0 || args.docs_per_query == 0 || args.top_k == 0 {
        return Err(CliError::Config("max_queries, docs_per_query and top_k must be >= 1".into()));
    }
    let (model, data) = match &args.model {
        Some(path) => {
            let (model, vocab) = load_trained::<T>(path, &args.vocab, ctx)?;
            let data = load_data(&ctx.config, Some(vocab), false)?;
            (model, data)
        }
        None => {
            let data = load_data(&ctx.config, None, false)?;
            let cfg = ctx.config.model.model_config(data.vocab.len());
            (Model::<T>::init(cfg, ctx.config.seed()).map_err(config_err)?.with_kernel(kernel(ctx)), data)
        }
    };
    let layers = model.config.num_layers;
    let layer = args.layer.unwrap_or(layers);
    if layer == 0 || layer > layers {
        return Err(CliError::Config(format!("layer {layer} out of range 1..={layers}")));
    }

    let mut traces = Vec::new();
    let mut layouts = Vec::new();
    let mut rows = Vec::new();
    for q in data.queries.iter().take(args.max_queries) {
        for doc_id in data.candidate_ids(&q.query_id).iter().take(args.docs_per_query) {
            let doc = data
                .corpus
                .get(doc_id)
                .ok_or_else(|| CliError::Data(format!("missing documents: {doc_id}")))?;
            let layout = model.layout(&q.tokens, &doc.sentences)?;
            let enc = model.encode(&layout, true)?;
            let per_layer = enc.traces.expect("traces requested");
            if !layout.sentence_starts().is_empty() {
                for hit in top_attended_sentences(&per_layer, &layout, Source::Cls, layer, true, args.top_k)? {
                    rows.push(TopSentenceRow {
                        qid: q.query_id.clone(),
                        docid: doc_id.clone(),
                        head: hit.head,
                        sentence_idx: hit.sentence,
                        weight: hit.weight,
                        sentence_text: doc.sentence_texts[hit.sentence].clone(),
                    });
                }
            }
            traces.push(per_layer);
            layouts.push(layout);
        }
    }
    if traces.is_empty() {
        return Err(CliError::Data("no (query, candidate) pairs to analyse".into()));
    }
    let role_max = role_max_attention(&traces, &layouts)?;
    let entropy = role_entropy(&traces, &layouts)?;

    ctx.ensure_out()?;
    role_max.write_csv(&ctx.path("role_max.csv"))?;
    entropy.write_csv(&ctx.path("entropy.csv"))?;
    write_top_sentences_csv(&rows, &ctx.path("top_sentences.csv"))?;
    ctx.write_manifest("analyze")
}
