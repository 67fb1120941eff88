use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use objret::bench::{run_bench, BenchConfig};
use objret::embedstore::{build_store, load_store, save_store, EmbeddingStore};
use objret::metrics::{average_precision, average_recall, coco_iou_thresholds, Detection, EvalReport, GroundTruth};
use objret::probe::{collect_training_set, train_probe, AnchorConfig, ObjectnessProbe, ProbeTrainConfig};
use objret::recret::{
    evaluate_rec, generate_rec_tasks, save_tasks, train_rec_scorer, RecTrainConfig, TaskGenConfig, ToyScorer,
};
use objret::retrieval::{evaluate_leaf_retrieval, retrieve, QuerySpec, DEFAULT_THRESHOLD};
use objret::synthworld::{generate_corpus, load_corpus, save_corpus, Corpus, LabelPolicy, WorldConfig};
use objret::{Error, Result};

mod exit {
    pub const MISSING_INPUT: u8 = 3;
    pub const CONFIG: u8 = 4;
    pub const DIVERGENCE: u8 = 5;
    pub const OTHER: u8 = 6;
}

#[derive(Parser)]
#[command(name = "objret", version, about = "Cached object-embedding retrieval and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (annotations plus generator sidecar).
    Gen(GenArgs),
    /// Train the objectness probe on every image of a corpus.
    TrainProbe(TrainProbeArgs),
    /// Run the probe over a corpus and cache the top-k proposals.
    BuildCache(BuildCacheArgs),
    /// Retrieve images containing each queried concept.
    Query(QueryArgs),
    /// AP of cached proposals labelled with their best-matching leaf concept.
    EvalDetect(EvalArgs),
    /// Proposal recall of the cache.
    EvalRecall(EvalRecallArgs),
    /// Per-class and macro P/R/F1 of leaf-concept retrieval.
    EvalRetrieval(EvalRetrievalArgs),
    /// Generate REC tasks on the first half of the corpus and train the scorer.
    TrainRec(TrainRecArgs),
    /// Evaluate the scorer on REC tasks from the second half of the corpus.
    EvalRec(EvalRecArgs),
    /// Time cached scoring against per-query re-extraction.
    Bench(BenchArgs),
}

#[derive(Args, Serialize)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 200)]
    images: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

#[derive(Args, Serialize)]
struct TrainProbeArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    probe: PathBuf,
}

#[derive(Args, Serialize)]
struct BuildCacheArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    probe: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long, default_value_t = 100)]
    k: usize,
}

#[derive(Args, Serialize)]
struct QueryArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    /// Comma-separated concept ids.
    #[arg(long, value_delimiter = ',', required = true)]
    queries: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD, allow_negative_numbers = true)]
    threshold: f64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalRecallArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalRetrievalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD, allow_negative_numbers = true)]
    threshold: f64,
    #[arg(long)]
    federated: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TrainRecArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    scorer: PathBuf,
    #[arg(long, default_value = "last_two", value_parser = ["uniform_all", "last_two"])]
    policy: String,
    /// Number of training tasks.
    #[arg(long, default_value_t = 500)]
    queries: usize,
}

#[derive(Args, Serialize)]
struct EvalRecArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    scorer: PathBuf,
    #[arg(long, default_value = "last_two", value_parser = ["uniform_all", "last_two"])]
    policy: String,
    /// Number of held-out tasks.
    #[arg(long, default_value_t = 300)]
    queries: usize,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    /// Number of timed queries per store size.
    #[arg(long, default_value_t = 6)]
    queries: usize,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingInput(_) => exit::MISSING_INPUT,
        Error::Config(_) | Error::Domain(_) | Error::UnknownConcept(_) | Error::DimMismatch { .. } => exit::CONFIG,
        Error::Divergence { .. } => exit::DIVERGENCE,
        _ => exit::OTHER,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidBox(_) => "invalid_box",
        Error::InvalidRegion(_) => "invalid_region",
        Error::Config(_) => "config",
        Error::UnknownConcept(_) => "unknown_concept",
        Error::DimMismatch { .. } => "dim_mismatch",
        Error::Parse { .. } => "parse",
        Error::Validation { .. } => "validation",
        Error::Format(_) => "format",
        Error::Domain(_) => "domain",
        Error::Divergence { .. } => "divergence",
        Error::MissingInput(_) => "missing_input",
        Error::Json(_) => "json",
        Error::Io(_) => "io",
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

fn read_text(path: &Path) -> Result<String> {
    require(path)?;
    Ok(fs::read_to_string(path)?)
}

fn open_corpus(path: &Path) -> Result<Corpus> {
    require(path)?;
    load_corpus(path)
}

fn open_store(path: &Path, corpus: &Corpus) -> Result<EmbeddingStore> {
    let store = load_store(path)?;
    if store.dim() != corpus.dim() {
        return Err(Error::DimMismatch { expected: corpus.dim(), got: store.dim() });
    }
    Ok(store)
}

fn parse_policy(s: &str) -> Result<LabelPolicy> {
    s.parse()
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Writes a report to `path`, or to stdout when no path is given.
fn emit<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let s = to_json(value)?;
    match path {
        Some(p) => fs::write(p, s)?,
        None => print!("{s}"),
    }
    Ok(())
}

fn manifest_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn write_manifest<C: Serialize>(artifact: Option<&Path>, command: &str, config: &C, seed: u64, start: Instant) -> Result<()> {
    let Some(artifact) = artifact else { return Ok(()) };
    let m = json!({
        "command": command,
        "config": config,
        "seed": seed,
        "wall_time": start.elapsed().as_secs_f64(),
    });
    fs::write(manifest_path(artifact), to_json(&m)?)?;
    Ok(())
}

fn cmd_gen(a: &GenArgs) -> Result<(Option<PathBuf>, u64)> {
    let cfg = WorldConfig::new(a.images, a.dim, a.seed).with_noise(a.noise);
    cfg.validate()?;
    let corpus = generate_corpus(&cfg)?;
    save_corpus(&corpus, &a.corpus)?;
    Ok((Some(a.corpus.clone()), a.seed))
}

fn cmd_train_probe(a: &TrainProbeArgs) -> Result<(Option<PathBuf>, u64)> {
    let corpus = open_corpus(&a.corpus)?;
    let data = collect_training_set(&corpus.scenes, &AnchorConfig::default())?;
    let trained = train_probe(&data, &ProbeTrainConfig { seed: a.seed, ..Default::default() })?;
    fs::write(&a.probe, trained.probe.to_json()? + "\n")?;
    Ok((Some(a.probe.clone()), a.seed))
}

fn cmd_build_cache(a: &BuildCacheArgs) -> Result<(Option<PathBuf>, u64)> {
    let corpus = open_corpus(&a.corpus)?;
    let probe = ObjectnessProbe::from_json(&read_text(&a.probe)?)?;
    let store = build_store(&corpus, &probe, &AnchorConfig::default().with_k(a.k))?;
    save_store(&store, &a.cache)?;
    Ok((Some(a.cache.clone()), probe.seed))
}

#[derive(Serialize)]
struct Hit {
    image_id: String,
    score: f64,
}

fn cmd_query(a: &QueryArgs) -> Result<(Option<PathBuf>, u64)> {
    let corpus = open_corpus(&a.corpus)?;
    let store = open_store(&a.cache, &corpus)?;
    let mut out = BTreeMap::new();
    for concept in &a.queries {
        let e = corpus.embedder.embed(concept)?.to_vec();
        let r = retrieve(&store, &QuerySpec::new(concept.clone(), e, a.threshold)?)?;
        let hits: Vec<Hit> =
            r.images.iter().map(|id| Hit { image_id: id.clone(), score: r.per_image_max[id] }).collect();
        out.insert(concept.clone(), hits);
    }
    let seed = corpus.config.seed;
    emit(a.report.as_deref(), &json!({ "threshold": a.threshold, "results": out, "seed": seed }))?;
    Ok((a.report.clone(), seed))
}

fn ground_truth(corpus: &Corpus) -> Vec<GroundTruth> {
    corpus
        .scenes
        .iter()
        .flat_map(|s| {
            s.objects.iter().map(|o| GroundTruth { image_id: s.image_id.clone(), class: o.leaf().to_string(), bbox: o.bbox })
        })
        .collect()
}

fn cmd_eval_detect(a: &EvalArgs) -> Result<(Option<PathBuf>, u64)> {
    let corpus = open_corpus(&a.corpus)?;
    let store = open_store(&a.cache, &corpus)?;
    let leaves = corpus.leaf_ids();
    let classes: Vec<(String, Vec<f64>)> =
        leaves.iter().map(|l| Ok((l.clone(), corpus.embedder.embed(l)?.to_vec()))).collect::<Result<_>>()?;
    let mut dets = Vec::new();
    for r in store.records() {
        for p in r.iter() {
            let (class, score) = classes
                .iter()
                .map(|(c, e)| (c, objret::embedstore::dot(p.embedding, e)))
                .fold(None, |best: Option<(&String, f64)>, (c, s)| match best {
                    Some((_, bs)) if bs >= s => best,
                    _ => Some((c, s)),
                })
                .expect("taxonomy has leaves");
            dets.push(Detection { image_id: r.image_id().to_string(), class: class.clone(), bbox: p.bbox.cast(), score });
        }
    }
    let gts = ground_truth(&corpus);
    let ap50 = average_precision(&dets, &gts, 0.5);
    let thresholds = coco_iou_thresholds();
    let ap_avg = thresholds.iter().map(|&t| average_precision(&dets, &gts, t).mean).sum::<f64>() / thresholds.len() as f64;
    let seed = corpus.config.seed;
    let report = EvalReport {
        ap: Some(ap50),
        extra: BTreeMap::from([("ap_50_95".to_string(), ap_avg)]),
        seed,
        ..Default::default()
    };
    emit(a.report.as_deref(), &report)?;
    Ok((a.report.clone(), seed))
}

fn cmd_eval_recall(a: &EvalRecallArgs) -> Result<(Option<PathBuf>, u64)> {
    if a.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let corpus = open_corpus(&a.corpus)?;
    let store = open_store(&a.cache, &corpus)?;
    let proposals = store.proposal_map();
    let gts = corpus.gt_by_image();
    let ks: BTreeSet<usize> = [1, 10, 100, 300, a.k].into_iter().collect();
    let seed = corpus.config.seed;
    let report = EvalReport {
        ar: ks.into_iter().map(|k| (k, average_recall(&proposals, &gts, k))).collect(),
        seed,
        ..Default::default()
    };
    emit(a.report.as_deref(), &report)?;
    Ok((a.report.clone(), seed))
}

fn cmd_eval_retrieval(a: &EvalRetrievalArgs) -> Result<(Option<PathBuf>, u64)> {
    let corpus = open_corpus(&a.corpus)?;
    let store = open_store(&a.cache, &corpus)?;
    let report = evaluate_leaf_retrieval(&corpus, &store, a.threshold, a.federated)?;
    emit(a.report.as_deref(), &report)?;
    Ok((a.report.clone(), corpus.config.seed))
}

fn split(corpus: &Corpus) -> Result<usize> {
    let half = corpus.scenes.len() / 2;
    if half == 0 {
        return Err(Error::Config("REC needs at least two images".into()));
    }
    Ok(half)
}

fn tasks_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".tasks.jsonl");
    PathBuf::from(s)
}

fn cmd_train_rec(a: &TrainRecArgs) -> Result<(Option<PathBuf>, u64)> {
    let policy = parse_policy(&a.policy)?;
    let corpus = open_corpus(&a.corpus)?;
    let store = open_store(&a.cache, &corpus)?;
    let half = split(&corpus)?;
    let gen = TaskGenConfig { policy, ..TaskGenConfig::new(a.queries, a.seed) };
    let tasks = generate_rec_tasks(&corpus, &store, &corpus.scenes[..half], &gen)?;
    let trained = train_rec_scorer(&corpus, &store, &tasks, &RecTrainConfig { seed: a.seed, ..Default::default() })?;
    save_tasks(&tasks, &tasks_path(&a.scorer))?;
    fs::write(&a.scorer, trained.scorer.to_json()? + "\n")?;
    Ok((Some(a.scorer.clone()), a.seed))
}

fn cmd_eval_rec(a: &EvalRecArgs) -> Result<(Option<PathBuf>, u64)> {
    let policy = parse_policy(&a.policy)?;
    let corpus = open_corpus(&a.corpus)?;
    let store = open_store(&a.cache, &corpus)?;
    let scorer = ToyScorer::from_json(&read_text(&a.scorer)?)?;
    let half = split(&corpus)?;
    let gen = TaskGenConfig { policy, ..TaskGenConfig::new(a.queries, a.seed) };
    let tasks = generate_rec_tasks(&corpus, &store, &corpus.scenes[half..], &gen)?;
    let report = evaluate_rec(&corpus, &store, &scorer, &tasks, a.seed)?;
    if let Some(p) = &a.report {
        save_tasks(&tasks, &tasks_path(p))?;
    }
    emit(a.report.as_deref(), &report)?;
    Ok((a.report.clone(), a.seed))
}

fn cmd_bench(a: &BenchArgs) -> Result<(Option<PathBuf>, u64)> {
    let corpus = open_corpus(&a.corpus)?;
    let store = open_store(&a.cache, &corpus)?;
    let report = run_bench(&corpus, &store, &BenchConfig::new(a.queries))?;
    emit(a.report.as_deref(), &report)?;
    Ok((a.report.clone(), corpus.config.seed))
}

fn run(cli: &Cli) -> Result<()> {
    let start = Instant::now();
    macro_rules! dispatch {
        ($name:literal, $f:ident, $a:expr) => {{
            let (artifact, seed) = $f($a)?;
            write_manifest(artifact.as_deref(), $name, $a, seed, start)
        }};
    }
    match &cli.command {
        Command::Gen(a) => dispatch!("gen", cmd_gen, a),
        Command::TrainProbe(a) => dispatch!("train-probe", cmd_train_probe, a),
        Command::BuildCache(a) => dispatch!("build-cache", cmd_build_cache, a),
        Command::Query(a) => dispatch!("query", cmd_query, a),
        Command::EvalDetect(a) => dispatch!("eval-detect", cmd_eval_detect, a),
        Command::EvalRecall(a) => dispatch!("eval-recall", cmd_eval_recall, a),
        Command::EvalRetrieval(a) => dispatch!("eval-retrieval", cmd_eval_retrieval, a),
        Command::TrainRec(a) => dispatch!("train-rec", cmd_train_rec, a),
        Command::EvalRec(a) => dispatch!("eval-rec", cmd_eval_rec, a),
        Command::Bench(a) => dispatch!("bench", cmd_bench, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let err = json!({ "error": { "kind": error_kind(&e), "message": e.to_string() } });
            eprintln!("{err}");
            ExitCode::from(exit_code(&e))
        }
    }
}
