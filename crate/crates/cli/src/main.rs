use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use tmn_core::checkpoint::{Checkpoint, RngState};
use tmn_core::eval::{self, CandidateIndex, EvalMode, EvalOptions, QueryResult};
use tmn_core::model::{rank_by_score, BaselineKind, Model, ModelSpec, TmnConfig};
use tmn_core::scheduler::PlateauConfig;
use tmn_core::selfcheck;
use tmn_core::tape::OpKind;
use tmn_core::trainer::{self, TrainHyper};
use tmn_core::{
    load_dataset, make_split, synth_taxonomy, ConceptId, DataError, Dataset, DatasetSplit,
    QuerySet, SynthConfig,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "tmn",
    version,
    about = "Taxonomy completion with triplet matching networks"
)]
struct Cli {
    /// Flat TOML file with option defaults; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Serial execution and byte-stable outputs (no wall-clock fields).
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Load terms, edges and embeddings into a normalized archive.
    Ingest(IngestArgs),
    /// Generate a synthetic taxonomy archive.
    Synth(SynthArgs),
    /// Hold out validation and test queries.
    Split(SplitArgs),
    /// Train a scorer on the seed taxonomy of a split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out queries.
    Eval(EvalArgs),
    /// Show the top-ranked positions for query concepts.
    Predict(PredictArgs),
    /// Run built-in gradient, enumeration and metric checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    terms: Option<PathBuf>,
    #[arg(long)]
    edges: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    branching: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    extra_parent_prob: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write terms.tsv, edges.tsv and embeddings.txt here.
    #[arg(long)]
    export_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    archive: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sample queries from leaves only.
    #[arg(long)]
    leaf_only: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    archive: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Line-delimited training log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// tmn, closest_position, single_layer, multi_layer, bilinear or ntn.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    /// Three comma-separated auxiliary loss weights.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long)]
    no_gating: bool,
    /// Auxiliary scorers to remove: any of s1, s2, s3.
    #[arg(long, value_delimiter = ',')]
    drop_scorers: Option<Vec<String>>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    n_negatives: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    early_stop_patience: Option<usize>,
    #[arg(long)]
    plateau_patience: Option<usize>,
    #[arg(long)]
    plateau_factor: Option<f64>,
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    update_embeddings: bool,
    #[arg(long)]
    allow_pseudo_parent: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    archive: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// completion or expansion.
    #[arg(long)]
    mode: Option<String>,
    /// val or test.
    #[arg(long)]
    queries: Option<String>,
    /// Metrics report output (stdout when absent).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-query line-delimited dump.
    #[arg(long)]
    dump: Option<PathBuf>,
    #[arg(long)]
    allow_pseudo_parent: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    archive: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    allow_pseudo_parent: bool,
    /// Query terms or concept ids.
    #[arg(required = true)]
    query: Vec<String>,
}

#[derive(Args, Debug)]
struct SelfcheckArgs {
    /// Corrupt the adjoint of one op (negative control).
    #[arg(long)]
    inject_fault: Option<String>,
}

/// Flat option document accepted by `--config`.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    terms: Option<PathBuf>,
    edges: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    archive: Option<PathBuf>,
    split: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    log: Option<PathBuf>,
    report: Option<PathBuf>,
    dump: Option<PathBuf>,
    export_dir: Option<PathBuf>,
    nodes: Option<usize>,
    branching: Option<usize>,
    dim: Option<usize>,
    noise: Option<f64>,
    extra_parent_prob: Option<f64>,
    seed: Option<u64>,
    n_val: Option<usize>,
    n_test: Option<usize>,
    leaf_only: Option<bool>,
    model: Option<String>,
    k: Option<usize>,
    lambdas: Option<Vec<f64>>,
    gating: Option<bool>,
    drop_scorers: Option<Vec<String>>,
    batch_size: Option<usize>,
    n_negatives: Option<usize>,
    lr: Option<f64>,
    max_epochs: Option<usize>,
    early_stop_patience: Option<usize>,
    plateau_patience: Option<usize>,
    plateau_factor: Option<f64>,
    min_lr: Option<f64>,
    clip_norm: Option<f64>,
    update_embeddings: Option<bool>,
    allow_pseudo_parent: Option<bool>,
    mode: Option<String>,
    queries: Option<String>,
    top_k: Option<usize>,
    threads: Option<usize>,
    deterministic: Option<bool>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Check(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

fn need(v: Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    v.ok_or_else(|| usage(format!("missing required option --{what}")))
}

fn echo<T: Serialize>(command: &str, resolved: &T) {
    let body = serde_json::to_string(resolved).unwrap_or_default();
    eprintln!("[{command}] config {body}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(EXIT_CHECK)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.config {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<FileConfig>(&text)
                .map_err(|e| usage(format!("config {}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let deterministic = cli.deterministic || file.deterministic.unwrap_or(false);
    let threads = if deterministic {
        Some(1)
    } else {
        cli.threads.or(file.threads)
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure::Data(anyhow!("thread pool: {e}")))?;
    }
    match cli.cmd {
        Cmd::Ingest(a) => cmd_ingest(a, &file),
        Cmd::Synth(a) => cmd_synth(a, &file),
        Cmd::Split(a) => cmd_split(a, &file),
        Cmd::Train(a) => cmd_train(a, &file),
        Cmd::Eval(a) => cmd_eval(a, &file, deterministic),
        Cmd::Predict(a) => cmd_predict(a, &file),
        Cmd::Selfcheck(a) => cmd_selfcheck(a),
    }
}

fn load_archive(path: &Path) -> Result<Dataset, Failure> {
    Dataset::load(path).map_err(|e| {
        Failure::Data(anyhow!(e).context(format!("loading archive {}", path.display())))
    })
}

fn load_split(path: &Path) -> Result<DatasetSplit, Failure> {
    DatasetSplit::load(path)
        .map_err(|e| Failure::Data(anyhow!(e).context(format!("loading split {}", path.display()))))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    if !path.exists() {
        return Err(Failure::Data(anyhow!(
            "checkpoint {} not found; run `tmn train` first",
            path.display()
        )));
    }
    Checkpoint::load(path).map_err(|e| {
        Failure::Data(anyhow!(e).context(format!("loading checkpoint {}", path.display())))
    })
}

fn data_err(e: DataError) -> Failure {
    Failure::Data(anyhow!(e))
}

#[derive(Serialize)]
struct IngestResolved<'a> {
    terms: &'a Path,
    edges: &'a Path,
    embeddings: &'a Path,
    out: &'a Path,
}

fn cmd_ingest(a: IngestArgs, f: &FileConfig) -> Result<(), Failure> {
    let terms = need(a.terms.or(f.terms.clone()), "terms")?;
    let edges = need(a.edges.or(f.edges.clone()), "edges")?;
    let emb = need(a.embeddings.or(f.embeddings.clone()), "embeddings")?;
    let out = need(a.out.or(f.out.clone()), "out")?;
    echo(
        "ingest",
        &IngestResolved {
            terms: &terms,
            edges: &edges,
            embeddings: &emb,
            out: &out,
        },
    );
    let data = load_dataset(&terms, &edges, &emb).map_err(data_err)?;
    data.save(&out).map_err(data_err)?;
    print_summary(&data);
    Ok(())
}

fn print_summary(data: &Dataset) {
    let s = data.taxonomy.summary();
    println!(
        "nodes {}\nedges {}\ndepth {}\ndim {}",
        s.nodes,
        s.edges,
        s.depth,
        data.embeddings.dim()
    );
}

fn cmd_synth(a: SynthArgs, f: &FileConfig) -> Result<(), Failure> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n_nodes: a.nodes.or(f.nodes).unwrap_or(d.n_nodes),
        branching: a.branching.or(f.branching).unwrap_or(d.branching),
        dim: a.dim.or(f.dim).unwrap_or(d.dim),
        noise: a.noise.or(f.noise).unwrap_or(d.noise),
        extra_parent_prob: a
            .extra_parent_prob
            .or(f.extra_parent_prob)
            .unwrap_or(d.extra_parent_prob),
        seed: a.seed.or(f.seed).unwrap_or(d.seed),
    };
    let out = need(a.out.or(f.out.clone()), "out")?;
    if cfg.n_nodes < 2
        || cfg.branching == 0
        || cfg.dim == 0
        || cfg.noise.is_nan()
        || cfg.noise < 0.0
    {
        return Err(usage(
            "synth needs nodes >= 2, branching >= 1, dim >= 1 and noise >= 0",
        ));
    }
    if !(0.0..=1.0).contains(&cfg.extra_parent_prob) {
        return Err(usage("extra-parent-prob must lie in [0, 1]"));
    }
    echo("synth", &cfg);
    let data = synth_taxonomy(&cfg);
    data.save(&out).map_err(data_err)?;
    if let Some(dir) = a.export_dir.or(f.export_dir.clone()) {
        tmn_core::dataset::export_sources(&data, &dir).map_err(data_err)?;
    }
    print_summary(&data);
    Ok(())
}

#[derive(Serialize)]
struct SplitResolved<'a> {
    archive: &'a Path,
    out: &'a Path,
    n_val: usize,
    n_test: usize,
    seed: u64,
    leaf_only: bool,
}

fn cmd_split(a: SplitArgs, f: &FileConfig) -> Result<(), Failure> {
    let archive = need(a.archive.or(f.archive.clone()), "archive")?;
    let out = need(a.out.or(f.out.clone()), "out")?;
    let r = SplitResolved {
        archive: &archive,
        out: &out,
        n_val: a.n_val.or(f.n_val).unwrap_or(1000),
        n_test: a.n_test.or(f.n_test).unwrap_or(1000),
        seed: a.seed.or(f.seed).unwrap_or(0),
        leaf_only: a.leaf_only || f.leaf_only.unwrap_or(false),
    };
    echo("split", &r);
    let data = load_archive(&archive)?;
    let split =
        make_split(&data.taxonomy, r.n_val, r.n_test, r.seed, r.leaf_only).map_err(data_err)?;
    split.save(&out).map_err(data_err)?;
    let s = split.seed_taxonomy.summary();
    println!(
        "val {}\ntest {}\nseed nodes {}\nseed edges {}\nrepaired edges {}",
        split.val_queries.len(),
        split.test_queries.len(),
        s.nodes,
        s.edges,
        split.repaired_edges.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainResolved<'a> {
    archive: &'a Path,
    split: &'a Path,
    out: &'a Path,
    log: Option<&'a Path>,
    spec: &'a ModelSpec,
    hyper: &'a TrainHyper,
}

fn parse_spec(a: &TrainArgs, f: &FileConfig, dim: usize) -> Result<ModelSpec, Failure> {
    let name = a
        .model
        .clone()
        .or(f.model.clone())
        .unwrap_or_else(|| "tmn".into());
    let k = a.k.or(f.k).unwrap_or(5);
    if k == 0 {
        return Err(usage("k must be positive"));
    }
    if name.eq_ignore_ascii_case("tmn") {
        let lambdas = match a.lambdas.clone().or(f.lambdas.clone()) {
            Some(v) if v.len() == 3 => [v[0], v[1], v[2]],
            Some(_) => return Err(usage("lambdas needs exactly three values")),
            None => [1.0; 3],
        };
        let mut scorers = [true; 3];
        for s in a
            .drop_scorers
            .clone()
            .or(f.drop_scorers.clone())
            .unwrap_or_default()
        {
            let j = match s.trim() {
                "s1" => 0,
                "s2" => 1,
                "s3" => 2,
                other => {
                    return Err(usage(format!(
                        "unknown scorer {other:?}; expected s1, s2 or s3"
                    )))
                }
            };
            scorers[j] = false;
        }
        let gating = if a.no_gating {
            false
        } else {
            f.gating.unwrap_or(true)
        };
        let cfg = TmnConfig {
            dim,
            k,
            lambdas,
            gating,
            scorers,
        };
        cfg.validate().map_err(usage)?;
        Ok(ModelSpec::Tmn(cfg))
    } else {
        let kind: BaselineKind = name.parse().map_err(usage)?;
        Ok(ModelSpec::Baseline { kind, dim, k })
    }
}

fn cmd_train(a: TrainArgs, f: &FileConfig) -> Result<(), Failure> {
    let archive = need(a.archive.clone().or(f.archive.clone()), "archive")?;
    let split_path = need(a.split.clone().or(f.split.clone()), "split")?;
    let out = need(a.out.clone().or(f.out.clone()), "out")?;
    let log_path = a.log.clone().or(f.log.clone());
    let d = TrainHyper::default();
    let pd = PlateauConfig::default();
    let hyper = TrainHyper {
        batch_size: a.batch_size.or(f.batch_size).unwrap_or(d.batch_size),
        n_negatives: a.n_negatives.or(f.n_negatives).unwrap_or(d.n_negatives),
        lr: a.lr.or(f.lr).unwrap_or(d.lr),
        max_epochs: a.max_epochs.or(f.max_epochs).unwrap_or(d.max_epochs),
        early_stop_patience: a
            .early_stop_patience
            .or(f.early_stop_patience)
            .unwrap_or(d.early_stop_patience),
        seed: a.seed.or(f.seed).unwrap_or(d.seed),
        clip_norm: a.clip_norm.or(f.clip_norm),
        update_embeddings: a.update_embeddings || f.update_embeddings.unwrap_or(false),
        allow_pseudo_parent: a.allow_pseudo_parent || f.allow_pseudo_parent.unwrap_or(false),
        plateau: PlateauConfig {
            patience: a
                .plateau_patience
                .or(f.plateau_patience)
                .unwrap_or(pd.patience),
            factor: a.plateau_factor.or(f.plateau_factor).unwrap_or(pd.factor),
            min_lr: a.min_lr.or(f.min_lr).unwrap_or(pd.min_lr),
            threshold: pd.threshold,
        },
        adam: d.adam,
    };
    hyper.validate().map_err(|e| usage(e.to_string()))?;
    let data = load_archive(&archive)?;
    let spec = parse_spec(&a, f, data.embeddings.dim())?;
    echo(
        "train",
        &TrainResolved {
            archive: &archive,
            split: &split_path,
            out: &out,
            log: log_path.as_deref(),
            spec: &spec,
            hyper: &hyper,
        },
    );
    let split = load_split(&split_path)?;
    if split.seed_taxonomy.n_slots() != data.taxonomy.n_slots() {
        return Err(Failure::Data(anyhow!(
            "split does not belong to this archive"
        )));
    }
    let table = data.embeddings.vectors();
    let model = Model::init(spec, hyper.seed);

    let mut log_file = match &log_path {
        Some(p) => Some(std::io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating log {}", p.display()))?,
        )),
        None => None,
    };
    if !model.spec.trainable() {
        log::warn!(
            "{} is rule-based; writing a parameter-free checkpoint",
            model.spec.name()
        );
        Checkpoint::new(
            &model,
            RngState {
                seed: hyper.seed,
                epoch: 0,
            },
            None,
        )
        .save(&out)
        .map_err(data_err)?;
        return Ok(());
    }
    let mut write_err = None;
    let outcome = trainer::train_with(model, table, &split, &hyper, |rec| {
        if let Some(w) = log_file.as_mut() {
            if let Err(e) = serde_json::to_writer(&mut *w, rec)
                .map_err(anyhow::Error::from)
                .and_then(|_| Ok(writeln!(w)?))
            {
                write_err.get_or_insert(e);
            }
        }
    })
    .map_err(|e| Failure::Data(anyhow!(e)))?;
    if let Some(e) = write_err {
        return Err(Failure::Data(e.context("writing training log")));
    }
    if let Some(mut w) = log_file {
        #[derive(Serialize)]
        struct Final<'a> {
            #[serde(rename = "final")]
            record: &'a trainer::FinalRecord,
        }
        serde_json::to_writer(
            &mut w,
            &Final {
                record: &outcome.final_record,
            },
        )
        .context("writing training log")?;
        writeln!(w).context("writing training log")?;
        w.flush().context("writing training log")?;
    }
    let ck = Checkpoint::new(
        &outcome.model,
        RngState {
            seed: hyper.seed,
            epoch: outcome.log.len() as u64,
        },
        Some(outcome.scheduler.clone()),
    );
    ck.save(&out).map_err(data_err)?;
    match &outcome.final_record.val {
        Some(v) => println!(
            "epochs {}\nbest epoch {}\nval mrr_scaled {:.6}\nval mr {:.4}",
            outcome.final_record.epochs_run,
            outcome
                .final_record
                .best_epoch
                .map_or("-".into(), |e| e.to_string()),
            v.mrr_scaled,
            v.mr
        ),
        None => println!("epochs {}", outcome.final_record.epochs_run),
    }
    Ok(())
}

fn parse_mode(s: Option<String>) -> Result<EvalMode, Failure> {
    match s.as_deref().map(str::to_ascii_lowercase).as_deref() {
        None | Some("completion") => Ok(EvalMode::Completion),
        Some("expansion") => Ok(EvalMode::Expansion),
        Some(o) => Err(usage(format!(
            "unknown mode {o:?}; expected completion or expansion"
        ))),
    }
}

fn parse_queries(s: Option<String>) -> Result<QuerySet, Failure> {
    match s.as_deref().map(str::to_ascii_lowercase).as_deref() {
        None | Some("test") => Ok(QuerySet::Test),
        Some("val") | Some("validation") => Ok(QuerySet::Val),
        Some(o) => Err(usage(format!(
            "unknown query set {o:?}; expected val or test"
        ))),
    }
}

#[derive(Serialize)]
struct EvalResolved<'a> {
    archive: &'a Path,
    split: &'a Path,
    checkpoint: &'a Path,
    queries: QuerySet,
    report: Option<&'a Path>,
    dump: Option<&'a Path>,
    options: &'a EvalOptions,
}

#[derive(Serialize)]
struct EvalDocument<'a> {
    config: &'a EvalResolved<'a>,
    model: String,
    metrics: &'a tmn_core::MetricsReport,
}

#[derive(Serialize)]
struct DumpPosition {
    parent: String,
    child: String,
    score: f64,
}

#[derive(Serialize)]
struct DumpLine {
    query: String,
    id: String,
    true_ranks: Vec<usize>,
    top: Vec<DumpPosition>,
}

fn dump_line(data: &Dataset, r: &QueryResult) -> DumpLine {
    DumpLine {
        query: data.term(r.query).to_string(),
        id: data.external_ids[r.query.index()].clone(),
        true_ranks: r.true_ranks.clone(),
        top: r
            .top
            .iter()
            .map(|(p, s)| DumpPosition {
                parent: eval::endpoint_label(p.parent, &data.terms),
                child: eval::endpoint_label(p.child, &data.terms),
                score: *s,
            })
            .collect(),
    }
}

fn cmd_eval(a: EvalArgs, f: &FileConfig, deterministic: bool) -> Result<(), Failure> {
    let archive = need(a.archive.or(f.archive.clone()), "archive")?;
    let split_path = need(a.split.or(f.split.clone()), "split")?;
    let ck_path = need(a.checkpoint.or(f.checkpoint.clone()), "checkpoint")?;
    let report_path = a.report.or(f.report.clone());
    let dump_path = a.dump.or(f.dump.clone());
    let opts = EvalOptions {
        mode: parse_mode(a.mode.or(f.mode.clone()))?,
        allow_pseudo_parent: a.allow_pseudo_parent || f.allow_pseudo_parent.unwrap_or(false),
        timing: !deterministic,
        ..EvalOptions::default()
    };
    let which = parse_queries(a.queries.or(f.queries.clone()))?;
    let resolved = EvalResolved {
        archive: &archive,
        split: &split_path,
        checkpoint: &ck_path,
        queries: which,
        report: report_path.as_deref(),
        dump: dump_path.as_deref(),
        options: &opts,
    };
    echo("eval", &resolved);
    let data = load_archive(&archive)?;
    let split = load_split(&split_path)?;
    let model = load_checkpoint(&ck_path)?.model();
    let (metrics, results) =
        eval::evaluate(&model, data.embeddings.vectors(), &split, which, &opts)
            .map_err(|e| Failure::Data(anyhow!(e)))?;
    let doc = EvalDocument {
        config: &resolved,
        model: model.spec.name(),
        metrics: &metrics,
    };
    let text = serde_json::to_string_pretty(&doc).context("serializing report")? + "\n";
    match &report_path {
        Some(p) => {
            fs::write(p, &text).with_context(|| format!("writing report {}", p.display()))?
        }
        None => print!("{text}"),
    }
    if let Some(p) = &dump_path {
        let mut w = std::io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating dump {}", p.display()))?,
        );
        for r in &results {
            serde_json::to_writer(&mut w, &dump_line(&data, r)).context("writing dump")?;
            writeln!(w).context("writing dump")?;
        }
        w.flush().context("writing dump")?;
    }
    if report_path.is_some() {
        println!(
            "{} queries, {} candidates: MR {:.3}, scaled MRR {:.4}, R@1 {:.4}, R@10 {:.4}",
            metrics.n_queries,
            metrics.n_candidates,
            metrics.mr,
            metrics.mrr_scaled,
            metrics.recall_at.get(&1).copied().unwrap_or(0.0),
            metrics.recall_at.get(&10).copied().unwrap_or(0.0)
        );
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs, f: &FileConfig) -> Result<(), Failure> {
    let archive = need(a.archive.or(f.archive.clone()), "archive")?;
    let split_path = need(a.split.or(f.split.clone()), "split")?;
    let ck_path = need(a.checkpoint.or(f.checkpoint.clone()), "checkpoint")?;
    let mode = parse_mode(a.mode.or(f.mode.clone()))?;
    let top_k = a.top_k.or(f.top_k).unwrap_or(10);
    let allow_pp = a.allow_pseudo_parent || f.allow_pseudo_parent.unwrap_or(false);
    echo(
        "predict",
        &serde_json::json!({
            "archive": archive, "split": split_path, "checkpoint": ck_path,
            "mode": mode, "top_k": top_k, "allow_pseudo_parent": allow_pp, "query": a.query,
        }),
    );
    let data = load_archive(&archive)?;
    let split = load_split(&split_path)?;
    let model = load_checkpoint(&ck_path)?.model();
    let table = data.embeddings.vectors();
    let cands = CandidateIndex::new(eval::candidates_for(&split.seed_taxonomy, mode, allow_pp));
    for term in &a.query {
        let q = data
            .find(term)
            .ok_or_else(|| Failure::Data(anyhow!("unknown query concept {term:?}")))?;
        let truth = known_truth(&split, q, mode, allow_pp);
        let positions: Vec<_> = cands
            .positions
            .iter()
            .copied()
            .filter(|p| !p.involves(q))
            .collect();
        if positions.is_empty() {
            return Err(Failure::Data(anyhow!(
                "no candidate positions for {term:?}"
            )));
        }
        let scores = model
            .score_positions(table, q, &positions)
            .map_err(|e| Failure::Data(anyhow!(e)))?;
        let ranked = rank_by_score(&positions, &scores);
        println!("query {} ({})", data.term(q), data.external_ids[q.index()]);
        for (i, (p, s)) in ranked.iter().take(top_k).enumerate() {
            let mark = if truth.contains(p) { " *" } else { "" };
            println!(
                "{:>4}. ({}, {})  {:.6}{mark}",
                i + 1,
                eval::endpoint_label(p.parent, &data.terms),
                eval::endpoint_label(p.child, &data.terms),
                s
            );
        }
    }
    Ok(())
}

fn known_truth(
    split: &DatasetSplit,
    q: ConceptId,
    mode: EvalMode,
    allow_pp: bool,
) -> Vec<tmn_core::CandidatePosition> {
    let raw = match split.ground_truth.get(&q) {
        Some(t) => t.clone(),
        None if split.seed_taxonomy.contains(q) => split
            .seed_taxonomy
            .true_positions(q, allow_pp)
            .unwrap_or_default(),
        None => Vec::new(),
    };
    eval::truth_for(mode, &raw)
}

fn cmd_selfcheck(a: SelfcheckArgs) -> Result<(), Failure> {
    let fault = match a.inject_fault.as_deref() {
        Some(s) => Some(OpKind::parse(s).ok_or_else(|| {
            let names: Vec<_> = OpKind::ALL.iter().map(|k| k.name()).collect();
            usage(format!(
                "unknown op {s:?}; expected one of {}",
                names.join(", ")
            ))
        })?),
        None => None,
    };
    echo("selfcheck", &serde_json::json!({ "inject_fault": fault }));
    let report = selfcheck::run(fault);
    for c in &report.checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    println!(
        "worst gradient relative error {:.3e}",
        report.worst_grad_error
    );
    if report.passed() {
        println!("all checks passed");
        Ok(())
    } else {
        let ops: Vec<_> = report.suspect_ops.iter().map(|k| k.name()).collect();
        if !ops.is_empty() {
            println!("suspect op: {}", ops.join(", "));
        }
        Err(Failure::Check(if ops.is_empty() {
            "see FAIL lines above".into()
        } else {
            format!(
                "adjoint of {} disagrees with finite differences",
                ops.join(", ")
            )
        }))
    }
}
