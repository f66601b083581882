//! `voxelgat` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use voxelgat::gat::GatModel;
use voxelgat::phantom::PhantomSpec;
use voxelgat::pipeline::{
    self, discover_cases, CaseFiles, CaseSource, Mode, PipelineConfig, Stage, StageError,
    StageResult, TRAIN_LOG_FILE,
};
use voxelgat::Error;

#[derive(Parser, Debug)]
#[command(name = "voxelgat", version, about = "Supervoxel graph attention segmentation of multi-modal brain volumes")]
struct Cli {
    /// JSON file with a pipeline configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for model initialization and batch shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Single-threaded execution for bit-reproducible results.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic labelled phantoms as .vxg files.
    Phantom(PhantomArgs),
    /// Crop, rescale and z-score cases into a working directory.
    Preprocess(PreprocessArgs),
    /// Supervoxels and region adjacency graphs for preprocessed cases.
    BuildGraph(BuildGraphArgs),
    /// Train a model on the graphs in a working directory.
    Train(TrainArgs),
    /// Predict voxel labels with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predictions against ground truth.
    Evaluate(DirArgs),
    /// Aggregate evaluation reports and optionally export overlays.
    Report(ReportArgs),
    /// Run every stage end to end.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    /// Grid extent per axis (D H W).
    #[arg(long, num_args = 3, value_names = ["D", "H", "W"])]
    shape: Option<Vec<usize>>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    tumors: Option<usize>,
    /// Edema semi-axis range in voxels.
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    radius: Option<Vec<f64>>,
    /// JSON phantom specification; flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// .vxg files or NIfTI case directories.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Default)]
struct SlicArgs {
    /// Target supervoxel count (default scales with the grid size).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    no_connectivity: bool,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    /// Graphs per mini-batch.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    /// Four comma-separated class weights.
    #[arg(long, value_delimiter = ',')]
    class_weights: Option<Vec<f64>>,
    #[arg(long)]
    val_frac: Option<f64>,
    /// Hidden GAT layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Features per head in hidden layers.
    #[arg(long)]
    hidden: Option<usize>,
    /// Attention heads per layer.
    #[arg(long)]
    heads: Option<usize>,
}

#[derive(Args, Debug)]
struct BuildGraphArgs {
    /// Working directory produced by `preprocess`.
    #[arg(long)]
    dir: PathBuf,
    #[command(flatten)]
    slic: SlicArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dir: PathBuf,
    /// Output checkpoint (default DIR/model.gatc).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DirArgs {
    #[arg(long)]
    dir: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    dir: PathBuf,
    /// Write PNG overlays of predictions over FLAIR.
    #[arg(long)]
    overlay: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Training cases (.vxg files or NIfTI case directories).
    #[arg(long = "train", num_args = 1..)]
    train_inputs: Vec<PathBuf>,
    /// Cases to predict and evaluate.
    #[arg(long = "eval", num_args = 1..)]
    eval_inputs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip training and predict with this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    overlay: bool,
    #[command(flatten)]
    slic: SlicArgs,
    #[command(flatten)]
    train: TrainFlags,
}

fn tag(stage: Stage) -> impl Fn(Error) -> StageError {
    move |error| StageError { stage, error }
}

fn base_config(cli: &Cli) -> StageResult<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::from_json_file(p).map_err(tag(Stage::Config))?,
        None => PipelineConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    cfg.deterministic |= cli.deterministic;
    Ok(cfg.seeded())
}

fn apply_slic(cfg: &mut PipelineConfig, a: &SlicArgs) {
    if let Some(k) = a.k {
        cfg.slic.k = k;
        cfg.auto_k = false;
    }
    if let Some(w) = a.omega {
        cfg.slic.omega = w;
    }
    if let Some(m) = a.max_iters {
        cfg.slic.max_iters = m;
    }
    if a.no_connectivity {
        cfg.slic.enforce_connectivity = false;
    }
}

fn apply_train(cfg: &mut PipelineConfig, a: &TrainFlags) {
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch {
        t.graphs_per_batch = v;
    }
    if let Some(v) = a.lr {
        t.base_lr = v;
    }
    if let Some(v) = a.decay {
        t.decay_rate = v;
    }
    if let Some(v) = &a.class_weights {
        t.class_weights = Some(v.clone());
    }
    if let Some(v) = a.val_frac {
        t.val_frac = v;
    }
    let m = &mut cfg.model;
    if let Some(v) = a.layers {
        m.hidden_layers = v;
    }
    if let Some(v) = a.hidden {
        m.hidden_dim = v;
    }
    if let Some(v) = a.heads {
        m.hidden_heads = v;
        m.output_heads = v;
    }
}

fn cases_in(dir: &Path) -> StageResult<Vec<CaseFiles>> {
    let cases = discover_cases(dir).map_err(tag(Stage::Config))?;
    if cases.is_empty() {
        return Err(tag(Stage::Config)(Error::Parameter(format!(
            "no preprocessed cases in {}",
            dir.display()
        ))));
    }
    Ok(cases)
}

fn require_file(path: &Path, what: &str) -> StageResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(tag(Stage::Config)(Error::Parameter(format!(
            "{what} not found: {}",
            path.display()
        ))))
    }
}

fn phantom(cli: &Cli, a: &PhantomArgs) -> StageResult<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| tag(Stage::Config)(Error::Io { path: p.clone(), source: e }))?;
            serde_json::from_str(&text).map_err(|e| tag(Stage::Config)(e.into()))?
        }
        None => PhantomSpec::default(),
    };
    if let Some(c) = a.count {
        spec.count = c;
    }
    if let Some(s) = &a.shape {
        spec.shape = [s[0], s[1], s[2]];
    }
    if let Some(n) = a.noise {
        spec.noise = n;
    }
    if let Some(t) = a.tumors {
        spec.tumors = t;
    }
    if let Some(r) = &a.radius {
        spec.edema_radius = [r[0], r[1]];
    }
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    spec.validate().map_err(tag(Stage::Config))?;
    let paths = spec.write_to(&a.out).map_err(tag(Stage::Preprocess))?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn preprocess(a: &PreprocessArgs) -> StageResult<()> {
    let sources = a
        .inputs
        .iter()
        .map(|p| CaseSource::resolve(p))
        .collect::<Result<Vec<_>, _>>()
        .map_err(tag(Stage::Config))?;
    for s in sources {
        let files = pipeline::preprocess_case(&s, &a.out).map_err(tag(Stage::Preprocess))?;
        println!("{}", files.pre_vxg().display());
    }
    Ok(())
}

fn build_graph(cli: &Cli, a: &BuildGraphArgs) -> StageResult<()> {
    let mut cfg = base_config(cli)?;
    apply_slic(&mut cfg, &a.slic);
    cfg.slic.validate().map_err(tag(Stage::Config))?;
    for files in cases_in(&a.dir)? {
        let (v, _, _) = pipeline::load_preprocessed(&files).map_err(tag(Stage::BuildGraph))?;
        let params = pipeline::slic_params_for(&cfg, v.dims());
        let rag = pipeline::build_graph_case(&files, &params).map_err(tag(Stage::BuildGraph))?;
        println!("{}: {} nodes, {} edges", files.case, rag.n_nodes(), rag.edges().len());
    }
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> StageResult<()> {
    let mut cfg = base_config(cli)?;
    apply_train(&mut cfg, &a.train);
    cfg.train.validate().map_err(tag(Stage::Config))?;
    let rags: Vec<PathBuf> = cases_in(&a.dir)?.iter().map(CaseFiles::rag).collect();
    for r in &rags {
        require_file(r, "graph cache")?;
    }
    let checkpoint = a.checkpoint.clone().unwrap_or_else(|| a.dir.join(pipeline::CHECKPOINT_FILE));
    let log = pipeline::train_stage(&rags, &cfg.model, &cfg.train, &checkpoint, &a.dir.join(TRAIN_LOG_FILE))
        .map_err(tag(Stage::Train))?;
    if let Some(last) = log.records.last() {
        println!("epoch {}: loss {:.5}, f1_wt {:.4}", last.epoch, last.loss, last.f1_wt);
    }
    if let Some(reason) = &log.aborted {
        eprintln!("warning: training aborted: {reason}");
    }
    println!("{}", checkpoint.display());
    Ok(())
}

fn predict(a: &PredictArgs) -> StageResult<()> {
    let checkpoint = a.checkpoint.clone().unwrap_or_else(|| a.dir.join(pipeline::CHECKPOINT_FILE));
    require_file(&checkpoint, "checkpoint")?;
    let cases = cases_in(&a.dir)?;
    let model = GatModel::<f64>::load(&checkpoint).map_err(tag(Stage::Predict))?;
    for files in cases {
        pipeline::predict_case(&files, &model).map_err(tag(Stage::Predict))?;
        println!("{}", files.pred_vxg().display());
    }
    Ok(())
}

fn evaluate(a: &DirArgs) -> StageResult<()> {
    let mut reports = Vec::new();
    for files in cases_in(&a.dir)? {
        if !files.pred_vxg().is_file() || !files.gt_vxg().is_file() {
            continue;
        }
        let r = pipeline::evaluate_case(&files).map_err(tag(Stage::Evaluate))?;
        println!("{}", r.csv_row());
        reports.push(r);
    }
    if reports.is_empty() {
        return Err(tag(Stage::Config)(Error::Parameter(
            "no cases with both predictions and ground truth".into(),
        )));
    }
    Ok(())
}

fn report(a: &ReportArgs) -> StageResult<()> {
    let reports = pipeline::collect_reports(&a.dir).map_err(tag(Stage::Report))?;
    if reports.is_empty() {
        return Err(tag(Stage::Config)(Error::Parameter(format!(
            "no evaluation reports in {}",
            a.dir.display()
        ))));
    }
    pipeline::report_stage(&reports, &a.dir).map_err(tag(Stage::Report))?;
    if a.overlay {
        for files in cases_in(&a.dir)? {
            if files.pred_vxg().is_file() {
                pipeline::overlay_case(&files).map_err(tag(Stage::Report))?;
            }
        }
    }
    let table = std::fs::read_to_string(a.dir.join(pipeline::SUMMARY_FILE))
        .map_err(|e| tag(Stage::Report)(Error::Io { path: a.dir.clone(), source: e }))?;
    print!("{table}");
    Ok(())
}

fn run(cli: &Cli, a: &RunArgs) -> StageResult<()> {
    let mut cfg = base_config(cli)?;
    apply_slic(&mut cfg, &a.slic);
    apply_train(&mut cfg, &a.train);
    if !a.train_inputs.is_empty() {
        cfg.train_inputs = a.train_inputs.clone();
    }
    if !a.eval_inputs.is_empty() {
        cfg.eval_inputs = a.eval_inputs.clone();
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    if let Some(c) = &a.checkpoint {
        cfg.checkpoint = Some(c.clone());
        cfg.mode = Mode::Predict;
    }
    cfg.overlay |= a.overlay;
    let outcome = pipeline::run_pipeline(&cfg)?;
    if let Some(summary) = outcome.summary {
        let mut out = Vec::new();
        summary.write_table(&mut out).expect("writing to a Vec cannot fail");
        print!("{}", String::from_utf8_lossy(&out));
    }
    Ok(())
}

fn configure_threads(deterministic: bool) {
    let cap = std::env::var("VOXELGAT_THREADS").ok().and_then(|v| v.parse::<usize>().ok());
    let threads = if deterministic { Some(1) } else { cap };
    if let Some(n) = threads.filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    configure_threads(cli.deterministic);

    let result = match &cli.command {
        Command::Phantom(a) => phantom(&cli, a),
        Command::Preprocess(a) => preprocess(a),
        Command::BuildGraph(a) => build_graph(&cli, a),
        Command::Train(a) => train(&cli, a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
        Command::Run(a) => run(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
