//! Stage orchestration: preprocess, supervoxels and graphs, training,
//! prediction, evaluation and reporting. Every stage reads and writes files
//! in one working directory so it can be rerun on its own.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gat::{GatConfig, GatModel};
use crate::graph::{build_rag, class_counts, project_to_voxels, write_node_counts_csv, Rag};
use crate::io::{
    modality_path, read_nifti, read_nifti_modalities, write_nifti_labels, VxgFile,
};
use crate::metrics::{aggregate, evaluate, EvalReport, NodeCounts, Summary};
use crate::overlay::write_overlay;
use crate::supervoxel::{remove_outliers, run_slic, SlicParams, SupervoxelLabeling};
use crate::training::{train, TrainConfig, TrainLog};
use crate::volume::{Dims, LabelVolume, Modality, MultiModalVolume, N_MODALITIES};

/// Intensity percentile each channel is divided by before z-scoring.
pub const RESCALE_PERCENTILE: f64 = 99.5;

pub const CHECKPOINT_FILE: &str = "model.gatc";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const EVAL_CSV_FILE: &str = "eval.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_JSON_FILE: &str = "summary.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Config,
    Preprocess,
    BuildGraph,
    Train,
    Predict,
    Evaluate,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Preprocess => "preprocess",
            Stage::BuildGraph => "build-graph",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        })
    }
}

/// A stage-tagged failure.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub error: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl StageError {
    /// 2 for problems with the user's inputs or configuration, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.stage == Stage::Config {
            return 2;
        }
        match &self.error {
            Error::Parameter(_)
            | Error::Format { .. }
            | Error::Json(_)
            | Error::Nifti(_)
            | Error::EmptyBrain
            | Error::DegenerateChannel { .. } => 2,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        }
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

trait Tag<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T> Tag<T> for Result<T> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|error| StageError { stage, error })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Train on `train_inputs`, then predict and evaluate `eval_inputs`.
    #[default]
    Train,
    /// Load `checkpoint` and predict/evaluate `eval_inputs`.
    Predict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Training cases: `.vxg` files or NIfTI case directories.
    pub train_inputs: Vec<PathBuf>,
    /// Cases to predict and evaluate.
    pub eval_inputs: Vec<PathBuf>,
    /// Working directory for every artifact.
    pub out_dir: PathBuf,
    pub slic: SlicParams,
    /// Derive `k` from the grid size instead of `slic.k`.
    pub auto_k: bool,
    pub model: GatConfig,
    pub train: TrainConfig,
    /// Checkpoint to load in predict mode; defaults to `out_dir/model.gatc`.
    pub checkpoint: Option<PathBuf>,
    /// Overrides the model and training seeds when set.
    pub seed: Option<u64>,
    pub overlay: bool,
    /// Run every stage on a single thread.
    pub deterministic: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Train,
            train_inputs: Vec::new(),
            eval_inputs: Vec::new(),
            out_dir: PathBuf::from("out"),
            slic: SlicParams::default(),
            auto_k: true,
            model: GatConfig::default(),
            train: TrainConfig::default(),
            checkpoint: None,
            seed: None,
            overlay: false,
            deterministic: false,
        }
    }
}

impl PipelineConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join(CHECKPOINT_FILE))
    }

    /// Applies the global seed to the model and trainer.
    pub fn seeded(mut self) -> Self {
        if let Some(s) = self.seed {
            self.model.seed = s;
            self.train.seed = s;
        }
        self
    }

    /// Checks every referenced path and parameter before any stage runs.
    pub fn validate(&self) -> StageResult<()> {
        let cfg = |e: Error| StageError {
            stage: Stage::Config,
            error: e,
        };
        self.slic.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        let needs_training = self.mode == Mode::Train;
        if needs_training && self.train_inputs.is_empty() {
            return Err(cfg(Error::Parameter("no training inputs".into())));
        }
        if !needs_training && self.eval_inputs.is_empty() {
            return Err(cfg(Error::Parameter("no inputs to predict".into())));
        }
        for p in self.train_inputs.iter().chain(&self.eval_inputs) {
            CaseSource::resolve(p).map_err(cfg)?;
        }
        if !needs_training {
            let ck = self.checkpoint_path();
            if !ck.is_file() {
                return Err(cfg(Error::Parameter(format!(
                    "checkpoint not found: {}",
                    ck.display()
                ))));
            }
        }
        Ok(())
    }
}

/// Where a case's raw data lives.
#[derive(Clone, Debug, PartialEq)]
pub enum CaseSource {
    Vxg(PathBuf),
    /// Directory holding `{case}_{t1,t1ce,t2,flair}.nii.gz` and optionally
    /// `{case}_seg.nii.gz`.
    Nifti { dir: PathBuf, case: String },
}

impl CaseSource {
    pub fn resolve(path: &Path) -> Result<Self> {
        if path.is_file() {
            return Ok(CaseSource::Vxg(path.to_path_buf()));
        }
        if path.is_dir() {
            let case = path
                .file_name()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Parameter(format!("bad case directory {}", path.display())))?
                .to_string();
            for m in Modality::ALL {
                let p = modality_path(path, &case, m);
                if !p.is_file() {
                    return Err(Error::Parameter(format!("missing modality file {}", p.display())));
                }
            }
            return Ok(CaseSource::Nifti {
                dir: path.to_path_buf(),
                case,
            });
        }
        Err(Error::Parameter(format!("input not found: {}", path.display())))
    }

    pub fn case_name(&self) -> String {
        match self {
            CaseSource::Vxg(p) => p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("case")
                .to_string(),
            CaseSource::Nifti { case, .. } => case.clone(),
        }
    }

    /// Raw volume, optional ground truth and, for NIfTI input, the header.
    pub fn load(&self) -> Result<(MultiModalVolume, Option<LabelVolume>, Option<nifti::NiftiHeader>)> {
        match self {
            CaseSource::Vxg(p) => {
                let f = VxgFile::read(p)?;
                let v = f.volume([1.0; 3])?;
                let l = f.label_volume([1.0; 3])?;
                Ok((v, l, None))
            }
            CaseSource::Nifti { dir, case } => {
                let paths = Modality::ALL.map(|m| modality_path(dir, case, m));
                let (v, header) = read_nifti_modalities(paths.each_ref().map(PathBuf::as_path))?;
                let seg = dir.join(format!("{case}_seg.nii.gz"));
                let l = if seg.is_file() {
                    let n = read_nifti(&seg)?;
                    if n.dims != v.dims() {
                        return Err(Error::Dimension("segmentation grid differs from modalities".into()));
                    }
                    let labels = n.data.iter().map(|&x| x.round().clamp(0.0, 255.0) as u8).collect();
                    Some(LabelVolume::from_brats(n.dims, v.spacing(), labels)?)
                } else {
                    None
                };
                Ok((v, l, Some(header)))
            }
        }
    }
}

/// Geometry needed to map cropped results back onto the source grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessMeta {
    pub case: String,
    pub original_dims: Dims,
    pub cropped_dims: Dims,
    pub offset: [usize; 3],
    pub spacing: [f64; 3],
    pub has_labels: bool,
    /// Source directory for NIfTI cases; predictions are also written as NIfTI.
    pub nifti_source: Option<PathBuf>,
}

/// Paths of one case's artifacts inside the working directory.
#[derive(Clone, Debug)]
pub struct CaseFiles {
    pub case: String,
    dir: PathBuf,
}

impl CaseFiles {
    pub fn new(dir: &Path, case: &str) -> Self {
        Self {
            case: case.to_string(),
            dir: dir.to_path_buf(),
        }
    }

    fn file(&self, ext: &str) -> PathBuf {
        self.dir.join(format!("{}.{ext}", self.case))
    }

    pub fn pre_vxg(&self) -> PathBuf {
        self.file("pre.vxg")
    }
    pub fn pre_json(&self) -> PathBuf {
        self.file("pre.json")
    }
    pub fn gt_vxg(&self) -> PathBuf {
        self.file("gt.vxg")
    }
    pub fn svx(&self) -> PathBuf {
        self.file("svx")
    }
    pub fn rag(&self) -> PathBuf {
        self.file("rag")
    }
    pub fn pred_vxg(&self) -> PathBuf {
        self.file("pred.vxg")
    }
    pub fn pred_nifti(&self) -> PathBuf {
        self.file("pred.nii.gz")
    }
    pub fn nodes_json(&self) -> PathBuf {
        self.file("nodes.json")
    }
    pub fn nodes_csv(&self) -> PathBuf {
        self.file("nodes.csv")
    }
    pub fn eval_json(&self) -> PathBuf {
        self.file("eval.json")
    }
    pub fn overlay_png(&self) -> PathBuf {
        self.file("overlay.png")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    crate::io::write_bytes(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Crop to the brain, rescale by the 99.5th percentile and z-score.
pub fn preprocess_volume(v: &MultiModalVolume) -> Result<(MultiModalVolume, [usize; 3])> {
    let (cropped, offset) = v.crop_to_brain()?;
    let normalized = cropped.rescale_percentile(RESCALE_PERCENTILE)?.znormalize();
    Ok((normalized, offset))
}

/// Writes `{case}.pre.vxg` (four channels, brain mask as a fifth channel,
/// cropped labels), `{case}.pre.json` and, with ground truth, `{case}.gt.vxg`.
pub fn preprocess_case(source: &CaseSource, out_dir: &Path) -> Result<CaseFiles> {
    let case = source.case_name();
    let files = CaseFiles::new(out_dir, &case);
    let (raw, labels, _) = source.load()?;
    let (v, offset) = preprocess_volume(&raw)?;
    let cropped_labels = labels
        .as_ref()
        .map(|l| l.crop(offset, v.dims()))
        .transpose()?;
    let mut vxg = VxgFile::from_volume(&v, cropped_labels.as_ref());
    vxg.channels
        .push(v.mask().iter().map(|&m| if m { 1.0 } else { 0.0 }).collect());
    vxg.write(&files.pre_vxg())?;
    if let Some(l) = &labels {
        VxgFile::from_labels(l).write(&files.gt_vxg())?;
    }
    let meta = PreprocessMeta {
        case,
        original_dims: raw.dims(),
        cropped_dims: v.dims(),
        offset,
        spacing: raw.spacing(),
        has_labels: labels.is_some(),
        nifti_source: match source {
            CaseSource::Nifti { dir, .. } => Some(dir.clone()),
            CaseSource::Vxg(_) => None,
        },
    };
    write_json(&files.pre_json(), &meta)?;
    Ok(files)
}

/// Reads a preprocessed case back: normalized volume with its brain mask
/// and cropped labels.
pub fn load_preprocessed(files: &CaseFiles) -> Result<(MultiModalVolume, Option<LabelVolume>, PreprocessMeta)> {
    let meta: PreprocessMeta = read_json(&files.pre_json())?;
    let mut vxg = VxgFile::read(&files.pre_vxg())?;
    if vxg.channels.len() != N_MODALITIES + 1 {
        return Err(Error::format("VXG1", "preprocessed file must carry a mask channel"));
    }
    let mask = vxg.channels.pop().expect("length checked").iter().map(|&m| m != 0.0).collect();
    let v = vxg.volume_with_mask(meta.spacing, mask)?;
    let labels = vxg
        .labels
        .take()
        .map(|l| LabelVolume::new(vxg.dims, meta.spacing, l))
        .transpose()?;
    Ok((v, labels, meta))
}

/// SLIC parameters for a volume: `slic` as given, or with `k` scaled from
/// the grid size when `auto_k` is set.
pub fn slic_params_for(cfg: &PipelineConfig, dims: Dims) -> SlicParams {
    if cfg.auto_k {
        SlicParams {
            k: SlicParams::scaled_for(dims).k,
            ..cfg.slic.clone()
        }
    } else {
        cfg.slic.clone()
    }
}

/// Runs SLIC and outlier removal and writes `{case}.svx` and `{case}.rag`.
pub fn build_graph_case(files: &CaseFiles, params: &SlicParams) -> Result<Rag> {
    let (v, labels, _) = load_preprocessed(files)?;
    let s = remove_outliers(&run_slic(&v, params)?, &v)?;
    let rag = build_rag(&s, &v, labels.as_ref())?;
    s.save(&files.svx())?;
    rag.save(&files.rag())?;
    Ok(rag)
}

/// Trains on the given graph caches; writes the best checkpoint and the log.
pub fn train_stage(
    rags: &[PathBuf],
    model_cfg: &GatConfig,
    train_cfg: &TrainConfig,
    checkpoint: &Path,
    log_path: &Path,
) -> Result<TrainLog> {
    let data = rags.iter().map(|p| Rag::load(p)).collect::<Result<Vec<_>>>()?;
    let model = GatModel::<f64>::new(model_cfg.clone())?;
    let outcome = train(model, &data, train_cfg)?;
    outcome.best.save(checkpoint)?;
    outcome.log.save_csv(log_path)?;
    if let Some(reason) = &outcome.log.aborted {
        log::warn!("training aborted ({reason}); kept the last good checkpoint");
    }
    Ok(outcome.log)
}

/// Predicts node classes, projects them to voxels and uncrops to the source
/// grid. Writes `{case}.pred.vxg`, node counts and, for NIfTI cases,
/// `{case}.pred.nii.gz`.
pub fn predict_case(files: &CaseFiles, model: &GatModel<f64>) -> Result<LabelVolume> {
    let meta: PreprocessMeta = read_json(&files.pre_json())?;
    let rag = Rag::load(&files.rag())?;
    let s = SupervoxelLabeling::load(&files.svx())?;
    let nodes = model.predict(&rag)?;
    let cropped = project_to_voxels(&s, &nodes, meta.spacing)?;
    let full = cropped.uncrop(meta.offset, meta.original_dims)?;
    VxgFile::from_labels(&full).write(&files.pred_vxg())?;
    let predicted = class_counts(&nodes);
    let label = rag.class_counts().unwrap_or_default();
    write_json(&files.nodes_json(), &NodeCounts { label, predicted })?;
    let mut csv = Vec::new();
    write_node_counts_csv(&mut csv, label, predicted).expect("writing to a Vec cannot fail");
    crate::io::write_bytes(&files.nodes_csv(), &csv)?;
    if let Some(dir) = &meta.nifti_source {
        let reference = read_nifti(&modality_path(dir, &meta.case, Modality::Flair))?.header;
        write_nifti_labels(&files.pred_nifti(), &full, Some(&reference))?;
    }
    Ok(full)
}

fn load_labels(path: &Path, spacing: [f64; 3]) -> Result<LabelVolume> {
    VxgFile::read(path)?
        .label_volume(spacing)?
        .ok_or_else(|| Error::format("VXG1", format!("{} carries no labels", path.display())))
}

/// Compares `{case}.pred.vxg` with `{case}.gt.vxg` and writes `{case}.eval.json`.
pub fn evaluate_case(files: &CaseFiles) -> Result<EvalReport> {
    let meta: PreprocessMeta = read_json(&files.pre_json())?;
    if !meta.has_labels {
        return Err(Error::Parameter(format!("case {} has no ground truth", meta.case)));
    }
    let pred = load_labels(&files.pred_vxg(), meta.spacing)?;
    let gt = load_labels(&files.gt_vxg(), meta.spacing)?;
    let mut report = evaluate(&pred, &gt, meta.spacing)?;
    report.case = meta.case.clone();
    if files.nodes_json().is_file() {
        report.node_counts = Some(read_json(&files.nodes_json())?);
    }
    write_json(&files.eval_json(), &report)?;
    Ok(report)
}

/// Aggregates reports into `eval.csv`, `summary.csv` and `summary.json`.
pub fn report_stage(reports: &[EvalReport], out_dir: &Path) -> Result<Summary> {
    let mut csv = format!("{}\n", EvalReport::CSV_HEADER);
    for r in reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    crate::io::write_bytes(&out_dir.join(EVAL_CSV_FILE), csv.as_bytes())?;
    let summary = aggregate(reports)?;
    let mut table = Vec::new();
    summary.write_table(&mut table).expect("writing to a Vec cannot fail");
    crate::io::write_bytes(&out_dir.join(SUMMARY_FILE), &table)?;
    write_json(&out_dir.join(SUMMARY_JSON_FILE), &summary)?;
    Ok(summary)
}

/// Writes `{case}.overlay.png`: predicted labels over the preprocessed FLAIR.
pub fn overlay_case(files: &CaseFiles) -> Result<()> {
    let (v, _, meta) = load_preprocessed(files)?;
    let pred = load_labels(&files.pred_vxg(), meta.spacing)?.crop(meta.offset, meta.cropped_dims)?;
    write_overlay(&files.overlay_png(), &v, &pred)?;
    Ok(())
}

/// Every `{case}.eval.json` in `dir`, sorted by file name.
pub fn collect_reports(dir: &Path) -> Result<Vec<EvalReport>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_str().is_some_and(|s| s.ends_with(".eval.json")))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_json(p)).collect()
}

/// Cases with a `{case}.pre.json` in `dir`, sorted by name.
pub fn discover_cases(dir: &Path) -> Result<Vec<CaseFiles>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|s| s.strip_suffix(".pre.json")).map(String::from))
        .collect();
    names.sort();
    Ok(names.iter().map(|n| CaseFiles::new(dir, n)).collect())
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub train_log: Option<TrainLog>,
    pub reports: Vec<EvalReport>,
    pub summary: Option<Summary>,
}

/// Runs every stage in order: preprocess, build-graph, train (train mode),
/// predict, evaluate (cases with ground truth) and report.
pub fn run_pipeline(cfg: &PipelineConfig) -> StageResult<PipelineOutcome> {
    let cfg = cfg.clone().seeded();
    cfg.validate()?;
    if cfg.deterministic {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| StageError {
                stage: Stage::Config,
                error: Error::Parameter(e.to_string()),
            })?;
        pool.install(|| run_stages(&cfg))
    } else {
        run_stages(&cfg)
    }
}

fn run_stages(cfg: &PipelineConfig) -> StageResult<PipelineOutcome> {
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)
        .map_err(|e| Error::io(out, e))
        .at(Stage::Config)?;

    let prepare = |inputs: &[PathBuf]| -> StageResult<Vec<CaseFiles>> {
        inputs
            .iter()
            .map(|p| {
                let source = CaseSource::resolve(p).at(Stage::Preprocess)?;
                log::info!("preprocess {}", source.case_name());
                let files = preprocess_case(&source, out).at(Stage::Preprocess)?;
                let (v, _, _) = load_preprocessed(&files).at(Stage::BuildGraph)?;
                let params = slic_params_for(cfg, v.dims());
                log::info!("build-graph {} (k = {})", files.case, params.k);
                build_graph_case(&files, &params).at(Stage::BuildGraph)?;
                Ok(files)
            })
            .collect()
    };
    let train_cases = if cfg.mode == Mode::Train {
        prepare(&cfg.train_inputs)?
    } else {
        Vec::new()
    };
    let eval_cases = prepare(&cfg.eval_inputs)?;

    let checkpoint = cfg.checkpoint_path();
    let train_log = if cfg.mode == Mode::Train {
        let rags: Vec<PathBuf> = train_cases.iter().map(CaseFiles::rag).collect();
        log::info!("train on {} graphs", rags.len());
        Some(
            train_stage(&rags, &cfg.model, &cfg.train, &checkpoint, &out.join(TRAIN_LOG_FILE))
                .at(Stage::Train)?,
        )
    } else {
        None
    };

    let model = GatModel::<f64>::load(&checkpoint).at(Stage::Predict)?;
    let mut reports = Vec::new();
    for files in &eval_cases {
        predict_case(files, &model).at(Stage::Predict)?;
        let meta: PreprocessMeta = read_json(&files.pre_json()).at(Stage::Evaluate)?;
        if meta.has_labels {
            reports.push(evaluate_case(files).at(Stage::Evaluate)?);
        }
        if cfg.overlay {
            overlay_case(files).at(Stage::Report)?;
        }
    }
    let summary = if reports.is_empty() {
        None
    } else {
        Some(report_stage(&reports, out).at(Stage::Report)?)
    };
    Ok(PipelineOutcome {
        train_log,
        reports,
        summary,
    })
}
