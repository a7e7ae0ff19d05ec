//! Command-line front end.
//!
//! Every command first resolves its flags into a serializable [`RunConfig`],
//! writes it next to its outputs and then executes it, so `cmdiff rerun`
//! can replay any earlier invocation.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    detect_edges, replicate_gray_to_rgb, DirectionLabel, EdgeDetector, EdgeMap, ExternalEdge, ImageTensor, ModalityTag,
};
use crate::data_io::{
    generate_synthetic_pairs, list_ids, load_image, load_paired_dataset, resize_image, save_image, write_atomic,
    DatasetManifest, PairedSample, MANIFEST_FILE,
};
use crate::denoiser::{load_checkpoint, DenoiserConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    channel_histograms, fid_from_features, read_features, smoke_features, write_features, HistogramMetric, MetricReport,
    SampleMetrics,
};
use crate::schedule::{PosteriorForm, ScheduleConfig};
use crate::sci::{fit_constraints, translate_batch, Condition, ConstraintSpec, Sampler, DEFAULT_BINS};
use crate::trainer::{run_training, TrainConfig};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const SAMPLER_FILE: &str = "sampler.json";
pub const METRICS_FILE: &str = "metrics.csv";
/// Sidecar naming the modality of a plain directory of input images.
pub const INPUTS_FILE: &str = "inputs.json";
pub const WORKERS_ENV: &str = "CMDIFF_NUM_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "cmdiff", version, about = "Bidirectional infrared/visible translation with guided diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired dataset.
    Synth(SynthArgs),
    /// Fit target-modality constraint priors on a dataset.
    FitConstraints(FitArgs),
    /// Train one bidirectional denoiser.
    Train(TrainArgs),
    /// Translate images with an optional constraint-guided sampler.
    Translate(TranslateArgs),
    /// Score predictions against references.
    Evaluate(EvaluateArgs),
    /// Sweep one sampler setting, translating and evaluating each value.
    Ablate(AblateArgs),
    /// Execute a saved run configuration again.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Test,
    All,
}

impl Split {
    fn ids(self, manifest: &DatasetManifest) -> Vec<String> {
        let mut ids: Vec<String> = match self {
            Split::Train => manifest.train.clone(),
            Split::Test => manifest.test.clone(),
            Split::All => manifest.all_ids().cloned().collect(),
        };
        ids.sort();
        ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Tiny,
    #[default]
    Desk,
    Paper,
}

impl Profile {
    pub fn config(self) -> DenoiserConfig {
        match self {
            Profile::Tiny => DenoiserConfig::tiny(),
            Profile::Desk => DenoiserConfig::desk(),
            Profile::Paper => DenoiserConfig::paper(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SweepKey {
    Lambda,
    Metric,
    Edges,
}

impl SweepKey {
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepKey::Lambda => &["0", "10", "20", "40", "60"],
            SweepKey::Metric => &["chi2", "euclidean", "bhattacharyya"],
            SweepKey::Edges => &["sobel", "canny", "external"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepKey::Lambda => "lambda",
            SweepKey::Metric => "metric",
            SweepKey::Edges => "edges",
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace the dataset folders of an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub modality: ModalityTag,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, value_enum, default_value_t = Split::Train)]
    pub split: Split,
    /// Output JSON file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// A saved train run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub edges: Option<EdgeDetector>,
    #[arg(long)]
    pub disable_tdg: bool,
    #[arg(long)]
    pub disable_cfc: bool,
    /// Continue from a checkpoint directory written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub direction: DirectionLabel,
    /// Constraint priors; without them sampling is unguided.
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    #[arg(long)]
    pub lambda_ccl: Option<f64>,
    #[arg(long)]
    pub lambda_scl: Option<f64>,
    #[arg(long)]
    pub metric: Option<HistogramMetric>,
    #[arg(long)]
    pub guidance_scale: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset root, or a directory of PNGs with an `inputs.json` sidecar.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long, default_value_t = EdgeDetector::Sobel)]
    pub edges: EdgeDetector,
    /// Translate at most this many inputs.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of predicted PNGs.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of reference PNGs with matching names.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub features_a: Option<PathBuf>,
    #[arg(long)]
    pub features_b: Option<PathBuf>,
    /// Constraint priors whose histograms join the histogram tables.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub sweep: SweepKey,
    /// Comma-separated values; defaults to the standard grid of the sweep.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    #[arg(long)]
    pub base_config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    pub config: PathBuf,
    /// Output location replacing the saved one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRun {
    pub count: usize,
    pub resolution: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRun {
    pub data: PathBuf,
    pub modality: ModalityTag,
    pub bins: usize,
    pub split: Split,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub data: PathBuf,
    pub out: PathBuf,
    pub edges: EdgeDetector,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslateRun {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub split: Split,
    pub direction: DirectionLabel,
    pub constraints: Option<PathBuf>,
    pub lambda_ccl: Option<f64>,
    pub lambda_scl: Option<f64>,
    pub metric: Option<HistogramMetric>,
    pub guidance_scale: Option<f64>,
    pub seed: u64,
    pub edges: EdgeDetector,
    pub limit: Option<usize>,
    pub batch: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateRun {
    pub pred: PathBuf,
    pub truth: PathBuf,
    pub features_a: Option<PathBuf>,
    pub features_b: Option<PathBuf>,
    pub prior: Option<PathBuf>,
    pub bins: usize,
    pub out: PathBuf,
}

/// Shared settings of an ablation sweep, read from `--base-config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateBase {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub direction: DirectionLabel,
    pub constraints: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub edges: EdgeDetector,
    #[serde(default)]
    pub metric: HistogramMetric,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
}

fn default_lambda() -> f64 {
    crate::sci::DEFAULT_LAMBDA
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

fn default_batch() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateRun {
    pub sweep: SweepKey,
    pub values: Vec<String>,
    pub base: AblateBase,
    pub out: PathBuf,
}

/// Fully resolved invocation of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    Synth(SynthRun),
    FitConstraints(FitRun),
    Train(TrainRun),
    Translate(TranslateRun),
    Evaluate(EvaluateRun),
    Ablate(AblateRun),
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Replaces the output location.
    pub fn with_out(mut self, out: PathBuf) -> Self {
        match &mut self {
            RunConfig::Synth(r) => r.out = out,
            RunConfig::FitConstraints(r) => r.out = out,
            RunConfig::Train(r) => r.out = out,
            RunConfig::Translate(r) => r.out = out,
            RunConfig::Evaluate(r) => r.out = out,
            RunConfig::Ablate(r) => r.out = out,
        }
        self
    }

    /// Where the configuration itself is saved.
    pub fn config_path(&self) -> PathBuf {
        match self {
            RunConfig::FitConstraints(r) => {
                let stem = r.out.file_stem().and_then(|s| s.to_str()).unwrap_or("constraints");
                r.out.with_file_name(format!("{stem}.{RUN_CONFIG_FILE}"))
            }
            RunConfig::Synth(SynthRun { out, .. })
            | RunConfig::Train(TrainRun { out, .. })
            | RunConfig::Translate(TranslateRun { out, .. })
            | RunConfig::Evaluate(EvaluateRun { out, .. })
            | RunConfig::Ablate(AblateRun { out, .. }) => out.join(RUN_CONFIG_FILE),
        }
    }

    fn save(&self) -> Result<()> {
        let path = self.config_path();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    /// Saves the configuration and runs it.
    pub fn execute(&self) -> Result<()> {
        match self {
            RunConfig::Synth(r) => {
                // Refuse before anything is written into the directory.
                prepare_synth_dir(r)?;
                self.save()?;
                run_synth(r)
            }
            RunConfig::FitConstraints(r) => {
                self.save()?;
                run_fit(r).map(|_| ())
            }
            RunConfig::Train(r) => {
                self.save()?;
                run_train(r)
            }
            RunConfig::Translate(r) => {
                self.save()?;
                run_translate(r).map(|_| ())
            }
            RunConfig::Evaluate(r) => {
                self.save()?;
                run_evaluate(r).map(|_| ())
            }
            RunConfig::Ablate(r) => {
                self.save()?;
                run_ablate(r).map(|_| ())
            }
        }
    }
}

impl Command {
    /// Resolves flags, defaults and `--config` files into a run configuration.
    pub fn resolve(self) -> Result<RunConfig> {
        Ok(match self {
            Command::Synth(a) => RunConfig::Synth(SynthRun {
                count: a.count,
                resolution: a.resolution,
                seed: a.seed,
                out: a.out,
                force: a.force,
            }),
            Command::FitConstraints(a) => RunConfig::FitConstraints(FitRun {
                data: a.data,
                modality: a.modality,
                bins: a.bins,
                split: a.split,
                out: a.out,
            }),
            Command::Train(a) => RunConfig::Train(resolve_train(a)?),
            Command::Translate(a) => RunConfig::Translate(TranslateRun {
                checkpoint: a.checkpoint,
                input: a.input,
                split: a.split,
                direction: a.direction,
                constraints: a.constraints,
                lambda_ccl: a.lambda_ccl,
                lambda_scl: a.lambda_scl,
                metric: a.metric,
                guidance_scale: a.guidance_scale,
                seed: a.seed,
                edges: a.edges,
                limit: a.limit,
                batch: a.batch,
                out: a.out,
            }),
            Command::Evaluate(a) => RunConfig::Evaluate(EvaluateRun {
                pred: a.pred,
                truth: a.truth,
                features_a: a.features_a,
                features_b: a.features_b,
                prior: a.prior,
                bins: a.bins,
                out: a.out,
            }),
            Command::Ablate(a) => {
                let text = fs::read_to_string(&a.base_config).map_err(|e| Error::io(&a.base_config, e))?;
                let base: AblateBase = serde_json::from_str(&text)?;
                let values = if a.values.is_empty() { a.sweep.default_values() } else { a.values };
                RunConfig::Ablate(AblateRun {
                    sweep: a.sweep,
                    values,
                    base,
                    out: a.out,
                })
            }
            Command::Rerun(a) => {
                let cfg = RunConfig::read(&a.config)?;
                match a.out {
                    Some(out) => cfg.with_out(out),
                    None => cfg,
                }
            }
        })
    }
}

/// Parses `args`, resolves and executes the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Argument(e.to_string()))?;
    cli.command.resolve()?.execute()
}

fn resolve_train(a: TrainArgs) -> Result<TrainRun> {
    let mut run = match &a.config {
        Some(path) => match RunConfig::read(path) {
            Ok(RunConfig::Train(r)) => r,
            Ok(_) => return Err(Error::Config(format!("{} is not a train configuration", path.display()))),
            Err(_) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text)?
            }
        },
        None => {
            let data = a.data.clone().ok_or_else(|| Error::Argument("train needs --data or --config".into()))?;
            let out = a.out.clone().ok_or_else(|| Error::Argument("train needs --out or --config".into()))?;
            TrainRun {
                data,
                out,
                edges: EdgeDetector::Sobel,
                denoiser: Profile::Desk.config(),
                schedule: ScheduleConfig::desk(),
                train: TrainConfig::default(),
                resume: None,
            }
        }
    };
    if let Some(p) = a.profile {
        run.denoiser = p.config();
    }
    if let Some(d) = a.data {
        run.data = d;
    }
    if let Some(o) = a.out {
        run.out = o;
    }
    if let Some(e) = a.edges {
        run.edges = e;
    }
    if let Some(r) = a.resume {
        run.resume = Some(r);
    }
    let t = &mut run.train;
    if let Some(v) = a.iters {
        t.total_iters = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    t.disable_tdg |= a.disable_tdg;
    t.disable_cfc |= a.disable_cfc;
    run.denoiser = run.train.apply_flags(&run.denoiser);
    Ok(run)
}

const SYNTH_ENTRIES: [&str; 5] = ["ir", "vis", "edges_ir", "edges_vis", MANIFEST_FILE];

fn prepare_synth_dir(r: &SynthRun) -> Result<()> {
    let non_empty = fs::read_dir(&r.out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if !non_empty {
        return Ok(());
    }
    if !r.force {
        return Err(Error::Argument(format!(
            "{} exists and is not empty; pass --force to replace the dataset in it",
            r.out.display()
        )));
    }
    for name in SYNTH_ENTRIES {
        let p = r.out.join(name);
        if p.is_dir() {
            fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        } else if p.is_file() {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

fn run_synth(r: &SynthRun) -> Result<()> {
    let manifest = generate_synthetic_pairs(r.count, r.resolution, r.seed, &r.out)?;
    log::info!(
        "wrote {} pairs ({} train, {} test) to {}",
        manifest.len(),
        manifest.train.len(),
        manifest.test.len(),
        r.out.display()
    );
    Ok(())
}

fn run_fit(r: &FitRun) -> Result<ConstraintSpec> {
    let manifest = DatasetManifest::read(&r.data)?;
    let ds = load_paired_dataset(&r.data, manifest.resolution, EdgeDetector::Sobel)?;
    let ids = r.split.ids(&ds.manifest);
    let mut images = Vec::with_capacity(ids.len());
    for id in &ids {
        images.push(ds.load_sample(id)?.image(r.modality).clone());
    }
    let spec = fit_constraints(&images, r.modality, r.bins)?;
    spec.write(&r.out)?;
    log::info!(
        "fitted {} priors on {} images: mean {:?}, std {:?}",
        r.modality,
        images.len(),
        spec.prior_mean,
        spec.prior_std
    );
    Ok(spec)
}

fn run_train(r: &TrainRun) -> Result<()> {
    let ds = load_paired_dataset(&r.data, r.denoiser.image_size, r.edges)?;
    let train: Vec<PairedSample> = ds.load_split(false)?;
    let summary = run_training(&train, &r.denoiser, &r.schedule, &r.train, &r.out, r.resume.as_deref())?;
    if let Some(last) = summary.epochs.last() {
        log::info!(
            "finished at iteration {}: ir-to-vis {:.5}, vis-to-ir {:.5}",
            last.iteration,
            last.loss_ir_to_vis,
            last.loss_vis_to_ir
        );
    }
    log::info!("checkpoint written to {}", summary.final_checkpoint.display());
    Ok(())
}

/// Modality sidecar of a plain input directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputsManifest {
    pub modality: ModalityTag,
}

/// One source image to translate.
#[derive(Debug, Clone)]
pub struct SourceItem {
    pub id: String,
    pub condition: Condition,
}

fn to_rgb(img: ImageTensor) -> Result<ImageTensor> {
    if img.channels() == 1 {
        replicate_gray_to_rgb(&img)
    } else {
        Ok(img)
    }
}

/// Loads translation inputs for `direction` at `size x size`.
pub fn load_sources(
    input: &Path,
    split: Split,
    direction: DirectionLabel,
    edges: EdgeDetector,
    size: usize,
) -> Result<Vec<SourceItem>> {
    let src = direction.source_modality();
    if input.join(MANIFEST_FILE).is_file() {
        let ds = load_paired_dataset(input, size, edges)?;
        return split
            .ids(&ds.manifest)
            .into_iter()
            .map(|id| {
                let s = ds.load_sample(&id)?;
                Ok(SourceItem {
                    condition: Condition {
                        source: s.image(src).clone(),
                        edges: Some(s.edges(src).clone()),
                    },
                    id,
                })
            })
            .collect();
    }
    let sidecar = input.join(INPUTS_FILE);
    let text = fs::read_to_string(&sidecar).map_err(|_| {
        Error::Ingestion(format!(
            "{} has neither {MANIFEST_FILE} nor {INPUTS_FILE}",
            input.display()
        ))
    })?;
    let tag: InputsManifest = serde_json::from_str(&text)?;
    if tag.modality != src {
        return Err(Error::Argument(format!(
            "inputs in {} are {} images but {direction} needs {src} sources",
            input.display(),
            tag.modality
        )));
    }
    list_ids(input)?
        .into_iter()
        .map(|id| {
            let img = to_rgb(resize_image(&load_image(&input.join(format!("{id}.png")))?, size, size))?;
            let path = input.join(format!("edges_{}", src.dir_name())).join(format!("{id}.png"));
            let e: EdgeMap = detect_edges(&img, edges, Some(ExternalEdge { sample_id: &id, path: &path }))?;
            Ok(SourceItem {
                condition: Condition {
                    source: img,
                    edges: Some(e),
                },
                id,
            })
        })
        .collect()
}

/// Worker count from `CMDIFF_NUM_WORKERS`, else the available cores.
pub fn num_workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Settings actually used by the sampler, written beside translated images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub checkpoint: PathBuf,
    pub direction: DirectionLabel,
    pub source_modality: ModalityTag,
    pub seed: u64,
    pub steps: usize,
    pub posterior_form: PosteriorForm,
    pub edges: EdgeDetector,
    /// Effective constraints; `None` for unguided sampling.
    pub constraints: Option<ConstraintSpec>,
    pub ids: Vec<String>,
}

fn effective_constraints(r: &TranslateRun) -> Result<Option<ConstraintSpec>> {
    let Some(path) = &r.constraints else {
        if r.lambda_ccl.is_some_and(|v| v != 0.0) || r.lambda_scl.is_some_and(|v| v != 0.0) {
            return Err(Error::Argument("non-zero constraint weights need --constraints".into()));
        }
        return Ok(None);
    };
    let mut spec = ConstraintSpec::read(path)?;
    if let Some(v) = r.lambda_ccl {
        spec.lambda_ccl = v;
    }
    if let Some(v) = r.lambda_scl {
        spec.lambda_scl = v;
    }
    if let Some(m) = r.metric {
        spec.metric = m;
    }
    if let Some(s) = r.guidance_scale {
        spec.guidance_scale = s;
    }
    spec.validate()?;
    Ok(Some(spec))
}

fn run_translate(r: &TranslateRun) -> Result<SamplerSettings> {
    if r.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let constraints = effective_constraints(r)?;
    let (model, manifest) = load_checkpoint(&r.checkpoint)?;
    let schedule = manifest.schedule.build()?;
    let mut items = load_sources(&r.input, r.split, r.direction, r.edges, manifest.denoiser.image_size)?;
    if let Some(n) = r.limit {
        items.truncate(n);
    }
    if items.is_empty() {
        return Err(Error::Ingestion(format!("no inputs found in {}", r.input.display())));
    }
    fs::create_dir_all(&r.out).map_err(|e| Error::io(&r.out, e))?;

    let sampler = Sampler::new(&model, &schedule).with_constraints(constraints.as_ref());
    let src = r.direction.source_modality();
    let chunks: Vec<(usize, &[SourceItem])> = items.chunks(r.batch).enumerate().map(|(k, c)| (k * r.batch, c)).collect();
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let workers = num_workers().min(chunks.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(offset, chunk)) = chunks.get(k) else { break };
                if failure.lock().expect("lock").is_some() {
                    break;
                }
                let conds: Vec<Condition> = chunk.iter().map(|i| i.condition.clone()).collect();
                let result = translate_batch(&sampler, &conds, r.direction, src, r.seed, offset as u64).and_then(|outs| {
                    for (item, img) in chunk.iter().zip(&outs) {
                        save_image(img, &r.out.join(format!("{}.png", item.id)))?;
                    }
                    Ok(())
                });
                if let Err(e) = result {
                    failure.lock().expect("lock").get_or_insert(e);
                    break;
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("lock") {
        return Err(e);
    }
    let settings = SamplerSettings {
        checkpoint: r.checkpoint.clone(),
        direction: r.direction,
        source_modality: src,
        seed: r.seed,
        steps: schedule.steps(),
        posterior_form: sampler.posterior_form,
        edges: r.edges,
        constraints,
        ids: items.iter().map(|i| i.id.clone()).collect(),
    };
    write_atomic(&r.out.join(SAMPLER_FILE), serde_json::to_string_pretty(&settings)?.as_bytes())?;
    log::info!("translated {} images into {}", items.len(), r.out.display());
    Ok(settings)
}

const CHANNEL_NAMES: [&str; 3] = ["r", "g", "b"];

/// Outcome of an evaluation: the metric report and pooled histograms.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub pred_hist: Vec<Vec<f64>>,
    pub truth_hist: Vec<Vec<f64>>,
}

fn pooled(hists: &mut Vec<Vec<f64>>, add: Vec<Vec<f64>>) {
    if hists.is_empty() {
        *hists = add;
    } else {
        for (h, a) in hists.iter_mut().zip(add) {
            h.iter_mut().zip(a).for_each(|(x, y)| *x += y);
        }
    }
}

fn normalized(mut hists: Vec<Vec<f64>>, n: usize) -> Vec<Vec<f64>> {
    hists.iter_mut().flatten().for_each(|v| *v /= n as f64);
    hists
}

fn run_evaluate(r: &EvaluateRun) -> Result<Evaluation> {
    let pred_ids = list_ids(&r.pred)?;
    let truth_ids = list_ids(&r.truth)?;
    let missing: Vec<&String> = pred_ids.iter().filter(|id| !truth_ids.contains(*id)).collect();
    if !missing.is_empty() {
        let listed: Vec<&str> = missing.iter().map(|s| s.as_str()).collect();
        return Err(Error::Ingestion(format!(
            "predictions without a reference in {}: {}",
            r.truth.display(),
            listed.join(", ")
        )));
    }
    if pred_ids.is_empty() {
        return Err(Error::Ingestion(format!("no predictions in {}", r.pred.display())));
    }
    let prior = r.prior.as_deref().map(ConstraintSpec::read).transpose()?;
    if let Some(p) = &prior {
        if p.bins != r.bins {
            return Err(Error::Config(format!("prior has {} bins, evaluation uses {}", p.bins, r.bins)));
        }
    }

    let mut samples = Vec::new();
    let (mut pred_hist, mut truth_hist) = (Vec::new(), Vec::new());
    for id in &pred_ids {
        let pred = to_rgb(load_image(&r.pred.join(format!("{id}.png")))?)?;
        let truth = to_rgb(load_image(&r.truth.join(format!("{id}.png")))?)?;
        let truth = if truth.same_size(pred.height(), pred.width()) {
            truth
        } else {
            resize_image(&truth, pred.height(), pred.width())
        };
        samples.push(SampleMetrics::compute(id, &pred, &truth, r.bins)?);
        pooled(&mut pred_hist, channel_histograms(&pred, r.bins));
        pooled(&mut truth_hist, channel_histograms(&truth, r.bins));
    }
    let n = pred_ids.len();
    let (pred_hist, truth_hist) = (normalized(pred_hist, n), normalized(truth_hist, n));

    let fid = match (&r.features_a, &r.features_b) {
        (Some(a), Some(b)) => Some(fid_from_features(&read_features(a)?, &read_features(b)?)?),
        (None, None) => None,
        _ => return Err(Error::Argument("FID needs both --features-a and --features-b".into())),
    };
    let report = MetricReport { samples, fid };
    fs::create_dir_all(&r.out).map_err(|e| Error::io(&r.out, e))?;
    report.write_csv(&r.out.join(METRICS_FILE))?;

    for (c, name) in CHANNEL_NAMES.iter().enumerate() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bin", "lower", "upper", "pred", "truth", "prior"])?;
        for i in 0..r.bins {
            let b = r.bins as f64;
            w.write_record([
                i.to_string(),
                format!("{:.6}", i as f64 / b),
                format!("{:.6}", (i + 1) as f64 / b),
                format!("{:.8}", pred_hist[c][i]),
                format!("{:.8}", truth_hist[c][i]),
                prior.as_ref().map(|p| format!("{:.8}", p.prior_hist[c][i])).unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        write_atomic(&r.out.join(format!("histogram_{name}.csv")), &bytes)?;
    }
    let (psnr, _) = report.mean_psnr();
    log::info!("evaluated {n} images: psnr {psnr:.3} dB, ssim {:.4}", report.mean_ssim());
    Ok(Evaluation {
        report,
        pred_hist,
        truth_hist,
    })
}

/// One row of an ablation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub count: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub hist_chi2: f64,
    pub hist_euclidean: f64,
    pub hist_bhattacharyya: f64,
    /// FID over the smoke-test features; not comparable with Inception FID.
    pub fid_smoke: f64,
}

pub fn ablation_file(sweep: SweepKey) -> String {
    format!("ablation_{}.csv", sweep.name())
}

fn smoke_feature_file(dir: &Path, ids: &[String], out: &Path) -> Result<()> {
    let mut feats = Vec::with_capacity(ids.len());
    for id in ids {
        feats.push(smoke_features(&load_image(&dir.join(format!("{id}.png")))?));
    }
    write_features(out, &feats)
}

fn run_ablate(r: &AblateRun) -> Result<Vec<AblationRow>> {
    let b = &r.base;
    if r.values.is_empty() {
        return Err(Error::Argument("ablation needs at least one value".into()));
    }
    if matches!(r.sweep, SweepKey::Lambda | SweepKey::Metric) && b.constraints.is_none() {
        return Err(Error::Config(format!("a {} sweep needs constraints in the base config", r.sweep.name())));
    }
    let truth = b.data.join(b.direction.target_modality().dir_name());
    let mut rows = Vec::new();
    for value in &r.values {
        let mut t = TranslateRun {
            checkpoint: b.checkpoint.clone(),
            input: b.data.clone(),
            split: b.split,
            direction: b.direction,
            constraints: b.constraints.clone(),
            lambda_ccl: Some(b.lambda),
            lambda_scl: Some(b.lambda),
            metric: Some(b.metric),
            guidance_scale: None,
            seed: b.seed,
            edges: b.edges,
            limit: b.limit,
            batch: b.batch,
            out: PathBuf::new(),
        };
        match r.sweep {
            SweepKey::Lambda => {
                let v: f64 = value
                    .parse()
                    .map_err(|_| Error::Argument(format!("lambda value {value:?} is not a number")))?;
                t.lambda_ccl = Some(v);
                t.lambda_scl = Some(v);
            }
            SweepKey::Metric => t.metric = Some(value.parse()?),
            SweepKey::Edges => t.edges = value.parse()?,
        }
        let dir = r.out.join(format!("{}_{value}", r.sweep.name()));
        t.out = dir.join("pred");
        let settings = run_translate(&t)?;
        let (fa, fb) = (dir.join("features_pred.csv"), dir.join("features_truth.csv"));
        smoke_feature_file(&t.out, &settings.ids, &fa)?;
        smoke_feature_file(&truth, &settings.ids, &fb)?;
        let eval = run_evaluate(&EvaluateRun {
            pred: t.out.clone(),
            truth: truth.clone(),
            features_a: Some(fa),
            features_b: Some(fb),
            prior: None,
            bins: b.bins,
            out: dir.clone(),
        })?;
        let rep = &eval.report;
        rows.push(AblationRow {
            setting: value.clone(),
            count: rep.count(),
            psnr_db: rep.mean_psnr().0,
            ssim: rep.mean_ssim(),
            hist_chi2: rep.mean_hist(HistogramMetric::Chi2),
            hist_euclidean: rep.mean_hist(HistogramMetric::Euclidean),
            hist_bhattacharyya: rep.mean_hist(HistogramMetric::Bhattacharyya),
            fid_smoke: rep.fid.unwrap_or(f64::NAN),
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    write_atomic(&r.out.join(ablation_file(r.sweep)), &bytes)?;
    Ok(rows)
}

/// Reads an ablation summary CSV.
pub fn read_ablation(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
