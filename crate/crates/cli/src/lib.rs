//! Command-line workflows over `midpose-core`: synthetic data, D-mask
//! rendering, two-stage training, evaluation reports, pose labeling and the
//! low-data sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand, ValueEnum};
use midpose_core::binning::BinSpec;
use midpose_core::datasets::{
    load_mesh, make_split, subsample_fraction, synth_generate, Dataset, Split, SynthConfig,
};
use midpose_core::labeler::{export_labels, label_scene, load_manifest};
use midpose_core::posenet::{
    evaluate, prepare_samples, top_k_candidates, train_stage1, train_stage2, CandidateSet, DmaskLibrary, EvalReport,
    Fusion, ModelBundle, PreparedSample, Retrieval, Stage1Net, Stage2Net, TwoStagePredictor, FUSED_SIZE, TOP_K,
};
use midpose_core::silhouette::{default_intrinsics, generate_dmasks, MASK_SIZE};
use midpose_core::tensorkit::{Mode, TrainConfig};
use serde::Deserialize;
use thiserror::Error;

pub const LOWDATA_FRACTIONS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.csv";
pub const LOWDATA_FILE: &str = "lowdata.csv";
pub const LOG_FILE: &str = "run.log";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configuration or missing inputs; exit code 2.
    #[error("config: {0}")]
    Config(String),
    /// Failure while doing the work; exit code 1.
    #[error("{0:#}")]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "midpose", version, about = "Two-stage object pose classification over mid-level features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration (data, split, training).
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory; overrides `out` in the configuration.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (annotations, meshes, masks, features).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Render the 45-view D-mask set of every mesh referenced by the dataset.
    RenderDmasks {
        #[command(flatten)]
        common: Common,
    },
    /// Train stage 1 from scratch or stage 2 on top of a stage-1 checkpoint.
    Train {
        #[arg(value_enum)]
        stage: Stage,
        #[command(flatten)]
        common: Common,
        /// Stage-1 checkpoint to extend (required for stage2).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Train on this stratified fraction of the training split.
        #[arg(long, value_name = "F")]
        fraction: Option<f64>,
    },
    /// Evaluate a checkpoint and write report.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Label object poses in an RGB-D scene manifest.
    Label {
        #[command(flatten)]
        common: Common,
    },
    /// Retrain stage 1 on 25/50/75/100% of the training split and write lowdata.csv.
    Lowdata {
        #[command(flatten)]
        common: Common,
        /// Also write lowdata.svg with the accuracy curve.
        #[arg(long)]
        emit_plot: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::RenderDmasks { common }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Label { common }
            | Command::Lowdata { common, .. } => common,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSplit {
    #[default]
    Test,
    All,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalMode {
    #[default]
    TemplateMatch,
    GroundTruth,
}

/// JSON run configuration. Relative paths resolve against the config file's
/// directory.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    /// D-mask root with one directory per mesh; defaults to `<dataset>/dmasks`.
    pub dmasks: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub synth: SynthConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub az_bins: usize,
    pub el_bins: usize,
    pub train_fraction: f64,
    /// Share of the training split held out for early stopping; 0 disables.
    pub val_fraction: f64,
    pub split_seed: u64,
    pub fusion_seed: u64,
    pub eval_split: EvalSplit,
    pub retrieval: RetrievalMode,
    pub min_visible_corners: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            dmasks: None,
            scene: None,
            out: None,
            synth: SynthConfig::default(),
            stage1: TrainConfig::default(),
            stage2: TrainConfig::default(),
            az_bins: 9,
            el_bins: 5,
            train_fraction: 0.8,
            val_fraction: 0.0,
            split_seed: 0,
            fusion_seed: 0,
            eval_split: EvalSplit::Test,
            retrieval: RetrievalMode::TemplateMatch,
            min_visible_corners: 6,
        }
    }
}

impl RunConfig {
    /// Reads `path`, or defaults without one, then applies flag overrides,
    /// resolves paths and validates.
    pub fn load(path: Option<&Path>, common: &Common) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
                let mut cfg: RunConfig =
                    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
                let base = p.parent().unwrap_or(Path::new(""));
                for slot in [&mut cfg.dataset, &mut cfg.dmasks, &mut cfg.scene, &mut cfg.out] {
                    if let Some(v) = slot.as_mut() {
                        if v.is_relative() {
                            *v = base.join(&*v);
                        }
                    }
                }
                cfg
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.synth.seed = seed;
            cfg.stage1.seed = seed;
            cfg.stage2.seed = seed;
            cfg.split_seed = seed;
        }
        if let Some(out) = &common.out {
            cfg.out = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.validate().map_err(|e| config_err(format!("synth: {e}")))?;
        self.stage1.validate().map_err(|e| config_err(format!("stage1: {e}")))?;
        self.stage2.validate().map_err(|e| config_err(format!("stage2: {e}")))?;
        self.bins()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(config_err(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(config_err(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        if self.min_visible_corners < 6 || self.min_visible_corners > 8 {
            return Err(config_err(format!(
                "min_visible_corners must lie in [6, 8], got {}",
                self.min_visible_corners
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> Result<(BinSpec, BinSpec), CliError> {
        let az = BinSpec::azimuth(self.az_bins).map_err(|e| config_err(format!("az_bins: {e}")))?;
        let el = BinSpec::elevation(self.el_bins).map_err(|e| config_err(format!("el_bins: {e}")))?;
        Ok((az, el))
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| config_err("no output directory (set --out or `out`)"))
    }

    fn existing(&self, slot: &Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
        let p = slot.as_ref().ok_or_else(|| config_err(format!("`{key}` is required for this command")))?;
        if !p.exists() {
            return Err(config_err(format!("{key} {} does not exist", p.display())));
        }
        Ok(p.clone())
    }

    pub fn dataset_dir(&self) -> Result<PathBuf, CliError> {
        self.existing(&self.dataset, "dataset")
    }

    pub fn dmask_dir(&self) -> Result<PathBuf, CliError> {
        match &self.dmasks {
            Some(_) => self.existing(&self.dmasks, "dmasks"),
            None => {
                let d = self.dataset_dir()?.join("dmasks");
                self.existing(&Some(d), "dmasks")
            }
        }
    }
}

/// Buffers log records with wall-clock stamps so they can be written to
/// `run.log` once the output directory is settled. Warnings and errors also
/// go to stderr.
pub struct RunLogger {
    lines: Mutex<Vec<String>>,
}

impl RunLogger {
    pub const fn new() -> Self {
        Self {
            lines: Mutex::new(Vec::new()),
        }
    }

    pub fn take(&self) -> Vec<String> {
        std::mem::take(&mut *self.lines.lock().expect("log lock"))
    }
}

impl Default for RunLogger {
    fn default() -> Self {
        Self::new()
    }
}

impl log::Log for RunLogger {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= log::Level::Info
    }

    fn log(&self, r: &log::Record) {
        if !self.enabled(r.metadata()) {
            return;
        }
        let t = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        let line = format!("[{}.{:03} {:5}] {}", t.as_secs(), t.subsec_millis(), r.level(), r.args());
        if r.level() <= log::Level::Warn {
            eprintln!("midpose: {}", r.args());
        }
        self.lines.lock().expect("log lock").push(line);
    }

    fn flush(&self) {}
}

/// Appends buffered log lines to `<out>/run.log` when the directory exists.
pub fn write_run_log(out: &Path, lines: &[String]) -> std::io::Result<()> {
    use std::io::Write as _;
    if !out.is_dir() {
        return Ok(());
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(out.join(LOG_FILE))?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

/// Caps rayon's worker count from `POSE_THREADS` when set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("POSE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config_err(format!("POSE_THREADS must be a positive integer, got {v:?}")))?;
    // A second call in the same process finds the pool built; that is fine.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs one parsed command.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let common = cli.command.common();
    let cfg = RunConfig::load(common.config.as_deref(), common)?;
    match &cli.command {
        Command::Synth { .. } => cmd_synth(&cfg),
        Command::RenderDmasks { .. } => cmd_render_dmasks(&cfg),
        Command::Train {
            stage,
            checkpoint,
            fraction,
            ..
        } => cmd_train(&cfg, *stage, checkpoint.as_deref(), *fraction),
        Command::Eval { checkpoint, .. } => cmd_eval(&cfg, checkpoint),
        Command::Label { .. } => cmd_label(&cfg),
        Command::Lowdata { emit_plot, .. } => cmd_lowdata(&cfg, *emit_plot),
    }
}

fn create_out(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg.out_dir()?.to_path_buf();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.out_dir()?;
    let mut synth = cfg.synth.clone();
    synth.az_bins = cfg.az_bins;
    synth.el_bins = cfg.el_bins;
    synth.validate().map_err(|e| config_err(format!("synth: {e}")))?;
    let s = synth_generate(&synth, out).with_context(|| format!("generating {}", out.display()))?;
    log::info!(
        "synth: {} samples, {} meshes, seed {} -> {}",
        s.annotations.len(),
        s.meshes.len(),
        synth.seed,
        out.display()
    );
    Ok(())
}

/// Mesh id to category for every annotated sample.
fn mesh_categories(ds: &Dataset) -> BTreeMap<String, String> {
    ds.samples
        .iter()
        .map(|s| (s.annotation.mesh_id.clone(), s.annotation.category.clone()))
        .collect()
}

pub fn cmd_render_dmasks(cfg: &RunConfig) -> Result<(), CliError> {
    let root = cfg.dataset_dir()?;
    let (az, el) = cfg.bins()?;
    let out = create_out(cfg)?;
    let ds = Dataset::load(&root).context("loading dataset")?;
    let k = default_intrinsics(MASK_SIZE);
    for mesh_id in mesh_categories(&ds).keys() {
        let mesh = load_mesh(&ds.mesh_path(mesh_id)).with_context(|| format!("mesh {mesh_id}"))?;
        let set = generate_dmasks(&mesh, &az, &el, &k).with_context(|| format!("rendering {mesh_id}"))?;
        set.write_dir(&out.join(mesh_id)).with_context(|| format!("writing D-masks of {mesh_id}"))?;
        log::info!("render-dmasks: {mesh_id}: {} masks", set.masks().len());
    }
    Ok(())
}

/// Loaded dataset, fused samples keyed by id, and the train/test split.
struct Prepared {
    ds: Dataset,
    samples: BTreeMap<String, PreparedSample>,
    split: Split,
}

impl Prepared {
    fn load(cfg: &RunConfig, fusion: &Fusion) -> Result<Self, CliError> {
        let root = cfg.dataset_dir()?;
        let (az, el) = cfg.bins()?;
        let ds = Dataset::load(&root).with_context(|| format!("loading dataset {}", root.display()))?;
        let refs: Vec<_> = ds.samples.iter().collect();
        let prepared = prepare_samples(fusion, &refs, &az, &el).context("preparing samples")?;
        let samples = prepared.into_iter().map(|p| (p.sample_id.clone(), p)).collect();
        let split = make_split(&ds.ids(), cfg.train_fraction, cfg.split_seed).context("splitting dataset")?;
        log::info!(
            "dataset {}: {} samples, {} train / {} test",
            root.display(),
            ds.samples.len(),
            split.train.len(),
            split.test.len()
        );
        Ok(Self { ds, samples, split })
    }

    fn pick(&self, ids: &[String]) -> Vec<PreparedSample> {
        ids.iter().filter_map(|id| self.samples.get(id).cloned()).collect()
    }

    /// Training ids after the optional fraction, minus a validation tail.
    fn train_val(&self, cfg: &RunConfig, fraction: Option<f64>) -> Result<(Vec<String>, Vec<String>), CliError> {
        let mut train = match fraction {
            None => self.split.train.clone(),
            Some(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(config_err(format!("--fraction must lie in (0, 1], got {f}")));
                }
                subsample_fraction(&self.split, f, cfg.split_seed, &self.ds.categories())
                    .context("subsampling")?
                    .split
                    .train
            }
        };
        let n_val = (cfg.val_fraction * train.len() as f64).round() as usize;
        let val = train.split_off(train.len() - n_val.min(train.len().saturating_sub(1)));
        Ok((train, val))
    }
}

fn log_history(stage: &str, h: &midpose_core::posenet::History) {
    log::info!("{stage}: initial loss {:.4}", h.initial_loss);
    for e in &h.epochs {
        let mut line = format!(
            "{stage}: epoch {} lr {:.6} loss {:.4} acc {:.2}%",
            e.epoch,
            e.lr,
            e.train_loss,
            100.0 * e.train_acc
        );
        if let Some(a) = e.train_el_acc {
            let _ = write!(line, " el {:.2}%", 100.0 * a);
        }
        if let (Some(l), Some(a)) = (e.val_loss, e.val_acc) {
            let _ = write!(line, " val loss {l:.4} val acc {:.2}%", 100.0 * a);
        }
        log::info!("{line}");
    }
    if h.stopped_early {
        log::info!("{stage}: stopped early, kept epoch {:?}", h.best_epoch);
    }
}

fn stage1_candidates(net: &mut Stage1Net, samples: &[PreparedSample]) -> anyhow::Result<Vec<CandidateSet>> {
    samples
        .iter()
        .map(|s| {
            let x = s.fused.clone().reshape(&[1, FUSED_SIZE, FUSED_SIZE, s.fused.dims()[2]])?;
            let (la, _) = net.forward(&x, Mode::Eval)?;
            Ok(top_k_candidates(la.data(), TOP_K.min(la.len()))?)
        })
        .collect()
}

fn load_library(cfg: &RunConfig, ds: &Dataset) -> Result<DmaskLibrary, CliError> {
    let dir = cfg.dmask_dir()?;
    let (az, el) = cfg.bins()?;
    Ok(DmaskLibrary::read(&dir, &mesh_categories(ds), &az, &el).with_context(|| format!("reading D-masks from {}", dir.display()))?)
}

fn load_bundle(path: &Path) -> Result<ModelBundle, CliError> {
    if !path.exists() {
        return Err(config_err(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(ModelBundle::load(path).context("loading checkpoint")?)
}

pub fn cmd_train(cfg: &RunConfig, stage: Stage, checkpoint: Option<&Path>, fraction: Option<f64>) -> Result<(), CliError> {
    let (az, el) = cfg.bins()?;
    let bundle_in = match (stage, checkpoint) {
        (Stage::Stage2, None) => return Err(config_err("train stage2 needs --checkpoint with a stage-1 model")),
        (_, Some(p)) => Some(load_bundle(p)?),
        (Stage::Stage1, None) => None,
    };
    cfg.dataset_dir()?;
    if stage == Stage::Stage2 {
        cfg.dmask_dir()?;
    }
    let out = create_out(cfg)?;
    let fusion = bundle_in.as_ref().map_or_else(|| Fusion::new(cfg.fusion_seed), |b| b.fusion.clone());
    let data = Prepared::load(cfg, &fusion)?;
    let (train_ids, val_ids) = data.train_val(cfg, fraction)?;
    let (train, val) = (data.pick(&train_ids), data.pick(&val_ids));
    log::info!("train {stage:?}: {} training samples, {} validation", train.len(), val.len());
    let bundle = match stage {
        Stage::Stage1 => {
            let mut net = match bundle_in {
                Some(b) => b.stage1,
                None => Stage1Net::new(cfg.az_bins, cfg.el_bins, cfg.stage1.dropout_p, cfg.stage1.seed)
                    .context("building stage 1")?,
            };
            let h = train_stage1(&mut net, &train, &val, &az, &el, &cfg.stage1).context("training stage 1")?;
            log_history("stage1", &h);
            write_file(&out.join("history.json"), serde_json::to_string_pretty(&h).expect("serializable") + "\n")?;
            ModelBundle {
                fusion,
                stage1: net,
                stage2: None,
            }
        }
        Stage::Stage2 => {
            let mut b = bundle_in.expect("checked above");
            if b.stage1.k_az() != cfg.az_bins || b.stage1.k_el() != cfg.el_bins {
                return Err(config_err(format!(
                    "checkpoint has {}x{} bins, configuration {}x{}",
                    b.stage1.k_az(),
                    b.stage1.k_el(),
                    cfg.az_bins,
                    cfg.el_bins
                )));
            }
            let library = load_library(cfg, &data.ds)?;
            let cands = stage1_candidates(&mut b.stage1, &train)?;
            let mut net = Stage2Net::new(cfg.stage2.seed);
            let h = train_stage2(&mut net, &train, &library, Some(&cands), cfg.az_bins, &cfg.stage2)
                .context("training stage 2")?;
            log_history("stage2", &h);
            write_file(&out.join("history.json"), serde_json::to_string_pretty(&h).expect("serializable") + "\n")?;
            b.stage2 = Some(net);
            b
        }
    };
    let ckpt = out.join(CHECKPOINT_FILE);
    bundle.save(&ckpt).context("saving checkpoint")?;
    log::info!("train {stage:?}: wrote {}", ckpt.display());
    Ok(())
}

fn eval_report(
    cfg: &RunConfig,
    bundle: &ModelBundle,
    data: &Prepared,
    samples: &[PreparedSample],
) -> Result<EvalReport, CliError> {
    let (az, el) = cfg.bins()?;
    let library = match &bundle.stage2 {
        Some(_) => Some(load_library(cfg, &data.ds)?),
        None => None,
    };
    let retrieval = match cfg.retrieval {
        RetrievalMode::TemplateMatch => Retrieval::TemplateMatch,
        RetrievalMode::GroundTruth => Retrieval::GroundTruth,
    };
    let predictor = TwoStagePredictor {
        stage1: bundle.stage1.clone(),
        stage2: bundle
            .stage2
            .clone()
            .zip(library.as_ref())
            .map(|(net, lib)| (net, lib, retrieval)),
    };
    Ok(evaluate(&predictor, samples, &az, &el).context("evaluating")?)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    let bundle = load_bundle(checkpoint)?;
    if bundle.stage1.k_az() != cfg.az_bins || bundle.stage1.k_el() != cfg.el_bins {
        return Err(config_err(format!(
            "checkpoint has {}x{} bins, configuration {}x{}",
            bundle.stage1.k_az(),
            bundle.stage1.k_el(),
            cfg.az_bins,
            cfg.el_bins
        )));
    }
    cfg.dataset_dir()?;
    if bundle.stage2.is_some() {
        cfg.dmask_dir()?;
    }
    let out = create_out(cfg)?;
    let data = Prepared::load(cfg, &bundle.fusion)?;
    let ids = match cfg.eval_split {
        EvalSplit::Test => data.split.test.clone(),
        EvalSplit::All => data.ds.ids(),
    };
    let samples = data.pick(&ids);
    let report = eval_report(cfg, &bundle, &data, &samples)?;
    write_file(&out.join(REPORT_FILE), report.to_csv())?;
    let mut preds = String::from("sample_id,category,az_bin,el_bin,gt_az_bin,gt_el_bin,retrieved_mesh\n");
    for (s, p) in samples.iter().zip(&report.predictions) {
        let _ = writeln!(
            preds,
            "{},{},{},{},{},{},{}",
            s.sample_id,
            s.category,
            p.az_bin,
            p.el_bin,
            s.az_bin,
            s.el_bin,
            p.retrieved_mesh.as_deref().unwrap_or("")
        );
    }
    write_file(&out.join("predictions.csv"), preds)?;
    let m = report.mean();
    log::info!(
        "eval: {} samples, mean azimuth {:.2}%, mean elevation {:.2}%, {} outside candidates",
        m.n,
        m.az_acc(),
        m.el_acc(),
        report.outside_candidates
    );
    Ok(())
}

pub fn cmd_label(cfg: &RunConfig) -> Result<(), CliError> {
    let scene_path = cfg.existing(&cfg.scene, "scene")?;
    let out = create_out(cfg)?;
    let scene = load_manifest(&scene_path).context("loading scene manifest")?;
    let results = label_scene(&scene, cfg.min_visible_corners);
    let summary = export_labels(&results, &out.join("labels.jsonl")).context("exporting labels")?;
    log::info!(
        "label: {} frame-object pairs, {} labeled, skipped {:?}",
        summary.total,
        summary.labeled,
        summary.skipped
    );
    Ok(())
}

/// One row of the low-data sweep; accuracies in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct LowdataRow {
    pub fraction: f64,
    pub n_train: usize,
    pub az_acc: f64,
    pub el_acc: f64,
}

pub fn lowdata_csv(rows: &[LowdataRow]) -> String {
    let mut s = String::from("fraction,az_acc,el_acc\n");
    for r in rows {
        let _ = writeln!(s, "{:.2},{:.2},{:.2}", r.fraction, r.az_acc, r.el_acc);
    }
    s
}

/// Accuracy-versus-fraction line chart.
pub fn lowdata_svg(rows: &[LowdataRow]) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let x = |f: f64| pad + f * (w - 2.0 * pad);
    let y = |a: f64| h - pad - a / 100.0 * (h - 2.0 * pad);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(
        s,
        "<line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{0}\" stroke=\"black\"/>",
        h - pad,
        w - pad
    );
    for t in [0.0, 25.0, 50.0, 75.0, 100.0] {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{t}</text>", pad - 6.0, y(t) + 4.0);
    }
    for r in rows {
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{:.0}%</text>", x(r.fraction), h - pad + 16.0, 100.0 * r.fraction);
    }
    for (name, color, get) in [
        ("azimuth", "#1f77b4", (|r: &LowdataRow| r.az_acc) as fn(&LowdataRow) -> f64),
        ("elevation", "#d62728", |r: &LowdataRow| r.el_acc),
    ] {
        let pts: Vec<String> = rows.iter().map(|r| format!("{:.1},{:.1}", x(r.fraction), y(get(r)))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
        if let Some(last) = rows.last() {
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{name}</text>", x(last.fraction) - 60.0, y(get(last)) - 8.0);
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn cmd_lowdata(cfg: &RunConfig, emit_plot: bool) -> Result<(), CliError> {
    let (az, el) = cfg.bins()?;
    cfg.dataset_dir()?;
    let out = create_out(cfg)?;
    let fusion = Fusion::new(cfg.fusion_seed);
    let data = Prepared::load(cfg, &fusion)?;
    let test = data.pick(&data.split.test);
    let mut rows = Vec::with_capacity(LOWDATA_FRACTIONS.len());
    for f in LOWDATA_FRACTIONS {
        let (train_ids, val_ids) = data.train_val(cfg, Some(f))?;
        let (train, val) = (data.pick(&train_ids), data.pick(&val_ids));
        // Same initialization at every fraction, so only the data differ.
        let mut net = Stage1Net::new(cfg.az_bins, cfg.el_bins, cfg.stage1.dropout_p, cfg.stage1.seed)
            .context("building stage 1")?;
        let h = train_stage1(&mut net, &train, &val, &az, &el, &cfg.stage1)
            .with_context(|| format!("training at fraction {f}"))?;
        log_history(&format!("lowdata {f}"), &h);
        let bundle = ModelBundle {
            fusion: fusion.clone(),
            stage1: net,
            stage2: None,
        };
        let m = eval_report(cfg, &bundle, &data, &test)?.mean();
        log::info!(
            "lowdata: fraction {f}: {} train, azimuth {:.2}%, elevation {:.2}%",
            train.len(),
            m.az_acc(),
            m.el_acc()
        );
        rows.push(LowdataRow {
            fraction: f,
            n_train: train.len(),
            az_acc: m.az_acc(),
            el_acc: m.el_acc(),
        });
    }
    write_file(&out.join(LOWDATA_FILE), lowdata_csv(&rows))?;
    if emit_plot {
        write_file(&out.join("lowdata.svg"), lowdata_svg(&rows))?;
    }
    Ok(())
}
