//! Command-line experiment orchestration: cohort generation, training,
//! evaluation, method comparison with Pareto frontiers, and task-difficulty
//! analysis.
//!
//! Config files (TOML or JSON, chosen by extension) use the flag names in
//! snake_case; flags given on the command line win. A training run's
//! `manifest.json` is itself a valid config file, so
//! `train --config run/manifest.json --out other` repeats the run.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{self, DcReport};
use crate::error::{Error, Result};
use crate::eval::{
    self, FairnessMetric, FairnessReport, ParetoPoint, PerformanceMetrics, Ratio,
};
use crate::losses::{LossMode, DEFAULT_SIGMA_G};
use crate::net::{Checkpoint, ModelEntry};
use crate::phq::{Group, NUM_CLASSES, NUM_TASKS};
use crate::synth::{self, Cohort, CohortConfig};
use crate::train::{self, Predictor, StopMonitor, TrainConfig, TrainedModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.json";

/// Train/validation shares of the seeded split; the test split gets the rest.
pub const DEFAULT_SPLIT: [f64; 2] = [0.70, 0.15];

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Input(_)
        | Error::Mode(_)
        | Error::Shape(_)
        | Error::Parse { .. }
        | Error::Serde(_) => EXIT_CONFIG,
        Error::Numeric(_) | Error::Divergence { .. } => EXIT_NUMERIC,
        Error::Io { .. } => EXIT_IO,
    }
}

#[derive(Debug, Parser)]
#[command(name = "phqfair", version, about = "Fairness-aware multitask PHQ-8 experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort as JSON Lines.
    Generate(GenerateArgs),
    /// Train one of the four objectives on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint: performance, fairness and per-item accuracy.
    Evaluate(EvaluateArgs),
    /// Compare evaluated runs and extract fairness/accuracy Pareto frontiers.
    Compare(CompareArgs),
    /// Compare learned task weights with item discrimination capacity.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Default,
    Separable,
    Biased,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Unitask,
    Mtl,
    Uw,
    Ufair,
}

impl ModeArg {
    fn loss_mode(self) -> LossMode {
        match self {
            // the suite trains tasks 0..8; this is only the template
            ModeArg::Unitask => LossMode::Unitask { task: 0 },
            ModeArg::Mtl => LossMode::Mtl,
            ModeArg::Uw => LossMode::Uw,
            ModeArg::Ufair => LossMode::UFair,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModeArg::Unitask => "unitask",
            ModeArg::Mtl => "mtl",
            ModeArg::Uw => "uw",
            ModeArg::Ufair => "ufair",
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Repeat for a multi-seed run; each seed gets its own `seed-<n>` subdirectory.
    #[arg(long)]
    pub seed: Vec<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub sigma_g: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint file, or a run directory containing `checkpoint.json`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the dataset recorded in the run manifest.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Which part of the seeded split to score; anything but `all` needs the run manifest.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "geometric-mean")]
    pub eodd: EoddArg,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EoddArg {
    GeometricMean,
    ArithmeticMean,
    WorstCase,
}

impl From<EoddArg> for eval::EoddAggregate {
    fn from(a: EoddArg) -> Self {
        match a {
            EoddArg::GeometricMean => eval::EoddAggregate::GeometricMean,
            EoddArg::ArithmeticMean => eval::EoddAggregate::ArithmeticMean,
            EoddArg::WorstCase => eval::EoddAggregate::WorstCase,
        }
    }
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Evaluated run directories (each holding manifest.json and metrics.json).
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a).map(|s| print!("{}", s.render())),
        Command::Train(a) => cmd_train(&a).map(|dirs| {
            for d in dirs {
                println!("wrote {}", d.display());
            }
        }),
        Command::Evaluate(a) => cmd_evaluate(&a).map(|m| {
            println!(
                "accuracy {:.4}  f1 {:.4}  m_eacc {}",
                m.performance.accuracy,
                m.performance.f1,
                fmt_ratio(m.fairness.m_eacc.raw)
            )
        }),
        Command::Compare(a) => cmd_compare(&a).map(|r| println!("compared {} runs", r.rows.len())),
        Command::Analyze(a) => cmd_analyze(&a).map(|reps| {
            for r in reps {
                let g = r.group.map_or("all", |g| g.as_str());
                println!("{g}: spearman rho {}", r.spearman_rho.map_or("undefined".into(), |v| format!("{v:.4}")));
            }
        }),
    }
}

fn fmt_ratio(r: Ratio) -> String {
    r.value().map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"))
}

fn read_config_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
        _ => serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn sha256_hex<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("serializable")))
}

fn csv_file(path: &Path, manifest_hash: &str) -> Result<csv::Writer<std::fs::File>> {
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    writeln!(f, "# manifest_hash: {manifest_hash}")
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(csv::Writer::from_writer(f))
}

// ---------------------------------------------------------------- generate

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateFile {
    preset: Option<Preset>,
    out: Option<PathBuf>,
    n: Option<usize>,
    seed: Option<u64>,
    group_fraction_s0: Option<f64>,
    score_marginals: Option<synth::ScoreMarginals>,
    feature_dims: Option<[usize; 3]>,
    signal_scale: Option<f64>,
    noise_scale: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerateSummary {
    pub path: PathBuf,
    pub n: usize,
    pub config_hash: String,
    pub group_counts: [usize; 2],
    pub histograms: [[usize; NUM_CLASSES]; NUM_TASKS],
}

impl GenerateSummary {
    pub fn render(&self) -> String {
        let mut s = format!(
            "wrote {} ({} participants: s0={}, s1={})\nconfig_hash {}\n",
            self.path.display(),
            self.n,
            self.group_counts[0],
            self.group_counts[1],
            self.config_hash
        );
        s.push_str("item   score0 score1 score2 score3\n");
        for (t, h) in self.histograms.iter().enumerate() {
            s.push_str(&format!(
                "PHQ-{} {:>7} {:>6} {:>6} {:>6}\n",
                t + 1,
                h[0],
                h[1],
                h[2],
                h[3]
            ));
        }
        s
    }
}

pub fn resolve_cohort_config(args: &GenerateArgs) -> Result<(CohortConfig, PathBuf)> {
    let file: GenerateFile = match &args.config {
        Some(p) => read_config_file(p)?,
        None => GenerateFile::default(),
    };
    let preset = args.preset.or(file.preset).unwrap_or(Preset::Default);
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let mut cfg = match preset {
        Preset::Default => CohortConfig { seed, ..CohortConfig::default() },
        Preset::Separable => CohortConfig::separable_toy(seed),
        Preset::Biased => CohortConfig::bias_injected(seed),
    };
    if let Some(v) = args.n.or(file.n) {
        cfg.n = v;
    }
    if let Some(v) = file.group_fraction_s0 {
        cfg.group_fraction_s0 = v;
    }
    if let Some(v) = file.score_marginals {
        cfg.score_marginals = v;
    }
    if let Some(v) = file.feature_dims {
        cfg.feature_dims = v;
    }
    if let Some(v) = file.signal_scale {
        cfg.signal_scale = v;
    }
    if let Some(v) = file.noise_scale {
        cfg.noise_scale = v;
    }
    cfg.validate()?;
    let out = args
        .out
        .clone()
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from("cohort.jsonl"));
    Ok((cfg, out))
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<GenerateSummary> {
    let (cfg, out) = resolve_cohort_config(args)?;
    let cohort = synth::generate_cohort(&cfg)?;
    synth::write_dataset(&cohort, &out)?;
    Ok(GenerateSummary {
        path: out,
        n: cohort.len(),
        config_hash: cohort.config_hash.clone(),
        group_counts: cohort.group_counts(),
        histograms: cohort.score_histograms(),
    })
}

// ------------------------------------------------------------------- train

#[derive(Debug, Default, Deserialize)]
struct TrainFile {
    dataset: Option<PathBuf>,
    mode: Option<ModeArg>,
    seed: Option<u64>,
    seeds: Option<Vec<u64>>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
    sigma_g: Option<f64>,
    hidden: Option<usize>,
    monitor: Option<StopMonitor>,
    split: Option<[f64; 2]>,
    out: Option<PathBuf>,
}

/// Everything that determines a training run's outputs, apart from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTrainConfig {
    pub mode: ModeArg,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub sigma_g: f64,
    pub hidden: usize,
    pub monitor: StopMonitor,
    pub split: [f64; 2],
}

impl ResolvedTrainConfig {
    pub fn train_config(&self) -> TrainConfig {
        let mut c = TrainConfig::new(self.mode.loss_mode());
        c.seed = self.seed;
        c.lr = self.lr;
        c.batch_size = self.batch_size;
        c.max_epochs = self.max_epochs;
        c.patience = self.patience;
        c.hidden = self.hidden;
        c.monitor = self.monitor;
        c.loss_spec.sigma_g = self.sigma_g;
        c
    }
}

/// Run manifest: the resolved config (flattened, so the file doubles as a
/// config), the dataset path and digest, and the manifest hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: String,
    pub version: u32,
    pub dataset: PathBuf,
    pub dataset_hash: String,
    #[serde(flatten)]
    pub config: ResolvedTrainConfig,
    pub manifest_hash: String,
}

pub fn manifest_hash(config: &ResolvedTrainConfig, dataset_hash: &str) -> String {
    sha256_hex(&(config, dataset_hash))
}

fn resolve_train(args: &TrainArgs) -> Result<(Vec<ResolvedTrainConfig>, PathBuf, PathBuf)> {
    let file: TrainFile = match &args.config {
        Some(p) => read_config_file(p)?,
        None => TrainFile::default(),
    };
    let defaults = TrainConfig::new(LossMode::Mtl);
    let dataset = args
        .dataset
        .clone()
        .or(file.dataset)
        .ok_or_else(|| Error::Config("--dataset is required".into()))?;
    let mode = args
        .mode
        .or(file.mode)
        .ok_or_else(|| Error::Config("--mode is required".into()))?;
    let seeds = if !args.seed.is_empty() {
        args.seed.clone()
    } else if let Some(s) = file.seeds {
        s
    } else {
        vec![file.seed.unwrap_or(0)]
    };
    if seeds.is_empty() {
        return Err(Error::Config("seed list must not be empty".into()));
    }
    let out = args.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("run"));
    let split = file.split.unwrap_or(DEFAULT_SPLIT);
    let configs: Vec<ResolvedTrainConfig> = seeds
        .iter()
        .map(|&seed| ResolvedTrainConfig {
            mode,
            seed,
            lr: args.lr.or(file.lr).unwrap_or(defaults.lr),
            batch_size: args.batch_size.or(file.batch_size).unwrap_or(defaults.batch_size),
            max_epochs: args.max_epochs.or(file.max_epochs).unwrap_or(defaults.max_epochs),
            patience: args.patience.or(file.patience).unwrap_or(defaults.patience),
            sigma_g: args.sigma_g.or(file.sigma_g).unwrap_or(DEFAULT_SIGMA_G),
            hidden: args.hidden.or(file.hidden).unwrap_or(defaults.hidden),
            monitor: file.monitor.unwrap_or(defaults.monitor),
            split,
        })
        .collect();
    for c in &configs {
        c.train_config().validate()?;
        if !(c.split[0] > 0.0 && c.split[1] > 0.0 && c.split[0] + c.split[1] < 1.0) {
            return Err(Error::Config(format!("invalid split {:?}", c.split)));
        }
    }
    Ok((configs, dataset, out))
}

fn train_run(cohort: &Cohort, dataset: &Path, dataset_hash: &str, cfg: &ResolvedTrainConfig, dir: &Path) -> Result<()> {
    let (tr, va, _) = cohort.split(cfg.split[0], cfg.split[1], cfg.seed)?;
    if tr.is_empty() || va.is_empty() {
        return Err(Error::Config("dataset too small for the train/validation split".into()));
    }
    let tc = cfg.train_config();
    let hash = manifest_hash(cfg, dataset_hash);
    let models: Vec<TrainedModel> = match cfg.mode {
        ModeArg::Unitask => train::train_unitask_suite(&tr.records, &va.records, &tc)?.models,
        _ => vec![train::train(&tr.records, &va.records, &tc)?],
    };

    create_dir(dir)?;
    let manifest = RunManifest {
        kind: "train".into(),
        version: 1,
        dataset: dataset.to_path_buf(),
        dataset_hash: dataset_hash.to_string(),
        config: cfg.clone(),
        manifest_hash: hash.clone(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    if models.len() == 1 {
        models[0].trace.save_csv(&dir.join("trace.csv"), &hash)?;
    } else {
        for (t, m) in models.iter().enumerate() {
            m.trace.save_csv(&dir.join(format!("trace_task{}.csv", t + 1)), &hash)?;
        }
    }
    let entries = models
        .iter()
        .map(|m| ModelEntry::new(&m.params, m.loss_spec.clone(), m.optimizer.clone()))
        .collect();
    Checkpoint::new(hash, dataset_hash.to_string(), entries).save(&dir.join(CHECKPOINT_FILE))
}

/// Trains every requested seed; returns the run directories written.
pub fn cmd_train(args: &TrainArgs) -> Result<Vec<PathBuf>> {
    let (configs, dataset, out) = resolve_train(args)?;
    let cohort = synth::read_dataset(&dataset)?;
    let dataset_hash = synth::dataset_digest(&cohort);
    let dirs: Vec<PathBuf> = if configs.len() == 1 {
        vec![out.clone()]
    } else {
        configs.iter().map(|c| out.join(format!("seed-{}", c.seed))).collect()
    };
    // seeds are independent runs; each run stays single-threaded
    let results: Vec<Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .zip(&dirs)
            .map(|(c, d)| {
                let (cohort, dataset, hash) = (&cohort, &dataset, &dataset_hash);
                s.spawn(move || train_run(cohort, dataset, hash, c, d))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;
    Ok(dirs)
}

// ---------------------------------------------------------------- evaluate

fn locate_checkpoint(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join(CHECKPOINT_FILE), path.to_path_buf())
    } else {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (path.to_path_buf(), dir)
    }
}

fn load_manifest(dir: &Path) -> Result<Option<RunManifest>> {
    let p = dir.join(MANIFEST_FILE);
    if !p.exists() {
        return Ok(None);
    }
    read_config_file(&p).map(Some)
}

pub fn predictor_from_checkpoint(ck: &Checkpoint) -> Result<(Predictor, String)> {
    let params = ck
        .models
        .iter()
        .map(ModelEntry::model_params)
        .collect::<Result<Vec<_>>>()?;
    match ck.models.as_slice() {
        [] => Err(Error::Config("checkpoint holds no models".into())),
        [only] => Ok((
            Predictor::Joint(params.into_iter().next().unwrap()),
            only.loss_spec.mode.name().to_string(),
        )),
        many => {
            for (t, m) in many.iter().enumerate() {
                if m.loss_spec.mode != (LossMode::Unitask { task: t }) {
                    return Err(Error::Config(format!(
                        "multi-model checkpoint entry {t} is {:?}, expected unitask task {t}",
                        m.loss_spec.mode
                    )));
                }
            }
            Ok((Predictor::Suite(params), "unitask".to_string()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub n: usize,
    pub performance: Option<PerformanceMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub manifest_hash: String,
    pub dataset_hash: String,
    pub mode: String,
    pub seed: Option<u64>,
    pub split: SplitArg,
    pub n: usize,
    pub performance: PerformanceMetrics,
    pub fairness: FairnessReport,
    pub per_task_accuracy: [f64; NUM_TASKS],
    pub per_group: BTreeMap<Group, GroupMetrics>,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<MetricsReport> {
    let (ck_path, run_dir) = locate_checkpoint(&args.checkpoint);
    let ck = Checkpoint::load(&ck_path)?;
    let manifest = load_manifest(&run_dir)?;
    let dataset = args
        .dataset
        .clone()
        .or_else(|| manifest.as_ref().map(|m| m.dataset.clone()))
        .ok_or_else(|| Error::Config("--dataset is required without a run manifest".into()))?;
    let cohort = synth::read_dataset(&dataset)?;
    let dataset_hash = synth::dataset_digest(&cohort);

    let records = match args.split {
        SplitArg::All => cohort.records.clone(),
        split => {
            let m = manifest.as_ref().ok_or_else(|| {
                Error::Config("evaluating a split needs the run manifest next to the checkpoint".into())
            })?;
            if m.dataset_hash != dataset_hash {
                return Err(Error::Config(
                    "dataset differs from the one the run was trained on; use --split all".into(),
                ));
            }
            let (tr, va, te) = cohort.split(m.config.split[0], m.config.split[1], m.config.seed)?;
            match split {
                SplitArg::Train => tr.records,
                SplitArg::Val => va.records,
                _ => te.records,
            }
        }
    };
    if records.is_empty() {
        return Err(Error::Input("nothing to evaluate: selected split is empty".into()));
    }

    let (predictor, mode) = predictor_from_checkpoint(&ck)?;
    let preds = predictor.predict(&records)?;
    let labeled = eval::label_predictions(&preds, &records)?;
    let performance = eval::performance_metrics(&labeled)?;
    let fairness = eval::fairness_ratios_with(&labeled, args.eodd.into())?;
    let per_task_accuracy = eval::task_accuracies(&preds, &records)?;
    let per_group = Group::ALL
        .iter()
        .map(|&g| {
            let sub: Vec<_> = labeled.iter().filter(|p| p.group == g).cloned().collect();
            let perf = eval::performance_metrics(&sub).ok();
            (g, GroupMetrics { n: sub.len(), performance: perf })
        })
        .collect();

    let report = MetricsReport {
        manifest_hash: ck.manifest_hash.clone(),
        dataset_hash,
        mode,
        seed: manifest.as_ref().map(|m| m.config.seed),
        split: args.split,
        n: records.len(),
        performance,
        fairness,
        per_task_accuracy,
        per_group,
    };

    let out = args.out.clone().unwrap_or(run_dir);
    create_dir(&out)?;
    write_json(&out.join(METRICS_FILE), &report)?;
    write_metrics_csv(&report, &out.join("metrics.csv"))?;
    Ok(report)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_metrics_csv(r: &MetricsReport, path: &Path) -> Result<()> {
    let mut w = csv_file(path, &r.manifest_hash)?;
    w.write_record(["metric", "value", "normalized", "within_bounds"])?;
    let p = &r.performance;
    for (k, v) in [
        ("accuracy", p.accuracy),
        ("f1", p.f1),
        ("precision", p.precision),
        ("recall", p.recall),
        ("uar", p.uar),
    ] {
        w.write_record([k.to_string(), v.to_string(), String::new(), String::new()])?;
    }
    for m in FairnessMetric::ALL {
        let fm = r.fairness.measure(m);
        w.write_record([
            m.key().to_string(),
            opt_cell(fm.raw.value()),
            opt_cell(fm.normalized.value()),
            fm.within_bounds.map(|b| b.to_string()).unwrap_or_default(),
        ])?;
    }
    for (t, a) in r.per_task_accuracy.iter().enumerate() {
        w.write_record([format!("phq{}_accuracy", t + 1), a.to_string(), String::new(), String::new()])?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

// ----------------------------------------------------------------- compare

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method_id: String,
    pub mode: String,
    pub seed: Option<u64>,
    pub manifest_hash: String,
    pub performance: PerformanceMetrics,
    pub fairness: BTreeMap<String, Option<f64>>,
    pub per_task_accuracy: [f64; NUM_TASKS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub median: Option<f64>,
    pub iqr: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub manifest_hash: String,
    pub dataset_hash: String,
    pub rows: Vec<ComparisonRow>,
    /// mode -> metric -> median/IQR across seeds.
    pub summary: BTreeMap<String, BTreeMap<String, SummaryCell>>,
    pub skipped: Vec<SkippedPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPoint {
    pub fairness_metric: String,
    pub method_id: String,
    pub reason: String,
}

/// Median and interquartile range with linear interpolation between order
/// statistics.
pub fn median_iqr(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    (Some(q(0.5)), Some(q(0.75) - q(0.25)))
}

fn metric_columns(row: &ComparisonRow) -> Vec<(String, Option<f64>)> {
    let p = &row.performance;
    let mut cols = vec![
        ("accuracy".to_string(), Some(p.accuracy)),
        ("f1".into(), Some(p.f1)),
        ("precision".into(), Some(p.precision)),
        ("recall".into(), Some(p.recall)),
        ("uar".into(), Some(p.uar)),
    ];
    for m in FairnessMetric::ALL {
        cols.push((m.key().to_string(), row.fairness.get(m.key()).copied().flatten()));
    }
    for (t, a) in row.per_task_accuracy.iter().enumerate() {
        cols.push((format!("phq{}_accuracy", t + 1), Some(*a)));
    }
    cols
}

pub fn cmd_compare(args: &CompareArgs) -> Result<ComparisonReport> {
    let mut loaded = Vec::new();
    for dir in &args.runs {
        let metrics: MetricsReport = read_config_file(&dir.join(METRICS_FILE))?;
        loaded.push(metrics);
    }
    let dataset_hash = loaded[0].dataset_hash.clone();
    if let Some(bad) = loaded.iter().position(|m| m.dataset_hash != dataset_hash) {
        return Err(Error::Config(format!(
            "run {} was evaluated on a different dataset",
            args.runs[bad].display()
        )));
    }
    let mut mode_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for m in &loaded {
        *mode_counts.entry(m.mode.as_str()).or_default() += 1;
    }
    let rows: Vec<ComparisonRow> = loaded
        .iter()
        .map(|m| {
            let method_id = match (mode_counts[m.mode.as_str()], m.seed) {
                (1, _) | (_, None) => m.mode.clone(),
                (_, Some(s)) => format!("{}@seed{s}", m.mode),
            };
            ComparisonRow {
                method_id,
                mode: m.mode.clone(),
                seed: m.seed,
                manifest_hash: m.manifest_hash.clone(),
                performance: m.performance,
                fairness: FairnessMetric::ALL
                    .iter()
                    .map(|&f| (f.key().to_string(), m.fairness.measure(f).raw.value()))
                    .collect(),
                per_task_accuracy: m.per_task_accuracy,
            }
        })
        .collect();
    let mut hashes: Vec<&str> = rows.iter().map(|r| r.manifest_hash.as_str()).collect();
    hashes.sort_unstable();
    let hash = sha256_hex(&(&hashes, &dataset_hash));

    let mut summary: BTreeMap<String, BTreeMap<String, SummaryCell>> = BTreeMap::new();
    for mode in mode_counts.keys() {
        let mode_rows: Vec<&ComparisonRow> = rows.iter().filter(|r| r.mode == *mode).collect();
        let mut cells = BTreeMap::new();
        for (i, (name, _)) in metric_columns(mode_rows[0]).into_iter().enumerate() {
            let vals: Vec<f64> = mode_rows.iter().filter_map(|r| metric_columns(r)[i].1).collect();
            let (median, iqr) = median_iqr(&vals);
            cells.insert(name, SummaryCell { median, iqr, n: vals.len() });
        }
        summary.insert(mode.to_string(), cells);
    }

    create_dir(&args.out)?;
    let mut skipped = Vec::new();
    for metric in FairnessMetric::ALL {
        let mut points = Vec::new();
        let mut raws = Vec::new();
        for (row, m) in rows.iter().zip(&loaded) {
            let fm = m.fairness.measure(metric);
            match fm.normalized.value() {
                Some(norm) => {
                    points.push(ParetoPoint::new(row.method_id.clone(), row.performance.accuracy, norm));
                    raws.push(fm.raw.value().unwrap_or(0.0));
                }
                None => skipped.push(SkippedPoint {
                    fairness_metric: metric.key().into(),
                    method_id: row.method_id.clone(),
                    reason: "undefined ratio".into(),
                }),
            }
        }
        let path = args.out.join(format!("pareto_{}.csv", metric.key()));
        let mut w = csv_file(&path, &hash)?;
        w.write_record(["method_id", "accuracy", "fairness_metric", "raw_ratio", "normalized", "on_frontier"])?;
        let mask = if points.is_empty() { vec![] } else { eval::frontier_mask(&points)? };
        for ((p, raw), on) in points.iter().zip(&raws).zip(&mask) {
            w.write_record([
                p.method_id.clone(),
                p.accuracy.to_string(),
                metric.key().to_string(),
                raw.to_string(),
                p.fairness_norm.to_string(),
                on.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    let skip_path = args.out.join("pareto_skipped.csv");
    let mut w = csv_file(&skip_path, &hash)?;
    w.write_record(["fairness_metric", "method_id", "reason"])?;
    for s in &skipped {
        w.write_record([&s.fairness_metric, &s.method_id, &s.reason])?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", skip_path.display()), e))?;

    let table_path = args.out.join("comparison.csv");
    let mut w = csv_file(&table_path, &hash)?;
    let mut header = vec!["method_id".to_string(), "seed".into()];
    header.extend(metric_columns(&rows[0]).into_iter().map(|(k, _)| k));
    w.write_record(&header)?;
    for r in &rows {
        let mut rec = vec![r.method_id.clone(), r.seed.map(|s| s.to_string()).unwrap_or_default()];
        rec.extend(metric_columns(r).into_iter().map(|(_, v)| opt_cell(v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", table_path.display()), e))?;

    let sum_path = args.out.join("comparison_summary.csv");
    let mut w = csv_file(&sum_path, &hash)?;
    w.write_record(["mode", "metric", "median", "iqr", "n"])?;
    for (mode, cells) in &summary {
        for (metric, c) in cells {
            w.write_record([mode.clone(), metric.clone(), opt_cell(c.median), opt_cell(c.iqr), c.n.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", sum_path.display()), e))?;

    let report = ComparisonReport {
        manifest_hash: hash,
        dataset_hash,
        rows,
        summary,
        skipped,
    };
    write_json(&args.out.join("comparison.json"), &report)?;
    Ok(report)
}

// ----------------------------------------------------------------- analyze

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<Vec<DcReport>> {
    let (ck_path, run_dir) = locate_checkpoint(&args.checkpoint);
    let ck = Checkpoint::load(&ck_path)?;
    let [entry] = ck.models.as_slice() else {
        return Err(Error::Mode("unitask suites carry no uncertainty parameters".into()));
    };
    let profile = analysis::difficulty_profile(&entry.model_params()?)?;
    let reports = analysis::dc_reports(&profile)?;
    let out = args.out.clone().unwrap_or(run_dir);
    create_dir(&out)?;

    let f = |name: &str| -> Result<std::io::BufWriter<std::fs::File>> {
        let p = out.join(name);
        std::fs::File::create(&p)
            .map(std::io::BufWriter::new)
            .map_err(|e| Error::io(format!("creating {}", p.display()), e))
    };
    analysis::write_dc_csv(&reports, f("dc_report.csv")?, &ck.manifest_hash)?;
    profile.write_csv(f("task_weights.csv")?, &ck.manifest_hash)?;
    #[derive(Serialize)]
    struct DcJson<'a> {
        manifest_hash: &'a str,
        reports: &'a [DcReport],
    }
    write_json(
        &out.join("dc_report.json"),
        &DcJson { manifest_hash: &ck.manifest_hash, reports: &reports },
    )?;
    Ok(reports)
}
