//! The `scan` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data,
//! checkpoint or I/O error, 3 numeric failure (non-finite loss).

pub mod config;
pub mod plots;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use scan_core::data::{self, load_dataset, leave_one_out, make_windows, Dataset, RawRecord, SceneWindow, SynthConfig, SynthKind};
use scan_core::generative::{self, mean_pairwise_distance, NoiseSpec};
use scan_core::geometry::BinSpec;
use scan_core::metrics::MetricReport;
use scan_core::model::{ModelConfig, ModelError, PreparedScene, ScanModel};
use scan_core::training::{self, curve_csv, Checkpoint, TrainConfig, TrainError, Trainer};

use config::Config;
use plots::{FanGrid, ScenePlot};

/// Environment variable naming the default directory of dataset files.
pub const DATA_ROOT_ENV: &str = "SCAN_DATA_ROOT";
pub const CHECKPOINT_FILE: &str = "checkpoint.scanckpt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let msg = e.to_string();
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(msg),
            TrainError::Config(_) | TrainError::Model(ModelError::Config(_)) => CliError::Usage(msg),
            _ => CliError::Data(msg),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        TrainError::from(e).into()
    }
}

impl From<generative::GanError> for CliError {
    fn from(e: generative::GanError) -> Self {
        TrainError::from(e).into()
    }
}

impl From<data::DataError> for CliError {
    fn from(e: data::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "scan", version, about = "Train, evaluate and inspect spatially attentive trajectory forecasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus its loss curve.
    Train(TrainArgs),
    /// Score a checkpoint on evaluation windows.
    Evaluate(EvalArgs),
    /// Write predictions and trajectory / domain plots for evaluation windows.
    Predict(PredictArgs),
    /// Train and evaluate over a grid of settings.
    Sweep(SweepArgs),
    /// Dump the learned pedestrian domain as CSV and a polar heatmap.
    InspectDomain(InspectArgs),
    /// Write synthetic scenes in the dataset text format.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Sectioned key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.epochs=10` (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory holding dataset files; defaults to $SCAN_DATA_ROOT.
    #[arg(long)]
    data_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of initialising afresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Samples per scene (generative checkpoints; default 20).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Samples per scene (generative checkpoints).
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of scenes to plot.
    #[arg(long, default_value_t = 4)]
    plots: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepKind {
    /// Prediction lengths from `sweep.horizons` (default 8,12,20).
    Horizon,
    /// GAN runs over `sweep.ks` × `sweep.lambdas`, with fan plots.
    Diversity,
    /// Bin widths from `sweep.deltas` in degrees (default 15,30,45,90).
    Discretization,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(value_enum)]
    kind: SweepKind,
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Predict(a) => predict(a),
        Command::Sweep(a) => sweep(a),
        Command::InspectDomain(a) => inspect_domain(a),
        Command::Synth(a) => synth(a),
    }
}

const SECTIONS: &[&str] = &["model", "train", "data", "sweep"];

/// Loads the config file and applies the overrides.
fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for o in &common.overrides {
        cfg.set(o)?;
    }
    cfg.check_sections(SECTIONS)?;
    Ok(cfg)
}

fn model_config(cfg: &Config) -> Result<ModelConfig> {
    let mut m = ModelConfig::default();
    let section = cfg.section("model");
    // bin widths first so `delta` does not clobber a later explicit axis
    for key in ["delta", "delta_theta", "delta_phi"] {
        if let Some(v) = section.get(key) {
            m.set(key, v)?;
        }
    }
    for (k, v) in section.iter().filter(|(k, _)| !k.starts_with("delta")) {
        m.set(k, v)?;
    }
    m.validate()?;
    Ok(m)
}

fn train_config(cfg: &Config) -> Result<TrainConfig> {
    let section = cfg.section("train");
    let mut t = if section.get("gan").map(String::as_str) == Some("true") {
        TrainConfig::gan_default()
    } else {
        TrainConfig::default()
    };
    for (k, v) in &section {
        t.set(k, v)?;
    }
    t.validate()?;
    Ok(t)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<PathBuf> {
    std::fs::write(path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

fn parse_list<T: std::str::FromStr>(cfg: &Config, key: &str, default: &str) -> Result<Vec<T>> {
    let text = cfg.get("sweep", key).unwrap_or(default);
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad entry `{s}` in sweep.{key}")))
        })
        .collect()
}

/// Training and evaluation windows.
pub struct DataSplit {
    pub train: Vec<SceneWindow>,
    pub eval: Vec<SceneWindow>,
    pub description: String,
}

fn synth_config(cfg: &Config, model: &ModelConfig, eval: bool) -> Result<SynthConfig> {
    let d = cfg.section("data");
    let bad = |k: &str, v: &str| CliError::Usage(format!("bad value `{v}` for `data.{k}`"));
    let kind: SynthKind = d.get("kind").map_or(Ok(SynthKind::Straight), |v| v.parse().map_err(|_| bad("kind", v)))?;
    let num = |k: &str, default: usize| d.get(k).map_or(Ok(default), |v| v.parse().map_err(|_| bad(k, v)));
    let float = |k: &str, default: f64| d.get(k).map_or(Ok(default), |v| v.parse().map_err(|_| bad(k, v)));
    let seed = d.get("seed").map_or(Ok(0u64), |v| v.parse().map_err(|_| bad("seed", v)))?;
    let mut s = SynthConfig::new(kind, num("scenes", 50)?, seed);
    if eval {
        s.n_scenes = num("eval_scenes", 20)?;
        s.seed = d.get("eval_seed").map_or(Ok(seed.wrapping_add(1)), |v| v.parse().map_err(|_| bad("eval_seed", v)))?;
    }
    s.speed = float("speed", s.speed)?;
    s.jitter = float("jitter", s.jitter)?;
    s.crossing_lag = float("crossing_lag", s.crossing_lag)?;
    s.lateral_offset = float("lateral_offset", s.lateral_offset)?;
    s.repulsion = float("repulsion", s.repulsion)?;
    s.lag_spread = float("lag_spread", s.lag_spread)?;
    s.speed_spread = float("speed_spread", s.speed_spread)?;
    if eval {
        s.lag_spread = float("eval_lag_spread", s.lag_spread)?;
    }
    s.obs_len = model.obs_len;
    s.pred_len = model.pred_len;
    Ok(s)
}

const DATA_KEYS: &[&str] = &[
    "source",
    "kind",
    "scenes",
    "seed",
    "eval_scenes",
    "eval_seed",
    "speed",
    "jitter",
    "crossing_lag",
    "lateral_offset",
    "repulsion",
    "lag_spread",
    "speed_spread",
    "eval_lag_spread",
    "files",
    "held_out",
    "stride",
];

fn load_split(cfg: &Config, common: &Common, model: &ModelConfig) -> Result<DataSplit> {
    let d = cfg.section("data");
    if let Some(k) = d.keys().find(|k| !DATA_KEYS.contains(&k.as_str())) {
        return Err(CliError::Usage(format!("unknown data key `{k}`")));
    }
    match d.get("source").map(String::as_str).unwrap_or("synth") {
        "synth" => {
            let t = synth_config(cfg, model, false)?;
            let e = synth_config(cfg, model, true)?;
            Ok(DataSplit {
                description: format!("synthetic {} ({} train / {} eval scenes)", t.kind.as_str(), t.n_scenes, e.n_scenes),
                train: data::synth_with(&t),
                eval: data::synth_with(&e),
            })
        }
        "files" => {
            let root = common
                .data_root
                .clone()
                .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("."));
            let paths: Vec<PathBuf> = match d.get("files") {
                Some(list) => list.split(',').map(|f| root.join(f.trim())).collect(),
                None => {
                    let mut v: Vec<PathBuf> = std::fs::read_dir(&root)
                        .map_err(|e| CliError::Data(format!("cannot list {}: {e}", root.display())))?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
                        .collect();
                    v.sort();
                    v
                }
            };
            if paths.is_empty() {
                return Err(CliError::Data(format!("no dataset files under {}", root.display())));
            }
            let datasets: Vec<Dataset> = paths.iter().map(|p| load_dataset(p)).collect::<std::result::Result<_, _>>()?;
            for w in datasets.iter().flat_map(|d| d.warnings.iter()) {
                eprintln!("warning: {w}");
            }
            let stride = d
                .get("stride")
                .map_or(Ok(1), |v| v.parse().map_err(|_| CliError::Usage(format!("bad value `{v}` for `data.stride`"))))?;
            match d.get("held_out") {
                Some(h) => {
                    let (split, train, eval) = leave_one_out(&datasets, h, model.obs_len, model.pred_len, stride)?;
                    Ok(DataSplit {
                        description: format!("train on {} / test on {}", split.train.join("+"), split.held_out),
                        train,
                        eval,
                    })
                }
                None => {
                    let windows: Vec<SceneWindow> = datasets
                        .iter()
                        .flat_map(|d| make_windows(&d.records, model.obs_len, model.pred_len, stride, &d.name))
                        .collect();
                    Ok(DataSplit {
                        description: format!("{} files, train = eval", datasets.len()),
                        train: windows.clone(),
                        eval: windows,
                    })
                }
            }
        }
        other => Err(CliError::Usage(format!("unknown data source `{other}` (synth | files)"))),
    }
}

fn report_line(r: &MetricReport) -> String {
    format!(
        "ADE {:.4} m  FDE {:.4} m  best-of-k ADE {:.4} m  FDE {:.4} m  near-collision {:.2}%  ({} scenes, {} pedestrians)",
        r.ade, r.fde, r.best_of_k_ade, r.best_of_k_fde, r.near_collision_pct, r.n_scenes, r.n_peds
    )
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    ensure_dir(&a.out)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let mut t = Trainer::from_checkpoint(ck)?;
            if let Some(e) = cfg.get("train", "epochs") {
                t.cfg.set("epochs", e)?;
            }
            t
        }
        None => Trainer::new(model_config(&cfg)?, train_config(&cfg)?)?,
    };
    let split = load_split(&cfg, &a.common, &trainer.model.cfg)?;
    if split.train.is_empty() {
        return Err(CliError::Data("no training windows".into()));
    }
    println!("data: {}", split.description);
    let prepared = training::prepare(&trainer.model.cfg, &split.train)?;
    let eval = (!split.eval.is_empty()).then_some(split.eval.as_slice());
    let target = trainer.cfg.epochs;
    while trainer.epoch < target {
        let before = trainer.curve.len();
        trainer.cfg.epochs = trainer.epoch + 1;
        trainer.fit(&prepared, eval)?;
        let summary: Vec<String> = trainer.curve[before..].iter().map(|r| format!("{} {:.5}", r.term, r.value)).collect();
        println!("epoch {}/{}: {}", trainer.epoch, target, summary.join(", "));
    }
    trainer.cfg.epochs = target;
    let ck_path = a.out.join(CHECKPOINT_FILE);
    trainer.checkpoint().save(&ck_path)?;
    let loss_path = write_file(&a.out.join("loss.csv"), &curve_csv(&trainer.curve))?;
    println!("wrote {} and {}", ck_path.display(), loss_path.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(CliError::Data(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

/// Evaluation windows for `ck`; an explicit `model.pred_len` or
/// `model.obs_len` builds windows of that length (and is then rejected
/// by evaluation if it disagrees with the checkpoint).
fn eval_windows(cfg: &Config, common: &Common, ck: &Checkpoint) -> Result<Vec<SceneWindow>> {
    let mut model = ck.model.clone();
    for key in ["obs_len", "pred_len"] {
        if let Some(v) = cfg.get("model", key) {
            model.set(key, v)?;
        }
    }
    Ok(load_split(cfg, common, &model)?.eval)
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let windows = eval_windows(&cfg, &a.common, &ck)?;
    let report = training::evaluate(&ck, &windows, a.k, a.seed)?;
    ensure_dir(&a.out)?;
    let path = write_file(&a.out.join("metrics.csv"), &report.to_csv())?;
    println!("{}", report_line(&report));
    println!("wrote {}", path.display());
    Ok(())
}

fn scene_plot(title: String, scene: &SceneWindow, samples: Vec<Vec<Vec<scan_core::geometry::Point>>>) -> ScenePlot {
    ScenePlot {
        title,
        ped_ids: scene.ped_ids.clone(),
        observed: (0..scene.num_peds()).map(|p| scene.observed(p)).collect(),
        truth: scene.futures(),
        truth_mask: scene.future_masks(),
        samples,
    }
}

/// Writes trajectory plots for the first `max_scenes` scenes and the
/// domain heatmap, each with its CSV. Returns the files written.
pub fn emit_plots(ck: &Checkpoint, scenes: &[SceneWindow], out_dir: &Path, k: usize, seed: u64, max_scenes: usize) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let mut files = Vec::new();
    for (i, scene) in scenes.iter().filter(|s| !s.is_empty()).take(max_scenes).enumerate() {
        let preds = training::predict_samples(ck, scene, k, seed.wrapping_add(i as u64))?;
        let plot = scene_plot(
            format!("{} @ frame {}", scene.source, scene.start_frame),
            scene,
            preds.into_iter().map(|p| p.positions).collect(),
        );
        files.push(write_file(&out_dir.join(format!("trajectories_{i:03}.csv")), &plot.csv())?);
        files.push(write_file(&out_dir.join(format!("trajectories_{i:03}.svg")), &plot.svg())?);
    }
    let grid = ck.params.get("domain").map_err(|e| CliError::Data(e.to_string()))?;
    files.push(write_file(&out_dir.join("domain.csv"), &plots::domain_table(grid))?);
    files.push(write_file(&out_dir.join("domain.svg"), &plots::domain_svg(grid, &ck.model.bins))?);
    Ok(files)
}

fn predict(a: PredictArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let windows = eval_windows(&cfg, &a.common, &ck)?;
    ensure_dir(&a.out)?;
    let k = if ck.is_generative() { a.k.max(1) } else { 1 };
    let mut csv = String::from("scene,source,start_frame,sample,ped_id,step,x,y\n");
    for (s, scene) in windows.iter().enumerate() {
        let preds = training::predict_samples(&ck, scene, k, a.seed.wrapping_add(s as u64))?;
        for (i, p) in preds.iter().enumerate() {
            for (ped, steps) in p.positions.iter().enumerate() {
                for (t, pt) in steps.iter().enumerate() {
                    let _ = writeln!(
                        csv,
                        "{s},{},{},{i},{},{t},{},{}",
                        scene.source, scene.start_frame, scene.ped_ids[ped], pt[0], pt[1]
                    );
                }
            }
        }
    }
    let mut files = vec![write_file(&a.out.join("predictions.csv"), &csv)?];
    files.extend(emit_plots(&ck, &windows, &a.out, k, a.seed, a.plots)?);
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    ensure_dir(&a.out)?;
    let base_model = model_config(&cfg)?;
    let base_train = train_config(&cfg)?;
    let header = MetricReport::CSV_HEADER;
    match a.kind {
        SweepKind::Horizon | SweepKind::Discretization => {
            let (name, values): (&str, Vec<f64>) = match a.kind {
                SweepKind::Horizon => ("pred_len", parse_list(&cfg, "horizons", "8,12,20")?),
                _ => ("delta", parse_list(&cfg, "deltas", "15,30,45,90")?),
            };
            let mut csv = format!("{name},{header}\n");
            for v in values {
                let mut model = base_model.clone();
                match a.kind {
                    SweepKind::Horizon => model.pred_len = v as usize,
                    _ => model.bins = BinSpec::uniform(v).map_err(|e| CliError::Usage(e.to_string()))?,
                }
                let split = load_split(&cfg, &a.common, &model)?;
                let out = if base_train.gan.is_some() {
                    training::train_gan(&split.train, None, model, base_train.clone())?
                } else {
                    training::train_deterministic(&split.train, None, model, base_train.clone())?
                };
                let report = training::evaluate(&out.checkpoint, &split.eval, None, 0)?;
                println!("{name} {v}: {}", report_line(&report));
                let _ = writeln!(csv, "{v},{}", report.csv_row());
            }
            let path = write_file(&a.out.join(format!("sweep_{name}.csv")), &csv)?;
            println!("wrote {}", path.display());
        }
        SweepKind::Diversity => {
            let ks: Vec<usize> = parse_list(&cfg, "ks", "1,4")?;
            let lambdas: Vec<f64> = parse_list(&cfg, "lambdas", "0,1")?;
            let samples: usize = cfg
                .get("sweep", "samples")
                .map_or(Ok(50), |v| v.parse().map_err(|_| CliError::Usage(format!("bad value `{v}` for `sweep.samples`"))))?;
            let split = load_split(&cfg, &a.common, &base_model)?;
            let scene = split
                .eval
                .iter()
                .find(|s| !s.is_empty())
                .ok_or_else(|| CliError::Data("no evaluation windows".into()))?;
            let mut csv = format!("k,lambda,spread,{header}\n");
            let mut grid = FanGrid { cells: Vec::new() };
            for &k in &ks {
                for &lambda in &lambdas {
                    let mut t = base_train.clone();
                    let mut gan = t.gan.unwrap_or_default();
                    gan.k = k;
                    gan.lambda = lambda;
                    t.gan = Some(gan);
                    let out = training::train_gan(&split.train, None, base_model.clone(), t)?;
                    let ck = out.checkpoint;
                    let model = ScanModel::new(ck.model.clone())?;
                    let noise = NoiseSpec { dim: ck.model.noise_dim };
                    let mut rng = scan_core::rng::stream(0, "sweep");
                    let mut spread = 0.0;
                    let mut n = 0usize;
                    for s in split.eval.iter().filter(|s| !s.is_empty()) {
                        let p = PreparedScene::new(&ck.model, s)?;
                        let draws = generative::sample_predictions(&model, &ck.params, &p, k.max(2), &noise, &mut rng)?;
                        spread += mean_pairwise_distance(&draws, &s.future_masks());
                        n += 1;
                    }
                    let spread = spread / n.max(1) as f64;
                    let report = training::evaluate(&ck, &split.eval, Some(k), 0)?;
                    println!("{}: spread {spread:.4} m, {}", plots::fan_title(k, lambda), report_line(&report));
                    let _ = writeln!(csv, "{k},{lambda},{spread},{}", report.csv_row());
                    let p = PreparedScene::new(&ck.model, scene)?;
                    let mut rng = scan_core::rng::stream(0, "fan");
                    let draws = generative::sample_predictions(&model, &ck.params, &p, samples, &noise, &mut rng)?;
                    grid.cells.push((k, lambda, scene_plot(plots::fan_title(k, lambda), scene, draws)));
                }
            }
            for f in [
                write_file(&a.out.join("sweep_diversity.csv"), &csv)?,
                write_file(&a.out.join("diversity_fan.csv"), &grid.csv())?,
                write_file(&a.out.join("diversity_fan.svg"), &grid.svg())?,
            ] {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn inspect_domain(a: InspectArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    ensure_dir(&a.out)?;
    let grid = ck.params.get("domain").map_err(|e| CliError::Data(e.to_string()))?;
    let spec = &ck.model.bins;
    println!(
        "domain: {} bearing bins x {} heading bins ({}° x {}°), min {:.4} m, max {:.4} m",
        spec.m,
        spec.n,
        spec.delta_theta,
        spec.delta_phi,
        grid.values.iter().cloned().fold(f64::INFINITY, f64::min),
        grid.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    );
    for f in [
        write_file(&a.out.join("domain.csv"), &plots::domain_table(grid))?,
        write_file(&a.out.join("domain.svg"), &plots::domain_svg(grid, spec))?,
    ] {
        println!("wrote {}", f.display());
    }
    Ok(())
}

/// Scenes laid end to end with a one-frame gap and distinct pedestrian
/// ids, so re-windowing the file recovers each scene exactly once.
pub fn scenes_to_records(scenes: &[SceneWindow]) -> Vec<RawRecord> {
    let mut out = Vec::new();
    let mut frame0 = 0i64;
    let mut id0 = 0u64;
    for s in scenes {
        for (t, frame) in s.positions.iter().enumerate() {
            for (p, pt) in frame.iter().enumerate() {
                if s.presence[t][p] {
                    out.push(RawRecord {
                        frame_id: 10 * (frame0 + t as i64),
                        ped_id: id0 + p as u64 + 1,
                        x: pt[0],
                        y: pt[1],
                    });
                }
            }
        }
        frame0 += s.len() as i64 + 1;
        id0 += s.num_peds() as u64;
    }
    out
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let model = model_config(&cfg)?;
    ensure_dir(&a.out)?;
    let t = synth_config(&cfg, &model, false)?;
    let scenes = data::synth_with(&t);
    let path = write_file(
        &a.out.join(format!("{}.txt", t.kind.as_str())),
        &data::format_records(&scenes_to_records(&scenes)),
    )?;
    println!("wrote {} ({} scenes)", path.display(), scenes.len());
    Ok(())
}
