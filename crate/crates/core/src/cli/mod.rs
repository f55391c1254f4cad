//! The `occflow` command line: dataset generation, training, evaluation,
//! decoder benchmarks and SVG plots. Every command writes the configuration
//! it resolved into its output directory.

pub mod plot;

use crate::bench::{self, BenchConfig, BenchError};
use crate::encode::{EncodeConfig, EncodeError, GridMeta};
use crate::eval::{
    build_frame, pr_curve, report_from_frame, DecoderKind, EvalConfig, EvalError, EvalFrame, MetricsReport, ModelPredictor,
    OraclePredictor, Predictor,
};
use crate::model::{load_checkpoint, Model, ModelConfig, ModelError, ModelFrame};
use crate::scene::{generate_scenario, load_shard, write_shard, QueryGrid, Scenario, SceneConfig, SceneError, SensorConfig};
use crate::train::{append_log, build_examples, Example, TrainConfig, TrainError, Trainer, LOG_HEADER};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const BENCH_FILE: &str = "bench.csv";
pub const THREADS_ENV: &str = "OCCFLOW_THREADS";

/// Spacing in meters of the flow-field sample grid written by `eval`.
const FIELD_RES: f64 = 1.0;
/// PR points kept per timestep.
const PR_POINTS: usize = 200;

// ---------------------------------------------------------------------------
// Exit codes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage,
    Data,
    Numerical,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        match self {
            ExitKind::Usage => 1,
            ExitKind::Data => 2,
            ExitKind::Numerical => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub kind: ExitKind,
    pub msg: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { kind: ExitKind::Usage, msg: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self { kind: ExitKind::Data, msg: msg.into() }
    }

    fn context(mut self, ctx: impl fmt::Display) -> Self {
        self.msg = format!("{ctx}: {}", self.msg);
        self
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Failure {}

impl From<SceneError> for Failure {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::InvalidConfig(_) | SceneError::BadResolution(_) => Failure::usage(e.to_string()),
            _ => Failure::data(e.to_string()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => Failure::usage(e.to_string()),
            _ => Failure::data(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => Failure { kind: ExitKind::Numerical, msg: e.to_string() },
            TrainError::Config(_) => Failure::usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Scene(s) => s.into(),
            _ => Failure::data(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(_) => Failure::usage(e.to_string()),
            EvalError::Model(m) => m.into(),
            EvalError::Scene(s) => s.into(),
            _ => Failure::data(e.to_string()),
        }
    }
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::TooFewReps(_) | BenchError::BadCounts => Failure::usage(e.to_string()),
            BenchError::Model(m) => m.into(),
            BenchError::Scene(s) => s.into(),
            _ => Failure::data(e.to_string()),
        }
    }
}

impl From<EncodeError> for Failure {
    fn from(e: EncodeError) -> Self {
        Failure::data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Failure>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Scenes written by `gen`.
    pub scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { scenes: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    /// Strictly ascending query counts.
    pub counts: Vec<usize>,
    pub reps: usize,
    pub parallel: bool,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            counts: vec![100, 1_000, 10_000, 100_000],
            reps: 7,
            parallel: false,
        }
    }
}

/// Everything a command needs, layered from defaults, the configuration of
/// the run being consumed, `--config` and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base seed of `gen`; `--seed` also overrides the model, train and
    /// sensor seeds.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub scene: SceneConfig,
    pub sensor: SensorConfig,
    pub encode: EncodeConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchSettings,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate().map_err(|e| Failure::usage(e.to_string()))?;
        self.model.validate().map_err(|e| Failure::usage(e.to_string()))?;
        self.train.validate().map_err(|e| Failure::usage(e.to_string()))?;
        self.eval.validate().map_err(|e| Failure::usage(e.to_string()))?;
        let e = &self.encode;
        if !(e.cell_m > 0.0 && e.height_bins > 0 && e.max_height > e.min_height) {
            return Err(Failure::usage("invalid encode config: cell_m, height_bins and the height range must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        write_file(&dir.join(CONFIG_FILE), self.to_toml())
    }

    /// Applies `--seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.sensor.seed = seed;
    }
}

/// Parses one TOML layer. Syntax errors carry line and column; unknown or
/// mistyped fields are named.
pub fn parse_layer(text: &str, origin: &Path) -> Result<toml::Table> {
    toml::from_str::<RunConfig>(text).map_err(|e| Failure::usage(format!("{}: {e}", origin.display())))?;
    text.parse::<toml::Table>().map_err(|e| Failure::usage(format!("{}: {e}", origin.display())))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Merges the files in order, later layers winning field by field.
pub fn load_layers(paths: &[PathBuf]) -> Result<RunConfig> {
    let mut acc = toml::Table::new();
    for p in paths {
        let text = fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
        merge(&mut acc, parse_layer(&text, p)?);
    }
    toml::Value::Table(acc)
        .try_into()
        .map_err(|e: toml::de::Error| Failure::usage(e.to_string()))
}

// ---------------------------------------------------------------------------
// Arguments
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "occflow", version, about = "Continuous occupancy and flow queries on synthetic BEV scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset shard of synthetic scenes.
    Gen(GenArgs),
    /// Train a model on a shard.
    Train(TrainArgs),
    /// Evaluate a checkpoint or the label oracle on a shard.
    Eval(EvalArgs),
    /// Time the decoders over a range of query counts.
    Bench(BenchArgs),
    /// Render an SVG figure from CSV outputs.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration layered over defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of scenes; overrides `data.scenes`.
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Shard directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Deterministic mode.
    #[arg(long)]
    pub det: bool,
    /// Offset count `K`.
    #[arg(long)]
    pub k: Option<usize>,
    /// Train only this decoder.
    #[arg(long)]
    pub decoder: Option<DecoderKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Training run directory or checkpoint directory.
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate only this decoder; default is every decoder in the checkpoint.
    #[arg(long)]
    pub decoder: Option<DecoderKind>,
    /// Evaluate the exact label oracle instead of a model.
    #[arg(long)]
    pub oracle: bool,
    /// Seconds between evaluated timesteps.
    #[arg(long)]
    pub temporal_res: Option<f64>,
    /// Accepted for symmetry with `train`; evaluation is always deterministic.
    #[arg(long)]
    pub det: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training run or checkpoint directory; an untrained model from the
    /// configuration otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub decoder: Option<DecoderKind>,
    /// Comma-separated ascending query counts.
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PlotKind {
    Pr,
    Reliability,
    OverTime,
    Bench,
    FlowField,
    OccupancyFilm,
}

impl PlotKind {
    pub fn name(self) -> &'static str {
        match self {
            PlotKind::Pr => "pr",
            PlotKind::Reliability => "reliability",
            PlotKind::OverTime => "over-time",
            PlotKind::Bench => "bench",
            PlotKind::FlowField => "flow-field",
            PlotKind::OccupancyFilm => "occupancy-film",
        }
    }
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long, value_enum)]
    pub kind: PlotKind,
    /// CSV inputs; several series are overlaid where the kind allows it.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Timestep shown by `flow-field`; the first in the file by default.
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Resolved arguments of a plot, stored next to the figure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotConfig {
    pub kind: PlotKind,
    pub inputs: Vec<PathBuf>,
    pub t: Option<f64>,
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitKind::Usage.code() } else { 0 };
        }
    };
    if let Err(f) = configure_threads() {
        eprintln!("error: {f}");
        return f.kind.code();
    }
    match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.kind.code()
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A second initialisation in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Plot(a) => cmd_plot(&a),
    }
}

/// Defaults, then `inherited` (a run's stored config), then `--config`,
/// then `--seed` and `--out`.
fn resolve(common: &Common, inherited: Option<PathBuf>) -> Result<RunConfig> {
    let layers: Vec<PathBuf> = inherited.into_iter().chain(common.config.clone()).collect();
    let mut cfg = load_layers(&layers)?;
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    cfg.out = Some(common.out.clone());
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

pub fn cmd_gen(a: &GenArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, None)?;
    if let Some(n) = a.count {
        cfg.data.scenes = n;
    }
    cfg.validate()?;
    if cfg.data.scenes == 0 {
        return Err(Failure::usage("data.scenes must be at least 1"));
    }
    cfg.save(&a.common.out)?;
    let m = write_shard(&a.common.out, &cfg.scene, cfg.seed, cfg.data.scenes)?;
    log::info!("wrote {} scenes to {}", m.count, a.common.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Data loading
// ---------------------------------------------------------------------------

/// Frame shared by every scenario of a shard.
pub fn shard_frame(scenes: &[Scenario], enc: &EncodeConfig) -> Result<ModelFrame> {
    let first = scenes.first().ok_or_else(|| Failure::data("shard has no scenes"))?;
    for s in scenes {
        if s.roi != first.roi || s.history_sweeps != first.history_sweeps || s.horizon != first.horizon || s.label_dt != first.label_dt {
            return Err(Failure::data("scenes of the shard differ in RoI, history, horizon or label step"));
        }
    }
    Ok(ModelFrame {
        grid: GridMeta::new(first.roi, first.history_sweeps, enc),
        horizon: first.horizon,
        label_dt: first.label_dt,
    })
}

pub fn load_examples(dir: &Path, sensor: &SensorConfig, enc: &EncodeConfig) -> Result<(Vec<Example>, ModelFrame)> {
    let scenes = load_shard(dir).map_err(|e| Failure::from(e).context(dir.display()))?;
    let frame = shard_frame(&scenes, enc)?;
    Ok((build_examples(scenes, sensor, enc)?, frame))
}

/// The checkpoint directory inside a training run, or `p` itself.
pub fn checkpoint_dir(p: &Path) -> PathBuf {
    let inner = p.join(CHECKPOINT_DIR);
    if inner.join("manifest.json").exists() {
        inner
    } else {
        p.to_path_buf()
    }
}

/// The stored config of the run that produced `p`, if present.
fn run_config_of(p: &Path) -> Option<PathBuf> {
    [p.join(CONFIG_FILE), checkpoint_dir(p).join("..").join(CONFIG_FILE)]
        .into_iter()
        .find(|c| c.exists())
}

/// Encoding settings that reproduce the model's input frame.
fn encode_for(model: &Model<f32>, base: &EncodeConfig) -> EncodeConfig {
    let g = &model.frame.grid;
    EncodeConfig {
        cell_m: g.cell_m,
        height_bins: g.height_bins,
        min_height: g.min_height,
        max_height: g.max_height,
        binarize: base.binarize,
    }
}

fn check_frame(model: &Model<f32>, frame: &ModelFrame) -> Result<()> {
    if model.frame != *frame {
        return Err(Failure::data(format!(
            "shard frame {frame:?} does not match the checkpoint frame {:?}",
            model.frame
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let out = &a.common.out;
    let ck = out.join(CHECKPOINT_DIR);
    let inherited = if a.resume { run_config_of(out) } else { None };
    let mut cfg = resolve(&a.common, inherited)?;
    if a.det {
        cfg.train.deterministic = true;
    }
    if let Some(k) = a.k {
        cfg.model.k = k;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    match a.decoder {
        Some(DecoderKind::Implicit) => (cfg.model.implicit, cfg.model.explicit) = (true, false),
        Some(DecoderKind::Explicit) => (cfg.model.implicit, cfg.model.explicit) = (false, true),
        None => {}
    }
    cfg.validate()?;
    cfg.save(out)?;
    let (data, frame) = load_examples(&a.data, &cfg.sensor, &cfg.encode)?;
    let log_path = out.join(TRAIN_LOG);
    let mut trainer = if a.resume {
        let t = Trainer::resume(&ck, Some(cfg.train.epochs))?;
        check_frame(&t.model, &frame)?;
        t
    } else {
        let _ = fs::remove_file(&log_path);
        Trainer::new(Model::new(cfg.model.clone(), frame)?, cfg.train.clone())?
    };
    if !log_path.exists() {
        write_file(&log_path, format!("{LOG_HEADER}\n"))?;
    }
    create_dir(&ck)?;
    trainer.run(&data, |t, row| {
        append_log(&log_path, std::slice::from_ref(row))?;
        t.save(&ck)
    })?;
    trainer.save(&ck)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// One evaluated predictor.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub name: String,
    pub report: MetricsReport,
}

pub const SUMMARY_HEADER: &str = "name,map,soft_iou,ece_mean,ece_sum,epe,fg_map,fg_soft_iou";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn summary_csv(rows: &[EvalOutput]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let m = &r.report;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.name,
            opt(m.map),
            opt(m.soft_iou),
            m.ece_mean,
            m.ece_sum,
            opt(m.epe),
            opt(m.fg_map),
            opt(m.fg_soft_iou)
        )
        .unwrap();
    }
    s
}

/// `t,recall,precision` rows, at most [`PR_POINTS`] per timestep.
pub fn pr_csv(frame: &EvalFrame) -> String {
    let mut s = String::from("t,recall,precision\n");
    for st in &frame.steps {
        let curve = pr_curve(&st.prob, &st.occ);
        let stride = curve.len().div_ceil(PR_POINTS).max(1);
        let last = curve.len().saturating_sub(1);
        for (i, (r, p)) in curve.iter().enumerate() {
            if i % stride == 0 || i == last {
                writeln!(s, "{},{r},{p}", st.t).unwrap();
            }
        }
    }
    s
}

pub const FIELD_HEADER: &str = "t,x,y,occ_prob,flow_dx,flow_dy,offset_dx,offset_dy";

/// Predictions on a coarse grid of the first scene at every label step.
/// Offsets are the first reference offset of the implicit decoder.
pub fn field_csv(p: &dyn Predictor, model: Option<(&Model<f32>, DecoderKind)>, ex: &Example) -> Result<String> {
    let scn = &ex.scenario;
    let grid = QueryGrid::new(scn.roi, scn.horizon, FIELD_RES, scn.label_dt)?;
    let qs = grid.points();
    let preds = p.predict(ex, &qs)?;
    let offsets = match model {
        Some((m, DecoderKind::Implicit)) if m.config.k > 0 => {
            let fm = m.encode_scene(&ex.lidar, &ex.map)?;
            let (_, intro) = m.decode_queries(&fm, &qs)?;
            Some(intro.into_iter().map(|i| i.offsets[0]).collect::<Vec<_>>())
        }
        _ => None,
    };
    let mut s = format!("{FIELD_HEADER}\n");
    for (i, (q, pr)) in qs.iter().zip(&preds).enumerate() {
        let (ox, oy) = match &offsets {
            Some(o) => (o[i][0].to_string(), o[i][1].to_string()),
            None => (String::new(), String::new()),
        };
        writeln!(s, "{},{},{},{},{},{},{ox},{oy}", q.t, q.x, q.y, pr.occ_prob, pr.flow.dx, pr.flow.dy).unwrap();
    }
    Ok(s)
}

fn write_eval(dir: &Path, name: &str, p: &dyn Predictor, model: Option<(&Model<f32>, DecoderKind)>, data: &[Example], cfg: &EvalConfig) -> Result<EvalOutput> {
    let frame = build_frame(p, data, cfg)?;
    let report = report_from_frame(&frame, cfg.ece_bins);
    report.write(dir, &format!("metrics_{name}"))?;
    write_file(&dir.join(format!("pr_{name}.csv")), pr_csv(&frame))?;
    write_file(&dir.join(format!("field_{name}.csv")), field_csv(p, model, &data[0])?)?;
    Ok(EvalOutput { name: name.to_string(), report })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let out = &a.common.out;
    let inherited = a.checkpoint.as_deref().and_then(run_config_of);
    let mut cfg = resolve(&a.common, inherited)?;
    if let Some(r) = a.temporal_res {
        cfg.eval.temporal_res = r;
    }
    cfg.validate()?;
    let model = match (&a.checkpoint, a.oracle) {
        (Some(p), false) => Some(load_checkpoint(&checkpoint_dir(p))?),
        _ => None,
    };
    if let Some(m) = &model {
        cfg.encode = encode_for(m, &cfg.encode);
    }
    cfg.save(out)?;
    let (data, frame) = load_examples(&a.data, &cfg.sensor, &cfg.encode)?;
    let mut rows = Vec::new();
    match &model {
        None => rows.push(write_eval(out, "oracle", &OraclePredictor, None, &data, &cfg.eval)?),
        Some(m) => {
            check_frame(m, &frame)?;
            let decoders: Vec<DecoderKind> = match a.decoder {
                Some(d) => vec![d],
                None => [(m.has_implicit(), DecoderKind::Implicit), (m.has_explicit(), DecoderKind::Explicit)]
                    .into_iter()
                    .filter_map(|(has, d)| has.then_some(d))
                    .collect(),
            };
            for d in decoders {
                let name = decoder_name(d);
                if !has_decoder(m, d) {
                    return Err(Failure::usage(format!("checkpoint has no {name} decoder")));
                }
                let p = ModelPredictor { model: m, decoder: d };
                rows.push(write_eval(out, name, &p, Some((m, d)), &data, &cfg.eval)?);
            }
        }
    }
    write_file(&out.join(SUMMARY_FILE), summary_csv(&rows))
}

fn decoder_name(d: DecoderKind) -> &'static str {
    match d {
        DecoderKind::Implicit => "implicit",
        DecoderKind::Explicit => "explicit",
    }
}

fn has_decoder(m: &Model<f32>, d: DecoderKind) -> bool {
    match d {
        DecoderKind::Implicit => m.has_implicit(),
        DecoderKind::Explicit => m.has_explicit(),
    }
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

pub fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let out = &a.common.out;
    let inherited = a.checkpoint.as_deref().and_then(run_config_of);
    let mut cfg = resolve(&a.common, inherited)?;
    if let Some(c) = &a.counts {
        cfg.bench.counts = c.clone();
    }
    if let Some(r) = a.reps {
        cfg.bench.reps = r;
    }
    if a.parallel {
        cfg.bench.parallel = true;
    }
    if let Some(k) = a.k {
        cfg.model.k = k;
    }
    if a.checkpoint.is_none() {
        // An untrained model carries both decoders so both can be timed.
        cfg.model.implicit = true;
        cfg.model.explicit = true;
    }
    cfg.validate()?;
    let model = match &a.checkpoint {
        Some(p) => {
            let m = load_checkpoint(&checkpoint_dir(p))?;
            cfg.encode = encode_for(&m, &cfg.encode);
            m
        }
        None => {
            let roi = cfg.scene.roi();
            let frame = ModelFrame {
                grid: GridMeta::new(roi, cfg.scene.history_sweeps, &cfg.encode),
                horizon: cfg.scene.horizon,
                label_dt: cfg.scene.label_dt,
            };
            Model::new(cfg.model.clone(), frame)?
        }
    };
    cfg.save(out)?;
    let scn = generate_scenario(&cfg.scene, cfg.seed)?;
    let ex = Example::new(scn, &cfg.sensor, &cfg.encode)?;
    let fm = model.encode_scene(&ex.lidar, &ex.map)?;
    if fm.frame != model.frame {
        return Err(Failure::data("scene config does not match the checkpoint frame"));
    }
    let bcfg = BenchConfig {
        reps: cfg.bench.reps,
        parallel: cfg.bench.parallel,
        seed: cfg.seed,
    };
    let decoders: Vec<DecoderKind> = match a.decoder {
        Some(d) => vec![d],
        None => [DecoderKind::Implicit, DecoderKind::Explicit]
            .into_iter()
            .filter(|&d| has_decoder(&model, d))
            .collect(),
    };
    let mut records = Vec::new();
    for d in decoders {
        if !has_decoder(&model, d) {
            return Err(Failure::usage(format!("model has no {} decoder", decoder_name(d))));
        }
        records.extend(bench::bench_decoder(&model, &fm, d, &cfg.bench.counts, &bcfg)?);
    }
    bench::write_csv(&out.join(BENCH_FILE), &records)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// plot
// ---------------------------------------------------------------------------

pub fn cmd_plot(a: &PlotArgs) -> Result<()> {
    let pc = PlotConfig {
        kind: a.kind,
        inputs: a.input.clone(),
        t: a.t,
    };
    create_dir(&a.out)?;
    let svg = plot::render(&pc)?;
    let name = pc.kind.name();
    write_file(&a.out.join(format!("{name}.toml")), toml::to_string_pretty(&pc).expect("plot config serializes"))?;
    write_file(&a.out.join(format!("{name}.svg")), svg)
}
