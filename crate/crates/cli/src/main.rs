mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use cine_inr::align::align_stack;
use cine_inr::dataset::{read_dataset, write_dataset, write_ground_truth};
use cine_inr::metrics::{evaluate_pair, evaluate_unregistered, fmt};
use cine_inr::phantom::{decimate_series, inject_misalignment, make_phantom};
use cine_inr::pipeline::{apply_alignment, registration_times, run_pipeline, write_outputs};
use cine_inr::registration::{register_times, JacMode, RegResult};
use cine_inr::report::{loss_chart, strain_chart, write_loss_csv, write_text};
use cine_inr::stats::{kruskal_wallis, SIGNIFICANCE};
use cine_inr::strain::{peak_strain, strain_curves, write_curves_csv, write_peaks_csv, Component, StrainMeasure, StrainSetup};
use cine_inr::upsample::{upsample_series, UpsampleSpec};
use cine_inr::volume::ViewSet;

use config::StudyConfig;

/// Cine MRI motion estimation with sine-activated coordinate networks.
#[derive(Debug, Parser)]
#[command(name = "cine-inr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Seed for every stochastic stage (overrides the config file) [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Record the run as deterministic; reductions are always ordered
    #[arg(long, global = true)]
    deterministic: bool,

    /// Worker threads (defaults to all cores)
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Flat JSON experiment file; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cine study with closed-form motion
    Phantom(PhantomArgs),
    /// Rigidly align short-axis slices to the long-axis views
    Align(AlignCmd),
    /// Increase through-plane resolution of the short-axis series
    Upsample(UpsampleCmd),
    /// Register every frame (or end systole) to end diastole
    Register(RegisterCmd),
    /// Radial and circumferential strain from trained networks
    Strain(StrainCmd),
    /// Overlap, Hausdorff and Jacobian metrics of trained networks
    Evaluate(EvaluateCmd),
    /// Kruskal-Wallis test on a column of several CSV files
    Stats(StatsCmd),
    /// align, upsample, register, strain and evaluate in one run
    Pipeline(PipelineCmd),
}

#[derive(Debug, Args)]
struct OutArg {
    /// Output directory
    #[arg(long, env = "CINE_INR_OUT")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PhantomArgs {
    #[command(flatten)]
    out: OutArg,
    /// Number of cine phases [default: 10]
    #[arg(long)]
    phases: Option<usize>,
    /// Largest injected per-slice shift in mm [default: 0]
    #[arg(long)]
    misalign: Option<f64>,
    /// Keep every k-th short-axis slice [default: 1]
    #[arg(long)]
    decimate: Option<usize>,
    /// Standard deviation of additive intensity noise [default: 0]
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Debug, Args)]
struct AlignArgs {
    /// Alignment iterations [default: 2000]
    #[arg(long)]
    align_iterations: Option<usize>,
    /// Alignment learning rate [default: 0.01]
    #[arg(long)]
    align_lr: Option<f64>,
    /// Bound on each translation component in mm [default: 20]
    #[arg(long)]
    max_shift: Option<f64>,
}

#[derive(Debug, Args)]
struct RegArgs {
    /// Registration iterations per pair [default: 2500]
    #[arg(long)]
    iterations: Option<usize>,
    /// Iterations for warm-started pairs after the first [default: same as --iterations]
    #[arg(long)]
    warm_iterations: Option<usize>,
    /// Registration learning rate [default: 0.0001]
    #[arg(long)]
    lr: Option<f64>,
    /// Coordinates per view and iteration [default: 10000]
    #[arg(long)]
    batch: Option<usize>,
    /// Jacobian weight in the myocardium [default: 0.05]
    #[arg(long)]
    alpha_fg: Option<f64>,
    /// Jacobian weight outside the myocardium [default: 0.0001]
    #[arg(long)]
    alpha_bg: Option<f64>,
    /// Jacobian regularization: weighted, uniform or off [default: weighted]
    #[arg(long)]
    jac_mode: Option<String>,
    /// Train every pair from a fresh network
    #[arg(long)]
    no_warm_start: bool,
    /// Drop the 4CH similarity term
    #[arg(long)]
    no_4ch: bool,
    /// Hidden units per layer [default: 256]
    #[arg(long)]
    hidden: Option<usize>,
    /// Hidden layers [default: 3]
    #[arg(long)]
    depth: Option<usize>,
    /// Sine frequency factor [default: 30]
    #[arg(long)]
    omega0: Option<f64>,
    /// Register only the end-systolic frame
    #[arg(long)]
    es_only: bool,
}

#[derive(Debug, Args)]
struct InArg {
    /// Input study directory
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Debug, Args)]
struct AlignCmd {
    #[command(flatten)]
    input: InArg,
    #[command(flatten)]
    out: OutArg,
    #[command(flatten)]
    align: AlignArgs,
}

#[derive(Debug, Args)]
struct UpsampleCmd {
    #[command(flatten)]
    input: InArg,
    #[command(flatten)]
    out: OutArg,
    /// Through-plane upsampling factor [default: 6]
    #[arg(long)]
    factor: Option<usize>,
}

#[derive(Debug, Args)]
struct RegisterCmd {
    #[command(flatten)]
    input: InArg,
    #[command(flatten)]
    out: OutArg,
    #[command(flatten)]
    reg: RegArgs,
}

#[derive(Debug, Args)]
struct StrainCmd {
    #[command(flatten)]
    input: InArg,
    /// Directory of trained networks (`pair_tXX.params` + `.json`)
    #[arg(long)]
    networks: PathBuf,
    #[command(flatten)]
    out: OutArg,
    /// Use ½(F + Fᵀ) − I instead of the Green-Lagrange tensor
    #[arg(long)]
    engineering: bool,
}

#[derive(Debug, Args)]
struct EvaluateCmd {
    #[command(flatten)]
    input: InArg,
    /// Directory of trained networks (`pair_tXX.params` + `.json`)
    #[arg(long)]
    networks: PathBuf,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Args)]
struct StatsCmd {
    /// One CSV file per group
    #[arg(long, num_args = 2.., required = true)]
    groups: Vec<PathBuf>,
    /// Column holding the values
    #[arg(long)]
    column: String,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Args)]
struct PipelineCmd {
    #[command(flatten)]
    input: InArg,
    #[command(flatten)]
    out: OutArg,
    #[command(flatten)]
    align: AlignArgs,
    #[command(flatten)]
    reg: RegArgs,
    /// Through-plane upsampling factor [default: 6]
    #[arg(long)]
    factor: Option<usize>,
    /// Skip slice alignment
    #[arg(long)]
    no_align: bool,
    /// Skip through-plane upsampling
    #[arg(long)]
    no_upsample: bool,
    /// Use ½(F + Fᵀ) − I instead of the Green-Lagrange tensor
    #[arg(long)]
    engineering: bool,
}

enum Failure {
    Usage(String),
    Core(cine_inr::Error),
}

impl From<cine_inr::Error> for Failure {
    fn from(e: cine_inr::Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(cine_inr::Error::Config(_)) => 1,
            Failure::Core(e) if e.is_numerical() => 3,
            Failure::Core(_) => 2,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

type Outcome<T> = Result<T, Failure>;

/// Record of one invocation, written as `run_manifest.json` in the output
/// directory.
#[derive(Debug, Serialize)]
struct RunManifest {
    subcommand: String,
    config: Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    seed: u64,
    deterministic: bool,
    jobs: Option<usize>,
    versions: Value,
    timings: Value,
    exit_status: u8,
    error: Option<String>,
}

struct Run {
    subcommand: &'static str,
    config: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    timings: Value,
    seed: u64,
}

impl Run {
    fn new(subcommand: &'static str) -> Self {
        Self {
            subcommand,
            config: Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: json!({}),
            seed: 0,
        }
    }
}

fn apply_align_args(study: &mut StudyConfig, a: &AlignArgs) {
    let c = &mut study.pipeline.align;
    if let Some(v) = a.align_iterations {
        c.iterations = v;
    }
    if let Some(v) = a.align_lr {
        c.lr = v;
    }
    if let Some(v) = a.max_shift {
        c.max_shift = v;
    }
}

fn apply_reg_args(study: &mut StudyConfig, a: &RegArgs) -> Outcome<()> {
    let c = &mut study.pipeline.register;
    if let Some(v) = a.iterations {
        c.iterations = v;
    }
    if a.warm_iterations.is_some() {
        c.warm_iterations = a.warm_iterations;
    }
    if let Some(v) = a.lr {
        c.lr = v;
    }
    if let Some(v) = a.batch {
        c.batch_sax = v;
        c.batch_4ch = v;
    }
    if let Some(v) = a.alpha_fg {
        c.alpha_fg = v;
    }
    if let Some(v) = a.alpha_bg {
        c.alpha_bg = v;
    }
    if let Some(m) = &a.jac_mode {
        c.jac_mode = match m.as_str() {
            "weighted" => JacMode::Weighted,
            "uniform" => JacMode::Uniform,
            "off" => JacMode::Off,
            other => return Err(Failure::Usage(format!("unknown --jac-mode `{other}` (weighted, uniform, off)"))),
        };
    }
    if a.no_warm_start {
        c.warm_start = false;
    }
    if a.no_4ch {
        c.use_4ch = false;
    }
    if let Some(v) = a.hidden {
        c.hidden = v;
    }
    if let Some(v) = a.depth {
        c.depth = v;
    }
    if let Some(v) = a.omega0 {
        c.omega0 = v;
    }
    if a.es_only {
        study.pipeline.es_only = true;
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Outcome<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Core(cine_inr::Error::Io { path: dir.to_path_buf(), source: e }))
}

fn load_views(dir: &Path) -> Outcome<(ViewSet, Option<cine_inr::phantom::GroundTruth>)> {
    Ok(read_dataset(dir)?)
}

/// Trained pairs in a networks directory, in time order.
fn load_networks(dir: &Path) -> Outcome<Vec<RegResult>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Failure::Core(cine_inr::Error::Io { path: dir.to_path_buf(), source: e }))?;
    let mut stems: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .filter_map(|n| n.strip_suffix(".params").map(str::to_string))
        .filter(|n| n.starts_with("pair_t"))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Failure::Core(cine_inr::Error::Config(format!(
            "no pair_tXX.params files in {}",
            dir.display()
        ))));
    }
    let mut out = stems
        .iter()
        .map(|s| RegResult::load(dir, s))
        .collect::<cine_inr::Result<Vec<_>>>()?;
    out.sort_by_key(|r| r.moving_index);
    Ok(out)
}

fn cmd_phantom(a: &PhantomArgs, study: &mut StudyConfig, seed: Option<u64>, run: &mut Run) -> Outcome<()> {
    let p = &mut study.phantom;
    if let Some(v) = a.phases {
        p.phases = v;
    }
    if let Some(v) = a.noise {
        p.noise_sigma = v;
    }
    if let Some(s) = seed {
        p.texture_seed = s;
    }
    if let Some(v) = a.misalign {
        study.misalign_shift = v;
    }
    if let Some(v) = a.decimate {
        study.decimate = v;
    }
    run.config = serde_json::to_value(&*study).unwrap_or(Value::Null);
    let (mut views, mut gt) = make_phantom(&study.phantom)?;
    if study.decimate > 1 {
        let sax = decimate_series(&views.sax, study.decimate)?;
        views = ViewSet::new(sax, views.ch4, views.ch2)?;
    }
    if study.misalign_shift > 0.0 {
        let (sax, shifts) = inject_misalignment(&views.sax, study.phantom.texture_seed, study.misalign_shift)?;
        views = ViewSet::new(sax, views.ch4, views.ch2)?;
        gt.shifts = Some(shifts.shifts().to_vec());
    }
    write_dataset(&a.out.out, &views, Some(&gt))?;
    run.outputs.push(a.out.out.clone());
    log::info!("wrote {} phases to {}", views.len(), a.out.out.display());
    Ok(())
}

fn cmd_align(a: &AlignCmd, study: &mut StudyConfig, run: &mut Run) -> Outcome<()> {
    apply_align_args(study, &a.align);
    run.config = serde_json::to_value(&study.pipeline.align).unwrap_or(Value::Null);
    run.inputs.push(a.input.input.clone());
    let (views, gt) = load_views(&a.input.input)?;
    let start = Instant::now();
    let result = align_stack(&views, &study.pipeline.align)?;
    run.timings = json!({ "align": start.elapsed().as_secs_f64() });
    let sax = apply_alignment(&views.sax, &result.translations)?;
    let aligned = ViewSet::new(sax, views.ch4, views.ch2)?;
    write_dataset(&a.out.out, &aligned, gt.as_ref())?;
    result.translations.write_csv(a.out.out.join("translations.csv"))?;
    run.outputs.push(a.out.out.clone());
    Ok(())
}

fn cmd_upsample(a: &UpsampleCmd, study: &mut StudyConfig, run: &mut Run) -> Outcome<()> {
    if let Some(f) = a.factor {
        study.pipeline.upsample = UpsampleSpec::linear(f);
    }
    run.config = serde_json::to_value(study.pipeline.upsample).unwrap_or(Value::Null);
    run.inputs.push(a.input.input.clone());
    let (views, gt) = load_views(&a.input.input)?;
    let sax = upsample_series(&views.sax, &study.pipeline.upsample)?;
    let out = ViewSet::new(sax, views.ch4, views.ch2)?;
    write_dataset(&a.out.out, &out, None)?;
    if let Some(gt) = gt {
        write_ground_truth(&a.out.out, &gt)?;
    }
    run.outputs.push(a.out.out.clone());
    Ok(())
}

fn cmd_register(a: &RegisterCmd, study: &mut StudyConfig, run: &mut Run) -> Outcome<()> {
    apply_reg_args(study, &a.reg)?;
    run.config = json!({ "register": study.pipeline.register, "es_only": study.pipeline.es_only });
    run.inputs.push(a.input.input.clone());
    let (views, _) = load_views(&a.input.input)?;
    let start = Instant::now();
    let times = registration_times(&views, study.pipeline.es_only);
    let results = register_times(&views, &study.pipeline.register, &times)?;
    run.timings = json!({ "register": start.elapsed().as_secs_f64() });
    let out = &a.out.out;
    let nets = out.join("networks");
    create_dir(&nets)?;
    for r in &results {
        r.save(&nets, &format!("pair_t{:02}", r.moving_index))?;
    }
    write_loss_csv(out.join("loss.csv"), &results)?;
    write_text(out.join("loss.svg"), &loss_chart(&results))?;
    run.outputs.push(out.clone());
    Ok(())
}

fn cmd_strain(a: &StrainCmd, study: &mut StudyConfig, run: &mut Run) -> Outcome<()> {
    if a.engineering {
        study.pipeline.strain_measure = StrainMeasure::Engineering;
    }
    run.config = json!({ "strain_measure": study.pipeline.strain_measure });
    run.inputs.extend([a.input.input.clone(), a.networks.clone()]);
    let (views, _) = load_views(&a.input.input)?;
    let results = load_networks(&a.networks)?;
    let ed = views.sax.ed_index();
    let setup = StrainSetup::from_mask(&views.sax.frame(ed).mask, study.pipeline.strain_measure)?;
    let curves = strain_curves(&results, views.len(), &setup)?;
    let peaks = curves.iter().map(peak_strain).collect::<cine_inr::Result<Vec<_>>>()?;
    let out = &a.out.out;
    create_dir(out)?;
    write_curves_csv(out.join("strain_curves.csv"), &curves)?;
    write_peaks_csv(out.join("strain_peaks.csv"), &peaks)?;
    write_text(out.join("strain_radial.svg"), &strain_chart(&curves, Component::Radial))?;
    write_text(out.join("strain_circumferential.svg"), &strain_chart(&curves, Component::Circumferential))?;
    run.outputs.push(out.clone());
    Ok(())
}

fn cmd_evaluate(a: &EvaluateCmd, run: &mut Run) -> Outcome<()> {
    run.inputs.extend([a.input.input.clone(), a.networks.clone()]);
    let (views, _) = load_views(&a.input.input)?;
    let results = load_networks(&a.networks)?;
    let out = &a.out.out;
    create_dir(out)?;
    let ed = views.sax.ed_index();
    for r in &results {
        let t = r.moving_index;
        if t >= views.len() {
            return Err(Failure::Core(cine_inr::Error::Config(format!("network for time {t} is out of range"))));
        }
        let ch4 = Some((views.ch4.frame(ed), views.ch4.frame(t)));
        let reg = evaluate_pair(r, views.sax.frame(ed), views.sax.frame(t), ch4)?;
        let base = evaluate_unregistered(views.sax.frame(ed), views.sax.frame(t), ch4)?;
        reg.write_csv(out.join(format!("metrics_t{t:02}.csv")))?;
        base.write_csv(out.join(format!("baseline_t{t:02}.csv")))?;
        if let Some(m) = reg.row("MYO") {
            log::info!("t{t:02}: MYO dice {:.4} (unregistered {:.4})", m.dsc_sax, base.row("MYO").map_or(f64::NAN, |b| b.dsc_sax));
        }
    }
    run.outputs.push(out.clone());
    Ok(())
}

fn read_column(path: &Path, column: &str) -> Outcome<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Failure::Core(e.into()))?;
    let headers = r.headers().map_err(|e| Failure::Core(e.into()))?.clone();
    let idx = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| Failure::Core(cine_inr::Error::Config(format!("{} has no column `{column}`", path.display()))))?;
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Failure::Core(e.into()))?;
        let field = rec.get(idx).unwrap_or("");
        let v: f64 = field.trim().parse().map_err(|_| {
            Failure::Core(cine_inr::Error::Payload(format!("{}: `{field}` is not a number", path.display())))
        })?;
        values.push(v);
    }
    Ok(values)
}

fn cmd_stats(a: &StatsCmd, run: &mut Run) -> Outcome<()> {
    run.inputs.extend(a.groups.iter().cloned());
    run.config = json!({ "column": a.column });
    let groups = a
        .groups
        .iter()
        .map(|p| read_column(p, &a.column))
        .collect::<Outcome<Vec<_>>>()?;
    let kw = kruskal_wallis(&groups)?;
    println!("H = {:.6} p = {:.6} df = {} n = {}", kw.h, kw.p, kw.df, kw.n);
    if kw.p < SIGNIFICANCE {
        println!("groups differ at p < {SIGNIFICANCE}");
    }
    let out = &a.out.out;
    create_dir(out)?;
    let path = out.join("stats.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Failure::Core(e.into()))?;
    let write = |w: &mut csv::Writer<std::fs::File>, rec: [String; 4]| w.write_record(rec).map_err(|e| Failure::Core(e.into()));
    write(&mut w, ["h".into(), "p".into(), "df".into(), "n".into()])?;
    write(&mut w, [fmt(kw.h), fmt(kw.p), kw.df.to_string(), kw.n.to_string()])?;
    w.flush()
        .map_err(|e| Failure::Core(cine_inr::Error::Io { path: path.clone(), source: e }))?;
    run.outputs.push(path);
    Ok(())
}

fn cmd_pipeline(a: &PipelineCmd, study: &mut StudyConfig, seed: u64, run: &mut Run) -> Outcome<()> {
    apply_align_args(study, &a.align);
    apply_reg_args(study, &a.reg)?;
    if let Some(f) = a.factor {
        study.pipeline.upsample = UpsampleSpec::linear(f);
    }
    if a.no_align {
        study.pipeline.do_align = false;
    }
    if a.no_upsample {
        study.pipeline.do_upsample = false;
    }
    if a.engineering {
        study.pipeline.strain_measure = StrainMeasure::Engineering;
    }
    let cfg = study.pipeline.clone().with_seed(seed);
    run.config = serde_json::to_value(&cfg).unwrap_or(Value::Null);
    run.inputs.push(a.input.input.clone());
    let (views, _) = load_views(&a.input.input)?;
    let out = run_pipeline(&views, &cfg)?;
    write_outputs(&a.out.out, &out)?;
    run.timings = serde_json::to_value(&out.timings).unwrap_or(Value::Null);
    run.outputs.push(a.out.out.clone());
    for m in &out.metrics {
        if let (Some(r), Some(b)) = (m.registered.row("MYO"), m.unregistered.row("MYO")) {
            log::info!("t{:02}: MYO dice {:.4} (unregistered {:.4})", m.moving_index, r.dsc_sax, b.dsc_sax);
        }
    }
    Ok(())
}

fn out_dir(cmd: &Command) -> &Path {
    match cmd {
        Command::Phantom(a) => &a.out.out,
        Command::Align(a) => &a.out.out,
        Command::Upsample(a) => &a.out.out,
        Command::Register(a) => &a.out.out,
        Command::Strain(a) => &a.out.out,
        Command::Evaluate(a) => &a.out.out,
        Command::Stats(a) => &a.out.out,
        Command::Pipeline(a) => &a.out.out,
    }
}

fn execute(cli: &Cli, run: &mut Run) -> Outcome<()> {
    let mut study = match &cli.config {
        Some(p) => StudyConfig::load(p).map_err(Failure::Usage)?,
        None => StudyConfig::default(),
    };
    let seed = cli.seed.or(study.seed);
    let explicit_seed = seed;
    if let Some(s) = seed {
        study.pipeline = study.pipeline.clone().with_seed(s);
    }
    let seed = seed.unwrap_or(0);
    run.seed = seed;
    match &cli.command {
        Command::Phantom(a) => cmd_phantom(a, &mut study, explicit_seed, run),
        Command::Align(a) => cmd_align(a, &mut study, run),
        Command::Upsample(a) => cmd_upsample(a, &mut study, run),
        Command::Register(a) => cmd_register(a, &mut study, run),
        Command::Strain(a) => cmd_strain(a, &mut study, run),
        Command::Evaluate(a) => cmd_evaluate(a, run),
        Command::Stats(a) => cmd_stats(a, run),
        Command::Pipeline(a) => cmd_pipeline(a, &mut study, seed, run),
    }
}

fn subcommand_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Phantom(_) => "phantom",
        Command::Align(_) => "align",
        Command::Upsample(_) => "upsample",
        Command::Register(_) => "register",
        Command::Strain(_) => "strain",
        Command::Evaluate(_) => "evaluate",
        Command::Stats(_) => "stats",
        Command::Pipeline(_) => "pipeline",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let mut run = Run::new(subcommand_name(&cli.command));
    let start = Instant::now();
    let outcome = execute(&cli, &mut run);
    let (code, error) = match &outcome {
        Ok(()) => (0, None),
        Err(f) => (f.exit_code(), Some(f.message())),
    };
    if let Some(msg) = &error {
        eprintln!("error: {msg}");
    }
    let mut timings = run.timings.clone();
    if let Value::Object(map) = &mut timings {
        map.insert("total".into(), json!(start.elapsed().as_secs_f64()));
    }
    let manifest = RunManifest {
        subcommand: run.subcommand.into(),
        config: run.config,
        inputs: run.inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: run.outputs.iter().map(|p| p.display().to_string()).collect(),
        seed: run.seed,
        deterministic: cli.deterministic,
        jobs: cli.jobs,
        versions: json!({ "cine-inr": env!("CARGO_PKG_VERSION") }),
        timings,
        exit_status: code,
        error,
    };
    let dir = out_dir(&cli.command);
    if std::fs::create_dir_all(dir).is_ok() {
        let path = dir.join("run_manifest.json");
        match serde_json::to_string_pretty(&manifest) {
            Ok(text) => {
                if let Err(e) = std::fs::write(&path, text + "\n") {
                    log::warn!("could not write {}: {e}", path.display());
                }
            }
            Err(e) => log::warn!("could not serialize the run manifest: {e}"),
        }
    }
    ExitCode::from(code)
}
