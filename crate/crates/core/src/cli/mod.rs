//! `mioflow` command-line front end.

pub mod config;
pub mod svg;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{s, Array2};
use rand::seq::index::sample;

use crate::datasets::{make_holdout, save_csv, BifurcationSpec, PetalSpec, SnapshotDataset};
use crate::evaluation::{ablation_suite, baseline_row, evaluate_holdout, AblationAxes, GaeVariant, MetricReport};
use crate::gae::{train_gae, GaeConfig, GeodesicAutoencoder};
use crate::geometry::KernelSpec;
use crate::ode::Scheme;
use crate::training::{train_mioflow, MioflowModel};
use crate::util::rng;

pub use config::{DataSource, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "mioflow", version, about = "Trajectory inference from population snapshots")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset as CSV.
    GenData(GenDataArgs),
    /// Train a geodesic autoencoder.
    TrainGae(TrainGaeArgs),
    /// Train the flow on every snapshot.
    Train(TrainArgs),
    /// Leave one timepoint out, train, and score the prediction.
    EvalHoldout(EvalArgs),
    /// Export dense trajectories (and optionally an SVG plot).
    Trajectories(TrajArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Generator {
    Petal,
    Bifurcation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KernelKind {
    Gaussian,
    AlphaDecay,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Rk4,
    EulerMaruyama,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Gae,
    Density,
    Kernel,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArg {
    /// Dataset CSV (`t,x0,...`); defaults to the config's data source.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct OutDir {
    /// Output directory; defaults to the config's `output`, then `.`.
    #[arg(long, short = 'o')]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    pub generator: Generator,
    #[arg(long, short = 'o')]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub n_lobes: Option<usize>,
    #[arg(long)]
    pub points_per_lobe: Option<usize>,
    #[arg(long)]
    pub n_times: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Per-time counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    #[arg(long)]
    pub asymmetry: Option<f64>,
    #[arg(long)]
    pub curvature: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct GaeFlags {
    /// Training iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub gae_batch_size: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long, value_enum)]
    pub kernel: Option<KernelKind>,
    /// Gaussian kernel bandwidth.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Alpha-decay neighbour count.
    #[arg(long)]
    pub knn: Option<usize>,
    #[arg(long)]
    pub noise_scale: Option<f64>,
    #[arg(long)]
    pub gae_lr: Option<f64>,
    #[arg(long)]
    pub no_decoder: bool,
    #[arg(long)]
    pub stratified: bool,
}

#[derive(Debug, Clone, Args)]
pub struct FlowFlags {
    #[arg(long)]
    pub n_local: Option<usize>,
    #[arg(long)]
    pub n_global: Option<usize>,
    #[arg(long)]
    pub lambda_d: Option<f64>,
    #[arg(long)]
    pub lambda_e: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub substeps: Option<usize>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Integrate a plain ODE.
    #[arg(long)]
    pub no_sde: bool,
    #[arg(long)]
    pub no_density: bool,
}

#[derive(Debug, Args)]
pub struct TrainGaeArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArg,
    #[command(flatten)]
    pub out: OutDir,
    #[command(flatten)]
    pub gae: GaeFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArg,
    #[command(flatten)]
    pub out: OutDir,
    #[command(flatten)]
    pub flow: FlowFlags,
    /// Train in the latent space of this autoencoder checkpoint.
    #[arg(long)]
    pub gae: Option<PathBuf>,
    #[arg(long)]
    pub use_gae: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArg,
    #[command(flatten)]
    pub out: OutDir,
    #[command(flatten)]
    pub flow: FlowFlags,
    #[command(flatten)]
    pub gae: GaeFlags,
    #[arg(long)]
    pub held_time: Option<u32>,
    /// Train a GAE on the split first.
    #[arg(long)]
    pub use_gae: bool,
    /// Axes to sweep, comma separated.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub ablate: Vec<Axis>,
    /// Threads for the ablation sweep.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct TrajArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArg,
    #[command(flatten)]
    pub out: OutDir,
    /// Model checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Number of trajectories; all starting points when omitted.
    #[arg(long)]
    pub n_traj: Option<usize>,
    /// Also write `trajectories.svg`.
    #[arg(long)]
    pub svg: bool,
    /// 2-D projection for plotting: `first2`, or a CSV file with d rows of
    /// two columns.
    #[arg(long)]
    pub proj: Option<String>,
}

/// Failure classified by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration: exit code 2.
    Usage(anyhow::Error),
    /// Anything that went wrong while doing the work: exit code 1.
    Runtime(anyhow::Error),
}

impl Failure {
    fn usage(e: impl Into<anyhow::Error>) -> Self {
        Failure::Usage(e.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Parse the process arguments, run and map the result to an exit code.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.exit_code())
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("MIOFLOW_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

pub fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainGae(a) => cmd_train_gae(a),
        Command::Train(a) => cmd_train(a),
        Command::EvalHoldout(a) => cmd_eval(a),
        Command::Trajectories(a) => cmd_trajectories(a),
    }
}

fn load_config(common: &Common) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(common.config.as_deref()).map_err(Failure::usage)?;
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    cfg.mioflow.seed = cfg.seed();
    Ok(cfg)
}

fn load_data(arg: &DataArg, cfg: &RunConfig) -> std::result::Result<SnapshotDataset, Failure> {
    let source = match (&arg.data, &cfg.data) {
        (Some(p), _) => DataSource::Csv(p.clone()),
        (None, Some(s)) => s.clone(),
        (None, None) => return Err(Failure::usage(anyhow::anyhow!("no dataset: pass --data or set `data` in the config"))),
    };
    Ok(source.load()?)
}

fn out_dir(arg: &OutDir, cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = arg.out_dir.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> anyhow::Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn summary(ds: &SnapshotDataset) -> String {
    let counts: Vec<String> = ds.counts().iter().map(|c| c.to_string()).collect();
    format!("T={} d={} counts={}", ds.len(), ds.dim(), counts.join(","))
}

fn gen_data(a: GenDataArgs) -> Outcome {
    let cfg = load_config(&a.common)?;
    let seed = cfg.seed();
    let ds = match a.generator {
        Generator::Petal => {
            let mut spec = match &cfg.data {
                Some(DataSource::Petal(s)) => s.clone(),
                _ => PetalSpec::default(),
            };
            spec.seed = a.common.seed.or(cfg.seed).unwrap_or(spec.seed);
            if let Some(v) = a.noise {
                spec.noise = v;
            }
            if let Some(v) = a.n_lobes {
                spec.n_lobes = v;
            }
            if let Some(v) = a.points_per_lobe {
                spec.points_per_lobe = v;
            }
            if let Some(v) = a.n_times {
                spec.n_times = v;
            }
            if a.dim.is_some() || a.counts.is_some() || a.asymmetry.is_some() || a.curvature.is_some() {
                return Err(Failure::usage(anyhow::anyhow!(
                    "--dim, --counts, --asymmetry and --curvature apply to the bifurcation generator"
                )));
            }
            crate::datasets::gen_petal(&spec).map_err(Failure::usage)?
        }
        Generator::Bifurcation => {
            let mut spec = match &cfg.data {
                Some(DataSource::Bifurcation(s)) => s.clone(),
                _ => BifurcationSpec::default(),
            };
            spec.seed = a.common.seed.or(cfg.seed).unwrap_or(spec.seed);
            if let Some(v) = a.noise {
                spec.noise = v;
            }
            if let Some(v) = a.dim {
                spec.dim = v;
            }
            if let Some(v) = a.counts {
                spec.counts = v;
            }
            if let Some(v) = a.asymmetry {
                spec.asymmetry = v;
            }
            if let Some(v) = a.curvature {
                spec.curvature = v;
            }
            if a.n_lobes.is_some() || a.points_per_lobe.is_some() || a.n_times.is_some() {
                return Err(Failure::usage(anyhow::anyhow!(
                    "--n-lobes, --points-per-lobe and --n-times apply to the petal generator"
                )));
            }
            crate::datasets::gen_bifurcation(&spec).map_err(Failure::usage)?
        }
    };
    log::debug!("generated with seed {seed}");
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_csv(&ds, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{}", summary(&ds));
    Ok(())
}

fn apply_gae_flags(g: &mut GaeConfig, f: &GaeFlags) {
    if let Some(v) = f.iters {
        g.max_iterations = v;
    }
    if let Some(v) = f.gae_batch_size {
        g.batch_size = v;
    }
    if let Some(v) = f.latent_dim {
        g.latent_dim = v;
    }
    match f.kernel {
        Some(KernelKind::Gaussian) => {
            if !matches!(g.kernel, KernelSpec::Gaussian { .. }) {
                g.kernel = KernelSpec::default();
            }
        }
        Some(KernelKind::AlphaDecay) => {
            if !matches!(g.kernel, KernelSpec::AlphaDecay { .. }) {
                g.kernel = KernelSpec::alpha_decay(5);
            }
        }
        None => {}
    }
    match &mut g.kernel {
        KernelSpec::Gaussian { epsilon } => {
            if let Some(v) = f.epsilon {
                *epsilon = v;
            }
        }
        KernelSpec::AlphaDecay { knn, .. } => {
            if let Some(v) = f.knn {
                *knn = v;
            }
        }
    }
    if let Some(v) = f.noise_scale {
        g.noise_scale = v;
    }
    if let Some(v) = f.gae_lr {
        g.lr = v;
    }
    if f.no_decoder {
        g.train_decoder = false;
    }
    if f.stratified {
        g.stratified = true;
    }
}

fn apply_flow_flags(cfg: &mut RunConfig, f: &FlowFlags) {
    let m = &mut cfg.mioflow;
    if let Some(v) = f.n_local {
        m.n_local = v;
    }
    if let Some(v) = f.n_global {
        m.n_global = v;
    }
    if let Some(v) = f.lambda_d {
        m.lambda_d = v;
    }
    if let Some(v) = f.lambda_e {
        m.lambda_e = v;
    }
    if let Some(v) = f.batch_size {
        m.batch_size = v;
    }
    if let Some(v) = f.batches_per_epoch {
        m.batches_per_epoch = v;
    }
    if let Some(v) = f.lr {
        m.lr = v;
    }
    if let Some(v) = f.substeps {
        m.solver.substeps = v;
    }
    match f.scheme {
        Some(SchemeArg::Rk4) => m.solver.scheme = Scheme::Rk4,
        Some(SchemeArg::EulerMaruyama) => m.solver.scheme = Scheme::EulerMaruyama,
        None => {}
    }
    if f.no_sde {
        m.use_sde = false;
    }
    if f.no_density {
        m.use_density = false;
    }
}

fn cmd_train_gae(a: TrainGaeArgs) -> Outcome {
    let mut cfg = load_config(&a.common)?;
    apply_gae_flags(&mut cfg.gae, &a.gae);
    cfg.validate().map_err(Failure::usage)?;
    let ds = load_data(&a.data, &cfg)?;
    let dir = out_dir(&a.out, &cfg)?;
    let out = train_gae(&ds, &cfg.gae, cfg.seed())?;
    write_file(&dir.join("gae.json"), &out.model.to_json())?;
    write_jsonl(&dir.join("gae_log.jsonl"), &out.log)?;
    if let Some(last) = out.log.last() {
        log::info!("final distance loss {:.5}", last.distance_loss);
    }
    Ok(())
}

fn load_gae(path: &Path) -> anyhow::Result<GeodesicAutoencoder> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    GeodesicAutoencoder::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let mut cfg = load_config(&a.common)?;
    apply_flow_flags(&mut cfg, &a.flow);
    if a.use_gae || a.gae.is_some() {
        cfg.mioflow.use_gae = true;
    }
    cfg.validate().map_err(Failure::usage)?;
    let gae = match (&a.gae, cfg.mioflow.use_gae) {
        (Some(p), _) => Some(load_gae(p)?),
        (None, true) => {
            return Err(Failure::usage(anyhow::anyhow!("use_gae is set but no --gae checkpoint was given")))
        }
        (None, false) => None,
    };
    let ds = load_data(&a.data, &cfg)?;
    let dir = out_dir(&a.out, &cfg)?;
    let out = train_mioflow(&ds, gae.as_ref(), &cfg.mioflow)?;
    write_file(&dir.join("model.json"), &out.model.to_json())?;
    write_jsonl(&dir.join("train_log.jsonl"), &out.log)?;
    Ok(())
}

fn ablation_axes(axes: &[Axis], use_gae: bool, gae: &GaeConfig, use_density: bool) -> AblationAxes {
    let has = |x: Axis| axes.contains(&x);
    let gae_axis = match (has(Axis::Gae), has(Axis::Kernel)) {
        (true, true) => vec![
            GaeVariant::Off,
            GaeVariant::Kernel(KernelSpec::default()),
            GaeVariant::Kernel(KernelSpec::alpha_decay(5)),
        ],
        (true, false) => vec![GaeVariant::Off, GaeVariant::Kernel(gae.kernel)],
        (false, true) => vec![
            GaeVariant::Kernel(KernelSpec::default()),
            GaeVariant::Kernel(KernelSpec::alpha_decay(5)),
        ],
        (false, false) if use_gae => vec![GaeVariant::Kernel(gae.kernel)],
        (false, false) => vec![GaeVariant::Off],
    };
    let density = if has(Axis::Density) { vec![true, false] } else { vec![use_density] };
    AblationAxes { gae: gae_axis, density }
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    let mut cfg = load_config(&a.common)?;
    apply_flow_flags(&mut cfg, &a.flow);
    apply_gae_flags(&mut cfg.gae, &a.gae);
    if a.held_time.is_some() {
        cfg.held_time = a.held_time;
    }
    let use_gae = a.use_gae || cfg.mioflow.use_gae;
    cfg.validate().map_err(Failure::usage)?;
    if a.jobs == 0 {
        return Err(Failure::usage(anyhow::anyhow!("--jobs must be at least 1")));
    }
    let held = cfg
        .held_time
        .ok_or_else(|| Failure::usage(anyhow::anyhow!("no held-out time: pass --held-time or set `held_time`")))?;
    let ds = load_data(&a.data, &cfg)?;
    make_holdout(&ds, held).map_err(Failure::usage)?;
    let dir = out_dir(&a.out, &cfg)?;
    let seed = cfg.seed();

    let report = if a.ablate.is_empty() {
        let gae = use_gae.then_some(&cfg.gae);
        let out = evaluate_holdout(&ds, held, gae, &cfg.mioflow, &cfg.metrics, seed)?;
        export_points(&dir.join("predicted.csv"), held, &out.predicted)?;
        export_points(&dir.join("truth.csv"), held, &out.truth)?;
        write_file(&dir.join("model.json"), &out.model.to_json())?;
        write_jsonl(&dir.join("train_log.jsonl"), &out.log)?;
        MetricReport {
            seed,
            config: serde_json::json!({
                "held_time": held,
                "gae": gae,
                "mioflow": &cfg.mioflow,
                "metrics": &cfg.metrics,
            }),
            rows: vec![baseline_row(&ds, held, &cfg.metrics)?, out.row],
        }
    } else {
        let axes = ablation_axes(&a.ablate, use_gae, &cfg.gae, cfg.mioflow.use_density);
        ablation_suite(&ds, held, &axes, &cfg.gae, &cfg.mioflow, &cfg.metrics, seed, a.jobs)?
    };
    write_file(&dir.join("report.json"), &report.to_json())?;
    print!("{}", report.table());
    Ok(())
}

/// Points at a single time label in the dataset CSV layout.
pub fn export_points(path: &Path, t: u32, x: &Array2<f64>) -> anyhow::Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    let mut header = String::from("t");
    for k in 0..x.ncols() {
        header.push_str(&format!(",x{k}"));
    }
    writeln!(f, "{header}")?;
    for row in x.rows() {
        write!(f, "{t}")?;
        for v in row {
            write!(f, ",{v:.16e}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

/// `d x 2` projection onto the plotting plane.
fn projection(spec: Option<&str>, d: usize) -> std::result::Result<Array2<f64>, Failure> {
    let first2 = || {
        let mut p = Array2::zeros((d, 2));
        p[[0, 0]] = 1.0;
        p[[1, 1]] = 1.0;
        p
    };
    match spec {
        None if d == 2 => Ok(first2()),
        None => Err(Failure::usage(anyhow::anyhow!(
            "data has {d} dimensions; pass --proj first2 or --proj <file.csv> with a {d}x2 projection matrix"
        ))),
        Some("first2") => Ok(first2()),
        Some(path) => {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(false)
                .from_path(path)
                .with_context(|| format!("reading {path}"))
                .map_err(Failure::usage)?;
            let mut vals = Vec::new();
            let mut rows = 0;
            for rec in rdr.records() {
                let rec = rec.map_err(Failure::usage)?;
                if rec.len() != 2 {
                    return Err(Failure::usage(anyhow::anyhow!("projection rows must have two columns")));
                }
                for cell in rec.iter() {
                    vals.push(cell.trim().parse::<f64>().map_err(Failure::usage)?);
                }
                rows += 1;
            }
            if rows != d {
                return Err(Failure::usage(anyhow::anyhow!("projection has {rows} rows, data has {d} dimensions")));
            }
            Ok(Array2::from_shape_vec((d, 2), vals).expect("checked shape"))
        }
    }
}

fn cmd_trajectories(a: TrajArgs) -> Outcome {
    let cfg = load_config(&a.common)?;
    let text = fs::read_to_string(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let model = MioflowModel::from_json(&text).with_context(|| format!("parsing {}", a.model.display()))?;
    let ds = load_data(&a.data, &cfg)?;
    let proj = if a.svg { Some(projection(a.proj.as_deref(), ds.dim())?) } else { None };
    let from = model.time_origin;
    let start = ds
        .at_time(from)
        .ok_or_else(|| Failure::usage(anyhow::anyhow!("dataset has no snapshot at the model's first time {from}")))?;
    let last = *model.times.last().expect("model has times");
    let seed = cfg.seed();
    let x0 = match a.n_traj {
        Some(n) if n < start.len() => {
            let mut idx = sample(&mut rng(seed), start.len(), n).into_vec();
            idx.sort_unstable();
            start.select(&idx).into_inner()
        }
        _ => start.points().clone(),
    };
    let to: Vec<u32> = (from + 1..=last).collect();
    let bundle = model.predict(x0.view(), from, &to, seed, true)?;
    let dir = out_dir(&a.out, &cfg)?;

    let n = x0.nrows();
    let d = ds.dim();
    let path = dir.join("trajectories.csv");
    let mut f = std::io::BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    let mut header = String::from("traj,step,t");
    for k in 0..d {
        header.push_str(&format!(",x{k}"));
    }
    writeln!(f, "{header}")?;
    for i in 0..n {
        for (step, (t, state)) in bundle.dense_times.iter().zip(&bundle.dense).enumerate() {
            write!(f, "{i},{step},{}", t + from as f64)?;
            for v in state.row(i) {
                write!(f, ",{v:.16e}")?;
            }
            writeln!(f)?;
        }
    }
    f.flush()?;

    if let Some(p) = proj {
        let background = ds
            .times()
            .iter()
            .zip(ds.snapshots())
            .map(|(&t, s)| svg::Layer { time: t as f64, points: s.points().dot(&p) })
            .collect();
        let paths = (0..n)
            .map(|i| {
                let pts: Vec<f64> = bundle.dense.iter().flat_map(|s| s.slice(s![i, ..]).dot(&p).to_vec()).collect();
                svg::Path {
                    times: bundle.dense_times.iter().map(|t| t + from as f64).collect(),
                    points: Array2::from_shape_vec((bundle.dense.len(), 2), pts).expect("two columns"),
                }
            })
            .collect();
        let plot = svg::Plot { background, paths, t_range: (from as f64, last as f64) };
        write_file(&dir.join("trajectories.svg"), &plot.render())?;
    }
    Ok(())
}
