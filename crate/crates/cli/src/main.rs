mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lsparcom::model::{EmitterMap, GridSpec, Psf};
use lsparcom::pipeline::{
    emit_cross_section, emit_overlay, emitters_to_points, evaluate_localization, map_to_stack,
    read_gt_csv, read_stack, read_weights, reconstruct_lsparcom, reconstruct_sparcom,
    stack_to_map, write_gt_csv, write_pgm16, write_ppm, write_stack, write_weights, EvalOptions,
    PatchPlan, SparcomOptions,
};
use lsparcom::simulate::{simulate, EmitterParams, NoiseModel, SceneKind, SimulationConfig};
use lsparcom::solver::SolverConfig;
use lsparcom::stats::Formulation;
use lsparcom::training::{
    build_dataset_streamed, train_with_progress, ExampleOptions, PercentileGradient, TrainConfig,
};
use lsparcom::unfolded::init_weights;

/// Super-resolution of blinking fluorescence movies.
#[derive(Parser, Debug)]
#[command(name = "smlm", version)]
struct Cli {
    /// TOML file with one table per subcommand; keys are flag names.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a blinking-emitter movie with ground truth.
    Simulate(SimulateArgs),
    /// Sparse recovery from movie statistics with a known (or delta) PSF.
    Sparcom(SparcomArgs),
    /// Learned reconstruction.
    #[command(subcommand)]
    Lsparcom(LsparcomCommand),
    /// Localization precision and recall against a ground-truth list.
    Eval(EvalArgs),
    /// Figures for inspection.
    #[command(subcommand)]
    Viz(VizCommand),
}

#[derive(Subcommand, Debug)]
enum LsparcomCommand {
    /// Reconstruct a movie with trained weights.
    Infer(InferArgs),
    /// Train weights on simulated movie pairs.
    Train(TrainArgs),
}

#[derive(Subcommand, Debug)]
enum VizCommand {
    /// Red/green overlay of a reconstruction and its ground truth.
    Overlay(OverlayArgs),
    /// Normalized intensity profiles along a line.
    Section(SectionArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SceneArg {
    Points,
    Filaments,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum NoiseArg {
    None,
    Moderate,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FormulationArg {
    Variance,
    Covariance,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "points")]
    scene: SceneArg,
    /// Low-resolution frame side.
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    upsampling: usize,
    /// Low-resolution pixel pitch in nm.
    #[arg(long, default_value_t = 100.0)]
    pitch: f64,
    #[arg(long, default_value_t = 361)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Point scenes: number of emitters.
    #[arg(long, default_value_t = 20)]
    emitters: usize,
    /// Point scenes: minimum distance between emitters (high-res pixels).
    #[arg(long, default_value_t = 6.0)]
    min_separation: f64,
    /// Point scenes: emitter-free border (high-res pixels).
    #[arg(long, default_value_t = 4)]
    margin: usize,
    /// Filament scenes: number of filaments.
    #[arg(long, default_value_t = 3)]
    filaments: usize,
    /// Filament scenes: emitters per filament.
    #[arg(long, default_value_t = 20)]
    per_filament: usize,
    /// Gaussian PSF width in low-resolution pixels.
    #[arg(long, default_value_t = 1.0)]
    psf_sigma: f64,
    #[arg(long, value_enum, default_value = "moderate")]
    noise: NoiseArg,
    /// Overrides the preset background (photons per pixel per frame).
    #[arg(long)]
    background: Option<f64>,
    /// Overrides the preset readout noise deviation.
    #[arg(long)]
    readout: Option<f64>,
    #[arg(long, default_value_t = 600.0)]
    brightness_min: f64,
    #[arg(long, default_value_t = 1400.0)]
    brightness_max: f64,
    #[arg(long, default_value_t = 0.1)]
    on_min: f64,
    #[arg(long, default_value_t = 0.3)]
    on_max: f64,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth point list.
    #[arg(long)]
    gt: PathBuf,
    /// Noiseless high-resolution emitter movie (training target).
    #[arg(long)]
    gt_movie: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct PlanArgs {
    /// Low-resolution patch side.
    #[arg(long, default_value_t = 16)]
    patch: usize,
    /// Low-resolution overlap of neighbouring patches.
    #[arg(long, default_value_t = 8)]
    overlap: usize,
    /// Taper fraction of the blending window.
    #[arg(long, default_value_t = 0.5)]
    tukey: f64,
}

impl PlanArgs {
    fn plan(&self) -> PatchPlan {
        PatchPlan {
            patch_low: self.patch,
            overlap_low: self.overlap,
            tukey_r: self.tukey,
        }
    }
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct SparcomArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Sparsity weight, relative to the largest correlation with the data
    /// unless --absolute-lambda is given.
    #[arg(long, default_value_t = 0.01)]
    lambda: f64,
    #[arg(long)]
    absolute_lambda: bool,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Gaussian PSF width in low-resolution pixels.
    #[arg(long, conflicts_with = "psf_delta")]
    psf_sigma: Option<f64>,
    /// Assume no PSF knowledge: each emitter lights only its own pixel.
    #[arg(long)]
    psf_delta: bool,
    /// Use the accelerated iteration.
    #[arg(long)]
    fista: bool,
    #[arg(long, value_enum, default_value = "variance")]
    formulation: FormulationArg,
    #[command(flatten)]
    plan: PlanArgs,
    #[arg(long)]
    out: PathBuf,
    /// Also write a 16-bit graymap.
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct InferArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    plan: PlanArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PercentileMode {
    Exact,
    StraightThrough,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct TrainArgs {
    /// Directory of `<name>.stk` movies with `<name>.gt.stk` targets.
    #[arg(long)]
    data: PathBuf,
    /// Weight of false detections in the loss. Scales with the data: the
    /// default suits variances normalized by the preprocessing.
    #[arg(long, default_value_t = 0.003)]
    lambda: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of examples drawn from the movies.
    #[arg(long, default_value_t = 2000)]
    examples: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 5e-4)]
    learning_rate: f64,
    /// Gradient through the per-layer percentiles.
    #[arg(long, value_enum, default_value_t = PercentileMode::Exact)]
    percentile_gradient: PercentileMode,
    /// Low-resolution side of the training windows.
    #[arg(long, default_value_t = 16)]
    window: usize,
    /// Sum random groups of this many frames into one.
    #[arg(long, default_value_t = 1)]
    group_size: usize,
    #[arg(long)]
    no_rotate: bool,
    /// Factor applied to the target variance.
    #[arg(long, default_value_t = 1.0)]
    gt_scale: f64,
    /// Start from these weights instead of the default initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Progress log (defaults to the output path with `.log` appended).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Matching radius in high-resolution pixels.
    #[arg(long, default_value_t = 1.0)]
    tol: f64,
    /// Detection threshold relative to the image maximum.
    #[arg(long, default_value_t = 0.1)]
    fraction: f64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct OverlayArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Ground truth as a point list (`.csv`) or a one-frame stack.
    #[arg(long)]
    gt: PathBuf,
    /// Binarization level relative to each image's maximum.
    #[arg(long, default_value_t = 0.1)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct SectionArgs {
    /// `name=path` of a one-frame stack (ground-truth `.csv` lists allowed);
    /// repeat for several curves.
    #[arg(long = "image", required = true)]
    images: Vec<String>,
    /// Start pixel as `row,col`.
    #[arg(long)]
    from: String,
    /// End pixel as `row,col`.
    #[arg(long)]
    to: String,
    /// Output table (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    let args = config::merged_args(std::env::args_os().collect())?;
    let cli = Cli::parse_from(args);
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sparcom(a) => cmd_sparcom(a),
        Command::Lsparcom(LsparcomCommand::Infer(a)) => cmd_infer(a),
        Command::Lsparcom(LsparcomCommand::Train(a)) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Viz(VizCommand::Overlay(a)) => cmd_overlay(a),
        Command::Viz(VizCommand::Section(a)) => cmd_section(a),
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let mut noise = match a.noise {
        NoiseArg::None => NoiseModel::none(),
        NoiseArg::Moderate => NoiseModel::moderate(),
    };
    if let Some(b) = a.background {
        noise.background = b;
    }
    if let Some(r) = a.readout {
        noise.readout_sigma = r;
    }
    let scene = match a.scene {
        SceneArg::Points => SceneKind::Points {
            count: a.emitters,
            min_separation: a.min_separation,
            margin: a.margin,
        },
        SceneArg::Filaments => SceneKind::Filaments {
            count: a.filaments,
            emitters_per_filament: a.per_filament,
        },
    };
    let config = SimulationConfig {
        grid: GridSpec::with_pitch(a.size, a.upsampling, a.pitch)?,
        psf_sigma: a.psf_sigma,
        frames: a.frames,
        noise,
        emitters: EmitterParams {
            brightness: (a.brightness_min, a.brightness_max),
            on_probability: (a.on_min, a.on_max),
        },
        scene,
    };
    let (scene, mut rendered) = simulate(&config, a.seed)?;
    let provenance = format!("simulate seed={} frames={}", a.seed, a.frames);
    rendered.movie.metadata.insert("provenance".into(), provenance.replace(' ', "_"));
    write_stack(&a.out, &rendered.movie)?;
    write_gt_csv(&a.gt, &scene)?;
    if let Some(p) = &a.gt_movie {
        write_stack(p, &rendered.gt_movie)?;
    }
    println!(
        "simulated {} emitters, {} frames of {}x{} -> {}",
        scene.len(),
        a.frames,
        a.size,
        a.size,
        a.out.display()
    );
    Ok(())
}

fn save_map(map: &EmitterMap<f64>, grid: &GridSpec, out: &Path, pgm: Option<&Path>) -> Result<()> {
    write_stack(out, &map_to_stack(map, grid.delta_h())?)?;
    if let Some(p) = pgm {
        write_pgm16(p, map.values.view())?;
    }
    Ok(())
}

fn cmd_sparcom(a: SparcomArgs) -> Result<()> {
    let stack = read_stack(&a.input)?;
    let psf = match (a.psf_delta, a.psf_sigma) {
        (true, _) => Psf::delta(),
        (false, Some(s)) => Psf::gaussian(s),
        (false, None) => bail!("give --psf-sigma or --psf-delta"),
    };
    let mut solver = SolverConfig::new(a.lambda);
    solver.max_iters = a.iters;
    solver.accelerated = a.fista;
    solver.formulation = match a.formulation {
        FormulationArg::Variance => Formulation::Variance,
        FormulationArg::Covariance => Formulation::Covariance,
    };
    let mut opts = SparcomOptions::new(psf, solver);
    opts.lambda_relative = !a.absolute_lambda;
    opts.plan = a.plan.plan();
    let map = reconstruct_sparcom(&stack, &opts)?;
    save_map(&map, &stack.grid, &a.out, a.pgm.as_deref())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let stack = read_stack(&a.input)?;
    let weights = read_weights(&a.weights)?;
    let map = reconstruct_lsparcom(&stack, &weights, a.plan.plan())?;
    save_map(&map, &stack.grid, &a.out, a.pgm.as_deref())
}

/// Training movies `<name>.stk` in `dir`, sorted, each with a `<name>.gt.stk`.
fn training_movies(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.retain(|p| {
        let s = p.to_string_lossy();
        s.ends_with(".stk") && !s.ends_with(".gt.stk")
    });
    names.sort();
    for movie in &names {
        let gt = movie.with_extension("gt.stk");
        if !gt.exists() {
            bail!("{} has no target {}", movie.display(), gt.display());
        }
    }
    if names.is_empty() {
        bail!("no training movies in {}", dir.display());
    }
    Ok(names)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let movies = training_movies(&a.data)?;
    let opts = ExampleOptions {
        window_low: a.window,
        group_size: a.group_size,
        rotate: !a.no_rotate,
        gt_scale: a.gt_scale,
    };
    let load = |i: usize| {
        let movie: &PathBuf = &movies[i];
        Ok((read_stack(movie)?, read_stack(&movie.with_extension("gt.stk"))?))
    };
    let dataset = build_dataset_streamed(movies.len(), load, a.examples, &opts, a.seed)?;
    let init = match &a.init {
        Some(p) => read_weights(p)?,
        None => init_weights(),
    };
    let config = TrainConfig {
        lambda: a.lambda,
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        rng_seed: a.seed,
        percentile_gradient: match a.percentile_gradient {
            PercentileMode::Exact => PercentileGradient::Exact,
            PercentileMode::StraightThrough => PercentileGradient::StraightThrough,
        },
        ..TrainConfig::default()
    };
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".log");
        PathBuf::from(s)
    });
    let mut log = fs::File::create(&log_path)
        .with_context(|| format!("creating {}", log_path.display()))?;
    let mut io_err = None;
    let outcome = train_with_progress(&dataset, init, &config, |r| {
        let line = format!("epoch {} loss {:.6e} time {:.1}", r.epoch, r.mean_loss, r.elapsed_secs);
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing training log");
    }
    write_weights(&a.out, &outcome.weights)?;
    Ok(())
}

fn load_gt_points(path: &Path, side: usize) -> Result<EmitterMap<f64>> {
    if path.extension().is_some_and(|e| e == "csv") {
        let pts = emitters_to_points(&read_gt_csv(path)?);
        Ok(EmitterMap::from_points(side, pts)?)
    } else {
        Ok(stack_to_map(&read_stack(path)?)?)
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let pred = stack_to_map(&read_stack(&a.pred)?)?;
    let gt = emitters_to_points(&read_gt_csv(&a.gt)?);
    let opts = EvalOptions {
        tol: a.tol,
        detection_fraction: a.fraction,
    };
    let r = evaluate_localization(&pred, &gt, &opts);
    let mean_error = r.mean_error.map_or("none".to_string(), |e| format!("{e:.4}"));
    let text = format!(
        "precision {:.4}\nrecall {:.4}\nf1 {:.4}\nmean_error {}\ndetections {}\nground_truth {}\nmatched {}\n",
        r.precision, r.recall, r.f1, mean_error, r.detections, r.ground_truth, r.matched
    );
    print!("{text}");
    if let Some(p) = &a.report {
        fs::write(p, &text)?;
    }
    Ok(())
}

fn cmd_overlay(a: OverlayArgs) -> Result<()> {
    let pred = stack_to_map(&read_stack(&a.pred)?)?;
    let gt = load_gt_points(&a.gt, pred.values.nrows())?;
    let rgb = emit_overlay(pred.values.view(), gt.values.view(), a.threshold)?;
    write_ppm(&a.out, &rgb)?;
    Ok(())
}

fn parse_pixel(s: &str) -> Result<(usize, usize)> {
    let (r, c) = s
        .split_once(',')
        .with_context(|| format!("pixel '{s}' is not 'row,col'"))?;
    Ok((r.trim().parse()?, c.trim().parse()?))
}

fn cmd_section(a: SectionArgs) -> Result<()> {
    let mut loaded: Vec<(String, EmitterMap<f64>)> = Vec::new();
    let mut side = None;
    for spec in &a.images {
        let (name, path) = spec
            .split_once('=')
            .with_context(|| format!("image '{spec}' is not 'name=path'"))?;
        let path = Path::new(path);
        let map = if path.extension().is_some_and(|e| e == "csv") {
            let n = side.context("list point-list curves after a stack")?;
            load_gt_points(path, n)?
        } else {
            stack_to_map(&read_stack(path)?)?
        };
        side.get_or_insert(map.values.nrows());
        loaded.push((name.to_string(), map));
    }
    let views: Vec<(&str, _)> = loaded
        .iter()
        .map(|(n, m)| (n.as_str(), m.values.view()))
        .collect();
    let table = emit_cross_section(&views, parse_pixel(&a.from)?, parse_pixel(&a.to)?)?;
    match &a.out {
        Some(p) => fs::write(p, table)?,
        None => print!("{table}"),
    }
    Ok(())
}
