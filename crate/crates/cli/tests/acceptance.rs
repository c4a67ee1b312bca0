//! Acceptance suite. Runs every criterion in order and prints one PASS/FAIL
//! line for each; exits non-zero if any fails. Pass criterion numbers (for
//! example `7 8`) as arguments to run a subset.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use lsparcom::model::{build_measurement_matrix, GridSpec, MeasurementOperator, Psf};
use lsparcom::pipeline::{
    evaluate_localization, reconstruct_lsparcom, reconstruct_sparcom, EvalOptions, PatchPlan,
    SparcomOptions,
};
use lsparcom::simulate::{
    generate_filament_scene, generate_point_scene, render_movie, simulate, simulate_blinking,
    EmitterParams, NoiseModel, RenderedMovie, Scene, SceneKind, SimulationConfig,
};
use lsparcom::solver::{fista_solve, ista_solve, positive_soft_threshold, Problem, SolverConfig};
use lsparcom::stats::{
    compute_m_matrix, lipschitz_constant, variance_of_frames, Formulation, FrameStack,
    GramOperator,
};
use lsparcom::training::{
    backward, build_dataset, build_dataset_streamed, loss, train_with_progress, weights_from_flat, weights_to_flat,
    ExampleOptions, PercentileGradient, TrainConfig, TrainingExample,
};
use lsparcom::unfolded::{
    count_radial_orbits, init_weights, smooth_activation_scalar, ConvBackend, PreparedNetwork,
    RadialOrbits, ACTIVATIONS, FOLDS,
};
use lsparcom::Weights;
use ndarray::{s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Runs one criterion, printing its verdict. Exceeding `budget_secs` fails it.
fn run(id: u32, name: &str, budget_secs: f64, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|_| Err("panicked".into()));
    let secs = start.elapsed().as_secs_f64();
    let (pass, detail) = match result {
        Ok(d) if secs <= budget_secs => (true, d),
        Ok(d) => (false, format!("{d}; over the {budget_secs:.0} s budget")),
        Err(d) => (false, d),
    };
    println!(
        "criterion {id:>2} [{}] {name}: {detail} ({secs:.1} s)",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

// ---------------------------------------------------------------- phantoms

const TEST_SEEDS: std::ops::Range<u64> = 1000..1010;

/// Point phantom of 5 to 30 emitters on a 16x16 field (64x64 at P = 4).
fn phantom(seed: u64, frames: usize) -> (Scene, RenderedMovie) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(5..=30);
    let config = SimulationConfig {
        grid: GridSpec::with_pitch(16, 4, 100.0).unwrap(),
        psf_sigma: 1.0,
        frames,
        noise: NoiseModel::moderate(),
        emitters: EmitterParams::default(),
        scene: SceneKind::Points {
            count,
            min_separation: 6.0,
            margin: 4,
        },
    };
    simulate(&config, seed).unwrap()
}

fn sparcom_options(psf: Psf<f64>) -> SparcomOptions {
    let mut cfg = SolverConfig::new(0.01);
    cfg.accelerated = true;
    cfg.max_iters = 200;
    SparcomOptions::new(psf, cfg)
}

struct Trained {
    weights: Weights,
    secs: f64,
    final_loss: f64,
}

/// Desk-scale training shared by criteria 7 and 8.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let load = |s: usize| Ok(phantom(s as u64, 361).1).map(|r| (r.movie, r.gt_movie));
        let data = build_dataset_streamed(400, load, 2000, &ExampleOptions::default(), 7).unwrap();
        let config = TrainConfig {
            lambda: 0.003,
            epochs: 100,
            learning_rate: 5e-4,
            percentile_gradient: PercentileGradient::Exact,
            ..TrainConfig::default()
        };
        let out = train_with_progress(&data, init_weights(), &config, |r| {
            if r.epoch % 10 == 9 {
                eprintln!("  training epoch {} loss {:.4e} ({:.0} s)", r.epoch + 1, r.mean_loss, r.elapsed_secs);
            }
        })
        .unwrap();
        Trained {
            final_loss: *out.epoch_losses.last().unwrap(),
            weights: out.weights,
            secs: start.elapsed().as_secs_f64(),
        }
    })
}

// ---------------------------------------------------------------- criteria

fn c1_parameter_counts() -> Check {
    let w = init_weights::<f64>();
    let free = w.unconstrained_parameter_count();
    let radial = w.radial_parameter_count();
    let o29 = count_radial_orbits(29).unwrap();
    let o25 = count_radial_orbits(25).unwrap();
    let identity = o25 + FOLDS * o29 + 2 * ACTIVATIONS + 1;
    ensure(
        free == 9058 && radial == 1166 && o29 == 106 && o25 == 83 && identity == 1166,
        format!("{free} free, {radial} radial, orbits 29x29 = {o29}, 25x25 = {o25}, 83 + 10*106 + 22 + 1 = {identity}"),
    )
}

fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let num = (a - b).mapv(|v| v * v).sum().sqrt();
    let den = b.mapv(|v| v * v).sum().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

fn c2_operator_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut inputs = 0;
    let cases = [(4, 2, 0.7), (8, 4, 1.0), (12, 3, 1.3), (16, 4, 1.0), (16, 2, 0.8)];
    for &(m, p, sigma) in &cases {
        let grid = GridSpec::new(m, p).unwrap();
        for squared in [false, true] {
            let psf = Psf::gaussian(sigma);
            let conv = MeasurementOperator::convolutional(&psf, grid, squared).unwrap();
            let explicit = build_measurement_matrix(&psf, grid, squared).unwrap();
            for _ in 0..10 {
                let x = Array2::from_shape_fn((grid.n, grid.n), |_| rng.random_range(-1.0..1.0));
                let y = Array2::from_shape_fn((m, m), |_| rng.random_range(-1.0..1.0));
                worst = worst.max(rel_err(
                    &conv.apply_forward(x.view()).unwrap(),
                    &explicit.apply_forward(x.view()).unwrap(),
                ));
                worst = worst.max(rel_err(
                    &conv.apply_adjoint(y.view()).unwrap(),
                    &explicit.apply_adjoint(y.view()).unwrap(),
                ));
                inputs += 1;
            }
        }
    }
    ensure(
        worst < 1e-10 && inputs >= 100,
        format!("{inputs} input pairs, worst relative error {worst:.2e}"),
    )
}

fn c3_prox() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let step = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x: f64 = rng.random_range(-2.0..2.0);
        let alpha: f64 = rng.random_range(0.0..1.5);
        let got = positive_soft_threshold(Array2::from_elem((1, 1), x).view(), alpha).unwrap()[[0, 0]];
        let objective = |z: f64| 0.5 * (z - x) * (z - x) + alpha * z;
        let steps = (x.max(0.0) + 1.0) / step;
        let best = (0..=steps as usize)
            .map(|k| k as f64 * step)
            .min_by(|a, b| objective(*a).total_cmp(&objective(*b)))
            .unwrap();
        worst = worst.max((got - best).abs());
    }
    ensure(worst <= step, format!("1000 cases, worst gap to grid minimizer {worst:.1e}"))
}

fn c4_descent() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_rise = 0.0f64;
    let mut fista_losses = 0;
    let problems = 24;
    for k in 0..problems {
        let m = rng.random_range(3..=5);
        let p = rng.random_range(2..=3);
        let grid = GridSpec::new(m, p).unwrap();
        let psf = Psf::gaussian(rng.random_range(0.6..1.4));
        let a = build_measurement_matrix(&psf, grid, false).unwrap();
        let formulation = if k % 2 == 0 {
            Formulation::Variance
        } else {
            Formulation::Covariance
        };
        let gram = GramOperator::Explicit {
            matrix: compute_m_matrix(&a, formulation).unwrap(),
            side: grid.n,
        };
        let frames = Array3::from_shape_fn((40, m, m), |_| rng.random_range(0.0..1.0));
        let stack = FrameStack::new(frames, grid).unwrap();
        let v = match formulation {
            Formulation::Variance => {
                let g = variance_of_frames(&stack.frames).unwrap();
                a.squared().apply_adjoint(g.view()).unwrap()
            }
            Formulation::Covariance => lsparcom::stats::compute_v_cov_from_stack(&a, &stack).unwrap(),
        };
        let vmax = v.iter().cloned().fold(0.0, f64::max);
        let problem = Problem {
            v: v.view(),
            gram: &gram,
            data_energy: 0.0,
        };
        let l = lipschitz_constant(grid.n, |x| gram.apply(x)).unwrap().value;
        let mut cfg = SolverConfig::new(rng.random_range(0.01..0.2) * vmax);
        cfg.max_iters = 100;
        let ista = ista_solve(&problem, l, &cfg).unwrap();
        for w in ista.objective_per_iter.windows(2) {
            worst_rise = worst_rise.max(w[1] - w[0]);
        }
        cfg.accelerated = true;
        let fista = fista_solve(&problem, l, &cfg).unwrap();
        if fista.objective_per_iter.last() > ista.objective_per_iter.last() {
            fista_losses += 1;
        }
    }
    ensure(
        worst_rise <= 1e-10 && fista_losses == 0,
        format!("{problems} problems, largest ISTA increase {worst_rise:.1e}, FISTA worse in {fista_losses}"),
    )
}

/// Orbit-wise central-difference check of one example at 64x64 with
/// percentiles frozen at the base point. Returns the worst per-class
/// normwise relative error.
fn gradient_error(ex: &TrainingExample<f64>, w: &Weights, lambda: f64) -> f64 {
    let (_, grads) = backward(ex, w, lambda).unwrap();
    let analytic = grads.to_flat();
    let base = weights_to_flat(w);
    let side = ex.side();
    let frozen = PreparedNetwork::new(w, side, ConvBackend::Fourier)
        .unwrap()
        .trace(ex.g.view(), None)
        .unwrap()
        .percentiles();
    let eval = |p: &[f64]| {
        let mut wp = weights_from_flat(w, p);
        wp.radial_constrained = false;
        let net = PreparedNetwork::new(&wp, side, ConvBackend::Fourier).unwrap();
        let out = net.trace(ex.g.view(), Some(&frozen)).unwrap().output;
        loss(out.view(), ex.x_gt.view(), ex.b.view(), lambda).unwrap()
    };
    let fd = |members: &[usize]| {
        let h = 1e-6 * base[members[0]].abs().max(1e-2);
        let mut plus = base.clone();
        let mut minus = base.clone();
        for &i in members {
            plus[i] += h;
            minus[i] -= h;
        }
        (eval(&plus) - eval(&minus)) / (2.0 * h)
    };
    let class_err = |pairs: Vec<(f64, f64)>| {
        let num = pairs.iter().map(|(a, f)| (a - f).abs()).fold(0.0, f64::max);
        let den = pairs.iter().map(|(_, f)| f.abs()).fold(0.0, f64::max);
        if den == 0.0 {
            num
        } else {
            num / den
        }
    };
    let mut worst = 0.0f64;
    let ni = w.w_i.len();
    let np = w.w_p[0].len();
    let kernels = std::iter::once((0, w.input_side()))
        .chain((0..FOLDS).map(|k| (ni + k * np, w.fold_side())));
    for (offset, k_side) in kernels {
        let orbits = RadialOrbits::new(k_side).unwrap();
        let mut members = vec![Vec::new(); orbits.count()];
        for e in 0..k_side * k_side {
            members[orbits.orbit_of(e / k_side, e % k_side)].push(offset + e);
        }
        let pairs = members
            .iter()
            .map(|m| (m.iter().map(|&i| analytic[i]).sum::<f64>(), fd(m)))
            .collect();
        worst = worst.max(class_err(pairs));
    }
    let nk = ni + FOLDS * np;
    for range in [nk..nk + ACTIVATIONS, nk + ACTIVATIONS..nk + 2 * ACTIVATIONS, nk + 2 * ACTIVATIONS..nk + 2 * ACTIVATIONS + 1] {
        let pairs = range.map(|i| (analytic[i], fd(&[i]))).collect();
        worst = worst.max(class_err(pairs));
    }
    worst
}

fn c5_gradients() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        let (_, r) = phantom(500 + seed, 200);
        let ex = build_dataset(&[(r.movie, r.gt_movie)], 1, &ExampleOptions::default(), seed)
            .unwrap()
            .pop()
            .unwrap();
        let mut w = init_weights::<f64>();
        let radial_noise = |k: &mut Array2<f64>, rng: &mut ChaCha8Rng| {
            let orbits = RadialOrbits::new(k.nrows()).unwrap();
            let f: Vec<f64> = (0..orbits.count()).map(|_| rng.random_range(0.5..1.5)).collect();
            for ((i, j), v) in k.indexed_iter_mut() {
                *v *= f[orbits.orbit_of(i, j)];
            }
        };
        radial_noise(&mut w.w_i, &mut rng);
        for k in &mut w.w_p {
            radial_noise(k, &mut rng);
        }
        for a in &mut w.alpha0 {
            *a = rng.random_range(0.3..0.9);
        }
        for b in &mut w.beta0 {
            *b = rng.random_range(4.0..12.0);
        }
        w.s = rng.random_range(0.05..0.5);
        worst = worst.max(gradient_error(&ex, &w, 0.01));
    }
    ensure(
        worst < 1e-4,
        format!("5 examples of 64x64, every orbit and scalar, worst relative error {worst:.2e}"),
    )
}

fn c6_variance_identity() -> Check {
    let grid = GridSpec::new(16, 4).unwrap();
    let psf = Psf::gaussian(1.0);
    let a_sq = MeasurementOperator::convolutional(&psf, grid, true).unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for (k, t) in [400usize, 3600].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(60 + k as u64);
        for filaments in [false, true] {
            let params = EmitterParams::default();
            let scene = if filaments {
                generate_filament_scene(&mut rng, grid, 3, 12, &params).unwrap()
            } else {
                generate_point_scene(&mut rng, grid, 20, 3.0, 2, &params).unwrap()
            };
            let traces = simulate_blinking(&scene, t, &mut rng).unwrap();
            let movie = render_movie(&scene, &traces, &psf, &NoiseModel::none(), &mut rng).unwrap();
            let empirical = variance_of_frames(&movie.movie.frames).unwrap();
            let expected = a_sq.apply_forward(scene.expected_variance().view()).unwrap();
            let err = rel_err(&empirical, &expected);
            let bound = 5.0 / (t as f64).sqrt();
            ok &= err < bound;
            lines.push(format!(
                "T={t} {}: {err:.4} < {bound:.4}",
                if filaments { "filaments" } else { "points" }
            ));
        }
    }
    ensure(ok, lines.join(", "))
}

struct Scores {
    f1: f64,
    recall: f64,
}

fn mean_scores(maps: &[(lsparcom::EmitterMap, &Scene)]) -> Scores {
    let n = maps.len() as f64;
    let reports: Vec<_> = maps
        .iter()
        .map(|(m, s)| evaluate_localization(m, &s.ground_truth().points, &EvalOptions::default()))
        .collect();
    Scores {
        f1: reports.iter().map(|r| r.f1).sum::<f64>() / n,
        recall: reports.iter().map(|r| r.recall).sum::<f64>() / n,
    }
}

fn c7_end_to_end() -> Check {
    let t = trained();
    let phantoms: Vec<_> = TEST_SEEDS.map(|s| phantom(s, 361)).collect();
    let known = sparcom_options(Psf::gaussian(1.0));
    let delta = sparcom_options(Psf::delta());
    let mut slowest = 0.0f64;
    let (mut a, mut b, mut c) = (Vec::new(), Vec::new(), Vec::new());
    for (scene, r) in &phantoms {
        a.push((reconstruct_sparcom(&r.movie, &known).unwrap(), scene));
        let start = Instant::now();
        b.push((reconstruct_lsparcom(&r.movie, &t.weights, PatchPlan::default()).unwrap(), scene));
        slowest = slowest.max(start.elapsed().as_secs_f64());
        c.push((reconstruct_sparcom(&r.movie, &delta).unwrap(), scene));
    }
    let (fa, fb, fc) = (mean_scores(&a).f1, mean_scores(&b).f1, mean_scores(&c).f1);
    ensure(
        fa >= 0.9 && fb >= fa - 0.05 && fc < fa && fc < fb && t.secs < 7200.0 && slowest < 5.0,
        format!(
            "mean F1 SPARCOM(PSF) {fa:.3}, LSPARCOM {fb:.3}, SPARCOM(delta) {fc:.3}; \
             training {:.0} s (final loss {:.3e}), slowest inference {slowest:.2} s",
            t.secs, t.final_loss
        ),
    )
}

/// Sums consecutive groups of `k` frames.
fn sum_groups(stack: &FrameStack<f64>, k: usize) -> FrameStack<f64> {
    let groups = stack.len() / k;
    let (_, m, _) = stack.frames.dim();
    let mut out = Array3::zeros((groups, m, m));
    for g in 0..groups {
        out.index_axis_mut(Axis(0), g)
            .assign(&stack.frames.slice(s![g * k..(g + 1) * k, .., ..]).sum_axis(Axis(0)));
    }
    FrameStack::new(out, stack.grid).unwrap()
}

fn c8_few_frames() -> Check {
    let t = trained();
    let start = Instant::now();
    let mut full = Vec::new();
    let mut dense = Vec::new();
    let phantoms: Vec<_> = TEST_SEEDS.map(|s| phantom(s, 350)).collect();
    for (scene, r) in &phantoms {
        let summed = sum_groups(&r.movie, 14);
        assert_eq!(summed.len(), 25);
        full.push((reconstruct_lsparcom(&r.movie, &t.weights, PatchPlan::default()).unwrap(), scene));
        dense.push((reconstruct_lsparcom(&summed, &t.weights, PatchPlan::default()).unwrap(), scene));
    }
    let (rf, rd) = (mean_scores(&full).recall, mean_scores(&dense).recall);
    let secs = start.elapsed().as_secs_f64();
    ensure(
        rf - rd < 0.15 && secs < 60.0,
        format!("mean recall 350 frames {rf:.3}, 25 summed frames {rd:.3}, drop {:.1} points", 100.0 * (rf - rd)),
    )
}

fn c9_activation() -> Check {
    let beta = 1e3;
    let mut worst = 0.0f64;
    for alpha in [0.05, 0.5, 1.0, 5.0, 20.0] {
        for k in 0..=200_000 {
            let x = -1.0 + k as f64 * (alpha + 11.0) / 200_000.0;
            if (x - alpha).abs() <= 0.1 {
                continue;
            }
            let hard = if x > alpha { x } else { 0.0 };
            worst = worst.max((smooth_activation_scalar(x, alpha, beta) - hard).abs());
        }
    }
    ensure(worst < 1e-3, format!("beta = 1e3, sup distance outside the band {worst:.2e}"))
}

fn smlm(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_smlm"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("smlm {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline_run(dir: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    std::fs::create_dir_all(dir.join("data")).map_err(|e| e.to_string())?;
    for seed in 0..3 {
        let movie = format!("data/m{seed}.stk");
        let gt_movie = format!("data/m{seed}.gt.stk");
        let gt = format!("m{seed}.csv");
        let seed = seed.to_string();
        smlm(
            &["simulate", "--frames", "120", "--emitters", "12", "--seed", &seed, "--out", &movie,
              "--gt", &gt, "--gt-movie", &gt_movie],
            dir,
        )?;
    }
    smlm(
        &["lsparcom", "train", "--data", "data", "--examples", "12", "--epochs", "3",
          "--batch-size", "4", "--seed", "9",
          "--out", "w.lsw"],
        dir,
    )?;
    smlm(&["lsparcom", "infer", "--in", "data/m0.stk", "--weights", "w.lsw", "--out", "map.stk"], dir)?;
    let read = |p: &str| std::fs::read(dir.join(p)).map_err(|e| e.to_string());
    Ok((read("w.lsw")?, read("map.stk")?))
}

fn c10_determinism() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline_run(&root.path().join("a"))?;
    let second = pipeline_run(&root.path().join("b"))?;
    ensure(
        first == second,
        format!(
            "weights {} bytes identical: {}, map {} bytes identical: {}",
            first.0.len(),
            first.0 == second.0,
            first.1.len(),
            first.1 == second.1
        ),
    )
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let pick = |id: u32| wanted.is_empty() || wanted.contains(&id);
    let criteria: [(u32, &str, f64, fn() -> Check); 10] = [
        (1, "parameter counts", 1.0, c1_parameter_counts),
        (2, "operator equivalence", 10.0, c2_operator_equivalence),
        (3, "prox correctness", 5.0, c3_prox),
        (4, "ISTA descent, FISTA no worse", 60.0, c4_descent),
        (5, "gradient fidelity", 300.0, c5_gradients),
        (6, "variance identity", 60.0, c6_variance_identity),
        (7, "end-to-end recovery", 7200.0 + 600.0, c7_end_to_end),
        (8, "few-frame robustness", 60.0, c8_few_frames),
        (9, "activation asymptotics", 1.0, c9_activation),
        (10, "pipeline determinism", 7800.0, c10_determinism),
    ];
    let mut failed = 0;
    for (id, name, budget, f) in criteria {
        if pick(id) {
            // Criterion 8 reuses the weights trained for 7; train outside its clock.
            if id == 8 {
                trained();
            }
            if !run(id, name, budget, f) {
                failed += 1;
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
