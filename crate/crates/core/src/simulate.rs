//! Synthetic blinking-emitter movies with exact ground truth.
//!
//! Emitters sit on high-resolution pixel centers and switch on and off
//! independently every frame (two-state Bernoulli blinking). Frames are
//! rendered through the measurement operator, then background, Poisson shot
//! noise and Gaussian readout noise are added.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{EmitterMap, EmitterPoint, GridSpec, MeasurementOperator, Psf};
use crate::stats::FrameStack;
use crate::training::gt_grid;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Emitter {
    /// High-resolution row.
    pub row: usize,
    /// High-resolution column.
    pub col: usize,
    /// Photons per frame while on.
    pub mean_brightness: f64,
    pub on_probability: f64,
}

impl Emitter {
    /// Variance of the emitter's intensity trace, `b^2 p (1 - p)`.
    pub fn variance(&self) -> f64 {
        let p = self.on_probability;
        self.mean_brightness * self.mean_brightness * p * (1.0 - p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub emitters: Vec<Emitter>,
    pub grid: GridSpec,
}

impl Scene {
    pub fn new(emitters: Vec<Emitter>, grid: GridSpec) -> Result<Self> {
        for e in &emitters {
            if e.row >= grid.n || e.col >= grid.n {
                return Err(Error::InvalidArgument(format!(
                    "emitter at ({}, {}) outside the {}-pixel grid",
                    e.row, e.col, grid.n
                )));
            }
            if !(e.on_probability > 0.0 && e.on_probability < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "on probability {} outside (0, 1)",
                    e.on_probability
                )));
            }
            if !(e.mean_brightness >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "brightness {}",
                    e.mean_brightness
                )));
            }
        }
        Ok(Self { emitters, grid })
    }

    pub fn len(&self) -> usize {
        self.emitters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emitters.is_empty()
    }

    /// Expected per-pixel variance of the emitter intensities.
    pub fn expected_variance(&self) -> Array2<f64> {
        let mut v = Array2::zeros((self.grid.n, self.grid.n));
        for e in &self.emitters {
            v[[e.row, e.col]] += e.variance();
        }
        v
    }

    /// Ground truth as a point list with the expected variance as amplitude.
    pub fn ground_truth(&self) -> EmitterMap<f64> {
        let points = self
            .emitters
            .iter()
            .map(|e| EmitterPoint {
                row: e.row,
                col: e.col,
                amplitude: e.variance(),
            })
            .collect();
        EmitterMap::from_points(self.grid.n, points).expect("scene validated")
    }
}

/// Ranges emitter properties are drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct EmitterParams {
    pub brightness: (f64, f64),
    pub on_probability: (f64, f64),
}

impl Default for EmitterParams {
    fn default() -> Self {
        Self {
            brightness: (600.0, 1400.0),
            on_probability: (0.1, 0.3),
        }
    }
}

impl EmitterParams {
    fn validate(&self) -> Result<()> {
        let (b0, b1) = self.brightness;
        let (p0, p1) = self.on_probability;
        if !(0.0 <= b0 && b0 <= b1) || !(0.0 < p0 && p0 <= p1 && p1 < 1.0) {
            return Err(Error::InvalidArgument(format!("emitter parameters {self:?}")));
        }
        Ok(())
    }

    fn draw<R: Rng>(&self, rng: &mut R, row: usize, col: usize) -> Emitter {
        let uniform = |rng: &mut R, (a, b): (f64, f64)| if a == b { a } else { rng.random_range(a..b) };
        Emitter {
            row,
            col,
            mean_brightness: uniform(rng, self.brightness),
            on_probability: uniform(rng, self.on_probability),
        }
    }
}

/// Catmull-Rom interpolation of one coordinate.
fn catmull_rom(p0: f64, p1: f64, p2: f64, p3: f64, t: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    0.5 * (2.0 * p1
        + (-p0 + p2) * t
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2
        + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t3)
}

/// Densely sampled smooth curve through `control`.
fn spline_points(control: &[(f64, f64)], per_segment: usize) -> Vec<(f64, f64)> {
    let n = control.len();
    let at = |i: isize| control[i.clamp(0, n as isize - 1) as usize];
    let mut out = Vec::new();
    for seg in 0..n.saturating_sub(1) {
        let s = seg as isize;
        let (a, b, c, d) = (at(s - 1), at(s), at(s + 1), at(s + 2));
        for k in 0..per_segment {
            let t = k as f64 / per_segment as f64;
            out.push((
                catmull_rom(a.0, b.0, c.0, d.0, t),
                catmull_rom(a.1, b.1, c.1, d.1, t),
            ));
        }
    }
    if let Some(last) = control.last() {
        out.push(*last);
    }
    out
}

/// Random smooth filaments (cubic splines through random control points)
/// decorated with emitters at evenly spaced arc-length positions.
pub fn generate_filament_scene<R: Rng>(
    rng: &mut R,
    grid: GridSpec,
    n_filaments: usize,
    emitters_per_filament: usize,
    params: &EmitterParams,
) -> Result<Scene> {
    params.validate()?;
    if grid.n < 2 {
        return Err(Error::InvalidGrid("filaments need at least 2x2 pixels".into()));
    }
    let hi = (grid.n - 1) as f64;
    let mut taken = BTreeSet::new();
    let mut emitters = Vec::new();
    for _ in 0..n_filaments {
        let n_control = rng.random_range(4..=6);
        // A random walk keeps the curve from folding back on itself too often.
        let mut pos = (rng.random_range(0.0..hi), rng.random_range(0.0..hi));
        let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
        let step = grid.n as f64 / 4.0;
        let mut control = vec![pos];
        for _ in 1..n_control {
            heading += rng.random_range(-0.8..0.8);
            pos = (
                (pos.0 + step * heading.sin()).clamp(0.0, hi),
                (pos.1 + step * heading.cos()).clamp(0.0, hi),
            );
            control.push(pos);
        }
        let pts = spline_points(&control, 64);
        let mut arc = vec![0.0];
        for w in pts.windows(2) {
            let d = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
            arc.push(arc.last().unwrap() + d);
        }
        let total = *arc.last().unwrap();
        let mut idx = 0;
        for k in 0..emitters_per_filament {
            let target = total * (k as f64 + rng.random_range(0.0..1.0)) / emitters_per_filament as f64;
            while idx + 1 < arc.len() && arc[idx + 1] < target {
                idx += 1;
            }
            let (r, c) = pts[idx];
            let (r, c) = (r.round().clamp(0.0, hi) as usize, c.round().clamp(0.0, hi) as usize);
            if taken.insert((r, c)) {
                emitters.push(params.draw(rng, r, c));
            }
        }
    }
    Scene::new(emitters, grid)
}

/// Uniformly placed emitters at least `min_separation` high-resolution pixels
/// apart and at least `margin` pixels from the border.
pub fn generate_point_scene<R: Rng>(
    rng: &mut R,
    grid: GridSpec,
    n_emitters: usize,
    min_separation: f64,
    margin: usize,
    params: &EmitterParams,
) -> Result<Scene> {
    params.validate()?;
    if 2 * margin >= grid.n {
        return Err(Error::InvalidGrid(format!(
            "margin {margin} leaves no room in a {}-pixel grid",
            grid.n
        )));
    }
    let max_attempts = 10_000 * n_emitters.max(1);
    let mut emitters: Vec<Emitter> = Vec::with_capacity(n_emitters);
    let mut attempts = 0;
    while emitters.len() < n_emitters {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InvalidArgument(format!(
                "cannot place {n_emitters} emitters {min_separation} pixels apart"
            )));
        }
        let r = rng.random_range(margin..grid.n - margin);
        let c = rng.random_range(margin..grid.n - margin);
        let far = emitters.iter().all(|e| {
            let d2 = (e.row as f64 - r as f64).powi(2) + (e.col as f64 - c as f64).powi(2);
            d2 >= min_separation * min_separation
        });
        if far {
            emitters.push(params.draw(rng, r, c));
        }
    }
    Scene::new(emitters, grid)
}

/// Per-frame emitter intensities, shape `(T, emitters)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Traces {
    pub values: Array2<f64>,
}

impl Traces {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }
}

/// Independent Bernoulli on/off states scaled by each emitter's brightness.
pub fn simulate_blinking<R: Rng>(scene: &Scene, frames: usize, rng: &mut R) -> Result<Traces> {
    if frames < 2 {
        return Err(Error::TooFewFrames {
            needed: 2,
            got: frames,
        });
    }
    let mut values = Array2::zeros((frames, scene.len()));
    for mut row in values.outer_iter_mut() {
        for (v, e) in row.iter_mut().zip(&scene.emitters) {
            if rng.random::<f64>() < e.on_probability {
                *v = e.mean_brightness;
            }
        }
    }
    Ok(Traces { values })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    /// Photons per pixel per frame.
    pub background: f64,
    /// Standard deviation of additive readout noise, in counts.
    pub readout_sigma: f64,
    pub shot_noise: bool,
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            background: 0.0,
            readout_sigma: 0.0,
            shot_noise: false,
        }
    }

    /// Background, shot noise and readout noise at levels typical of a good
    /// camera.
    pub fn moderate() -> Self {
        Self {
            background: 100.0,
            readout_sigma: 5.0,
            shot_noise: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.background >= 0.0) || !(self.readout_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise model {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RenderedMovie {
    /// Low-resolution camera frames.
    pub movie: FrameStack<f64>,
    /// Noiseless emitter intensities on the high-resolution grid.
    pub gt_movie: FrameStack<f64>,
}

/// Renders every frame of `traces`. Frame `t` draws its noise from its own
/// ChaCha stream, so the result does not depend on scheduling.
pub fn render_movie<R: Rng>(
    scene: &Scene,
    traces: &Traces,
    psf: &Psf<f64>,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<RenderedMovie> {
    noise.validate()?;
    if traces.values.ncols() != scene.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} emitter traces", scene.len()),
            got: traces.values.ncols().to_string(),
        });
    }
    let grid = scene.grid;
    let op = MeasurementOperator::convolutional(psf, grid, false)?;
    let footprints: Vec<Vec<(usize, f64)>> = scene
        .emitters
        .iter()
        .map(|e| op.column_support(e.row, e.col))
        .collect();
    let t_len = traces.frames();
    let m = grid.m;
    let seed: u64 = rng.random();
    let poisson_ok = noise.shot_noise;
    let readout = Normal::new(0.0, noise.readout_sigma.max(0.0))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let frames: Vec<Vec<f64>> = (0..t_len)
        .into_par_iter()
        .map(|t| {
            let mut frng = ChaCha8Rng::seed_from_u64(seed);
            frng.set_stream(t as u64);
            let mut img = vec![noise.background; m * m];
            for (k, fp) in footprints.iter().enumerate() {
                let b = traces.values[[t, k]];
                if b == 0.0 {
                    continue;
                }
                for &(idx, a) in fp {
                    img[idx] += b * a;
                }
            }
            for v in img.iter_mut() {
                if poisson_ok && *v > 0.0 {
                    *v = Poisson::new(*v).map(|d| d.sample(&mut frng)).unwrap_or(*v);
                }
                if noise.readout_sigma > 0.0 {
                    *v += readout.sample(&mut frng);
                }
            }
            img
        })
        .collect();
    let mut movie = Array3::zeros((t_len, m, m));
    for (mut dst, src) in movie.outer_iter_mut().zip(frames) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s;
        }
    }
    let mut gt = Array3::zeros((t_len, grid.n, grid.n));
    for (t, mut frame) in gt.axis_iter_mut(Axis(0)).enumerate() {
        for (k, e) in scene.emitters.iter().enumerate() {
            frame[[e.row, e.col]] += traces.values[[t, k]];
        }
    }
    Ok(RenderedMovie {
        movie: FrameStack::new(movie, grid)?,
        gt_movie: FrameStack::new(gt, gt_grid(&grid)?)?,
    })
}

/// Scene, blinking and rendering in one call, all driven by `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationConfig {
    pub grid: GridSpec,
    pub psf_sigma: f64,
    pub frames: usize,
    pub noise: NoiseModel,
    pub emitters: EmitterParams,
    pub scene: SceneKind,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SceneKind {
    Filaments {
        count: usize,
        emitters_per_filament: usize,
    },
    Points {
        count: usize,
        min_separation: f64,
        margin: usize,
    },
}

pub fn simulate(config: &SimulationConfig, seed: u64) -> Result<(Scene, RenderedMovie)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = match config.scene {
        SceneKind::Filaments {
            count,
            emitters_per_filament,
        } => generate_filament_scene(&mut rng, config.grid, count, emitters_per_filament, &config.emitters)?,
        SceneKind::Points {
            count,
            min_separation,
            margin,
        } => generate_point_scene(&mut rng, config.grid, count, min_separation, margin, &config.emitters)?,
    };
    let traces = simulate_blinking(&scene, config.frames, &mut rng)?;
    let psf = Psf::gaussian(config.psf_sigma);
    let rendered = render_movie(&scene, &traces, &psf, &config.noise, &mut rng)?;
    Ok((scene, rendered))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_measurement_matrix;
    use crate::stats::variance_of_frames;
    use crate::training::group_frames;

    fn grid() -> GridSpec {
        GridSpec::new(8, 4).unwrap()
    }

    #[test]
    fn filament_scene_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EmitterParams::default();
        let empty = generate_filament_scene(&mut rng, grid(), 0, 10, &p).unwrap();
        assert!(empty.is_empty());
        let a = generate_filament_scene(&mut ChaCha8Rng::seed_from_u64(5), grid(), 3, 20, &p).unwrap();
        let b = generate_filament_scene(&mut ChaCha8Rng::seed_from_u64(5), grid(), 3, 20, &p).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        assert!(a.emitters.iter().all(|e| e.row < 32 && e.col < 32));
        let small = GridSpec::new(1, 1).unwrap();
        assert!(generate_filament_scene(&mut rng, small, 1, 1, &p).is_err());
    }

    #[test]
    fn point_scene_respects_separation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = generate_point_scene(&mut rng, grid(), 8, 6.0, 2, &EmitterParams::default()).unwrap();
        assert_eq!(s.len(), 8);
        for (i, a) in s.emitters.iter().enumerate() {
            assert!(a.row >= 2 && a.row < 30);
            for b in &s.emitters[i + 1..] {
                let d2 = (a.row as f64 - b.row as f64).powi(2) + (a.col as f64 - b.col as f64).powi(2);
                assert!(d2 >= 36.0);
            }
        }
        assert!(generate_point_scene(&mut rng, grid(), 500, 10.0, 0, &EmitterParams::default()).is_err());
    }

    #[test]
    fn invalid_emitters_rejected() {
        let e = Emitter {
            row: 0,
            col: 0,
            mean_brightness: 1.0,
            on_probability: 1.0,
        };
        assert!(Scene::new(vec![e], grid()).is_err());
        let e = Emitter {
            row: 40,
            on_probability: 0.5,
            ..e
        };
        assert!(Scene::new(vec![e], grid()).is_err());
    }

    fn two_emitter_scene(p: f64) -> Scene {
        let mk = |row, col| Emitter {
            row,
            col,
            mean_brightness: 3.0,
            on_probability: p,
        };
        Scene::new(vec![mk(5, 5), mk(20, 17)], grid()).unwrap()
    }

    #[test]
    fn blinking_statistics() {
        let t = 20_000;
        let p = 0.3;
        let scene = two_emitter_scene(p);
        let tr = simulate_blinking(&scene, t, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let tol = 5.0 / (t as f64).sqrt();
        let on = tr.values.column(0).iter().filter(|v| **v > 0.0).count() as f64 / t as f64;
        assert!((on - p).abs() < tol);
        let c0 = tr.values.column(0).mapv(|v| v / 3.0 - p);
        let c1 = tr.values.column(1).mapv(|v| v / 3.0 - p);
        let corr = (&c0 * &c1).mean().unwrap() / (p * (1.0 - p));
        assert!(corr.abs() < tol);
        let var = tr.values.column(0).var(0.0);
        assert!((var - 9.0 * p * (1.0 - p)).abs() < 9.0 * tol);
        assert!(simulate_blinking(&scene, 1, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn noiseless_always_on_emitter_renders_its_column() {
        let e = Emitter {
            row: 13,
            col: 6,
            mean_brightness: 2.0,
            on_probability: 0.5,
        };
        let scene = Scene::new(vec![e], grid()).unwrap();
        let traces = Traces {
            values: Array2::from_elem((3, 1), 2.0),
        };
        let psf = Psf::gaussian(1.0);
        let r = render_movie(&scene, &traces, &psf, &NoiseModel::none(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let op = MeasurementOperator::convolutional(&psf, grid(), false).unwrap();
        let col = op.column(13, 6).mapv(|v| 2.0 * v);
        for f in r.movie.frames.outer_iter() {
            assert_eq!(f, col);
        }
        assert_eq!(r.gt_movie.frames[[1, 13, 6]], 2.0);
        assert_eq!(r.gt_movie.frames.sum(), 6.0);
    }

    #[test]
    fn background_mean() {
        let scene = Scene::new(vec![], grid()).unwrap();
        let traces = Traces {
            values: Array2::zeros((500, 0)),
        };
        let noise = NoiseModel {
            background: 50.0,
            readout_sigma: 2.0,
            shot_noise: true,
        };
        let r = render_movie(&scene, &traces, &Psf::gaussian(1.0), &noise, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mean = r.movie.frames.mean().unwrap();
        let n = r.movie.frames.len() as f64;
        assert!((mean - 50.0).abs() < 5.0 * (54.0 / n).sqrt());
    }

    #[test]
    fn variance_identity_on_small_grid() {
        let grid = GridSpec::new(4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scene = generate_point_scene(&mut rng, grid, 3, 2.0, 0, &EmitterParams::default()).unwrap();
        let traces = simulate_blinking(&scene, 50, &mut rng).unwrap();
        let psf = Psf::gaussian(1.0);
        let r = render_movie(&scene, &traces, &psf, &NoiseModel::none(), &mut rng).unwrap();
        // With deterministic traces the identity is exact once the empirical
        // trace covariance is diagonal; compare against the full Eq. with cross terms.
        let a = build_measurement_matrix(&psf, grid, false).unwrap().to_matrix();
        let t = traces.frames() as f64;
        let means: Vec<f64> = (0..scene.len()).map(|k| traces.values.column(k).sum() / t).collect();
        let mut expected = Array2::<f64>::zeros((4, 4));
        for row in 0..16 {
            let mut acc = 0.0;
            for ti in 0..traces.frames() {
                let mut y = 0.0;
                for (k, e) in scene.emitters.iter().enumerate() {
                    y += a[[row, e.row * 8 + e.col]] * (traces.values[[ti, k]] - means[k]);
                }
                acc += y * y;
            }
            expected[[row / 4, row % 4]] = acc / t;
        }
        let got = variance_of_frames(&r.movie.frames).unwrap();
        for (g, e) in got.iter().zip(expected.iter()) {
            assert!((g - e).abs() <= 1e-9 * e.abs().max(1.0));
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = SimulationConfig {
            grid: grid(),
            psf_sigma: 1.0,
            frames: 20,
            noise: NoiseModel::moderate(),
            emitters: EmitterParams::default(),
            scene: SceneKind::Filaments {
                count: 2,
                emitters_per_filament: 10,
            },
        };
        let (s1, r1) = simulate(&cfg, 4).unwrap();
        let (s2, r2) = simulate(&cfg, 4).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(r1.movie, r2.movie);
        assert_eq!(r1.gt_movie, r2.gt_movie);
        let (_, r3) = simulate(&cfg, 5).unwrap();
        assert_ne!(r1.movie, r3.movie);
    }

    #[test]
    fn grouped_frames_have_proportionally_more_emitters() {
        let grid = GridSpec::new(16, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = EmitterParams {
            brightness: (1.0, 1.0),
            on_probability: (0.02, 0.02),
        };
        let scene = generate_point_scene(&mut rng, grid, 200, 0.0, 0, &params).unwrap();
        let traces = simulate_blinking(&scene, 4000, &mut rng).unwrap();
        let r = render_movie(&scene, &traces, &Psf::gaussian(1.0), &NoiseModel::none(), &mut rng).unwrap();
        let per_frame = r.gt_movie.frames.sum() / 4000.0;
        let grouped = group_frames(&[&r.gt_movie.frames], 40, &mut rng).pop().unwrap();
        let per_group = grouped.sum() / grouped.len_of(Axis(0)) as f64;
        let ratio = per_group / per_frame;
        assert!((ratio - 40.0).abs() < 1e-9, "{ratio}");
        assert!((per_frame - 4.0).abs() < 0.5, "{per_frame}");
    }
}
