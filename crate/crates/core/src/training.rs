//! Supervised fitting of [`LsparcomWeights`].
//!
//! The loss of one example is
//!
//! ```text
//! (1 / N^2) sum [ b (x_gt - x_out)^2 + lambda (1 - b) |x_out| ]
//! ```
//!
//! with `b` the support mask of the ground truth. Gradients are derived by
//! hand through every fold. The 1st/99th percentiles that set each activation
//! threshold are by default treated as constants of the step
//! ([`PercentileGradient`]); the dependence on `alpha0` and `beta0` is exact.

use std::time::Instant;

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::conv::Spectrum;
use crate::error::{shape_err, Error, Result};
use crate::model::GridSpec;
use crate::scalar::Scalar;
use crate::stats::{preprocess_scaled, resize_to_high_res, variance_of_frames, FrameStack};
use crate::unfolded::{
    percentile_weights, sigmoid, ActivationParams, ConvBackend, LsparcomWeights, PreparedNetwork,
    RadialOrbits, Threshold, ACTIVATIONS, ALPHA_FLOOR, FOLDS,
};

/// Loss above which training is considered to have diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// One input / target pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample<T> {
    pub g: Array2<T>,
    pub x_gt: Array2<T>,
    pub b: Array2<T>,
}

impl<T: Scalar> TrainingExample<T> {
    /// Builds the example, deriving the mask as `x_gt > 0`.
    pub fn new(g: Array2<T>, x_gt: Array2<T>) -> Result<Self> {
        if g.dim() != x_gt.dim() {
            return Err(shape_err(format!("{:?}", g.dim()), format!("{:?}", x_gt.dim())));
        }
        if g.nrows() != g.ncols() {
            return Err(shape_err("square patch", format!("{:?}", g.dim())));
        }
        let b = x_gt.mapv(|v| if v > T::zero() { T::one() } else { T::zero() });
        Ok(Self { g, x_gt, b })
    }

    pub fn side(&self) -> usize {
        self.g.nrows()
    }

    pub fn cast<U: Scalar>(&self) -> TrainingExample<U> {
        let c = |v: &T| U::lit(v.to_f64_lossy());
        TrainingExample {
            g: self.g.map(c),
            x_gt: self.x_gt.map(c),
            b: self.b.map(c),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub rng_seed: u64,
    pub percentile_gradient: PercentileGradient,
}

/// How the loss gradient treats the per-layer 1st/99th percentiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PercentileGradient {
    /// Percentiles are constants of each step.
    StraightThrough,
    /// Percentiles are differentiated as the interpolated order statistics
    /// they are (exact wherever the ranking is locally constant).
    Exact,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.7,
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            rng_seed: 0,
            percentile_gradient: PercentileGradient::StraightThrough,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {}", self.lambda));
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) {
            return bad("learning rate and epsilon must be positive".into());
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("Adam decay {b}"));
            }
        }
        Ok(())
    }
}

/// Masked loss of one output patch.
pub fn loss<T: Scalar>(
    x_out: ArrayView2<T>,
    x_gt: ArrayView2<T>,
    b: ArrayView2<T>,
    lambda: f64,
) -> Result<T> {
    if x_out.dim() != x_gt.dim() || x_out.dim() != b.dim() {
        return Err(shape_err(format!("{:?}", x_gt.dim()), format!("{:?}", x_out.dim())));
    }
    let lambda = T::lit(lambda);
    let mut acc = T::zero();
    Zip::from(&x_out).and(&x_gt).and(&b).for_each(|&o, &g, &m| {
        let d = g - o;
        acc += m * d * d + lambda * (T::one() - m) * o.abs();
    });
    Ok(acc / T::from_usize(x_out.len().max(1)).unwrap())
}

/// Gradient of the loss, laid out like [`LsparcomWeights`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub w_i: Array2<T>,
    pub w_p: Vec<Array2<T>>,
    pub alpha0: Vec<T>,
    pub beta0: Vec<T>,
    pub s: T,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(w: &LsparcomWeights<T>) -> Self {
        Self {
            w_i: Array2::zeros(w.w_i.dim()),
            w_p: w.w_p.iter().map(|k| Array2::zeros(k.dim())).collect(),
            alpha0: vec![T::zero(); w.alpha0.len()],
            beta0: vec![T::zero(); w.beta0.len()],
            s: T::zero(),
        }
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut v = Vec::new();
        v.extend(self.w_i.iter().cloned());
        for k in &self.w_p {
            v.extend(k.iter().cloned());
        }
        v.extend(&self.alpha0);
        v.extend(&self.beta0);
        v.push(self.s);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    /// Orbit-averages kernel gradients so updates keep kernels radial.
    pub fn project_radial(&mut self) {
        let oi = RadialOrbits::new(self.w_i.nrows()).expect("odd kernel");
        oi.project(&mut self.w_i);
        if let Some(k0) = self.w_p.first() {
            let op = RadialOrbits::new(k0.nrows()).expect("odd kernel");
            for k in &mut self.w_p {
                op.project(k);
            }
        }
    }
}

/// Flat parameter vector in manifest order: `w_i`, `w_p[0..]`, `alpha0`,
/// `beta0`, `s`.
pub fn weights_to_flat<T: Scalar>(w: &LsparcomWeights<T>) -> Vec<T> {
    let mut v = Vec::with_capacity(w.unconstrained_parameter_count());
    v.extend(w.w_i.iter().cloned());
    for k in &w.w_p {
        v.extend(k.iter().cloned());
    }
    v.extend(&w.alpha0);
    v.extend(&w.beta0);
    v.push(w.s);
    v
}

/// Inverse of [`weights_to_flat`] for weights of the same shape as `like`.
pub fn weights_from_flat<T: Scalar>(like: &LsparcomWeights<T>, flat: &[T]) -> LsparcomWeights<T> {
    assert_eq!(flat.len(), like.unconstrained_parameter_count());
    let mut it = flat.iter().cloned();
    let mut take = |shape: (usize, usize)| {
        Array2::from_shape_fn(shape, |_| it.next().expect("length checked"))
    };
    let w_i = take(like.w_i.dim());
    let w_p = like.w_p.iter().map(|k| take(k.dim())).collect();
    let rest: Vec<T> = it.collect();
    let na = like.alpha0.len();
    let nb = like.beta0.len();
    LsparcomWeights {
        w_i,
        w_p,
        alpha0: rest[..na].to_vec(),
        beta0: rest[na..na + nb].to_vec(),
        s: rest[na + nb],
        radial_constrained: like.radial_constrained,
    }
}

/// Loss gradient of one example before the kernel spectra are inverted.
struct PartialGradients<T: Scalar> {
    loss: T,
    cross_i: Spectrum<T>,
    cross_p: Vec<Spectrum<T>>,
    alpha0: Vec<T>,
    beta0: Vec<T>,
    s: T,
}

/// Back-propagates `dx` through one activation layer. Returns the gradient
/// with respect to the pre-activation and the `alpha0`, `beta0` gradients.
fn activation_backward<T: Scalar>(
    pre: &Array2<T>,
    dx: &Array2<T>,
    th: Threshold<T>,
    params: ActivationParams<T>,
    mode: PercentileGradient,
) -> (Array2<T>, T, T) {
    let beta0 = params.beta0;
    let (alpha, beta) = (th.alpha, th.beta);
    let mut dz = Array2::zeros(pre.dim());
    let mut d_alpha = T::zero();
    let mut d_beta = T::zero();
    Zip::from(&mut dz).and(pre).and(dx).for_each(|o, &z, &g| {
        if z <= T::zero() || g == T::zero() {
            return;
        }
        let sg = sigmoid(beta * (z - alpha));
        let ds = z * sg * (T::one() - sg);
        *o = g * (sg + ds * beta);
        d_alpha -= g * ds * beta;
        d_beta += g * ds * (z - alpha);
    });
    let floor = T::lit(ALPHA_FLOOR);
    let alpha_eff = alpha.max(floor);
    let dbeta_dalpha = if alpha > floor {
        -beta0 / (alpha * alpha)
    } else {
        T::zero()
    };
    let d_cut = d_alpha + d_beta * dbeta_dalpha;
    let range = th.i99 - th.i1;
    let g_alpha0 = range * d_cut;
    let g_beta0 = d_beta / alpha_eff;
    if mode == PercentileGradient::Exact && d_cut != T::zero() {
        let flat = pre.as_slice().expect("standard layout");
        let dz_flat = dz.as_slice_mut().expect("standard layout");
        let d_i1 = d_cut * (T::one() - params.alpha0);
        let d_i99 = d_cut * params.alpha0;
        for (p, d) in [(1.0, d_i1), (99.0, d_i99)] {
            for (i, w) in percentile_weights(flat, p) {
                dz_flat[i] += d * w;
            }
        }
    }
    (dz, g_alpha0, g_beta0)
}

fn example_backward<T: Scalar>(
    net: &PreparedNetwork<'_, T>,
    ex: &TrainingExample<T>,
    lambda: f64,
    mode: PercentileGradient,
) -> Result<PartialGradients<T>> {
    let fk = net
        .fourier
        .as_ref()
        .expect("backward requires the Fourier backend");
    let w = net.weights;
    let n = net.side;
    let trace = net.trace(ex.g.view(), None)?;
    let out = &trace.output;
    let loss_value = loss(out.view(), ex.x_gt.view(), ex.b.view(), lambda)?;

    let inv_npx = T::one() / T::from_usize(n * n).unwrap();
    let lam = T::lit(lambda);
    let two = T::lit(2.0);
    let mut d_out = Array2::zeros((n, n));
    Zip::from(&mut d_out)
        .and(out)
        .and(&ex.x_gt)
        .and(&ex.b)
        .for_each(|d, &o, &g, &m| {
            let sign = if o > T::zero() {
                T::one()
            } else if o < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            *d = (m * two * (o - g) + lam * (T::one() - m) * sign) * inv_npx;
        });

    let g_s = Zip::from(&d_out)
        .and(&trace.layers[FOLDS].out)
        .fold(T::zero(), |acc, &d, &x| acc + d * x);
    let mut dx = d_out.mapv(|v| v * w.s);
    let mut d_c = Array2::<T>::zeros((n, n));
    let mut alpha0 = vec![T::zero(); ACTIVATIONS];
    let mut beta0 = vec![T::zero(); ACTIVATIONS];
    let len = fk.engine.len();
    let mut cross_p: Vec<Spectrum<T>> = (0..FOLDS).map(|_| Spectrum::zeros(len)).collect();

    for layer in (0..ACTIVATIONS).rev() {
        let lt = &trace.layers[layer];
        let (dz, ga, gb) = activation_backward(&lt.pre, &dx, lt.threshold, w.activation(layer), mode);
        if !(ga.is_finite() && gb.is_finite()) || dz.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient at fold {layer}")));
        }
        alpha0[layer] = ga;
        beta0[layer] = gb;
        d_c += &dz;
        if layer > 0 {
            let k = layer - 1;
            let dz_spec = fk.engine.spectrum(dz.view());
            let corr = fk
                .engine
                .conv_same_from(&dz_spec, &fk.w_p_flipped[k], n, w.fold_side());
            cross_p[k].add_product_conj(&dz_spec, &trace.spectra[k + 1]);
            dx = dz - corr;
        }
    }
    let mut cross_i = Spectrum::zeros(len);
    cross_i.add_product_conj(&fk.engine.spectrum(d_c.view()), &trace.spectra[0]);
    Ok(PartialGradients {
        loss: loss_value,
        cross_i,
        cross_p,
        alpha0,
        beta0,
        s: g_s,
    })
}

/// Mean loss and mean gradient over `examples`, all of the same side, with
/// the percentiles held constant.
pub fn batch_gradients<T: Scalar>(
    examples: &[&TrainingExample<T>],
    weights: &LsparcomWeights<T>,
    lambda: f64,
) -> Result<(T, Gradients<T>)> {
    batch_gradients_with(examples, weights, lambda, PercentileGradient::StraightThrough)
}

/// Mean loss and mean gradient over `examples`, all of the same side.
///
/// Examples run in parallel; accumulation follows example order, so the result
/// does not depend on the thread count.
pub fn batch_gradients_with<T: Scalar>(
    examples: &[&TrainingExample<T>],
    weights: &LsparcomWeights<T>,
    lambda: f64,
    mode: PercentileGradient,
) -> Result<(T, Gradients<T>)> {
    let first = examples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let side = first.side();
    if let Some(bad) = examples.iter().find(|e| e.side() != side) {
        return Err(shape_err(format!("{side}x{side}"), format!("{:?}", bad.g.dim())));
    }
    let net = PreparedNetwork::new(weights, side, ConvBackend::Fourier)?;
    let parts: Vec<Result<PartialGradients<T>>> = examples
        .par_iter()
        .map(|ex| example_backward(&net, ex, lambda, mode))
        .collect();
    let fk = net.fourier.as_ref().expect("Fourier backend");
    let len = fk.engine.len();
    let mut total_loss = T::zero();
    let mut cross_i = Spectrum::zeros(len);
    let mut cross_p: Vec<Spectrum<T>> = (0..FOLDS).map(|_| Spectrum::zeros(len)).collect();
    let mut grads = Gradients::zeros_like(weights);
    for part in parts {
        let part = part?;
        total_loss += part.loss;
        cross_i.add_assign(&part.cross_i);
        for (acc, c) in cross_p.iter_mut().zip(&part.cross_p) {
            acc.add_assign(c);
        }
        for (a, b) in grads.alpha0.iter_mut().zip(&part.alpha0) {
            *a += *b;
        }
        for (a, b) in grads.beta0.iter_mut().zip(&part.beta0) {
            *a += *b;
        }
        grads.s += part.s;
    }
    let inv = T::one() / T::from_usize(examples.len()).unwrap();
    grads.w_i = fk
        .engine
        .kernel_gradient_from(cross_i, weights.input_side())
        .mapv(|v| v * inv);
    grads.w_p = cross_p
        .into_iter()
        .map(|c| {
            fk.engine
                .kernel_gradient_from(c, weights.fold_side())
                .mapv(|v| -v * inv)
        })
        .collect();
    grads.alpha0.iter_mut().for_each(|v| *v = *v * inv);
    grads.beta0.iter_mut().for_each(|v| *v = *v * inv);
    grads.s = grads.s * inv;
    if weights.radial_constrained {
        grads.project_radial();
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("batch gradient".into()));
    }
    Ok((total_loss * inv, grads))
}

/// Loss and gradient of a single example.
pub fn backward<T: Scalar>(
    example: &TrainingExample<T>,
    weights: &LsparcomWeights<T>,
    lambda: f64,
) -> Result<(T, Gradients<T>)> {
    batch_gradients(&[example], weights, lambda)
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(weights: &LsparcomWeights<T>) -> Self {
        let n = weights.unconstrained_parameter_count();
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update followed by the feasibility projections.
pub fn adam_step<T: Scalar>(
    weights: &mut LsparcomWeights<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<()> {
    let g = grads.to_flat();
    let mut w = weights_to_flat(weights);
    if g.len() != w.len() || state.m.len() != w.len() || state.v.len() != w.len() {
        return Err(shape_err(w.len().to_string(), g.len().to_string()));
    }
    state.t += 1;
    let b1 = T::lit(config.adam_beta1);
    let b2 = T::lit(config.adam_beta2);
    let one = T::one();
    let c1 = one - b1.powi(state.t as i32);
    let c2 = one - b2.powi(state.t as i32);
    let lr = T::lit(config.learning_rate);
    let eps = T::lit(config.adam_eps);
    for i in 0..w.len() {
        state.m[i] = b1 * state.m[i] + (one - b1) * g[i];
        state.v[i] = b2 * state.v[i] + (one - b2) * g[i] * g[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    *weights = weights_from_flat(weights, &w);
    weights.enforce_constraints();
    Ok(())
}

/// Progress record emitted after every epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub weights: LsparcomWeights<T>,
    pub epoch_losses: Vec<f64>,
}

/// Trains from `init` for `config.epochs` passes over `dataset`.
pub fn train<T: Scalar>(
    dataset: &[TrainingExample<T>],
    init: LsparcomWeights<T>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with_progress(dataset, init, config, |_| {})
}

pub fn train_with_progress<T: Scalar>(
    dataset: &[TrainingExample<T>],
    init: LsparcomWeights<T>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(EpochRecord),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    init.validate()?;
    let mut weights = init;
    weights.enforce_constraints();
    let mut state = AdamState::new(&weights);
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let start = Instant::now();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainingExample<T>> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (l, grads) =
                batch_gradients_with(&batch, &weights, config.lambda, config.percentile_gradient)?;
            let l = l.to_f64_lossy();
            if !l.is_finite() || l > DIVERGENCE_LOSS {
                return Err(Error::Diverged { epoch, loss: l });
            }
            adam_step(&mut weights, &grads, &mut state, config)?;
            sum += l;
            batches += 1;
        }
        let mean_loss = sum / batches as f64;
        epoch_losses.push(mean_loss);
        let record = EpochRecord {
            epoch,
            mean_loss,
            elapsed_secs: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} loss {:.6e} time {:.1}s",
            record.epoch,
            record.mean_loss,
            record.elapsed_secs
        );
        on_epoch(record);
    }
    Ok(TrainOutcome {
        weights,
        epoch_losses,
    })
}

/// Rotation by `quarter_turns * 90` degrees counter-clockwise. A flipped
/// index `i` reads `n - 1 - i + shift`; out-of-range reads give zero.
pub fn rotate_quarter<T: Scalar>(img: ArrayView2<T>, quarter_turns: usize, shift: isize) -> Array2<T> {
    let mut cur = img.to_owned();
    for _ in 0..quarter_turns % 4 {
        let (r, c) = cur.dim();
        let src = cur;
        cur = Array2::from_shape_fn((c, r), |(i, j)| {
            let sj = c as isize - 1 - i as isize + shift;
            if sj < 0 || sj >= c as isize {
                T::zero()
            } else {
                src[[j, sj as usize]]
            }
        });
    }
    cur
}

/// How [`make_training_example`] derives an example from a movie pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleOptions {
    /// Low-resolution side of the cropped window.
    pub window_low: usize,
    /// Number of frames summed into one higher-density frame (1 = off).
    pub group_size: usize,
    pub rotate: bool,
    /// Constant factor applied to the ground-truth variance.
    pub gt_scale: f64,
}

impl Default for ExampleOptions {
    fn default() -> Self {
        Self {
            window_low: 16,
            group_size: 1,
            rotate: true,
            gt_scale: 1.0,
        }
    }
}

/// Sums frames in random disjoint groups of `k`, using one permutation for
/// every array so that they stay aligned. Leftover frames are dropped.
pub fn group_frames<T: Scalar, R: Rng>(stacks: &[&Array3<T>], k: usize, rng: &mut R) -> Vec<Array3<T>> {
    let t = stacks[0].len_of(Axis(0));
    let mut perm: Vec<usize> = (0..t).collect();
    perm.shuffle(rng);
    let groups = t / k.max(1);
    stacks
        .iter()
        .map(|s| {
            let (_, r, c) = s.dim();
            let mut out = Array3::zeros((groups, r, c));
            for (gidx, chunk) in perm.chunks_exact(k.max(1)).enumerate() {
                let mut dst = out.index_axis_mut(Axis(0), gidx);
                for &f in chunk {
                    dst += &s.index_axis(Axis(0), f);
                }
            }
            out
        })
        .collect()
}

/// Builds one example from a low-resolution movie and its aligned noiseless
/// high-resolution emitter movie.
///
/// The movie goes through the inference preprocessing (global normalization,
/// median removal); the ground truth is divided by the same normalization
/// constant so both variances share units, then multiplied by `gt_scale`.
pub fn make_training_example<T: Scalar, R: Rng>(
    movie: &FrameStack<T>,
    gt_movie: &FrameStack<T>,
    rng: &mut R,
    opts: &ExampleOptions,
) -> Result<TrainingExample<T>> {
    let grid = movie.grid;
    if gt_movie.grid.m != grid.n || gt_movie.len() != movie.len() {
        return Err(shape_err(
            format!("{} frames of {}x{}", movie.len(), grid.n, grid.n),
            format!("{} frames of {}x{}", gt_movie.len(), gt_movie.grid.m, gt_movie.grid.m),
        ));
    }
    if opts.window_low == 0 || opts.window_low > grid.m {
        return Err(Error::InvalidArgument(format!(
            "window of {} low-res pixels exceeds the {}-pixel frame",
            opts.window_low, grid.m
        )));
    }
    if opts.group_size == 0 {
        return Err(Error::InvalidArgument("group size must be positive".into()));
    }
    let (frames, gt_frames) = if opts.group_size > 1 {
        let mut g = group_frames(&[&movie.frames, &gt_movie.frames], opts.group_size, rng);
        let gt = g.pop().expect("two stacks");
        (g.pop().expect("two stacks"), gt)
    } else {
        (movie.frames.clone(), gt_movie.frames.clone())
    };
    let stack = FrameStack::new(frames, grid)?;
    let (pre, scale) = preprocess_scaled(&stack)?;
    let g_low = variance_of_frames(&pre.frames)?;
    let gt_norm = T::lit(opts.gt_scale) / (scale * scale);
    let gt_var = variance_of_frames(&gt_frames)?.mapv(|v| v * gt_norm);

    let turns = if opts.rotate { rng.random_range(0..4) } else { 0 };
    let g_low = rotate_quarter(g_low.view(), turns, 0);
    let gt_var = rotate_quarter(gt_var.view(), turns, grid.flip_shift());
    let g = resize_to_high_res(g_low.view(), grid.p);

    let span = grid.m - opts.window_low;
    let r0 = rng.random_range(0..=span) * grid.p;
    let c0 = rng.random_range(0..=span) * grid.p;
    let w = opts.window_low * grid.p;
    let crop = |a: &Array2<T>| a.slice(ndarray::s![r0..r0 + w, c0..c0 + w]).to_owned();
    TrainingExample::new(crop(&g), crop(&gt_var))
}

fn example_at<T: Scalar>(
    movie: &FrameStack<T>,
    gt: &FrameStack<T>,
    k: usize,
    opts: &ExampleOptions,
    seed: u64,
) -> Result<TrainingExample<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    make_training_example(movie, gt, &mut rng, opts)
}

/// `count` examples drawn round-robin from movie pairs. Example `k` uses its
/// own random stream, so the set is deterministic for a given `seed`.
pub fn build_dataset<T: Scalar>(
    pairs: &[(FrameStack<T>, FrameStack<T>)],
    count: usize,
    opts: &ExampleOptions,
    seed: u64,
) -> Result<Vec<TrainingExample<T>>> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no movies to draw examples from".into()));
    }
    (0..count)
        .into_par_iter()
        .map(|k| {
            let (movie, gt) = &pairs[k % pairs.len()];
            example_at(movie, gt, k, opts, seed)
        })
        .collect()
}

/// Same examples as [`build_dataset`] over `movies` pairs, but each pair is
/// loaded by `load` once and dropped before the next one.
pub fn build_dataset_streamed<T: Scalar>(
    movies: usize,
    mut load: impl FnMut(usize) -> Result<(FrameStack<T>, FrameStack<T>)>,
    count: usize,
    opts: &ExampleOptions,
    seed: u64,
) -> Result<Vec<TrainingExample<T>>> {
    if movies == 0 {
        return Err(Error::InvalidArgument("no movies to draw examples from".into()));
    }
    let mut slots: Vec<Option<TrainingExample<T>>> = (0..count).map(|_| None).collect();
    for i in 0..movies.min(count) {
        let (movie, gt) = load(i)?;
        let ks: Vec<usize> = (i..count).step_by(movies).collect();
        let made: Vec<_> = ks
            .par_iter()
            .map(|&k| example_at(&movie, &gt, k, opts, seed))
            .collect::<Result<_>>()?;
        for (k, ex) in ks.into_iter().zip(made) {
            slots[k] = Some(ex);
        }
    }
    Ok(slots.into_iter().map(|e| e.expect("every slot filled")).collect())
}

/// Grid of the high-resolution ground-truth movie belonging to `grid`.
pub fn gt_grid(grid: &GridSpec) -> Result<GridSpec> {
    GridSpec::with_pitch(grid.n, 1, grid.delta_h())
}
