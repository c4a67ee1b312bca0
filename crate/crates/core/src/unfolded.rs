//! The unrolled network: ten folds of a learned proximal-gradient update.
//!
//! ```text
//! C       = G * W_i
//! X(0)    = S+_0(C)
//! X(k+1)  = S+_{k+1}(C - X(k) * W_p(k) + X(k)),   k = 0..9
//! output  = s * X(10)
//! ```
//!
//! `S+` is a sigmoid-gated ReLU whose cutoff and slope are set per patch from
//! the 1st and 99th percentiles of its input, scaled by the learned relative
//! parameters `alpha0` and `beta0`. All convolutions are single-channel,
//! stride 1, zero padded and size preserving.

use ndarray::{Array2, ArrayView2};

use crate::conv::{conv2d_same, FourierConv, Spectrum};
use crate::error::{shape_err, Error, Result};
use crate::model::{EmitterMap, FOLD_KERNEL_SIDE, INPUT_KERNEL_SIDE};
use crate::scalar::Scalar;

/// Number of unrolled iterations.
pub const FOLDS: usize = 10;
/// Activation parameter sets, one per fold plus the initial layer.
pub const ACTIVATIONS: usize = FOLDS + 1;

/// Floor on the cutoff used when dividing for the slope.
pub const ALPHA_FLOOR: f64 = 1e-12;

pub const INIT_ALPHA0: f64 = 0.95;
pub const INIT_BETA0: f64 = 8.0;
pub const INIT_SCALE: f64 = 0.01;
/// Width (high-resolution pixels) of the Gaussian used to initialize kernels.
pub const INIT_SIGMA: f64 = 1.0;

fn check_odd(side: usize) -> Result<()> {
    if side % 2 == 0 {
        Err(Error::InvalidArgument(format!(
            "kernel side must be odd, got {side}"
        )))
    } else {
        Ok(())
    }
}

/// Equal-distance orbits of an odd square kernel.
#[derive(Clone, Debug)]
pub struct RadialOrbits {
    side: usize,
    /// Orbit index of every element, row-major.
    orbit_of: Vec<usize>,
    sizes: Vec<usize>,
}

impl RadialOrbits {
    pub fn new(side: usize) -> Result<Self> {
        check_odd(side)?;
        let h = (side / 2) as isize;
        let mut dists: Vec<isize> = (0..=h)
            .flat_map(|i| (0..=h).map(move |j| i * i + j * j))
            .collect();
        dists.sort_unstable();
        dists.dedup();
        let mut orbit_of = Vec::with_capacity(side * side);
        let mut sizes = vec![0; dists.len()];
        for i in 0..side as isize {
            for j in 0..side as isize {
                let d = (i - h).pow(2) + (j - h).pow(2);
                let o = dists.binary_search(&d).expect("distance enumerated");
                orbit_of.push(o);
                sizes[o] += 1;
            }
        }
        Ok(Self {
            side,
            orbit_of,
            sizes,
        })
    }

    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn orbit_of(&self, i: usize, j: usize) -> usize {
        self.orbit_of[i * self.side + j]
    }

    pub fn size(&self, orbit: usize) -> usize {
        self.sizes[orbit]
    }

    /// Replaces every orbit by its mean. Orbits that are already constant are
    /// left untouched, so projection is exactly idempotent.
    pub fn project<T: Scalar>(&self, kernel: &mut Array2<T>) {
        let mut sum = vec![T::zero(); self.count()];
        let mut first: Vec<Option<T>> = vec![None; self.count()];
        let mut constant = vec![true; self.count()];
        for (v, &o) in kernel.iter().zip(&self.orbit_of) {
            sum[o] += *v;
            match first[o] {
                None => first[o] = Some(*v),
                Some(f) if f != *v => constant[o] = false,
                _ => {}
            }
        }
        for (v, &o) in kernel.iter_mut().zip(&self.orbit_of) {
            if !constant[o] {
                *v = sum[o] / T::from_usize(self.sizes[o]).unwrap();
            }
        }
    }

    /// Per-orbit sums, the gradient with respect to tied orbit parameters.
    pub fn orbit_sums<T: Scalar>(&self, kernel: &Array2<T>) -> Vec<T> {
        let mut sum = vec![T::zero(); self.count()];
        for (v, &o) in kernel.iter().zip(&self.orbit_of) {
            sum[o] += *v;
        }
        sum
    }

    pub fn is_radial<T: Scalar>(&self, kernel: &Array2<T>) -> bool {
        let mut first: Vec<Option<T>> = vec![None; self.count()];
        for (v, &o) in kernel.iter().zip(&self.orbit_of) {
            match first[o] {
                None => first[o] = Some(*v),
                Some(f) if f != *v => return false,
                _ => {}
            }
        }
        true
    }
}

/// Number of distinct squared distances `i^2 + j^2` within an odd kernel.
pub fn count_radial_orbits(side: usize) -> Result<usize> {
    Ok(RadialOrbits::new(side)?.count())
}

pub fn radial_project<T: Scalar>(kernel: ArrayView2<T>) -> Result<Array2<T>> {
    let (r, c) = kernel.dim();
    if r != c {
        return Err(shape_err("square kernel", format!("{r}x{c}")));
    }
    let orbits = RadialOrbits::new(r)?;
    let mut out = kernel.to_owned();
    orbits.project(&mut out);
    Ok(out)
}

/// Percentile with linear interpolation between order statistics at zero-based
/// rank `p / 100 * (n - 1)`.
pub fn percentile<T: Scalar>(values: &[T], p: f64) -> Result<T> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of empty input".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("percentile {p}")));
    }
    let mut buf = values.to_vec();
    Ok(percentile_in_place(&mut buf, p))
}

fn cmp<T: Scalar>(a: &T, b: &T) -> std::cmp::Ordering {
    a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal)
}

fn percentile_in_place<T: Scalar>(buf: &mut [T], p: f64) -> T {
    let n = buf.len();
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    let (_, lo_val, rest) = buf.select_nth_unstable_by(lo, cmp);
    let lo_val = *lo_val;
    if frac == 0.0 || rest.is_empty() {
        return lo_val;
    }
    let hi_val = rest.iter().cloned().fold(T::infinity(), T::min);
    lo_val + (hi_val - lo_val) * T::lit(frac)
}

/// Elements that determine the `p`-th percentile, with their interpolation
/// weights: the percentile equals `sum w * values[i]` over the returned pairs.
/// Ties are broken by position so the choice is deterministic.
pub(crate) fn percentile_weights<T: Scalar>(values: &[T], p: f64) -> [(usize, T); 2] {
    let n = values.len();
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    let mut idx: Vec<usize> = (0..n).collect();
    let by_value = |a: &usize, b: &usize| cmp(&values[*a], &values[*b]).then(a.cmp(b));
    let (_, lo_idx, rest) = idx.select_nth_unstable_by(lo, by_value);
    let lo_idx = *lo_idx;
    if frac == 0.0 || rest.is_empty() {
        return [(lo_idx, T::one()), (lo_idx, T::zero())];
    }
    let hi_idx = *rest.iter().min_by(|a, b| by_value(a, b)).expect("nonempty");
    [(lo_idx, T::lit(1.0 - frac)), (hi_idx, T::lit(frac))]
}

/// Relative activation parameters of one layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivationParams<T> {
    pub alpha0: T,
    pub beta0: T,
}

/// Absolute cutoff and slope for one patch, with the percentiles they came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold<T> {
    pub alpha: T,
    pub beta: T,
    pub i1: T,
    pub i99: T,
}

impl<T: Scalar> Threshold<T> {
    pub fn from_percentiles(i1: T, i99: T, params: ActivationParams<T>) -> Self {
        let alpha = i1 + (i99 - i1) * params.alpha0;
        let beta = params.beta0 / alpha.max(T::lit(ALPHA_FLOOR));
        Self {
            alpha,
            beta,
            i1,
            i99,
        }
    }

    /// Whether the slope used the floored cutoff.
    pub fn floored(&self) -> bool {
        self.alpha <= T::lit(ALPHA_FLOOR)
    }
}

/// 1st and 99th percentiles of a patch.
pub fn patch_percentiles<T: Scalar>(patch: ArrayView2<T>) -> Result<(T, T)> {
    if patch.is_empty() {
        return Err(Error::InvalidArgument("empty patch".into()));
    }
    let mut buf: Vec<T> = patch.iter().cloned().collect();
    let i1 = percentile_in_place(&mut buf, 1.0);
    let i99 = percentile_in_place(&mut buf, 99.0);
    Ok((i1, i99))
}

pub fn local_threshold<T: Scalar>(
    patch: ArrayView2<T>,
    params: ActivationParams<T>,
) -> Result<Threshold<T>> {
    let (i1, i99) = patch_percentiles(patch)?;
    Ok(Threshold::from_percentiles(i1, i99, params))
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(u: T) -> T {
    if u >= T::zero() {
        T::one() / (T::one() + (-u).exp())
    } else {
        let e = u.exp();
        e / (T::one() + e)
    }
}

/// `ReLU(x) / (1 + exp(-beta (|x| - alpha)))` for one value.
#[inline]
pub fn smooth_activation_scalar<T: Scalar>(x: T, alpha: T, beta: T) -> T {
    if x <= T::zero() {
        T::zero()
    } else {
        x * sigmoid(beta * (x - alpha))
    }
}

pub fn smooth_activation<T: Scalar>(x: ArrayView2<T>, alpha: T, beta: T) -> Array2<T> {
    x.mapv(|v| smooth_activation_scalar(v, alpha, beta))
}

/// All trainable parameters of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct LsparcomWeights<T> {
    pub w_i: Array2<T>,
    pub w_p: Vec<Array2<T>>,
    pub alpha0: Vec<T>,
    pub beta0: Vec<T>,
    pub s: T,
    pub radial_constrained: bool,
}

/// Sum-normalized Gaussian kernel.
fn gaussian_filter<T: Scalar>(side: usize, sigma: f64) -> Array2<T> {
    let h = (side / 2) as f64;
    let raw = Array2::from_shape_fn((side, side), |(i, j)| {
        let (a, b) = (i as f64 - h, j as f64 - h);
        (-(a * a + b * b) / (2.0 * sigma * sigma)).exp()
    });
    let total = raw.sum();
    raw.mapv(|v| T::lit(v / total))
}

/// Default initialization: Gaussian kernels, `alpha0 = 0.95`, `beta0 = 8`,
/// `s = 0.01`, radially constrained.
pub fn init_weights<T: Scalar>() -> LsparcomWeights<T> {
    init_weights_with_sides(INPUT_KERNEL_SIDE, FOLD_KERNEL_SIDE).expect("odd default sides")
}

/// Initialization with non-default kernel sides (expert use).
pub fn init_weights_with_sides<T: Scalar>(
    input_side: usize,
    fold_side: usize,
) -> Result<LsparcomWeights<T>> {
    check_odd(input_side)?;
    check_odd(fold_side)?;
    let mut w = LsparcomWeights {
        w_i: gaussian_filter(input_side, INIT_SIGMA),
        w_p: (0..FOLDS)
            .map(|_| gaussian_filter(fold_side, INIT_SIGMA))
            .collect(),
        alpha0: vec![T::lit(INIT_ALPHA0); ACTIVATIONS],
        beta0: vec![T::lit(INIT_BETA0); ACTIVATIONS],
        s: T::lit(INIT_SCALE),
        radial_constrained: true,
    };
    w.enforce_constraints();
    Ok(w)
}

impl<T: Scalar> LsparcomWeights<T> {
    pub fn input_side(&self) -> usize {
        self.w_i.nrows()
    }

    pub fn fold_side(&self) -> usize {
        self.w_p[0].nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("malformed weights: {what}")));
        if self.w_p.len() != FOLDS {
            return bad("fold kernel count");
        }
        if self.alpha0.len() != ACTIVATIONS || self.beta0.len() != ACTIVATIONS {
            return bad("activation parameter count");
        }
        let (r, c) = self.w_i.dim();
        if r != c || r % 2 == 0 {
            return bad("input kernel shape");
        }
        let side = self.w_p[0].nrows();
        if side % 2 == 0 || self.w_p.iter().any(|k| k.dim() != (side, side)) {
            return bad("fold kernel shape");
        }
        let finite = self.w_i.iter().all(|v| v.is_finite())
            && self.w_p.iter().all(|k| k.iter().all(|v| v.is_finite()))
            && self.alpha0.iter().chain(&self.beta0).all(|v| v.is_finite())
            && self.s.is_finite();
        if !finite {
            return bad("non-finite entry");
        }
        Ok(())
    }

    /// Total number of scalar parameters, ignoring ties.
    pub fn unconstrained_parameter_count(&self) -> usize {
        self.w_i.len()
            + self.w_p.iter().map(|k| k.len()).sum::<usize>()
            + self.alpha0.len()
            + self.beta0.len()
            + 1
    }

    /// Number of free parameters when kernels are tied over radial orbits.
    pub fn radial_parameter_count(&self) -> usize {
        let orbits = |side| count_radial_orbits(side).expect("odd side");
        orbits(self.input_side())
            + self.w_p.iter().map(|k| orbits(k.nrows())).sum::<usize>()
            + self.alpha0.len()
            + self.beta0.len()
            + 1
    }

    pub fn trainable_parameter_count(&self) -> usize {
        if self.radial_constrained {
            self.radial_parameter_count()
        } else {
            self.unconstrained_parameter_count()
        }
    }

    /// Clamps `alpha0` into `[0, 1]` and, when constrained, projects kernels.
    pub fn enforce_constraints(&mut self) {
        for a in &mut self.alpha0 {
            *a = a.max(T::zero()).min(T::one());
        }
        if self.radial_constrained {
            let oi = RadialOrbits::new(self.input_side()).expect("odd");
            oi.project(&mut self.w_i);
            let op = RadialOrbits::new(self.fold_side()).expect("odd");
            for k in &mut self.w_p {
                op.project(k);
            }
        }
    }

    pub fn activation(&self, layer: usize) -> ActivationParams<T> {
        ActivationParams {
            alpha0: self.alpha0[layer],
            beta0: self.beta0[layer],
        }
    }

    pub fn cast<U: Scalar>(&self) -> LsparcomWeights<U> {
        let c = |v: &T| U::lit(v.to_f64_lossy());
        LsparcomWeights {
            w_i: self.w_i.map(c),
            w_p: self.w_p.iter().map(|k| k.map(c)).collect(),
            alpha0: self.alpha0.iter().map(c).collect(),
            beta0: self.beta0.iter().map(c).collect(),
            s: c(&self.s),
            radial_constrained: self.radial_constrained,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvBackend {
    Direct,
    Fourier,
}

/// Intermediate values of one activation layer.
#[derive(Clone, Debug)]
pub struct LayerTrace<T> {
    /// Input to the activation.
    pub pre: Array2<T>,
    /// Activation output `X(k)`.
    pub out: Array2<T>,
    pub threshold: Threshold<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Scalar> {
    /// `G * W_i`
    pub input_conv: Array2<T>,
    pub layers: Vec<LayerTrace<T>>,
    pub output: Array2<T>,
    /// Spectra of `G` and `X(0..=9)` when the Fourier backend ran.
    pub(crate) spectra: Vec<Spectrum<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn percentiles(&self) -> Vec<(T, T)> {
        self.layers
            .iter()
            .map(|l| (l.threshold.i1, l.threshold.i99))
            .collect()
    }
}

/// Weights bound to an image size, with kernel spectra precomputed.
pub struct PreparedNetwork<'w, T: Scalar> {
    pub weights: &'w LsparcomWeights<T>,
    pub side: usize,
    pub(crate) fourier: Option<FourierKernels<T>>,
}

pub(crate) struct FourierKernels<T: Scalar> {
    pub(crate) engine: FourierConv<T>,
    pub(crate) w_i: Spectrum<T>,
    pub(crate) w_p: Vec<Spectrum<T>>,
    pub(crate) w_p_flipped: Vec<Spectrum<T>>,
}

impl<'w, T: Scalar> PreparedNetwork<'w, T> {
    pub fn new(weights: &'w LsparcomWeights<T>, side: usize, backend: ConvBackend) -> Result<Self> {
        weights.validate()?;
        if side == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        let fourier = match backend {
            ConvBackend::Direct => None,
            ConvBackend::Fourier => {
                let ks = weights.input_side().max(weights.fold_side());
                let engine = FourierConv::new(side, ks);
                Some(FourierKernels {
                    w_i: engine.spectrum(weights.w_i.view()),
                    w_p: weights.w_p.iter().map(|k| engine.spectrum(k.view())).collect(),
                    w_p_flipped: weights
                        .w_p
                        .iter()
                        .map(|k| engine.flipped_spectrum(k.view()))
                        .collect(),
                    engine,
                })
            }
        };
        Ok(Self {
            weights,
            side,
            fourier,
        })
    }

    /// Full forward pass. With `frozen`, the 1st/99th percentiles of every
    /// layer are taken from the given list instead of the data.
    pub fn trace(&self, g: ArrayView2<T>, frozen: Option<&[(T, T)]>) -> Result<ForwardTrace<T>> {
        let n = self.side;
        if g.dim() != (n, n) {
            return Err(shape_err(format!("{n}x{n}"), format!("{:?}", g.dim())));
        }
        if let Some(f) = frozen {
            if f.len() != ACTIVATIONS {
                return Err(shape_err(format!("{ACTIVATIONS} percentile pairs"), f.len().to_string()));
            }
        }
        let w = self.weights;
        let mut spectra = Vec::new();
        let input_conv = match &self.fourier {
            Some(fk) => {
                let gs = fk.engine.spectrum(g);
                let c = fk.engine.conv_same_from(&gs, &fk.w_i, n, w.input_side());
                spectra.push(gs);
                c
            }
            None => conv2d_same(g, w.w_i.view()),
        };
        let activate = |pre: Array2<T>, layer: usize| -> Result<LayerTrace<T>> {
            let (i1, i99) = match frozen {
                Some(f) => f[layer],
                None => patch_percentiles(pre.view())?,
            };
            let threshold = Threshold::from_percentiles(i1, i99, w.activation(layer));
            let out = smooth_activation(pre.view(), threshold.alpha, threshold.beta);
            Ok(LayerTrace {
                pre,
                out,
                threshold,
            })
        };
        let mut layers = Vec::with_capacity(ACTIVATIONS);
        layers.push(activate(input_conv.clone(), 0)?);
        for k in 0..FOLDS {
            let x = &layers[k].out;
            let xw = match &self.fourier {
                Some(fk) => {
                    let xs = fk.engine.spectrum(x.view());
                    let r = fk.engine.conv_same_from(&xs, &fk.w_p[k], n, w.fold_side());
                    spectra.push(xs);
                    r
                }
                None => conv2d_same(x.view(), w.w_p[k].view()),
            };
            let pre = &input_conv - &xw + x;
            layers.push(activate(pre, k + 1)?);
        }
        let output = layers[FOLDS].out.mapv(|v| v * w.s);
        Ok(ForwardTrace {
            input_conv,
            layers,
            output,
            spectra,
        })
    }
}

/// Network output `s * X(10)` for a high-resolution variance image.
pub fn forward_values<T: Scalar>(g: ArrayView2<T>, weights: &LsparcomWeights<T>) -> Result<Array2<T>> {
    let (r, c) = g.dim();
    if r != c {
        return Err(shape_err("square input", format!("{r}x{c}")));
    }
    let net = PreparedNetwork::new(weights, r, ConvBackend::Fourier)?;
    Ok(net.trace(g, None)?.output)
}

pub fn forward<T: Scalar>(g: ArrayView2<T>, weights: &LsparcomWeights<T>) -> Result<EmitterMap<T>> {
    if g.iter().any(|v| !(*v >= T::zero())) {
        return Err(Error::InvalidArgument("network input must be nonnegative".into()));
    }
    EmitterMap::new(forward_values(g, weights)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orbit_counts() {
        assert_eq!(count_radial_orbits(1).unwrap(), 1);
        assert_eq!(count_radial_orbits(3).unwrap(), 3);
        assert_eq!(count_radial_orbits(29).unwrap(), 106);
        assert!(count_radial_orbits(4).is_err());
        // brute force over distinct i^2 + j^2
        let mut d = std::collections::BTreeSet::new();
        for i in 0..=12 {
            for j in 0..=12 {
                d.insert(i * i + j * j);
            }
        }
        assert_eq!(count_radial_orbits(25).unwrap(), d.len());
        assert_eq!(d.len(), 83);
        assert_eq!(83 + 10 * 106 + 22 + 1, 1166);
    }

    #[test]
    fn corner_orbit_average() {
        let k = array![[1.0, 0.0, 2.0], [0.0, 5.0, 0.0], [3.0, 0.0, 4.0]];
        let p = radial_project(k.view()).unwrap();
        for (i, j) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(p[[i, j]], 2.5);
        }
        assert_eq!(p[[1, 1]], 5.0);
        assert!(radial_project(Array2::<f64>::zeros((4, 4)).view()).is_err());
    }

    #[test]
    fn projected_random_kernel_has_few_distinct_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = Array2::from_shape_fn((29, 29), |_| rng.random::<f64>());
        let p = radial_project(k.view()).unwrap();
        let mut vals: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
        vals.sort_unstable();
        vals.dedup();
        assert!(vals.len() <= 106);
    }

    proptest! {
        #[test]
        fn projection_idempotent_and_sum_preserving(
            side in prop::sample::select(vec![1usize, 3, 5, 7, 9]),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = Array2::from_shape_fn((side, side), |_| rng.random_range(-1.0f64..1.0));
            let once = radial_project(k.view()).unwrap();
            let twice = radial_project(once.view()).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!((once.sum() - k.sum()).abs() < 1e-12);
        }

        #[test]
        fn activation_bounded_by_relu(x in -10.0f64..10.0, alpha in 0.0f64..5.0, beta in 0.0f64..50.0) {
            let y = smooth_activation_scalar(x, alpha, beta);
            prop_assert!(y >= 0.0);
            prop_assert!(y <= x.max(0.0));
        }

        #[test]
        fn activation_monotone(x in 0.0f64..10.0, dx in 0.0f64..1.0, alpha in 0.0f64..5.0, beta in 0.0f64..50.0) {
            let a = smooth_activation_scalar(x, alpha, beta);
            let b = smooth_activation_scalar(x + dx, alpha, beta);
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn percentile_cases() {
        let v: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 99.0).unwrap(), 99.0);
        assert_eq!(percentile(&[3.5; 7], 37.0).unwrap(), 3.5);
        assert!(percentile::<f64>(&[], 50.0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [1usize, 2, 10, 101, 1000] {
            let v: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let mut sorted = v.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = if n % 2 == 1 {
                sorted[n / 2]
            } else {
                0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
            };
            assert!((percentile(&v, 50.0).unwrap() - med).abs() < 1e-15);
            for p in [1.0, 50.0, 99.0] {
                let w = percentile_weights(&v, p);
                let rebuilt = w[0].1 * v[w[0].0] + w[1].1 * v[w[1].0];
                assert!((rebuilt - percentile(&v, p).unwrap()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn threshold_formulas() {
        let patch = Array2::from_shape_fn((1, 101), |(_, j)| j as f64 * 0.1);
        let params = |a0, b0| ActivationParams { alpha0: a0, beta0: b0 };
        let t = local_threshold(patch.view(), params(0.5, 1.0)).unwrap();
        assert!((t.alpha - 0.5 * (t.i1 + t.i99)).abs() < 1e-15);
        let t0 = local_threshold(patch.view(), params(0.0, 1.0)).unwrap();
        assert_eq!(t0.alpha, t0.i1);
        let t1 = local_threshold(patch.view(), params(1.0, 1.0)).unwrap();
        assert_eq!(t1.alpha, t1.i99);

        // linspace(0, 10, 101): i1 = 0.1, i99 = 9.9 from sorted ranks 1 and 99
        let t = local_threshold(patch.view(), params(0.95, 8.0)).unwrap();
        let (i1, i99) = (0.1, 9.9);
        let alpha = i1 + (i99 - i1) * 0.95;
        assert!((t.i1 - i1).abs() < 1e-12 && (t.i99 - i99).abs() < 1e-12);
        assert!((t.alpha - alpha).abs() < 1e-12);
        assert!((t.beta - 8.0 / alpha).abs() < 1e-12);
    }

    #[test]
    fn threshold_scale_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let patch = Array2::from_shape_fn((16, 16), |_| rng.random::<f64>());
        let p = ActivationParams { alpha0: 0.7, beta0: 5.0 };
        let t = local_threshold(patch.view(), p).unwrap();
        for c in [0.25, 2.0, 8.0] {
            let tc = local_threshold(patch.mapv(|v| v * c).view(), p).unwrap();
            assert_eq!(tc.alpha, c * t.alpha);
            assert_eq!(tc.beta, t.beta / c);
        }
    }

    #[test]
    fn flat_patch_uses_floor() {
        let patch = Array2::<f64>::zeros((4, 4));
        let t = local_threshold(patch.view(), ActivationParams { alpha0: 0.5, beta0: 8.0 }).unwrap();
        assert!(t.floored());
        assert_eq!(t.alpha, 0.0);
        assert_eq!(t.beta, 8.0 / ALPHA_FLOOR);
    }

    #[test]
    fn activation_special_points() {
        assert_eq!(smooth_activation_scalar(-3.0, 1.0, 4.0), 0.0);
        assert_eq!(smooth_activation_scalar(0.0, 1.0, 4.0), 0.0);
        assert!((smooth_activation_scalar(2.0, 2.0, 7.0) - 1.0f64).abs() < 1e-15);
        // saturated exponentials stay finite
        assert_eq!(smooth_activation_scalar(1.0, 5.0, 1e6), 0.0);
        assert_eq!(smooth_activation_scalar(9.0, 5.0, 1e6), 9.0);
    }

    #[test]
    fn activation_approaches_hard_threshold() {
        let alpha = 5.0;
        for &beta in &[1.0, 8.0, 100.0] {
            for i in 0..=1000 {
                let x = i as f64 * 0.01;
                let y = smooth_activation_scalar(x, alpha, beta);
                let hard = if x > alpha { x } else { 0.0 };
                assert!(y <= x + 1e-15);
                if beta == 100.0 && (x - alpha).abs() > 0.1 {
                    assert!((y - hard).abs() < 0.05, "x {x}: {y}");
                }
            }
        }
    }

    #[test]
    fn init_is_as_documented() {
        let w = init_weights::<f64>();
        assert_eq!(w.alpha0, vec![0.95; 11]);
        assert_eq!(w.beta0, vec![8.0; 11]);
        assert_eq!(w.s, 0.01);
        assert_eq!(w.w_i.dim(), (25, 25));
        assert!(w.w_p.iter().all(|k| k.dim() == (29, 29)));
        assert_eq!(w.unconstrained_parameter_count(), 9058);
        assert_eq!(w.radial_parameter_count(), 1166);
        assert_eq!(w.trainable_parameter_count(), 1166);
        assert_eq!(radial_project(w.w_i.view()).unwrap(), w.w_i);
        for k in &w.w_p {
            assert_eq!(&radial_project(k.view()).unwrap(), k);
            assert!((k.sum() - 1.0).abs() < 1e-12);
        }
        assert!(init_weights_with_sides::<f64>(24, 29).is_err());
    }

    fn random_input(seed: u64, n: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, n), |_| rng.random::<f64>().powi(4))
    }

    #[test]
    fn zero_input_and_zero_scale() {
        let w = init_weights::<f64>();
        let out = forward(Array2::zeros((16, 16)).view(), &w).unwrap();
        assert!(out.values.iter().all(|v| *v == 0.0));
        let mut w0 = w.clone();
        w0.s = 0.0;
        let out = forward(random_input(1, 16).view(), &w0).unwrap();
        assert!(out.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fourier_and_direct_agree() {
        let mut w = init_weights::<f64>();
        w.radial_constrained = false;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        w.w_p[3].mapv_inplace(|v| v + 0.01 * rng.random::<f64>());
        let g = random_input(2, 20);
        let a = PreparedNetwork::new(&w, 20, ConvBackend::Direct).unwrap().trace(g.view(), None).unwrap();
        let b = PreparedNetwork::new(&w, 20, ConvBackend::Fourier).unwrap().trace(g.view(), None).unwrap();
        let err = (&a.output - &b.output).mapv(f64::abs).fold(0.0f64, |x, y| x.max(*y));
        assert!(err < 1e-12, "{err}");
        assert!(a.output.iter().all(|v| *v >= 0.0));
        assert_eq!(a.layers.len(), ACTIVATIONS);
    }

    #[test]
    fn frozen_percentiles_reproduce_free_pass() {
        let w = init_weights::<f64>();
        let g = random_input(3, 16);
        let net = PreparedNetwork::new(&w, 16, ConvBackend::Direct).unwrap();
        let free = net.trace(g.view(), None).unwrap();
        let frozen = net.trace(g.view(), Some(&free.percentiles())).unwrap();
        assert_eq!(free.output, frozen.output);
        assert!(net.trace(g.view(), Some(&free.percentiles()[..3])).is_err());
    }

    #[test]
    fn malformed_weights_rejected() {
        let mut w = init_weights::<f64>();
        w.w_p.pop();
        assert!(forward(Array2::zeros((8, 8)).view(), &w).is_err());
        let w = init_weights::<f64>();
        assert!(forward(Array2::zeros((8, 9)).view(), &w).is_err());
        let g = -random_input(1, 8);
        assert!(forward(g.view(), &w).is_err());
    }
}
