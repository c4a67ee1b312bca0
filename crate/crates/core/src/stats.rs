//! Movie preprocessing and the second-order statistics fed to the solvers.
//!
//! All temporal statistics use the per-pixel temporal mean and a `1 / T`
//! normalization, so the diagonal of the empirical covariance is exactly the
//! temporal variance.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::model::{GridSpec, MeasurementOperator, OperatorForm};
use crate::scalar::Scalar;

/// Largest low-resolution side for which an explicit covariance is built.
pub const COVARIANCE_MAX_LOW_RES: usize = 16;

/// A movie of `T` low-resolution frames, stored as a `(T, M, M)` array.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStack<T> {
    pub frames: Array3<T>,
    pub grid: GridSpec,
    pub metadata: BTreeMap<String, String>,
}

impl<T: Scalar> FrameStack<T> {
    pub fn new(frames: Array3<T>, grid: GridSpec) -> Result<Self> {
        let (_, r, c) = frames.dim();
        if r != grid.m || c != grid.m {
            return Err(shape_err(
                format!("frames of {0}x{0}", grid.m),
                format!("{r}x{c}"),
            ));
        }
        Ok(Self {
            frames,
            grid,
            metadata: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn map_frames(&self, frames: Array3<T>) -> Self {
        Self {
            frames,
            grid: self.grid,
            metadata: self.metadata.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Raw,
    Resized,
}

/// Temporal variance image, on the low-resolution grid (`g_Y`) or resized to
/// the high-resolution grid (`G`).
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceImage<T> {
    pub values: Array2<T>,
    pub provenance: Provenance,
}

/// Symmetric `M^2 x M^2` covariance of the vectorized frames.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceMatrix<T> {
    pub values: Array2<T>,
}

/// Global rescale so the brightest pixel of the whole movie is 1.
pub fn normalize_stack<T: Scalar>(stack: &FrameStack<T>) -> Result<FrameStack<T>> {
    if stack.is_empty() {
        return Err(Error::TooFewFrames { needed: 1, got: 0 });
    }
    let max = stack.frames.iter().cloned().fold(T::neg_infinity(), T::max);
    if !(max > T::zero()) {
        return Err(Error::ZeroMovie);
    }
    Ok(stack.map_frames(stack.frames.mapv(|v| v / max)))
}

fn median_in_place<T: Scalar>(buf: &mut [T]) -> T {
    buf.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = buf.len();
    if n % 2 == 1 {
        buf[n / 2]
    } else {
        (buf[n / 2 - 1] + buf[n / 2]) / T::lit(2.0)
    }
}

/// Subtracts the per-pixel temporal median from every frame.
pub fn remove_temporal_median<T: Scalar>(stack: &FrameStack<T>) -> Result<FrameStack<T>> {
    if stack.is_empty() {
        return Err(Error::TooFewFrames { needed: 1, got: 0 });
    }
    let mut frames = stack.frames.clone();
    let mut buf = Vec::with_capacity(stack.len());
    for mut lane in frames.lanes_mut(Axis(0)) {
        buf.clear();
        buf.extend(lane.iter().cloned());
        let med = median_in_place(&mut buf);
        lane.mapv_inplace(|v| v - med);
    }
    Ok(stack.map_frames(frames))
}

/// Normalization followed by median removal, rescaled so the result again
/// peaks at 1. Returns the stack and the total divisor applied to the input.
pub fn preprocess_scaled<T: Scalar>(stack: &FrameStack<T>) -> Result<(FrameStack<T>, T)> {
    let normalized = normalize_stack(stack)?;
    let first = stack.frames.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut out = remove_temporal_median(&normalized)?;
    let peak = out.frames.iter().cloned().fold(T::neg_infinity(), T::max);
    if peak > T::zero() {
        out.frames.mapv_inplace(|v| v / peak);
        Ok((out, first * peak))
    } else {
        Ok((out, first))
    }
}

/// Normalization followed by median removal; see [`preprocess_scaled`].
pub fn preprocess<T: Scalar>(stack: &FrameStack<T>) -> Result<FrameStack<T>> {
    Ok(preprocess_scaled(stack)?.0)
}

/// Per-pixel temporal mean.
pub fn temporal_mean<T: Scalar>(frames: &Array3<T>) -> Array2<T> {
    let t = T::from_usize(frames.len_of(Axis(0))).unwrap();
    let mut sum = Array2::zeros((frames.shape()[1], frames.shape()[2]));
    for f in frames.outer_iter() {
        sum += &f;
    }
    sum / t
}

/// Per-pixel variance of a `(T, r, c)` array with `1 / T` normalization.
pub fn variance_of_frames<T: Scalar>(frames: &Array3<T>) -> Result<Array2<T>> {
    let t = frames.len_of(Axis(0));
    if t < 2 {
        return Err(Error::TooFewFrames { needed: 2, got: t });
    }
    let mean = temporal_mean(frames);
    let mut acc = Array2::<T>::zeros(mean.dim());
    for f in frames.outer_iter() {
        ndarray::Zip::from(&mut acc)
            .and(&f)
            .and(&mean)
            .for_each(|a, &v, &mu| {
                let d = v - mu;
                *a += d * d;
            });
    }
    let tt = T::from_usize(t).unwrap();
    Ok(acc.mapv(|v| (v / tt).max(T::zero())))
}

/// Temporal variance `g_Y` of the movie on its own grid.
pub fn temporal_variance<T: Scalar>(stack: &FrameStack<T>) -> Result<VarianceImage<T>> {
    Ok(VarianceImage {
        values: variance_of_frames(&stack.frames)?,
        provenance: Provenance::Raw,
    })
}

/// Bilinear upsampling by `p`, registered with the measurement grid: output
/// pixel `i` reads input coordinate `(i - p / 2) / p`, clamped to the image.
pub fn resize_to_high_res<T: Scalar>(img: ArrayView2<T>, p: usize) -> Array2<T> {
    let (r, c) = img.dim();
    let phase = (p / 2) as f64;
    let coord = |i: usize, len: usize| -> (usize, usize, T) {
        let u = ((i as f64 - phase) / p as f64).clamp(0.0, (len - 1) as f64);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, T::lit(u - i0 as f64))
    };
    let rows: Vec<_> = (0..r * p).map(|i| coord(i, r)).collect();
    let cols: Vec<_> = (0..c * p).map(|j| coord(j, c)).collect();
    Array2::from_shape_fn((r * p, c * p), |(i, j)| {
        let (a0, a1, fa) = rows[i];
        let (b0, b1, fb) = cols[j];
        let one = T::one();
        let top = img[[a0, b0]] * (one - fb) + img[[a0, b1]] * fb;
        let bottom = img[[a1, b0]] * (one - fb) + img[[a1, b1]] * fb;
        top * (one - fa) + bottom * fa
    })
}

/// High-resolution network input `G`.
pub fn resize_variance<T: Scalar>(g: &VarianceImage<T>, p: usize) -> VarianceImage<T> {
    VarianceImage {
        values: resize_to_high_res(g.values.view(), p),
        provenance: Provenance::Resized,
    }
}

fn centered_columns<T: Scalar>(stack: &FrameStack<T>) -> Array2<T> {
    let m2 = stack.grid.m * stack.grid.m;
    let mean = temporal_mean(&stack.frames);
    let mut y = Array2::<T>::zeros((m2, stack.len()));
    for (t, f) in stack.frames.outer_iter().enumerate() {
        for (idx, (v, mu)) in f.iter().zip(mean.iter()).enumerate() {
            y[[idx, t]] = *v - *mu;
        }
    }
    y
}

/// `R_y = (1 / T) Y Y^T` with mean-removed columns.
pub fn empirical_covariance<T: Scalar>(stack: &FrameStack<T>) -> Result<CovarianceMatrix<T>> {
    if stack.len() < 2 {
        return Err(Error::TooFewFrames {
            needed: 2,
            got: stack.len(),
        });
    }
    if stack.grid.m > COVARIANCE_MAX_LOW_RES {
        let m2 = stack.grid.m * stack.grid.m;
        return Err(Error::SizeCap {
            what: "covariance",
            size: m2 * m2,
            cap: COVARIANCE_MAX_LOW_RES.pow(4),
        });
    }
    let y = centered_columns(stack);
    let t = T::from_usize(stack.len()).unwrap();
    Ok(CovarianceMatrix {
        values: y.dot(&y.t()) / t,
    })
}

fn explicit_matrix<T>(op: &MeasurementOperator<T>) -> Result<&Array2<T>> {
    match &op.form {
        OperatorForm::Explicit(a) => Ok(a),
        _ => Err(Error::InvalidArgument(
            "operation requires an explicit measurement matrix".into(),
        )),
    }
}

/// `v_l = a_l^T R_y a_l` for every high-resolution location.
pub fn compute_v_cov<T: Scalar>(
    a: &MeasurementOperator<T>,
    r_y: &CovarianceMatrix<T>,
) -> Result<Array2<T>> {
    let mat = explicit_matrix(a)?;
    let (m2, n2) = mat.dim();
    if r_y.values.dim() != (m2, m2) {
        return Err(shape_err(format!("{m2}x{m2}"), format!("{:?}", r_y.values.dim())));
    }
    let ra = r_y.values.dot(mat);
    let v: Array1<T> = (0..n2)
        .map(|l| mat.column(l).dot(&ra.column(l)))
        .collect();
    let n = a.grid.n;
    Ok(v.into_shape_with_order((n, n)).expect("square grid"))
}

/// Matrix-free `v_l = a_l^T R_y a_l = (1 / T) sum_t (A^T y_t)_l^2`.
pub fn compute_v_cov_from_stack<T: Scalar>(
    a: &MeasurementOperator<T>,
    stack: &FrameStack<T>,
) -> Result<Array2<T>> {
    if stack.len() < 2 {
        return Err(Error::TooFewFrames {
            needed: 2,
            got: stack.len(),
        });
    }
    let mean = temporal_mean(&stack.frames);
    let n = a.grid.n;
    let mut v = Array2::<T>::zeros((n, n));
    for f in stack.frames.outer_iter() {
        let centered = &f - &mean;
        let back = a.apply_adjoint(centered.view())?;
        v.zip_mut_with(&back, |acc, b| *acc += *b * *b);
    }
    let t = T::from_usize(stack.len()).unwrap();
    Ok(v / t)
}

/// `v = A~^T g_Y`, with `a_sq` the squared operator.
pub fn compute_v_var<T: Scalar>(
    a_sq: &MeasurementOperator<T>,
    g_y: &VarianceImage<T>,
) -> Result<Array2<T>> {
    if !a_sq.squared {
        return Err(Error::InvalidArgument(
            "variance formulation needs the squared operator".into(),
        ));
    }
    a_sq.apply_adjoint(g_y.values.view())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Formulation {
    /// Fit the covariance matrix: `M = |A^T A|^2`.
    Covariance,
    /// Fit the variance image: `M = A~^T A~`.
    Variance,
}

/// Explicit `N^2 x N^2` Gram matrix of either formulation. `a` is the plain
/// (unsquared) explicit operator.
pub fn compute_m_matrix<T: Scalar>(
    a: &MeasurementOperator<T>,
    formulation: Formulation,
) -> Result<Array2<T>> {
    let mat = explicit_matrix(a)?;
    if a.squared {
        return Err(Error::InvalidArgument(
            "pass the unsquared operator; squaring is applied per formulation".into(),
        ));
    }
    Ok(match formulation {
        Formulation::Covariance => mat.t().dot(mat).mapv(|v| v * v),
        Formulation::Variance => {
            let sq = mat.mapv(|v| v * v);
            sq.t().dot(&sq)
        }
    })
}

/// Convolution kernel equivalent to the variance-formulation Gram matrix for
/// pixels registered with the low-resolution grid: `w(e) = sum_d k^2(dP) k^2(dP - e)`.
pub fn variance_gram_kernel<T: Scalar>(a_sq: &MeasurementOperator<T>) -> Array2<T> {
    let k = &a_sq.kernel;
    let hk = (k.nrows() / 2) as isize;
    let p = a_sq.grid.p as isize;
    let dmax = hk / p;
    let side = 2 * hk as usize + 1;
    let at = |i: isize, j: isize| -> T {
        if i.abs() > hk || j.abs() > hk {
            T::zero()
        } else {
            k[[(i + hk) as usize, (j + hk) as usize]]
        }
    };
    Array2::from_shape_fn((side, side), |(i, j)| {
        let (ei, ej) = (i as isize - hk, j as isize - hk);
        let mut acc = T::zero();
        for di in -dmax..=dmax {
            for dj in -dmax..=dmax {
                acc += at(di * p, dj * p) * at(di * p - ei, dj * p - ej);
            }
        }
        acc
    })
}

/// The operator `M` of the quadratic data term, in whichever form is cheapest.
#[derive(Clone, Debug)]
pub enum GramOperator<T> {
    /// Dense `N^2 x N^2` matrix on an `N x N` image.
    Explicit { matrix: Array2<T>, side: usize },
    /// `A~^T (A~ x)` through the squared measurement operator.
    Variance(MeasurementOperator<T>),
    /// `(M x)_l = a_l^T (A diag(x) A^T) a_l` through sparse columns of `A`.
    Covariance(CovarianceGram<T>),
}

#[derive(Clone, Debug)]
pub struct CovarianceGram<T> {
    side: usize,
    m2: usize,
    columns: Vec<Vec<(usize, T)>>,
}

impl<T: Scalar> CovarianceGram<T> {
    pub fn new(a: &MeasurementOperator<T>) -> Self {
        let n = a.grid.n;
        let columns = (0..n * n).map(|l| a.column_support(l / n, l % n)).collect();
        Self {
            side: n,
            m2: a.grid.m * a.grid.m,
            columns,
        }
    }

    fn apply(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut r = Array2::<T>::zeros((self.m2, self.m2));
        for (col, xv) in self.columns.iter().zip(x.iter()) {
            if *xv == T::zero() {
                continue;
            }
            for &(i, ai) in col {
                let s = ai * *xv;
                for &(j, aj) in col {
                    r[[i, j]] += s * aj;
                }
            }
        }
        let out: Vec<T> = self
            .columns
            .iter()
            .map(|col| {
                let mut acc = T::zero();
                for &(i, ai) in col {
                    for &(j, aj) in col {
                        acc += ai * r[[i, j]] * aj;
                    }
                }
                acc
            })
            .collect();
        Array2::from_shape_vec((self.side, self.side), out).expect("square")
    }
}

impl<T: Scalar> GramOperator<T> {
    pub fn for_formulation(a: &MeasurementOperator<T>, formulation: Formulation) -> Self {
        match formulation {
            Formulation::Variance => {
                let sq = if a.squared { a.clone() } else { a.squared() };
                GramOperator::Variance(sq)
            }
            Formulation::Covariance => GramOperator::Covariance(CovarianceGram::new(a)),
        }
    }

    pub fn side(&self) -> usize {
        match self {
            GramOperator::Explicit { side, .. } => *side,
            GramOperator::Variance(op) => op.grid.n,
            GramOperator::Covariance(c) => c.side,
        }
    }

    pub fn apply(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        let n = self.side();
        if x.dim() != (n, n) {
            return Err(shape_err(format!("{n}x{n}"), format!("{:?}", x.dim())));
        }
        match self {
            GramOperator::Explicit { matrix, side } => {
                let xv: Array1<T> = x.iter().cloned().collect();
                Ok(matrix
                    .dot(&xv)
                    .into_shape_with_order((*side, *side))
                    .expect("square"))
            }
            GramOperator::Variance(op) => op.apply_adjoint(op.apply_forward(x)?.view()),
            GramOperator::Covariance(c) => Ok(c.apply(x)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub iterations: usize,
    /// False when the operator annihilated the start vector.
    pub nonzero: bool,
}

/// Largest eigenvalue of a symmetric PSD operator by power iteration, stopped
/// when the Rayleigh quotient changes by less than `1e-9` relative.
pub fn lipschitz_constant<T: Scalar>(
    side: usize,
    apply: impl Fn(ArrayView2<T>) -> Result<Array2<T>>,
) -> Result<LipschitzEstimate> {
    const MAX_ITERS: usize = 10_000;
    const REL_TOL: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut x = Array2::from_shape_fn((side, side), |_| T::lit(rng.random_range(0.5..1.5)));
    let norm = |a: &Array2<T>| a.iter().map(|v| (*v * *v).to_f64_lossy()).sum::<f64>().sqrt();
    let n0 = norm(&x);
    x.mapv_inplace(|v| v / T::lit(n0));
    let mut last = 0.0;
    for it in 1..=MAX_ITERS {
        let y = apply(x.view())?;
        let rq = (&x * &y).iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        let ny = norm(&y);
        if !ny.is_finite() {
            return Err(Error::NonFinite("power iteration".into()));
        }
        if ny == 0.0 {
            log::warn!("operator maps the start vector to zero; Lipschitz constant is 0");
            return Ok(LipschitzEstimate {
                value: 0.0,
                iterations: it,
                nonzero: false,
            });
        }
        if it > 1 && (rq - last).abs() <= REL_TOL * rq.abs() {
            return Ok(LipschitzEstimate {
                value: rq,
                iterations: it,
                nonzero: true,
            });
        }
        last = rq;
        x = y.mapv(|v| v / T::lit(ny));
    }
    Ok(LipschitzEstimate {
        value: last,
        iterations: MAX_ITERS,
        nonzero: true,
    })
}
