//! Imaging geometry, point spread functions and the measurement operator.
//!
//! A high-resolution image `x` (N x N) is observed on a low-resolution grid
//! (M x M, `N = M * P`). Low-resolution pixel `m` samples the scene at
//! high-resolution coordinate `m * P + c`, where `c = P / 2` is the grid
//! phase. Column `l` of the measurement matrix is therefore the PSF centered at
//! high-resolution pixel `l`, sampled at those positions:
//!
//! ```text
//! A[m, l] = k_H(m * P + c - l)
//! ```
//!
//! which is a strided convolution of `x` with the high-resolution kernel `k_H`.

use ndarray::{s, Array2, ArrayView2};

use crate::conv::{correlate2d_same, FourierConv};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Largest low-resolution side for which explicit matrices are built.
pub const EXPLICIT_MAX_LOW_RES: usize = 16;

/// Side of the theoretical input kernel.
pub const INPUT_KERNEL_SIDE: usize = 25;
/// Side of the theoretical fold kernel.
pub const FOLD_KERNEL_SIDE: usize = 29;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    /// Low-resolution side length.
    pub m: usize,
    /// High-resolution side length.
    pub n: usize,
    /// Integer upsampling factor.
    pub p: usize,
    /// Low-resolution pixel pitch (informational).
    pub delta_l: f64,
}

impl GridSpec {
    pub fn new(m: usize, p: usize) -> Result<Self> {
        Self::with_pitch(m, p, 1.0)
    }

    pub fn with_pitch(m: usize, p: usize, delta_l: f64) -> Result<Self> {
        if m == 0 || p == 0 {
            return Err(Error::InvalidGrid(format!("m = {m}, p = {p}")));
        }
        if !(delta_l > 0.0) {
            return Err(Error::InvalidGrid(format!("pitch {delta_l}")));
        }
        Ok(Self {
            m,
            n: m * p,
            p,
            delta_l,
        })
    }

    pub fn delta_h(&self) -> f64 {
        self.delta_l / self.p as f64
    }

    /// High-resolution offset of the sample taken by low-resolution pixel 0.
    pub fn phase(&self) -> usize {
        self.p / 2
    }

    /// High-resolution coordinate sampled by low-resolution index `m`.
    pub fn sample_position(&self, m: usize) -> usize {
        m * self.p + self.phase()
    }

    /// Shift needed to keep high-resolution content registered with the low
    /// resolution grid after a flip along one axis: a flipped high-res index
    /// `i` maps to `n - 1 - i + flip_shift`.
    pub fn flip_shift(&self) -> isize {
        2 * self.phase() as isize - self.p as isize + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PsfKind<T> {
    /// Isotropic Gaussian with width in low-resolution pixels.
    Gaussian { sigma: f64 },
    /// Each emitter lights only the low-resolution pixel containing it.
    Delta,
    /// Nonnegative, odd-sided kernel sampled on the high-resolution grid.
    Sampled { kernel: Array2<T> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Psf<T> {
    pub kind: PsfKind<T>,
    /// Truncation radius in low-resolution pixels (Gaussian only);
    /// defaults to `ceil(4 sigma)`.
    pub support_radius: Option<usize>,
}

impl<T: Scalar> Psf<T> {
    pub fn gaussian(sigma: f64) -> Self {
        Self {
            kind: PsfKind::Gaussian { sigma },
            support_radius: None,
        }
    }

    pub fn delta() -> Self {
        Self {
            kind: PsfKind::Delta,
            support_radius: None,
        }
    }

    pub fn sampled(kernel: Array2<T>) -> Result<Self> {
        let psf = Self {
            kind: PsfKind::Sampled { kernel },
            support_radius: None,
        };
        psf.validate()?;
        Ok(psf)
    }

    pub fn with_support_radius(mut self, radius: usize) -> Self {
        self.support_radius = Some(radius);
        self
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            PsfKind::Gaussian { sigma } => {
                if !(*sigma > 0.0) || !sigma.is_finite() {
                    return Err(Error::InvalidPsf(format!("gaussian sigma {sigma}")));
                }
            }
            PsfKind::Delta => {}
            PsfKind::Sampled { kernel } => {
                let (r, c) = kernel.dim();
                if r != c || r % 2 == 0 {
                    return Err(Error::InvalidPsf(format!(
                        "sampled kernel must be square with odd side, got {r}x{c}"
                    )));
                }
                if kernel.iter().any(|v| !(*v >= T::zero())) {
                    return Err(Error::InvalidPsf("negative or NaN kernel entry".into()));
                }
                if kernel.iter().all(|v| *v == T::zero()) {
                    return Err(Error::InvalidPsf("all-zero kernel".into()));
                }
            }
        }
        Ok(())
    }

    pub fn is_delta(&self) -> bool {
        matches!(self.kind, PsfKind::Delta)
    }
}

fn peak_normalize<T: Scalar>(mut k: Array2<T>) -> Array2<T> {
    let peak = k.iter().cloned().fold(T::zero(), T::max);
    if peak > T::zero() {
        k.mapv_inplace(|v| v / peak);
    }
    k
}

fn gaussian_kernel<T: Scalar>(sigma: f64, radius: usize) -> Array2<T> {
    let side = 2 * radius + 1;
    let r = radius as f64;
    Array2::from_shape_fn((side, side), |(i, j)| {
        let (di, dj) = (i as f64 - r, j as f64 - r);
        T::lit((-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp())
    })
}

/// Samples `psf` on the low- or high-resolution grid as an odd-sided,
/// peak-normalized kernel centered on its middle element.
pub fn build_psf_kernel<T: Scalar>(
    psf: &Psf<T>,
    grid: &GridSpec,
    on_high_res: bool,
) -> Result<Array2<T>> {
    psf.validate()?;
    let kernel = match &psf.kind {
        PsfKind::Gaussian { sigma } => {
            let radius_l = psf
                .support_radius
                .unwrap_or_else(|| (4.0 * sigma).ceil() as usize);
            if on_high_res {
                gaussian_kernel(sigma * grid.p as f64, radius_l * grid.p)
            } else {
                gaussian_kernel(*sigma, radius_l)
            }
        }
        PsfKind::Delta => {
            if on_high_res {
                // Offsets c - P + 1 ..= c map every high-res pixel of a block
                // onto the low-res sample of that block.
                let c = grid.phase() as isize;
                let lo = c - grid.p as isize + 1;
                let h = lo.abs().max(c);
                let side = (2 * h + 1) as usize;
                Array2::from_shape_fn((side, side), |(i, j)| {
                    let (di, dj) = (i as isize - h, j as isize - h);
                    if (lo..=c).contains(&di) && (lo..=c).contains(&dj) {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
            } else {
                Array2::from_elem((1, 1), T::one())
            }
        }
        PsfKind::Sampled { kernel } => {
            if on_high_res {
                kernel.clone()
            } else {
                let h = kernel.nrows() / 2;
                let hl = h / grid.p;
                let side = 2 * hl + 1;
                Array2::from_shape_fn((side, side), |(i, j)| {
                    kernel[[h + i * grid.p - hl * grid.p, h + j * grid.p - hl * grid.p]]
                })
            }
        }
    };
    Ok(peak_normalize(kernel))
}

/// How the measurement operator is applied.
#[derive(Clone, Debug)]
pub enum OperatorForm<T> {
    /// Dense `M^2 x N^2` matrix (row-major vectorization).
    Explicit(Array2<T>),
    /// Strided direct convolution with the high-resolution kernel.
    Convolutional,
    /// Convolution through zero-padded FFTs, then striding.
    Fourier,
}

/// The PSF-derived operator `A` (or its element-wise square).
#[derive(Clone, Debug)]
pub struct MeasurementOperator<T> {
    pub grid: GridSpec,
    /// High-resolution kernel, already squared when `squared` is set.
    pub kernel: Array2<T>,
    pub squared: bool,
    pub form: OperatorForm<T>,
}

impl<T: Scalar> MeasurementOperator<T> {
    /// Convolutional operator for `psf` on `grid`.
    pub fn convolutional(psf: &Psf<T>, grid: GridSpec, squared: bool) -> Result<Self> {
        let mut kernel = build_psf_kernel(psf, &grid, true)?;
        if squared {
            kernel.mapv_inplace(|v| v * v);
        }
        Ok(Self {
            grid,
            kernel,
            squared,
            form: OperatorForm::Convolutional,
        })
    }

    pub fn with_form(mut self, form: OperatorForm<T>) -> Self {
        self.form = form;
        self
    }

    /// Dense matrix entry `A[m, l]` from the kernel.
    fn entry(&self, mi: usize, mj: usize, li: usize, lj: usize) -> T {
        let h = (self.kernel.nrows() / 2) as isize;
        let di = self.grid.sample_position(mi) as isize - li as isize + h;
        let dj = self.grid.sample_position(mj) as isize - lj as isize + h;
        let side = self.kernel.nrows() as isize;
        if di < 0 || dj < 0 || di >= side || dj >= side {
            T::zero()
        } else {
            self.kernel[[di as usize, dj as usize]]
        }
    }

    pub fn to_matrix(&self) -> Array2<T> {
        let (m, n) = (self.grid.m, self.grid.n);
        Array2::from_shape_fn((m * m, n * n), |(row, col)| {
            self.entry(row / m, row % m, col / n, col % n)
        })
    }

    pub fn apply_forward(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        let (m, n) = (self.grid.m, self.grid.n);
        if x.dim() != (n, n) {
            return Err(shape_err(format!("{n}x{n}"), format!("{:?}", x.dim())));
        }
        Ok(match &self.form {
            OperatorForm::Explicit(a) => {
                let xv = x.iter().cloned().collect::<ndarray::Array1<T>>();
                a.dot(&xv).into_shape_with_order((m, m)).expect("shape")
            }
            OperatorForm::Convolutional => self.forward_direct(x),
            OperatorForm::Fourier => {
                let fc = FourierConv::new(n, self.kernel.nrows());
                let full = fc.conv_same(x, self.kernel.view());
                self.subsample(&full)
            }
        })
    }

    pub fn apply_adjoint(&self, y: ArrayView2<T>) -> Result<Array2<T>> {
        let (m, n) = (self.grid.m, self.grid.n);
        if y.dim() != (m, m) {
            return Err(shape_err(format!("{m}x{m}"), format!("{:?}", y.dim())));
        }
        Ok(match &self.form {
            OperatorForm::Explicit(a) => {
                let yv = y.iter().cloned().collect::<ndarray::Array1<T>>();
                a.t().dot(&yv).into_shape_with_order((n, n)).expect("shape")
            }
            OperatorForm::Convolutional => self.adjoint_direct(y),
            OperatorForm::Fourier => {
                let fc = FourierConv::new(n, self.kernel.nrows());
                let up = self.upsample(y);
                let ks = fc.flipped_spectrum(self.kernel.view());
                fc.conv_same_from(&fc.spectrum(up.view()), &ks, n, self.kernel.nrows())
            }
        })
    }

    fn subsample(&self, full: &Array2<T>) -> Array2<T> {
        let m = self.grid.m;
        Array2::from_shape_fn((m, m), |(i, j)| {
            full[[self.grid.sample_position(i), self.grid.sample_position(j)]]
        })
    }

    /// Zero-insertion upsampling onto the sample positions.
    fn upsample(&self, y: ArrayView2<T>) -> Array2<T> {
        let n = self.grid.n;
        let mut up = Array2::zeros((n, n));
        for ((i, j), v) in y.indexed_iter() {
            up[[self.grid.sample_position(i), self.grid.sample_position(j)]] = *v;
        }
        up
    }

    fn forward_direct(&self, x: ArrayView2<T>) -> Array2<T> {
        let (m, n) = (self.grid.m, self.grid.n as isize);
        let side = self.kernel.nrows();
        let h = (side / 2) as isize;
        Array2::from_shape_fn((m, m), |(mi, mj)| {
            let (ui, uj) = (
                self.grid.sample_position(mi) as isize,
                self.grid.sample_position(mj) as isize,
            );
            let mut acc = T::zero();
            for a in 0..side {
                let li = ui - (a as isize - h);
                if li < 0 || li >= n {
                    continue;
                }
                for b in 0..side {
                    let lj = uj - (b as isize - h);
                    if lj < 0 || lj >= n {
                        continue;
                    }
                    acc += self.kernel[[a, b]] * x[[li as usize, lj as usize]];
                }
            }
            acc
        })
    }

    fn adjoint_direct(&self, y: ArrayView2<T>) -> Array2<T> {
        let up = self.upsample(y);
        correlate2d_same(up.view(), self.kernel.view())
    }

    /// Column `l = (li, lj)` of the operator as an `M x M` image.
    pub fn column(&self, li: usize, lj: usize) -> Array2<T> {
        let m = self.grid.m;
        Array2::from_shape_fn((m, m), |(mi, mj)| self.entry(mi, mj, li, lj))
    }

    /// Nonzero entries of column `l` as (row-major low-res index, value).
    pub fn column_support(&self, li: usize, lj: usize) -> Vec<(usize, T)> {
        let m = self.grid.m;
        let h = (self.kernel.nrows() / 2) as isize;
        let p = self.grid.p as isize;
        let c = self.grid.phase() as isize;
        // m * P + c within [l - h, l + h]
        let range = |l: usize| {
            let lo = (l as isize - h - c + p - 1).div_euclid(p).max(0);
            let hi = (l as isize + h - c).div_euclid(p).min(m as isize - 1);
            lo..=hi
        };
        let mut out = Vec::new();
        for mi in range(li) {
            for mj in range(lj) {
                let v = self.entry(mi as usize, mj as usize, li, lj);
                if v != T::zero() {
                    out.push((mi as usize * m + mj as usize, v));
                }
            }
        }
        out
    }

    /// Element-wise squared copy of this operator.
    pub fn squared(&self) -> Self {
        let sq = |v: &T| *v * *v;
        Self {
            grid: self.grid,
            kernel: self.kernel.map(sq),
            squared: true,
            form: match &self.form {
                OperatorForm::Explicit(a) => OperatorForm::Explicit(a.map(sq)),
                OperatorForm::Convolutional => OperatorForm::Convolutional,
                OperatorForm::Fourier => OperatorForm::Fourier,
            },
        }
    }
}

/// Explicit `M^2 x N^2` measurement matrix, for small grids only.
pub fn build_measurement_matrix<T: Scalar>(
    psf: &Psf<T>,
    grid: GridSpec,
    squared: bool,
) -> Result<MeasurementOperator<T>> {
    build_measurement_matrix_capped(psf, grid, squared, EXPLICIT_MAX_LOW_RES)
}

pub fn build_measurement_matrix_capped<T: Scalar>(
    psf: &Psf<T>,
    grid: GridSpec,
    squared: bool,
    max_low_res: usize,
) -> Result<MeasurementOperator<T>> {
    if grid.m > max_low_res {
        return Err(Error::SizeCap {
            what: "measurement matrix",
            size: grid.m * grid.m * grid.n * grid.n,
            cap: max_low_res.pow(4) * grid.p.pow(2),
        });
    }
    let op = MeasurementOperator::convolutional(psf, grid, squared)?;
    let a = op.to_matrix();
    Ok(op.with_form(OperatorForm::Explicit(a)))
}

/// Nonnegative high-resolution emitter image, optionally with a point list.
#[derive(Clone, Debug, PartialEq)]
pub struct EmitterMap<T> {
    pub values: Array2<T>,
    pub points: Vec<EmitterPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmitterPoint {
    pub row: usize,
    pub col: usize,
    pub amplitude: f64,
}

impl<T: Scalar> EmitterMap<T> {
    /// Wraps `values`, clamping tiny negative round-off to zero.
    pub fn new(mut values: Array2<T>) -> Result<Self> {
        let floor = T::lit(-1e-12);
        for v in values.iter_mut() {
            if !v.is_finite() || *v < floor {
                return Err(Error::InvalidArgument(format!(
                    "emitter map entry {v} is negative or non-finite"
                )));
            }
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        Ok(Self {
            values,
            points: Vec::new(),
        })
    }

    pub fn from_points(side: usize, points: Vec<EmitterPoint>) -> Result<Self> {
        let mut values = Array2::zeros((side, side));
        for p in &points {
            if p.row >= side || p.col >= side || !(p.amplitude >= 0.0) {
                return Err(Error::InvalidArgument(format!("bad point {p:?}")));
            }
            values[[p.row, p.col]] += T::lit(p.amplitude);
        }
        Ok(Self { values, points })
    }
}

/// Kernel a learned input filter should approach, and the kernel a learned
/// fold filter should approach, both for a known PSF.
#[derive(Clone, Debug)]
pub struct TheoreticalKernels<T> {
    pub w_i: Array2<T>,
    pub w_p: Array2<T>,
}

/// Center crop or zero pad an odd-sided kernel to `side`.
pub fn fit_kernel<T: Scalar>(k: ArrayView2<T>, side: usize) -> Array2<T> {
    let h_in = (k.nrows() / 2) as isize;
    let h_out = (side / 2) as isize;
    Array2::from_shape_fn((side, side), |(i, j)| {
        let si = i as isize - h_out + h_in;
        let sj = j as isize - h_out + h_in;
        if si < 0 || sj < 0 || si >= k.nrows() as isize || sj >= k.ncols() as isize {
            T::zero()
        } else {
            k[[si as usize, sj as usize]]
        }
    })
}

pub fn theoretical_kernels<T: Scalar>(
    psf: &Psf<T>,
    grid: &GridSpec,
) -> Result<TheoreticalKernels<T>> {
    psf.validate()?;
    if psf.is_delta() {
        let impulse = |side: usize| {
            let mut k = Array2::zeros((side, side));
            k[[side / 2, side / 2]] = T::one();
            k
        };
        return Ok(TheoreticalKernels {
            w_i: impulse(INPUT_KERNEL_SIDE),
            w_p: impulse(FOLD_KERNEL_SIDE),
        });
    }
    let kh = build_psf_kernel(psf, grid, true)?.mapv(|v| v * v);
    let w_i = fit_kernel(kh.view(), INPUT_KERNEL_SIDE);

    // w_p(e) = sum_d k_H^2(d P) k_H^2(d P - e)
    let hk = (kh.nrows() / 2) as isize;
    let p = grid.p as isize;
    let dmax = hk / p;
    let hp = (FOLD_KERNEL_SIDE / 2) as isize;
    let at = |i: isize, j: isize| -> T {
        if i.abs() > hk || j.abs() > hk {
            T::zero()
        } else {
            kh[[(i + hk) as usize, (j + hk) as usize]]
        }
    };
    let w_p = Array2::from_shape_fn((FOLD_KERNEL_SIDE, FOLD_KERNEL_SIDE), |(i, j)| {
        let (ei, ej) = (i as isize - hp, j as isize - hp);
        let mut acc = T::zero();
        for di in -dmax..=dmax {
            for dj in -dmax..=dmax {
                let wl = at(di * p, dj * p);
                if wl != T::zero() {
                    acc += wl * at(di * p - ei, dj * p - ej);
                }
            }
        }
        acc
    });
    Ok(TheoreticalKernels { w_i, w_p })
}

/// Center crop helper used by tests and theoretical-kernel comparisons.
pub fn center_crop<T: Scalar>(img: ArrayView2<T>, ci: usize, cj: usize, side: usize) -> Array2<T> {
    let h = side / 2;
    img.slice(s![ci - h..=ci + h, cj - h..=cj + h]).to_owned()
}
