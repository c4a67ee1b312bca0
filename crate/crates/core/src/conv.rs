//! Two-dimensional convolution primitives with zero padding.
//!
//! Kernels are odd-sided and indexed around their center, so a kernel of side
//! `2h + 1` covers offsets `-h..=h`. "Same" convolution keeps the input size:
//!
//! ```text
//! out(p) = sum_q k(q) x(p - q)
//! ```
//!
//! The direct routines are the reference; [`FourierConv`] computes the same
//! quantities through zero-padded FFTs and is what the training loop uses.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2};
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Scalar;

fn half(side: usize) -> usize {
    debug_assert!(side % 2 == 1, "kernel side must be odd");
    side / 2
}

/// Zero-padded "same" convolution, `out(p) = sum_q k(q) x(p - q)`.
pub fn conv2d_same<T: Scalar>(x: ArrayView2<T>, k: ArrayView2<T>) -> Array2<T> {
    let (n0, n1) = x.dim();
    let (k0, k1) = k.dim();
    let (h0, h1) = (half(k0) as isize, half(k1) as isize);
    let mut out = Array2::<T>::zeros((n0, n1));
    // Scatter form: each input pixel spreads the kernel around itself.
    for i in 0..n0 {
        for j in 0..n1 {
            let v = x[[i, j]];
            if v == T::zero() {
                continue;
            }
            for a in 0..k0 {
                let oi = i as isize + a as isize - h0;
                if oi < 0 || oi >= n0 as isize {
                    continue;
                }
                let oi = oi as usize;
                for b in 0..k1 {
                    let oj = j as isize + b as isize - h1;
                    if oj < 0 || oj >= n1 as isize {
                        continue;
                    }
                    out[[oi, oj as usize]] += k[[a, b]] * v;
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv2d_same`] with respect to its input:
/// `out(r) = sum_q k(q) y(r + q)`.
pub fn correlate2d_same<T: Scalar>(y: ArrayView2<T>, k: ArrayView2<T>) -> Array2<T> {
    let flipped = k.slice(s![..;-1, ..;-1]);
    conv2d_same(y, flipped)
}

/// Adjoint of [`conv2d_same`] with respect to its kernel:
/// `dk(q) = sum_p dy(p) x(p - q)` for `|q| <= side / 2`.
pub fn kernel_gradient<T: Scalar>(
    x: ArrayView2<T>,
    dy: ArrayView2<T>,
    side: usize,
) -> Array2<T> {
    let (n0, n1) = x.dim();
    let h = half(side) as isize;
    let mut out = Array2::<T>::zeros((side, side));
    for a in 0..side {
        let qa = a as isize - h;
        for b in 0..side {
            let qb = b as isize - h;
            let mut acc = T::zero();
            for i in 0..n0 {
                let si = i as isize - qa;
                if si < 0 || si >= n0 as isize {
                    continue;
                }
                for j in 0..n1 {
                    let sj = j as isize - qb;
                    if sj < 0 || sj >= n1 as isize {
                        continue;
                    }
                    acc += dy[[i, j]] * x[[si as usize, sj as usize]];
                }
            }
            out[[a, b]] = acc;
        }
    }
    out
}

/// Smallest integer `>= n` whose only prime factors are 2, 3 and 5.
pub fn smooth_length(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Spectrum of a zero-padded square `len x len` real image, stored transposed.
///
/// Only products of spectra produced by the same [`FourierConv`] are
/// meaningful; the layout is internal.
#[derive(Clone, Debug)]
pub struct Spectrum<T> {
    pub(crate) data: Vec<Complex<T>>,
}

impl<T: Scalar> Spectrum<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![Complex::new(T::zero(), T::zero()); len * len],
        }
    }

    pub fn add_assign(&mut self, other: &Spectrum<T>) {
        for (o, x) in self.data.iter_mut().zip(&other.data) {
            *o = *o + *x;
        }
    }

    /// `self += a * b`
    pub fn add_product(&mut self, a: &Spectrum<T>, b: &Spectrum<T>) {
        for ((o, x), y) in self.data.iter_mut().zip(&a.data).zip(&b.data) {
            *o = *o + *x * *y;
        }
    }

    /// `self += a * conj(b)`
    pub fn add_product_conj(&mut self, a: &Spectrum<T>, b: &Spectrum<T>) {
        for ((o, x), y) in self.data.iter_mut().zip(&a.data).zip(&b.data) {
            *o = *o + *x * y.conj();
        }
    }

    pub fn product(a: &Spectrum<T>, b: &Spectrum<T>) -> Spectrum<T> {
        Spectrum {
            data: a.data.iter().zip(&b.data).map(|(x, y)| *x * *y).collect(),
        }
    }
}

/// FFT-based convolution engine for images up to `image_side` and odd kernels
/// up to `kernel_side`.
#[derive(Clone)]
pub struct FourierConv<T: Scalar> {
    len: usize,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Scalar> std::fmt::Debug for FourierConv<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FourierConv").field("len", &self.len).finish()
    }
}

impl<T: Scalar> FourierConv<T> {
    pub fn new(image_side: usize, kernel_side: usize) -> Self {
        let len = smooth_length(image_side + kernel_side - 1);
        let mut planner = FftPlanner::new();
        Self {
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    fn transpose(&self, buf: &mut [Complex<T>]) {
        let n = self.len;
        for i in 0..n {
            for j in (i + 1)..n {
                buf.swap(i * n + j, j * n + i);
            }
        }
    }

    /// Spectrum of `img` placed at the top-left corner of the padded frame.
    pub fn spectrum(&self, img: ArrayView2<T>) -> Spectrum<T> {
        let n = self.len;
        let (r, c) = img.dim();
        assert!(r <= n && c <= n, "image larger than FFT frame");
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n * n];
        for i in 0..r {
            for j in 0..c {
                buf[i * n + j] = Complex::new(img[[i, j]], T::zero());
            }
        }
        // Rows past `r` are zero and stay zero under the row transform.
        self.forward.process(&mut buf[..r * n]);
        self.transpose(&mut buf);
        self.forward.process(&mut buf);
        Spectrum { data: buf }
    }

    /// Spectrum of an odd kernel reflected through its center,
    /// used for adjoint (correlation) products.
    pub fn flipped_spectrum(&self, k: ArrayView2<T>) -> Spectrum<T> {
        self.spectrum(k.slice(s![..;-1, ..;-1]))
    }

    /// Inverse transform, returning the `rows x cols` block starting at
    /// (`r0`, `c0`) with circular indexing.
    pub fn inverse_block(
        &self,
        spec: Spectrum<T>,
        r0: isize,
        c0: isize,
        rows: usize,
        cols: usize,
    ) -> Array2<T> {
        let n = self.len;
        let mut buf = spec.data;
        self.inverse.process(&mut buf);
        self.transpose(&mut buf);
        let wrap = |v: isize| v.rem_euclid(n as isize) as usize;
        let mut needed = vec![false; n];
        for i in 0..rows {
            needed[wrap(r0 + i as isize)] = true;
        }
        for (i, row) in buf.chunks_mut(n).enumerate() {
            if needed[i] {
                self.inverse.process(row);
            }
        }
        let scale = T::one() / T::from_usize(n * n).unwrap();
        Array2::from_shape_fn((rows, cols), |(i, j)| {
            buf[wrap(r0 + i as isize) * n + wrap(c0 + j as isize)].re * scale
        })
    }

    /// Same-size convolution from precomputed spectra of the image and kernel.
    pub fn conv_same_from(
        &self,
        x: &Spectrum<T>,
        k: &Spectrum<T>,
        image_side: usize,
        kernel_side: usize,
    ) -> Array2<T> {
        let h = half(kernel_side) as isize;
        self.inverse_block(Spectrum::product(x, k), h, h, image_side, image_side)
    }

    pub fn conv_same(&self, x: ArrayView2<T>, k: ArrayView2<T>) -> Array2<T> {
        assert_eq!(x.nrows(), x.ncols(), "square images only");
        self.conv_same_from(&self.spectrum(x), &self.spectrum(k), x.nrows(), k.nrows())
    }

    /// Kernel gradient from an accumulated cross spectrum `sum dY * conj(X)`.
    pub fn kernel_gradient_from(&self, cross: Spectrum<T>, side: usize) -> Array2<T> {
        let h = half(side) as isize;
        self.inverse_block(cross, -h, -h, side, side)
    }
}
