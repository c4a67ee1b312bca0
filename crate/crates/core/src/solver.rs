//! Proximal-gradient sparse recovery on second-order statistics.
//!
//! Both formulations reduce to minimizing, over `x >= 0`,
//!
//! ```text
//! lambda * |x|_1 + c0 - v^T x + x^T M x / 2
//! ```
//!
//! where `v` carries the data and `M` the PSF overlap structure. ISTA iterates
//! `x <- T+_{lambda / L}(x + (v - M x) / L)` from `x = 0`; FISTA adds the
//! standard momentum sequence without restarts.

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{shape_err, Error, Result};
use crate::model::{EmitterMap, MeasurementOperator};
use crate::scalar::Scalar;
use crate::stats::{CovarianceMatrix, Formulation, GramOperator, VarianceImage};

/// Scalar positive soft threshold `max(x - alpha, 0)`.
#[inline]
pub fn soft_threshold_pos<T: Scalar>(x: T, alpha: T) -> T {
    (x - alpha).max(T::zero())
}

pub fn positive_soft_threshold<T: Scalar>(x: ArrayView2<T>, alpha: T) -> Result<Array2<T>> {
    if !(alpha >= T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be nonnegative, got {alpha}"
        )));
    }
    Ok(x.mapv(|v| soft_threshold_pos(v, alpha)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub lambda: f64,
    pub max_iters: usize,
    pub formulation: Formulation,
    pub accelerated: bool,
    /// Multiplier on the `1 / L` step.
    pub step_scale: f64,
}

impl SolverConfig {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            max_iters: 100,
            formulation: Formulation::Variance,
            accelerated: false,
            step_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda {}", self.lambda)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
        }
        if !(self.step_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "step scale {}",
                self.step_scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SolverTrace<T> {
    /// Objective after each iteration (entry `k` is for `x^(k+1)`).
    pub objective_per_iter: Vec<f64>,
    pub final_x: EmitterMap<T>,
    pub iterations_run: usize,
}

/// Data of one quadratic problem: `v`, `M` and the constant `c0 = |data|^2 / 2`.
#[derive(Clone, Debug)]
pub struct Problem<'a, T> {
    pub v: ArrayView2<'a, T>,
    pub gram: &'a GramOperator<T>,
    pub data_energy: f64,
}

impl<T: Scalar> Problem<'_, T> {
    fn check(&self) -> Result<()> {
        let n = self.gram.side();
        if self.v.dim() != (n, n) {
            return Err(shape_err(format!("{n}x{n}"), format!("{:?}", self.v.dim())));
        }
        if self.v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("linear term v".into()));
        }
        Ok(())
    }

    /// Objective value given `x` and a precomputed `M x`.
    pub fn objective_with(&self, x: ArrayView2<T>, mx: ArrayView2<T>, lambda: f64) -> f64 {
        let mut l1 = 0.0;
        let mut lin = 0.0;
        let mut quad = 0.0;
        Zip::from(&x).and(&mx).and(&self.v).for_each(|&xi, &mi, &vi| {
            let xf = xi.to_f64_lossy();
            l1 += xf.abs();
            lin += vi.to_f64_lossy() * xf;
            quad += mi.to_f64_lossy() * xf;
        });
        lambda * l1 + self.data_energy - lin + 0.5 * quad
    }

    pub fn objective(&self, x: ArrayView2<T>, lambda: f64) -> Result<f64> {
        let mx = self.gram.apply(x)?;
        Ok(self.objective_with(x, mx.view(), lambda))
    }
}

/// Inputs for the direct (Frobenius-norm) objective.
pub enum ObjectiveInputs<'a, T> {
    /// `f(x) = |g_Y - A~ x|^2 / 2`, `a_sq` squared.
    Variance {
        g_y: &'a VarianceImage<T>,
        a_sq: &'a MeasurementOperator<T>,
    },
    /// `f(x) = |R_y - sum_l a_l a_l^T x_l|_F^2 / 2`.
    Covariance {
        r_y: &'a CovarianceMatrix<T>,
        a: &'a MeasurementOperator<T>,
    },
}

/// `lambda |x|_1 + f(x)` evaluated from the raw data term.
pub fn objective<T: Scalar>(
    x: &EmitterMap<T>,
    inputs: &ObjectiveInputs<T>,
    lambda: f64,
) -> Result<f64> {
    let l1: f64 = x.values.iter().map(|v| v.to_f64_lossy().abs()).sum();
    let f = match inputs {
        ObjectiveInputs::Variance { g_y, a_sq } => {
            let pred = a_sq.apply_forward(x.values.view())?;
            if pred.dim() != g_y.values.dim() {
                return Err(shape_err(
                    format!("{:?}", pred.dim()),
                    format!("{:?}", g_y.values.dim()),
                ));
            }
            0.5 * (&g_y.values - &pred)
                .iter()
                .map(|v| v.to_f64_lossy().powi(2))
                .sum::<f64>()
        }
        ObjectiveInputs::Covariance { r_y, a } => {
            let n = a.grid.n;
            if x.values.dim() != (n, n) {
                return Err(shape_err(format!("{n}x{n}"), format!("{:?}", x.values.dim())));
            }
            let m2 = a.grid.m * a.grid.m;
            if r_y.values.dim() != (m2, m2) {
                return Err(shape_err(format!("{m2}x{m2}"), format!("{:?}", r_y.values.dim())));
            }
            let mut resid = r_y.values.clone();
            for ((li, lj), xv) in x.values.indexed_iter() {
                if *xv == T::zero() {
                    continue;
                }
                let col = a.column_support(li, lj);
                for &(i, ai) in &col {
                    for &(j, aj) in &col {
                        resid[[i, j]] -= ai * aj * *xv;
                    }
                }
            }
            0.5 * resid.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>()
        }
    };
    Ok(lambda * l1 + f)
}

fn check_finite<T: Scalar>(x: &Array2<T>, iter: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("iterate {iter}")))
    }
}

fn prepare<T: Scalar>(problem: &Problem<T>, l_f: f64, config: &SolverConfig) -> Result<(T, T)> {
    config.validate()?;
    problem.check()?;
    if !(l_f > 0.0) || !l_f.is_finite() {
        return Err(Error::InvalidArgument(format!("Lipschitz constant {l_f}")));
    }
    let step = config.step_scale / l_f;
    Ok((T::lit(step), T::lit(config.lambda * step)))
}

/// Gradient step followed by the positive soft threshold, written into `out`.
fn prox_step<T: Scalar>(
    out: &mut Array2<T>,
    base: ArrayView2<T>,
    m_base: ArrayView2<T>,
    v: ArrayView2<T>,
    step: T,
    thresh: T,
) {
    Zip::from(out)
        .and(&base)
        .and(&m_base)
        .and(&v)
        .for_each(|o, &b, &mb, &vi| *o = soft_threshold_pos(b + step * (vi - mb), thresh));
}

/// Plain ISTA from `x = 0` for exactly `config.max_iters` iterations.
pub fn ista_solve<T: Scalar>(
    problem: &Problem<T>,
    l_f: f64,
    config: &SolverConfig,
) -> Result<SolverTrace<T>> {
    let (step, thresh) = prepare(problem, l_f, config)?;
    let n = problem.gram.side();
    let mut x = Array2::<T>::zeros((n, n));
    let mut mx = Array2::<T>::zeros((n, n));
    let mut next = Array2::<T>::zeros((n, n));
    let mut objectives = Vec::with_capacity(config.max_iters);
    for k in 0..config.max_iters {
        prox_step(&mut next, x.view(), mx.view(), problem.v, step, thresh);
        std::mem::swap(&mut x, &mut next);
        check_finite(&x, k)?;
        mx = problem.gram.apply(x.view())?;
        objectives.push(problem.objective_with(x.view(), mx.view(), config.lambda));
    }
    Ok(SolverTrace {
        objective_per_iter: objectives,
        final_x: EmitterMap::new(x)?,
        iterations_run: config.max_iters,
    })
}

/// FISTA (Beck–Teboulle momentum, no restarts) from `x = 0`.
pub fn fista_solve<T: Scalar>(
    problem: &Problem<T>,
    l_f: f64,
    config: &SolverConfig,
) -> Result<SolverTrace<T>> {
    let (step, thresh) = prepare(problem, l_f, config)?;
    let n = problem.gram.side();
    let mut x = Array2::<T>::zeros((n, n));
    let mut y = x.clone();
    let mut next = x.clone();
    let mut t = 1.0f64;
    let mut objectives = Vec::with_capacity(config.max_iters);
    for k in 0..config.max_iters {
        let my = problem.gram.apply(y.view())?;
        prox_step(&mut next, y.view(), my.view(), problem.v, step, thresh);
        check_finite(&next, k)?;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = T::lit((t - 1.0) / t_next);
        Zip::from(&mut y)
            .and(&next)
            .and(&x)
            .for_each(|yi, &xn, &xo| *yi = xn + momentum * (xn - xo));
        std::mem::swap(&mut x, &mut next);
        t = t_next;
        let mx = problem.gram.apply(x.view())?;
        objectives.push(problem.objective_with(x.view(), mx.view(), config.lambda));
    }
    Ok(SolverTrace {
        objective_per_iter: objectives,
        final_x: EmitterMap::new(x)?,
        iterations_run: config.max_iters,
    })
}

/// Dispatches on `config.accelerated`.
pub fn solve<T: Scalar>(
    problem: &Problem<T>,
    l_f: f64,
    config: &SolverConfig,
) -> Result<SolverTrace<T>> {
    if config.accelerated {
        fista_solve(problem, l_f, config)
    } else {
        ista_solve(problem, l_f, config)
    }
}
