//! Stationary covariance functions and jittered Cholesky factorization.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{NsfError, Result};
use crate::linalg;
use crate::scalar::Scalar;

/// Relative jitter levels tried in order, as multiples of the largest
/// diagonal entry. The first level is no jitter at all.
pub const JITTER_SCHEDULE: [f64; 6] = [0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Matern32,
    SquaredExponential,
}

impl std::str::FromStr for KernelKind {
    type Err = NsfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matern32" => Ok(Self::Matern32),
            "sqexp" | "squared_exponential" => Ok(Self::SquaredExponential),
            other => Err(NsfError::Argument(format!("unknown kernel '{other}'"))),
        }
    }
}

/// Kernel family with output scale `amplitude` and a lengthscale shared
/// across input dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams<F> {
    pub kind: KernelKind,
    pub amplitude: F,
    pub lengthscale: F,
}

impl<F: Scalar> KernelParams<F> {
    pub fn new(kind: KernelKind, amplitude: F, lengthscale: F) -> Result<Self> {
        let p = Self { kind, amplitude, lengthscale };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude > F::zero()) || !self.amplitude.is_finite() {
            return Err(NsfError::ParameterDomain(format!("amplitude must be positive, got {}", self.amplitude)));
        }
        if !(self.lengthscale > F::zero()) || !self.lengthscale.is_finite() {
            return Err(NsfError::ParameterDomain(format!("lengthscale must be positive, got {}", self.lengthscale)));
        }
        Ok(())
    }

    /// Correlation (kernel divided by amplitude²) at distance `r`.
    #[inline]
    pub fn correlation(&self, r: F) -> F {
        match self.kind {
            KernelKind::Matern32 => {
                let s = F::of(3.0).sqrt() * r / self.lengthscale;
                (F::one() + s) * (-s).exp()
            }
            KernelKind::SquaredExponential => {
                let z = r / self.lengthscale;
                (F::of(-0.5) * z * z).exp()
            }
        }
    }

    /// Derivative of the correlation with respect to `log(lengthscale)`.
    #[inline]
    pub fn correlation_dlog_lengthscale(&self, r: F) -> F {
        match self.kind {
            KernelKind::Matern32 => {
                let s = F::of(3.0).sqrt() * r / self.lengthscale;
                s * s * (-s).exp()
            }
            KernelKind::SquaredExponential => {
                let z = r / self.lengthscale;
                z * z * (F::of(-0.5) * z * z).exp()
            }
        }
    }

    #[inline]
    pub fn variance(&self) -> F {
        self.amplitude * self.amplitude
    }
}

#[inline]
fn distance<F: Scalar>(x1: ArrayView1<'_, F>, x2: ArrayView1<'_, F>) -> F {
    x1.iter().zip(x2.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum::<F>().sqrt()
}

/// `k(x1, x2)`.
pub fn kernel_eval<F: Scalar>(params: &KernelParams<F>, x1: ArrayView1<'_, F>, x2: ArrayView1<'_, F>) -> Result<F> {
    params.validate()?;
    if x1.len() != x2.len() {
        return Err(NsfError::Shape(format!("points have dimensions {} and {}", x1.len(), x2.len())));
    }
    Ok(params.variance() * params.correlation(distance(x1, x2)))
}

fn check_dims<F>(a: ArrayView2<'_, F>, b: ArrayView2<'_, F>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(NsfError::Shape(format!("coordinate dimensions {} and {} differ", a.ncols(), b.ncols())));
    }
    Ok(())
}

/// Covariance block with entries `k(a_p, b_q)`.
pub fn cross_cov<F: Scalar>(params: &KernelParams<F>, a: ArrayView2<'_, F>, b: ArrayView2<'_, F>) -> Result<Array2<F>> {
    params.validate()?;
    check_dims(a, b)?;
    let var = params.variance();
    Ok(Array2::from_shape_fn((a.nrows(), b.nrows()), |(p, q)| var * params.correlation(distance(a.row(p), b.row(q)))))
}

/// Derivative of [`cross_cov`] with respect to `log(lengthscale)`.
pub fn cross_cov_dlog_lengthscale<F: Scalar>(
    params: &KernelParams<F>,
    a: ArrayView2<'_, F>,
    b: ArrayView2<'_, F>,
) -> Result<Array2<F>> {
    params.validate()?;
    check_dims(a, b)?;
    let var = params.variance();
    Ok(Array2::from_shape_fn((a.nrows(), b.nrows()), |(p, q)| {
        var * params.correlation_dlog_lengthscale(distance(a.row(p), b.row(q)))
    }))
}

/// Symmetric Gram matrix `k(a_p, a_q)`, evaluated on the lower triangle and mirrored.
pub fn gram<F: Scalar>(params: &KernelParams<F>, a: ArrayView2<'_, F>) -> Result<Array2<F>> {
    params.validate()?;
    let n = a.nrows();
    let var = params.variance();
    let mut k = Array2::zeros((n, n));
    for p in 0..n {
        k[[p, p]] = var;
        for q in 0..p {
            let v = var * params.correlation(distance(a.row(p), a.row(q)));
            k[[p, q]] = v;
            k[[q, p]] = v;
        }
    }
    Ok(k)
}

/// A Cholesky factor together with the diagonal jitter that made it succeed.
#[derive(Debug, Clone)]
pub struct CholFactor<F> {
    pub lower: Array2<F>,
    /// Absolute jitter `j` with `L Lᵀ = K + j I`.
    pub jitter: F,
    /// Jitter relative to the largest diagonal entry of `K`.
    pub relative_jitter: F,
}

/// Cholesky factorization of `K + jI` for the smallest `j` in
/// [`JITTER_SCHEDULE`] (scaled by `max diag K`) that succeeds.
pub fn chol_with_jitter<F: Scalar>(k: ArrayView2<'_, F>) -> Result<CholFactor<F>> {
    if k.nrows() != k.ncols() {
        return Err(NsfError::Shape(format!("cannot factor a {}x{} matrix", k.nrows(), k.ncols())));
    }
    let scale = k.diag().iter().fold(F::zero(), |m, &d| m.max(d.abs()));
    let scale = if scale > F::zero() { scale } else { F::one() };
    let mut last = F::zero();
    for &rel in JITTER_SCHEDULE.iter() {
        let rel = F::of(rel);
        let jitter = rel * scale;
        last = jitter;
        let attempt = if jitter > F::zero() {
            let mut kj = k.to_owned();
            kj.diag_mut().mapv_inplace(|d| d + jitter);
            linalg::cholesky(kj.view())
        } else {
            linalg::cholesky(k)
        };
        if let Ok(lower) = attempt {
            if jitter > F::zero() {
                log::debug!("cholesky needed jitter {}", jitter);
            }
            return Ok(CholFactor { lower, jitter, relative_jitter: rel });
        }
    }
    Err(NsfError::Singular { jitter: last.as_f64() })
}

/// Factorization with a prescribed relative jitter (no escalation).
pub fn chol_fixed_jitter<F: Scalar>(k: ArrayView2<'_, F>, relative_jitter: F) -> Result<CholFactor<F>> {
    let scale = k.diag().iter().fold(F::zero(), |m, &d| m.max(d.abs()));
    let scale = if scale > F::zero() { scale } else { F::one() };
    let jitter = relative_jitter * scale;
    let mut kj = k.to_owned();
    kj.diag_mut().mapv_inplace(|d| d + jitter);
    let lower = linalg::cholesky(kj.view()).map_err(|_| NsfError::Singular { jitter: jitter.as_f64() })?;
    Ok(CholFactor { lower, jitter, relative_jitter })
}
