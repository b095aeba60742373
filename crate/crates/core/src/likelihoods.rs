//! Observation log-likelihoods, size factors and Poisson deviance.

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{NsfError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodFamily {
    Poisson,
    NegativeBinomial,
    Gaussian,
}

impl LikelihoodFamily {
    /// Whether the family models raw counts (and therefore uses size factors).
    pub fn is_count(self) -> bool {
        !matches!(self, Self::Gaussian)
    }

    pub fn has_aux(self) -> bool {
        !matches!(self, Self::Poisson)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Self::Poisson => "poi",
            Self::NegativeBinomial => "nb",
            Self::Gaussian => "gau",
        }
    }
}

impl std::str::FromStr for LikelihoodFamily {
    type Err = NsfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poi" | "poisson" => Ok(Self::Poisson),
            "nb" | "negative_binomial" => Ok(Self::NegativeBinomial),
            "gau" | "gaussian" => Ok(Self::Gaussian),
            other => Err(NsfError::Argument(format!("unknown likelihood '{other}'"))),
        }
    }
}

/// Likelihood family with per-feature auxiliary parameters: the variance
/// σ_j² for `Gaussian`, the shape (size) r_j for `NegativeBinomial` where
/// r → ∞ recovers the Poisson, nothing for `Poisson`.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodSpec<F> {
    pub family: LikelihoodFamily,
    pub aux: Array1<F>,
}

impl<F: Scalar> LikelihoodSpec<F> {
    pub fn poisson() -> Self {
        Self { family: LikelihoodFamily::Poisson, aux: Array1::zeros(0) }
    }

    pub fn new(family: LikelihoodFamily, aux: Array1<F>) -> Result<Self> {
        let spec = Self { family, aux };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.family.has_aux() && !self.aux.is_empty() {
            return Err(NsfError::Argument("poisson likelihood takes no auxiliary parameters".into()));
        }
        if let Some(bad) = self.aux.iter().find(|&&a| !(a > F::zero()) || !a.is_finite()) {
            return Err(NsfError::ParameterDomain(format!("auxiliary parameter must be positive, got {bad}")));
        }
        Ok(())
    }

    fn aux_for(&self, j: usize) -> Result<F> {
        self.aux
            .get(j)
            .copied()
            .ok_or_else(|| NsfError::Argument(format!("no auxiliary parameter for feature {j}")))
    }
}

/// `log y!`.
pub fn log_factorial<F: Scalar>(y: F) -> F {
    F::of(ln_gamma(y.as_f64() + 1.0))
}

fn check_count<F: Scalar>(y: F) -> Result<()> {
    if y < F::zero() || y.fract() != F::zero() || !y.is_finite() {
        return Err(NsfError::Argument(format!("count likelihood needs a nonnegative integer, got {y}")));
    }
    Ok(())
}

/// `ζ(y | mean)` for feature `j`, where `mean` is the full mean `νλ`
/// (or μ for the Gaussian).
pub fn log_lik<F: Scalar>(spec: &LikelihoodSpec<F>, y: F, mean: F, j: usize) -> Result<F> {
    match spec.family {
        LikelihoodFamily::Poisson | LikelihoodFamily::NegativeBinomial => {
            check_count(y)?;
            if !(mean > F::zero()) {
                return Err(NsfError::Argument(format!("count likelihood needs a positive mean, got {mean}")));
            }
        }
        LikelihoodFamily::Gaussian => {
            if !y.is_finite() || !mean.is_finite() {
                return Err(NsfError::Argument("gaussian likelihood needs finite values".into()));
            }
        }
    }
    let aux = if spec.family.has_aux() { spec.aux_for(j)? } else { F::zero() };
    let lfact = if spec.family.is_count() { log_factorial(y) } else { F::zero() };
    let nb = if spec.family == LikelihoodFamily::NegativeBinomial { nb_constants(y, aux) } else { F::zero() };
    Ok(entry(spec.family, y, mean, aux, lfact, nb).value)
}

/// Value and derivatives of one likelihood term.
#[derive(Debug, Clone, Copy)]
pub(crate) struct EntryEval<F> {
    pub value: F,
    /// ∂ζ/∂mean.
    pub dmean: F,
    /// ∂ζ/∂log(aux); zero for the Poisson.
    pub dlog_aux: F,
}

/// `lgamma(y + r) - lgamma(r)` for the negative binomial.
pub(crate) fn nb_constants<F: Scalar>(y: F, r: F) -> F {
    let (y, r) = (y.as_f64(), r.as_f64());
    F::of(ln_gamma(y + r) - ln_gamma(r))
}

/// `ψ(y + r) - ψ(r)`.
pub(crate) fn nb_digamma_diff<F: Scalar>(y: F, r: F) -> F {
    let (y, r) = (y.as_f64(), r.as_f64());
    F::of(digamma(y + r) - digamma(r))
}

/// Evaluates one term. `lfact` is `log y!` and `nb_const` is
/// `lgamma(y + r) - lgamma(r)` (ignored by other families). The mean of a
/// count family is floored at a tiny positive value when `y > 0`.
#[inline]
pub(crate) fn entry<F: Scalar>(family: LikelihoodFamily, y: F, mean: F, aux: F, lfact: F, nb_const: F) -> EntryEval<F> {
    match family {
        LikelihoodFamily::Poisson => {
            if y == F::zero() {
                EntryEval { value: -mean, dmean: -F::one(), dlog_aux: F::zero() }
            } else {
                let m = mean.max(F::of(1e-30));
                EntryEval { value: y * m.ln() - m - lfact, dmean: y / m - F::one(), dlog_aux: F::zero() }
            }
        }
        LikelihoodFamily::NegativeBinomial => {
            let r = aux;
            let m = if y == F::zero() { mean.max(F::zero()) } else { mean.max(F::of(1e-30)) };
            let rpm = r + m;
            // r log(r/(r+m)) + y log(m/(r+m))
            let mut value = nb_const - lfact - r * (m / r).ln_1p();
            if y > F::zero() {
                value += y * (m / rpm).ln();
            }
            let dmean = if y > F::zero() { y / m } else { F::zero() } - (r + y) / rpm;
            // ∂/∂r = ψ(y+r) - ψ(r) + log(r/(r+m)) + 1 - (r+y)/(r+m) = ... + (m - y)/(r+m)
            let dr = nb_digamma_diff(y, r) - (m / r).ln_1p() + (m - y) / rpm;
            EntryEval { value, dmean, dlog_aux: r * dr }
        }
        LikelihoodFamily::Gaussian => {
            let resid = y - mean;
            let two_pi = F::of(2.0 * std::f64::consts::PI);
            let half = F::of(0.5);
            let value = -half * (two_pi * aux).ln() - half * resid * resid / aux;
            EntryEval { value, dmean: resid / aux, dlog_aux: -half + half * resid * resid / aux }
        }
    }
}

/// Size factors `ν_i = total_i / median(total)`.
pub fn size_factors<F: Scalar>(y: ArrayView2<'_, F>) -> Result<Array1<F>> {
    let totals: Vec<F> = y.rows().into_iter().map(|r| r.sum()).collect();
    if totals.is_empty() {
        return Err(NsfError::Argument("no observations".into()));
    }
    if let Some(i) = totals.iter().position(|&t| !(t > F::zero())) {
        return Err(NsfError::DegenerateObservation { index: i, reason: "total count is zero".into() });
    }
    let med = median(&totals);
    Ok(Array1::from_iter(totals.iter().map(|&t| t / med)))
}

pub(crate) fn median<F: Scalar>(values: &[F]) -> F {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) * F::of(0.5)
    }
}

/// `2 Σ [y log(y/μ̂) - (y - μ̂)]` with `0 log 0 = 0`.
pub fn poisson_deviance<F: Scalar>(y: ArrayView2<'_, F>, mhat: ArrayView2<'_, F>) -> Result<F> {
    if y.dim() != mhat.dim() {
        return Err(NsfError::Shape(format!("counts {:?} vs predictions {:?}", y.dim(), mhat.dim())));
    }
    let mut total = F::zero();
    for (&yy, &mu) in y.iter().zip(mhat.iter()) {
        if !(mu > F::zero()) || !mu.is_finite() {
            return Err(NsfError::Argument(format!("predicted mean must be positive, got {mu}")));
        }
        let term = if yy > F::zero() { yy * (yy / mu).ln() } else { F::zero() };
        total += term - (yy - mu);
    }
    Ok((F::of(2.0) * total).max(F::zero()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn poisson_values() {
        let spec = LikelihoodSpec::<f64>::poisson();
        assert_eq!(log_lik(&spec, 0.0, 1.0, 0).unwrap(), -1.0);
        // 2·log2 − 2 − log2 (mpmath, 30 digits)
        assert_relative_eq!(log_lik(&spec, 2.0, 2.0, 0).unwrap(), -1.306_852_819_440_054_7, max_relative = 1e-14);
        assert!(log_lik(&spec, -1.0, 1.0, 0).is_err());
        assert!(log_lik(&spec, 1.5, 1.0, 0).is_err());
        assert!(log_lik(&spec, 1.0, 0.0, 0).is_err());
    }

    #[test]
    fn gaussian_zero_residual() {
        let spec = LikelihoodSpec::new(LikelihoodFamily::Gaussian, array![1.0]).unwrap();
        assert_relative_eq!(log_lik(&spec, 0.3, 0.3, 0).unwrap(), -0.918_938_533_204_672_7, max_relative = 1e-14);
    }

    #[test]
    fn negative_binomial_approaches_poisson() {
        let nb = LikelihoodSpec::new(LikelihoodFamily::NegativeBinomial, array![1e6]).unwrap();
        let poi = LikelihoodSpec::<f64>::poisson();
        for &(y, m) in &[(0.0, 1.0), (2.0, 2.0), (7.0, 3.5), (30.0, 25.0)] {
            let d = (log_lik(&nb, y, m, 0).unwrap() - log_lik(&poi, y, m, 0).unwrap()).abs();
            assert!(d < 1e-4, "y={y} m={m} diff={d}");
        }
    }

    #[test]
    fn negative_binomial_matches_statrs_pmf() {
        // statrs parameterizes by (r, p) with mean r(1-p)/p.
        use statrs::distribution::{Discrete, NegativeBinomial};
        let (r, m) = (3.5_f64, 4.2_f64);
        let p = r / (r + m);
        let dist = NegativeBinomial::new(r, p).unwrap();
        let spec = LikelihoodSpec::new(LikelihoodFamily::NegativeBinomial, array![r]).unwrap();
        for y in 0..15u64 {
            assert_relative_eq!(log_lik(&spec, y as f64, m, 0).unwrap(), dist.ln_pmf(y), max_relative = 1e-10);
        }
    }

    #[test]
    fn entry_derivatives_match_finite_differences() {
        let h = 1e-6;
        for family in [LikelihoodFamily::Poisson, LikelihoodFamily::NegativeBinomial, LikelihoodFamily::Gaussian] {
            for &(y, m, a) in &[(0.0, 1.3, 2.0), (3.0, 1.7, 0.8), (12.0, 9.0, 5.0)] {
                let lf = log_factorial(y);
                let f = |m: f64, a: f64| entry(family, y, m, a, lf, nb_constants(y, a)).value;
                let e = entry(family, y, m, a, lf, nb_constants(y, a));
                let fd_m = (f(m + h, a) - f(m - h, a)) / (2.0 * h);
                assert!((fd_m - e.dmean).abs() < 1e-6, "{family:?} dmean");
                if family.has_aux() {
                    let fd_a = (f(m, a * h.exp()) - f(m, a * (-h).exp())) / (2.0 * h);
                    assert!((fd_a - e.dlog_aux).abs() < 1e-6, "{family:?} daux {fd_a} vs {}", e.dlog_aux);
                }
            }
        }
    }

    #[test]
    fn size_factor_rule() {
        let y = array![[4.0, 6.0], [10.0, 10.0], [15.0, 15.0]];
        assert_eq!(size_factors(y.view()).unwrap(), array![0.5, 1.0, 1.5]);
        let same = array![[1.0, 2.0], [2.0, 1.0]];
        assert_eq!(size_factors(same.view()).unwrap(), array![1.0, 1.0]);
        assert_eq!(size_factors(array![[3.0, 0.0]].view()).unwrap(), array![1.0]);
        let zero = array![[1.0, 1.0], [0.0, 0.0]];
        assert!(matches!(size_factors(zero.view()), Err(NsfError::DegenerateObservation { index: 1, .. })));
    }

    #[test]
    fn deviance_values() {
        let y = array![[2.0, 3.0], [5.0, 1.0]];
        assert_eq!(poisson_deviance(y.view(), y.view()).unwrap(), 0.0);
        let d = poisson_deviance(array![[2.0]].view(), array![[1.0]].view()).unwrap();
        assert_relative_eq!(d, 0.772_588_722_239_781_2, max_relative = 1e-14);
        assert!(poisson_deviance(array![[2.0]].view(), array![[0.0]].view()).is_err());
    }

    #[test]
    fn poisson_loglik_maximized_at_weighted_mean() {
        // Σ_i ζ(y_i | ν_i λ) over a scalar rate λ peaks at Σy / Σν.
        let y = [3.0, 0.0, 7.0, 2.0];
        let nu = [0.5, 1.0, 2.0, 0.8];
        let spec = LikelihoodSpec::<f64>::poisson();
        let total = |lam: f64| -> f64 { y.iter().zip(nu).map(|(&yy, v)| log_lik(&spec, yy, v * lam, 0).unwrap()).sum() };
        let best = (1..2000).map(|k| k as f64 * 0.005).max_by(|a, b| total(*a).partial_cmp(&total(*b)).unwrap()).unwrap();
        let mle = y.iter().sum::<f64>() / nu.iter().sum::<f64>();
        assert!((best - mle).abs() <= 0.005);
    }

    fn counts(n: usize, j: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(0u32..30, n * j)
            .prop_map(move |v| Array2::from_shape_vec((n, j), v.into_iter().map(f64::from).collect()).unwrap())
    }

    proptest! {
        #[test]
        fn deviance_is_twice_loglik_gap(y in counts(4, 3), m in proptest::collection::vec(0.05..40.0f64, 12)) {
            let mhat = Array2::from_shape_vec((4, 3), m).unwrap();
            let spec = LikelihoodSpec::<f64>::poisson();
            let mut gap = 0.0;
            for (&yy, &mu) in y.iter().zip(mhat.iter()) {
                let sat = if yy > 0.0 { log_lik(&spec, yy, yy, 0).unwrap() } else { 0.0 };
                gap += sat - log_lik(&spec, yy, mu, 0).unwrap();
            }
            let dev = poisson_deviance(y.view(), mhat.view()).unwrap();
            prop_assert!(dev >= 0.0);
            prop_assert!((dev - 2.0 * gap).abs() <= 1e-10 * dev.abs().max(1.0));
        }

        #[test]
        fn size_factors_ignore_column_order(y in counts(5, 4).prop_filter("positive rows", |y| y.rows().into_iter().all(|r| r.sum() > 0.0))) {
            let mut rev = y.clone();
            rev.invert_axis(ndarray::Axis(1));
            prop_assert_eq!(size_factors(y.view()).unwrap(), size_factors(rev.view()).unwrap());
        }
    }
}
