//! Sparse variational Gaussian process for one spatial component.
//!
//! `q(u) = N(δ, Ω)` over the function values at fixed inducing locations `Z`
//! with `Ω = L_Ω L_Ωᵀ`. Only the marginals of `q(f)` at query points are ever
//! formed. With `L = chol(K_uu)`, `A = L⁻¹ K_uf`, `S = L⁻¹ L_Ω`,
//! `d̃ = L⁻¹(δ - μ(Z))` and `C = Sᵀ A`:
//!
//! ```text
//! mean_i = μ(x_i) + A_iᵀ d̃
//! var_i  = k(x_i, x_i) - |A_i|² + |C_i|²
//! KL     = ½ [log|K_uu| - log|Ω| - M + |S|²_F + |d̃|²]
//! ```
//!
//! [`forward`] / [`backward`] evaluate these and their reverse-mode adjoints.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};

use crate::cluster::{self, KMeansConfig};
use crate::error::{NsfError, Result};
use crate::kernels::{self, KernelParams};
use crate::linalg;
use crate::rng;
use crate::scalar::Scalar;

/// Variational state of one spatial component.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialComponentState<F> {
    /// Inducing locations (M×D), fixed after initialization.
    pub z: Array2<F>,
    /// Variational mean δ of the inducing values.
    pub delta: Array1<F>,
    /// Lower Cholesky factor of the variational covariance Ω.
    pub omega_chol: Array2<F>,
    /// Intercept of the linear prior mean function.
    pub beta0: F,
    /// Slopes of the linear prior mean function (length D).
    pub beta1: Array1<F>,
    pub kernel: KernelParams<F>,
}

impl<F: Scalar> SpatialComponentState<F> {
    pub fn num_inducing(&self) -> usize {
        self.z.nrows()
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_inducing();
        if self.delta.len() != m || self.omega_chol.dim() != (m, m) {
            return Err(NsfError::Shape(format!(
                "component with {m} inducing points has delta {} and omega {:?}",
                self.delta.len(),
                self.omega_chol.dim()
            )));
        }
        if self.beta1.len() != self.dim() {
            return Err(NsfError::Shape(format!("beta1 has {} entries for D={}", self.beta1.len(), self.dim())));
        }
        for i in 0..m {
            if !(self.omega_chol[[i, i]] > F::zero()) {
                return Err(NsfError::ParameterDomain(format!("omega factor diagonal {i} is not positive")));
            }
            if (i + 1..m).any(|j| self.omega_chol[[i, j]] != F::zero()) {
                return Err(NsfError::ParameterDomain("omega factor is not lower triangular".into()));
            }
        }
        self.kernel.validate()
    }

    /// Linear prior mean `β0 + x β1` at each row of `x`.
    pub fn prior_mean(&self, x: ArrayView2<'_, F>) -> Array1<F> {
        x.dot(&self.beta1).mapv(|v| v + self.beta0)
    }

    /// Sets `δ = μ(Z)` and `Ω = K_uu` (with the jitter its factorization needs),
    /// so that `q(u)` equals the prior.
    pub fn set_to_prior(&mut self) -> Result<()> {
        let kzz = kernels::gram(&self.kernel, self.z.view())?;
        let chol = kernels::chol_with_jitter(kzz.view())?;
        self.omega_chol = chol.lower;
        self.delta = self.prior_mean(self.z.view());
        Ok(())
    }
}

/// Marginals of `q(f)` at a set of query points.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPosterior<F> {
    pub mean: Array1<F>,
    /// Diagonal variances, clamped at zero from below.
    pub variance: Array1<F>,
}

/// Inducing locations: `X` itself when `M = N`, otherwise k-means centroids.
pub fn choose_inducing_points<F: Scalar>(x: ArrayView2<'_, F>, m: usize, seed: u64) -> Result<Array2<F>> {
    let n = x.nrows();
    if m < 1 || m > n {
        return Err(NsfError::Argument(format!("need 1 <= M <= N, got M={m}, N={n}")));
    }
    if m == n {
        return Ok(x.to_owned());
    }
    if m == 1 {
        return Ok(cluster::centroid(x).insert_axis(Axis(0)));
    }
    Ok(cluster::kmeans(x, m, seed, KMeansConfig::default()).centroids)
}

enum Mode<F> {
    /// Query points differ from the inducing set.
    General { kzx: Array2<F>, a: Array2<F>, c: Array2<F> },
    /// Query points are exactly the inducing points and `K_uu` needed no
    /// jitter, so `α = I`, `mean = δ` and `var = diag Ω`.
    Interpolating,
}

pub(crate) struct SpatialForward<F> {
    pub mean: Array1<F>,
    pub var: Array1<F>,
    pub kl: F,
    lk: Array2<F>,
    kzz: Array2<F>,
    d_tilde: Array1<F>,
    s: Array2<F>,
    mode: Mode<F>,
}

/// Adjoints with respect to the natural component parameters.
#[derive(Debug, Clone)]
pub(crate) struct SpatialGrad<F> {
    pub log_amplitude: F,
    pub log_lengthscale: F,
    pub beta0: F,
    pub beta1: Array1<F>,
    pub delta: Array1<F>,
    /// Adjoint of the lower-triangular factor entries (upper triangle zero).
    pub omega_chol: Array2<F>,
}

fn same_points<F: Scalar>(a: ArrayView2<'_, F>, b: ArrayView2<'_, F>) -> bool {
    a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x == y)
}

fn col_sq_norms<F: Scalar>(m: &Array2<F>) -> Array1<F> {
    m.map_axis(Axis(0), |c| c.dot(&c))
}

pub(crate) fn forward<F: Scalar>(state: &SpatialComponentState<F>, xb: ArrayView2<'_, F>) -> Result<SpatialForward<F>> {
    if xb.ncols() != state.dim() {
        return Err(NsfError::Shape(format!("query dimension {} vs inducing dimension {}", xb.ncols(), state.dim())));
    }
    let m = state.num_inducing();
    let kernel = &state.kernel;
    let mut kzz = kernels::gram(kernel, state.z.view())?;
    let chol = kernels::chol_with_jitter(kzz.view())?;
    let jitter = chol.jitter;
    kzz.diag_mut().mapv_inplace(|v| v + jitter);
    let lk = chol.lower;

    let d = &state.delta - &state.prior_mean(state.z.view());
    let d_tilde = linalg::solve_lower_vec(lk.view(), d.view());
    let s = linalg::solve_lower_tri_rhs(lk.view(), state.omega_chol.view());
    let half = F::of(0.5);
    let kl = half
        * (linalg::chol_logdet(lk.view()) - linalg::chol_logdet(state.omega_chol.view()) - F::of_usize(m)
            + s.iter().map(|&v| v * v).sum::<F>()
            + d_tilde.dot(&d_tilde));

    if jitter == F::zero() && same_points(xb, state.z.view()) {
        let mean = state.delta.clone();
        let var = col_sq_norms(&state.omega_chol.t().to_owned());
        return Ok(SpatialForward { mean, var, kl, lk, kzz, d_tilde, s, mode: Mode::Interpolating });
    }

    let kzx = kernels::cross_cov(kernel, state.z.view(), xb)?;
    let a = linalg::solve_lower(lk.view(), kzx.view());
    let c = s.t().dot(&a);
    let mean = state.prior_mean(xb) + a.t().dot(&d_tilde);
    let prior_var = kernel.variance();
    let var = Zip::from(&col_sq_norms(&a))
        .and(&col_sq_norms(&c))
        .map_collect(|&aa, &cc| (prior_var - aa + cc).max(F::zero()));
    Ok(SpatialForward { mean, var, kl, lk, kzz, d_tilde, s, mode: Mode::General { kzx, a, c } })
}

/// Adjoints of `Σ gmean·mean + Σ gvar·var + kl_coef·KL`.
pub(crate) fn backward<F: Scalar>(
    state: &SpatialComponentState<F>,
    xb: ArrayView2<'_, F>,
    fwd: &SpatialForward<F>,
    gmean: ArrayView1<'_, F>,
    gvar: ArrayView1<'_, F>,
    kl_coef: F,
) -> Result<SpatialGrad<F>> {
    let m = state.num_inducing();
    let lk = fwd.lk.view();
    let lw = &state.omega_chol;
    let s = &fwd.s;
    let dt = &fwd.d_tilde;
    let half = F::of(0.5);
    let two = F::of(2.0);
    match &fwd.mode {
        Mode::Interpolating => {
            // KL adjoints only touch K_uu; the likelihood sees δ and diag Ω directly.
            let u = linalg::solve_lower_t(lk, s.view());
            let e = linalg::solve_lower_t_vec(lk, dt.view());
            let mut g_lw = Array2::zeros((m, m));
            for i in 0..m {
                for j in 0..=i {
                    g_lw[[i, j]] = two * gvar[i] * lw[[i, j]] + kl_coef * u[[i, j]];
                }
                g_lw[[i, i]] -= kl_coef / lw[[i, i]];
            }
            let delta = gmean.to_owned() + &e.mapv(|v| kl_coef * v);
            let beta0 = -kl_coef * e.sum();
            let beta1 = state.z.t().dot(&e).mapv(|v| -kl_coef * v);
            let s_sq: F = s.iter().map(|&v| v * v).sum();
            let log_amplitude = kl_coef * (F::of_usize(m) - s_sq - dt.dot(dt));
            // ∂KL/∂K = ½ (K⁻¹ - K⁻¹ΩK⁻¹ - K⁻¹ddᵀK⁻¹)
            let v = linalg::inv_lower(lk);
            let mut p = v.t().dot(&v);
            p -= &u.dot(&u.t());
            for i in 0..m {
                for j in 0..m {
                    p[[i, j]] -= e[i] * e[j];
                }
            }
            let dzz = kernels::cross_cov_dlog_lengthscale(&state.kernel, state.z.view(), state.z.view())?;
            let log_lengthscale = kl_coef * half * (&p * &dzz).sum();
            Ok(SpatialGrad { log_amplitude, log_lengthscale, beta0, beta1, delta, omega_chol: g_lw })
        }
        Mode::General { kzx, a, c } => {
            let b = a.ncols();
            let mut c_bar = c.clone();
            for (mut col, &g) in c_bar.axis_iter_mut(Axis(1)).zip(gvar.iter()) {
                col.mapv_inplace(|v| two * g * v);
            }
            // Ā = -2 A diag(gv) + d̃ gmᵀ + S C̄
            let mut a_bar = s.dot(&c_bar);
            for i in 0..b {
                let (gv, gm) = (gvar[i], gmean[i]);
                let mut col = a_bar.column_mut(i);
                col.scaled_add(-two * gv, &a.column(i));
                col.scaled_add(gm, dt);
            }
            // S̄ = A C̄ᵀ + κ S  (only the lower triangle matters)
            let mut s_bar = a.dot(&c_bar.t());
            s_bar.scaled_add(kl_coef, s);
            linalg::tril_inplace(&mut s_bar);
            let dt_bar = a.dot(&gmean) + &dt.mapv(|v| kl_coef * v);

            let mut lk_bar = Array2::<F>::zeros((m, m));
            for i in 0..m {
                lk_bar[[i, i]] = kl_coef / fwd.lk[[i, i]];
            }
            // S = L⁻¹ L_Ω
            let b_bar = linalg::solve_lower_t(lk, s_bar.view());
            let mut g_lw = b_bar.clone();
            linalg::tril_inplace(&mut g_lw);
            for i in 0..m {
                g_lw[[i, i]] -= kl_coef / lw[[i, i]];
            }
            lk_bar -= &b_bar.dot(&s.t());
            // A = L⁻¹ K_uf
            let kzx_bar = linalg::solve_lower_t(lk, a_bar.view());
            lk_bar -= &kzx_bar.dot(&a.t());
            // d̃ = L⁻¹ d
            let d_bar = linalg::solve_lower_t_vec(lk, dt_bar.view());
            for i in 0..m {
                for j in 0..=i {
                    lk_bar[[i, j]] -= d_bar[i] * dt[j];
                }
            }
            let kzz_bar = linalg::chol_backward(lk, lk_bar.view());

            let var_sum: F = gvar.sum();
            let log_amplitude = two
                * ((&kzz_bar * &fwd.kzz).sum() + (&kzx_bar * kzx).sum() + state.kernel.variance() * var_sum);
            let dzz = kernels::cross_cov_dlog_lengthscale(&state.kernel, state.z.view(), state.z.view())?;
            let dzx = kernels::cross_cov_dlog_lengthscale(&state.kernel, state.z.view(), xb)?;
            let log_lengthscale = (&kzz_bar * &dzz).sum() + (&kzx_bar * &dzx).sum();
            let delta = d_bar.clone();
            let beta0 = gmean.sum() - d_bar.sum();
            let beta1 = xb.t().dot(&gmean) - state.z.t().dot(&d_bar);
            Ok(SpatialGrad { log_amplitude, log_lengthscale, beta0, beta1, delta, omega_chol: g_lw })
        }
    }
}

/// Marginal means and variances of `q(f)` at `xb`.
pub fn marginal_posterior<F: Scalar>(state: &SpatialComponentState<F>, xb: ArrayView2<'_, F>) -> Result<MarginalPosterior<F>> {
    state.validate()?;
    let fwd = forward(state, xb)?;
    Ok(MarginalPosterior { mean: fwd.mean, variance: fwd.var })
}

/// `KL(q(u) || p(u))` in closed form.
pub fn kl_inducing<F: Scalar>(state: &SpatialComponentState<F>) -> Result<F> {
    state.validate()?;
    let m = state.num_inducing();
    let kzz = kernels::gram(&state.kernel, state.z.view())?;
    let lk = kernels::chol_with_jitter(kzz.view())?.lower;
    let d = &state.delta - &state.prior_mean(state.z.view());
    let dt = linalg::solve_lower_vec(lk.view(), d.view());
    let s = linalg::solve_lower_tri_rhs(lk.view(), state.omega_chol.view());
    let kl = F::of(0.5)
        * (linalg::chol_logdet(lk.view()) - linalg::chol_logdet(state.omega_chol.view()) - F::of_usize(m)
            + s.iter().map(|&v| v * v).sum::<F>()
            + dt.dot(&dt));
    Ok(kl.max(F::zero()))
}

/// `S` reparameterized draws `mean + √var · ε` (rows are draws). The noise for
/// column `i` comes from observation stream `i` of `seed`.
pub fn sample_factor<F: Scalar>(post: &MarginalPosterior<F>, samples: usize, seed: u64) -> Result<Array2<F>> {
    if samples < 1 {
        return Err(NsfError::Argument("need at least one sample".into()));
    }
    if post.mean.len() != post.variance.len() {
        return Err(NsfError::Shape("mean and variance lengths differ".into()));
    }
    let n = post.mean.len();
    let mut out = Array2::zeros((samples, n));
    for i in 0..n {
        let mut r = rng::observation_stream(seed, i);
        let sd = post.variance[i].max(F::zero()).sqrt();
        for s in 0..samples {
            let eps: f64 = StandardNormal.sample(&mut r);
            out[[s, i]] = post.mean[i] + sd * F::of(eps);
        }
    }
    Ok(out)
}
