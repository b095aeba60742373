//! The five factor models as one parametric family.
//!
//! With `E = exp` for nonnegative models and the identity otherwise, the
//! mean of `y_ij` is `ν_i λ_ij` (count likelihoods) or `λ_ij` (Gaussian) with
//!
//! ```text
//! λ_ij = Σ_{l<T} w_jl E(f_il) + Σ_{l≥T} v_jl E(h_il)
//! ```
//!
//! where `f` are GP-distributed spatial factors and `h` are mean-field
//! nonspatial factors.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NsfError, Result};
use crate::kernels::KernelKind;
use crate::likelihoods::{self, LikelihoodFamily, LikelihoodSpec};
use crate::rng;
use crate::scalar::Scalar;
use crate::svgp::{self, SpatialComponentState, SpatialForward, SpatialGrad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Fa,
    Pnmf,
    Rsf,
    Nsf,
    Nsfh,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Fa => "fa",
            Self::Pnmf => "pnmf",
            Self::Rsf => "rsf",
            Self::Nsf => "nsf",
            Self::Nsfh => "nsfh",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = NsfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fa" => Ok(Self::Fa),
            "pnmf" => Ok(Self::Pnmf),
            "rsf" => Ok(Self::Rsf),
            "nsf" => Ok(Self::Nsf),
            "nsfh" => Ok(Self::Nsfh),
            other => Err(NsfError::Argument(format!("unknown model '{other}'"))),
        }
    }
}

/// Structural description of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Total number of components `L`.
    pub num_components: usize,
    /// Number of spatial components `T`.
    pub num_spatial: usize,
    pub nonnegative: bool,
    pub likelihood: LikelihoodFamily,
    pub kernel: KernelKind,
    /// Inducing points per spatial component; `None` uses every observation.
    pub num_inducing: Option<usize>,
    /// Monte Carlo samples per factor in the ELBO.
    pub samples: usize,
}

impl ModelSpec {
    /// Defaults for `kind`: `T = L/2` for the hybrid, Poisson likelihood for
    /// nonnegative models, Gaussian for real-valued ones, Matérn-3/2, `S = 3`.
    pub fn new(kind: ModelKind, num_components: usize) -> Self {
        let (num_spatial, nonnegative) = match kind {
            ModelKind::Fa => (0, false),
            ModelKind::Pnmf => (0, true),
            ModelKind::Rsf => (num_components, false),
            ModelKind::Nsf => (num_components, true),
            ModelKind::Nsfh => (num_components / 2, true),
        };
        Self {
            num_components,
            num_spatial,
            nonnegative,
            likelihood: if nonnegative { LikelihoodFamily::Poisson } else { LikelihoodFamily::Gaussian },
            kernel: KernelKind::Matern32,
            num_inducing: None,
            samples: 3,
        }
    }

    pub fn kind(&self) -> ModelKind {
        let (l, t) = (self.num_components, self.num_spatial);
        match (self.nonnegative, t) {
            (false, 0) => ModelKind::Fa,
            (false, _) => ModelKind::Rsf,
            (true, 0) => ModelKind::Pnmf,
            (true, t) if t == l => ModelKind::Nsf,
            (true, _) => ModelKind::Nsfh,
        }
    }

    pub fn num_nonspatial(&self) -> usize {
        self.num_components - self.num_spatial
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_components == 0 {
            return Err(NsfError::Argument("need at least one component".into()));
        }
        if self.num_spatial > self.num_components {
            return Err(NsfError::Argument(format!(
                "T={} exceeds L={}",
                self.num_spatial, self.num_components
            )));
        }
        if !self.nonnegative && self.num_spatial != 0 && self.num_spatial != self.num_components {
            return Err(NsfError::UnsupportedModel("real-valued hybrid models are not supported".into()));
        }
        if self.nonnegative != self.likelihood.is_count() {
            return Err(NsfError::UnsupportedModel(if self.nonnegative {
                "nonnegative models need a count likelihood".into()
            } else {
                "real-valued factors cannot parameterize a count likelihood mean".into()
            }));
        }
        if self.samples == 0 {
            return Err(NsfError::Argument("need at least one Monte Carlo sample".into()));
        }
        if self.num_inducing == Some(0) {
            return Err(NsfError::Argument("need at least one inducing point".into()));
        }
        Ok(())
    }
}

/// Mean-field posterior over the nonspatial factors.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldComponentState<F> {
    /// Variational means δ (N × (L−T)).
    pub delta: Array2<F>,
    /// Variational variances ω (N × (L−T)).
    pub omega: Array2<F>,
    /// Prior means m_l.
    pub prior_mean: Array1<F>,
    /// Prior variances s_l².
    pub prior_var: Array1<F>,
}

impl<F: Scalar> MeanFieldComponentState<F> {
    pub fn num_components(&self) -> usize {
        self.delta.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.delta.ncols();
        if self.omega.dim() != self.delta.dim() || self.prior_mean.len() != k || self.prior_var.len() != k {
            return Err(NsfError::Shape("inconsistent mean-field state".into()));
        }
        if self.omega.iter().chain(self.prior_var.iter()).any(|&v| !(v > F::zero()) || !v.is_finite()) {
            return Err(NsfError::ParameterDomain("mean-field variances must be positive".into()));
        }
        Ok(())
    }
}

/// `KL(N(δ_il, ω_il) || N(m_l, s_l²))`.
pub fn kl_meanfield<F: Scalar>(state: &MeanFieldComponentState<F>, i: usize, l: usize) -> Result<F> {
    state.validate()?;
    if i >= state.delta.nrows() || l >= state.delta.ncols() {
        return Err(NsfError::Argument(format!("no mean-field entry ({i}, {l})")));
    }
    Ok(kl_mf_entry(state.delta[[i, l]], state.omega[[i, l]], state.prior_mean[l], state.prior_var[l]).max(F::zero()))
}

#[inline]
fn kl_mf_entry<F: Scalar>(delta: F, omega: F, m: F, s2: F) -> F {
    let d = delta - m;
    F::of(0.5) * ((s2 / omega).ln() - F::one() + omega / s2 + d * d / s2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel<F> {
    pub spec: ModelSpec,
    /// Spatial loadings W (J × T).
    pub spatial_loadings: Array2<F>,
    /// Nonspatial loadings V (J × (L−T)).
    pub nonspatial_loadings: Array2<F>,
    pub spatial: Vec<SpatialComponentState<F>>,
    pub meanfield: Option<MeanFieldComponentState<F>>,
    pub likelihood: LikelihoodSpec<F>,
    /// Training coordinates (N × D).
    pub x_train: Array2<F>,
    /// Training size factors (all ones for the Gaussian likelihood).
    pub nu_train: Array1<F>,
}

impl<F: Scalar> FactorModel<F> {
    pub fn num_observations(&self) -> usize {
        self.x_train.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.spatial_loadings.nrows()
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind()
    }

    /// `[W V]` (J × L).
    pub fn loadings(&self) -> Array2<F> {
        concatenate(Axis(1), &[self.spatial_loadings.view(), self.nonspatial_loadings.view()])
            .expect("loadings blocks share a row count")
    }

    /// Fraction of exactly-zero loadings.
    pub fn loadings_sparsity(&self) -> F {
        let b = self.loadings();
        if b.is_empty() {
            return F::zero();
        }
        F::of_usize(b.iter().filter(|&&v| v == F::zero()).count()) / F::of_usize(b.len())
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let (t, k) = (self.spec.num_spatial, self.spec.num_nonspatial());
        let (n, j) = (self.num_observations(), self.num_features());
        if self.spatial_loadings.ncols() != t
            || self.nonspatial_loadings.dim() != (j, k)
            || self.spatial.len() != t
            || self.nu_train.len() != n
        {
            return Err(NsfError::Shape("model blocks disagree with the model spec".into()));
        }
        match &self.meanfield {
            Some(mf) if k > 0 => {
                mf.validate()?;
                if mf.delta.dim() != (n, k) {
                    return Err(NsfError::Shape("mean-field block has the wrong shape".into()));
                }
            }
            None if k == 0 => {}
            _ => return Err(NsfError::Shape("mean-field block presence disagrees with T < L".into())),
        }
        for c in &self.spatial {
            c.validate()?;
            if c.dim() != self.x_train.ncols() {
                return Err(NsfError::Shape("inducing points and coordinates differ in dimension".into()));
            }
        }
        if self.spec.nonnegative
            && self.loadings().iter().any(|&v| v < F::zero())
        {
            return Err(NsfError::ParameterDomain("nonnegative model has negative loadings".into()));
        }
        if self.likelihood.family != self.spec.likelihood {
            return Err(NsfError::Argument("likelihood parameters do not match the model spec".into()));
        }
        if self.likelihood.family.has_aux() && self.likelihood.aux.len() != j {
            return Err(NsfError::Shape("need one auxiliary parameter per feature".into()));
        }
        self.likelihood.validate()
    }
}

/// Where to evaluate the model.
#[derive(Debug, Clone, Copy)]
pub enum Query<'a, F> {
    /// The training observations (nonspatial factors use their variational means).
    Training,
    /// New locations with their size factors.
    Coordinates { x: ArrayView2<'a, F>, nu: ArrayView1<'a, F> },
}

/// How a factor's posterior is collapsed to a point.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointEstimate {
    /// `exp(μ)`.
    #[default]
    Geometric,
    /// `exp(μ + σ²/2)`.
    Lognormal,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PredictOptions {
    pub point: PointEstimate,
    /// Let models without spatial components predict at new locations from
    /// the nonspatial prior means alone.
    pub allow_prior_only: bool,
}

/// Point estimates of `E(f)` and `E(h)` (N × L, spatial columns first).
pub fn factor_point_estimates<'a, F: Scalar>(model: &'a FactorModel<F>, query: Query<'a, F>, opts: PredictOptions) -> Result<Array2<F>> {
    model.validate()?;
    let (t, l) = (model.spec.num_spatial, model.spec.num_components);
    let x = match query {
        Query::Training => model.x_train.view(),
        Query::Coordinates { x, nu } => {
            if t == 0 && !opts.allow_prior_only {
                return Err(NsfError::UnsupportedModel(format!(
                    "{} has no spatial components and cannot predict at new locations",
                    model.kind()
                )));
            }
            if x.nrows() != nu.len() {
                return Err(NsfError::Shape("coordinates and size factors differ in length".into()));
            }
            x
        }
    };
    let n = x.nrows();
    let mut means = Array2::zeros((n, l));
    let mut vars = Array2::zeros((n, l));
    let posts: Vec<Result<svgp::MarginalPosterior<F>>> =
        model.spatial.par_iter().map(|c| svgp::marginal_posterior(c, x)).collect();
    for (c, post) in posts.into_iter().enumerate() {
        let post = post?;
        means.column_mut(c).assign(&post.mean);
        vars.column_mut(c).assign(&post.variance);
    }
    if let Some(mf) = &model.meanfield {
        match query {
            Query::Training => {
                means.slice_mut(s![.., t..]).assign(&mf.delta);
                vars.slice_mut(s![.., t..]).assign(&mf.omega);
            }
            Query::Coordinates { .. } => {
                for k in 0..mf.num_components() {
                    means.column_mut(t + k).fill(mf.prior_mean[k]);
                    vars.column_mut(t + k).fill(mf.prior_var[k]);
                }
            }
        }
    }
    if model.spec.nonnegative {
        let half = F::of(0.5);
        Zip::from(&mut means).and(&vars).for_each(|m, &v| {
            *m = match opts.point {
                PointEstimate::Geometric => m.exp(),
                PointEstimate::Lognormal => (*m + half * v).exp(),
            }
        });
    }
    Ok(means)
}

/// Predicted means `ν_i λ_ij` (count likelihoods) or `λ_ij` (Gaussian).
pub fn predict_mean<'a, F: Scalar>(model: &'a FactorModel<F>, query: Query<'a, F>) -> Result<Array2<F>> {
    predict_mean_with(model, query, PredictOptions::default())
}

pub fn predict_mean_with<'a, F: Scalar>(model: &'a FactorModel<F>, query: Query<'a, F>, opts: PredictOptions) -> Result<Array2<F>> {
    let e = factor_point_estimates(model, query, opts)?;
    let mut lambda = e.dot(&model.loadings().t());
    if model.likelihood.family.is_count() {
        let nu = match query {
            Query::Training => model.nu_train.view(),
            Query::Coordinates { nu, .. } => nu,
        };
        for (mut row, &v) in lambda.rows_mut().into_iter().zip(nu.iter()) {
            row.mapv_inplace(|x| x * v);
        }
    }
    Ok(lambda)
}

/// Training outcomes with the per-entry constants the likelihood needs.
#[derive(Debug, Clone)]
pub struct Observations<F> {
    pub y: Array2<F>,
    lfact: Array2<F>,
}

impl<F: Scalar> Observations<F> {
    pub fn new(y: Array2<F>, family: LikelihoodFamily) -> Result<Self> {
        if family.is_count() {
            if let Some((idx, &bad)) = y
                .indexed_iter()
                .find(|(_, &v)| v < F::zero() || v.fract() != F::zero() || !v.is_finite())
            {
                return Err(NsfError::Argument(format!("entry {idx:?} = {bad} is not a count")));
            }
        } else if y.iter().any(|v| !v.is_finite()) {
            return Err(NsfError::Argument("outcomes must be finite".into()));
        }
        let lfact = if family.is_count() { y.mapv(likelihoods::log_factorial) } else { Array2::zeros(y.dim()) };
        Ok(Self { y, lfact })
    }
}

/// ELBO and its three parts, already scaled to the full data set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms<F> {
    pub value: F,
    pub expected_loglik: F,
    pub kl_inducing: F,
    pub kl_meanfield: F,
}

/// Adjoints of the ELBO with respect to the natural model parameters
/// (log scale for positive quantities).
#[derive(Debug, Clone)]
pub(crate) struct ModelGrad<F> {
    pub spatial: Vec<SpatialGrad<F>>,
    pub spatial_loadings: Array2<F>,
    pub nonspatial_loadings: Array2<F>,
    pub mf_delta: Array2<F>,
    pub mf_log_omega: Array2<F>,
    pub mf_prior_mean: Array1<F>,
    pub mf_log_prior_var: Array1<F>,
    pub log_aux: Array1<F>,
}

/// Monte Carlo ELBO on `batch` with `samples` draws per factor. Noise for
/// observation `i` comes from stream `i` of `seed`, so the estimate for an
/// observation does not depend on how the rows are batched.
pub fn elbo<F: Scalar>(model: &FactorModel<F>, data: &Observations<F>, batch: &[usize], samples: usize, seed: u64) -> Result<F> {
    Ok(elbo_terms(model, data, batch, samples, seed)?.value)
}

pub fn elbo_terms<F: Scalar>(
    model: &FactorModel<F>,
    data: &Observations<F>,
    batch: &[usize],
    samples: usize,
    seed: u64,
) -> Result<ElboTerms<F>> {
    Ok(evaluate(model, data, batch, samples, seed, false)?.0)
}

pub(crate) fn elbo_grad<F: Scalar>(
    model: &FactorModel<F>,
    data: &Observations<F>,
    batch: &[usize],
    samples: usize,
    seed: u64,
) -> Result<(ElboTerms<F>, ModelGrad<F>)> {
    let (terms, grad) = evaluate(model, data, batch, samples, seed, true)?;
    Ok((terms, grad.expect("gradient requested")))
}

/// All row indices.
pub fn full_batch(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn evaluate<F: Scalar>(
    model: &FactorModel<F>,
    data: &Observations<F>,
    batch: &[usize],
    samples: usize,
    seed: u64,
    with_grad: bool,
) -> Result<(ElboTerms<F>, Option<ModelGrad<F>>)> {
    let (n, j) = (model.num_observations(), model.num_features());
    if data.y.dim() != (n, j) {
        return Err(NsfError::Shape(format!("data {:?} vs model ({n}, {j})", data.y.dim())));
    }
    if samples == 0 {
        return Err(NsfError::Argument("need at least one Monte Carlo sample".into()));
    }
    if batch.is_empty() {
        return Err(NsfError::Argument("empty batch".into()));
    }
    if let Some(&bad) = batch.iter().find(|&&i| i >= n) {
        return Err(NsfError::Argument(format!("batch index {bad} out of range for N={n}")));
    }
    let spec = &model.spec;
    let (t, l) = (spec.num_spatial, spec.num_components);
    let nb = batch.len();
    let scale = F::of_usize(n) / F::of_usize(nb);
    let family = model.likelihood.family;
    let is_count = family.is_count();
    let nonneg = spec.nonnegative;

    let xb = model.x_train.select(Axis(0), batch);
    let fwds: Vec<Result<SpatialForward<F>>> = model.spatial.par_iter().map(|c| svgp::forward(c, xb.view())).collect();
    let fwds = fwds.into_iter().collect::<Result<Vec<_>>>()?;

    // Per-row factor means and standard deviations (nb × L).
    let mut mu = Array2::<F>::zeros((nb, l));
    let mut sd = Array2::<F>::zeros((nb, l));
    for (c, f) in fwds.iter().enumerate() {
        mu.column_mut(c).assign(&f.mean);
        sd.column_mut(c).assign(&f.var.mapv(|v| v.max(F::zero()).sqrt()));
    }
    if let Some(mf) = &model.meanfield {
        for (k, &i) in batch.iter().enumerate() {
            for c in 0..mf.num_components() {
                mu[[k, t + c]] = mf.delta[[i, c]];
                sd[[k, t + c]] = mf.omega[[i, c]].sqrt();
            }
        }
    }

    // eps[k, s, l]: stream of observation batch[k], drawn in (s, l) order.
    let mut eps = Array3::<F>::zeros((nb, samples, l));
    eps.axis_iter_mut(Axis(0)).into_par_iter().zip(batch.par_iter()).for_each(|(mut e, &i)| {
        let mut r = rng::observation_stream(seed, i);
        for s in 0..samples {
            for c in 0..l {
                let z: f64 = StandardNormal.sample(&mut r);
                e[[s, c]] = F::of(z);
            }
        }
    });

    let loadings = model.loadings();
    let nu = model.nu_train.select(Axis(0), batch);
    let aux = &model.likelihood.aux;
    let has_aux = family.has_aux();
    let yb = data.y.select(Axis(0), batch);
    let lfb = data.lfact.select(Axis(0), batch);
    let nb_const = if family == LikelihoodFamily::NegativeBinomial {
        let mut c = Array2::zeros((nb, j));
        for (mut row, yrow) in c.rows_mut().into_iter().zip(yb.rows()) {
            for (jj, (v, &y)) in row.iter_mut().zip(yrow.iter()).enumerate() {
                *v = likelihoods::nb_constants(y, aux[jj]);
            }
        }
        c
    } else {
        Array2::zeros((0, 0))
    };

    let coef = scale / F::of_usize(samples);
    let mut loglik = F::zero();
    let mut g_load = Array2::<F>::zeros((j, l));
    let mut g_mu = Array2::<F>::zeros((nb, l));
    let mut g_sd = Array2::<F>::zeros((nb, l));
    let mut g_aux_rows = if with_grad && has_aux { Array2::<F>::zeros((nb, j)) } else { Array2::zeros((0, 0)) };
    for s in 0..samples {
        let eps_s = eps.index_axis(Axis(1), s);
        let raw = &mu + &(&sd * &eps_s);
        let e = if nonneg { raw.mapv(|v| v.exp()) } else { raw };
        let lambda = e.dot(&loadings.t());
        let mut gmean = Array2::<F>::zeros((nb, j));
        let mut row_ll = Array1::<F>::zeros(nb);
        let mut g_aux_s = if with_grad && has_aux { Array2::<F>::zeros((nb, j)) } else { Array2::zeros((nb, 0)) };
        gmean
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(g_aux_s.axis_iter_mut(Axis(0)))
            .zip(row_ll.axis_iter_mut(Axis(0)))
            .enumerate()
            .for_each(|(b, ((mut gm, mut ga), mut ll))| {
                let (lam, y, lf, nu_i) = (lambda.row(b), yb.row(b), lfb.row(b), nu[b]);
                let mut acc = F::zero();
                for jj in 0..j {
                    let mean = if is_count { nu_i * lam[jj] } else { lam[jj] };
                    let (a, c) = if has_aux { (aux[jj], nb_const.get((b, jj)).copied().unwrap_or(F::zero())) } else { (F::zero(), F::zero()) };
                    let ev = likelihoods::entry(family, y[jj], mean, a, lf[jj], c);
                    acc += ev.value;
                    if with_grad {
                        gm[jj] = coef * if is_count { ev.dmean * nu_i } else { ev.dmean };
                        if has_aux {
                            ga[jj] = coef * ev.dlog_aux;
                        }
                    }
                }
                ll.fill(acc);
            });
        loglik += row_ll.sum();
        if with_grad {
            if has_aux {
                g_aux_rows += &g_aux_s;
            }
            g_load += &gmean.t().dot(&e);
            let mut g_e = gmean.dot(&loadings);
            if nonneg {
                g_e *= &e;
            }
            g_mu += &g_e;
            g_sd += &(&g_e * &eps_s);
        }
    }
    let expected_loglik = scale * loglik / F::of_usize(samples);
    let kl_inducing: F = fwds.iter().map(|f| f.kl).sum();
    let mut kl_mf = F::zero();
    if let Some(mf) = &model.meanfield {
        for &i in batch {
            for c in 0..mf.num_components() {
                kl_mf += kl_mf_entry(mf.delta[[i, c]], mf.omega[[i, c]], mf.prior_mean[c], mf.prior_var[c]);
            }
        }
    }
    let kl_meanfield = scale * kl_mf;
    let terms = ElboTerms {
        value: expected_loglik - kl_inducing - kl_meanfield,
        expected_loglik,
        kl_inducing,
        kl_meanfield,
    };
    if !with_grad {
        return Ok((terms, None));
    }

    let half = F::of(0.5);
    let two = F::of(2.0);
    // Reparameterization: f = μ + sd ε, sd = √var.
    let spatial: Vec<Result<SpatialGrad<F>>> = (0..t)
        .into_par_iter()
        .map(|c| {
            let gm = g_mu.column(c);
            let gv = Zip::from(g_sd.column(c)).and(sd.column(c)).map_collect(|&g, &s| {
                if s > F::zero() {
                    g / (two * s)
                } else {
                    F::zero()
                }
            });
            svgp::backward(&model.spatial[c], xb.view(), &fwds[c], gm, gv.view(), -F::one())
        })
        .collect();
    let spatial = spatial.into_iter().collect::<Result<Vec<_>>>()?;

    let k = l - t;
    let mut mf_delta = Array2::zeros((n, k));
    let mut mf_log_omega = Array2::zeros((n, k));
    let mut mf_prior_mean = Array1::zeros(k);
    let mut mf_log_prior_var = Array1::zeros(k);
    if let Some(mf) = &model.meanfield {
        for (b, &i) in batch.iter().enumerate() {
            for c in 0..k {
                let (delta, omega) = (mf.delta[[i, c]], mf.omega[[i, c]]);
                let (m, s2) = (mf.prior_mean[c], mf.prior_var[c]);
                let d = delta - m;
                mf_delta[[i, c]] += g_mu[[b, t + c]] - scale * d / s2;
                mf_log_omega[[i, c]] += g_sd[[b, t + c]] * omega.sqrt() * half - scale * half * (omega / s2 - F::one());
                mf_prior_mean[c] += scale * d / s2;
                mf_log_prior_var[c] -= scale * half * (F::one() - omega / s2 - d * d / s2);
            }
        }
    }
    let log_aux = if has_aux { g_aux_rows.sum_axis(Axis(0)) } else { Array1::zeros(0) };
    let grad = ModelGrad {
        spatial,
        spatial_loadings: g_load.slice(s![.., ..t]).to_owned(),
        nonspatial_loadings: g_load.slice(s![.., t..]).to_owned(),
        mf_delta,
        mf_log_omega,
        mf_prior_mean,
        mf_log_prior_var,
        log_aux,
    };
    Ok((terms, Some(grad)))
}

/// Allocates a model for `spec` with starting values from the
/// initialization module.
pub fn build_model<F: Scalar>(
    spec: &ModelSpec,
    data: ArrayView2<'_, F>,
    x: ArrayView2<'_, F>,
    nu: ArrayView1<'_, F>,
    seed: u64,
) -> Result<FactorModel<F>> {
    crate::init::initialize_model(spec, data, x, nu, seed)
}
