//! Flat unconstrained parameter vector of a [`FactorModel`].
//!
//! Layout, in order:
//! per spatial component `log a, log ℓ, β0, β1, δ, vech(L_Ω)` (diagonal of
//! `L_Ω` through the inverse softplus), then `W` and `V` row-major, then the
//! mean-field `δ`, `log ω`, `m`, `log s²`, then `log aux`.

use serde::{Deserialize, Serialize};

use crate::model::{FactorModel, ModelGrad};
use crate::scalar::Scalar;

/// Parameter groups, used to freeze parts of a model during fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    KernelHyper,
    MeanFunction,
    InducingVariational,
    Loadings,
    MeanFieldVariational,
    MeanFieldPrior,
    LikelihoodAux,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        Self::KernelHyper,
        Self::MeanFunction,
        Self::InducingVariational,
        Self::Loadings,
        Self::MeanFieldVariational,
        Self::MeanFieldPrior,
        Self::LikelihoodAux,
    ];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Set of trainable parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamMask(u8);

impl ParamMask {
    pub fn all() -> Self {
        Self(ParamGroup::ALL.iter().fold(0, |m, g| m | g.bit()))
    }

    pub fn only(groups: &[ParamGroup]) -> Self {
        Self(groups.iter().fold(0, |m, g| m | g.bit()))
    }

    /// `δ, Ω` of the inducing values and the mean-field `δ, ω`.
    pub fn variational() -> Self {
        Self::only(&[ParamGroup::InducingVariational, ParamGroup::MeanFieldVariational])
    }

    pub fn contains(self, g: ParamGroup) -> bool {
        self.0 & g.bit() != 0
    }
}

impl Default for ParamMask {
    fn default() -> Self {
        Self::all()
    }
}

/// Packs the model into its unconstrained vector.
pub fn pack<F: Scalar>(model: &FactorModel<F>) -> Vec<F> {
    let mut out = Vec::new();
    for c in &model.spatial {
        out.push(c.kernel.amplitude.ln());
        out.push(c.kernel.lengthscale.ln());
        out.push(c.beta0);
        out.extend(c.beta1.iter().copied());
        out.extend(c.delta.iter().copied());
        let m = c.num_inducing();
        for i in 0..m {
            for j in 0..i {
                out.push(c.omega_chol[[i, j]]);
            }
            out.push(c.omega_chol[[i, i]].softplus_inv());
        }
    }
    out.extend(model.spatial_loadings.iter().copied());
    out.extend(model.nonspatial_loadings.iter().copied());
    if let Some(mf) = &model.meanfield {
        out.extend(mf.delta.iter().copied());
        out.extend(mf.omega.iter().map(|v| v.ln()));
        out.extend(mf.prior_mean.iter().copied());
        out.extend(mf.prior_var.iter().map(|v| v.ln()));
    }
    out.extend(model.likelihood.aux.iter().map(|v| v.ln()));
    out
}

/// Writes an unconstrained vector back into `model`.
///
/// # Panics
/// If `theta` does not have the length [`pack`] produces for this model.
pub fn unpack<F: Scalar>(model: &mut FactorModel<F>, theta: &[F]) {
    unpack_selected(model, theta, None)
}

/// Like [`unpack`], but entries with `write[k] == false` are left untouched.
pub fn unpack_selected<F: Scalar>(model: &mut FactorModel<F>, theta: &[F], write: Option<&[bool]>) {
    let mut k = 0usize;
    let mut set = |slot: &mut F, map: fn(F) -> F| {
        let v = *theta.get(k).expect("parameter vector is too short");
        if write.map_or(true, |w| w[k]) {
            *slot = map(v);
        }
        k += 1;
    };
    let id: fn(F) -> F = |v| v;
    let exp: fn(F) -> F = |v| v.exp();
    let softplus: fn(F) -> F = |v| v.softplus();
    for c in model.spatial.iter_mut() {
        set(&mut c.kernel.amplitude, exp);
        set(&mut c.kernel.lengthscale, exp);
        set(&mut c.beta0, id);
        c.beta1.iter_mut().for_each(|v| set(v, id));
        c.delta.iter_mut().for_each(|v| set(v, id));
        let m = c.num_inducing();
        for i in 0..m {
            for j in 0..i {
                set(&mut c.omega_chol[[i, j]], id);
            }
            set(&mut c.omega_chol[[i, i]], softplus);
        }
    }
    model.spatial_loadings.iter_mut().for_each(|v| set(v, id));
    model.nonspatial_loadings.iter_mut().for_each(|v| set(v, id));
    if let Some(mf) = model.meanfield.as_mut() {
        mf.delta.iter_mut().for_each(|v| set(v, id));
        mf.omega.iter_mut().for_each(|v| set(v, exp));
        mf.prior_mean.iter_mut().for_each(|v| set(v, id));
        mf.prior_var.iter_mut().for_each(|v| set(v, exp));
    }
    model.likelihood.aux.iter_mut().for_each(|v| set(v, exp));
    assert_eq!(k, theta.len(), "parameter vector is too long");
}

/// Group of every entry of the packed vector.
pub fn groups<F: Scalar>(model: &FactorModel<F>) -> Vec<ParamGroup> {
    use ParamGroup::*;
    let mut out = Vec::new();
    let rep = |out: &mut Vec<ParamGroup>, g, n| out.extend(std::iter::repeat(g).take(n));
    for c in &model.spatial {
        let m = c.num_inducing();
        rep(&mut out, KernelHyper, 2);
        rep(&mut out, MeanFunction, 1 + c.dim());
        rep(&mut out, InducingVariational, m + m * (m + 1) / 2);
    }
    rep(&mut out, Loadings, model.spatial_loadings.len() + model.nonspatial_loadings.len());
    if let Some(mf) = &model.meanfield {
        rep(&mut out, MeanFieldVariational, 2 * mf.delta.len());
        rep(&mut out, MeanFieldPrior, 2 * mf.prior_mean.len());
    }
    rep(&mut out, LikelihoodAux, model.likelihood.aux.len());
    out
}

/// Chain rule from natural-parameter adjoints to the packed vector.
pub(crate) fn pack_grad<F: Scalar>(model: &FactorModel<F>, grad: &ModelGrad<F>) -> Vec<F> {
    let mut out = Vec::new();
    for (c, g) in model.spatial.iter().zip(&grad.spatial) {
        out.push(g.log_amplitude);
        out.push(g.log_lengthscale);
        out.push(g.beta0);
        out.extend(g.beta1.iter().copied());
        out.extend(g.delta.iter().copied());
        let m = c.num_inducing();
        for i in 0..m {
            for j in 0..i {
                out.push(g.omega_chol[[i, j]]);
            }
            // d softplus(r)/dr = sigmoid(r)
            let raw = c.omega_chol[[i, i]].softplus_inv();
            out.push(g.omega_chol[[i, i]] * raw.sigmoid());
        }
    }
    out.extend(grad.spatial_loadings.iter().copied());
    out.extend(grad.nonspatial_loadings.iter().copied());
    if model.meanfield.is_some() {
        out.extend(grad.mf_delta.iter().copied());
        out.extend(grad.mf_log_omega.iter().copied());
        out.extend(grad.mf_prior_mean.iter().copied());
        out.extend(grad.mf_log_prior_var.iter().copied());
    }
    out.extend(grad.log_aux.iter().copied());
    out
}
