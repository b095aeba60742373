//! Adam on the packed parameter vector, with loadings of nonnegative models
//! truncated at zero after every step.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{NsfError, Result};
use crate::model::{self, FactorModel, Observations};
use crate::params::{self, ParamGroup, ParamMask};
use crate::rng;
use crate::scalar::Scalar;

/// Salt separating minibatch draws from Monte Carlo seeds.
const BATCH_SALT: u64 = 0x6261_7463_6800_0000;
/// Width of the ELBO moving average used for convergence.
pub const CONVERGENCE_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_steps: usize,
    /// Relative change of the smoothed ELBO below which the fit stops.
    pub rel_tol: f64,
    /// Monte Carlo samples; `None` uses the model's own setting.
    pub samples: Option<usize>,
    /// Rows per step; 0 means the full batch.
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub trainable: ParamMask,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_steps: 1000,
            rel_tol: 1e-4,
            samples: None,
            batch_size: 0,
            seed: 0,
            trainable: ParamMask::all(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(NsfError::Argument(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return Err(NsfError::Argument(format!("rel_tol must lie in (0, 1), got {}", self.rel_tol)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(NsfError::Argument("invalid Adam constants".into()));
        }
        if self.samples == Some(0) {
            return Err(NsfError::Argument("need at least one Monte Carlo sample".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    /// ELBO estimate at the start of each step.
    pub elbo: Vec<f64>,
    pub wall_time_secs: f64,
    pub converged: bool,
    pub steps: usize,
}

/// First and second moment estimates and the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub t: usize,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(n: usize) -> Self {
        Self { m: vec![F::zero(); n], v: vec![F::zero(); n], t: 0 }
    }
}

/// One bias-corrected Adam step minimizing a loss with gradient `grads`.
pub fn adam_step<F: Scalar>(params: &mut [F], grads: &[F], state: &mut AdamState<F>, config: &FitConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(NsfError::Shape("parameter, gradient and moment lengths differ".into()));
    }
    if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
        return Err(NsfError::Diverged { step: state.t + 1, reason: format!("non-finite gradient at entry {k}") });
    }
    state.t += 1;
    let (b1, b2) = (F::of(config.beta1), F::of(config.beta2));
    let lr = F::of(config.learning_rate);
    let eps = F::of(config.epsilon);
    let t = state.t as i32;
    let c1 = F::one() - b1.powi(t);
    let c2 = F::one() - b2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        *m = b1 * *m + (F::one() - b1) * g;
        *v = b2 * *v + (F::one() - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Entrywise `max(·, 0)`.
pub fn project_nonnegative<F: Scalar>(a: &mut Array2<F>) {
    a.mapv_inplace(|v| v.max(F::zero()));
}

fn smoothed(trace: &[f64], end: usize) -> f64 {
    trace[end - CONVERGENCE_WINDOW..end].iter().sum::<f64>() / CONVERGENCE_WINDOW as f64
}

/// Whether the moving average of the last window moved less than `rel_tol`
/// relative to the window before it.
pub fn has_converged(trace: &[f64], rel_tol: f64) -> bool {
    let n = trace.len();
    if n < 2 * CONVERGENCE_WINDOW {
        return false;
    }
    let (now, before) = (smoothed(trace, n), smoothed(trace, n - CONVERGENCE_WINDOW));
    (now - before).abs() <= rel_tol * before.abs().max(f64::MIN_POSITIVE)
}

/// Maximizes the ELBO. Step `t` uses Monte Carlo seed
/// `derive_seed(config.seed, t)`, so a fit is a deterministic function of
/// the initial model, the data and the configuration.
pub fn fit<F: Scalar>(mut model: FactorModel<F>, data: &Observations<F>, config: &FitConfig) -> Result<(FactorModel<F>, FitTrace)> {
    config.validate()?;
    model.validate()?;
    let start = Instant::now();
    let n = model.num_observations();
    let samples = config.samples.unwrap_or(model.spec.samples);
    let groups = params::groups(&model);
    let trainable: Vec<bool> = groups.iter().map(|&g| config.trainable.contains(g)).collect();
    let mut theta = params::pack(&model);
    let mut adam = AdamState::new(theta.len());
    let mut trace = FitTrace { elbo: Vec::new(), wall_time_secs: 0.0, converged: false, steps: 0 };
    let mut order: Vec<usize> = model::full_batch(n);
    let mut batch_rng = rng::seeded(rng::derive_seed(config.seed, BATCH_SALT));
    let full = model::full_batch(n);
    let mut cursor = n;
    for step in 1..=config.max_steps {
        let batch: &[usize] = if config.batch_size == 0 || config.batch_size >= n {
            &full
        } else {
            if cursor + config.batch_size > n {
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            cursor += config.batch_size;
            &order[cursor - config.batch_size..cursor]
        };
        let seed = rng::derive_seed(config.seed, step as u64);
        let (terms, grad) = model::elbo_grad(&model, data, batch, samples, seed)?;
        let value = terms.value.as_f64();
        if !value.is_finite() {
            return Err(NsfError::Diverged { step, reason: format!("ELBO is {value}") });
        }
        trace.elbo.push(value);
        let mut g = params::pack_grad(&model, &grad);
        for (gk, &tr) in g.iter_mut().zip(&trainable) {
            *gk = if tr { -*gk } else { F::zero() };
        }
        adam_step(&mut theta, &g, &mut adam, config).map_err(|e| match e {
            NsfError::Diverged { reason, .. } => NsfError::Diverged { step, reason },
            other => other,
        })?;
        if model.spec.nonnegative {
            for (v, &g) in theta.iter_mut().zip(&groups) {
                if g == ParamGroup::Loadings {
                    *v = v.max(F::zero());
                }
            }
        }
        params::unpack_selected(&mut model, &theta, Some(&trainable));
        trace.steps = step;
        if step % 50 == 0 {
            log::info!("step {step}: elbo {value:.4}");
        }
        if has_converged(&trace.elbo, config.rel_tol) {
            trace.converged = true;
            break;
        }
    }
    trace.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((model, trace))
}

/// Largest `|g_k - fd_k| / max(|g_k|, |fd_k|, 1)` between `grad` and central
/// differences of `f` at `x`.
pub fn check_gradient_fn<F: Scalar>(f: impl Fn(&[F]) -> Result<F>, x: &[F], grad: &[F], eps: F) -> Result<F> {
    if x.len() != grad.len() {
        return Err(NsfError::Shape("point and gradient lengths differ".into()));
    }
    let mut worst = F::zero();
    let mut p = x.to_vec();
    for k in 0..x.len() {
        p[k] = x[k] + eps;
        let up = f(&p)?;
        p[k] = x[k] - eps;
        let down = f(&p)?;
        p[k] = x[k];
        let fd = (up - down) / (eps + eps);
        let denom = grad[k].abs().max(fd.abs()).max(F::one());
        worst = worst.max((grad[k] - fd).abs() / denom);
    }
    Ok(worst)
}

/// Compares the analytic ELBO gradient (full batch, fixed seed) with central
/// finite differences in the packed parameterization.
pub fn check_gradients<F: Scalar>(model: &FactorModel<F>, data: &Observations<F>, eps: F, samples: usize, seed: u64) -> Result<F> {
    model.validate()?;
    let batch = model::full_batch(model.num_observations());
    let (_, grad) = model::elbo_grad(model, data, &batch, samples, seed)?;
    let g = params::pack_grad(model, &grad);
    let theta = params::pack(model);
    let f = |t: &[F]| {
        let mut m = model.clone();
        params::unpack(&mut m, t);
        model::elbo(&m, data, &batch, samples, seed)
    };
    check_gradient_fn(f, &theta, &g, eps)
}
