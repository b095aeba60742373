use ndarray::{array, Array1, Array2, Axis};
use nsf_core::kernels::{KernelKind, KernelParams};
use nsf_core::likelihoods::{LikelihoodFamily, LikelihoodSpec};
use nsf_core::model::{
    self, build_model, elbo, elbo_terms, full_batch, kl_meanfield, predict_mean, FactorModel, MeanFieldComponentState,
    ModelKind, ModelSpec, Observations, Query,
};
use nsf_core::optimizer::{check_gradients, fit, FitConfig};
use nsf_core::params::ParamMask;
use nsf_core::svgp::SpatialComponentState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

fn coords(n: usize, seed: u64) -> Array2<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, 2), |_| rand_distr::Uniform::new(-1.0, 1.0).sample(&mut r))
}

/// Counts from two smooth spatial patterns.
fn counts(x: &Array2<f64>, j: usize, seed: u64) -> Array2<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((x.nrows(), j), |(i, jj)| {
        let a = (2.0 * x[[i, 0]]).exp();
        let b = (-1.5 * x[[i, 1]]).exp();
        let rate = if jj % 2 == 0 { 2.0 * a + 0.3 * b } else { 0.2 * a + 2.5 * b } + 0.5;
        Poisson::new(rate).unwrap().sample(&mut r)
    })
}

fn size_factors(y: &Array2<f64>) -> Array1<f64> {
    nsf_core::likelihoods::size_factors(y.view()).unwrap()
}

fn tiny(kind: ModelKind, l: usize, t: usize, m: Option<usize>, family: LikelihoodFamily) -> (FactorModel<f64>, Observations<f64>) {
    let x = coords(20, 1);
    let y = counts(&x, 5, 2);
    let nu = size_factors(&y);
    let mut spec = ModelSpec::new(kind, l);
    spec.num_spatial = t;
    spec.num_inducing = m;
    spec.likelihood = family;
    spec.samples = 1;
    let model = build_model(&spec, y.view(), x.view(), nu.view(), 3).unwrap();
    (model, Observations::new(y, family).unwrap())
}

/// Moves every parameter off its initial value so gradients are generic.
fn perturb(model: &mut FactorModel<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(99);
    let mut n = move || -> f64 { StandardNormal.sample(&mut r) };
    for c in model.spatial.iter_mut() {
        c.beta0 += 0.1 * n();
        c.beta1.mapv_inplace(|v| v + 0.1);
        c.delta.mapv_inplace(|v| v + 0.1 * v.sin());
        let m = c.num_inducing();
        for i in 0..m {
            for j in 0..i {
                c.omega_chol[[i, j]] += 0.01 * ((i * 7 + j) as f64).sin();
            }
        }
        c.kernel.amplitude *= 1.3;
        c.kernel.lengthscale *= 1.5;
    }
    if let Some(mf) = model.meanfield.as_mut() {
        mf.prior_mean.mapv_inplace(|v| v + 0.2);
        mf.prior_var.mapv_inplace(|v| v * 0.8);
        mf.omega.mapv_inplace(|v| v * 1.5);
    }
    model.likelihood.aux.mapv_inplace(|v| v * 0.7);
    model.spatial_loadings.mapv_inplace(|v| v + 0.05);
    model.nonspatial_loadings.mapv_inplace(|v| v + 0.05);
}

#[test]
fn gradients_match_finite_differences() {
    let cases = [
        (ModelKind::Nsf, 2, 2, Some(5), LikelihoodFamily::Poisson),
        (ModelKind::Nsfh, 2, 1, Some(5), LikelihoodFamily::Poisson),
        (ModelKind::Pnmf, 2, 0, None, LikelihoodFamily::Poisson),
        (ModelKind::Nsf, 2, 2, Some(5), LikelihoodFamily::NegativeBinomial),
        (ModelKind::Nsf, 1, 1, None, LikelihoodFamily::Poisson),
    ];
    for (kind, l, t, m, fam) in cases {
        let (mut model, data) = tiny(kind, l, t, m, fam);
        perturb(&mut model);
        let d = check_gradients(&model, &data, 1e-5, 1, 7).unwrap();
        assert!(d < 1e-4, "{kind} {fam:?} M={m:?}: {d}");
    }
}

#[test]
fn real_valued_gradients_match_finite_differences() {
    let x = coords(20, 4);
    let y = counts(&x, 5, 5).mapv(|v| (1.0 + v).ln());
    let y = &y - &y.mean_axis(Axis(0)).unwrap();
    for kind in [ModelKind::Rsf, ModelKind::Fa] {
        let mut spec = ModelSpec::new(kind, 2);
        spec.num_inducing = Some(6);
        spec.samples = 2;
        let mut model = build_model(&spec, y.view(), x.view(), Array1::ones(20).view(), 1).unwrap();
        perturb(&mut model);
        let data = Observations::new(y.clone(), LikelihoodFamily::Gaussian).unwrap();
        let d = check_gradients(&model, &data, 1e-5, 2, 11).unwrap();
        assert!(d < 1e-4, "{kind}: {d}");
    }
}

#[test]
fn spec_defaults_and_validation() {
    let s = ModelSpec::new(ModelKind::Nsfh, 20);
    assert_eq!((s.num_spatial, s.kind()), (10, ModelKind::Nsfh));
    assert_eq!(ModelSpec::new(ModelKind::Nsf, 4).num_nonspatial(), 0);
    let mut bad = ModelSpec::new(ModelKind::Rsf, 4);
    bad.num_spatial = 2;
    assert!(matches!(bad.validate(), Err(nsf_core::NsfError::UnsupportedModel(_))));
    let (pnmf, _) = tiny(ModelKind::Pnmf, 2, 0, None, LikelihoodFamily::Poisson);
    assert!(pnmf.spatial.is_empty() && pnmf.meanfield.is_some());
    let (nsf, _) = tiny(ModelKind::Nsf, 2, 2, Some(5), LikelihoodFamily::Poisson);
    assert!(nsf.meanfield.is_none() && nsf.spatial.len() == 2);
}

fn hand_model(delta_f: f64, delta_h: f64) -> FactorModel<f64> {
    let x = array![[0.0, 0.0], [1.0, 0.0]];
    let kernel = KernelParams::new(KernelKind::Matern32, 1.0, 1.0).unwrap();
    let mut spec = ModelSpec::new(ModelKind::Nsfh, 2);
    spec.num_spatial = 1;
    let comp = SpatialComponentState {
        z: x.clone(),
        delta: array![delta_f, 2.0 * delta_f],
        omega_chol: Array2::eye(2) * 0.1,
        beta0: 0.0,
        beta1: array![0.0, 0.0],
        kernel,
    };
    FactorModel {
        spec,
        spatial_loadings: array![[1.0], [2.0]],
        nonspatial_loadings: array![[0.5], [0.0]],
        spatial: vec![comp],
        meanfield: Some(MeanFieldComponentState {
            delta: array![[delta_h], [-delta_h]],
            omega: array![[0.1], [0.1]],
            prior_mean: array![0.0],
            prior_var: array![1.0],
        }),
        likelihood: LikelihoodSpec::poisson(),
        x_train: x,
        nu_train: array![1.0, 2.0],
    }
}

#[test]
fn predict_mean_examples() {
    let m0 = hand_model(0.0, 0.0);
    let p = predict_mean(&m0, Query::Training).unwrap();
    // ν_i Σ_l b_jl
    assert_eq!(p, array![[1.5, 2.0], [3.0, 4.0]]);
    let m = hand_model(0.3, 0.2);
    let p = predict_mean(&m, Query::Training).unwrap();
    let e = |v: f64| v.exp();
    let expect = array![
        [1.0 * (1.0 * e(0.3) + 0.5 * e(0.2)), 1.0 * (2.0 * e(0.3))],
        [2.0 * (1.0 * e(0.6) + 0.5 * e(-0.2)), 2.0 * (2.0 * e(0.6))]
    ];
    for (a, b) in p.iter().zip(expect.iter()) {
        assert!((a - b).abs() < 1e-12 * b);
    }
    // New locations use the prior mean for nonspatial factors.
    let xq = array![[0.0, 0.0]];
    let nu = array![1.0];
    let q = predict_mean(&m, Query::Coordinates { x: xq.view(), nu: nu.view() }).unwrap();
    assert!((q[[0, 0]] - (e(0.3) + 0.5)).abs() < 1e-12);
}

#[test]
fn out_of_sample_needs_spatial_components() {
    let (pnmf, _) = tiny(ModelKind::Pnmf, 2, 0, None, LikelihoodFamily::Poisson);
    let xq = array![[0.0, 0.0]];
    let nu = array![1.0];
    let r = predict_mean(&pnmf, Query::Coordinates { x: xq.view(), nu: nu.view() });
    assert!(matches!(r, Err(nsf_core::NsfError::UnsupportedModel(_))));
}

#[test]
fn kl_meanfield_values() {
    let st = MeanFieldComponentState::<f64> {
        delta: array![[0.4, 1.0]],
        omega: array![[2.0, 0.25]],
        prior_mean: array![0.4, 0.5],
        prior_var: array![2.0, 0.25],
    };
    assert!(kl_meanfield(&st, 0, 0).unwrap().abs() < 1e-15);
    assert!((kl_meanfield(&st, 0, 1).unwrap() - 0.5).abs() < 1e-15);
    assert!(kl_meanfield(&st, 1, 0).is_err());
}

#[test]
fn nsfh_special_cases_equal_nsf_and_pnmf() {
    for (kind, t) in [(ModelKind::Nsf, 2), (ModelKind::Pnmf, 0)] {
        let (model, data) = tiny(kind, 2, t, Some(5), LikelihoodFamily::Poisson);
        let mut hybrid = model.clone();
        hybrid.spec = ModelSpec { num_spatial: t, ..ModelSpec::new(ModelKind::Nsfh, 2) };
        hybrid.spec.num_inducing = model.spec.num_inducing;
        hybrid.spec.samples = model.spec.samples;
        let b = full_batch(20);
        let a = elbo(&model, &data, &b, 3, 5).unwrap();
        let h = elbo(&hybrid, &data, &b, 3, 5).unwrap();
        assert!((a - h).abs() <= 1e-12 * a.abs(), "{a} vs {h}");
    }
}

#[test]
fn minibatch_scaling_is_unbiased() {
    let (mut model, data) = tiny(ModelKind::Nsfh, 2, 1, Some(5), LikelihoodFamily::Poisson);
    let b = full_batch(20);
    let full = elbo(&model, &data, &b, 2, 9).unwrap();
    let batches: Vec<Vec<usize>> = (0..4).map(|k| (k * 5..k * 5 + 5).collect()).collect();
    let mean: f64 = batches.iter().map(|bb| elbo(&model, &data, bb, 2, 9).unwrap()).sum::<f64>() / 4.0;
    assert!((full - mean).abs() <= 1e-10 * full.abs());
    // Deterministic-variance instance.
    for c in model.spatial.iter_mut() {
        c.omega_chol.mapv_inplace(|v| v * 1e-6);
    }
    let full = elbo(&model, &data, &b, 1, 1).unwrap();
    let mean: f64 = batches.iter().map(|bb| elbo(&model, &data, bb, 1, 1).unwrap()).sum::<f64>() / 4.0;
    assert!((full - mean).abs() <= 1e-10 * full.abs());
}

#[test]
fn degenerate_posterior_gives_plain_loglik() {
    // PNMF with q = p and vanishing variance.
    let (mut model, data) = tiny(ModelKind::Pnmf, 2, 0, None, LikelihoodFamily::Poisson);
    let mf = model.meanfield.as_mut().unwrap();
    mf.omega.fill(1e-200);
    mf.prior_var.fill(1e-200);
    let col = mf.delta.column(0).to_owned();
    mf.delta.column_mut(1).assign(&col);
    mf.delta.column_mut(0).fill(0.1);
    mf.delta.column_mut(1).fill(0.1);
    mf.prior_mean.fill(0.1);
    let terms = elbo_terms(&model, &data, &full_batch(20), 2, 4).unwrap();
    let mhat = predict_mean(&model, Query::Training).unwrap();
    let mut ll = 0.0;
    for ((i, j), &y) in data.y.indexed_iter() {
        ll += nsf_core::likelihoods::log_lik(&model.likelihood, y, mhat[[i, j]], j).unwrap();
    }
    assert!(terms.kl_meanfield.abs() < 1e-9);
    assert!((terms.value - ll).abs() < 1e-9 * ll.abs());
}

#[test]
fn positive_means_for_nonnegative_models() {
    let (model, _) = tiny(ModelKind::Nsfh, 2, 1, Some(5), LikelihoodFamily::Poisson);
    let b = model.loadings();
    assert!(b.rows().into_iter().all(|r| r.iter().any(|&v| v > 0.0)));
    assert!(predict_mean(&model, Query::Training).unwrap().iter().all(|&v| v > 0.0));
}

#[test]
fn monte_carlo_spread_shrinks_with_samples() {
    let (model, data) = tiny(ModelKind::Nsfh, 2, 1, Some(5), LikelihoodFamily::Poisson);
    let b = full_batch(20);
    let sd = |s: usize| {
        let v: Vec<f64> = (0..100).map(|seed| elbo(&model, &data, &b, s, 1000 + seed).unwrap()).collect();
        let m = v.iter().sum::<f64>() / 100.0;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 99.0).sqrt()
    };
    let (s1, s4, s16) = (sd(1), sd(4), sd(16));
    for (ratio, expect) in [(s1 / s4, 2.0), (s4 / s16, 2.0)] {
        assert!((ratio / expect - 1.0).abs() < 0.3, "{s1} {s4} {s16}");
    }
}

#[test]
fn gaussian_elbo_matches_closed_form_expectation() {
    // RSF, N=3, J=1, L=1, M=N.
    let x = array![[0.0, 0.0], [0.5, 0.0], [0.0, 1.0]];
    let y = array![[0.3], [-0.2], [1.1]];
    let mut spec = ModelSpec::new(ModelKind::Rsf, 1);
    spec.samples = 1;
    let mut model = build_model(&spec, y.view(), x.view(), Array1::ones(3).view(), 0).unwrap();
    model.spatial_loadings = array![[0.8]];
    model.likelihood.aux = array![0.5];
    model.spatial[0].delta = array![0.1, -0.4, 0.9];
    let data = Observations::new(y.clone(), LikelihoodFamily::Gaussian).unwrap();
    let post = nsf_core::svgp::marginal_posterior(&model.spatial[0], x.view()).unwrap();
    let kl = nsf_core::svgp::kl_inducing(&model.spatial[0]).unwrap();
    let (w, s2) = (0.8, 0.5);
    let mut exact = -kl;
    for i in 0..3 {
        let r = y[[i, 0]] - w * post.mean[i];
        exact += -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - (r * r + w * w * post.variance[i]) / (2.0 * s2);
    }
    let b = full_batch(3);
    let single: Vec<f64> = (0..300).map(|s| elbo(&model, &data, &b, 1, s).unwrap()).collect();
    let m = single.iter().sum::<f64>() / 300.0;
    let sd = (single.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 299.0).sqrt();
    let s = 100_000;
    let est = elbo(&model, &data, &b, s, 77).unwrap();
    let se = sd / (s as f64).sqrt();
    assert!((est - exact).abs() < 3.0 * se, "{est} vs {exact} (se {se})");
}

#[test]
fn fit_is_deterministic_and_keeps_loadings_nonnegative() {
    let (model, data) = tiny(ModelKind::Nsfh, 2, 1, Some(5), LikelihoodFamily::Poisson);
    let cfg = FitConfig { max_steps: 30, seed: 4, ..Default::default() };
    let (a, ta) = fit(model.clone(), &data, &cfg).unwrap();
    let (b, tb) = fit(model, &data, &cfg).unwrap();
    assert_eq!(ta.elbo, tb.elbo);
    assert_eq!(a, b);
    assert!(a.loadings().iter().all(|&v| v >= 0.0));
    assert!(ta.steps <= 30);
}

#[test]
fn constant_counts_recover_the_rate() {
    let n = 30;
    let y = Array2::from_elem((n, 4), 5.0);
    let x = coords(n, 3);
    let nu = Array1::ones(n);
    let spec = ModelSpec::new(ModelKind::Pnmf, 1);
    let model = build_model(&spec, y.view(), x.view(), nu.view(), 0).unwrap();
    let data = Observations::new(y, LikelihoodFamily::Poisson).unwrap();
    let cfg = FitConfig { max_steps: 3000, rel_tol: 1e-6, seed: 1, ..Default::default() };
    let (fitted, trace) = fit(model, &data, &cfg).unwrap();
    let mhat = predict_mean(&fitted, Query::Training).unwrap();
    let mean = mhat.mean().unwrap();
    assert!((mean / 5.0 - 1.0).abs() < 0.05, "mean {mean}, steps {}", trace.steps);
}

#[test]
fn frozen_groups_do_not_move() {
    let (model, data) = tiny(ModelKind::Nsfh, 2, 1, Some(5), LikelihoodFamily::Poisson);
    let cfg = FitConfig { max_steps: 5, trainable: ParamMask::variational(), ..Default::default() };
    let (fitted, _) = fit(model.clone(), &data, &cfg).unwrap();
    assert_eq!(fitted.spatial_loadings, model.spatial_loadings);
    assert_eq!(fitted.spatial[0].kernel, model.spatial[0].kernel);
    assert_ne!(fitted.spatial[0].delta, model.spatial[0].delta);
    let _ = model::ElboTerms::<f64> { value: 0.0, expected_loglik: 0.0, kl_inducing: 0.0, kl_meanfield: 0.0 };
}
