//! Starting values: SVD or KL-NMF factors, Moran's-I ordering of components,
//! and the initial variational state built from them.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::cluster;
use crate::error::{NsfError, Result};
use crate::kernels::{self, KernelParams};
use crate::likelihoods::{LikelihoodFamily, LikelihoodSpec};
use crate::linalg;
use crate::model::{FactorModel, MeanFieldComponentState, ModelSpec};
use crate::rng;
use crate::scalar::Scalar;
use crate::svgp::{self, SpatialComponentState};

/// Multiplicative-update iterations of the NMF initializer.
pub const NMF_ITERATIONS: usize = 200;
/// Rank multiplier for the initial factorization of purely spatial models.
const OVERCOMPLETE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialGraphConfig {
    /// Neighbors per observation before symmetrization.
    pub k: usize,
}

impl Default for SpatialGraphConfig {
    fn default() -> Self {
        Self { k: 6 }
    }
}

/// Symmetrized binary k-nearest-neighbor graph.
#[derive(Debug, Clone)]
pub struct SpatialGraph {
    neighbors: Vec<Vec<usize>>,
    total_weight: usize,
}

impl SpatialGraph {
    pub fn knn<F: Scalar>(x: ArrayView2<'_, F>, cfg: SpatialGraphConfig) -> Result<Self> {
        let n = x.nrows();
        if cfg.k < 1 || cfg.k >= n {
            return Err(NsfError::Argument(format!("need 1 <= k < N for the neighbor graph, got k={}, N={n}", cfg.k)));
        }
        let mut neighbors = vec![Vec::new(); n];
        let mut cand: Vec<(F, usize)> = Vec::with_capacity(n);
        for i in 0..n {
            cand.clear();
            let xi = x.row(i);
            for j in (0..n).filter(|&j| j != i) {
                let d: F = xi.iter().zip(x.row(j).iter()).map(|(&a, &b)| (a - b) * (a - b)).sum();
                cand.push((d, j));
            }
            let cmp = |a: &(F, usize), b: &(F, usize)| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1));
            cand.select_nth_unstable_by(cfg.k - 1, cmp);
            for &(_, j) in &cand[..cfg.k] {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
        let mut total_weight = 0;
        for nb in neighbors.iter_mut() {
            nb.sort_unstable();
            nb.dedup();
            total_weight += nb.len();
        }
        Ok(Self { neighbors, total_weight })
    }

    pub fn num_nodes(&self) -> usize {
        self.neighbors.len()
    }

    /// Moran's I of `v` on this graph.
    pub fn morans_i<F: Scalar>(&self, v: ArrayView1<'_, F>) -> Result<F> {
        let n = self.num_nodes();
        if v.len() != n {
            return Err(NsfError::Shape(format!("vector of length {} on a graph of {n} nodes", v.len())));
        }
        let mean = v.sum() / F::of_usize(n);
        let z = v.mapv(|a| a - mean);
        let denom = z.dot(&z);
        let scale = v.iter().fold(F::zero(), |m, &a| m.max(a.abs())).max(F::min_positive_value());
        if !(denom > F::epsilon() * F::epsilon() * scale * scale * F::of_usize(n)) {
            return Err(NsfError::DegenerateInput("Moran's I needs a non-constant vector".into()));
        }
        let mut num = F::zero();
        for (i, nb) in self.neighbors.iter().enumerate() {
            let s: F = nb.iter().map(|&j| z[j]).sum();
            num += z[i] * s;
        }
        Ok(F::of_usize(n) / F::of_usize(self.total_weight) * num / denom)
    }
}

/// Moran's I of `v` at locations `x` with symmetrized binary kNN weights.
pub fn morans_i<F: Scalar>(v: ArrayView1<'_, F>, x: ArrayView2<'_, F>, cfg: SpatialGraphConfig) -> Result<F> {
    if v.len() != x.nrows() {
        return Err(NsfError::Shape("values and coordinates differ in length".into()));
    }
    SpatialGraph::knn(x, cfg)?.morans_i(v)
}

/// Components reordered by decreasing spatial autocorrelation.
#[derive(Debug, Clone)]
pub struct ComponentAssignment<F> {
    pub factors: Array2<F>,
    pub loadings: Array2<F>,
    /// `order[k]` is the original column placed at position `k`.
    pub order: Vec<usize>,
    /// Moran's I per original column (`-∞` for constant columns).
    pub morans: Vec<F>,
}

/// Sorts factor columns (with their loadings) by decreasing Moran's I; the
/// first `T` become spatial components. Ties keep the original order.
pub fn assign_spatial_components<F: Scalar>(
    factors: ArrayView2<'_, F>,
    loadings: ArrayView2<'_, F>,
    x: ArrayView2<'_, F>,
    num_spatial: usize,
    cfg: SpatialGraphConfig,
) -> Result<ComponentAssignment<F>> {
    let l = factors.ncols();
    if loadings.ncols() != l || factors.nrows() != x.nrows() {
        return Err(NsfError::Shape("factors, loadings and coordinates disagree".into()));
    }
    if num_spatial > l {
        return Err(NsfError::Argument(format!("T={num_spatial} exceeds L={l}")));
    }
    let graph = SpatialGraph::knn(x, cfg)?;
    let mut morans = Vec::with_capacity(l);
    for c in 0..l {
        morans.push(match graph.morans_i(factors.column(c)) {
            Ok(v) => v,
            Err(NsfError::DegenerateInput(_)) => F::neg_infinity(),
            Err(e) => return Err(e),
        });
    }
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| morans[b].partial_cmp(&morans[a]).unwrap_or(std::cmp::Ordering::Equal));
    Ok(ComponentAssignment {
        factors: factors.select(Axis(1), &order),
        loadings: loadings.select(Axis(1), &order),
        order,
        morans,
    })
}

/// Initial factors `F₀` (N×L) and loadings `W₀` (J×L) of `data` (N×J).
///
/// Real-valued: rank-`L` SVD with `F₀ = U diag(σ)`, `W₀ = V`. Nonnegative:
/// KL-divergence NMF by multiplicative updates from an NNDSVDa start.
pub fn init_factors<F: Scalar>(data: ArrayView2<'_, F>, l: usize, nonnegative: bool, seed: u64) -> Result<(Array2<F>, Array2<F>)> {
    let (n, j) = data.dim();
    if l < 1 || l > n.min(j) {
        return Err(NsfError::Argument(format!("need 1 <= L <= min(N, J) = {}, got L={l}", n.min(j))));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(NsfError::Argument("data must be finite".into()));
    }
    if !nonnegative {
        let svd = linalg::truncated_svd(data, l, seed);
        let mut f = svd.u;
        for (mut col, &s) in f.axis_iter_mut(Axis(1)).zip(svd.s.iter()) {
            col.mapv_inplace(|v| v * s);
        }
        return Ok((f, svd.v));
    }
    if data.iter().any(|&v| v < F::zero()) {
        return Err(NsfError::Argument("nonnegative factorization needs nonnegative data".into()));
    }
    let (mut f, mut w) = nndsvda(data, l, seed);
    nmf_kl(data, &mut f, &mut w, NMF_ITERATIONS);
    Ok((f, w))
}

fn nndsvda<F: Scalar>(data: ArrayView2<'_, F>, l: usize, seed: u64) -> (Array2<F>, Array2<F>) {
    let (n, j) = data.dim();
    let svd = linalg::truncated_svd(data, l, seed);
    let mut f = Array2::zeros((n, l));
    let mut w = Array2::zeros((j, l));
    let pos = |v: ArrayView1<'_, F>| v.mapv(|x| x.max(F::zero()));
    let neg = |v: ArrayView1<'_, F>| v.mapv(|x| (-x).max(F::zero()));
    let norm = |v: &Array1<F>| v.dot(v).sqrt();
    for c in 0..l {
        let (u, v, s) = (svd.u.column(c), svd.v.column(c), svd.s[c]);
        if c == 0 {
            f.column_mut(0).assign(&u.mapv(|x| x.abs() * s.sqrt()));
            w.column_mut(0).assign(&v.mapv(|x| x.abs() * s.sqrt()));
            continue;
        }
        let (up, un, vp, vn) = (pos(u), neg(u), pos(v), neg(v));
        let (nup, nun, nvp, nvn) = (norm(&up), norm(&un), norm(&vp), norm(&vn));
        let (mp, mn) = (nup * nvp, nun * nvn);
        let (uu, vv, sigma, nu_, nv_) = if mp > mn { (up, vp, mp, nup, nvp) } else { (un, vn, mn, nun, nvn) };
        if !(sigma > F::zero()) {
            continue;
        }
        let lbd = (s * sigma).sqrt();
        f.column_mut(c).assign(&uu.mapv(|x| lbd * x / nu_));
        w.column_mut(c).assign(&vv.mapv(|x| lbd * x / nv_));
    }
    let avg = data.mean().unwrap_or(F::one());
    let fill = if avg > F::zero() { avg } else { F::one() };
    f.mapv_inplace(|x| if x == F::zero() { fill } else { x });
    w.mapv_inplace(|x| if x == F::zero() { fill } else { x });
    (f, w)
}

/// Lee–Seung multiplicative updates for `data ≈ F Wᵀ` under the generalized
/// KL divergence.
pub fn nmf_kl<F: Scalar>(data: ArrayView2<'_, F>, f: &mut Array2<F>, w: &mut Array2<F>, iterations: usize) {
    let tiny = F::of(1e-12);
    for _ in 0..iterations {
        let ratio = ratio_of(data, f, w, tiny);
        let num = ratio.dot(&*w);
        let wsum = w.sum_axis(Axis(0));
        for (mut row, nrow) in f.rows_mut().into_iter().zip(num.rows()) {
            for c in 0..row.len() {
                row[c] = row[c] * nrow[c] / (wsum[c] + tiny);
            }
        }
        let ratio = ratio_of(data, f, w, tiny);
        let num = ratio.t().dot(&*f);
        let fsum = f.sum_axis(Axis(0));
        for (mut row, nrow) in w.rows_mut().into_iter().zip(num.rows()) {
            for c in 0..row.len() {
                row[c] = row[c] * nrow[c] / (fsum[c] + tiny);
            }
        }
    }
}

fn ratio_of<F: Scalar>(data: ArrayView2<'_, F>, f: &Array2<F>, w: &Array2<F>, tiny: F) -> Array2<F> {
    let mut r = f.dot(&w.t());
    ndarray::Zip::from(&mut r).and(data).for_each(|r, &y| *r = y / (*r + tiny));
    r
}

/// Largest coordinate range over dimensions (1 when all points coincide).
fn coordinate_range<F: Scalar>(x: ArrayView2<'_, F>) -> F {
    let mut best = F::zero();
    for col in x.columns() {
        let lo = col.iter().fold(F::infinity(), |m, &v| m.min(v));
        let hi = col.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        best = best.max(hi - lo);
    }
    if best > F::zero() {
        best
    } else {
        F::one()
    }
}

/// Mean of `values` over the training points in each inducing point's
/// Voronoi cell; an empty cell takes the value of the training point nearest
/// to its inducing point.
fn voronoi_means<F: Scalar>(x: ArrayView2<'_, F>, z: ArrayView2<'_, F>, values: ArrayView1<'_, F>) -> Array1<F> {
    let m = z.nrows();
    if x.dim() == z.dim() && x.iter().zip(z.iter()).all(|(a, b)| a == b) {
        return values.to_owned();
    }
    let mut sum = Array1::<F>::zeros(m);
    let mut count = vec![0usize; m];
    for (i, row) in x.rows().into_iter().enumerate() {
        let (c, _) = cluster::nearest(row, z);
        sum[c] += values[i];
        count[c] += 1;
    }
    for c in 0..m {
        if count[c] > 0 {
            sum[c] = sum[c] / F::of_usize(count[c]);
        } else {
            let (i, _) = cluster::nearest(z.row(c), x);
            sum[c] = values[i];
        }
    }
    sum
}

/// Builds an initialized model for `data` (N×J counts for count likelihoods,
/// normalized values for the Gaussian) at training coordinates `x` with
/// size factors `nu`.
pub fn initialize_model<F: Scalar>(
    spec: &ModelSpec,
    data: ArrayView2<'_, F>,
    x: ArrayView2<'_, F>,
    nu: ArrayView1<'_, F>,
    seed: u64,
) -> Result<FactorModel<F>> {
    spec.validate()?;
    let (n, j) = data.dim();
    if x.nrows() != n || nu.len() != n {
        return Err(NsfError::Shape(format!("data has {n} rows, coordinates {}, size factors {}", x.nrows(), nu.len())));
    }
    if x.ncols() < 1 {
        return Err(NsfError::Shape("need at least one coordinate dimension".into()));
    }
    let (l, t) = (spec.num_components, spec.num_spatial);
    let m = spec.num_inducing.unwrap_or(n);
    if t > 0 && m > n {
        return Err(NsfError::Argument(format!("M={m} exceeds N={n}")));
    }
    let is_count = spec.likelihood.is_count();
    let nu_model = if is_count { nu.to_owned() } else { Array1::ones(n) };

    // With every component spatial, nonspatial structure in the data would
    // otherwise claim some of the L components; factor at a higher rank and
    // keep the L most autocorrelated components instead.
    let rank = if spec.nonnegative && t == l && n > 1 && OVERCOMPLETE * l <= n.min(j) { OVERCOMPLETE * l } else { l };
    let (f0, w0) = init_factors(data, rank, spec.nonnegative, rng::derive_seed(seed, 1))?;
    let (mut f0, mut w0) = if n > 1 && rank > 1 {
        let cfg = SpatialGraphConfig { k: SpatialGraphConfig::default().k.min(n - 1) };
        let a = assign_spatial_components(f0.view(), w0.view(), x, t, cfg)?;
        (a.factors.slice(s![.., ..l]).to_owned(), a.loadings.slice(s![.., ..l]).to_owned())
    } else {
        (f0, w0)
    };

    // Factor values on the scale the model works in (log for nonnegative).
    let phi = if spec.nonnegative {
        for (mut row, &v) in f0.rows_mut().into_iter().zip(nu_model.iter()) {
            row.mapv_inplace(|a| a / v);
        }
        for c in 0..l {
            let col = f0.column(c);
            let mean = col.mean().unwrap_or(F::zero());
            let floor = if mean > F::zero() { F::of(1e-2) * mean } else { F::of(1e-8) };
            let logs = col.mapv(|a| a.max(floor).ln());
            let g = logs.mean().unwrap_or(F::zero());
            f0.column_mut(c).assign(&logs.mapv(|a| a - g));
            w0.column_mut(c).mapv_inplace(|a| a * g.exp());
        }
        f0
    } else {
        for c in 0..l {
            let col = f0.column(c);
            let sd = col.std(F::zero());
            if sd > F::zero() {
                f0.column_mut(c).mapv_inplace(|a| a / sd);
                w0.column_mut(c).mapv_inplace(|a| a * sd);
            }
        }
        f0
    };

    let mut spatial = Vec::with_capacity(t);
    if t > 0 {
        let z = svgp::choose_inducing_points(x, m, rng::derive_seed(seed, 2))?;
        let lengthscale = F::of(0.1) * coordinate_range(x);
        let kernel = KernelParams::new(spec.kernel, F::one(), lengthscale)?;
        let kzz = kernels::gram(&kernel, z.view())?;
        let lk = kernels::chol_with_jitter(kzz.view())?.lower;
        let omega_chol = lk.mapv(|v| v * F::of(0.1));
        for c in 0..t {
            let delta = voronoi_means(x, z.view(), phi.column(c));
            spatial.push(SpatialComponentState {
                z: z.clone(),
                delta,
                omega_chol: omega_chol.clone(),
                beta0: F::zero(),
                beta1: Array1::zeros(x.ncols()),
                kernel: kernel.clone(),
            });
        }
    }
    let meanfield = (t < l).then(|| MeanFieldComponentState {
        delta: phi.slice(s![.., t..]).to_owned(),
        omega: Array2::from_elem((n, l - t), F::of(0.01)),
        prior_mean: Array1::zeros(l - t),
        prior_var: Array1::ones(l - t),
    });
    let aux = match spec.likelihood {
        LikelihoodFamily::Poisson => Array1::zeros(0),
        LikelihoodFamily::NegativeBinomial => Array1::from_elem(j, F::of(10.0)),
        LikelihoodFamily::Gaussian => {
            let fitted = if spec.nonnegative { phi.mapv(|v| v.exp()).dot(&w0.t()) } else { phi.dot(&w0.t()) };
            let resid = &data - &fitted;
            Array1::from_iter((0..j).map(|jj| {
                let rv = resid.column(jj).mapv(|v| v * v).mean().unwrap_or(F::one());
                let dv = data.column(jj).var(F::zero());
                rv.max(F::of(1e-3) * dv).max(F::of(1e-8))
            }))
        }
    };
    let model = FactorModel {
        spec: spec.clone(),
        spatial_loadings: w0.slice(s![.., ..t]).to_owned(),
        nonspatial_loadings: w0.slice(s![.., t..]).to_owned(),
        spatial,
        meanfield,
        likelihood: LikelihoodSpec::new(spec.likelihood, aux)?,
        x_train: x.to_owned(),
        nu_train: nu_model,
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    fn grid(side: usize) -> Array2<f64> {
        Array2::from_shape_fn((side * side, 2), |(i, d)| if d == 0 { (i % side) as f64 } else { (i / side) as f64 })
    }

    #[test]
    fn svd_init_reconstructs_exact_rank() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = Array2::from_shape_fn((30, 3), |_| StandardNormal.sample(&mut r));
        let b = Array2::from_shape_fn((12, 3), |_| StandardNormal.sample(&mut r));
        let y: Array2<f64> = a.dot(&b.t());
        let (f, w) = init_factors(y.view(), 3, false, 0).unwrap();
        assert_eq!((f.dim(), w.dim()), ((30, 3), (12, 3)));
        let err = (&f.dot(&w.t()) - &y).mapv(f64::abs).sum() / y.mapv(f64::abs).sum();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn nmf_recovers_rank_one() {
        let u = Array1::from_iter((0..20).map(|i| 1.0 + i as f64));
        let v = Array1::from_iter((0..8).map(|j| 0.5 + (j % 3) as f64));
        let y = Array2::from_shape_fn((20, 8), |(i, j)| u[i] * v[j]);
        let (f, w) = init_factors(y.view(), 1, true, 3).unwrap();
        assert!(f.iter().chain(w.iter()).all(|&x| x >= 0.0));
        let err = (&f.dot(&w.t()) - &y).mapv(f64::abs).sum() / y.sum();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn init_rejects_large_rank() {
        let y = Array2::<f64>::ones((4, 3));
        assert!(matches!(init_factors(y.view(), 4, true, 0), Err(NsfError::Argument(_))));
        assert!(init_factors(y.view(), 0, true, 0).is_err());
    }

    #[test]
    fn morans_i_smooth_gradient_and_constant() {
        let x = grid(10);
        let v = x.column(0).to_owned();
        assert!(morans_i(v.view(), x.view(), SpatialGraphConfig::default()).unwrap() > 0.5);
        let c = Array1::from_elem(100, 3.0);
        assert!(matches!(morans_i(c.view(), x.view(), SpatialGraphConfig::default()), Err(NsfError::DegenerateInput(_))));
    }

    #[test]
    fn morans_i_permutation_null() {
        let x = grid(10);
        let graph = SpatialGraph::knn(x.view(), SpatialGraphConfig::default()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let base: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin() + 0.01 * i as f64).collect();
        let reps = 1000;
        let mut vals = Vec::with_capacity(reps);
        for _ in 0..reps {
            let mut p = base.clone();
            rand::seq::SliceRandom::shuffle(&mut p[..], &mut r);
            vals.push(graph.morans_i(Array1::from(p).view()).unwrap());
        }
        let mean = vals.iter().sum::<f64>() / reps as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let expect = -1.0 / 99.0;
        assert!((mean - expect).abs() < 3.0 * sd / (reps as f64).sqrt(), "{mean} vs {expect}");
    }

    #[test]
    fn assignment_orders_by_autocorrelation() {
        let x = grid(8);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let noise: Array1<f64> = Array1::from_iter((0..64).map(|_| Uniform::new(0.0, 1.0).sample(&mut r)));
        let smooth = x.column(1).mapv(|v| v + 1.0);
        let mut f = Array2::zeros((64, 3));
        f.column_mut(0).assign(&noise);
        f.column_mut(1).assign(&smooth);
        f.column_mut(2).fill(2.0);
        let w = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let a = assign_spatial_components(f.view(), w.view(), x.view(), 1, SpatialGraphConfig::default()).unwrap();
        assert_eq!(a.order, vec![1, 0, 2]);
        assert_eq!(a.morans[2], f64::NEG_INFINITY);
        let before = f.dot(&w.t());
        let after = a.factors.dot(&a.loadings.t());
        assert!((&before - &after).iter().all(|d| d.abs() <= 1e-12 * before.iter().fold(0.0_f64, |m, v| m.max(v.abs()))));
        // Already sorted input is left alone.
        let again = assign_spatial_components(a.factors.view(), a.loadings.view(), x.view(), 1, SpatialGraphConfig::default()).unwrap();
        assert_eq!(again.order, vec![0, 1, 2]);
    }

    #[test]
    fn voronoi_means_cover_empty_cells() {
        let x = array![[0.0], [1.0], [10.0]];
        let z = array![[0.5], [10.0], [50.0]];
        let v = array![2.0, 4.0, 7.0];
        assert_eq!(voronoi_means(x.view(), z.view(), v.view()), array![3.0, 7.0, 7.0]);
    }
}
