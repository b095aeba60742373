//! Simplex normalization of nonnegative factorizations, spatial importance
//! scores and top-feature ranking.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{NsfError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationStyle {
    /// Factor columns and loadings rows sum to one; `scale` is per feature.
    Spde,
    /// Loadings columns and factor rows sum to one; `scale` is per observation.
    Lda,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedFactorization<F> {
    pub factors: Array2<F>,
    pub loadings: Array2<F>,
    /// Length J for [`NormalizationStyle::Spde`], N for [`NormalizationStyle::Lda`].
    pub scale: Array1<F>,
    pub style: NormalizationStyle,
}

impl<F: Scalar> ProcessedFactorization<F> {
    /// The mean matrix `F Wᵀ` implied by the normalized factorization.
    pub fn reconstruct(&self) -> Array2<F> {
        let mut out = self.factors.dot(&self.loadings.t());
        match self.style {
            NormalizationStyle::Spde => {
                for mut row in out.rows_mut() {
                    row *= &self.scale;
                }
            }
            NormalizationStyle::Lda => {
                for (mut row, &s) in out.rows_mut().into_iter().zip(self.scale.iter()) {
                    row.mapv_inplace(|v| v * s);
                }
            }
        }
        out
    }
}

fn check_inputs<F: Scalar>(f: ArrayView2<'_, F>, w: ArrayView2<'_, F>) -> Result<()> {
    if f.ncols() != w.ncols() {
        return Err(NsfError::Shape(format!("factors have {} columns, loadings {}", f.ncols(), w.ncols())));
    }
    if f.iter().chain(w.iter()).any(|&v| v < F::zero() || !v.is_finite()) {
        return Err(NsfError::Argument("simplex normalization needs finite nonnegative inputs".into()));
    }
    Ok(())
}

/// Divides column `c` of `a` by `s[c]`, multiplies column `c` of `b` by it.
fn move_column_scale<F: Scalar>(a: &mut Array2<F>, b: &mut Array2<F>, s: &Array1<F>) {
    for (c, &v) in s.iter().enumerate() {
        a.column_mut(c).mapv_inplace(|x| x / v);
        b.column_mut(c).mapv_inplace(|x| x * v);
    }
}

/// Rescales rows of `a` to sum to one, returning the row sums. All-zero rows
/// are left at zero with sum zero.
fn normalize_rows<F: Scalar>(a: &mut Array2<F>, what: &str) -> Array1<F> {
    let sums = a.sum_axis(Axis(1));
    let mut zero = 0;
    for (mut row, &s) in a.rows_mut().into_iter().zip(sums.iter()) {
        if s > F::zero() {
            row.mapv_inplace(|x| x / s);
        } else {
            zero += 1;
        }
    }
    if zero > 0 {
        log::warn!("{zero} all-zero {what} rows left unnormalized");
    }
    sums
}

/// Projects `F` (N×L) and `W` (J×L) onto the simplex without changing `F Wᵀ`.
pub fn simplex_normalize<F: Scalar>(
    f: ArrayView2<'_, F>,
    w: ArrayView2<'_, F>,
    style: NormalizationStyle,
) -> Result<ProcessedFactorization<F>> {
    check_inputs(f, w)?;
    let (mut f, mut w) = (f.to_owned(), w.to_owned());
    let scale = match style {
        NormalizationStyle::Spde => {
            let fbar = f.sum_axis(Axis(0));
            if let Some(c) = fbar.iter().position(|&v| !(v > F::zero())) {
                return Err(NsfError::DegenerateComponent(c));
            }
            move_column_scale(&mut f, &mut w, &fbar);
            normalize_rows(&mut w, "loadings")
        }
        NormalizationStyle::Lda => {
            let wbar = w.sum_axis(Axis(0));
            if let Some(c) = wbar.iter().position(|&v| !(v > F::zero())) {
                return Err(NsfError::DegenerateComponent(c));
            }
            move_column_scale(&mut w, &mut f, &wbar);
            normalize_rows(&mut f, "factor")
        }
    };
    Ok(ProcessedFactorization { factors: f, loadings: w, scale, style })
}

/// Components whose column is nonzero in both `a` and `b`.
fn live_components<F: Scalar>(a: &Array2<F>, b: &Array2<F>) -> Vec<usize> {
    let sa = a.sum_axis(Axis(0));
    let sb = b.sum_axis(Axis(0));
    let live: Vec<usize> = (0..a.ncols()).filter(|&c| sa[c] > F::zero() && sb[c] > F::zero()).collect();
    if live.len() < a.ncols() {
        log::warn!("dropping {} degenerate all-zero components", a.ncols() - live.len());
    }
    live
}

/// `γ` and `ρ` of a hybrid model.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialScores<F> {
    pub gamma: Array1<F>,
    pub rho: Array1<F>,
}

fn stacked<F: Scalar>(
    w: ArrayView2<'_, F>,
    v: ArrayView2<'_, F>,
    f: ArrayView2<'_, F>,
    h: ArrayView2<'_, F>,
) -> Result<(Array2<F>, Array2<F>, usize)> {
    let t = w.ncols();
    if f.ncols() != t || h.ncols() != v.ncols() || w.nrows() != v.nrows() || f.nrows() != h.nrows() {
        return Err(NsfError::Shape("spatial and nonspatial blocks disagree".into()));
    }
    let a = concatenate(Axis(1), &[f.view(), h.view()]).map_err(|e| NsfError::Shape(e.to_string()))?;
    let b = concatenate(Axis(1), &[w.view(), v.view()]).map_err(|e| NsfError::Shape(e.to_string()))?;
    check_inputs(a.view(), b.view())?;
    Ok((a, b, t))
}

/// `γ_j`: share of feature `j`'s SPDE-normalized loadings on spatial components.
pub fn feature_spatial_scores<F: Scalar>(
    w: ArrayView2<'_, F>,
    v: ArrayView2<'_, F>,
    f: ArrayView2<'_, F>,
    h: ArrayView2<'_, F>,
) -> Result<Array1<F>> {
    let (a, b, t) = stacked(w, v, f, h)?;
    let live = live_components(&a, &b);
    let p = simplex_normalize(a.select(Axis(1), &live).view(), b.select(Axis(1), &live).view(), NormalizationStyle::Spde)?;
    let spatial: Vec<usize> = live.iter().enumerate().filter(|(_, &c)| c < t).map(|(k, _)| k).collect();
    Ok(p.loadings.select(Axis(1), &spatial).sum_axis(Axis(1)).mapv(|x| x.min(F::one())))
}

/// `ρ_i`: share of observation `i`'s LDA-normalized factors on spatial components.
pub fn observation_spatial_scores<F: Scalar>(
    w: ArrayView2<'_, F>,
    v: ArrayView2<'_, F>,
    f: ArrayView2<'_, F>,
    h: ArrayView2<'_, F>,
) -> Result<Array1<F>> {
    let (a, b, t) = stacked(w, v, f, h)?;
    let live = live_components(&a, &b);
    let p = simplex_normalize(a.select(Axis(1), &live).view(), b.select(Axis(1), &live).view(), NormalizationStyle::Lda)?;
    let spatial: Vec<usize> = live.iter().enumerate().filter(|(_, &c)| c < t).map(|(k, _)| k).collect();
    Ok(p.factors.select(Axis(1), &spatial).sum_axis(Axis(1)).mapv(|x| x.min(F::one())))
}

pub fn spatial_scores<F: Scalar>(
    w: ArrayView2<'_, F>,
    v: ArrayView2<'_, F>,
    f: ArrayView2<'_, F>,
    h: ArrayView2<'_, F>,
) -> Result<SpatialScores<F>> {
    Ok(SpatialScores { gamma: feature_spatial_scores(w, v, f, h)?, rho: observation_spatial_scores(w, v, f, h)? })
}

/// Indices (0-based) of the `k` largest entries of column `l`, descending,
/// ties broken by lower index.
pub fn top_features<F: Scalar>(w_hat: ArrayView2<'_, F>, l: usize, k: usize) -> Result<Vec<usize>> {
    let j = w_hat.nrows();
    if l >= w_hat.ncols() {
        return Err(NsfError::Argument(format!("component {l} out of range")));
    }
    if k < 1 || k > j {
        return Err(NsfError::Argument(format!("need 1 <= k <= J={j}, got {k}")));
    }
    let col = w_hat.column(l);
    let mut idx: Vec<usize> = (0..j).collect();
    idx.sort_by(|&a, &b| col[b].partial_cmp(&col[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn rel_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol * y.abs().max(1e-300))
    }

    #[test]
    fn identity_is_fixed() {
        let i = Array2::<f64>::eye(3);
        for style in [NormalizationStyle::Spde, NormalizationStyle::Lda] {
            let p = simplex_normalize(i.view(), i.view(), style).unwrap();
            assert_eq!(p.factors, i);
            assert_eq!(p.loadings, i);
            assert_eq!(p.scale, Array1::<f64>::ones(3));
        }
    }

    #[test]
    fn spde_sums() {
        let f = array![[1.0, 0.5, 2.0], [0.0, 1.5, 1.0], [3.0, 0.2, 0.0], [0.4, 0.1, 0.7], [2.0, 2.0, 2.0]];
        let w = array![[0.3, 0.0, 1.0], [2.0, 1.0, 0.1], [0.5, 0.5, 0.5], [0.0, 3.0, 0.2]];
        let p = simplex_normalize(f.view(), w.view(), NormalizationStyle::Spde).unwrap();
        for s in p.factors.sum_axis(Axis(0)).iter().chain(p.loadings.sum_axis(Axis(1)).iter()) {
            assert!((s - 1.0_f64).abs() < 1e-14);
        }
        assert!(rel_close(&p.reconstruct(), &f.dot(&w.t()), 1e-12));
        let q = simplex_normalize(f.view(), w.view(), NormalizationStyle::Lda).unwrap();
        for s in q.loadings.sum_axis(Axis(0)).iter().chain(q.factors.sum_axis(Axis(1)).iter()) {
            assert!((s - 1.0_f64).abs() < 1e-14);
        }
        assert!(rel_close(&q.reconstruct(), &f.dot(&w.t()), 1e-12));
    }

    #[test]
    fn degenerate_component_is_reported() {
        let f = array![[1.0, 0.0], [2.0, 0.0]];
        let w = array![[1.0, 1.0]];
        assert!(matches!(
            simplex_normalize(f.view(), w.view(), NormalizationStyle::Spde),
            Err(NsfError::DegenerateComponent(1))
        ));
    }

    #[test]
    fn score_examples() {
        // One feature, normalized loadings (0.25, 0.75).
        let w = array![[0.25]];
        let v = array![[0.75]];
        let f = array![[1.0], [1.0]];
        let h = array![[1.0], [1.0]];
        let g = feature_spatial_scores(w.view(), v.view(), f.view(), h.view()).unwrap();
        assert!((g[0] - 0.25_f64).abs() < 1e-15);
        // One observation, normalized factors (0.6, 0.4).
        let f = array![[0.6]];
        let h = array![[0.4]];
        let w = array![[1.0], [1.0]];
        let v = array![[1.0], [1.0]];
        let r = observation_spatial_scores(w.view(), v.view(), f.view(), h.view()).unwrap();
        assert!((r[0] - 0.6_f64).abs() < 1e-15);
    }

    #[test]
    fn extreme_splits() {
        let f = array![[1.0, 2.0], [0.5, 0.1], [3.0, 1.0]];
        let w = array![[1.0, 0.2], [0.0, 0.4]];
        let empty_w = Array2::<f64>::zeros((2, 0));
        let empty_f = Array2::<f64>::zeros((3, 0));
        let all = spatial_scores(w.view(), empty_w.view(), f.view(), empty_f.view()).unwrap();
        assert!(all.gamma.iter().chain(all.rho.iter()).all(|&x| (x - 1.0).abs() < 1e-14));
        let none = spatial_scores(empty_w.view(), w.view(), empty_f.view(), f.view()).unwrap();
        assert!(none.gamma.iter().chain(none.rho.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn zero_feature_row_scores_zero() {
        let w = array![[0.0], [1.0]];
        let v = array![[0.0], [1.0]];
        let f = array![[1.0], [2.0]];
        let h = array![[1.0], [1.0]];
        let g = feature_spatial_scores(w.view(), v.view(), f.view(), h.view()).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn top_feature_order() {
        let w = array![[0.1], [0.9], [0.5]];
        assert_eq!(top_features(w.view(), 0, 2).unwrap(), vec![1, 2]);
        assert_eq!(top_features(w.view(), 0, 3).unwrap(), vec![1, 2, 0]);
        let tied = array![[0.5], [0.7], [0.5], [0.7]];
        assert_eq!(top_features(tied.view(), 0, 4).unwrap(), vec![1, 3, 0, 2]);
        assert!(top_features(w.view(), 0, 0).is_err());
        assert!(top_features(w.view(), 1, 1).is_err());
    }

    fn nonneg(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(0.01f64..5.0, rows * cols)
            .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
    }

    proptest! {
        #[test]
        fn normalization_preserves_mean(f in nonneg(6, 3), w in nonneg(4, 3)) {
            for style in [NormalizationStyle::Spde, NormalizationStyle::Lda] {
                let p = simplex_normalize(f.view(), w.view(), style).unwrap();
                prop_assert!(rel_close(&p.reconstruct(), &f.dot(&w.t()), 1e-10));
            }
        }

        #[test]
        fn scores_are_scale_invariant(f in nonneg(5, 3), w in nonneg(4, 3), c in 0.1f64..10.0) {
            let (fs, hs) = (f.slice(ndarray::s![.., ..2]), f.slice(ndarray::s![.., 2..]));
            let (ws, vs) = (w.slice(ndarray::s![.., ..2]), w.slice(ndarray::s![.., 2..]));
            let a = spatial_scores(ws, vs, fs, hs).unwrap();
            let mut f2 = f.clone();
            let mut w2 = w.clone();
            f2.column_mut(0).mapv_inplace(|x| x * c);
            w2.column_mut(0).mapv_inplace(|x| x / c);
            let b = spatial_scores(
                w2.slice(ndarray::s![.., ..2]), w2.slice(ndarray::s![.., 2..]),
                f2.slice(ndarray::s![.., ..2]), f2.slice(ndarray::s![.., 2..]),
            ).unwrap();
            for (x, y) in a.gamma.iter().zip(b.gamma.iter()).chain(a.rho.iter().zip(b.rho.iter())) {
                prop_assert!((x - y).abs() < 1e-10);
            }
            prop_assert!(a.gamma.iter().chain(a.rho.iter()).all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
