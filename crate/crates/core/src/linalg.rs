//! Dense linear algebra on top of ndarray's GEMM.
//!
//! Cholesky factorization and triangular solves are blocked so that the bulk
//! of the work runs through `general_mat_mul`; the diagonal blocks use the
//! textbook unblocked recurrences. All routines work on row-major
//! (standard layout) matrices and only ever read the lower triangle of a
//! triangular factor.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

const BLOCK: usize = 64;

/// Failure of a Cholesky factorization: the pivot at `pivot` was not positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NotPositiveDefinite {
    pub pivot: usize,
}

fn chol_unblocked<F: Scalar>(mut a: ArrayViewMut2<'_, F>, offset: usize) -> Result<(), NotPositiveDefinite> {
    let n = a.nrows();
    for j in 0..n {
        let mut d = a[[j, j]];
        for p in 0..j {
            d -= a[[j, p]] * a[[j, p]];
        }
        if !(d > F::zero()) || !d.is_finite() {
            return Err(NotPositiveDefinite { pivot: offset + j });
        }
        let d = d.sqrt();
        a[[j, j]] = d;
        for i in (j + 1)..n {
            let mut v = a[[i, j]];
            for p in 0..j {
                v -= a[[i, p]] * a[[j, p]];
            }
            a[[i, j]] = v / d;
        }
    }
    Ok(())
}

/// Lower Cholesky factor `L` with `L Lᵀ = A`. Only the lower triangle of `a`
/// is read; the upper triangle of the result is zero.
pub fn cholesky<F: Scalar>(a: ArrayView2<'_, F>) -> Result<Array2<F>, NotPositiveDefinite> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "cholesky of a non-square matrix");
    let mut l = a.to_owned();
    let mut k = 0;
    while k < n {
        let kb = BLOCK.min(n - k);
        let ke = k + kb;
        chol_unblocked(l.slice_mut(s![k..ke, k..ke]), k)?;
        if ke < n {
            // Panel: P ← P L_kk⁻ᵀ, solved row by row.
            let diag = l.slice(s![k..ke, k..ke]).to_owned();
            let mut panel = l.slice(s![ke.., k..ke]).to_owned();
            for mut row in panel.rows_mut() {
                for j in 0..kb {
                    let mut v = row[j];
                    for p in 0..j {
                        v -= row[p] * diag[[j, p]];
                    }
                    row[j] = v / diag[[j, j]];
                }
            }
            l.slice_mut(s![ke.., k..ke]).assign(&panel);
            // Trailing update of the lower triangle, one block row at a time.
            let mut ib = ke;
            while ib < n {
                let ie = (ib + BLOCK).min(n);
                let lhs = panel.slice(s![ib - ke..ie - ke, ..]);
                let rhs = panel.slice(s![..ie - ke, ..]);
                let mut target = l.slice_mut(s![ib..ie, ke..ie]);
                general_mat_mul(-F::one(), &lhs, &rhs.t(), F::one(), &mut target);
                ib = ie;
            }
        }
        k = ke;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            l[[i, j]] = F::zero();
        }
    }
    Ok(l)
}

/// Solves `L X = B` in place for lower-triangular `L`.
pub fn solve_lower_inplace<F: Scalar>(l: ArrayView2<'_, F>, x: &mut Array2<F>) {
    let n = l.nrows();
    assert_eq!(n, x.nrows(), "triangular solve shape mismatch");
    let mut ib = 0;
    while ib < n {
        let ie = (ib + BLOCK).min(n);
        if ib > 0 {
            let (done, mut rest) = x.view_mut().split_at(Axis(0), ib);
            let mut blk = rest.slice_mut(s![..ie - ib, ..]);
            general_mat_mul(-F::one(), &l.slice(s![ib..ie, ..ib]), &done, F::one(), &mut blk);
        }
        for r in ib..ie {
            let (above, mut below) = x.view_mut().split_at(Axis(0), r);
            let mut row = below.row_mut(0);
            for c in ib..r {
                let f = l[[r, c]];
                if f != F::zero() {
                    row.scaled_add(-f, &above.row(c));
                }
            }
            let d = l[[r, r]];
            row.mapv_inplace(|v| v / d);
        }
        ib = ie;
    }
}

/// Solves `Lᵀ X = B` in place for lower-triangular `L`.
pub fn solve_lower_t_inplace<F: Scalar>(l: ArrayView2<'_, F>, x: &mut Array2<F>) {
    let n = l.nrows();
    assert_eq!(n, x.nrows(), "triangular solve shape mismatch");
    let nblocks = n.div_ceil(BLOCK);
    for b in (0..nblocks).rev() {
        let ib = b * BLOCK;
        let ie = (ib + BLOCK).min(n);
        if ie < n {
            let (head, tail) = x.view_mut().split_at(Axis(0), ie);
            let mut head = head;
            let mut blk = head.slice_mut(s![ib.., ..]);
            general_mat_mul(-F::one(), &l.slice(s![ie.., ib..ie]).t(), &tail, F::one(), &mut blk);
        }
        for r in (ib..ie).rev() {
            let (head, tail) = x.view_mut().split_at(Axis(0), r + 1);
            let mut head = head;
            let mut row = head.row_mut(r);
            for c in (r + 1)..ie {
                let f = l[[c, r]];
                if f != F::zero() {
                    row.scaled_add(-f, &tail.row(c - r - 1));
                }
            }
            let d = l[[r, r]];
            row.mapv_inplace(|v| v / d);
        }
    }
}

/// `L⁻¹ B` for lower-triangular `B`; the result is lower triangular and the
/// zero blocks are skipped, so this costs a third of a general solve.
pub fn solve_lower_tri_rhs<F: Scalar>(l: ArrayView2<'_, F>, b: ArrayView2<'_, F>) -> Array2<F> {
    let n = l.nrows();
    assert_eq!((n, n), b.dim(), "triangular solve shape mismatch");
    let mut x = b.to_owned();
    tril_inplace(&mut x);
    let mut ib = 0;
    while ib < n {
        let ie = (ib + BLOCK).min(n);
        if ib > 0 {
            let (done, mut rest) = x.view_mut().split_at(Axis(0), ib);
            let mut blk = rest.slice_mut(s![..ie - ib, ..ib]);
            general_mat_mul(-F::one(), &l.slice(s![ib..ie, ..ib]), &done.slice(s![.., ..ib]), F::one(), &mut blk);
        }
        for r in ib..ie {
            let (above, mut below) = x.view_mut().split_at(Axis(0), r);
            let mut row = below.row_mut(0);
            for c in ib..r {
                let f = l[[r, c]];
                if f != F::zero() {
                    row.slice_mut(s![..=c]).scaled_add(-f, &above.row(c).slice(s![..=c]));
                }
            }
            let d = l[[r, r]];
            row.slice_mut(s![..=r]).mapv_inplace(|v| v / d);
        }
        ib = ie;
    }
    x
}

/// `L⁻¹` for lower-triangular `L`.
pub fn inv_lower<F: Scalar>(l: ArrayView2<'_, F>) -> Array2<F> {
    solve_lower_tri_rhs(l, Array2::eye(l.nrows()).view())
}

/// `L⁻¹ B`.
pub fn solve_lower<F: Scalar>(l: ArrayView2<'_, F>, b: ArrayView2<'_, F>) -> Array2<F> {
    let mut x = b.to_owned();
    solve_lower_inplace(l, &mut x);
    x
}

/// `L⁻ᵀ B`.
pub fn solve_lower_t<F: Scalar>(l: ArrayView2<'_, F>, b: ArrayView2<'_, F>) -> Array2<F> {
    let mut x = b.to_owned();
    solve_lower_t_inplace(l, &mut x);
    x
}

pub fn solve_lower_vec<F: Scalar>(l: ArrayView2<'_, F>, b: ArrayView1<'_, F>) -> Array1<F> {
    let n = b.len();
    let mut x = b.to_owned().into_shape_with_order((n, 1)).expect("column");
    solve_lower_inplace(l, &mut x);
    x.into_shape_with_order(n).expect("vector")
}

pub fn solve_lower_t_vec<F: Scalar>(l: ArrayView2<'_, F>, b: ArrayView1<'_, F>) -> Array1<F> {
    let n = b.len();
    let mut x = b.to_owned().into_shape_with_order((n, 1)).expect("column");
    solve_lower_t_inplace(l, &mut x);
    x.into_shape_with_order(n).expect("vector")
}

/// Zeroes the strict upper triangle.
pub fn tril_inplace<F: Scalar>(a: &mut Array2<F>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..a.ncols() {
            a[[i, j]] = F::zero();
        }
    }
}

/// Reverse-mode adjoint of the Cholesky factorization.
///
/// Given `L = chol(K)` and the adjoint `L̄` (lower triangle read), returns the
/// symmetric adjoint `K̄` such that `df = Σ K̄ ⊙ dK` for symmetric `dK`.
pub fn chol_backward<F: Scalar>(l: ArrayView2<'_, F>, lbar: ArrayView2<'_, F>) -> Array2<F> {
    let n = l.nrows();
    let mut lbar_low = lbar.to_owned();
    tril_inplace(&mut lbar_low);
    let mut p = l.t().dot(&lbar_low);
    tril_inplace(&mut p);
    let half = F::of(0.5);
    for i in 0..n {
        p[[i, i]] *= half;
    }
    solve_lower_t_inplace(l, &mut p);
    let mut x = p.t().to_owned();
    solve_lower_t_inplace(l, &mut x);
    // x now holds (L⁻ᵀ P L⁻¹)ᵀ; symmetrize.
    let xt = x.t().to_owned();
    (x + xt) * half
}

/// `log |L Lᵀ|` from a Cholesky factor.
pub fn chol_logdet<F: Scalar>(l: ArrayView2<'_, F>) -> F {
    let two = F::of(2.0);
    l.diag().iter().map(|&d| two * d.ln()).sum()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// columns. Intended for the small Gram matrices of randomized SVD.
pub fn sym_eigen<F: Scalar>(a: ArrayView2<'_, F>) -> (Array1<F>, Array2<F>) {
    let n = a.nrows();
    let mut a = a.to_owned();
    let mut v = Array2::<F>::eye(n);
    let total: F = a.iter().map(|&x| x * x).sum();
    let tiny = F::epsilon() * F::epsilon() * total.max(F::min_positive_value());
    for _sweep in 0..100 {
        let mut off = F::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if off <= tiny {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() <= F::min_positive_value() {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (F::of(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + F::one()).sqrt());
                let c = F::one() / (t * t + F::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].partial_cmp(&a[[i, i]]).unwrap_or(std::cmp::Ordering::Equal));
    let vals = Array1::from_iter(order.iter().map(|&i| a[[i, i]]));
    let mut vecs = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vecs.column_mut(dst).assign(&v.column(src));
    }
    (vals, vecs)
}

/// Orthonormalizes the columns of `y` in place (modified Gram–Schmidt, two
/// passes). Columns that vanish numerically are set to zero.
fn orthonormalize<F: Scalar>(y: &mut Array2<F>) {
    let k = y.ncols();
    let norms0: Vec<F> = (0..k).map(|j| y.column(j).dot(&y.column(j)).sqrt()).collect();
    for _pass in 0..2 {
        for j in 0..k {
            for i in 0..j {
                let proj = y.column(i).dot(&y.column(j));
                let qi = y.column(i).to_owned();
                y.column_mut(j).scaled_add(-proj, &qi);
            }
            let nrm = y.column(j).dot(&y.column(j)).sqrt();
            if nrm <= F::of(1e-10) * norms0[j].max(F::min_positive_value()) || nrm == F::zero() {
                y.column_mut(j).fill(F::zero());
            } else {
                y.column_mut(j).mapv_inplace(|v| v / nrm);
            }
        }
    }
}

/// Rank-`k` truncated singular value decomposition `A ≈ U diag(s) Vᵀ`.
#[derive(Debug, Clone)]
pub struct TruncatedSvd<F> {
    pub u: Array2<F>,
    pub s: Array1<F>,
    pub v: Array2<F>,
}

/// Randomized subspace iteration followed by an exact decomposition of the
/// small projected problem. Exact (to round-off) when `rank(A) ≤ k`.
pub fn truncated_svd<F: Scalar>(a: ArrayView2<'_, F>, k: usize, seed: u64) -> TruncatedSvd<F> {
    let (n, p) = a.dim();
    let r = n.min(p);
    assert!(k >= 1 && k <= r, "truncated_svd rank out of range");
    let kk = (k + 10).min(r);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = Array2::from_shape_fn((p, kk), |_| F::of(StandardNormal.sample(&mut rng)));
    let mut q = a.dot(&omega);
    orthonormalize(&mut q);
    for _ in 0..8 {
        let mut z = a.t().dot(&q);
        orthonormalize(&mut z);
        q = a.dot(&z);
        orthonormalize(&mut q);
    }
    let b = q.t().dot(&a);
    let g = b.dot(&b.t());
    let (vals, vecs) = sym_eigen(g.view());
    let mut u = Array2::zeros((n, k));
    let mut s = Array1::zeros(k);
    let mut v = Array2::zeros((p, k));
    for j in 0..k {
        let sigma = vals[j].max(F::zero()).sqrt();
        s[j] = sigma;
        let ub = vecs.column(j);
        let uj = q.dot(&ub);
        u.column_mut(j).assign(&uj);
        if sigma > F::zero() {
            let vj = b.t().dot(&ub).mapv(|x| x / sigma);
            v.column_mut(j).assign(&vj);
        }
        // Sign convention: largest-magnitude entry of each left vector is positive.
        let mut best = F::zero();
        for &x in u.column(j).iter() {
            if x.abs() > best.abs() {
                best = x;
            }
        }
        if best < F::zero() {
            u.column_mut(j).mapv_inplace(|x| -x);
            v.column_mut(j).mapv_inplace(|x| -x);
        }
    }
    TruncatedSvd { u, s, v }
}
