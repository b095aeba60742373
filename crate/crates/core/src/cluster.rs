//! Lloyd's k-means with k-means++ seeding.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { restarts: 10, max_iter: 100 }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit<F> {
    pub centroids: Array2<F>,
    pub labels: Vec<usize>,
    pub inertia: F,
}

fn sq_dist<F: Scalar>(a: ndarray::ArrayView1<'_, F>, b: ndarray::ArrayView1<'_, F>) -> F {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `centers` to `point`; ties go to the lower index.
pub fn nearest<F: Scalar>(point: ndarray::ArrayView1<'_, F>, centers: ArrayView2<'_, F>) -> (usize, F) {
    let mut best = (0, F::infinity());
    for (c, row) in centers.rows().into_iter().enumerate() {
        let d = sq_dist(point, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus<F: Scalar, R: Rng>(x: ArrayView2<'_, F>, k: usize, rng: &mut R) -> Array2<F> {
    let n = x.nrows();
    let mut centers = Array2::zeros((k, x.ncols()));
    centers.row_mut(0).assign(&x.row(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = x.rows().into_iter().map(|r| sq_dist(r, centers.row(0)).as_f64()).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centers.row_mut(c).assign(&x.row(pick));
        for (i, r) in x.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, centers.row(c)).as_f64());
        }
    }
    centers
}

fn lloyd<F: Scalar>(x: ArrayView2<'_, F>, mut centers: Array2<F>, max_iter: usize) -> KMeansFit<F> {
    let (n, d) = x.dim();
    let k = centers.nrows();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, r) in x.rows().into_iter().enumerate() {
            let (c, _) = nearest(r, centers.view());
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<F>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, r) in x.rows().into_iter().enumerate() {
            sums.row_mut(labels[i]).scaled_add(F::one(), &r);
            counts[labels[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let cnt = F::of_usize(counts[c]);
                centers.row_mut(c).assign(&sums.row(c).mapv(|v| v / cnt));
            } else {
                // Re-seed an empty cluster at the point farthest from its centroid.
                let far = (0..n)
                    .map(|i| (i, sq_dist(x.row(i), centers.row(labels[i]))))
                    .fold((0, F::neg_infinity()), |b, p| if p.1 > b.1 { p } else { b })
                    .0;
                centers.row_mut(c).assign(&x.row(far));
                labels[far] = c;
            }
        }
    }
    let inertia = x
        .rows()
        .into_iter()
        .map(|r| nearest(r, centers.view()).1)
        .sum::<F>();
    let labels = x.rows().into_iter().map(|r| nearest(r, centers.view()).0).collect();
    KMeansFit { centroids: centers, labels, inertia }
}

/// Best-of-`restarts` Lloyd clustering into `k` groups.
pub fn kmeans<F: Scalar>(x: ArrayView2<'_, F>, k: usize, seed: u64, cfg: KMeansConfig) -> KMeansFit<F> {
    assert!(k >= 1 && k <= x.nrows(), "k-means needs 1 <= k <= n");
    let mut rng = rng::seeded(seed);
    let mut best: Option<KMeansFit<F>> = None;
    for _ in 0..cfg.restarts.max(1) {
        let init = plus_plus(x, k, &mut rng);
        let fit = lloyd(x, init, cfg.max_iter);
        if best.as_ref().map_or(true, |b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    best.expect("at least one restart")
}

/// Coordinate-wise mean of the rows.
pub fn centroid<F: Scalar>(x: ArrayView2<'_, F>) -> Array1<F> {
    x.mean_axis(ndarray::Axis(0)).expect("nonempty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn separates_two_blobs() {
        let x = array![[0.0, 0.0], [0.2, 0.0], [0.0, 0.2], [10.0, 10.0], [10.2, 10.0], [10.0, 10.2]];
        let fit = kmeans(x.view(), 2, 3, KMeansConfig::default());
        let mut c: Vec<(f64, f64)> = fit.centroids.rows().into_iter().map(|r| (r[0], r[1])).collect();
        c.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let third = 0.2 / 3.0;
        assert!((c[0].0 - third).abs() < 1e-12 && (c[0].1 - third).abs() < 1e-12);
        assert!((c[1].0 - (10.0 + third)).abs() < 1e-12);
        assert_eq!(fit.labels[0], fit.labels[2]);
        assert_ne!(fit.labels[0], fit.labels[3]);
    }

    #[test]
    fn one_cluster_is_the_mean() {
        let x = array![[1.0, 2.0], [3.0, 6.0], [5.0, 1.0]];
        let fit = kmeans(x.view(), 1, 0, KMeansConfig::default());
        assert_eq!(fit.centroids.row(0), centroid(x.view()));
    }
}
