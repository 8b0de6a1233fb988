//! Kernel-weighted sums over a reference set of observations.
//!
//! Reference rows are kept sorted by their first covariate so that each query
//! only visits the window `|x_j1 - x_1| <= R h_1`. The visiting order is fixed
//! by the data, never by the thread schedule, so results do not depend on the
//! degree of parallelism.

use rayon::prelude::*;

use crate::error::{EhivError, Result};
use crate::kernels::KernelSpec;
use crate::sample::Covariates;

#[derive(Debug, Clone)]
pub struct KernelSmoother {
    spec: KernelSpec,
    h: Vec<f64>,
    inv_h: Vec<f64>,
    dim: usize,
    /// Original row index of each reference point, sorted by first covariate.
    order: Vec<usize>,
    /// Covariate rows in sorted order.
    rows: Vec<f64>,
    first: Vec<f64>,
    /// Normalizing constant `1 / ((n - 1) prod h)` for leave-one-out sums.
    loo_scale: f64,
    /// Normalizing constant `1 / (n prod h)` for sums at arbitrary points.
    point_scale: f64,
}

impl KernelSmoother {
    /// Smoother over every row of `x`.
    pub fn new(x: &Covariates, h: &[f64], spec: KernelSpec) -> Result<Self> {
        let all: Vec<usize> = (0..x.n()).collect();
        Self::over(x, &all, x.n(), h, spec)
    }

    /// Smoother over the rows `reference` of `x`. Scales use `n_total`, the
    /// size of the full sample, so sums over disjoint subsets add up to the
    /// full-sample sum.
    pub fn over(
        x: &Covariates,
        reference: &[usize],
        n_total: usize,
        h: &[f64],
        spec: KernelSpec,
    ) -> Result<Self> {
        if n_total < 2 {
            return Err(EhivError::InsufficientData(format!(
                "kernel sums need at least 2 observations, got {n_total}"
            )));
        }
        let dim = x.dim();
        if h.len() != dim {
            return Err(EhivError::Config(format!(
                "{} bandwidths for {dim} covariates",
                h.len()
            )));
        }
        if h.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(EhivError::Config("bandwidths must be positive".into()));
        }
        let mut order = reference.to_vec();
        if dim > 0 {
            order.sort_by(|&a, &b| x.row(a)[0].total_cmp(&x.row(b)[0]).then(a.cmp(&b)));
        }
        let mut rows = Vec::with_capacity(order.len() * dim);
        for &i in &order {
            rows.extend_from_slice(x.row(i));
        }
        let first = if dim > 0 {
            order.iter().map(|&i| x.row(i)[0]).collect()
        } else {
            Vec::new()
        };
        let prod_h: f64 = h.iter().product();
        Ok(Self {
            spec,
            inv_h: h.iter().map(|v| 1.0 / v).collect(),
            h: h.to_vec(),
            dim,
            order,
            rows,
            first,
            loo_scale: 1.0 / ((n_total - 1) as f64 * prod_h),
            point_scale: 1.0 / (n_total as f64 * prod_h),
        })
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.h
    }

    pub fn kernel(&self) -> KernelSpec {
        self.spec
    }

    /// Calls `f(original_index, weight)` for every reference point near `x0`,
    /// skipping the reference point whose original index is `skip`.
    #[inline]
    fn visit(&self, x0: &[f64], skip: Option<usize>, mut f: impl FnMut(usize, f64)) {
        let (lo, hi) = if self.dim == 0 {
            (0, self.order.len())
        } else {
            let r = self.spec.effective_radius() * self.h[0];
            let lo = self.first.partition_point(|&v| v < x0[0] - r);
            let hi = self.first.partition_point(|&v| v <= x0[0] + r);
            (lo, hi)
        };
        for pos in lo..hi {
            let j = self.order[pos];
            if Some(j) == skip {
                continue;
            }
            let row = &self.rows[pos * self.dim..(pos + 1) * self.dim];
            let mut k = 1.0;
            for c in 0..self.dim {
                k *= self.spec.univariate((row[c] - x0[c]) * self.inv_h[c]);
            }
            if k != 0.0 {
                f(j, k);
            }
        }
    }

    /// Leave-one-out sums at every row of `x`:
    /// `out[i][c] = 1/((n-1) prod h) * sum_{j != i} w_j[c] K((X_j - X_i)/h)`.
    ///
    /// `weights` is row-major `n x m`, indexed by original row.
    pub fn loo_sums(&self, x: &Covariates, weights: &[f64], m: usize) -> Vec<f64> {
        debug_assert_eq!(weights.len(), x.n() * m);
        let mut out = vec![0.0; x.n() * m];
        out.par_chunks_mut(m.max(1)).enumerate().for_each(|(i, acc)| {
            if m == 0 {
                return;
            }
            self.visit(x.row(i), Some(i), |j, k| {
                let w = &weights[j * m..(j + 1) * m];
                for c in 0..m {
                    acc[c] += w[c] * k;
                }
            });
            for v in acc.iter_mut() {
                *v *= self.loo_scale;
            }
        });
        out
    }

    /// Sums at an arbitrary point using every reference row:
    /// `1/(n prod h) * sum_j w_j[c] K((X_j - x0)/h)`.
    pub fn point_sums(&self, x0: &[f64], weights: &[f64], m: usize) -> Vec<f64> {
        let mut acc = vec![0.0; m];
        self.visit(x0, None, |j, k| {
            let w = &weights[j * m..(j + 1) * m];
            for c in 0..m {
                acc[c] += w[c] * k;
            }
        });
        for v in acc.iter_mut() {
            *v *= self.point_scale;
        }
        acc
    }

    /// Calls `f(j, K((X_j - X_i)/h))` for every neighbour `j != i` of row `i`.
    #[cfg(test)]
    pub(crate) fn for_each_loo_neighbor(&self, x: &Covariates, i: usize, f: impl FnMut(usize, f64)) {
        self.visit(x.row(i), Some(i), f)
    }

    #[cfg(test)]
    pub(crate) fn loo_scale(&self) -> f64 {
        self.loo_scale
    }
}

/// Leave-one-out kernel average
/// `phi_A(X_i) = 1/((n-1) h^d) * sum_{j != i} A_j K((X_j - X_i)/h)` at every row.
pub fn loo_kernel_sum(a: &[f64], x: &Covariates, h: &[f64], spec: &KernelSpec) -> Result<Vec<f64>> {
    if a.len() != x.n() {
        return Err(EhivError::Domain(format!(
            "weight vector has length {}, expected {}",
            a.len(),
            x.n()
        )));
    }
    let smoother = KernelSmoother::new(x, h, *spec)?;
    Ok(smoother.loo_sums(x, a, 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn brute_loo(a: &[f64], x: &Covariates, h: &[f64], spec: KernelSpec) -> Vec<f64> {
        let n = x.n();
        let prod_h: f64 = h.iter().product();
        (0..n)
            .map(|i| {
                let mut s = 0.0;
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let u: Vec<f64> = (0..x.dim())
                        .map(|c| (x.row(j)[c] - x.row(i)[c]) / h[c])
                        .collect();
                    s += a[j] * spec.product(&u);
                }
                s / ((n - 1) as f64 * prod_h)
            })
            .collect()
    }

    #[test]
    fn two_points_at_zero_distance() {
        let x = Covariates::from_columns(&[vec![0.0, 0.0]]).unwrap();
        let phi = loo_kernel_sum(&[1.0, 1.0], &x, &[1.0], &KernelSpec::GAUSSIAN4).unwrap();
        assert_abs_diff_eq!(phi[0], 0.598413, epsilon = 1e-6);
        assert_abs_diff_eq!(phi[1], phi[0], epsilon = 0.0);
    }

    #[test]
    fn zero_weights_give_zero() {
        let x = Covariates::from_columns(&[vec![0.0, 0.3, 0.9]]).unwrap();
        let phi = loo_kernel_sum(&[0.0; 3], &x, &[1.0], &KernelSpec::GAUSSIAN4).unwrap();
        assert_eq!(phi, vec![0.0; 3]);
    }

    #[test]
    fn compact_support_boundary_is_excluded() {
        let x = Covariates::from_columns(&[vec![0.0, 1.0, 2.0]]).unwrap();
        let phi = loo_kernel_sum(&[1.0, 2.0, 3.0], &x, &[1.0], &KernelSpec::EPANECHNIKOV4).unwrap();
        assert_eq!(phi[1], 0.0);
    }

    #[test]
    fn single_observation_is_insufficient() {
        let x = Covariates::from_columns(&[vec![0.0]]).unwrap();
        assert!(matches!(
            loo_kernel_sum(&[1.0], &x, &[1.0], &KernelSpec::GAUSSIAN4),
            Err(EhivError::InsufficientData(_))
        ));
    }

    #[test]
    fn matches_brute_force_in_two_dimensions() {
        let c0: Vec<f64> = (0..40).map(|i| ((i * 37) % 17) as f64 / 5.0).collect();
        let c1: Vec<f64> = (0..40).map(|i| ((i * 11) % 13) as f64 / 3.0).collect();
        let x = Covariates::from_columns(&[c0, c1]).unwrap();
        let a: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        for spec in [KernelSpec::GAUSSIAN4, KernelSpec::EPANECHNIKOV4, KernelSpec::GAUSSIAN6] {
            let h = [0.9, 1.7];
            let fast = loo_kernel_sum(&a, &x, &h, &spec).unwrap();
            let slow = brute_loo(&a, &x, &h, spec);
            for (f, s) in fast.iter().zip(&slow) {
                assert_abs_diff_eq!(f, s, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn point_sums_cover_all_rows() {
        let x = Covariates::from_columns(&[vec![-0.5, 0.0, 0.5]]).unwrap();
        let sm = KernelSmoother::new(&x, &[1.0], KernelSpec::GAUSSIAN4).unwrap();
        let got = sm.point_sums(&[0.0], &[1.0, 1.0, 1.0], 1)[0];
        let k = KernelSpec::GAUSSIAN4;
        let want = (2.0 * k.univariate(0.5) + k.univariate(0.0)) / 3.0;
        assert_abs_diff_eq!(got, want, epsilon = 1e-15);
    }
}
