//! Treatment-effect quantities derived from a fitted first and second stage.

use serde::{Deserialize, Serialize};

use crate::error::{EhivError, Result};
use crate::estimator::EhivFit;
use crate::first_stage::FirstStage;
use crate::kernels::KernelSpec;
use crate::sample::{Covariates, Sample};

/// Individual treatment effects of the trimmed-in observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IteEstimates {
    /// Row index of each estimate in the sample.
    pub index: Vec<usize>,
    pub values: Vec<f64>,
}

/// `ITE_i = beta_2 + (|V_1|^(1/2) - |V_0|^(1/2)) / S_i * u_i` on the mask.
pub fn ite_estimates(fs: &FirstStage, fit: &EhivFit, mask: &[bool]) -> Result<IteEstimates> {
    let beta2 = fit.treatment_effect();
    let index: Vec<usize> = (0..fs.n()).filter(|&i| mask[i]).collect();
    if index.is_empty() {
        return Err(EhivError::EmptyActiveSet);
    }
    let values = index
        .iter()
        .map(|&i| {
            let spread = fs.v1[i].abs().sqrt() - fs.v0[i].abs().sqrt();
            beta2 + spread / fs.s[i] * fit.residuals[i]
        })
        .collect();
    Ok(IteEstimates { index, values })
}

/// Average effect on the treated:
/// mean over active treated rows of `Y - delta_0 - (Y - delta_1) |V_0|^(1/2) / |V_1|^(1/2)`.
pub fn estimate_att(sample: &Sample, fs: &FirstStage, mask: &[bool]) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..sample.n() {
        if !mask[i] || sample.d()[i] != 1.0 {
            continue;
        }
        let y = sample.y()[i];
        let ratio = fs.v0[i].abs().sqrt() / fs.v1[i].abs().sqrt();
        sum += y - fs.delta0[i] - (y - fs.delta1[i]) * ratio;
        count += 1;
    }
    if count == 0 {
        return Err(EhivError::EmptyActiveSet);
    }
    Ok(sum / count as f64)
}

/// The unobserved potential outcome `Y_{1 - D_i}` of an active observation.
pub fn counterfactual(i: usize, sample: &Sample, fs: &FirstStage, mask: &[bool]) -> Result<f64> {
    if i >= sample.n() {
        return Err(EhivError::Domain(format!("row {i} out of range")));
    }
    if !mask[i] {
        return Err(EhivError::Trim(format!("row {i} is trimmed out")));
    }
    let y = sample.y()[i];
    let (own, other) = if sample.d()[i] == 1.0 { (1, 0) } else { (0, 1) };
    let ratio = fs.v(other, i).abs().sqrt() / fs.v(own, i).abs().sqrt();
    if !ratio.is_finite() {
        return Err(EhivError::Trim(format!("variance ratio at row {i} is not finite")));
    }
    Ok(fs.delta(other, i) + (y - fs.delta(own, i)) * ratio)
}

/// Bandwidths of the conditional ITE density: `h_f` for the joint kernel,
/// `h_x` for the covariate marginal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IteBandwidths {
    pub h_f: f64,
    pub h_x: Vec<f64>,
}

impl IteBandwidths {
    /// `h_f = 1.06 sd_pooled n^(-1/(d+6))`, `h_x = 1.06 sd_j n^(-1/(d+4))`,
    /// where `sd_pooled` is the root mean variance of the active covariates
    /// and ITEs. `h_f` undersmooths less than the optimal rate.
    pub fn rule_of_thumb(x: &Covariates, ites: &IteEstimates) -> Result<Self> {
        let n = x.n();
        let d = x.dim() as f64;
        let active = x.select(&ites.index);
        let mut variances = Vec::with_capacity(x.dim() + 1);
        let mut h_x = Vec::with_capacity(x.dim());
        for j in 0..x.dim() {
            let sd = active.column_sd(j);
            if !(sd > 0.0) {
                return Err(EhivError::DegenerateCovariate { column: j });
            }
            variances.push(sd * sd);
            h_x.push(crate::kernels::rule_of_thumb(sd, n, d + 4.0));
        }
        let ite_sd = crate::sample::sample_sd(ites.values.iter().copied());
        variances.push(ite_sd * ite_sd);
        let pooled = (variances.iter().sum::<f64>() / variances.len() as f64).sqrt();
        if !(pooled > 0.0) {
            return Err(EhivError::Domain("ITE pseudo-sample has no spread".into()));
        }
        Ok(Self {
            h_f: crate::kernels::rule_of_thumb(pooled, n, d + 6.0),
            h_x,
        })
    }
}

/// Conditional density of the ITE at `e` given `X = x`: the ratio of a joint
/// kernel density over `(X_i, ITE_i)` to the covariate kernel density, both
/// over active rows. Negative values, which higher-order kernels can produce
/// in the tails, are reported as zero.
pub fn ite_density(
    e: f64,
    x: &[f64],
    ites: &IteEstimates,
    covariates: &Covariates,
    bw: &IteBandwidths,
    spec: &KernelSpec,
) -> Result<f64> {
    if !(bw.h_f > 0.0) || bw.h_x.len() != covariates.dim() || bw.h_x.iter().any(|h| !(*h > 0.0)) {
        return Err(EhivError::Config("ITE density bandwidths must be positive".into()));
    }
    if ites.index.is_empty() {
        return Err(EhivError::EmptyActiveSet);
    }
    let dim = covariates.dim();
    let mut num = 0.0;
    let mut den = 0.0;
    for (&i, &ite) in ites.index.iter().zip(&ites.values) {
        let row = covariates.row(i);
        let mut kf = spec.univariate((ite - e) / bw.h_f);
        let mut kx = 1.0;
        for c in 0..dim {
            kf *= spec.univariate((row[c] - x[c]) / bw.h_f);
            kx *= spec.univariate((row[c] - x[c]) / bw.h_x[c]);
        }
        num += kf;
        den += kx;
    }
    let num = num / bw.h_f.powi(dim as i32 + 1);
    let den = den / bw.h_x.iter().product::<f64>();
    if !(den > 0.0) {
        return Err(EhivError::OutOfSupport(format!(
            "covariate density at {x:?} is not positive"
        )));
    }
    Ok((num / den).max(0.0))
}

/// Weights of the adjusted LATE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LateWeights {
    /// `R = sqrt(V_0 / V_1)`.
    pub r: f64,
    pub q0: f64,
    pub q1: f64,
    /// `Q_1 - [R Q_0 + (1 - R)(p(x,1) - p(x,0))]`, zero up to rounding.
    pub identity_residual: f64,
}

/// `Q_1 = 1 - p0 + R p0`, `Q_0 = p1 + (1 - p1)/R`.
pub fn late_weights(r: f64, p0: f64, p1: f64) -> Result<LateWeights> {
    if !(r.is_finite() && r > 0.0) {
        return Err(EhivError::Domain(format!("variance ratio R = {r} must be positive")));
    }
    let q1 = 1.0 - p0 + r * p0;
    let q0 = p1 + (1.0 - p1) / r;
    let identity_residual = q1 - (r * q0 + (1.0 - r) * (p1 - p0));
    if identity_residual.abs() > 1e-9 * (1.0 + q1.abs()) {
        return Err(EhivError::Domain(format!(
            "Q identity violated by {identity_residual}"
        )));
    }
    Ok(LateWeights {
        r,
        q0,
        q1,
        identity_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn late_weights_hand_values() {
        let w = late_weights(1.0, 0.3, 0.8).unwrap();
        assert_eq!((w.q0, w.q1), (1.0, 1.0));
        let w = late_weights(3.7, 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(w.q0, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w.q1, 1.0, epsilon = 1e-15);
        let w = late_weights(2.0, 0.25, 0.75).unwrap();
        assert_abs_diff_eq!(w.q1, 1.25, epsilon = 1e-15);
        assert_abs_diff_eq!(w.q0, 0.875, epsilon = 1e-15);
        assert_abs_diff_eq!(2.0 * w.q0 + (1.0 - 2.0) * 0.5, 1.25, epsilon = 1e-15);
        assert!(late_weights(-1.0, 0.2, 0.4).is_err());
    }

    #[test]
    fn identical_ites_peak_at_their_value() {
        let x = Covariates::from_columns(&[(0..50).map(|i| i as f64 / 10.0 - 2.5).collect()]).unwrap();
        let ites = IteEstimates {
            index: (0..50).collect(),
            values: vec![1.5; 50],
        };
        let bw = IteBandwidths {
            h_f: 0.3,
            h_x: vec![0.5],
        };
        let spec = KernelSpec::GAUSSIAN4;
        let at = |e: f64| ite_density(e, &[0.0], &ites, &x, &bw, &spec).unwrap();
        let peak = at(1.5);
        for e in [0.5, 1.0, 1.3, 1.7, 2.0, 2.5] {
            assert!(at(e) < peak);
        }
    }

    #[test]
    fn density_is_never_negative() {
        let x = Covariates::from_columns(&[(0..30).map(|i| i as f64 / 10.0).collect()]).unwrap();
        let ites = IteEstimates {
            index: (0..30).collect(),
            values: (0..30).map(|i| (i as f64).sin()).collect(),
        };
        let bw = IteBandwidths {
            h_f: 0.2,
            h_x: vec![0.4],
        };
        for k in 0..200 {
            let e = -3.0 + k as f64 * 0.03;
            let f = ite_density(e, &[1.5], &ites, &x, &bw, &KernelSpec::GAUSSIAN4).unwrap();
            assert!(f >= 0.0);
        }
    }
}
