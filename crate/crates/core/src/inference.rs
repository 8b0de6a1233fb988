//! Plug-in asymptotic variance of the EHIV coefficients and a pairs bootstrap.
//!
//! The plug-in estimator is the sandwich `G^{-1} Var(g) G^{-T}` with
//! `G = mean_T[W R'/S]` and `g_i = W_i u_i / S_i - zeta_i`, where `zeta_i`
//! corrects for estimating `S` in the first stage.
//!
//! `zeta_i` needs the kernel sum of `Psi_i - Psi_ji` over `j`. Expanding the
//! squares in `Psi_ji` turns it into first-stage kernel sums of `Y^2`, `Y`
//! and `1` split by treatment, so no additional pass over pairs is needed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EhivError, Result};
use crate::estimator::weighted_moments;
use crate::first_stage::FirstStage;
use crate::linalg::{inverse, symmetrize};
use crate::pipeline::{EhivModel, EstimatorConfig};
use crate::sample::Sample;

/// `Psi_ji = D_j (Y_j - delta_1(X_i))^2 / V_1(X_i) + (1 - D_j)(Y_j - delta_0(X_i))^2 / V_0(X_i)`.
pub fn compute_psi(j: usize, i: usize, sample: &Sample, fs: &FirstStage, mask: &[bool]) -> Result<f64> {
    if i >= sample.n() || j >= sample.n() {
        return Err(EhivError::Domain(format!("index ({j}, {i}) out of range")));
    }
    if !mask[i] {
        return Err(EhivError::Trim(format!("row {i} is trimmed out")));
    }
    let y = sample.y()[j];
    let d = sample.d()[j];
    let r1 = y - fs.delta1[i];
    let r0 = y - fs.delta0[i];
    Ok(d * r1 * r1 / fs.v1[i] + (1.0 - d) * r0 * r0 / fs.v0[i])
}

#[derive(Debug, Clone)]
pub struct OmegaEstimate {
    pub omega: DMatrix<f64>,
    /// `sqrt(omega_kk / n_active)`.
    pub se: Vec<f64>,
    /// Same sandwich with `zeta` set to zero.
    pub naive_omega: DMatrix<f64>,
    pub naive_se: Vec<f64>,
    /// Row index of each entry of `zeta_hat` and `psi_hat`.
    pub index: Vec<usize>,
    pub zeta_hat: Vec<Vec<f64>>,
    pub psi_hat: Vec<f64>,
    /// The matrix `G = mean_T[W R' / S]`.
    pub g: DMatrix<f64>,
}

fn sample_covariance(rows: &[DVector<f64>]) -> DMatrix<f64> {
    let k = rows[0].len();
    let m = rows.len() as f64;
    let mean = rows.iter().fold(DVector::zeros(k), |acc, r| acc + r) / m;
    let mut cov = DMatrix::zeros(k, k);
    for r in rows {
        let c = r - &mean;
        cov += &c * c.transpose();
    }
    cov / (m - 1.0)
}

fn sandwich(g_inv: &DMatrix<f64>, meat: &DMatrix<f64>, active: usize) -> (DMatrix<f64>, Vec<f64>) {
    let mut omega = g_inv * meat * g_inv.transpose();
    symmetrize(&mut omega);
    let se = (0..omega.nrows())
        .map(|k| (omega[(k, k)].max(0.0) / active as f64).sqrt())
        .collect();
    (omega, se)
}

/// Plug-in estimate of the asymptotic variance of a fitted model.
pub fn estimate_omega(model: &EhivModel) -> Result<OmegaEstimate> {
    let sample = model.sample();
    let fs = model.first_stage();
    let fit = model.ehiv();
    let mask = model.mask();
    let n = sample.n();
    let k = sample.n_coef();
    let index: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if index.len() < 2 {
        return Err(EhivError::EmptyActiveSet);
    }

    let inv_s: Vec<f64> = fs.s.iter().map(|s| 1.0 / s).collect();
    let g = weighted_moments(sample, &inv_s, mask, true)?.cross;
    let g_inv = inverse(&g, "EHIV weighted cross-moment matrix")?;

    // Leave-one-out kernel means of D u and Z D u.
    let u = &fit.residuals;
    let weights: Vec<f64> = (0..n)
        .flat_map(|j| {
            let du = sample.d()[j] * u[j];
            [1.0, du, sample.z()[j] * du]
        })
        .collect();
    let sums = model.pooled_smoother().loo_sums(sample.x(), &weights, 3);

    let mut zeta_hat = Vec::with_capacity(index.len());
    let mut psi_hat = Vec::with_capacity(index.len());
    let mut g_rows = Vec::with_capacity(index.len());
    let mut naive_rows = Vec::with_capacity(index.len());
    let mut w_row = vec![0.0; k];
    for &i in &index {
        let m = &fs.moments[i];
        let (d0, d1, v0, v1) = (fs.delta0[i], fs.delta1[i], fs.v0[i], fs.v1[i]);
        let phi1 = m.phi_one();
        let phi_d = m.phi_d();
        let [a0, a1] = m.arm;
        let (yy1, y1) = (a0.yy1 + a1.yy1, a0.y1 + a1.y1);
        let (yy0, y0) = (a0.yy0 + a1.yy0, a0.y0 + a1.y0);
        let psi_sum = (yy1 - 2.0 * d1 * y1 + d1 * d1 * phi_d) / v1
            + (yy0 - 2.0 * d0 * y0 + d0 * d0 * (phi1 - phi_d)) / v0;
        let psi_i = compute_psi(i, i, sample, fs, mask)?;
        let psi_gap = psi_i * phi1 - psi_sum;
        let z_gap = sample.z()[i] * phi1 - m.phi_z();
        let factor = psi_gap * z_gap / (2.0 * fs.phi_denom[i]);

        let row = &sums[i * 3..i * 3 + 3];
        let scale = 1.0 / v1.abs().sqrt();
        let (m_du, m_zdu) = if row[0] != 0.0 {
            (row[1] / row[0] * scale, row[2] / row[0] * scale)
        } else {
            (0.0, 0.0)
        };
        sample.instruments(i, &mut w_row);
        let mut zeta = vec![0.0; k];
        for c in 0..k - 1 {
            zeta[c] = factor * w_row[c] * m_du;
        }
        zeta[k - 1] = factor * m_zdu;
        if zeta.iter().any(|v| !v.is_finite()) {
            return Err(EhivError::Trim(format!("zeta is not finite at row {i}")));
        }

        let score = DVector::from_iterator(k, w_row.iter().map(|w| w * u[i] / fs.s[i]));
        g_rows.push(&score - DVector::from_column_slice(&zeta));
        naive_rows.push(score);
        zeta_hat.push(zeta);
        psi_hat.push(psi_i);
    }

    let (omega, se) = sandwich(&g_inv, &sample_covariance(&g_rows), index.len());
    let (naive_omega, naive_se) = sandwich(&g_inv, &sample_covariance(&naive_rows), index.len());
    Ok(OmegaEstimate {
        omega,
        se,
        naive_omega,
        naive_se,
        index,
        zeta_hat,
        psi_hat,
        g,
    })
}

/// Attaches the plug-in variance and standard errors to the model's fit.
pub fn attach_omega(model: &mut EhivModel) -> Result<OmegaEstimate> {
    let est = estimate_omega(model)?;
    let fit = model.ehiv_mut();
    fit.omega = Some(est.omega.clone());
    fit.se = Some(est.se.clone());
    Ok(est)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSe {
    pub se: Vec<f64>,
    pub reps: usize,
    pub failures: usize,
}

/// Largest tolerated share of failed resamples.
pub const MAX_BOOTSTRAP_FAILURE_SHARE: f64 = 0.2;

/// Pairs bootstrap of the whole pipeline. Replicate `b` draws its rows from
/// the ChaCha8 stream `b` of `seed`.
pub fn bootstrap_se(sample: &Sample, config: &EstimatorConfig, reps: usize, seed: u64) -> Result<BootstrapSe> {
    let n = sample.n();
    bootstrap_with(sample, config, reps, |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        (0..n).map(|_| rng.random_range(0..n)).collect()
    })
}

pub(crate) fn bootstrap_with(
    sample: &Sample,
    config: &EstimatorConfig,
    reps: usize,
    draw: impl Fn(usize) -> Vec<usize> + Sync,
) -> Result<BootstrapSe> {
    if reps < 2 {
        return Err(EhivError::Config("the bootstrap needs at least 2 replicates".into()));
    }
    config.validate()?;
    let draws: Vec<Option<Vec<f64>>> = (0..reps)
        .into_par_iter()
        .map(|b| {
            let rows = draw(b);
            let resample = sample.select(&rows).ok()?;
            EhivModel::fit(resample, config).ok().map(|m| m.ehiv().beta.clone())
        })
        .collect();
    let ok: Vec<Vec<f64>> = draws.into_iter().flatten().collect();
    let failures = reps - ok.len();
    if failures as f64 > MAX_BOOTSTRAP_FAILURE_SHARE * reps as f64 || ok.len() < 2 {
        return Err(EhivError::Instability { failed: failures, total: reps });
    }
    let k = ok[0].len();
    let m = ok.len() as f64;
    let se = (0..k)
        .map(|c| {
            let mean = ok.iter().map(|b| b[c]).sum::<f64>() / m;
            (ok.iter().map(|b| (b[c] - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
        })
        .collect();
    Ok(BootstrapSe {
        se,
        reps,
        failures,
    })
}
