//! OLS and IV baselines and the trimmed, `1/S`-weighted IV (EHIV) estimator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EhivError, Result};
use crate::first_stage::FirstStage;
use crate::linalg;
use crate::sample::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearMethod {
    Ols,
    Iv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub beta: Vec<f64>,
    pub residuals: Vec<f64>,
    pub method: LinearMethod,
}

/// Mask-averaged weighted cross moments
/// `A = mean_T[w_i W_i R_i']` and `b = mean_T[w_i W_i Y_i]`, where `W` is
/// the instrument vector (or the regressors, for OLS) and `R = (1, X', D)`.
///
/// The EHIV fit and the plug-in variance share this routine, so the matrix
/// inverted by one is the matrix used by the other.
#[derive(Debug, Clone)]
pub(crate) struct WeightedMoments {
    pub cross: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

pub(crate) fn weighted_moments(
    sample: &Sample,
    weights: &[f64],
    mask: &[bool],
    use_instrument: bool,
) -> Result<WeightedMoments> {
    let k = sample.n_coef();
    let mut cross = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    let mut w_row = vec![0.0; k];
    let mut r_row = vec![0.0; k];
    let mut active = 0usize;
    for i in 0..sample.n() {
        if !mask[i] {
            continue;
        }
        active += 1;
        if use_instrument {
            sample.instruments(i, &mut w_row);
        } else {
            sample.regressors(i, &mut w_row);
        }
        sample.regressors(i, &mut r_row);
        let wi = weights[i];
        for a in 0..k {
            let wa = wi * w_row[a];
            rhs[a] += wa * sample.y()[i];
            for b in 0..k {
                cross[(a, b)] += wa * r_row[b];
            }
        }
    }
    if active == 0 {
        return Err(EhivError::EmptyActiveSet);
    }
    let scale = 1.0 / active as f64;
    Ok(WeightedMoments {
        cross: cross * scale,
        rhs: rhs * scale,
    })
}

pub(crate) fn residuals(sample: &Sample, beta: &[f64]) -> Vec<f64> {
    let mut r = vec![0.0; sample.n_coef()];
    (0..sample.n())
        .map(|i| {
            sample.regressors(i, &mut r);
            sample.y()[i] - r.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

fn linear_fit(sample: &Sample, use_instrument: bool, context: &'static str) -> Result<LinearFit> {
    let ones = vec![1.0; sample.n()];
    let mask = vec![true; sample.n()];
    let m = weighted_moments(sample, &ones, &mask, use_instrument)?;
    let beta = linalg::solve(&m.cross, &m.rhs, context)?.as_slice().to_vec();
    Ok(LinearFit {
        residuals: residuals(sample, &beta),
        beta,
        method: if use_instrument {
            LinearMethod::Iv
        } else {
            LinearMethod::Ols
        },
    })
}

/// Exactly identified IV with instruments `(1, X', Z)`.
pub fn fit_iv(sample: &Sample) -> Result<LinearFit> {
    linear_fit(sample, true, "IV cross-moment matrix")
}

/// Least squares of `Y` on `(1, X', D)`.
pub fn fit_ols(sample: &Sample) -> Result<LinearFit> {
    linear_fit(sample, false, "OLS normal equations")
}

/// EHIV estimate. `omega` and `se` are filled in by the inference step.
#[derive(Debug, Clone)]
pub struct EhivFit {
    /// Constant (if any), covariate slopes, then the treatment coefficient.
    pub beta: Vec<f64>,
    /// `Y_i - X_i' beta_1 - beta_2 D_i` for every observation.
    pub residuals: Vec<f64>,
    pub active_mask: Vec<bool>,
    pub omega: Option<DMatrix<f64>>,
    pub se: Option<Vec<f64>>,
}

impl EhivFit {
    pub fn treatment_effect(&self) -> f64 {
        *self.beta.last().expect("coefficient vector is never empty")
    }

    pub fn active(&self) -> usize {
        self.active_mask.iter().filter(|&&m| m).count()
    }
}

/// `beta = [mean_T W R'/S]^{-1} mean_T W Y/S` over the trimmed-in rows.
pub fn fit_ehiv(sample: &Sample, fs: &FirstStage, mask: &[bool]) -> Result<EhivFit> {
    if mask.len() != sample.n() || fs.n() != sample.n() {
        return Err(EhivError::Domain("mask, first stage and sample differ in length".into()));
    }
    if let Some(i) = (0..sample.n()).find(|&i| mask[i] && !(fs.s[i] > 0.0 && fs.s[i].is_finite())) {
        return Err(EhivError::Trim(format!("S_{i} = {} on an active row", fs.s[i])));
    }
    let weights: Vec<f64> = fs.s.iter().map(|s| 1.0 / s).collect();
    let m = weighted_moments(sample, &weights, mask, true)?;
    let beta = linalg::solve(&m.cross, &m.rhs, "EHIV weighted cross-moment matrix")?
        .as_slice()
        .to_vec();
    Ok(EhivFit {
        residuals: residuals(sample, &beta),
        beta,
        active_mask: mask.to_vec(),
        omega: None,
        se: None,
    })
}
