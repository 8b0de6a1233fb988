//! End-to-end estimation: bandwidth, first stage, trimming, EHIV fit, and the
//! quantities that need the fitted model (heteroskedasticity surface,
//! variance effects, propensity scores).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::effects::{self, IteBandwidths, IteEstimates, LateWeights};
use crate::error::{EhivError, Result};
use crate::estimator::{fit_ehiv, fit_iv, EhivFit, LinearFit};
use crate::first_stage::{
    first_stage_from, in_box, inner_support_box, trim_mask, ArmBandwidths, FirstStage,
    FirstStageEstimator, FirstStageMode, TrimmingSpec,
};
use crate::kernels::{resolve_bandwidth, ArmCount, BandwidthRule, KernelSpec};
use crate::linalg::median;
use crate::sample::Sample;
use crate::smoothing::KernelSmoother;

/// Everything needed to run the estimator on a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EstimatorConfig {
    pub kernel: KernelSpec,
    pub bandwidth: BandwidthRule,
    pub trimming: TrimmingSpec,
    pub first_stage: FirstStageMode,
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        self.trimming.validate()?;
        if self.first_stage == FirstStageMode::Pooled && self.bandwidth == BandwidthRule::PerArmNinth {
            return Err(EhivError::Config(
                "the per-arm bandwidth rule requires the split-by-arm first stage".into(),
            ));
        }
        Ok(())
    }

    /// Bandwidth for pooled smoothing, and the per-arm bandwidths of the first stage.
    pub fn resolve_bandwidths(&self, sample: &Sample) -> Result<(Vec<f64>, ArmBandwidths)> {
        let x = sample.x();
        let n = sample.n();
        let whole = ArmCount { arm: n, total: n };
        let h = resolve_bandwidth(x, &self.bandwidth, Some(whole))?;
        let arms = match (self.first_stage, &self.bandwidth) {
            (FirstStageMode::SplitByArm, BandwidthRule::PerArmNinth) => {
                let arm = |z: u8| ArmCount {
                    arm: sample.arm_count(z),
                    total: n,
                };
                ArmBandwidths {
                    arm0: resolve_bandwidth(x, &self.bandwidth, Some(arm(0)))?,
                    arm1: resolve_bandwidth(x, &self.bandwidth, Some(arm(1)))?,
                }
            }
            _ => ArmBandwidths::pooled(&h),
        };
        Ok((h, arms))
    }
}

/// Variance effects `sigma(1, X_i) - sigma(0, X_i)` on the active rows and their median.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEffects {
    pub index: Vec<usize>,
    pub effects: Vec<f64>,
    pub mve: f64,
}

/// A fitted EHIV model.
#[derive(Debug, Clone)]
pub struct EhivModel {
    sample: Sample,
    config: EstimatorConfig,
    h: Vec<f64>,
    estimator: FirstStageEstimator,
    first_stage: FirstStage,
    mask: Vec<bool>,
    fit: EhivFit,
    pooled: KernelSmoother,
}

impl EhivModel {
    pub fn fit(sample: Sample, config: &EstimatorConfig) -> Result<Self> {
        config.validate()?;
        let (h, arms) = config.resolve_bandwidths(&sample)?;
        let estimator = FirstStageEstimator::new(&sample, config.kernel, &arms)?;
        let first_stage = first_stage_from(&sample, &estimator, &config.kernel, &arms);
        let mask = trim_mask(&first_stage, &config.trimming, sample.x(), &h)?;
        let fit = fit_ehiv(&sample, &first_stage, &mask)?;
        let pooled = KernelSmoother::new(sample.x(), &h, config.kernel)?;
        Ok(Self {
            sample,
            config: config.clone(),
            h,
            estimator,
            first_stage,
            mask,
            fit,
            pooled,
        })
    }

    pub fn sample(&self) -> &Sample {
        &self.sample
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    /// Pooled bandwidth.
    pub fn bandwidth(&self) -> &[f64] {
        &self.h
    }

    pub fn first_stage(&self) -> &FirstStage {
        &self.first_stage
    }

    pub fn first_stage_estimator(&self) -> &FirstStageEstimator {
        &self.estimator
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn ehiv(&self) -> &EhivFit {
        &self.fit
    }

    pub(crate) fn ehiv_mut(&mut self) -> &mut EhivFit {
        &mut self.fit
    }

    pub(crate) fn pooled_smoother(&self) -> &KernelSmoother {
        &self.pooled
    }

    pub fn iv(&self) -> Result<LinearFit> {
        fit_iv(&self.sample)
    }

    fn check_inner_support(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.sample.dim() || x.iter().any(|v| !v.is_finite()) {
            return Err(EhivError::Domain(format!("bad evaluation point {x:?}")));
        }
        let bounds = inner_support_box(self.sample.x(), &self.h, self.config.trimming.boundary_radius);
        if !in_box(x, &bounds) {
            return Err(EhivError::OutOfSupport(format!("{x:?} is outside the inner support")));
        }
        Ok(())
    }

    fn residual_scale_weights(&self) -> Vec<f64> {
        let u = &self.fit.residuals;
        (0..self.sample.n())
            .flat_map(|i| {
                let d = self.sample.d()[i];
                let u2 = u[i] * u[i];
                [1.0, d * u2, (1.0 - d) * u2]
            })
            .collect()
    }

    /// Kernel means of `D u^2` and `(1 - D) u^2` at `x`.
    fn residual_scale_means(&self, x: &[f64], weights: &[f64]) -> Result<(f64, f64)> {
        let s = self.pooled.point_sums(x, weights, 3);
        if !(s[0] > 0.0) {
            return Err(EhivError::OutOfSupport(format!("no kernel mass at {x:?}")));
        }
        Ok((s[1] / s[0], s[2] / s[0]))
    }

    fn sigma_from_parts(d: usize, v: [f64; 2], means: (f64, f64)) -> f64 {
        let vd = v[d].abs();
        (vd / v[1].abs() * means.0 + vd / v[0].abs() * means.1).sqrt()
    }

    /// `sigma_hat(d, x)`, the square root of
    /// `|V_d|/|V_1| * mean_K(D u^2) + |V_d|/|V_0| * mean_K((1-D) u^2)`.
    pub fn sigma(&self, d: usize, x: &[f64]) -> Result<f64> {
        self.sigma_with_floors(d, x, self.config.trimming.kappa0, self.config.trimming.kappa1)
    }

    /// `sigma_hat(d, x)` with explicit variance floors.
    pub fn sigma_with_floors(&self, d: usize, x: &[f64], kappa0: f64, kappa1: f64) -> Result<f64> {
        if d > 1 {
            return Err(EhivError::Domain(format!("treatment arm {d} is not 0 or 1")));
        }
        self.check_inner_support(x)?;
        let p = self.estimator.at(x);
        for (arm, floor) in [(0, kappa0), (1, kappa1)] {
            if !(p.v[arm].is_finite() && p.v[arm].abs() >= floor) {
                return Err(EhivError::Trim(format!(
                    "|V_{arm}({x:?})| = {} is below the floor {floor}",
                    p.v[arm].abs()
                )));
            }
        }
        let means = self.residual_scale_means(x, &self.residual_scale_weights())?;
        Ok(Self::sigma_from_parts(d, p.v, means))
    }

    /// `sigma(1, X_i) - sigma(0, X_i)` on the active rows and its median (MVE).
    pub fn variance_effects(&self) -> Result<VarianceEffects> {
        let index: Vec<usize> = (0..self.sample.n()).filter(|&i| self.mask[i]).collect();
        if index.is_empty() {
            return Err(EhivError::EmptyActiveSet);
        }
        let fs = &self.first_stage;
        let weights = self.residual_scale_weights();
        let effects = index
            .par_iter()
            .map(|&i| {
                let x = self.sample.x().row(i);
                let means = self.residual_scale_means(x, &weights)?;
                let v = [fs.v0[i], fs.v1[i]];
                Ok(Self::sigma_from_parts(1, v, means) - Self::sigma_from_parts(0, v, means))
            })
            .collect::<Result<Vec<f64>>>()?;
        let mve = median(&effects).expect("non-empty");
        Ok(VarianceEffects {
            index,
            effects,
            mve,
        })
    }

    pub fn ites(&self) -> Result<IteEstimates> {
        effects::ite_estimates(&self.first_stage, &self.fit, &self.mask)
    }

    pub fn default_ite_bandwidths(&self, ites: &IteEstimates) -> Result<IteBandwidths> {
        IteBandwidths::rule_of_thumb(self.sample.x(), ites)
    }

    pub fn ite_density(&self, e: f64, x: &[f64], ites: &IteEstimates, bw: &IteBandwidths) -> Result<f64> {
        effects::ite_density(e, x, ites, self.sample.x(), bw, &self.config.kernel)
    }

    pub fn att(&self) -> Result<f64> {
        effects::estimate_att(&self.sample, &self.first_stage, &self.mask)
    }

    pub fn counterfactual(&self, i: usize) -> Result<f64> {
        effects::counterfactual(i, &self.sample, &self.first_stage, &self.mask)
    }

    /// Nadaraya-Watson estimate of `P(D = 1 | X = x, Z = z)`, clipped to `[0, 1]`.
    pub fn propensity(&self, x: &[f64], z: usize) -> Result<f64> {
        if z > 1 {
            return Err(EhivError::Domain(format!("instrument value {z} is not 0 or 1")));
        }
        let (p, mass) = self.estimator.arm_propensity(x, z);
        if !(mass > 0.0) || !p.is_finite() {
            return Err(EhivError::OutOfSupport(format!(
                "no observations with Z = {z} near {x:?}"
            )));
        }
        Ok(p.clamp(0.0, 1.0))
    }

    /// `R(x)`, `Q_0(x)` and `Q_1(x)` of the adjusted LATE.
    pub fn adjusted_late_weights(&self, x: &[f64]) -> Result<LateWeights> {
        let p = self.estimator.at(x);
        let ratio = p.v[0] / p.v[1];
        if !(ratio.is_finite() && ratio > 0.0) {
            return Err(EhivError::Domain(format!(
                "V_0 and V_1 differ in sign at {x:?} (ratio {ratio})"
            )));
        }
        let p0 = self.propensity(x, 0)?;
        let p1 = self.propensity(x, 1)?;
        effects::late_weights(ratio.sqrt(), p0, p1)
    }

    pub fn diagnostics(&self) -> crate::first_stage::TrimDiagnostics {
        self.first_stage.diagnostics(&self.mask)
    }
}
