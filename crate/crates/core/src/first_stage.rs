//! Covariance-ratio estimates of complier means and variances.
//!
//! For each instrument arm `z` the estimator keeps leave-one-out kernel sums
//! of `1, D, YD, Y(1-D), Y^2 D, Y^2 (1-D)` over the rows with `Z = z`. The
//! pooled kernel averages are `phi_A = S_0(A) + S_1(A)` and
//! `phi_{AZ} = S_1(A)`, so
//!
//! ```text
//! delta_d = (-1)^(1+d) (phi_1 phi_{Y1(D=d)Z} - phi_{Y1(D=d)} phi_Z) / (phi_1 phi_DZ - phi_D phi_Z)
//! V_d     = (-1)^(1+d) (phi_1 phi_{Y^2 1(D=d)Z} - phi_{Y^2 1(D=d)} phi_Z) / (...) - delta_d^2
//! ```
//!
//! With a common bandwidth this is the pooled estimator; with one bandwidth
//! per arm it is the split-by-arm variant, which reduces to
//! `(m_1(A) - m_0(A)) / (p_1 - p_0)` with per-arm regressions `m_z`.
//!
//! The population objects `xi_1(x)`, `xi_2(x)` and `C(x) = xi_2 - xi_1^2`
//! (moments of the error among compliers) are never estimated: `V_d(x)`
//! equals `sigma(d, x)^2 C(x)`, so ratios of `V_1` and `V_0` identify the
//! heteroskedasticity without `C`.

use serde::{Deserialize, Serialize};

use crate::error::{EhivError, Result};
use crate::kernels::KernelSpec;
use crate::sample::{Covariates, Sample};
use crate::smoothing::KernelSmoother;

const ARM_COLS: usize = 6;

/// Trimming constants.
///
/// `tau` floors the absolute local compliance gap `Cov(D, Z | X) / Var(Z | X)`,
/// estimated as `phi_denom / (phi_Z (phi_1 - phi_Z))`; `kappa0`/`kappa1` floor `|V_0|` and
/// `|V_1|`; `boundary_radius` shrinks the covariate box by that many
/// bandwidths on each side (0 disables boundary trimming).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrimmingSpec {
    pub tau: f64,
    pub kappa0: f64,
    pub kappa1: f64,
    pub boundary_radius: f64,
}

impl Default for TrimmingSpec {
    fn default() -> Self {
        Self {
            tau: 0.1,
            kappa0: 0.01,
            kappa1: 0.01,
            boundary_radius: 1.0,
        }
    }
}

impl TrimmingSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !(positive(self.tau) && positive(self.kappa0) && positive(self.kappa1)) {
            return Err(EhivError::Config("trimming floors must be strictly positive".into()));
        }
        if !(self.boundary_radius.is_finite() && self.boundary_radius >= 0.0) {
            return Err(EhivError::Config("boundary radius must be non-negative".into()));
        }
        Ok(())
    }
}

/// Pooled covariance-ratio form (one bandwidth) or split-by-arm regressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstStageMode {
    #[default]
    Pooled,
    SplitByArm,
}

/// Bandwidth used for the rows of each instrument arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmBandwidths {
    pub arm0: Vec<f64>,
    pub arm1: Vec<f64>,
}

impl ArmBandwidths {
    pub fn pooled(h: &[f64]) -> Self {
        Self {
            arm0: h.to_vec(),
            arm1: h.to_vec(),
        }
    }
}

/// Kernel sums of one arm: `1, D, YD, Y(1-D), Y^2 D, Y^2 (1-D)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct ArmMoments {
    pub one: f64,
    pub d: f64,
    pub y1: f64,
    pub y0: f64,
    pub yy1: f64,
    pub yy0: f64,
}

impl ArmMoments {
    fn from_slice(s: &[f64]) -> Self {
        Self {
            one: s[0],
            d: s[1],
            y1: s[2],
            y0: s[3],
            yy1: s[4],
            yy0: s[5],
        }
    }
}

/// Kernel moments of both arms at one point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct LocalMoments {
    pub arm: [ArmMoments; 2],
}

/// First-stage quantities at a single point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointEstimate {
    pub delta: [f64; 2],
    pub v: [f64; 2],
    /// `phi_1 phi_DZ - phi_D phi_Z`.
    pub phi_denom: f64,
    /// `phi_denom / (phi_Z (phi_1 - phi_Z))`, the local compliance gap
    /// `E[D | Z = 1, x] - E[D | Z = 0, x]`.
    pub gap: f64,
    /// `phi_1`, the kernel density estimate at the point.
    pub density: f64,
}

impl LocalMoments {
    pub fn phi_one(&self) -> f64 {
        self.arm[0].one + self.arm[1].one
    }

    pub fn phi_d(&self) -> f64 {
        self.arm[0].d + self.arm[1].d
    }

    pub fn phi_z(&self) -> f64 {
        self.arm[1].one
    }

    pub fn phi_denom(&self) -> f64 {
        self.phi_one() * self.arm[1].d - self.phi_d() * self.phi_z()
    }

    /// `(phi_A, phi_AZ)` for `A = Y 1(D=d)` and `A = Y^2 1(D=d)`.
    fn outcome_sums(&self, d: usize) -> ((f64, f64), (f64, f64)) {
        let [a0, a1] = self.arm;
        if d == 1 {
            ((a0.y1 + a1.y1, a1.y1), (a0.yy1 + a1.yy1, a1.yy1))
        } else {
            ((a0.y0 + a1.y0, a1.y0), (a0.yy0 + a1.yy0, a1.yy0))
        }
    }

    pub fn solve(&self) -> PointEstimate {
        let phi1 = self.phi_one();
        let phiz = self.phi_z();
        let den = self.phi_denom();
        let mut delta = [0.0; 2];
        let mut v = [0.0; 2];
        for d in 0..2 {
            let sign = if d == 1 { 1.0 } else { -1.0 };
            let ((pa, paz), (pa2, pa2z)) = self.outcome_sums(d);
            let mean = sign * (phi1 * paz - pa * phiz) / den;
            let second = sign * (phi1 * pa2z - pa2 * phiz) / den;
            delta[d] = mean;
            v[d] = second - mean * mean;
        }
        PointEstimate {
            delta,
            v,
            phi_denom: den,
            gap: den / (phiz * (phi1 - phiz)),
            density: phi1,
        }
    }
}

fn arm_weights(sample: &Sample) -> Vec<f64> {
    let mut w = Vec::with_capacity(sample.n() * ARM_COLS);
    for ((&y, &d), _) in sample.y().iter().zip(sample.d()).zip(sample.z()) {
        let nd = 1.0 - d;
        w.extend_from_slice(&[1.0, d, y * d, y * nd, y * y * d, y * y * nd]);
    }
    w
}

/// Reusable per-arm kernel sums for one sample.
#[derive(Debug, Clone)]
pub struct FirstStageEstimator {
    smoothers: [KernelSmoother; 2],
    weights: Vec<f64>,
}

impl FirstStageEstimator {
    pub fn new(sample: &Sample, spec: KernelSpec, bandwidths: &ArmBandwidths) -> Result<Self> {
        let x = sample.x();
        let rows = |arm: f64| -> Vec<usize> {
            (0..sample.n()).filter(|&i| sample.z()[i] == arm).collect()
        };
        let s0 = KernelSmoother::over(x, &rows(0.0), sample.n(), &bandwidths.arm0, spec)?;
        let s1 = KernelSmoother::over(x, &rows(1.0), sample.n(), &bandwidths.arm1, spec)?;
        Ok(Self {
            smoothers: [s0, s1],
            weights: arm_weights(sample),
        })
    }

    pub(crate) fn loo_moments(&self, x: &Covariates) -> Vec<LocalMoments> {
        let sums: Vec<Vec<f64>> = self
            .smoothers
            .iter()
            .map(|s| s.loo_sums(x, &self.weights, ARM_COLS))
            .collect();
        (0..x.n())
            .map(|i| LocalMoments {
                arm: [
                    ArmMoments::from_slice(&sums[0][i * ARM_COLS..(i + 1) * ARM_COLS]),
                    ArmMoments::from_slice(&sums[1][i * ARM_COLS..(i + 1) * ARM_COLS]),
                ],
            })
            .collect()
    }

    pub(crate) fn moments_at(&self, x0: &[f64]) -> LocalMoments {
        let a0 = self.smoothers[0].point_sums(x0, &self.weights, ARM_COLS);
        let a1 = self.smoothers[1].point_sums(x0, &self.weights, ARM_COLS);
        LocalMoments {
            arm: [ArmMoments::from_slice(&a0), ArmMoments::from_slice(&a1)],
        }
    }

    /// First-stage estimates at an arbitrary covariate value, using every row.
    pub fn at(&self, x0: &[f64]) -> PointEstimate {
        self.moments_at(x0).solve()
    }

    /// Nadaraya-Watson estimate of `P(D = 1 | X = x0, Z = z)` and the arm's
    /// kernel mass at `x0`.
    pub(crate) fn arm_propensity(&self, x0: &[f64], z: usize) -> (f64, f64) {
        let m = self.moments_at(x0).arm[z];
        (m.d / m.one, m.one)
    }
}

/// Per-observation first-stage output.
///
/// Entries can be non-finite when the denominator vanishes; trimming removes
/// those observations before any second-stage use.
#[derive(Debug, Clone)]
pub struct FirstStage {
    pub delta0: Vec<f64>,
    pub delta1: Vec<f64>,
    pub v0: Vec<f64>,
    pub v1: Vec<f64>,
    /// `|V_0|^(1/2)` for untreated rows, `|V_1|^(1/2)` for treated rows.
    pub s: Vec<f64>,
    pub phi_denom: Vec<f64>,
    pub gap: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidths: ArmBandwidths,
    pub kernel: KernelSpec,
    pub(crate) moments: Vec<LocalMoments>,
}

impl FirstStage {
    pub fn n(&self) -> usize {
        self.s.len()
    }

    pub fn delta(&self, d: usize, i: usize) -> f64 {
        if d == 1 {
            self.delta1[i]
        } else {
            self.delta0[i]
        }
    }

    pub fn v(&self, d: usize, i: usize) -> f64 {
        if d == 1 {
            self.v1[i]
        } else {
            self.v0[i]
        }
    }

    /// Multiplies every `S_i` by `c`. Used to check scale invariance.
    pub fn with_scaled_s(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.s.iter_mut().for_each(|s| *s *= c);
        out
    }

    /// Count of active observations where `V_0` and `V_1` differ in sign.
    pub fn sign_violations(&self, mask: &[bool]) -> usize {
        mask.iter()
            .enumerate()
            .filter(|&(i, &m)| m && (self.v0[i] < 0.0) != (self.v1[i] < 0.0))
            .count()
    }

    pub fn diagnostics(&self, mask: &[bool]) -> TrimDiagnostics {
        let active = mask.iter().filter(|&&m| m).count();
        TrimDiagnostics {
            n: self.n(),
            active,
            trimmed_fraction: 1.0 - active as f64 / self.n() as f64,
            sign_violations: self.sign_violations(mask),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrimDiagnostics {
    pub n: usize,
    pub active: usize,
    pub trimmed_fraction: f64,
    pub sign_violations: usize,
}

/// Pooled first stage with a single bandwidth.
pub fn estimate_first_stage(sample: &Sample, spec: &KernelSpec, h: &[f64]) -> Result<FirstStage> {
    estimate_first_stage_with(sample, spec, &ArmBandwidths::pooled(h))
}

/// First stage with arm-specific bandwidths.
pub fn estimate_first_stage_with(
    sample: &Sample,
    spec: &KernelSpec,
    bandwidths: &ArmBandwidths,
) -> Result<FirstStage> {
    let est = FirstStageEstimator::new(sample, *spec, bandwidths)?;
    Ok(first_stage_from(sample, &est, spec, bandwidths))
}

pub(crate) fn first_stage_from(
    sample: &Sample,
    est: &FirstStageEstimator,
    spec: &KernelSpec,
    bandwidths: &ArmBandwidths,
) -> FirstStage {
    let moments = est.loo_moments(sample.x());
    let n = sample.n();
    let mut fs = FirstStage {
        delta0: Vec::with_capacity(n),
        delta1: Vec::with_capacity(n),
        v0: Vec::with_capacity(n),
        v1: Vec::with_capacity(n),
        s: Vec::with_capacity(n),
        phi_denom: Vec::with_capacity(n),
        gap: Vec::with_capacity(n),
        density: Vec::with_capacity(n),
        bandwidths: bandwidths.clone(),
        kernel: *spec,
        moments: Vec::new(),
    };
    for (i, m) in moments.iter().enumerate() {
        let p = m.solve();
        fs.delta0.push(p.delta[0]);
        fs.delta1.push(p.delta[1]);
        fs.v0.push(p.v[0]);
        fs.v1.push(p.v[1]);
        let d = sample.d()[i];
        fs.s.push(p.v[0].abs().sqrt() * (1.0 - d) + p.v[1].abs().sqrt() * d);
        fs.phi_denom.push(p.phi_denom);
        fs.gap.push(p.gap);
        fs.density.push(p.density);
    }
    fs.moments = moments;
    fs
}

/// Per-coordinate inner-support box `[min + r h, max - r h]`.
pub fn inner_support_box(x: &Covariates, h: &[f64], radius: f64) -> Vec<(f64, f64)> {
    (0..x.dim())
        .map(|j| {
            let (lo, hi) = x
                .column(j)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            (lo + radius * h[j], hi - radius * h[j])
        })
        .collect()
}

pub(crate) fn in_box(row: &[f64], bounds: &[(f64, f64)]) -> bool {
    row.iter().zip(bounds).all(|(&v, &(lo, hi))| v >= lo && v <= hi)
}

/// Trimming indicator `T_ni`.
pub fn trim_mask(fs: &FirstStage, trim: &TrimmingSpec, x: &Covariates, h: &[f64]) -> Result<Vec<bool>> {
    trim.validate()?;
    let bounds = inner_support_box(x, h, trim.boundary_radius);
    let mask: Vec<bool> = (0..fs.n())
        .map(|i| {
            let ok = |v: f64, floor: f64| v.is_finite() && v.abs() >= floor;
            ok(fs.gap[i], trim.tau)
                && ok(fs.v0[i], trim.kappa0)
                && ok(fs.v1[i], trim.kappa1)
                && fs.s[i] > 0.0
                && fs.delta0[i].is_finite()
                && fs.delta1[i].is_finite()
                && in_box(x.row(i), &bounds)
        })
        .collect();
    if !mask.iter().any(|&m| m) {
        return Err(EhivError::EmptyActiveSet);
    }
    Ok(mask)
}
