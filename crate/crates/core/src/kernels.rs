//! Higher-order kernels, product kernels and bandwidth rules.
//!
//! Every multivariate kernel is the coordinatewise product of one univariate
//! family. The Gaussian families have unbounded support; sums over
//! observations truncate them at [`GAUSSIAN_TRUNCATION`] standardized units,
//! where the weight is below `1e-30` of the peak.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{EhivError, Result};
use crate::sample::Covariates;

/// Standardized distance beyond which Gaussian kernel weights are treated as zero.
pub const GAUSSIAN_TRUNCATION: f64 = 12.0;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// `(3 - u^2)/2 * phi(u)`, order 4.
    GaussianOrder4,
    /// `(15/8)(1 - 7u^2/3) * (3/4)(1 - u^2)` on `|u| <= 1`, order 4.
    EpanechnikovOrder4,
    /// `(15 - 10u^2 + u^4)/8 * phi(u)`, order 6.
    GaussianOrder6,
}

/// Univariate kernel family used coordinatewise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
}

impl KernelSpec {
    pub const GAUSSIAN4: KernelSpec = KernelSpec {
        family: KernelFamily::GaussianOrder4,
    };
    pub const EPANECHNIKOV4: KernelSpec = KernelSpec {
        family: KernelFamily::EpanechnikovOrder4,
    };
    pub const GAUSSIAN6: KernelSpec = KernelSpec {
        family: KernelFamily::GaussianOrder6,
    };

    pub fn new(family: KernelFamily) -> Self {
        Self { family }
    }

    /// Order R: moments 1..R-1 vanish, moment R does not.
    pub fn order(&self) -> usize {
        match self.family {
            KernelFamily::GaussianOrder4 | KernelFamily::EpanechnikovOrder4 => 4,
            KernelFamily::GaussianOrder6 => 6,
        }
    }

    /// Radius of the support in standardized units; `None` means unbounded.
    pub fn support_radius(&self) -> Option<f64> {
        match self.family {
            KernelFamily::EpanechnikovOrder4 => Some(1.0),
            KernelFamily::GaussianOrder4 | KernelFamily::GaussianOrder6 => None,
        }
    }

    /// Radius used when pruning kernel sums.
    pub(crate) fn effective_radius(&self) -> f64 {
        self.support_radius().unwrap_or(GAUSSIAN_TRUNCATION)
    }

    /// Univariate kernel value, without input validation.
    #[inline]
    pub fn univariate(&self, u: f64) -> f64 {
        match self.family {
            KernelFamily::GaussianOrder4 => {
                let u2 = u * u;
                0.5 * (3.0 - u2) * INV_SQRT_2PI * (-0.5 * u2).exp()
            }
            KernelFamily::EpanechnikovOrder4 => {
                let u2 = u * u;
                if u2 > 1.0 {
                    0.0
                } else {
                    (15.0 / 8.0) * (1.0 - 7.0 / 3.0 * u2) * 0.75 * (1.0 - u2)
                }
            }
            KernelFamily::GaussianOrder6 => {
                let u2 = u * u;
                0.125 * (15.0 - 10.0 * u2 + u2 * u2) * INV_SQRT_2PI * (-0.5 * u2).exp()
            }
        }
    }

    /// Product kernel `prod_j k(u_j)` on already-standardized arguments.
    #[inline]
    pub(crate) fn product(&self, u: &[f64]) -> f64 {
        u.iter().map(|&v| self.univariate(v)).product()
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::GAUSSIAN4
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.family {
            KernelFamily::GaussianOrder4 => "gaussian4",
            KernelFamily::EpanechnikovOrder4 => "epanech4",
            KernelFamily::GaussianOrder6 => "gaussian6",
        };
        f.write_str(name)
    }
}

impl FromStr for KernelSpec {
    type Err = EhivError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian4" | "gaussian_order4" | "kg" => Ok(Self::GAUSSIAN4),
            "epanech4" | "epanechnikov4" | "epanechnikov_order4" | "ke" => Ok(Self::EPANECHNIKOV4),
            "gaussian6" | "gaussian_order6" => Ok(Self::GAUSSIAN6),
            other => Err(EhivError::Config(format!(
                "unknown kernel '{other}' (expected gaussian4, epanech4 or gaussian6)"
            ))),
        }
    }
}

/// Evaluates the product kernel at `u`.
pub fn eval_kernel(u: &[f64], spec: &KernelSpec) -> Result<f64> {
    if let Some(bad) = u.iter().find(|v| !v.is_finite()) {
        return Err(EhivError::Domain(format!("kernel argument {bad} is not finite")));
    }
    Ok(spec.product(u))
}

/// How bandwidths are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// `h_j = c * sd_j * n^(-gamma)`; the standard deviation factor is only
    /// applied when there is more than one covariate.
    SilvermanPow { gamma: f64, scale: f64 },
    /// `h_z = 1.06 * sd_j * (n_z)^(-1/9)` for instrument arm `z`.
    PerArmNinth,
    /// User-supplied bandwidths, one per covariate (a single value is broadcast).
    Fixed(Vec<f64>),
}

impl Default for BandwidthRule {
    fn default() -> Self {
        BandwidthRule::SilvermanPow {
            gamma: 0.2,
            scale: 1.06,
        }
    }
}

impl fmt::Display for BandwidthRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BandwidthRule::SilvermanPow { gamma, scale } => {
                if *gamma == 0.2 && *scale == 1.06 {
                    f.write_str("silverman")
                } else {
                    write!(f, "silverman:{scale}:{gamma}")
                }
            }
            BandwidthRule::PerArmNinth => f.write_str("per-arm"),
            BandwidthRule::Fixed(h) => {
                let parts: Vec<String> = h.iter().map(|v| v.to_string()).collect();
                write!(f, "fixed:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for BandwidthRule {
    type Err = EhivError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = |msg: &str| EhivError::Config(format!("bad bandwidth rule '{s}': {msg}"));
        if s == "silverman" {
            return Ok(Self::default());
        }
        if s == "per-arm" || s == "per_arm" {
            return Ok(Self::PerArmNinth);
        }
        if let Some(rest) = s.strip_prefix("silverman:") {
            let mut it = rest.split(':');
            let scale: f64 = it
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("expected silverman:<scale>:<exponent>"))?;
            let gamma: f64 = it
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("expected silverman:<scale>:<exponent>"))?;
            return Ok(Self::SilvermanPow { gamma, scale });
        }
        if let Some(rest) = s.strip_prefix("fixed:") {
            let values = rest
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("values must be numbers"))?;
            if values.is_empty() || values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(bad("bandwidths must be positive"));
            }
            return Ok(Self::Fixed(values));
        }
        Err(bad("expected silverman, per-arm or fixed:<h>"))
    }
}

/// Count of one instrument arm, used by [`BandwidthRule::PerArmNinth`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArmCount {
    pub arm: usize,
    pub total: usize,
}

/// Resolves a bandwidth rule to one positive bandwidth per covariate.
pub fn resolve_bandwidth(
    x: &Covariates,
    rule: &BandwidthRule,
    arm: Option<ArmCount>,
) -> Result<Vec<f64>> {
    let n = x.n();
    let dim = x.dim();
    if let BandwidthRule::Fixed(h) = rule {
        let h = match (h.len(), dim) {
            (1, d) => vec![h[0]; d],
            (len, d) if len == d => h.clone(),
            (len, d) => {
                return Err(EhivError::Config(format!(
                    "{len} fixed bandwidths given for {d} covariates"
                )))
            }
        };
        if h.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(EhivError::Config("bandwidths must be positive".into()));
        }
        return Ok(h);
    }
    if n < 2 {
        return Err(EhivError::InsufficientData(format!(
            "bandwidth rule needs at least 2 observations, got {n}"
        )));
    }
    let sds = (0..dim)
        .map(|j| {
            let sd = x.column_sd(j);
            if sd > 0.0 && sd.is_finite() {
                Ok(sd)
            } else {
                Err(EhivError::DegenerateCovariate { column: j })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    match rule {
        BandwidthRule::SilvermanPow { gamma, scale } => {
            if !(*gamma > 0.0 && *scale > 0.0) {
                return Err(EhivError::Config("silverman scale and exponent must be positive".into()));
            }
            let base = scale * (n as f64).powf(-gamma);
            Ok(if dim > 1 {
                sds.iter().map(|sd| base * sd).collect()
            } else {
                vec![base; dim]
            })
        }
        BandwidthRule::PerArmNinth => {
            let arm = arm.ok_or_else(|| {
                EhivError::Config("per-arm bandwidth requires arm counts".into())
            })?;
            if arm.arm == 0 || arm.total == 0 {
                return Err(EhivError::InsufficientData(
                    "per-arm bandwidth requires both arms to be non-empty".into(),
                ));
            }
            let base = 1.06 * (arm.arm as f64).powf(-1.0 / 9.0);
            Ok(sds.iter().map(|sd| base * sd).collect())
        }
        BandwidthRule::Fixed(_) => unreachable!(),
    }
}

/// Silverman-style scale with an arbitrary rate: `1.06 * sd * n^(-1/denominator)`.
pub(crate) fn rule_of_thumb(sd: f64, n: usize, denominator: f64) -> f64 {
    1.06 * sd * (n as f64).powf(-1.0 / denominator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    // Composite Simpson rule on [-a, a].
    fn simpson(f: impl Fn(f64) -> f64, a: f64, steps: usize) -> f64 {
        let steps = steps + steps % 2;
        let h = 2.0 * a / steps as f64;
        let mut acc = f(-a) + f(a);
        for k in 1..steps {
            let u = -a + k as f64 * h;
            acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(u);
        }
        acc * h / 3.0
    }

    fn moment(spec: KernelSpec, r: i32) -> f64 {
        let a = spec.support_radius().unwrap_or(GAUSSIAN_TRUNCATION);
        simpson(|u| u.powi(r) * spec.univariate(u), a, 20_000)
    }

    #[test]
    fn moment_conditions_hold_for_every_family() {
        for spec in [KernelSpec::GAUSSIAN4, KernelSpec::EPANECHNIKOV4, KernelSpec::GAUSSIAN6] {
            assert_abs_diff_eq!(moment(spec, 0), 1.0, epsilon = 1e-6);
            let order = spec.order() as i32;
            for r in 1..order {
                assert_abs_diff_eq!(moment(spec, r), 0.0, epsilon = 1e-6);
            }
            assert!(moment(spec, order).abs() > 1e-3, "{spec}: order-R moment vanished");
        }
    }

    #[test]
    fn closed_form_values() {
        let g4 = eval_kernel(&[0.0], &KernelSpec::GAUSSIAN4).unwrap();
        assert_abs_diff_eq!(g4, 3.0 / (2.0 * (2.0 * std::f64::consts::PI).sqrt()), epsilon = 1e-15);
        assert_abs_diff_eq!(g4, 0.598413, epsilon = 1e-6);
        assert_eq!(eval_kernel(&[1.0], &KernelSpec::EPANECHNIKOV4).unwrap(), 0.0);
        assert_eq!(eval_kernel(&[1.5], &KernelSpec::EPANECHNIKOV4).unwrap(), 0.0);
        let g6 = eval_kernel(&[0.0, 0.0], &KernelSpec::GAUSSIAN6).unwrap();
        let one = 15.0 / 8.0 * INV_SQRT_2PI;
        assert_abs_diff_eq!(g6, one * one, epsilon = 1e-15);
        assert_abs_diff_eq!(g6, 0.559529, epsilon = 1e-6);
    }

    #[test]
    fn non_finite_argument_is_rejected() {
        assert!(matches!(
            eval_kernel(&[f64::NAN], &KernelSpec::GAUSSIAN4),
            Err(EhivError::Domain(_))
        ));
        assert!(eval_kernel(&[0.0, f64::INFINITY], &KernelSpec::EPANECHNIKOV4).is_err());
    }

    #[test]
    fn names_round_trip() {
        for name in ["gaussian4", "epanech4", "gaussian6"] {
            assert_eq!(name.parse::<KernelSpec>().unwrap().to_string(), name);
        }
        assert!("triweight".parse::<KernelSpec>().is_err());
        for rule in ["silverman", "per-arm", "fixed:0.5"] {
            assert_eq!(rule.parse::<BandwidthRule>().unwrap().to_string(), rule);
        }
        assert!("fixed:-1".parse::<BandwidthRule>().is_err());
        assert!("adaptive".parse::<BandwidthRule>().is_err());
    }

    #[test]
    fn silverman_scalar_rate() {
        // Exactly unit sample variance: +-1 alternating.
        let data: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let x = Covariates::new(1000, 1, data).unwrap();
        let h = resolve_bandwidth(&x, &BandwidthRule::default(), None).unwrap();
        assert_abs_diff_eq!(h[0], 1.06 * 1000f64.powf(-0.2), epsilon = 1e-15);
        assert_abs_diff_eq!(h[0], 0.26627, epsilon = 2e-5);
    }

    #[test]
    fn silverman_scales_by_sd_in_several_dimensions() {
        let mut data = Vec::new();
        for i in 0..100 {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            data.push(s);
            data.push(3.0 * s);
        }
        let x = Covariates::new(100, 2, data).unwrap();
        let h = resolve_bandwidth(&x, &BandwidthRule::default(), None).unwrap();
        let sd = (100.0f64 / 99.0).sqrt();
        let base = 1.06 * 100f64.powf(-0.2);
        assert_abs_diff_eq!(h[0], base * sd, epsilon = 1e-12);
        assert_abs_diff_eq!(h[1], 3.0 * base * sd, epsilon = 1e-12);
    }

    #[test]
    fn fixed_rule_ignores_data() {
        let x = Covariates::new(3, 1, vec![0.0, 0.0, 0.0]).unwrap();
        let h = resolve_bandwidth(&x, &BandwidthRule::Fixed(vec![0.5]), None).unwrap();
        assert_eq!(h, vec![0.5]);
    }

    #[test]
    fn zero_variance_column_is_degenerate() {
        let x = Covariates::new(3, 1, vec![2.0, 2.0, 2.0]).unwrap();
        assert!(matches!(
            resolve_bandwidth(&x, &BandwidthRule::default(), None),
            Err(EhivError::DegenerateCovariate { column: 0 })
        ));
    }

    #[test]
    fn per_arm_rule_matches_hand_value() {
        // sd = 2.228, c_z * n = 0.5 * 293771.
        let h = 1.06 * 2.228 * (0.5f64 * 293_771.0).powf(-1.0 / 9.0);
        assert_abs_diff_eq!(h, 0.6297, epsilon = 1e-4);
        let sd = 2.228;
        let x = Covariates::new(2, 1, vec![-sd / 2f64.sqrt(), sd / 2f64.sqrt()]).unwrap();
        let got = resolve_bandwidth(
            &x,
            &BandwidthRule::PerArmNinth,
            Some(ArmCount {
                arm: 146_885,
                total: 293_771,
            }),
        )
        .unwrap();
        assert_abs_diff_eq!(got[0], 1.06 * sd * 146_885f64.powf(-1.0 / 9.0), epsilon = 1e-12);
        assert!(resolve_bandwidth(&x, &BandwidthRule::PerArmNinth, None).is_err());
        assert!(resolve_bandwidth(
            &x,
            &BandwidthRule::PerArmNinth,
            Some(ArmCount { arm: 0, total: 2 })
        )
        .is_err());
    }
}
