//! Triangular data-generating process with endogenous heteroskedasticity and
//! the Monte Carlo harness built on it.
//!
//! Draws use ChaCha8 seeded with `seed` on stream `stream` (the replication
//! index), standard normals from `rand_distr::StandardNormal` (ziggurat), and
//! `(eps, eta)` correlated through the Cholesky factor of `[[1, rho], [rho, 1]]`.
//! Per replication the draw order is `x, z, e1, e2` for each observation in turn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{EhivError, Result};
use crate::estimator::fit_iv;
use crate::kernels::KernelSpec;
use crate::linalg::median;
use crate::pipeline::{EhivModel, EstimatorConfig};
use crate::sample::{Covariates, Sample};

/// `Y = b0 + b1 X + b2 D + (0.1 + 0.25|X| + lambda0 D) eps`,
/// `D = 1[Phi(eta) >= 0.2|X| + r0 Z]`, `corr(eps, eta) = rho0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda0: f64,
    pub r0: f64,
    pub rho0: f64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            beta0: 0.0,
            beta1: 1.0,
            beta2: 1.0,
            lambda0: 0.5,
            r0: 0.5,
            rho0: 0.5,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.beta0, self.beta1, self.beta2, self.lambda0, self.r0, self.rho0]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(EhivError::Config("DGP parameters must be finite".into()));
        }
        if !(self.rho0.abs() < 1.0) {
            return Err(EhivError::Config(format!("rho0 = {} must lie in (-1, 1)", self.rho0)));
        }
        if self.lambda0 < 0.0 {
            return Err(EhivError::Config(format!("lambda0 = {} must be nonnegative", self.lambda0)));
        }
        if !(self.r0 > 0.0 && self.r0 <= 1.0) {
            return Err(EhivError::Config(format!("r0 = {} must lie in (0, 1]", self.r0)));
        }
        Ok(())
    }

    pub fn truth(&self) -> Vec<f64> {
        vec![self.beta0, self.beta1, self.beta2]
    }

    /// `sigma(d, x) = 0.1 + 0.25|x| + lambda0 d`.
    pub fn sigma(&self, d: f64, x: f64) -> f64 {
        0.1 + 0.25 * x.abs() + self.lambda0 * d
    }
}

/// A simulated sample together with its structural errors.
#[derive(Debug, Clone)]
pub struct SimDraw {
    pub sample: Sample,
    pub eps: Vec<f64>,
    pub eta: Vec<f64>,
}

pub fn draw_sample(cfg: &DgpConfig, n: usize, seed: u64) -> Result<SimDraw> {
    draw_sample_stream(cfg, n, seed, 0)
}

pub fn draw_sample_stream(cfg: &DgpConfig, n: usize, seed: u64, stream: u64) -> Result<SimDraw> {
    cfg.validate()?;
    if n < 2 {
        return Err(EhivError::InsufficientData(format!("cannot draw a sample of size {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let phi = Normal::standard();
    let tail = (1.0 - cfg.rho0 * cfg.rho0).sqrt();
    let (mut x, mut y, mut d, mut z) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let (mut eps, mut eta) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let xi: f64 = rng.sample(StandardNormal);
        let zi = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let ei = e1;
        let hi = cfg.rho0 * e1 + tail * e2;
        let di = if phi.cdf(hi) >= 0.2 * xi.abs() + cfg.r0 * zi { 1.0 } else { 0.0 };
        y.push(cfg.beta0 + cfg.beta1 * xi + cfg.beta2 * di + cfg.sigma(di, xi) * ei);
        x.push(xi);
        z.push(zi);
        d.push(di);
        eps.push(ei);
        eta.push(hi);
    }
    if z.iter().all(|&v| v == z[0]) {
        return Err(EhivError::InsufficientData("the draw has a single instrument arm".into()));
    }
    let sample = Sample::new(y, d, z, Covariates::from_columns(&[x])?, true)?;
    Ok(SimDraw { sample, eps, eta })
}

/// Runs `f(rep)` for `rep = 0..reps` in parallel, returning results in index order.
pub fn run_replications<T: Send>(reps: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Vec<Result<T>> {
    (0..reps).into_par_iter().map(f).collect()
}

/// Largest tolerated share of failed replications.
pub const MAX_FAILURE_SHARE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefSummary {
    pub mb: f64,
    pub medb: f64,
    pub sd: f64,
    pub rmse: f64,
}

/// Per-coefficient MB, MEDB, SD (denominator `reps - 1`) and RMSE.
pub fn summarize(estimates: &[Vec<f64>], truth: &[f64]) -> Result<Vec<CoefSummary>> {
    let reps = estimates.len();
    if reps < 2 {
        return Err(EhivError::InsufficientData(format!(
            "summaries need at least 2 replications, got {reps}"
        )));
    }
    if estimates.iter().any(|e| e.len() != truth.len()) {
        return Err(EhivError::Domain("estimate and truth lengths differ".into()));
    }
    let m = reps as f64;
    Ok((0..truth.len())
        .map(|k| {
            let err: Vec<f64> = estimates.iter().map(|e| e[k] - truth[k]).collect();
            let mb = err.iter().sum::<f64>() / m;
            let sd = (err.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
            let rmse = (err.iter().map(|v| v * v).sum::<f64>() / m).sqrt();
            CoefSummary {
                mb,
                medb: median(&err).expect("non-empty"),
                sd,
                rmse,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrimSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub estimator: String,
    /// Kernel of the first stage, absent for estimators that do not use one.
    pub kernel: Option<String>,
    pub n: usize,
    pub reps: usize,
    pub failures: usize,
    pub truth: Vec<f64>,
    pub coefficients: Vec<CoefSummary>,
    pub trim: Option<TrimSummary>,
}

impl McReport {
    fn build(
        estimator: &str,
        kernel: Option<KernelSpec>,
        n: usize,
        truth: &[f64],
        outcomes: &[Option<Vec<f64>>],
        trim: Option<TrimSummary>,
    ) -> Result<Self> {
        let reps = outcomes.len();
        let ok: Vec<Vec<f64>> = outcomes.iter().flatten().cloned().collect();
        let failures = reps - ok.len();
        if failures as f64 > MAX_FAILURE_SHARE * reps as f64 {
            return Err(EhivError::Harness { failed: failures, total: reps });
        }
        Ok(Self {
            estimator: estimator.to_string(),
            kernel: kernel.map(|k| k.to_string()),
            n,
            reps,
            failures,
            truth: truth.to_vec(),
            coefficients: summarize(&ok, truth)?,
            trim,
        })
    }
}

/// Estimates of one replication; `None` marks a failed fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub iv: Option<Vec<f64>>,
    pub ehiv: Option<Vec<f64>>,
    pub trimmed_fraction: Option<f64>,
}

/// One replication: draw on stream `rep`, then fit IV and EHIV.
pub fn replicate(cfg: &DgpConfig, n: usize, config: &EstimatorConfig, seed: u64, rep: usize) -> Result<McRecord> {
    let draw = draw_sample_stream(cfg, n, seed, rep as u64)?;
    let iv = fit_iv(&draw.sample).ok().map(|f| f.beta);
    let model = EhivModel::fit(draw.sample, config).ok();
    Ok(McRecord {
        iv,
        trimmed_fraction: model.as_ref().map(|m| m.diagnostics().trimmed_fraction),
        ehiv: model.map(|m| m.ehiv().beta.clone()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRun {
    pub iv: McReport,
    pub ehiv: McReport,
}

pub fn run_monte_carlo(
    cfg: &DgpConfig,
    n: usize,
    reps: usize,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<McRun> {
    cfg.validate()?;
    config.validate()?;
    if reps < 2 {
        return Err(EhivError::Config("a Monte Carlo run needs at least 2 replications".into()));
    }
    let records = run_replications(reps, |rep| replicate(cfg, n, config, seed, rep))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    reports_from_records(cfg, n, config, &records)
}

pub fn reports_from_records(
    cfg: &DgpConfig,
    n: usize,
    config: &EstimatorConfig,
    records: &[McRecord],
) -> Result<McRun> {
    let truth = cfg.truth();
    let iv: Vec<Option<Vec<f64>>> = records.iter().map(|r| r.iv.clone()).collect();
    let ehiv: Vec<Option<Vec<f64>>> = records.iter().map(|r| r.ehiv.clone()).collect();
    let fractions: Vec<f64> = records.iter().filter_map(|r| r.trimmed_fraction).collect();
    let trim = (!fractions.is_empty()).then(|| TrimSummary {
        mean: fractions.iter().sum::<f64>() / fractions.len() as f64,
        min: fractions.iter().cloned().fold(f64::INFINITY, f64::min),
        max: fractions.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    });
    Ok(McRun {
        iv: McReport::build("IV", None, n, &truth, &iv, None)?,
        ehiv: McReport::build("EHIV", Some(config.kernel), n, &truth, &ehiv, trim)?,
    })
}

/// Writes reports as rows `estimator,kernel,n,parameter,MB,MEDB,SD,RMSE`.
pub fn write_table<W: std::io::Write>(reports: &[&McReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["estimator", "kernel", "n", "parameter", "MB", "MEDB", "SD", "RMSE"])?;
    for r in reports {
        for (k, c) in r.coefficients.iter().enumerate() {
            w.write_record([
                r.estimator.clone(),
                r.kernel.clone().unwrap_or_else(|| "NA".into()),
                r.n.to_string(),
                format!("beta{k}"),
                format!("{:.4}", c.mb),
                format!("{:.4}", c.medb),
                format!("{:.4}", c.sd),
                format!("{:.4}", c.rmse),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn draws_are_reproducible() {
        let cfg = DgpConfig::default();
        let a = draw_sample(&cfg, 500, 7480).unwrap();
        let b = draw_sample(&cfg, 500, 7480).unwrap();
        assert_eq!(a.sample, b.sample);
        assert_eq!(a.eps, b.eps);
        let c = draw_sample_stream(&cfg, 500, 7480, 1).unwrap();
        assert_ne!(a.sample.y(), c.sample.y());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            DgpConfig { rho0: 1.0, ..DgpConfig::default() },
            DgpConfig { lambda0: -0.1, ..DgpConfig::default() },
            DgpConfig { r0: 0.0, ..DgpConfig::default() },
            DgpConfig { r0: 1.2, ..DgpConfig::default() },
        ] {
            assert!(matches!(draw_sample(&cfg, 10, 1), Err(EhivError::Config(_))));
        }
    }

    #[test]
    fn large_draw_moments() {
        let cfg = DgpConfig::default();
        let n = 1_000_000;
        let draw = draw_sample(&cfg, n, 3).unwrap();
        let x: Vec<f64> = draw.sample.x().column(0).collect();
        let m = n as f64;
        let mean = x.iter().sum::<f64>() / m;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        assert!(mean.abs() < 0.005);
        assert!((var - 1.0).abs() < 0.01);
        let corr = draw.eps.iter().zip(&draw.eta).map(|(a, b)| a * b).sum::<f64>() / m;
        assert!((corr - cfg.rho0).abs() < 0.01);
        // Compliance gap near X = 0 is r0.
        let rate = |zv: f64| {
            let rows: Vec<usize> = (0..n)
                .filter(|&i| x[i].abs() < 0.05 && draw.sample.z()[i] == zv)
                .collect();
            rows.iter().map(|&i| draw.sample.d()[i]).sum::<f64>() / rows.len() as f64
        };
        assert!(((rate(1.0) - rate(0.0)).abs() - 0.5).abs() < 0.03);
    }

    #[test]
    fn selection_is_monotone_in_the_instrument() {
        let cfg = DgpConfig::default();
        let phi = Normal::standard();
        let draw = draw_sample(&cfg, 5000, 8).unwrap();
        for (i, &eta) in draw.eta.iter().enumerate() {
            let x = draw.sample.x().row(i)[0];
            let d = |z: f64| phi.cdf(eta) >= 0.2 * x.abs() + cfg.r0 * z;
            assert!(d(0.0) || !d(1.0));
        }
    }

    #[test]
    fn homoskedastic_in_treatment_when_lambda_is_zero() {
        let cfg = DgpConfig { lambda0: 0.0, ..DgpConfig::default() };
        assert_eq!(cfg.sigma(1.0, 0.7), cfg.sigma(0.0, 0.7));
        assert_abs_diff_eq!(cfg.sigma(0.0, -0.4), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn summary_hand_values() {
        let truth = [1.0, 2.0];
        let same = vec![vec![1.0, 2.0]; 5];
        for c in summarize(&same, &truth).unwrap() {
            assert_eq!((c.mb, c.medb, c.sd, c.rmse), (0.0, 0.0, 0.0, 0.0));
        }
        let a = 0.3;
        let pair = vec![vec![1.0 + a, 2.0], vec![1.0 - a, 2.0]];
        let c = summarize(&pair, &truth).unwrap()[0];
        assert_abs_diff_eq!(c.mb, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.sd, a * 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(c.rmse, a, epsilon = 1e-12);
        assert!(summarize(&pair[..1], &truth).is_err());
    }

    #[test]
    fn table_has_one_row_per_coefficient() {
        let cfg = DgpConfig::default();
        let run = run_monte_carlo(&cfg, 300, 3, &EstimatorConfig::default(), 1).unwrap();
        let mut buf = Vec::new();
        write_table(&[&run.iv, &run.ehiv], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().nth(4).unwrap().starts_with("EHIV,gaussian4,300,beta0"));
    }
}
