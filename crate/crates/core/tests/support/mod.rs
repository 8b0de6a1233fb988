//! Property checks shared by the proptest suite and the acceptance run.
//! Each returns `Err` with a short description of the first violation.
#![allow(dead_code)]

use ehiv::simulate::{draw_sample, run_monte_carlo, summarize, DgpConfig};
use ehiv::*;

pub type Check = std::result::Result<(), String>;

fn close(a: f64, b: f64, tol: f64, what: &str) -> Check {
    if (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs())) {
        Ok(())
    } else {
        Err(format!("{what}: {a} vs {b}"))
    }
}

fn close_all(a: &[f64], b: &[f64], tol: f64, what: &str) -> Check {
    if a.len() != b.len() {
        return Err(format!("{what}: lengths {} and {}", a.len(), b.len()));
    }
    a.iter().zip(b).enumerate().try_for_each(|(k, (&u, &v))| close(u, v, tol, &format!("{what}[{k}]")))
}

pub fn sample(n: usize, seed: u64) -> Sample {
    draw_sample(&DgpConfig::default(), n, seed).expect("valid DGP").sample
}

/// `int u^k K(u) du` on `[-12, 12]` by composite Simpson.
pub fn kernel_moment(spec: &KernelSpec, k: i32) -> f64 {
    let (a, steps) = (12.0, 24_000);
    let step = 2.0 * a / steps as f64;
    let f = |u: f64| u.powi(k) * spec.univariate(u);
    let mut s = f(-a) + f(a);
    for i in 1..steps {
        let u = -a + i as f64 * step;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(u);
    }
    s * step / 3.0
}

/// Unit mass, vanishing moments below the order, a non-zero moment at the order.
pub fn check_kernel_moments(spec: &KernelSpec) -> Check {
    close(kernel_moment(spec, 0), 1.0, 1e-8, "mass")?;
    let r = spec.order() as i32;
    for k in 1..r {
        close(kernel_moment(spec, k), 0.0, 1e-8, &format!("moment {k}"))?;
    }
    let top = kernel_moment(spec, r);
    if top.abs() < 1e-3 {
        return Err(format!("moment {r} vanishes: {top}"));
    }
    Ok(())
}

fn fitted(s: &Sample, config: &EstimatorConfig) -> std::result::Result<EhivModel, String> {
    EhivModel::fit(s.clone(), config).map_err(|e| e.to_string())
}

/// Rescaling every `S_i` by `c > 0` leaves the estimate unchanged.
pub fn check_scale_cancellation(s: &Sample, c: f64) -> Check {
    let m = fitted(s, &EstimatorConfig::default())?;
    let scaled = m.first_stage().with_scaled_s(c);
    let b = fit_ehiv(s, &scaled, m.mask()).map_err(|e| e.to_string())?;
    close_all(&b.beta, &m.ehiv().beta, 1e-10, "beta")
}

/// Constant `S` and no trimming reproduce just-identified IV.
pub fn check_iv_collapse(s: &Sample, c: f64) -> Check {
    let m = fitted(s, &EstimatorConfig::default())?;
    let mut fs = m.first_stage().clone();
    fs.s = vec![c; s.n()];
    let b = fit_ehiv(s, &fs, &vec![true; s.n()]).map_err(|e| e.to_string())?;
    let iv = fit_iv(s).map_err(|e| e.to_string())?;
    close_all(&b.beta, &iv.beta, 1e-9, "beta")
}

/// `Y -> a + bY` with the variance floors scaled by `b^2` maps the
/// estimate to `(a + b beta_0, b beta_1, b beta_2)`.
pub fn check_outcome_affine(s: &Sample, a: f64, b: f64) -> Check {
    let base = EstimatorConfig::default();
    let mut config = base.clone();
    config.trimming.kappa0 *= b * b;
    config.trimming.kappa1 *= b * b;
    let y: Vec<f64> = s.y().iter().map(|y| a + b * y).collect();
    let m0 = fitted(s, &base)?;
    let m1 = fitted(&s.with_outcome(y).map_err(|e| e.to_string())?, &config)?;
    if m0.mask() != m1.mask() {
        return Err("trimming set changed".into());
    }
    let mut want = m0.ehiv().beta.iter().map(|v| b * v).collect::<Vec<_>>();
    want[0] += a;
    close_all(&m1.ehiv().beta, &want, 1e-8, "beta")
}

/// Shifting the covariate by `c` moves only the intercept, by `-beta_1 c`.
pub fn check_covariate_shift(s: &Sample, c: f64) -> Check {
    let x: Vec<f64> = s.x().column(0).map(|v| v + c).collect();
    let shifted = Sample::new(
        s.y().to_vec(),
        s.d().to_vec(),
        s.z().to_vec(),
        Covariates::from_columns(&[x]).map_err(|e| e.to_string())?,
        true,
    )
    .map_err(|e| e.to_string())?;
    let m0 = fitted(s, &EstimatorConfig::default())?;
    let m1 = fitted(&shifted, &EstimatorConfig::default())?;
    if m0.mask() != m1.mask() {
        return Err("trimming set changed".into());
    }
    let b = &m0.ehiv().beta;
    close_all(&m1.ehiv().beta, &[b[0] - b[1] * c, b[1], b[2]], 1e-8, "beta")
}

/// Reordering the rows reorders the first-stage output the same way.
pub fn check_first_stage_permutation(s: &Sample, order: &[usize]) -> Check {
    let spec = KernelSpec::default();
    let h = [0.4];
    let fs = estimate_first_stage(s, &spec, &h).map_err(|e| e.to_string())?;
    let p = s.select(order).map_err(|e| e.to_string())?;
    let fp = estimate_first_stage(&p, &spec, &h).map_err(|e| e.to_string())?;
    for (k, &i) in order.iter().enumerate() {
        for (name, a, b) in [
            ("delta0", fp.delta0[k], fs.delta0[i]),
            ("delta1", fp.delta1[k], fs.delta1[i]),
            ("v0", fp.v0[k], fs.v0[i]),
            ("v1", fp.v1[k], fs.v1[i]),
        ] {
            if a.is_finite() || b.is_finite() {
                close(a, b, 1e-8, &format!("{name} row {i}"))?;
            }
        }
    }
    Ok(())
}

/// `RMSE^2 = MB^2 + SD^2 (reps - 1) / reps` for every coefficient.
pub fn check_rmse_identity(estimates: &[Vec<f64>], truth: &[f64]) -> Check {
    let m = estimates.len() as f64;
    for (k, c) in summarize(estimates, truth).map_err(|e| e.to_string())?.iter().enumerate() {
        let rhs = c.mb * c.mb + c.sd * c.sd * (m - 1.0) / m;
        close(c.rmse * c.rmse, rhs, 1e-10, &format!("coefficient {k}"))?;
    }
    Ok(())
}

/// Fits and Monte Carlo runs repeat exactly under a fixed seed.
pub fn check_determinism(seed: u64) -> Check {
    let config = EstimatorConfig::default();
    let a = fitted(&sample(300, seed), &config)?;
    let b = fitted(&sample(300, seed), &config)?;
    if a.ehiv().beta != b.ehiv().beta || a.mask() != b.mask() {
        return Err("fit differs between runs".into());
    }
    let run = || run_monte_carlo(&DgpConfig::default(), 200, 4, &config, seed).map_err(|e| e.to_string());
    if run()? != run()? {
        return Err("Monte Carlo summaries differ between runs".into());
    }
    Ok(())
}
