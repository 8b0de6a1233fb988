use nalgebra::{DMatrix, DVector};

use crate::error::{EhivError, Result};

/// Pivots smaller than this fraction of the largest pivot count as singular.
const RELATIVE_PIVOT_TOL: f64 = 1e-12;

fn check_pivots(lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, context: &'static str) -> Result<()> {
    let u = lu.u();
    let pivots: Vec<f64> = (0..u.nrows()).map(|k| u[(k, k)].abs()).collect();
    let max = pivots.iter().cloned().fold(0.0, f64::max);
    let min = pivots.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max.is_finite() && max > 0.0 && min > RELATIVE_PIVOT_TOL * max) {
        return Err(EhivError::Rank { context });
    }
    Ok(())
}

pub(crate) fn solve(a: &DMatrix<f64>, b: &DVector<f64>, context: &'static str) -> Result<DVector<f64>> {
    let lu = a.clone().lu();
    check_pivots(&lu, context)?;
    lu.solve(b).ok_or(EhivError::Rank { context })
}

pub(crate) fn inverse(a: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    let lu = a.clone().lu();
    check_pivots(&lu, context)?;
    lu.try_inverse().ok_or(EhivError::Rank { context })
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m = (&*m + t) * 0.5;
}

/// Median; even counts use the midpoint of the two central order statistics.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    })
}
