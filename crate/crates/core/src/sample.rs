//! Observed data `(Y, D, Z, X)`.

use crate::error::{EhivError, Result};

/// Row-major `n x dim` matrix of smoothing covariates (no constant column).
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Covariates {
    pub fn new(n: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * dim {
            return Err(EhivError::Domain(format!(
                "covariate buffer has {} entries, expected {n} x {dim}",
                data.len()
            )));
        }
        Ok(Self { n, dim, data })
    }

    /// Builds from column vectors of equal length.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let n = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != n) {
            return Err(EhivError::Domain("covariate columns differ in length".into()));
        }
        let dim = columns.len();
        let mut data = Vec::with_capacity(n * dim);
        for i in 0..n {
            data.extend(columns.iter().map(|c| c[i]));
        }
        Ok(Self { n, dim, data })
    }

    /// An `n x 0` matrix, for designs with no covariates besides the constant.
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            dim: 0,
            data: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + Clone + '_ {
        (0..self.n).map(move |i| self.data[i * self.dim + j])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Sample standard deviation (denominator `n - 1`) of column `j`.
    pub fn column_sd(&self, j: usize) -> f64 {
        sample_sd(self.column(j))
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            n: indices.len(),
            dim: self.dim,
            data,
        }
    }
}

pub(crate) fn sample_sd(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (count, sum) = values.clone().fold((0usize, 0.0), |(c, s), v| (c + 1, s + v));
    if count < 2 {
        return 0.0;
    }
    let mean = sum / count as f64;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (ss / (count - 1) as f64).sqrt()
}

/// A validated sample. `D` and `Z` are stored as `0.0`/`1.0`.
///
/// The regression design is `(1, X', D)` and the instrument vector is
/// `(1, X', Z)`; the constant is dropped when `intercept` is false. Kernel
/// smoothing only ever looks at the non-constant covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    y: Vec<f64>,
    d: Vec<f64>,
    z: Vec<f64>,
    x: Covariates,
    intercept: bool,
}

impl Sample {
    pub fn new(y: Vec<f64>, d: Vec<f64>, z: Vec<f64>, x: Covariates, intercept: bool) -> Result<Self> {
        let sample = Self {
            y,
            d,
            z,
            x,
            intercept,
        };
        sample.validate()?;
        Ok(sample)
    }

    fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.d.len() != n || self.z.len() != n || self.x.n() != n {
            return Err(EhivError::Domain("sample vectors differ in length".into()));
        }
        if n < 2 {
            return Err(EhivError::InsufficientData(format!(
                "a sample needs at least 2 observations, got {n}"
            )));
        }
        let binary = |v: f64| v == 0.0 || v == 1.0;
        if let Some(i) = self.d.iter().position(|&v| !binary(v)) {
            return Err(EhivError::Domain(format!("treatment at row {i} is not binary")));
        }
        if let Some(i) = self.z.iter().position(|&v| !binary(v)) {
            return Err(EhivError::Domain(format!("instrument at row {i} is not binary")));
        }
        if self.y.iter().chain(self.x.as_slice()).any(|v| !v.is_finite()) {
            return Err(EhivError::Domain("sample contains non-finite values".into()));
        }
        let treated_by_z = self.z.iter().sum::<f64>();
        if treated_by_z == 0.0 || treated_by_z == n as f64 {
            return Err(EhivError::InsufficientData(
                "both instrument arms must be present".into(),
            ));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of smoothing covariates (constant excluded).
    pub fn dim(&self) -> usize {
        self.x.dim()
    }

    pub fn has_intercept(&self) -> bool {
        self.intercept
    }

    /// Length of the coefficient vector: constant, covariates, treatment.
    pub fn n_coef(&self) -> usize {
        self.dim() + usize::from(self.intercept) + 1
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn x(&self) -> &Covariates {
        &self.x
    }

    /// Writes `(1, X_i', D_i)` into `out`.
    #[inline]
    pub fn regressors(&self, i: usize, out: &mut [f64]) {
        self.fill(i, self.d[i], out)
    }

    /// Writes `(1, X_i', Z_i)` into `out`.
    #[inline]
    pub fn instruments(&self, i: usize, out: &mut [f64]) {
        self.fill(i, self.z[i], out)
    }

    fn fill(&self, i: usize, last: f64, out: &mut [f64]) {
        let mut k = 0;
        if self.intercept {
            out[0] = 1.0;
            k = 1;
        }
        out[k..k + self.dim()].copy_from_slice(self.x.row(i));
        out[k + self.dim()] = last;
    }

    /// Number of observations with `Z = 1`.
    pub fn arm_count(&self, z: u8) -> usize {
        let ones = self.z.iter().filter(|&&v| v == 1.0).count();
        if z == 1 {
            ones
        } else {
            self.n() - ones
        }
    }

    /// Same sample with a different outcome vector.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(y, self.d.clone(), self.z.clone(), self.x.clone(), self.intercept)
    }

    /// Same sample with a different instrument vector.
    pub fn with_instrument(&self, z: Vec<f64>) -> Result<Self> {
        Self::new(self.y.clone(), self.d.clone(), z, self.x.clone(), self.intercept)
    }

    /// Rows `indices` (repeats allowed), validated.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let pick = |v: &[f64]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self::new(
            pick(&self.y),
            pick(&self.d),
            pick(&self.z),
            self.x.select(indices),
            self.intercept,
        )
    }
}
