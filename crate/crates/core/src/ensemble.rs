use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Which space an ensemble's columns live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Principal,
    Control,
    Observation,
}

/// A d×N ensemble; columns are members.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: DMatrix<f64>,
    space: Space,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>, space: Space) -> Result<Self> {
        if members.ncols() == 0 {
            return Err(invalid("an ensemble needs at least one member"));
        }
        if members.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalBlowup { step: 0, member: first_bad_column(&members) });
        }
        Ok(Self { members, space })
    }

    pub fn members(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn into_members(self) -> DMatrix<f64> {
        self.members
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn mean(&self) -> DVector<f64> {
        mean(&self.members)
    }

    pub fn anomalies(&self) -> DMatrix<f64> {
        anomalies(&self.members)
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        cross_cov(&self.members, &self.members)
    }

    pub fn inflate(&self, alpha: f64) -> Result<Self> {
        Ok(Self { members: inflate(&self.members, alpha)?, space: self.space })
    }
}

pub(crate) fn first_bad_column(m: &DMatrix<f64>) -> Option<usize> {
    m.column_iter().position(|c| c.iter().any(|v| !v.is_finite()))
}

pub fn mean(m: &DMatrix<f64>) -> DVector<f64> {
    m.column_mean()
}

pub fn anomalies(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mu = mean(m);
    let mut a = m.clone();
    for mut c in a.column_iter_mut() {
        c -= &mu;
    }
    a
}

/// Unbiased empirical cross-covariance, (1/(N−1)) Σ (a−ā)(b−b̄)ᵀ.
pub fn cross_cov(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(invalid(format!("ensemble sizes differ: {} vs {}", a.ncols(), b.ncols())));
    }
    let n = a.ncols();
    if n < 2 {
        return Err(invalid("covariance needs at least two members"));
    }
    Ok(anomalies(a) * anomalies(b).transpose() / (n - 1) as f64)
}

/// Scales anomalies by `alpha` about the unchanged mean.
pub fn inflate(m: &DMatrix<f64>, alpha: f64) -> Result<DMatrix<f64>> {
    if !(alpha >= 1.0) || !alpha.is_finite() {
        return Err(invalid(format!("inflation factor must be finite and >= 1, got {alpha}")));
    }
    let mu = mean(m);
    let mut out = anomalies(m) * alpha;
    for mut c in out.column_iter_mut() {
        c += &mu;
    }
    Ok(out)
}

/// Lower Cholesky factor of an SPD matrix.
pub fn cholesky_factor(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !r.is_square() {
        return Err(invalid("covariance must be square"));
    }
    r.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Decomposition("covariance is not symmetric positive definite".into()))
}

/// N draws from N(y, s·R) given the lower factor L of R.
pub fn sample_with_factor<G: Rng + ?Sized>(
    y: &DVector<f64>,
    l: &DMatrix<f64>,
    count: usize,
    scale: f64,
    rng: &mut G,
) -> DMatrix<f64> {
    let m = y.len();
    let xi = DMatrix::from_fn(m, count, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut out = l * xi * scale.sqrt();
    for mut c in out.column_iter_mut() {
        c += y;
    }
    out
}

pub fn sample_perturbed_observations<G: Rng + ?Sized>(
    y: &DVector<f64>,
    r: &DMatrix<f64>,
    count: usize,
    scale: f64,
    rng: &mut G,
) -> Result<Ensemble> {
    if r.nrows() != y.len() {
        return Err(invalid(format!("R is {}x{} but y has length {}", r.nrows(), r.ncols(), y.len())));
    }
    if !(scale > 0.0) || count == 0 {
        return Err(invalid("scale must be positive and count at least 1"));
    }
    let l = cholesky_factor(r)?;
    Ensemble::new(sample_with_factor(y, &l, count, scale, rng), Space::Observation)
}
