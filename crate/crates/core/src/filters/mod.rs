//! EnKF, MFEnKF and NL-MFEnKF forecast/analysis machinery.
//!
//! Ensembles are `d x N` matrices whose columns are members. A multifidelity
//! state keeps three of them: the principal ensemble `X` (n-dim), the control
//! ensemble `U_hat` (r-dim, member-wise coupled to `X`) and the independent
//! ancillary ensemble `U` (r-dim). The total variate
//! `Z = X - (interp(U_hat) - interp(U)) / 2` is never formed member-wise.

mod analysis;
mod propagate;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::{cholesky_factor, mean, sample_with_factor};
use crate::error::{invalid, Error, Result};
use crate::rom_autoencoder::AutoencoderParams;
use crate::rom_pod::LinearCoupling;

pub use analysis::{
    enkf_analysis, enkf_gain, enkf_step, five_term_cov, identity_mfenkf_analysis, mfenkf_analysis, mfenkf_gain,
    nlmfenkf_analysis, optimal_gain, solve_spd_right,
};
pub use propagate::{mf_forecast, FullOrder, LinearPropagator, NeuralRom, Propagator, QuadraticPropagator};

/// Linear observation operator `H` with Gaussian noise covariance `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    h: DMatrix<f64>,
    r: DMatrix<f64>,
    r_chol: DMatrix<f64>,
}

impl ObservationModel {
    pub fn new(h: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if r.nrows() != h.nrows() || !r.is_square() {
            return Err(invalid(format!("H is {}x{} but R is {}x{}", h.nrows(), h.ncols(), r.nrows(), r.ncols())));
        }
        if (&r - r.transpose()).amax() > 1e-12 * r.amax().max(f64::MIN_POSITIVE) {
            return Err(Error::Decomposition("observation covariance is not symmetric".into()));
        }
        let r_chol = cholesky_factor(&r)?;
        Ok(Self { h, r, r_chol })
    }

    /// Observe every component with noise variance `variance`.
    pub fn identity(n: usize, variance: f64) -> Result<Self> {
        Self::new(DMatrix::identity(n, n), DMatrix::identity(n, n) * variance)
    }

    /// Observe the listed components with independent noise of variance `variance`.
    pub fn select(n: usize, components: &[usize], variance: f64) -> Result<Self> {
        let m = components.len();
        let mut h = DMatrix::zeros(m, n);
        for (i, &k) in components.iter().enumerate() {
            if k >= n {
                return Err(invalid(format!("component {k} out of range for n = {n}")));
            }
            h[(i, k)] = 1.0;
        }
        Self::new(h, DMatrix::identity(m, m) * variance)
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn m(&self) -> usize {
        self.h.nrows()
    }

    pub fn n(&self) -> usize {
        self.h.ncols()
    }

    /// `H` applied to every column.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.h * x
    }

    /// `y = H x + eta` with `eta ~ N(0, R)`.
    pub fn measure<G: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut G) -> DVector<f64> {
        let hx = &self.h * x;
        sample_with_factor(&hx, &self.r_chol, 1, 1.0, rng).column(0).into_owned()
    }

    /// `count` draws from `N(y, s R)`.
    pub fn perturb<G: Rng + ?Sized>(&self, y: &DVector<f64>, count: usize, s: f64, rng: &mut G) -> DMatrix<f64> {
        sample_with_factor(y, &self.r_chol, count, s, rng)
    }
}

/// How control-space members map to and from principal space.
#[derive(Debug, Clone)]
pub enum Coupling {
    Linear(LinearCoupling),
    Nonlinear(AutoencoderParams),
    /// Autoencoder surrogate assimilated as if `Theta = Phi = I` on decoded members.
    IdentityInPrincipal(AutoencoderParams),
}

impl Coupling {
    pub fn n(&self) -> usize {
        match self {
            Coupling::Linear(c) => c.n(),
            Coupling::Nonlinear(p) | Coupling::IdentityInPrincipal(p) => p.n(),
        }
    }

    pub fn r(&self) -> usize {
        match self {
            Coupling::Linear(c) => c.r(),
            Coupling::Nonlinear(p) | Coupling::IdentityInPrincipal(p) => p.r(),
        }
    }

    pub fn project(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Coupling::Linear(c) => c.project(x),
            Coupling::Nonlinear(p) | Coupling::IdentityInPrincipal(p) => p.encode_columns(x),
        }
    }

    pub fn interpolate(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Coupling::Linear(c) => c.interpolate(u),
            Coupling::Nonlinear(p) | Coupling::IdentityInPrincipal(p) => p.decode_columns(u),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InflationConfig {
    /// Applied to the principal and control ensembles.
    pub alpha_x: f64,
    /// Applied to the ancillary ensemble.
    pub alpha_u: f64,
}

impl Default for InflationConfig {
    fn default() -> Self {
        Self { alpha_x: 1.05, alpha_u: 1.01 }
    }
}

impl InflationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_x >= 1.0 && self.alpha_u >= 1.0) {
            return Err(invalid("inflation factors must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbedObsConfig {
    /// Ancillary perturbations are drawn from `N(y, s R)`.
    pub s: f64,
}

impl Default for PerturbedObsConfig {
    fn default() -> Self {
        Self { s: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanAdjustment {
    /// `mean(U_a) <- mean(U_hat_a)` after recorrelation.
    #[default]
    ControlSpaceUnbiased,
    /// `mean(U_a) <- mean(theta(X_a)) - (mean(U_hat_a) - mean(U_a)) / 2`, all pre-correction.
    KalmanApproximate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    /// No assimilation; the ensemble is only propagated.
    FreeRun,
    Enkf,
    Mfenkf,
    NlMfenkf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub kind: FilterKind,
    #[serde(default)]
    pub inflation: InflationConfig,
    #[serde(default)]
    pub perturbed_obs: PerturbedObsConfig,
    #[serde(default)]
    pub mean_adjustment: MeanAdjustment,
}

impl FilterConfig {
    pub fn new(kind: FilterKind, inflation: InflationConfig) -> Self {
        Self { kind, inflation, perturbed_obs: PerturbedObsConfig::default(), mean_adjustment: MeanAdjustment::default() }
    }

    /// Checks factors and that the coupling variant suits the filter kind.
    pub fn validate(&self, coupling: Option<&Coupling>) -> Result<()> {
        self.inflation.validate()?;
        if !(self.perturbed_obs.s > 0.0) {
            return Err(invalid("perturbed-observation scale s must be positive"));
        }
        match (self.kind, coupling) {
            (FilterKind::Mfenkf, Some(Coupling::Linear(_) | Coupling::IdentityInPrincipal(_))) => Ok(()),
            (FilterKind::NlMfenkf, Some(Coupling::Nonlinear(_))) => Ok(()),
            (FilterKind::Mfenkf | FilterKind::NlMfenkf, c) => Err(invalid(format!(
                "{:?} cannot run with coupling {}",
                self.kind,
                match c {
                    None => "none",
                    Some(Coupling::Linear(_)) => "linear",
                    Some(Coupling::Nonlinear(_)) => "nonlinear",
                    Some(Coupling::IdentityInPrincipal(_)) => "identity-in-principal",
                }
            ))),
            (FilterKind::Enkf | FilterKind::FreeRun, _) => Ok(()),
        }
    }
}

/// The three constituent ensembles of a multifidelity filter.
#[derive(Debug, Clone, PartialEq)]
pub struct MultifidelityState {
    /// Principal ensemble, `n x N_X`.
    pub x: DMatrix<f64>,
    /// Control ensemble, `r x N_X`.
    pub u_hat: DMatrix<f64>,
    /// Ancillary ensemble, `r x N_U`.
    pub u: DMatrix<f64>,
}

impl MultifidelityState {
    pub fn new(x: DMatrix<f64>, u_hat: DMatrix<f64>, u: DMatrix<f64>) -> Result<Self> {
        if u_hat.ncols() != x.ncols() {
            return Err(invalid(format!("control ensemble has {} members, principal has {}", u_hat.ncols(), x.ncols())));
        }
        if u_hat.nrows() != u.nrows() {
            return Err(invalid("control and ancillary ensembles differ in dimension"));
        }
        if x.ncols() < 2 || u.ncols() < 2 {
            return Err(invalid("each ensemble needs at least two members"));
        }
        Ok(Self { x, u_hat, u })
    }

    pub fn n_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_u(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.u_hat.iter()).chain(self.u.iter()).all(|v| v.is_finite())
    }
}

/// `mean(X) - (mean(interp(U_hat)) - mean(interp(U))) / 2`.
pub fn total_mean(state: &MultifidelityState, coupling: &Coupling) -> DVector<f64> {
    let ih = mean(&coupling.interpolate(&state.u_hat));
    let iu = mean(&coupling.interpolate(&state.u));
    mean(&state.x) - (ih - iu) * 0.5
}

/// Principal and ancillary perturbed observations for one analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedObservations {
    /// `m x N_X`, drawn from `N(y, R)`.
    pub yx: DMatrix<f64>,
    /// `m x N_U`, drawn from `N(y, s R)`.
    pub yu: DMatrix<f64>,
}

impl PerturbedObservations {
    pub fn draw<G: Rng + ?Sized>(
        y: &DVector<f64>,
        obs: &ObservationModel,
        n_x: usize,
        n_u: usize,
        s: f64,
        rng_x: &mut G,
        rng_u: &mut G,
    ) -> Self {
        Self { yx: obs.perturb(y, n_x, 1.0, rng_x), yu: obs.perturb(y, n_u, s, rng_u) }
    }
}

/// Shifts every column so that the ensemble mean becomes `target`.
pub(crate) fn set_mean(m: &mut DMatrix<f64>, target: &DVector<f64>) {
    let shift = target - mean(m);
    for mut c in m.column_iter_mut() {
        c += &shift;
    }
}
