//! Twin experiments: a synthetic truth, noisy observations of it, and a filter
//! whose analysis error against the truth is scored.

mod output;
mod sweep;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{attractor_state, IntegratorConfig, Lorenz96};
use crate::ensemble::mean;
use crate::error::{invalid, Error, Result};
use crate::filters::{
    enkf_analysis, identity_mfenkf_analysis, mf_forecast, mfenkf_analysis, nlmfenkf_analysis, Coupling,
    FilterConfig, FilterKind, FullOrder, InflationConfig, MultifidelityState, NeuralRom, ObservationModel,
    PerturbedObservations, Propagator, QuadraticPropagator,
};
use crate::rng::{role, substream};
use crate::rom_autoencoder::AutoencoderParams;
use crate::rom_pod::{build_quadratic_rom, LinearCoupling};

pub use output::{
    write_run_csv, write_steps_csv, write_sweep_csv, write_sweep_runs_csv, ArtifactRecord, RunManifest,
};
pub use sweep::{
    ae_file_name, pod_file_name, sweep_ensemble_inflation, sweep_rom_dimension, GridSpec, Method, SurrogateLibrary,
    SweepResult, SweepRow,
};

/// Climatological standard deviation of Lorenz '96 at F = 8.
pub const CLIMATOLOGICAL_STD: f64 = 3.6;

/// `sqrt(mean over steps and components of (analysis - truth)^2)`; columns are steps.
pub fn rmse(analysis_means: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if analysis_means.shape() != truth.shape() {
        return Err(invalid(format!(
            "analysis is {:?} but truth is {:?}",
            analysis_means.shape(),
            truth.shape()
        )));
    }
    if truth.is_empty() {
        return Err(invalid("no steps to score"));
    }
    Ok(((analysis_means - truth).norm_squared() / truth.len() as f64).sqrt())
}

/// `sum |reconstruction|^2 / sum |full|^2` over all snapshots and components.
pub fn kinetic_energy_ratio(reconstructions: &DMatrix<f64>, full: &DMatrix<f64>) -> Result<f64> {
    if reconstructions.shape() != full.shape() {
        return Err(invalid("reconstructions and reference differ in shape"));
    }
    let denom = full.norm_squared();
    if denom == 0.0 {
        return Err(invalid("reference trajectory has zero kinetic energy"));
    }
    Ok(reconstructions.norm_squared() / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n: usize,
    #[serde(rename = "F")]
    pub forcing: f64,
    pub dt: f64,
    pub steps_per_window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { n: 40, forcing: 8.0, dt: 0.05, steps_per_window: 1 }
    }
}

impl ModelConfig {
    pub fn model(&self) -> Result<Lorenz96> {
        Lorenz96::new(self.n, self.forcing)
    }

    pub fn integrator(&self) -> Result<IntegratorConfig> {
        let c = IntegratorConfig { dt: self.dt, steps_per_window: self.steps_per_window };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservationConfig {
    /// Observed component indices; all components when absent.
    pub components: Option<Vec<usize>>,
    /// Noise variance on every observed component.
    pub variance: f64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self { components: None, variance: 1.0 }
    }
}

impl ObservationConfig {
    pub fn model(&self, n: usize) -> Result<ObservationModel> {
        match &self.components {
            None => ObservationModel::identity(n, self.variance),
            Some(c) => ObservationModel::select(n, c, self.variance),
        }
    }
}

/// Where a run's surrogate comes from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CouplingSource {
    #[default]
    None,
    Pod {
        path: PathBuf,
    },
    Autoencoder {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub filter: FilterConfig,
    pub coupling: CouplingSource,
    pub model: ModelConfig,
    pub n_x: usize,
    pub n_u: usize,
    pub observation: ObservationConfig,
    /// Assimilation windows per realization.
    pub n_steps: usize,
    /// Leading analysis steps excluded from the RMSE.
    pub spinup: usize,
    pub realizations: usize,
    pub seed: u64,
    /// Time units integrated from the perturbed equilibrium before the truth starts.
    pub truth_burn_in: f64,
    /// Standard deviation of the initial ensemble perturbations.
    pub init_spread: f64,
    /// Per-step analysis RMSE above which a run counts as diverged.
    pub divergence_threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            filter: FilterConfig::new(FilterKind::Enkf, InflationConfig { alpha_x: 1.07, alpha_u: 1.01 }),
            coupling: CouplingSource::None,
            model: ModelConfig::default(),
            n_x: 32,
            n_u: 25,
            observation: ObservationConfig::default(),
            n_steps: 1100,
            spinup: 100,
            realizations: 20,
            seed: 0,
            truth_burn_in: 100.0,
            init_spread: 1.0,
            divergence_threshold: 10.0 * CLIMATOLOGICAL_STD,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps <= self.spinup {
            return Err(invalid(format!("n_steps ({}) must exceed spinup ({})", self.n_steps, self.spinup)));
        }
        if self.realizations == 0 {
            return Err(invalid("realizations must be at least 1"));
        }
        if self.n_x < 2 {
            return Err(invalid("n_x must be at least 2"));
        }
        let multifidelity = matches!(self.filter.kind, FilterKind::Mfenkf | FilterKind::NlMfenkf);
        if multifidelity && self.n_u < 2 {
            return Err(invalid("n_u must be at least 2"));
        }
        if !(self.init_spread >= 0.0) || !(self.divergence_threshold > 0.0) || !(self.truth_burn_in >= 0.0) {
            return Err(invalid("init_spread, truth_burn_in and divergence_threshold must be non-negative"));
        }
        self.model.model()?;
        self.model.integrator()?;
        self.filter.inflation.validate()?;
        Ok(())
    }

    /// Loads the configured coupling file and wraps it for this filter kind.
    pub fn load_surrogate(&self) -> Result<Option<Surrogate>> {
        let model = self.model.model()?;
        let icfg = self.model.integrator()?;
        match &self.coupling {
            CouplingSource::None => Ok(None),
            CouplingSource::Pod { path } => {
                let (c, _) = LinearCoupling::load(path)?;
                Ok(Some(Surrogate::pod(c, &model, &icfg)?))
            }
            CouplingSource::Autoencoder { path } => {
                let p = AutoencoderParams::load(path)?;
                Ok(Some(Surrogate::autoencoder(p, &model, &icfg, self.filter.kind)))
            }
        }
    }
}

/// A coupling together with the reduced model that propagates control-space members.
#[derive(Clone)]
pub struct Surrogate {
    pub coupling: Coupling,
    pub rom: Arc<dyn Propagator>,
}

impl std::fmt::Debug for Surrogate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Surrogate").field("n", &self.coupling.n()).field("r", &self.coupling.r()).finish()
    }
}

impl Surrogate {
    pub fn pod(coupling: LinearCoupling, model: &Lorenz96, icfg: &IntegratorConfig) -> Result<Self> {
        let rom = build_quadratic_rom(&coupling, model)?;
        Ok(Self { coupling: Coupling::Linear(coupling), rom: Arc::new(QuadraticPropagator { rom, cfg: *icfg }) })
    }

    /// Nonlinear coupling for NL-MFEnKF; identity-in-principal coupling otherwise.
    pub fn autoencoder(params: AutoencoderParams, model: &Lorenz96, icfg: &IntegratorConfig, kind: FilterKind) -> Self {
        let rom = Arc::new(NeuralRom { params: params.clone(), model: *model, cfg: *icfg });
        let coupling = match kind {
            FilterKind::NlMfenkf => Coupling::Nonlinear(params),
            _ => Coupling::IdentityInPrincipal(params),
        };
        Self { coupling, rom }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub realization: usize,
    /// Spatio-temporal RMSE after spinup; `None` when the run diverged.
    pub rmse: Option<f64>,
    /// Per-step analysis RMSE for every completed step.
    pub errors: Vec<f64>,
    pub diverged: bool,
    /// First step (1-based) at which divergence was declared.
    pub diverged_at: Option<usize>,
    pub wall_time_s: f64,
}

/// Seed for the truth spin-up of one realization.
fn truth_seed(seed: u64, realization: usize) -> u64 {
    substream(seed, &[role::TRUTH, realization as u64]).next_u64()
}

/// Truth states at windows `0..=n_steps` and observations at windows `1..=n_steps`.
///
/// Depends only on the model, observation settings, seed and realization.
pub fn twin_truth(cfg: &ExperimentConfig, realization: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let model = cfg.model.model()?;
    let icfg = cfg.model.integrator()?;
    let obs = cfg.observation.model(model.n)?;
    let x0 = attractor_state(&model, &icfg, truth_seed(cfg.seed, realization), cfg.truth_burn_in)?;
    let fom = FullOrder { model, cfg: icfg };
    let mut truth = DMatrix::zeros(model.n, cfg.n_steps + 1);
    truth.set_column(0, &x0);
    let mut state = DMatrix::from_column_slice(model.n, 1, x0.as_slice());
    let mut obs_rng = substream(cfg.seed, &[role::OBSERVATION, realization as u64]);
    let mut ys = DMatrix::zeros(obs.m(), cfg.n_steps);
    for i in 1..=cfg.n_steps {
        state = fom.propagate(&state, 1)?;
        truth.set_column(i, &state.column(0));
        ys.set_column(i - 1, &obs.measure(&state.column(0).into_owned(), &mut obs_rng));
    }
    Ok((truth, ys))
}

fn perturbed_members<G: Rng>(center: &DVector<f64>, count: usize, spread: f64, rng: &mut G) -> DMatrix<f64> {
    DMatrix::from_fn(center.len(), count, |i, _| center[i] + spread * rng.sample::<f64, _>(StandardNormal))
}

enum FilterState {
    Single(DMatrix<f64>),
    Multi(MultifidelityState),
}

impl FilterState {
    fn principal_mean(&self) -> DVector<f64> {
        match self {
            FilterState::Single(x) => mean(x),
            FilterState::Multi(s) => mean(&s.x),
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            FilterState::Single(x) => x.iter().all(|v| v.is_finite()),
            FilterState::Multi(s) => s.is_finite(),
        }
    }
}

fn initial_state(
    cfg: &ExperimentConfig,
    surrogate: Option<&Surrogate>,
    x0: &DVector<f64>,
    realization: usize,
) -> Result<FilterState> {
    let r = realization as u64;
    let x = perturbed_members(x0, cfg.n_x, cfg.init_spread, &mut substream(cfg.seed, &[role::PRINCIPAL_INIT, r]));
    match cfg.filter.kind {
        FilterKind::Enkf | FilterKind::FreeRun => Ok(FilterState::Single(x)),
        FilterKind::Mfenkf | FilterKind::NlMfenkf => {
            let s = surrogate.ok_or_else(|| invalid("multifidelity filters need a surrogate"))?;
            let u_full =
                perturbed_members(x0, cfg.n_u, cfg.init_spread, &mut substream(cfg.seed, &[role::ANCILLARY_INIT, r]));
            let u_hat = s.coupling.project(&x);
            let u = s.coupling.project(&u_full);
            Ok(FilterState::Multi(MultifidelityState::new(x, u_hat, u)?))
        }
    }
}

fn assimilate(
    state: &FilterState,
    y: &DVector<f64>,
    obs: &ObservationModel,
    cfg: &ExperimentConfig,
    surrogate: Option<&Surrogate>,
    realization: usize,
    step: usize,
) -> Result<FilterState> {
    let tags = |role| [role, realization as u64, step as u64];
    let mut rng_x = substream(cfg.seed, &tags(role::PRINCIPAL_PERTURBATION));
    match (state, cfg.filter.kind) {
        (FilterState::Single(x), FilterKind::FreeRun) => Ok(FilterState::Single(x.clone())),
        (FilterState::Single(x), FilterKind::Enkf) => {
            let yx = obs.perturb(y, x.ncols(), 1.0, &mut rng_x);
            Ok(FilterState::Single(enkf_analysis(x, &yx, obs, cfg.filter.inflation.alpha_x)?))
        }
        (FilterState::Multi(s), kind) => {
            let mut rng_u = substream(cfg.seed, &tags(role::ANCILLARY_PERTURBATION));
            let pert = PerturbedObservations::draw(y, obs, s.n_x(), s.n_u(), cfg.filter.perturbed_obs.s, &mut rng_x, &mut rng_u);
            let coupling = &surrogate.ok_or_else(|| invalid("multifidelity filters need a surrogate"))?.coupling;
            let inflation = &cfg.filter.inflation;
            let next = match (kind, coupling) {
                (FilterKind::Mfenkf, Coupling::Linear(c)) => mfenkf_analysis(s, &pert, obs, c, inflation)?,
                (FilterKind::Mfenkf, Coupling::IdentityInPrincipal(p)) => {
                    identity_mfenkf_analysis(s, &pert, obs, p, inflation)?
                }
                (FilterKind::NlMfenkf, Coupling::Nonlinear(p)) => {
                    nlmfenkf_analysis(s, &pert, obs, p, inflation, cfg.filter.mean_adjustment)?
                }
                _ => return Err(invalid("filter kind does not match the coupling")),
            };
            Ok(FilterState::Multi(next))
        }
        _ => Err(invalid("filter state does not match the filter kind")),
    }
}

/// Errors that end a run as diverged rather than failing it.
fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NumericalBlowup { .. } | Error::LinearSolve(_))
}

/// One realization of the configured twin experiment.
pub fn run_realization(cfg: &ExperimentConfig, surrogate: Option<&Surrogate>, realization: usize) -> Result<RunResult> {
    let start = Instant::now();
    cfg.validate()?;
    cfg.filter.validate(surrogate.map(|s| &s.coupling))?;
    let model = cfg.model.model()?;
    let icfg = cfg.model.integrator()?;
    let obs = cfg.observation.model(model.n)?;
    let (truth, ys) = twin_truth(cfg, realization)?;
    let fom = FullOrder { model, cfg: icfg };

    let mut state = initial_state(cfg, surrogate, &truth.column(0).into_owned(), realization)?;
    let mut errors = Vec::with_capacity(cfg.n_steps);
    let mut diverged_at = None;
    for step in 1..=cfg.n_steps {
        let advanced = (|| -> Result<FilterState> {
            let forecast = match &state {
                FilterState::Single(x) => FilterState::Single(fom.propagate(x, 1)?),
                FilterState::Multi(s) => {
                    let rom = &surrogate.ok_or_else(|| invalid("multifidelity filters need a surrogate"))?.rom;
                    FilterState::Multi(mf_forecast(s, &fom, rom.as_ref(), 1)?)
                }
            };
            assimilate(&forecast, &ys.column(step - 1).into_owned(), &obs, cfg, surrogate, realization, step)
        })();
        match advanced {
            Ok(next) => state = next,
            Err(e) if is_divergence(&e) => {
                diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        }
        let err = if state.is_finite() {
            let diff = state.principal_mean() - truth.column(step);
            (diff.norm_squared() / model.n as f64).sqrt()
        } else {
            f64::INFINITY
        };
        if !(err <= cfg.divergence_threshold) {
            diverged_at = Some(step);
            break;
        }
        errors.push(err);
    }

    let rmse = match diverged_at {
        Some(_) => None,
        None => {
            let scored = &errors[cfg.spinup..];
            Some((scored.iter().map(|e| e * e).sum::<f64>() / scored.len() as f64).sqrt())
        }
    };
    Ok(RunResult {
        realization,
        rmse,
        errors,
        diverged: diverged_at.is_some(),
        diverged_at,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// All realizations of the configured experiment, in realization order.
pub fn run_twin_experiment(cfg: &ExperimentConfig, surrogate: Option<&Surrogate>) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    (0..cfg.realizations).into_par_iter().map(|k| run_realization(cfg, surrogate, k)).collect()
}

/// Mean and sample standard deviation of the finite RMSEs.
pub fn summarize(results: &[RunResult]) -> (f64, f64, usize) {
    let vals: Vec<f64> = results.iter().filter_map(|r| r.rmse).collect();
    let k = vals.len();
    if k == 0 {
        return (f64::NAN, f64::NAN, 0);
    }
    let m = vals.iter().sum::<f64>() / k as f64;
    let sd = if k > 1 { (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt() } else { 0.0 };
    (m, sd, k)
}
