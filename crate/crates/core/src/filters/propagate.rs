use nalgebra::DMatrix;

use super::MultifidelityState;
use crate::dynamics::{advance, rk4_step_columns, IntegratorConfig, Lorenz96};
use crate::error::{invalid, Error, Result};
use crate::rom_autoencoder::AutoencoderParams;
use crate::rom_pod::QuadraticRom;

/// Advances ensembles (columns) through whole assimilation windows.
pub trait Propagator: Send + Sync {
    fn dim(&self) -> usize;

    fn propagate(&self, members: &DMatrix<f64>, windows: usize) -> Result<DMatrix<f64>>;
}

fn check_dim(p: &dyn Propagator, members: &DMatrix<f64>) -> Result<()> {
    if members.nrows() != p.dim() {
        return Err(invalid(format!("members have dimension {}, propagator expects {}", members.nrows(), p.dim())));
    }
    Ok(())
}

fn tag_member(e: Error, member: usize) -> Error {
    match e {
        Error::NumericalBlowup { step, .. } => Error::NumericalBlowup { step, member: Some(member) },
        e => e,
    }
}

/// Lorenz '96 integrated member by member.
#[derive(Debug, Clone)]
pub struct FullOrder {
    pub model: Lorenz96,
    pub cfg: IntegratorConfig,
}

impl Propagator for FullOrder {
    fn dim(&self) -> usize {
        self.model.n
    }

    fn propagate(&self, members: &DMatrix<f64>, windows: usize) -> Result<DMatrix<f64>> {
        check_dim(self, members)?;
        let mut out = members.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            advance(&self.model, col.as_mut_slice(), &self.cfg, windows).map_err(|e| tag_member(e, j))?;
        }
        Ok(out)
    }
}

fn rk4_windows<F>(u: &DMatrix<f64>, cfg: &IntegratorConfig, windows: usize, mut f: F) -> Result<DMatrix<f64>>
where
    F: FnMut(&DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let mut u = u.clone();
    for step in 0..windows * cfg.steps_per_window {
        u = rk4_step_columns(&mut f, &u, cfg.dt).map_err(|e| match e {
            Error::NumericalBlowup { member, .. } => Error::NumericalBlowup { step, member },
            e => e,
        })?;
    }
    Ok(u)
}

/// The POD quadratic ROM, batched over members.
#[derive(Debug, Clone)]
pub struct QuadraticPropagator {
    pub rom: QuadraticRom,
    pub cfg: IntegratorConfig,
}

impl Propagator for QuadraticPropagator {
    fn dim(&self) -> usize {
        self.rom.r()
    }

    fn propagate(&self, members: &DMatrix<f64>, windows: usize) -> Result<DMatrix<f64>> {
        check_dim(self, members)?;
        rk4_windows(members, &self.cfg, windows, |u| Ok(self.rom.tendency_columns(u)))
    }
}

/// Latent dynamics `theta'(phi(u)) f(phi(u))` of an autoencoder.
#[derive(Debug, Clone)]
pub struct NeuralRom {
    pub params: AutoencoderParams,
    pub model: Lorenz96,
    pub cfg: IntegratorConfig,
}

impl Propagator for NeuralRom {
    fn dim(&self) -> usize {
        self.params.r()
    }

    fn propagate(&self, members: &DMatrix<f64>, windows: usize) -> Result<DMatrix<f64>> {
        check_dim(self, members)?;
        rk4_windows(members, &self.cfg, windows, |u| self.params.nn_rom_tendency_columns(u, &self.model))
    }
}

/// `x <- M x` once per window.
#[derive(Debug, Clone)]
pub struct LinearPropagator {
    pub m: DMatrix<f64>,
}

impl Propagator for LinearPropagator {
    fn dim(&self) -> usize {
        self.m.nrows()
    }

    fn propagate(&self, members: &DMatrix<f64>, windows: usize) -> Result<DMatrix<f64>> {
        check_dim(self, members)?;
        let mut out = members.clone();
        for _ in 0..windows {
            out = &self.m * out;
        }
        Ok(out)
    }
}

/// Principal ensemble through the full-order model; control and ancillary through the ROM.
pub fn mf_forecast(
    state: &MultifidelityState,
    fom: &dyn Propagator,
    rom: &dyn Propagator,
    windows: usize,
) -> Result<MultifidelityState> {
    Ok(MultifidelityState {
        x: fom.propagate(&state.x, windows)?,
        u_hat: rom.propagate(&state.u_hat, windows)?,
        u: rom.propagate(&state.u, windows)?,
    })
}
