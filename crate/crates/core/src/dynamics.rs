//! Lorenz '96 full-order model, classical RK4 time stepping and snapshot generation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::substream;

/// A right-hand side `dy/dt = f(y)` together with its vector-Jacobian product.
///
/// The VJP is what lets the autoencoder loss backpropagate through latent
/// rollouts that call the full-order tendency on decoded states.
pub trait Tendency: Send + Sync {
    fn dim(&self) -> usize;

    fn eval_into(&self, y: &[f64], out: &mut [f64]);

    /// Writes `J_f(y)^T w` into `out`.
    fn vjp_into(&self, y: &[f64], w: &[f64], out: &mut [f64]);

    fn eval(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(y.len());
        self.eval_into(y.as_slice(), out.as_mut_slice());
        out
    }

    /// Column-wise evaluation on a `dim x N` matrix.
    fn eval_columns(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(y.nrows(), y.ncols());
        for (yc, mut oc) in y.column_iter().zip(out.column_iter_mut()) {
            self.eval_into(yc.as_slice(), oc.as_mut_slice());
        }
        out
    }
}

/// Parameters of the cyclic Lorenz '96 system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lorenz96 {
    pub n: usize,
    pub forcing: f64,
}

impl Default for Lorenz96 {
    fn default() -> Self {
        Self { n: 40, forcing: 8.0 }
    }
}

impl Lorenz96 {
    pub fn new(n: usize, forcing: f64) -> Result<Self> {
        let p = Self { n, forcing };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(invalid(format!("Lorenz '96 needs n >= 4, got {}", self.n)));
        }
        if !self.forcing.is_finite() {
            return Err(invalid("forcing must be finite"));
        }
        Ok(())
    }

    /// Full tendency `f(y)`; fails on a dimension mismatch.
    pub fn tendency(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.n {
            return Err(invalid(format!("state has length {}, model has n = {}", y.len(), self.n)));
        }
        Ok(self.eval(y))
    }

    /// Equilibrium state `F * 1`.
    pub fn equilibrium(&self) -> DVector<f64> {
        DVector::from_element(self.n, self.forcing)
    }
}

impl Tendency for Lorenz96 {
    fn dim(&self) -> usize {
        self.n
    }

    // The advection term is written as y_{k-1} * (y_{k-2} - y_{k+1}) and then
    // subtracted, i.e. f_k = -y_{k-1}(y_{k-2} - y_{k+1}) - y_k + F, which is the
    // usual f_k = (y_{k+1} - y_{k-2}) y_{k-1} - y_k + F.
    fn eval_into(&self, y: &[f64], out: &mut [f64]) {
        let n = y.len();
        for k in 0..n {
            let km1 = y[(k + n - 1) % n];
            let km2 = y[(k + n - 2) % n];
            let kp1 = y[(k + 1) % n];
            out[k] = (kp1 - km2) * km1 - y[k] + self.forcing;
        }
    }

    fn vjp_into(&self, y: &[f64], w: &[f64], out: &mut [f64]) {
        let n = y.len();
        // d f_k / d y_{k+1} = y_{k-1}, d f_k / d y_{k-2} = -y_{k-1},
        // d f_k / d y_{k-1} = y_{k+1} - y_{k-2}, d f_k / d y_k = -1.
        for j in 0..n {
            let jm1 = (j + n - 1) % n;
            let jm2 = (j + n - 2) % n;
            let jp1 = (j + 1) % n;
            let jp2 = (j + 2) % n;
            out[j] = w[jm1] * y[jm2] - w[jp2] * y[jp1] + w[jp1] * (y[jp2] - y[jm1]) - w[j];
        }
    }
}

/// Inner RK4 step size and the number of inner steps per assimilation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub steps_per_window: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { dt: 0.05, steps_per_window: 1 }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if self.steps_per_window == 0 {
            return Err(invalid("steps_per_window must be at least 1"));
        }
        Ok(())
    }

    pub fn window(&self) -> f64 {
        self.dt * self.steps_per_window as f64
    }
}

/// States sampled at strictly increasing times; column `j` of `states` is the state at `times[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: DMatrix<f64>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: DMatrix<f64>) -> Result<Self> {
        if times.len() != states.ncols() {
            return Err(invalid(format!(
                "{} times for {} states",
                times.len(),
                states.ncols()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("trajectory times must be strictly increasing"));
        }
        Ok(Self { times, states })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    pub fn state(&self, j: usize) -> DVector<f64> {
        self.states.column(j).into_owned()
    }
}

/// One classical RK4 step for an arbitrary vector field.
pub fn rk4_step<F>(f: F, y: &DVector<f64>, dt: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let k1 = f(y);
    let k2 = f(&(y + &k1 * (0.5 * dt)));
    let k3 = f(&(y + &k2 * (0.5 * dt)));
    let k4 = f(&(y + &k3 * dt));
    let out = y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NumericalBlowup { step: 0, member: None })
    }
}

/// RK4 step applied to every column of `y` with a batched vector field.
///
/// On non-finite output the error names the first offending column.
pub fn rk4_step_columns<F>(mut f: F, y: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(&DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let k1 = f(y)?;
    let k2 = f(&(y + &k1 * (0.5 * dt)))?;
    let k3 = f(&(y + &k2 * (0.5 * dt)))?;
    let k4 = f(&(y + &k3 * dt))?;
    let mut out = y.clone();
    for (((o, a), (b, c)), d) in out
        .iter_mut()
        .zip(k1.iter())
        .zip(k2.iter().zip(k3.iter()))
        .zip(k4.iter())
    {
        *o += dt / 6.0 * (a + 2.0 * b + 2.0 * c + d);
    }
    check_columns_finite(&out, 0)?;
    Ok(out)
}

pub(crate) fn check_columns_finite(m: &DMatrix<f64>, step: usize) -> Result<()> {
    for (j, col) in m.column_iter().enumerate() {
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalBlowup { step, member: Some(j) });
        }
    }
    Ok(())
}

/// Advances a single state by `windows` assimilation windows with a [`Tendency`].
pub(crate) fn advance<T: Tendency + ?Sized>(
    f: &T,
    y: &mut [f64],
    cfg: &IntegratorConfig,
    windows: usize,
) -> Result<()> {
    let n = y.len();
    let mut k = vec![vec![0.0; n]; 4];
    let mut stage = vec![0.0; n];
    let dt = cfg.dt;
    for step in 0..windows * cfg.steps_per_window {
        f.eval_into(y, &mut k[0]);
        for i in 0..n {
            stage[i] = y[i] + 0.5 * dt * k[0][i];
        }
        f.eval_into(&stage, &mut k[1]);
        for i in 0..n {
            stage[i] = y[i] + 0.5 * dt * k[1][i];
        }
        f.eval_into(&stage, &mut k[2]);
        for i in 0..n {
            stage[i] = y[i] + dt * k[2][i];
        }
        f.eval_into(&stage, &mut k[3]);
        for i in 0..n {
            y[i] += dt / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalBlowup { step, member: None });
        }
    }
    Ok(())
}

/// Integrates `y0` for `n_windows` windows, sampling at window boundaries.
pub fn integrate<T: Tendency + ?Sized>(
    f: &T,
    y0: &DVector<f64>,
    cfg: &IntegratorConfig,
    n_windows: usize,
) -> Result<Trajectory> {
    cfg.validate()?;
    if y0.len() != f.dim() {
        return Err(invalid("initial state does not match the tendency dimension"));
    }
    let mut states = DMatrix::zeros(y0.len(), n_windows + 1);
    states.set_column(0, y0);
    let mut y = y0.clone();
    for w in 0..n_windows {
        advance(f, y.as_mut_slice(), cfg, 1).map_err(|e| match e {
            Error::NumericalBlowup { step, member } => Error::NumericalBlowup {
                step: w * cfg.steps_per_window + step,
                member,
            },
            e => e,
        })?;
        states.set_column(w + 1, &y);
    }
    let times = (0..=n_windows).map(|w| w as f64 * cfg.window()).collect();
    Trajectory::new(times, states)
}

/// Number of inner steps covering `span`, which must be a non-negative multiple of `dt`.
pub(crate) fn steps_for(span: f64, dt: f64) -> Result<usize> {
    let steps = (span / dt).round();
    if span < 0.0 || (steps * dt - span).abs() > 1e-9 * span.abs().max(dt) {
        return Err(invalid(format!("{span} is not a multiple of dt = {dt}")));
    }
    Ok(steps as usize)
}

/// Initial condition for attractor spin-up: `F * 1` with a 1e-3 bump on one seeded component.
pub fn spinup_initial_condition(p: &Lorenz96, seed: u64) -> DVector<f64> {
    let mut rng = substream(seed, &[0x005e_ed1c]);
    let mut y0 = p.equilibrium();
    let k = rng.gen_range(0..p.n);
    y0[k] += 1e-3;
    y0
}

/// Integrates `spinup_initial_condition(seed)` through `burn_in` time units.
pub fn attractor_state(p: &Lorenz96, cfg: &IntegratorConfig, seed: u64, burn_in: f64) -> Result<DVector<f64>> {
    p.validate()?;
    cfg.validate()?;
    let mut y = spinup_initial_condition(p, seed);
    let steps = steps_for(burn_in, cfg.dt)?;
    let inner = IntegratorConfig { dt: cfg.dt, steps_per_window: 1 };
    advance(p, y.as_mut_slice(), &inner, steps)?;
    Ok(y)
}

/// `count` states separated by `spacing` time units, taken after a `burn_in` transient.
pub fn generate_snapshots(
    p: &Lorenz96,
    cfg: &IntegratorConfig,
    count: usize,
    spacing: f64,
    seed: u64,
    burn_in: f64,
) -> Result<Trajectory> {
    if count == 0 {
        return Err(invalid("snapshot count must be positive"));
    }
    if spacing <= 0.0 {
        return Err(invalid("snapshot spacing must be positive"));
    }
    let per_snapshot = steps_for(spacing, cfg.dt)?;
    let mut y = attractor_state(p, cfg, seed, burn_in)?;
    let inner = IntegratorConfig { dt: cfg.dt, steps_per_window: 1 };
    let mut states = DMatrix::zeros(p.n, count);
    states.set_column(0, &y);
    for j in 1..count {
        advance(p, y.as_mut_slice(), &inner, per_snapshot)?;
        states.set_column(j, &y);
    }
    let times = (0..count).map(|j| burn_in + j as f64 * spacing).collect();
    Trajectory::new(times, states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stencil_oracle(y: &[f64], forcing: f64) -> Vec<f64> {
        let n = y.len() as isize;
        let at = |k: isize| y[k.rem_euclid(n) as usize];
        (0..n)
            .map(|k| at(k - 1) * (at(k + 1) - at(k - 2)) - at(k) + forcing)
            .collect()
    }

    #[test]
    fn equilibrium_has_zero_tendency() {
        let p = Lorenz96::default();
        let f = p.tendency(&p.equilibrium()).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn zero_state_gives_forcing() {
        let p = Lorenz96::default();
        let f = p.tendency(&DVector::zeros(40)).unwrap();
        assert!(f.iter().all(|&v| v == 8.0));
    }

    #[test]
    fn tendency_matches_scalar_stencil() {
        let p = Lorenz96::new(5, 8.0).unwrap();
        let y = DVector::from_vec(vec![0.3, -1.2, 2.5, 4.0, -0.7]);
        let f = p.tendency(&y).unwrap();
        let oracle = stencil_oracle(y.as_slice(), 8.0);
        for k in 0..5 {
            assert_abs_diff_eq!(f[k], oracle[k], epsilon = 1e-14);
        }
    }

    #[test]
    fn tendency_rejects_wrong_length() {
        let p = Lorenz96::default();
        assert!(matches!(p.tendency(&DVector::zeros(7)), Err(Error::InvalidArgument(_))));
        assert!(Lorenz96::new(3, 8.0).is_err());
    }

    #[test]
    fn tendency_is_cyclically_equivariant() {
        let p = Lorenz96::new(9, 8.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = DVector::from_fn(9, |_, _| rng.gen_range(-5.0..5.0));
        let rotated = DVector::from_fn(9, |k, _| y[(k + 8) % 9]);
        let f = p.eval(&y);
        let fr = p.eval(&rotated);
        for k in 0..9 {
            assert_abs_diff_eq!(fr[k], f[(k + 8) % 9], epsilon = 1e-13);
        }
    }

    #[test]
    fn vjp_matches_finite_difference_jacobian() {
        let p = Lorenz96::new(6, 8.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut vjp = vec![0.0; 6];
        p.vjp_into(&y, &w, &mut vjp);
        let h = 1e-6;
        for j in 0..6 {
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[j] += h;
            ym[j] -= h;
            let (mut fp, mut fm) = (vec![0.0; 6], vec![0.0; 6]);
            p.eval_into(&yp, &mut fp);
            p.eval_into(&ym, &mut fm);
            let fd: f64 = (0..6).map(|k| w[k] * (fp[k] - fm[k]) / (2.0 * h)).sum();
            assert_abs_diff_eq!(vjp[j], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn rk4_zero_field_is_identity() {
        let y = DVector::from_vec(vec![1.0, -2.0, 3.5]);
        let out = rk4_step(|v| DVector::zeros(v.len()), &y, 0.1).unwrap();
        assert_eq!(out, y);
    }

    #[test]
    fn rk4_exponential_decay() {
        let y = DVector::from_vec(vec![1.0]);
        let out = rk4_step(|v| -v, &y, 0.1).unwrap();
        assert!((out[0] - (-0.1f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn rk4_linear_system_is_fourth_order_taylor() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -0.3]);
        let y = DVector::from_vec(vec![0.7, -1.1]);
        let dt = 0.2;
        let out = rk4_step(|v| &a * v, &y, dt).unwrap();
        let ah = &a * dt;
        let a2 = &ah * &ah;
        let a3 = &a2 * &ah;
        let a4 = &a3 * &ah;
        let taylor = DMatrix::identity(2, 2) + &ah + a2 / 2.0 + a3 / 6.0 + a4 / 24.0;
        let expected = taylor * &y;
        assert_abs_diff_eq!(out[0], expected[0], epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], expected[1], epsilon = 1e-15);
    }

    #[test]
    fn rk4_order_ratio() {
        let y = DVector::from_vec(vec![1.0]);
        let err = |dt: f64| (rk4_step(|v| -v, &y, dt).unwrap()[0] - (-dt).exp()).abs();
        let ratio = err(0.2) / err(0.1);
        assert!((28.0..=36.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn rk4_reports_blowup() {
        let y = DVector::from_vec(vec![1.0]);
        let r = rk4_step(|v| v.map(|x| x * f64::INFINITY), &y, 0.1);
        assert!(matches!(r, Err(Error::NumericalBlowup { .. })));
    }

    #[test]
    fn integrate_zero_windows_and_equilibrium() {
        let p = Lorenz96::default();
        let cfg = IntegratorConfig::default();
        let y0 = DVector::from_fn(40, |k, _| k as f64 * 0.1);
        let t = integrate(&p, &y0, &cfg, 0).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.state(0), y0);

        let eq = p.equilibrium();
        let t = integrate(&p, &eq, &cfg, 200).unwrap();
        for j in 0..t.len() {
            assert!((t.state(j) - &eq).amax() < 1e-12);
        }
    }

    #[test]
    fn integrate_window_equals_two_rk4_steps() {
        let p = Lorenz96::default();
        let cfg = IntegratorConfig { dt: 0.025, steps_per_window: 2 };
        let y0 = attractor_state(&p, &IntegratorConfig::default(), 1, 5.0).unwrap();
        let t = integrate(&p, &y0, &cfg, 1).unwrap();
        let f = |v: &DVector<f64>| p.eval(v);
        let two = rk4_step(f, &rk4_step(f, &y0, 0.025).unwrap(), 0.025).unwrap();
        assert!((t.state(1) - two).amax() < 1e-13);
        assert_abs_diff_eq!(t.times[1], 0.05, epsilon = 1e-15);
    }

    #[test]
    fn snapshots_are_deterministic_and_spaced() {
        let p = Lorenz96::default();
        let cfg = IntegratorConfig::default();
        let a = generate_snapshots(&p, &cfg, 4, 1.0, 7, 10.0).unwrap();
        let b = generate_snapshots(&p, &cfg, 4, 1.0, 7, 10.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.times, vec![10.0, 11.0, 12.0, 13.0]);
        let c = generate_snapshots(&p, &cfg, 4, 1.0, 8, 10.0).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn single_snapshot_without_burn_in_is_initial_condition() {
        let p = Lorenz96::default();
        let cfg = IntegratorConfig::default();
        let s = generate_snapshots(&p, &cfg, 1, 36.0, 3, 0.0).unwrap();
        assert_eq!(s.state(0), spinup_initial_condition(&p, 3));
    }

    #[test]
    fn snapshot_spacing_must_be_multiple_of_dt() {
        let p = Lorenz96::default();
        let cfg = IntegratorConfig::default();
        assert!(generate_snapshots(&p, &cfg, 3, 0.07, 0, 0.0).is_err());
    }
}
