use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{set_mean, MeanAdjustment, MultifidelityState, ObservationModel, PerturbedObservations, InflationConfig};
use crate::ensemble::{cross_cov, inflate, mean};
use crate::error::{invalid, Error, Result};
use crate::rom_autoencoder::AutoencoderParams;
use crate::rom_pod::LinearCoupling;

const ASYMMETRY_TOL: f64 = 1e-10;
const JITTER: f64 = 1e-10;

/// `C S^{-1}` for a symmetric positive-definite `S`.
///
/// `S` must be symmetric to `1e-10` relative to its largest entry; it is then
/// symmetrized and Cholesky-factored, retrying once with `1e-10 * trace/m * I`.
pub fn solve_spd_right(c: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = s.nrows();
    if !s.is_square() || c.ncols() != m {
        return Err(invalid(format!("cannot right-solve a {}x{} system against {}x{}", c.nrows(), c.ncols(), m, s.ncols())));
    }
    if s.iter().chain(c.iter()).any(|v| !v.is_finite()) {
        return Err(Error::LinearSolve("non-finite entries in the system".into()));
    }
    let asym = (s - s.transpose()).amax();
    if asym > ASYMMETRY_TOL * s.amax().max(1.0) {
        return Err(Error::LinearSolve(format!("matrix is not symmetric (asymmetry {asym:e})")));
    }
    let sym = (s + s.transpose()) * 0.5;
    let chol = match sym.clone().cholesky() {
        Some(ch) => ch,
        None => {
            let bump = JITTER * sym.trace() / m as f64;
            let jittered = &sym + DMatrix::identity(m, m) * bump;
            jittered
                .cholesky()
                .ok_or_else(|| Error::LinearSolve("matrix is not positive definite even after jitter".into()))?
        }
    };
    Ok(chol.solve(&c.transpose()).transpose())
}

/// `cov(X, HX) (cov(HX, HX) + R)^{-1}`.
pub fn enkf_gain(x: &DMatrix<f64>, hx: &DMatrix<f64>, obs: &ObservationModel) -> Result<DMatrix<f64>> {
    let s = cross_cov(hx, hx)? + obs.r();
    solve_spd_right(&cross_cov(x, hx)?, &s)
}

/// Perturbed-observation EnKF analysis with inflation applied to the forecast first.
pub fn enkf_analysis(xb: &DMatrix<f64>, yx: &DMatrix<f64>, obs: &ObservationModel, alpha: f64) -> Result<DMatrix<f64>> {
    check_obs(yx, obs, xb.ncols())?;
    let xb = inflate(xb, alpha)?;
    let hx = obs.apply(&xb);
    let k = enkf_gain(&xb, &hx, obs)?;
    Ok(&xb - k * (hx - yx))
}

/// Draws `N(y, R)` perturbations from `rng` and runs [`enkf_analysis`].
pub fn enkf_step<G: Rng + ?Sized>(
    xb: &DMatrix<f64>,
    y: &DVector<f64>,
    obs: &ObservationModel,
    alpha: f64,
    rng: &mut G,
) -> Result<DMatrix<f64>> {
    let yx = obs.perturb(y, xb.ncols(), 1.0, rng);
    enkf_analysis(xb, &yx, obs, alpha)
}

fn check_obs(y: &DMatrix<f64>, obs: &ObservationModel, count: usize) -> Result<()> {
    if y.nrows() != obs.m() || y.ncols() != count {
        return Err(invalid(format!(
            "perturbed observations are {}x{}, expected {}x{count}",
            y.nrows(),
            y.ncols(),
            obs.m()
        )));
    }
    Ok(())
}

/// Control-variate gain `cov(X, U_hat) (cov(U_hat, U_hat) + cov(U, U))^{-1}`.
pub fn optimal_gain(cov_xu: &DMatrix<f64>, cov_uhuh: &DMatrix<f64>, cov_uu: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if cov_uhuh.shape() != cov_uu.shape() {
        return Err(invalid("control and ancillary covariances differ in shape"));
    }
    solve_spd_right(cov_xu, &(cov_uhuh + cov_uu))
}

/// Semi-linearized covariance of two total variates given their constituents:
///
/// `cov(a_x,b_x) + cov(a_uh,b_uh)/4 + cov(a_u,b_u)/4 - cov(a_x,b_uh)/2 - cov(a_uh,b_x)/2`.
///
/// `a_x, a_uh, b_x, b_uh` share the principal ensemble size; `a_u, b_u` the ancillary one.
pub fn five_term_cov(
    a_x: &DMatrix<f64>,
    a_uh: &DMatrix<f64>,
    a_u: &DMatrix<f64>,
    b_x: &DMatrix<f64>,
    b_uh: &DMatrix<f64>,
    b_u: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    Ok(cross_cov(a_x, b_x)? + (cross_cov(a_uh, b_uh)? + cross_cov(a_u, b_u)?) * 0.25
        - (cross_cov(a_x, b_uh)? + cross_cov(a_uh, b_x)?) * 0.5)
}

/// Multifidelity gain `cov(Z, HZ) (cov(HZ, HZ) + R)^{-1}` from constituent ensembles.
///
/// `uh_interp` and `u_interp` are the control and ancillary members mapped to principal space.
pub fn mfenkf_gain(
    hx: &DMatrix<f64>,
    huh: &DMatrix<f64>,
    hu: &DMatrix<f64>,
    x: &DMatrix<f64>,
    uh_interp: &DMatrix<f64>,
    u_interp: &DMatrix<f64>,
    obs: &ObservationModel,
) -> Result<DMatrix<f64>> {
    let cov1 = five_term_cov(x, uh_interp, u_interp, hx, huh, hu)?;
    let cov2 = five_term_cov(hx, huh, hu, hx, huh, hu)? + obs.r();
    solve_spd_right(&cov1, &cov2)
}

fn check_state(state: &MultifidelityState, pert: &PerturbedObservations, obs: &ObservationModel) -> Result<()> {
    check_obs(&pert.yx, obs, state.n_x())?;
    check_obs(&pert.yu, obs, state.n_u())?;
    if state.x.nrows() != obs.n() {
        return Err(invalid(format!("state dimension {} does not match H with {} columns", state.x.nrows(), obs.n())));
    }
    Ok(())
}

fn inflate_state(state: &MultifidelityState, inflation: &InflationConfig) -> Result<MultifidelityState> {
    Ok(MultifidelityState {
        x: inflate(&state.x, inflation.alpha_x)?,
        u_hat: inflate(&state.u_hat, inflation.alpha_x)?,
        u: inflate(&state.u, inflation.alpha_u)?,
    })
}

/// MFEnKF with a linear coupling; `None` stands for the identity in either slot.
fn linear_mfenkf(
    state: &MultifidelityState,
    pert: &PerturbedObservations,
    obs: &ObservationModel,
    theta: Option<&DMatrix<f64>>,
    phi: Option<&DMatrix<f64>>,
) -> Result<MultifidelityState> {
    let interp = |u: &DMatrix<f64>| phi.map_or_else(|| u.clone(), |p| p * u);
    let project = |x: &DMatrix<f64>| theta.map_or_else(|| x.clone(), |t| t * x);

    let uh_i = interp(&state.u_hat);
    let u_i = interp(&state.u);
    let hx = obs.apply(&state.x);
    let huh = obs.apply(&uh_i);
    let hu = obs.apply(&u_i);
    let k = mfenkf_gain(&hx, &huh, &hu, &state.x, &uh_i, &u_i, obs)?;
    let k_u = project(&k);

    let mut xa = &state.x - &k * (hx - &pert.yx);
    let uha = &state.u_hat - &k_u * (huh - &pert.yx);
    let mut ua = &state.u - &k_u * (hu - &pert.yu);

    let gap = mean(&uha) - mean(&ua);
    let z = mean(&xa) - phi.map_or_else(|| gap.clone(), |p| p * &gap) * 0.5;
    set_mean(&mut xa, &z);
    let uha = project(&xa);
    set_mean(&mut ua, &mean(&uha));
    Ok(MultifidelityState { x: xa, u_hat: uha, u: ua })
}

/// MFEnKF analysis with a POD coupling.
///
/// After the three gain updates, the principal mean is set to the total-variate mean,
/// the control ensemble is recorrelated as `Theta X_a` and the ancillary mean is set to
/// `Theta` times the total mean.
pub fn mfenkf_analysis(
    state: &MultifidelityState,
    pert: &PerturbedObservations,
    obs: &ObservationModel,
    coupling: &LinearCoupling,
    inflation: &InflationConfig,
) -> Result<MultifidelityState> {
    check_state(state, pert, obs)?;
    if coupling.r() != state.u.nrows() || coupling.n() != state.x.nrows() {
        return Err(invalid("coupling dimensions do not match the state"));
    }
    let prior = inflate_state(state, inflation)?;
    linear_mfenkf(&prior, pert, obs, Some(&coupling.theta), Some(&coupling.phi))
}

/// MFEnKF on an autoencoder surrogate treated as `Theta = Phi = I` in principal space.
///
/// Control and ancillary members are decoded, assimilated with identity coupling and
/// re-encoded.
pub fn identity_mfenkf_analysis(
    state: &MultifidelityState,
    pert: &PerturbedObservations,
    obs: &ObservationModel,
    ae: &AutoencoderParams,
    inflation: &InflationConfig,
) -> Result<MultifidelityState> {
    check_state(state, pert, obs)?;
    let prior = inflate_state(state, inflation)?;
    let decoded = MultifidelityState {
        x: prior.x,
        u_hat: ae.decode_columns(&prior.u_hat),
        u: ae.decode_columns(&prior.u),
    };
    let post = linear_mfenkf(&decoded, pert, obs, None, None)?;
    Ok(MultifidelityState { u_hat: ae.encode_columns(&post.x), u: ae.encode_columns(&post.u), x: post.x })
}

/// NL-MFEnKF analysis with an autoencoder coupling.
///
/// The principal ensemble moves with `K = cov(Z, HZ) S^{-1}` and both reduced ensembles
/// with `K_theta = cov(theta(Z), HZ) S^{-1}`, where `S = cov(HZ, HZ) + R` and every
/// covariance is the five-term expansion over `(X, phi(U_hat), phi(U))`, using
/// `(theta(X), U_hat, U)` on the left for `K_theta`.
pub fn nlmfenkf_analysis(
    state: &MultifidelityState,
    pert: &PerturbedObservations,
    obs: &ObservationModel,
    ae: &AutoencoderParams,
    inflation: &InflationConfig,
    adjustment: MeanAdjustment,
) -> Result<MultifidelityState> {
    check_state(state, pert, obs)?;
    if ae.r() != state.u.nrows() || ae.n() != state.x.nrows() {
        return Err(invalid("autoencoder dimensions do not match the state"));
    }
    let s = inflate_state(state, inflation)?;
    let n = s.x.nrows();

    let uh_i = ae.decode_columns(&s.u_hat);
    let u_i = ae.decode_columns(&s.u);
    let hx = obs.apply(&s.x);
    let huh = obs.apply(&uh_i);
    let hu = obs.apply(&u_i);
    let theta_x = ae.encode_columns(&s.x);

    let cov1 = five_term_cov(&s.x, &uh_i, &u_i, &hx, &huh, &hu)?;
    let cov1_theta = five_term_cov(&theta_x, &s.u_hat, &s.u, &hx, &huh, &hu)?;
    let cov2 = five_term_cov(&hx, &huh, &hu, &hx, &huh, &hu)? + obs.r();
    let mut stacked = DMatrix::zeros(n + ae.r(), obs.m());
    stacked.rows_mut(0, n).copy_from(&cov1);
    stacked.rows_mut(n, ae.r()).copy_from(&cov1_theta);
    let gains = solve_spd_right(&stacked, &cov2)?;
    let k = gains.rows(0, n);
    let k_theta = gains.rows(n, ae.r());

    let mut xa = &s.x - k * (hx - &pert.yx);
    let uha = &s.u_hat - k_theta * (huh - &pert.yx);
    let mut ua = &s.u - k_theta * (hu - &pert.yu);

    let ua_target = match adjustment {
        MeanAdjustment::ControlSpaceUnbiased => None,
        MeanAdjustment::KalmanApproximate => {
            Some(mean(&ae.encode_columns(&xa)) - (mean(&uha) - mean(&ua)) * 0.5)
        }
    };
    let z = mean(&xa) - (mean(&ae.decode_columns(&uha)) - mean(&ae.decode_columns(&ua))) * 0.5;
    set_mean(&mut xa, &z);
    let uha = ae.encode_columns(&xa);
    let target = ua_target.unwrap_or_else(|| mean(&uha));
    set_mean(&mut ua, &target);
    Ok(MultifidelityState { x: xa, u_hat: uha, u: ua })
}
