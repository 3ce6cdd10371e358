//! Three-term snapshot loss and its reverse-mode gradient.
//!
//! For a snapshot `x` with full-order targets `x_k = M_{k dt}(x)`:
//!
//! ```text
//! l(x) = |x - phi(theta(x))|^2 / n
//!      + lambda1 |theta(x) - theta(phi(theta(x)))|^2 / r
//!      + sum_k lambda2 |x_k - phi(u_k)|^2 / n,    u_0 = theta(x), u_k = RK4(u_{k-1})
//! ```
//!
//! where the latent RK4 uses `g(u) = J_theta(phi(u)) f(phi(u))`. The gradient
//! is backpropagated by hand through every RK4 stage, including the encoder
//! Jacobian inside `g`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{add_bias, AutoencoderParams};
use crate::dynamics::{advance, IntegratorConfig, Tendency};
use crate::error::{invalid, Error, Result};

/// Latent rollout states with a larger norm are rescaled onto this sphere.
pub const CLIP_NORM: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub n: usize,
    pub r: usize,
    pub h: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(rename = "K")]
    pub k_steps: usize,
    pub dt_loss: f64,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self { n: 40, r: 28, h: 200, lambda1: 1e3, lambda2: 1.0, k_steps: 5, dt_loss: 0.05 }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.r == 0 || self.n == 0 {
            return Err(invalid("autoencoder dimensions must be positive"));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(invalid("loss weights must be non-negative"));
        }
        if !(self.dt_loss > 0.0) {
            return Err(invalid("dt_loss must be positive"));
        }
        Ok(())
    }

    fn check(&self, p: &AutoencoderParams) -> Result<()> {
        self.validate()?;
        if (p.n(), p.h(), p.r()) != (self.n, self.h, self.r) {
            return Err(invalid(format!(
                "parameters are (n, h, r) = ({}, {}, {}), config says ({}, {}, {})",
                p.n(), p.h(), p.r(), self.n, self.h, self.r
            )));
        }
        Ok(())
    }
}

/// Loss terms summed over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub left_inverse: f64,
    pub trajectory: f64,
    /// A latent rollout was clipped or blew up.
    pub clipped: bool,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.left_inverse + self.trajectory
    }
}

/// Full-order states `M_{k dt_loss}(x)` for `k = 1..=K`, one matrix per `k`.
pub fn fom_targets(batch: &DMatrix<f64>, cfg: &AeConfig, f: &dyn Tendency) -> Result<Vec<DMatrix<f64>>> {
    let inner = IntegratorConfig { dt: cfg.dt_loss, steps_per_window: 1 };
    let mut current = batch.clone();
    let mut out = Vec::with_capacity(cfg.k_steps);
    for _ in 0..cfg.k_steps {
        for (j, mut col) in current.column_iter_mut().enumerate() {
            advance(f, col.as_mut_slice(), &inner, 1).map_err(|e| match e {
                Error::NumericalBlowup { step, .. } => Error::NumericalBlowup { step, member: Some(j) },
                e => e,
            })?;
        }
        out.push(current.clone());
    }
    Ok(out)
}

/// Loss of a single snapshot given its cached full-order targets.
///
/// A blown-up latent rollout yields an infinite trajectory term with `clipped` set.
pub fn snapshot_loss(
    x: &nalgebra::DVector<f64>,
    targets: &[nalgebra::DVector<f64>],
    p: &AutoencoderParams,
    cfg: &AeConfig,
    f: &dyn Tendency,
) -> Result<LossBreakdown> {
    if targets.len() != cfg.k_steps {
        return Err(invalid("need one target per trajectory step"));
    }
    cfg.check(p)?;
    let xb = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
    let tb: Vec<DMatrix<f64>> = targets
        .iter()
        .map(|t| DMatrix::from_column_slice(t.len(), 1, t.as_slice()))
        .collect();
    let net = Net::new(p);
    Ok(net.forward(&xb, &tb, cfg, f).0)
}

/// Summed loss over the batch columns and its gradient.
pub fn loss_and_gradient(
    batch: &DMatrix<f64>,
    targets: &[DMatrix<f64>],
    p: &AutoencoderParams,
    cfg: &AeConfig,
    f: &dyn Tendency,
) -> Result<(LossBreakdown, AutoencoderParams)> {
    cfg.check(p)?;
    if batch.ncols() == 0 {
        return Err(invalid("empty batch"));
    }
    if targets.len() != cfg.k_steps || targets.iter().any(|t| t.shape() != batch.shape()) {
        return Err(invalid("targets do not match the batch"));
    }
    let net = Net::new(p);
    let (loss, tape) = net.forward(batch, targets, cfg, f);
    let grad = net.backward(&tape, batch, targets, cfg, f);
    if !loss.total().is_finite() || grad.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(Error::TrainingDivergence { epoch: 0, batch: 0 });
    }
    Ok((loss, grad))
}

/// Summed loss over the batch columns, forward pass only.
pub fn batch_loss(
    batch: &DMatrix<f64>,
    targets: &[DMatrix<f64>],
    p: &AutoencoderParams,
    cfg: &AeConfig,
    f: &dyn Tendency,
) -> Result<LossBreakdown> {
    cfg.check(p)?;
    if targets.len() != cfg.k_steps || targets.iter().any(|t| t.shape() != batch.shape()) {
        return Err(invalid("targets do not match the batch"));
    }
    Ok(Net::new(p).forward(batch, targets, cfg, f).0)
}

/// Gradient of the summed loss; integrates the full-order targets itself.
pub fn loss_gradient(
    batch: &DMatrix<f64>,
    p: &AutoencoderParams,
    cfg: &AeConfig,
    f: &dyn Tendency,
) -> Result<AutoencoderParams> {
    let targets = fom_targets(batch, cfg, f)?;
    Ok(loss_and_gradient(batch, &targets, p, cfg, f)?.1)
}

struct EncTape {
    x: DMatrix<f64>,
    hidden: DMatrix<f64>,
}

struct DecTape {
    u: DMatrix<f64>,
    hidden: DMatrix<f64>,
}

struct RomTape {
    dec: DecTape,
    d: DMatrix<f64>,
    v: DMatrix<f64>,
    te: DMatrix<f64>,
    w: DMatrix<f64>,
    q: DMatrix<f64>,
}

struct StepTape {
    stages: Vec<RomTape>,
    /// Per-column rescaling applied after the step.
    scales: Vec<f64>,
}

struct Tape {
    u0: DMatrix<f64>,
    u1: DMatrix<f64>,
    xr: DMatrix<f64>,
    enc0: EncTape,
    dec0: DecTape,
    enc1: Option<EncTape>,
    steps: Vec<StepTape>,
    decs: Vec<(DMatrix<f64>, DecTape)>,
}

struct Net<'a> {
    p: &'a AutoencoderParams,
    enc_w1_t: DMatrix<f64>,
    enc_w2_t: DMatrix<f64>,
    dec_w1_t: DMatrix<f64>,
    dec_w2_t: DMatrix<f64>,
}

fn sq_norm(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl<'a> Net<'a> {
    fn new(p: &'a AutoencoderParams) -> Self {
        Self {
            p,
            enc_w1_t: p.enc_w1.transpose(),
            enc_w2_t: p.enc_w2.transpose(),
            dec_w1_t: p.dec_w1.transpose(),
            dec_w2_t: p.dec_w2.transpose(),
        }
    }

    fn encode(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, EncTape) {
        let mut hidden = &self.p.enc_w1 * x;
        add_bias(&mut hidden, &self.p.enc_b1);
        hidden.apply(|v| *v = v.tanh());
        let mut u = &self.p.enc_w2 * &hidden;
        add_bias(&mut u, &self.p.enc_b2);
        (u, EncTape { x: x.clone(), hidden })
    }

    fn encode_back(&self, tape: &EncTape, ubar: &DMatrix<f64>, g: &mut AutoencoderParams) -> DMatrix<f64> {
        g.enc_w2 += ubar * tape.hidden.transpose();
        g.enc_b2 += ubar.column_sum();
        let mut abar = &self.enc_w2_t * ubar;
        abar.zip_apply(&tape.hidden, |a, t| *a *= 1.0 - t * t);
        g.enc_w1 += &abar * tape.x.transpose();
        g.enc_b1 += abar.column_sum();
        &self.enc_w1_t * abar
    }

    fn decode(&self, u: &DMatrix<f64>) -> (DMatrix<f64>, DecTape) {
        let mut hidden = &self.p.dec_w1 * u;
        add_bias(&mut hidden, &self.p.dec_b1);
        hidden.apply(|v| *v = v.tanh());
        let mut x = &self.p.dec_w2 * &hidden;
        add_bias(&mut x, &self.p.dec_b2);
        (x, DecTape { u: u.clone(), hidden })
    }

    fn decode_back(&self, tape: &DecTape, xbar: &DMatrix<f64>, g: &mut AutoencoderParams) -> DMatrix<f64> {
        g.dec_w2 += xbar * tape.hidden.transpose();
        g.dec_b2 += xbar.column_sum();
        let mut abar = &self.dec_w2_t * xbar;
        abar.zip_apply(&tape.hidden, |a, t| *a *= 1.0 - t * t);
        g.dec_w1 += &abar * tape.u.transpose();
        g.dec_b1 += abar.column_sum();
        &self.dec_w1_t * abar
    }

    fn rom(&self, u: &DMatrix<f64>, f: &dyn Tendency) -> (DMatrix<f64>, RomTape) {
        let (d, dec) = self.decode(u);
        let v = f.eval_columns(&d);
        let mut te = &self.p.enc_w1 * &d;
        add_bias(&mut te, &self.p.enc_b1);
        te.apply(|a| *a = a.tanh());
        let w = &self.p.enc_w1 * &v;
        let mut q = w.clone();
        q.zip_apply(&te, |qv, t| *qv *= 1.0 - t * t);
        let g = &self.p.enc_w2 * &q;
        (g, RomTape { dec, d, v, te, w, q })
    }

    fn rom_back(&self, tape: &RomTape, gbar: &DMatrix<f64>, f: &dyn Tendency, g: &mut AutoencoderParams) -> DMatrix<f64> {
        g.enc_w2 += gbar * tape.q.transpose();
        let qbar = &self.enc_w2_t * gbar;
        // q = s .* w with s = 1 - te^2
        let mut wbar = qbar.clone();
        wbar.zip_apply(&tape.te, |x, t| *x *= 1.0 - t * t);
        let mut abar = qbar;
        abar.zip_zip_apply(&tape.w, &tape.te, |x, w, t| *x *= w * (-2.0 * t * (1.0 - t * t)));
        g.enc_w1 += &wbar * tape.v.transpose() + &abar * tape.d.transpose();
        g.enc_b1 += abar.column_sum();
        let vbar = &self.enc_w1_t * &wbar;
        let mut dbar = &self.enc_w1_t * &abar;
        let mut tmp = vec![0.0; tape.d.nrows()];
        for j in 0..dbar.ncols() {
            f.vjp_into(tape.d.column(j).as_slice(), vbar.column(j).as_slice(), &mut tmp);
            for (o, t) in dbar.column_mut(j).iter_mut().zip(&tmp) {
                *o += t;
            }
        }
        self.decode_back(&tape.dec, &dbar, g)
    }

    fn rk4(&self, u: &DMatrix<f64>, f: &dyn Tendency, dt: f64) -> (DMatrix<f64>, Vec<RomTape>) {
        let (k1, t1) = self.rom(u, f);
        let (k2, t2) = self.rom(&(u + &k1 * (0.5 * dt)), f);
        let (k3, t3) = self.rom(&(u + &k2 * (0.5 * dt)), f);
        let (k4, t4) = self.rom(&(u + &k3 * dt), f);
        let next = u + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        (next, vec![t1, t2, t3, t4])
    }

    fn rk4_back(&self, stages: &[RomTape], ubar_next: &DMatrix<f64>, f: &dyn Tendency, dt: f64, g: &mut AutoencoderParams) -> DMatrix<f64> {
        let mut ubar = ubar_next.clone();
        let mut k1bar = ubar_next * (dt / 6.0);
        let mut k2bar = ubar_next * (dt / 3.0);
        let mut k3bar = ubar_next * (dt / 3.0);
        let k4bar = ubar_next * (dt / 6.0);

        let z4 = self.rom_back(&stages[3], &k4bar, f, g);
        ubar += &z4;
        k3bar += &z4 * dt;
        let z3 = self.rom_back(&stages[2], &k3bar, f, g);
        ubar += &z3;
        k2bar += &z3 * (0.5 * dt);
        let z2 = self.rom_back(&stages[1], &k2bar, f, g);
        ubar += &z2;
        k1bar += &z2 * (0.5 * dt);
        ubar += self.rom_back(&stages[0], &k1bar, f, g);
        ubar
    }

    fn forward(&self, x: &DMatrix<f64>, targets: &[DMatrix<f64>], cfg: &AeConfig, f: &dyn Tendency) -> (LossBreakdown, Tape) {
        let n = cfg.n as f64;
        let r = cfg.r as f64;
        let (u0, enc0) = self.encode(x);
        let (xr, dec0) = self.decode(&u0);
        let mut loss = LossBreakdown { reconstruction: sq_norm(x, &xr) / n, ..Default::default() };

        let (u1, enc1) = if cfg.lambda1 > 0.0 {
            let (u1, t) = self.encode(&xr);
            loss.left_inverse = cfg.lambda1 / r * sq_norm(&u0, &u1);
            (u1, Some(t))
        } else {
            (u0.clone(), None)
        };

        let mut steps = Vec::new();
        let mut decs = Vec::new();
        if cfg.lambda2 > 0.0 {
            let mut u = u0.clone();
            for target in targets.iter().take(cfg.k_steps) {
                let (mut next, stages) = self.rk4(&u, f, cfg.dt_loss);
                let mut scales = vec![1.0; next.ncols()];
                for (j, mut col) in next.column_iter_mut().enumerate() {
                    let norm = col.norm();
                    if !norm.is_finite() {
                        loss.clipped = true;
                        loss.trajectory = f64::INFINITY;
                    } else if norm > CLIP_NORM {
                        loss.clipped = true;
                        scales[j] = CLIP_NORM / norm;
                        col *= scales[j];
                    }
                }
                let (xk, dk) = self.decode(&next);
                loss.trajectory += cfg.lambda2 / n * sq_norm(target, &xk);
                steps.push(StepTape { stages, scales });
                decs.push((xk, dk));
                u = next;
            }
        }

        (loss, Tape { u0, u1, xr, enc0, dec0, enc1, steps, decs })
    }

    fn backward(&self, tape: &Tape, x: &DMatrix<f64>, targets: &[DMatrix<f64>], cfg: &AeConfig, f: &dyn Tendency) -> AutoencoderParams {
        let n = cfg.n as f64;
        let r = cfg.r as f64;
        let mut g = self.p.zeros_like();

        let mut xr_bar = (&tape.xr - x) * (2.0 / n);
        let mut u0_bar = DMatrix::zeros(tape.u0.nrows(), tape.u0.ncols());
        if let Some(enc1) = &tape.enc1 {
            let diff = (&tape.u0 - &tape.u1) * (2.0 * cfg.lambda1 / r);
            xr_bar += self.encode_back(enc1, &(-&diff), &mut g);
            u0_bar += diff;
        }
        u0_bar += self.decode_back(&tape.dec0, &xr_bar, &mut g);

        let mut ubar = DMatrix::zeros(tape.u0.nrows(), tape.u0.ncols());
        for k in (0..tape.steps.len()).rev() {
            let (xk, dk) = &tape.decs[k];
            let xk_bar = (xk - &targets[k]) * (2.0 * cfg.lambda2 / n);
            ubar += self.decode_back(dk, &xk_bar, &mut g);
            let step = &tape.steps[k];
            for (j, s) in step.scales.iter().enumerate() {
                if *s != 1.0 {
                    ubar.column_mut(j).scale_mut(*s);
                }
            }
            ubar = self.rk4_back(&step.stages, &ubar, f, cfg.dt_loss, &mut g);
        }
        u0_bar += ubar;

        self.encode_back(&tape.enc0, &u0_bar, &mut g);
        g
    }
}
