//! One-hidden-layer tanh autoencoder used as a nonlinear projection/interpolation pair,
//! its physics-informed training loss, and the latent ROM it induces.

mod adam;
mod loss;
mod train;

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Tendency, rk4_step_columns};
use crate::error::{invalid, Error, Result};
use crate::storage::{read_json, sidecar_path, write_json};

pub use adam::{adam_step, AdamHyper, AdamState};
pub use loss::{batch_loss, fom_targets, loss_and_gradient, loss_gradient, snapshot_loss, AeConfig, LossBreakdown};
pub use train::{train, train_with_progress, write_training_log, EpochLog, TrainConfig, TrainOutcome};

/// Encoder `theta(x) = W2 tanh(W1 x + b1) + b2` and decoder `phi(u)` of the same form.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderParams {
    pub enc_w1: DMatrix<f64>,
    pub enc_b1: DVector<f64>,
    pub enc_w2: DMatrix<f64>,
    pub enc_b2: DVector<f64>,
    pub dec_w1: DMatrix<f64>,
    pub dec_b1: DVector<f64>,
    pub dec_w2: DMatrix<f64>,
    pub dec_b2: DVector<f64>,
}

pub(crate) fn add_bias(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut col in m.column_iter_mut() {
        col += b;
    }
}

fn one_column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

impl AutoencoderParams {
    pub fn zeros(n: usize, h: usize, r: usize) -> Self {
        Self {
            enc_w1: DMatrix::zeros(h, n),
            enc_b1: DVector::zeros(h),
            enc_w2: DMatrix::zeros(r, h),
            enc_b2: DVector::zeros(r),
            dec_w1: DMatrix::zeros(h, r),
            dec_b1: DVector::zeros(h),
            dec_w2: DMatrix::zeros(n, h),
            dec_b2: DVector::zeros(n),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng>(n: usize, h: usize, r: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(n, h, r);
        for w in [&mut p.enc_w1, &mut p.enc_w2, &mut p.dec_w1, &mut p.dec_w2] {
            let limit = (6.0 / (w.nrows() + w.ncols()) as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.gen_range(-limit..limit);
            }
        }
        p
    }

    pub fn n(&self) -> usize {
        self.enc_w1.ncols()
    }

    pub fn h(&self) -> usize {
        self.enc_w1.nrows()
    }

    pub fn r(&self) -> usize {
        self.enc_w2.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, h, r) = (self.n(), self.h(), self.r());
        let shapes = [
            (self.enc_w1.shape(), (h, n)),
            (self.enc_b1.shape(), (h, 1)),
            (self.enc_w2.shape(), (r, h)),
            (self.enc_b2.shape(), (r, 1)),
            (self.dec_w1.shape(), (h, r)),
            (self.dec_b1.shape(), (h, 1)),
            (self.dec_w2.shape(), (n, h)),
            (self.dec_b2.shape(), (n, 1)),
        ];
        if shapes.iter().any(|(got, want)| got != want) {
            return Err(invalid("autoencoder parameter shapes are inconsistent"));
        }
        if self.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(invalid("autoencoder parameters contain non-finite entries"));
        }
        Ok(())
    }

    /// The eight arrays in storage order.
    pub fn slices(&self) -> [&[f64]; 8] {
        [
            self.enc_w1.as_slice(),
            self.enc_b1.as_slice(),
            self.enc_w2.as_slice(),
            self.enc_b2.as_slice(),
            self.dec_w1.as_slice(),
            self.dec_b1.as_slice(),
            self.dec_w2.as_slice(),
            self.dec_b2.as_slice(),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.enc_w1.as_mut_slice(),
            self.enc_b1.as_mut_slice(),
            self.enc_w2.as_mut_slice(),
            self.enc_b2.as_mut_slice(),
            self.dec_w1.as_mut_slice(),
            self.dec_b1.as_mut_slice(),
            self.dec_w2.as_mut_slice(),
            self.dec_b2.as_mut_slice(),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for s in self.slices_mut() {
            let len = s.len();
            s.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n(), self.h(), self.r())
    }

    /// `self += alpha * other`, elementwise over all parameters.
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    pub fn encode(&self, x: &DVector<f64>) -> DVector<f64> {
        self.encode_columns(&one_column(x)).column(0).into_owned()
    }

    pub fn decode(&self, u: &DVector<f64>) -> DVector<f64> {
        self.decode_columns(&one_column(u)).column(0).into_owned()
    }

    pub fn encode_columns(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = &self.enc_w1 * x;
        add_bias(&mut a, &self.enc_b1);
        a.apply(|v| *v = v.tanh());
        let mut u = &self.enc_w2 * a;
        add_bias(&mut u, &self.enc_b2);
        u
    }

    pub fn decode_columns(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = &self.dec_w1 * u;
        add_bias(&mut a, &self.dec_b1);
        a.apply(|v| *v = v.tanh());
        let mut x = &self.dec_w2 * a;
        add_bias(&mut x, &self.dec_b2);
        x
    }

    /// Encoder Jacobian-vector product `J_theta(x) v`.
    pub fn encoder_jvp(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.encoder_jvp_columns(&one_column(x), &one_column(v)).column(0).into_owned()
    }

    pub fn encoder_jvp_columns(&self, x: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = &self.enc_w1 * x;
        add_bias(&mut a, &self.enc_b1);
        let mut q = &self.enc_w1 * v;
        q.zip_apply(&a, |qv, av| {
            let t = av.tanh();
            *qv *= 1.0 - t * t;
        });
        &self.enc_w2 * q
    }

    /// Latent tendency `theta'(phi(u)) f(phi(u))`.
    pub fn nn_rom_tendency(&self, u: &DVector<f64>, f: &dyn Tendency) -> Result<DVector<f64>> {
        Ok(self.nn_rom_tendency_columns(&one_column(u), f)?.column(0).into_owned())
    }

    pub fn nn_rom_tendency_columns(&self, u: &DMatrix<f64>, f: &dyn Tendency) -> Result<DMatrix<f64>> {
        let d = self.decode_columns(u);
        let v = f.eval_columns(&d);
        let g = self.encoder_jvp_columns(&d, &v);
        crate::dynamics::check_columns_finite(&g, 0)?;
        Ok(g)
    }

    /// One RK4 step of the latent ROM for every column of `u`.
    pub fn rom_rk4_step(&self, u: &DMatrix<f64>, f: &dyn Tendency, dt: f64) -> Result<DMatrix<f64>> {
        rk4_step_columns(|v| self.nn_rom_tendency_columns(v, f), u, dt)
    }

    /// Binary layout: `b"AEP1"`, then `n`, `h`, `r` as little-endian u64, then the eight
    /// arrays (column-major) as little-endian f64 in storage order.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut buf = Vec::with_capacity(28 + 8 * self.num_params());
        buf.extend_from_slice(MAGIC);
        for d in [self.n(), self.h(), self.r()] {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for s in self.slices() {
            for v in s {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path)?;
        let bad = |msg: &str| Error::Format { path: path.into(), msg: msg.into() };
        if bytes.len() < 28 || &bytes[..4] != MAGIC {
            return Err(bad("not an autoencoder parameter file"));
        }
        let dim = |k: usize| u64::from_le_bytes(bytes[4 + 8 * k..12 + 8 * k].try_into().unwrap()) as usize;
        let mut p = Self::zeros(dim(0), dim(1), dim(2));
        let body = &bytes[28..];
        if body.len() != 8 * p.num_params() {
            return Err(bad("parameter payload has the wrong length"));
        }
        let flat: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        p.set_flat(&flat);
        Ok(p)
    }
}

const MAGIC: &[u8; 4] = b"AEP1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AeSidecar {
    pub n: usize,
    pub r: usize,
    pub h: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(rename = "K")]
    pub k_steps: usize,
    pub dt_loss: f64,
    pub seed: u64,
    pub train_config: TrainConfig,
    pub final_loss: f64,
    pub snapshot_file_hash: Option<String>,
}

impl AeSidecar {
    pub fn new(cfg: &AeConfig, tcfg: &TrainConfig, outcome: &TrainOutcome, snapshot_file_hash: Option<String>) -> Self {
        Self {
            n: cfg.n,
            r: cfg.r,
            h: cfg.h,
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            k_steps: cfg.k_steps,
            dt_loss: cfg.dt_loss,
            seed: tcfg.seed,
            train_config: *tcfg,
            final_loss: outcome.final_loss(),
            snapshot_file_hash,
        }
    }

    /// Parameters in `path`, sidecar in `<path>.json`.
    pub fn save_with(&self, params: &AutoencoderParams, path: &Path) -> Result<()> {
        params.save(path)?;
        write_json(&sidecar_path(path), self)
    }

    pub fn load_for(path: &Path) -> Result<Self> {
        read_json(&sidecar_path(path))
    }
}
