use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamHyper, AdamState};
use super::loss::{batch_loss, fom_targets, loss_and_gradient, AeConfig};
use super::AutoencoderParams;
use crate::dynamics::Tendency;
use crate::error::{invalid, Error, Result};
use crate::rng::{role, substream};
use crate::storage::format_f64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Fraction of snapshots held out for model selection.
    pub holdout_fraction: f64,
    /// Leading epochs on the reconstruction term alone; they do not count toward `epochs`.
    pub pretrain_epochs: usize,
    /// Step size during those epochs; `learning_rate` when absent.
    pub pretrain_learning_rate: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            shuffle: true,
            holdout_fraction: 0.1,
            pretrain_epochs: 0,
            pretrain_learning_rate: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(invalid("holdout_fraction must lie in [0, 1)"));
        }
        if !(self.learning_rate > 0.0) || self.pretrain_learning_rate.is_some_and(|lr| !(lr > 0.0)) {
            return Err(invalid("learning rates must be positive"));
        }
        Ok(())
    }
}

/// Mean per-snapshot losses after one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// True while training on the reconstruction term alone.
    pub pretraining: bool,
    pub train_loss: f64,
    /// `train_loss` split into reconstruction, left-inverse and trajectory terms.
    pub train_terms: [f64; 3],
    pub holdout_loss: f64,
    pub clipped_batches: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the full-loss epoch with the lowest holdout loss (last epoch without a holdout).
    pub params: AutoencoderParams,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.log.iter().find(|l| l.epoch == self.best_epoch).map_or(f64::NAN, |l| l.train_loss)
    }
}

/// Columns: `epoch,pretraining,train_loss,reconstruction,left_inverse,trajectory,holdout_loss,clipped_batches`.
pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "pretraining",
        "train_loss",
        "reconstruction",
        "left_inverse",
        "trajectory",
        "holdout_loss",
        "clipped_batches",
    ])?;
    for l in log {
        w.write_record([
            l.epoch.to_string(),
            l.pretraining.to_string(),
            format_f64(l.train_loss),
            format_f64(l.train_terms[0]),
            format_f64(l.train_terms[1]),
            format_f64(l.train_terms[2]),
            format_f64(l.holdout_loss),
            l.clipped_batches.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

const EVAL_CHUNK: usize = 256;

fn mean_loss(
    data: &DMatrix<f64>,
    targets: &[DMatrix<f64>],
    idx: &[usize],
    p: &AutoencoderParams,
    cfg: &AeConfig,
    f: &dyn Tendency,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let b = data.select_columns(chunk);
        let t: Vec<DMatrix<f64>> = targets.iter().map(|m| m.select_columns(chunk)).collect();
        total += batch_loss(&b, &t, p, cfg, f)?.total();
    }
    Ok(total / idx.len() as f64)
}

/// Trains an autoencoder on the columns of `snapshots` with minibatch ADAM.
pub fn train(snapshots: &DMatrix<f64>, cfg: &AeConfig, tcfg: &TrainConfig, f: &dyn Tendency) -> Result<TrainOutcome> {
    train_with_progress(snapshots, cfg, tcfg, f, |_| {})
}

pub fn train_with_progress(
    snapshots: &DMatrix<f64>,
    cfg: &AeConfig,
    tcfg: &TrainConfig,
    f: &dyn Tendency,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    if snapshots.nrows() != cfg.n {
        return Err(invalid(format!("snapshots have dimension {}, config says n = {}", snapshots.nrows(), cfg.n)));
    }
    let total = snapshots.ncols();
    let n_holdout = (total as f64 * tcfg.holdout_fraction).round() as usize;
    if total < tcfg.batch_size || total - n_holdout < tcfg.batch_size {
        return Err(invalid(format!("{total} snapshots cannot fill a batch of {}", tcfg.batch_size)));
    }

    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut substream(tcfg.seed, &[role::TRAIN_SPLIT]));
    let (holdout, train_idx) = order.split_at(n_holdout);
    let mut train_idx = train_idx.to_vec();

    let targets = fom_targets(snapshots, cfg, f)?;
    let warmup_cfg = AeConfig { lambda1: 0.0, lambda2: 0.0, k_steps: 0, ..*cfg };
    let mut params = AutoencoderParams::glorot(cfg.n, cfg.h, cfg.r, &mut substream(tcfg.seed, &[role::TRAIN_INIT]));
    let hyper = AdamHyper { learning_rate: tcfg.learning_rate, ..Default::default() };
    let warmup = AdamHyper { learning_rate: tcfg.pretrain_learning_rate.unwrap_or(tcfg.learning_rate), ..hyper };
    let mut adam = AdamState::new(&params, if tcfg.pretrain_epochs > 0 { warmup } else { hyper });

    let total_epochs = tcfg.pretrain_epochs + tcfg.epochs;
    let mut log = Vec::with_capacity(total_epochs);
    let mut best = (f64::INFINITY, 0usize, params.clone());

    for epoch in 1..=total_epochs {
        let pretraining = epoch <= tcfg.pretrain_epochs;
        if epoch == tcfg.pretrain_epochs + 1 {
            adam = AdamState::new(&params, hyper);
        }
        let (ecfg, etargets): (&AeConfig, &[DMatrix<f64>]) =
            if pretraining { (&warmup_cfg, &[]) } else { (cfg, &targets) };
        if tcfg.shuffle {
            train_idx.shuffle(&mut substream(tcfg.seed, &[role::TRAIN_SHUFFLE, epoch as u64]));
        }
        let mut terms = [0.0; 3];
        let mut clipped_batches = 0;
        for (batch, chunk) in train_idx.chunks(tcfg.batch_size).enumerate() {
            let b = snapshots.select_columns(chunk);
            let t: Vec<DMatrix<f64>> = etargets.iter().map(|m| m.select_columns(chunk)).collect();
            let (loss, grad) = loss_and_gradient(&b, &t, &params, ecfg, f).map_err(|e| match e {
                Error::TrainingDivergence { .. } => Error::TrainingDivergence { epoch, batch },
                e => e,
            })?;
            clipped_batches += usize::from(loss.clipped);
            terms[0] += loss.reconstruction;
            terms[1] += loss.left_inverse;
            terms[2] += loss.trajectory;
            adam_step(&mut params, &grad, &mut adam);
        }
        let train_terms = terms.map(|t| t / train_idx.len() as f64);
        let train_loss = train_terms.iter().sum();
        let holdout_loss = if holdout.is_empty() {
            train_loss
        } else {
            mean_loss(snapshots, etargets, holdout, &params, ecfg, f)?
        };
        let entry = EpochLog { epoch, pretraining, train_loss, train_terms, holdout_loss, clipped_batches };
        progress(&entry);
        log.push(entry);
        if !pretraining && (holdout.is_empty() || holdout_loss < best.0) {
            best = (holdout_loss, epoch, params.clone());
        }
    }

    Ok(TrainOutcome { params: best.2, log, best_epoch: best.1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Lorenz96;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Frozen(usize);
    impl Tendency for Frozen {
        fn dim(&self) -> usize {
            self.0
        }
        fn eval_into(&self, _: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
        fn vjp_into(&self, _: &[f64], _: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
    }

    fn subspace_data(n: usize, r: usize, count: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = DMatrix::from_fn(n, r, |_, _| rng.gen_range(-1.0..1.0));
        let coeffs = DMatrix::from_fn(r, count, |_, _| rng.gen_range(-0.5..0.5));
        basis * coeffs
    }

    #[test]
    fn learns_a_linear_subspace() {
        let data = subspace_data(8, 2, 400, 1);
        let cfg = AeConfig { n: 8, r: 2, h: 16, lambda1: 0.0, lambda2: 0.0, k_steps: 0, dt_loss: 0.05 };
        let tcfg = TrainConfig { epochs: 300, batch_size: 32, learning_rate: 3e-3, seed: 2, ..Default::default() };
        let out = train(&data, &cfg, &tcfg, &Frozen(8)).unwrap();
        let recon = out.params.decode_columns(&out.params.encode_columns(&data));
        let mse = (recon - &data).norm_squared() / (8.0 * 400.0);
        assert!(mse < 1e-3, "mse {mse}");
    }

    #[test]
    fn holdout_improves_and_training_is_deterministic() {
        let f = Lorenz96::new(6, 8.0).unwrap();
        let data = crate::dynamics::generate_snapshots(&f, &Default::default(), 120, 0.5, 3, 10.0).unwrap().states;
        let cfg = AeConfig { n: 6, r: 3, h: 8, lambda1: 10.0, lambda2: 1.0, k_steps: 2, dt_loss: 0.05 };
        let tcfg = TrainConfig { epochs: 15, batch_size: 16, learning_rate: 3e-3, seed: 9, ..Default::default() };
        let a = train(&data, &cfg, &tcfg, &f).unwrap();
        let b = train(&data, &cfg, &tcfg, &f).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
        let first = a.log[0].holdout_loss;
        let best = a.log.iter().map(|l| l.holdout_loss).fold(f64::INFINITY, f64::min);
        assert!(best <= first);
        assert_eq!(a.log[a.best_epoch - 1].holdout_loss, best);
    }

    #[test]
    fn pretraining_precedes_the_full_loss() {
        let f = Lorenz96::new(6, 8.0).unwrap();
        let data = crate::dynamics::generate_snapshots(&f, &Default::default(), 120, 0.5, 3, 10.0).unwrap().states;
        let cfg = AeConfig { n: 6, r: 3, h: 8, lambda1: 10.0, lambda2: 1.0, k_steps: 2, dt_loss: 0.05 };
        let tcfg = TrainConfig { epochs: 4, pretrain_epochs: 3, batch_size: 16, seed: 1, ..Default::default() };
        let out = train(&data, &cfg, &tcfg, &f).unwrap();
        assert_eq!(out.log.len(), 7);
        assert!(out.log[..3].iter().all(|l| l.pretraining));
        assert!(out.log[3..].iter().all(|l| !l.pretraining));
        assert!(out.best_epoch > 3);
        // Reconstruction-only losses sit below the full loss at the switch.
        assert!(out.log[2].holdout_loss < out.log[3].holdout_loss);
    }

    #[test]
    fn too_few_snapshots_is_an_error() {
        let data = subspace_data(4, 1, 10, 0);
        let cfg = AeConfig { n: 4, r: 1, h: 2, lambda1: 0.0, lambda2: 0.0, k_steps: 0, dt_loss: 0.05 };
        let tcfg = TrainConfig { batch_size: 64, ..Default::default() };
        assert!(train(&data, &cfg, &tcfg, &Frozen(4)).is_err());
    }
}
