use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{run_twin_experiment, summarize, ExperimentConfig, ModelConfig, RunResult, Surrogate};
use crate::error::{invalid, Error, Result};
use crate::filters::{FilterKind, InflationConfig};
use crate::rom_autoencoder::AutoencoderParams;
use crate::rom_pod::LinearCoupling;

/// The four filter/surrogate combinations compared in the sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Enkf,
    MfenkfPod,
    NlMfenkfNn,
    MfenkfNn,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::MfenkfPod, Method::NlMfenkfNn, Method::MfenkfNn, Method::Enkf];

    pub fn label(self) -> &'static str {
        match self {
            Method::Enkf => "EnKF",
            Method::MfenkfPod => "MFEnKF(POD)",
            Method::NlMfenkfNn => "NL-MFEnKF(NN)",
            Method::MfenkfNn => "MFEnKF(NN)",
        }
    }

    pub fn kind(self) -> FilterKind {
        match self {
            Method::Enkf => FilterKind::Enkf,
            Method::MfenkfPod | Method::MfenkfNn => FilterKind::Mfenkf,
            Method::NlMfenkfNn => FilterKind::NlMfenkf,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '(', ')'], "_").trim_end_matches('_') {
            "enkf" => Ok(Method::Enkf),
            "mfenkf_pod" => Ok(Method::MfenkfPod),
            "nl_mfenkf_nn" => Ok(Method::NlMfenkfNn),
            "mfenkf_nn" => Ok(Method::MfenkfNn),
            other => Err(invalid(format!("unknown method {other:?}"))),
        }
    }
}

pub fn pod_file_name(r: usize) -> String {
    format!("pod_r{r}.csv")
}

pub fn ae_file_name(r: usize) -> String {
    format!("ae_r{r}.bin")
}

/// POD couplings and trained autoencoders keyed by reduced dimension.
#[derive(Debug, Clone)]
pub struct SurrogateLibrary {
    pub model: ModelConfig,
    pub pod: BTreeMap<usize, LinearCoupling>,
    pub ae: BTreeMap<usize, AutoencoderParams>,
    /// Files the library was read from.
    pub sources: Vec<PathBuf>,
}

impl SurrogateLibrary {
    pub fn new(model: ModelConfig) -> Self {
        Self { model, pod: BTreeMap::new(), ae: BTreeMap::new(), sources: Vec::new() }
    }

    /// Reads `pod_r{r}.csv` and `ae_r{r}.bin` from `dir` for each requested `r` that exists.
    pub fn load_dir(dir: &Path, rs: &[usize], model: ModelConfig) -> Result<Self> {
        let mut lib = Self::new(model);
        for &r in rs {
            let pod = dir.join(pod_file_name(r));
            if pod.exists() {
                lib.pod.insert(r, LinearCoupling::load(&pod)?.0);
                lib.sources.push(pod);
            }
            let ae = dir.join(ae_file_name(r));
            if ae.exists() {
                lib.ae.insert(r, AutoencoderParams::load(&ae)?);
                lib.sources.push(ae);
            }
        }
        Ok(lib)
    }

    pub fn surrogate(&self, method: Method, r: usize) -> Result<Option<Surrogate>> {
        let model = self.model.model()?;
        let icfg = self.model.integrator()?;
        match method {
            Method::Enkf => Ok(None),
            Method::MfenkfPod => {
                let c = self.pod.get(&r).ok_or_else(|| Error::MissingArtifact(pod_file_name(r).into()))?;
                Surrogate::pod(c.clone(), &model, &icfg).map(Some)
            }
            Method::NlMfenkfNn | Method::MfenkfNn => {
                let p = self.ae.get(&r).ok_or_else(|| Error::MissingArtifact(ae_file_name(r).into()))?;
                Ok(Some(Surrogate::autoencoder(p.clone(), &model, &icfg, method.kind())))
            }
        }
    }
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    /// Reduced dimension; `None` for EnKF in grids where it is not swept.
    pub r: Option<usize>,
    pub n_x: usize,
    pub n_u: usize,
    pub alpha_x: f64,
    pub alpha_u: f64,
    pub realizations: usize,
    pub diverged: usize,
    /// Mean and sample standard deviation over non-diverged realizations.
    pub mean_rmse: f64,
    pub std_rmse: f64,
    #[serde(skip)]
    pub runs: Vec<RunResult>,
}

impl SweepRow {
    pub fn divergence_fraction(&self) -> f64 {
        self.diverged as f64 / self.realizations as f64
    }

    /// Two standard deviations.
    pub fn band(&self) -> f64 {
        2.0 * self.std_rmse
    }

    fn from_runs(method: Method, r: Option<usize>, cfg: &ExperimentConfig, runs: Vec<RunResult>) -> Self {
        let (mean_rmse, std_rmse, _) = summarize(&runs);
        Self {
            method,
            r,
            n_x: cfg.n_x,
            n_u: cfg.n_u,
            alpha_x: cfg.filter.inflation.alpha_x,
            alpha_u: cfg.filter.inflation.alpha_u,
            realizations: runs.len(),
            diverged: runs.iter().filter(|r| r.diverged).count(),
            mean_rmse,
            std_rmse,
            runs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn find(&self, method: Method, pred: impl Fn(&SweepRow) -> bool) -> Option<&SweepRow> {
        self.rows.iter().find(|row| row.method == method && pred(row))
    }
}

fn configure(base: &ExperimentConfig, method: Method, n_x: usize, n_u: usize, alpha_x: f64) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.filter.kind = method.kind();
    cfg.filter.inflation = InflationConfig { alpha_x, alpha_u: base.filter.inflation.alpha_u };
    cfg.n_x = n_x;
    cfg.n_u = n_u;
    cfg
}

/// Mean RMSE over `rs` for each method with `N_U = r - 3`.
///
/// EnKF does not depend on `r`; it runs once with `enkf_alpha` and is repeated on every row.
pub fn sweep_rom_dimension(
    base: &ExperimentConfig,
    lib: &SurrogateLibrary,
    rs: &[usize],
    methods: &[Method],
    enkf_alpha: f64,
) -> Result<SweepResult> {
    let mut rows = Vec::new();
    let mut enkf: Option<SweepRow> = None;
    for &method in methods {
        for &r in rs {
            if r < 5 {
                return Err(invalid(format!("r = {r} leaves fewer than two ancillary members")));
            }
            let row = if method == Method::Enkf {
                let cached = match enkf.take() {
                    Some(row) => row,
                    None => {
                        let cfg = configure(base, method, base.n_x, base.n_u, enkf_alpha);
                        SweepRow::from_runs(method, None, &cfg, run_twin_experiment(&cfg, None)?)
                    }
                };
                enkf = Some(cached.clone());
                SweepRow { r: Some(r), ..cached }
            } else {
                let cfg = configure(base, method, base.n_x, r - 3, base.filter.inflation.alpha_x);
                let s = lib.surrogate(method, r)?;
                SweepRow::from_runs(method, Some(r), &cfg, run_twin_experiment(&cfg, s.as_ref())?)
            };
            rows.push(row);
        }
    }
    Ok(SweepResult { rows })
}

/// Axes of the ensemble-size by inflation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub r: usize,
    pub n_x: Vec<usize>,
    pub alpha_x: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { r: 28, n_x: vec![16, 32, 48], alpha_x: vec![1.02, 1.05, 1.10] }
    }
}

/// Mean RMSE and divergence fraction on the `N_X x alpha_X` grid at fixed `r` and `N_U`.
pub fn sweep_ensemble_inflation(
    base: &ExperimentConfig,
    lib: &SurrogateLibrary,
    grid: &GridSpec,
    methods: &[Method],
) -> Result<SweepResult> {
    let mut rows = Vec::new();
    for &method in methods {
        let s = lib.surrogate(method, grid.r)?;
        let r = (method != Method::Enkf).then_some(grid.r);
        for &n_x in &grid.n_x {
            for &alpha in &grid.alpha_x {
                let cfg = configure(base, method, n_x, base.n_u, alpha);
                rows.push(SweepRow::from_runs(method, r, &cfg, run_twin_experiment(&cfg, s.as_ref())?));
            }
        }
    }
    Ok(SweepResult { rows })
}
