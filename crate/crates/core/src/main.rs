use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use mfenkf::dynamics::generate_snapshots;
use mfenkf::error::{Error, Result};
use mfenkf::harness::{
    ae_file_name, kinetic_energy_ratio, pod_file_name, run_twin_experiment, sweep_ensemble_inflation,
    sweep_rom_dimension, write_run_csv, write_steps_csv, write_sweep_csv, write_sweep_runs_csv, CouplingSource,
    ExperimentConfig, GridSpec, Method, ModelConfig, RunManifest, SurrogateLibrary, SweepResult,
};
use mfenkf::rom_autoencoder::{
    train_with_progress, write_training_log, AeConfig, AeSidecar, AutoencoderParams, TrainConfig,
};
use mfenkf::rom_pod::{build_pod, LinearCoupling};
use mfenkf::storage::{format_f64, load_snapshots, save_snapshots, sha256_file, SnapshotMeta};

#[derive(Parser)]
#[command(name = "mfenkf", version, about = "Multifidelity ensemble Kalman filter experiments on Lorenz '96")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration; absent fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set filter.inflation.alpha_x=1.1`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
    /// Output file (a directory for build-pod and train-ae).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and store a snapshot set from a long model run.
    Snapshots {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        /// Model time between stored snapshots.
        #[arg(long)]
        spacing: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build POD couplings `pod_r{r}.csv` for each reduced dimension.
    BuildPod {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snapshots: Option<PathBuf>,
        /// Comma-separated reduced dimensions.
        #[arg(long, value_delimiter = ',')]
        r: Option<Vec<usize>>,
    },
    /// Train the autoencoder `ae_r{r}.bin` with its sidecar and loss log.
    TrainAe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snapshots: Option<PathBuf>,
        #[arg(long)]
        r: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Reconstruction-only epochs run before `--epochs`.
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Kinetic energy retained by stored POD and autoencoder reconstructions.
    RomEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snapshots: Option<PathBuf>,
        /// Directory holding `pod_r{r}.csv` and `ae_r{r}.bin`.
        #[arg(long)]
        artifacts: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        r: Option<Vec<usize>>,
    },
    /// Run one twin experiment over all realizations.
    Run {
        #[command(flatten)]
        common: Common,
        /// free_run, enkf, mfenkf or nl_mfenkf.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, conflicts_with = "coupling_ae")]
        coupling_pod: Option<PathBuf>,
        #[arg(long)]
        coupling_ae: Option<PathBuf>,
        #[arg(long)]
        n_x: Option<usize>,
        #[arg(long)]
        n_u: Option<usize>,
        #[arg(long)]
        alpha_x: Option<f64>,
        #[arg(long)]
        alpha_u: Option<f64>,
        #[arg(long)]
        realizations: Option<usize>,
        #[arg(long)]
        n_steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mean RMSE against reduced dimension for each method.
    SweepR {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        artifacts: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        r: Option<Vec<usize>>,
        /// Comma-separated subset of enkf, mfenkf_pod, nl_mfenkf_nn, mfenkf_nn.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Inflation of the EnKF reference row.
        #[arg(long)]
        enkf_alpha: Option<f64>,
        #[arg(long)]
        realizations: Option<usize>,
    },
    /// Mean RMSE and divergence fraction over ensemble size and inflation.
    SweepGrid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        artifacts: Option<PathBuf>,
        #[arg(long)]
        r: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        n_x: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        alpha_x: Option<Vec<f64>>,
        /// Comma-separated subset of enkf, mfenkf_pod, nl_mfenkf_nn, mfenkf_nn.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long)]
        realizations: Option<usize>,
    },
    /// Re-execute the command recorded in a run manifest.
    Replay {
        manifest: PathBuf,
        /// Where to write the regenerated outputs.
        #[arg(long)]
        out: PathBuf,
    },
}

trait Job: Serialize + DeserializeOwned + Default {
    const COMMAND: &'static str;

    fn seeds(&self) -> Vec<u64>;

    /// Writes every output under `out` and returns the manifest of the primary CSV.
    fn execute(&self, out: &Path) -> Result<(PathBuf, RunManifest)>;
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct SnapshotJob {
    model: ModelConfig,
    count: usize,
    spacing: f64,
    seed: u64,
    burn_in: f64,
}

impl Default for SnapshotJob {
    fn default() -> Self {
        Self { model: ModelConfig::default(), count: 5000, spacing: 36.0, seed: 0, burn_in: 100.0 }
    }
}

impl Job for SnapshotJob {
    const COMMAND: &'static str = "snapshots";

    fn seeds(&self) -> Vec<u64> {
        vec![self.seed]
    }

    fn execute(&self, out: &Path) -> Result<(PathBuf, RunManifest)> {
        let model = self.model.model()?;
        let icfg = self.model.integrator()?;
        let traj = generate_snapshots(&model, &icfg, self.count, self.spacing, self.seed, self.burn_in)?;
        let meta = SnapshotMeta {
            n: model.n,
            forcing: model.forcing,
            dt: icfg.dt,
            spacing: self.spacing,
            seed: self.seed,
            count: self.count,
            burn_in: self.burn_in,
        };
        save_snapshots(out, &traj, &meta)?;
        Ok((out.to_path_buf(), manifest(self)?))
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::InvalidArgument(format!("{what} is required")))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct PodJob {
    snapshots: Option<PathBuf>,
    r: Vec<usize>,
}

impl Default for PodJob {
    fn default() -> Self {
        Self { snapshots: None, r: vec![7, 14, 21, 28, 35] }
    }
}

impl Job for PodJob {
    const COMMAND: &'static str = "build-pod";

    fn seeds(&self) -> Vec<u64> {
        Vec::new()
    }

    fn execute(&self, out: &Path) -> Result<(PathBuf, RunManifest)> {
        let src = required(&self.snapshots, "snapshots")?;
        let (traj, _) = load_snapshots(src)?;
        let hash = sha256_file(src)?;
        let mut m = manifest(self)?;
        m.add_artifact(src)?;
        let summary = out.join("pod_energy.csv");
        std::fs::create_dir_all(out)?;
        let mut w = csv::Writer::from_path(&summary)?;
        w.write_record(["r", "captured_energy"])?;
        for &r in &self.r {
            let c = build_pod(&traj.states, r)?;
            let path = out.join(pod_file_name(r));
            c.save(&path, Some(hash.clone()))?;
            m.outputs.push(path);
            w.write_record([r.to_string(), format_f64(c.captured_energy(r))])?;
        }
        w.flush()?;
        Ok((summary, m))
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainJob {
    snapshots: Option<PathBuf>,
    ae: AeConfig,
    train: TrainConfig,
}

impl Job for TrainJob {
    const COMMAND: &'static str = "train-ae";

    fn seeds(&self) -> Vec<u64> {
        vec![self.train.seed]
    }

    fn execute(&self, out: &Path) -> Result<(PathBuf, RunManifest)> {
        let src = required(&self.snapshots, "snapshots")?;
        let (traj, meta) = load_snapshots(src)?;
        let model = mfenkf::dynamics::Lorenz96::new(meta.n, meta.forcing)?;
        let outcome = train_with_progress(&traj.states, &self.ae, &self.train, &model, |l| {
            eprintln!("epoch {:>4}  train {:.6e}  holdout {:.6e}", l.epoch, l.train_loss, l.holdout_loss);
        })?;
        let path = out.join(ae_file_name(self.ae.r));
        AeSidecar::new(&self.ae, &self.train, &outcome, Some(sha256_file(src)?)).save_with(&outcome.params, &path)?;
        let log = out.join(format!("ae_r{}_log.csv", self.ae.r));
        write_training_log(&log, &outcome.log)?;
        let mut m = manifest(self)?;
        m.add_artifact(src)?;
        m.outputs.push(path);
        Ok((log, m))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct RomEvalJob {
    snapshots: Option<PathBuf>,
    artifacts: Option<PathBuf>,
    r: Vec<usize>,
}

impl Default for RomEvalJob {
    fn default() -> Self {
        Self { snapshots: None, artifacts: None, r: vec![7, 14, 21, 28, 35] }
    }
}

impl Job for RomEvalJob {
    const COMMAND: &'static str = "rom-eval";

    fn seeds(&self) -> Vec<u64> {
        Vec::new()
    }

    fn execute(&self, out: &Path) -> Result<(PathBuf, RunManifest)> {
        let src = required(&self.snapshots, "snapshots")?;
        let dir = required(&self.artifacts, "artifacts")?;
        let (traj, _) = load_snapshots(src)?;
        let x = &traj.states;
        let mut m = manifest(self)?;
        m.add_artifact(src)?;
        let mut rows = Vec::new();
        for &r in &self.r {
            let pod_path = dir.join(pod_file_name(r));
            let (c, _) = LinearCoupling::load(&pod_path)?;
            m.add_artifact(&pod_path)?;
            let pod = kinetic_energy_ratio(&c.interpolate(&c.project(x)), x)?;
            let ae_path = dir.join(ae_file_name(r));
            let nn = if ae_path.exists() {
                let p = AutoencoderParams::load(&ae_path)?;
                m.add_artifact(&ae_path)?;
                Some(kinetic_energy_ratio(&p.decode_columns(&p.encode_columns(x)), x)?)
            } else {
                None
            };
            rows.push([r.to_string(), format_f64(pod), nn.map(format_f64).unwrap_or_default()]);
        }
        if let Some(parent) = out.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(out)?;
        w.write_record(["r", "pod_energy", "nn_energy"])?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok((out.to_path_buf(), m))
    }
}

/// The run subcommand's configuration is the experiment configuration itself.
impl Job for ExperimentConfig {
    const COMMAND: &'static str = "run";

    fn seeds(&self) -> Vec<u64> {
        vec![self.seed]
    }

    fn execute(&self, out: &Path) -> Result<(PathBuf, RunManifest)> {
        let surrogate = self.load_surrogate()?;
        let runs = run_twin_experiment(self, surrogate.as_ref())?;
        write_run_csv(out, &runs)?;
        let steps = sibling(out, "steps");
        write_steps_csv(&steps, &runs)?;
        let mut m = manifest(self)?;
        match &self.coupling {
            CouplingSource::None => {}
            CouplingSource::Pod { path } | CouplingSource::Autoencoder { path } => m.add_artifact(path)?,
        }
        m.outputs.push(steps);
        let (mean, sd, count) = mfenkf::harness::summarize(&runs);
        eprintln!("mean RMSE {mean:.6} (sd {sd:.6}) over {count} of {} realizations", runs.len());
        Ok((out.to_path_buf(), m))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct SweepRJob {
    experiment: ExperimentConfig,
    artifacts: Option<PathBuf>,
    r: Vec<usize>,
    methods: Vec<Method>,
    enkf_alpha: f64,
}

/// Multifidelity defaults: `alpha_X = 1.05`, `alpha_U = 1.01`.
fn sweep_experiment() -> ExperimentConfig {
    let mut e = ExperimentConfig::default();
    e.filter.inflation.alpha_x = 1.05;
    e.filter.inflation.alpha_u = 1.01;
    e
}

impl Default for SweepRJob {
    fn default() -> Self {
        Self {
            experiment: sweep_experiment(),
            artifacts: None,
            r: vec![7, 14, 21, 28, 35],
            methods: Method::ALL.to_vec(),
            enkf_alpha: 1.07,
        }
    }
}

fn write_sweep(out: &Path, sweep: &SweepResult, lib: &SurrogateLibrary, mut m: RunManifest) -> Result<(PathBuf, RunManifest)> {
    write_sweep_csv(out, sweep)?;
    let runs = sibling(out, "runs");
    write_sweep_runs_csv(&runs, sweep)?;
    for src in &lib.sources {
        m.add_artifact(src)?;
    }
    m.outputs.push(runs);
    Ok((out.to_path_buf(), m))
}

impl Job for SweepRJob {
    const COMMAND: &'static str = "sweep-r";

    fn seeds(&self) -> Vec<u64> {
        vec![self.experiment.seed]
    }

    fn execute(&self, out: &Path) -> Result<(PathBuf, RunManifest)> {
        let dir = required(&self.artifacts, "artifacts")?;
        let lib = SurrogateLibrary::load_dir(dir, &self.r, self.experiment.model)?;
        let sweep = sweep_rom_dimension(&self.experiment, &lib, &self.r, &self.methods, self.enkf_alpha)?;
        write_sweep(out, &sweep, &lib, manifest(self)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct SweepGridJob {
    experiment: ExperimentConfig,
    artifacts: Option<PathBuf>,
    grid: GridSpec,
    methods: Vec<Method>,
}

impl Default for SweepGridJob {
    fn default() -> Self {
        Self { experiment: sweep_experiment(), artifacts: None, grid: GridSpec::default(), methods: Method::ALL.to_vec() }
    }
}

impl Job for SweepGridJob {
    const COMMAND: &'static str = "sweep-grid";

    fn seeds(&self) -> Vec<u64> {
        vec![self.experiment.seed]
    }

    fn execute(&self, out: &Path) -> Result<(PathBuf, RunManifest)> {
        let dir = required(&self.artifacts, "artifacts")?;
        let lib = SurrogateLibrary::load_dir(dir, &[self.grid.r], self.experiment.model)?;
        let sweep = sweep_ensemble_inflation(&self.experiment, &lib, &self.grid, &self.methods)?;
        write_sweep(out, &sweep, &lib, manifest(self)?)
    }
}

fn manifest<J: Job>(job: &J) -> Result<RunManifest> {
    RunManifest::new(J::COMMAND, job, job.seeds())
}

/// `runs.csv` becomes `runs_<tag>.csv`.
fn sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}_{tag}.csv"))
}

/// Replaces the value at a dotted path; every segment must already exist.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    for key in path.split('.') {
        cur = cur
            .as_object_mut()
            .and_then(|o| o.get_mut(key))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown configuration field {path:?}")))?;
    }
    *cur = value;
    Ok(())
}

/// Numbers, booleans, arrays and objects parse as JSON; anything else is a string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Config file, then `--set` overrides, then dedicated flags.
fn resolve<J: Job>(common: &Common, flags: Vec<(&str, Value)>) -> Result<J> {
    let base: J = match &common.config {
        Some(path) => mfenkf::storage::read_json(path)?,
        None => J::default(),
    };
    let mut value = serde_json::to_value(&base)?;
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects PATH=VALUE, got {s:?}")))?;
        set_path(&mut value, k.trim(), parse_value(v.trim()))?;
    }
    for (k, v) in flags {
        set_path(&mut value, k, v)?;
    }
    Ok(serde_json::from_value(value)?)
}

fn flag<T: Serialize>(flags: &mut Vec<(&'static str, Value)>, key: &'static str, v: Option<T>) {
    if let Some(v) = v {
        flags.push((key, json!(v)));
    }
}

fn methods_flag(flags: &mut Vec<(&'static str, Value)>, names: Option<Vec<String>>) -> Result<()> {
    if let Some(names) = names {
        let ms = names.iter().map(|n| n.parse::<Method>()).collect::<Result<Vec<_>>>()?;
        flags.push(("methods", json!(ms)));
    }
    Ok(())
}

fn execute<J: Job>(job: &J, out: &Path) -> Result<()> {
    let (csv, mut m) = job.execute(out)?;
    m.outputs.insert(0, csv.clone());
    let path = m.write_for(&csv)?;
    eprintln!("wrote {} and {}", csv.display(), path.display());
    Ok(())
}

fn run_job<J: Job>(common: &Common, flags: Vec<(&'static str, Value)>) -> Result<()> {
    let job: J = resolve(common, flags)?;
    execute(&job, &common.out)
}

fn replay(manifest: &Path, out: &Path) -> Result<()> {
    let m: RunManifest = mfenkf::storage::read_json(manifest)?;
    fn go<J: Job>(config: Value, out: &Path) -> Result<()> {
        execute(&serde_json::from_value::<J>(config)?, out)
    }
    match m.command.as_str() {
        SnapshotJob::COMMAND => go::<SnapshotJob>(m.config, out),
        PodJob::COMMAND => go::<PodJob>(m.config, out),
        TrainJob::COMMAND => go::<TrainJob>(m.config, out),
        RomEvalJob::COMMAND => go::<RomEvalJob>(m.config, out),
        ExperimentConfig::COMMAND => go::<ExperimentConfig>(m.config, out),
        SweepRJob::COMMAND => go::<SweepRJob>(m.config, out),
        SweepGridJob::COMMAND => go::<SweepGridJob>(m.config, out),
        other => Err(Error::InvalidArgument(format!("manifest records unknown command {other:?}"))),
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    let mut f = Vec::new();
    match cmd {
        Command::Snapshots { common, count, spacing, seed } => {
            flag(&mut f, "count", count);
            flag(&mut f, "spacing", spacing);
            flag(&mut f, "seed", seed);
            run_job::<SnapshotJob>(&common, f)
        }
        Command::BuildPod { common, snapshots, r } => {
            flag(&mut f, "snapshots", snapshots);
            flag(&mut f, "r", r);
            run_job::<PodJob>(&common, f)
        }
        Command::TrainAe { common, snapshots, r, epochs, pretrain_epochs, batch_size, learning_rate, seed } => {
            flag(&mut f, "snapshots", snapshots);
            flag(&mut f, "ae.r", r);
            flag(&mut f, "train.epochs", epochs);
            flag(&mut f, "train.pretrain_epochs", pretrain_epochs);
            flag(&mut f, "train.batch_size", batch_size);
            flag(&mut f, "train.learning_rate", learning_rate);
            flag(&mut f, "train.seed", seed);
            run_job::<TrainJob>(&common, f)
        }
        Command::RomEval { common, snapshots, artifacts, r } => {
            flag(&mut f, "snapshots", snapshots);
            flag(&mut f, "artifacts", artifacts);
            flag(&mut f, "r", r);
            run_job::<RomEvalJob>(&common, f)
        }
        Command::Run {
            common,
            filter,
            coupling_pod,
            coupling_ae,
            n_x,
            n_u,
            alpha_x,
            alpha_u,
            realizations,
            n_steps,
            seed,
        } => {
            flag(&mut f, "filter.kind", filter);
            flag(&mut f, "coupling", coupling_pod.map(|path| CouplingSource::Pod { path }));
            flag(&mut f, "coupling", coupling_ae.map(|path| CouplingSource::Autoencoder { path }));
            flag(&mut f, "n_x", n_x);
            flag(&mut f, "n_u", n_u);
            flag(&mut f, "filter.inflation.alpha_x", alpha_x);
            flag(&mut f, "filter.inflation.alpha_u", alpha_u);
            flag(&mut f, "realizations", realizations);
            flag(&mut f, "n_steps", n_steps);
            flag(&mut f, "seed", seed);
            run_job::<ExperimentConfig>(&common, f)
        }
        Command::SweepR { common, artifacts, r, methods, enkf_alpha, realizations } => {
            flag(&mut f, "artifacts", artifacts);
            flag(&mut f, "r", r);
            methods_flag(&mut f, methods)?;
            flag(&mut f, "enkf_alpha", enkf_alpha);
            flag(&mut f, "experiment.realizations", realizations);
            run_job::<SweepRJob>(&common, f)
        }
        Command::SweepGrid { common, artifacts, r, n_x, alpha_x, methods, realizations } => {
            flag(&mut f, "artifacts", artifacts);
            flag(&mut f, "grid.r", r);
            flag(&mut f, "grid.n_x", n_x);
            flag(&mut f, "grid.alpha_x", alpha_x);
            methods_flag(&mut f, methods)?;
            flag(&mut f, "experiment.realizations", realizations);
            run_job::<SweepGridJob>(&common, f)
        }
        Command::Replay { manifest, out } => replay(&manifest, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
