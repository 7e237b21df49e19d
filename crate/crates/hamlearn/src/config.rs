//! Run configuration: one JSON document drives every CLI command.
//!
//! A [`RunConfig`] names the system family, the data-generation settings, the
//! model architecture, and per-command sections for training, evaluation,
//! symbolic recovery, and the Monte-Carlo noise diagnostics. Unknown keys are
//! rejected everywhere, every section is validated up front, and all outputs
//! of a run are stamped with the hash of the effective config, so a result
//! file can always be traced back to the exact settings that produced it.
//!
//! Only the top-level `seed` feeds randomness: each command derives its own
//! independent stream from it, so adding or re-running one command never
//! perturbs another's output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::MlpSpec;
use crate::datagen::{DatagenConfig, OuNoiseConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::model::LossKind;
use crate::symreg::HamiltonianFitOptions;
use crate::systems::SystemFamily;
use crate::train::{ArchSpec, BatchMode, OptimizerConfig, TrainConfig};

/// Complete settings for one run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory for every artifact; `--out` overrides it.
    pub out_dir: PathBuf,
    /// Master seed. Each command derives its own stream from it, and the
    /// `HAMLEARN_SEED` environment variable overrides it at startup.
    pub seed: u64,
    pub system: SystemSection,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub symreg: SymregSection,
    #[serde(default)]
    pub theory: TheorySection,
}

/// Which analytic family the run targets.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub family: SystemFamily,
}

/// Corpus-generation settings; mirrors [`DatagenConfig`] minus family and seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Parameter vectors to generate windows for.
    pub lambdas: Vec<Vec<f64>>,
    #[serde(default = "default_windows_per_lambda")]
    pub windows_per_lambda: usize,
    #[serde(default = "default_window_len")]
    pub window_len: usize,
    #[serde(default = "default_obs_dt")]
    pub obs_dt: f64,
    #[serde(default = "default_fine_substeps")]
    pub fine_substeps: usize,
    #[serde(default = "default_e_max")]
    pub e_max: f64,
    #[serde(default)]
    pub target_energy: Option<f64>,
    #[serde(default = "default_noise")]
    pub noise: OuNoiseConfig,
    #[serde(default)]
    pub noise_initial: bool,
}

fn default_windows_per_lambda() -> usize {
    800
}
fn default_window_len() -> usize {
    15
}
fn default_obs_dt() -> f64 {
    0.1
}
fn default_fine_substeps() -> usize {
    100
}
fn default_e_max() -> f64 {
    0.125
}
fn default_noise() -> OuNoiseConfig {
    OuNoiseConfig::with_sigma(1.0, 0.0)
}

/// Hidden-layer widths; input and output sizes come from the family, so a
/// config can never describe a dimensionally inconsistent model.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub k_hidden: Vec<usize>,
    pub v_hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            k_hidden: vec![16],
            v_hidden: vec![16],
        }
    }
}

/// Training knobs; the member seeds derive from the run seed at command time.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub batch: BatchMode,
    pub ensemble_size: usize,
    pub validation_fraction: f64,
    pub loss: LossKind,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 500,
            optimizer: OptimizerConfig::default(),
            batch: BatchMode::default(),
            ensemble_size: 3,
            validation_fraction: 0.25,
            loss: LossKind::default(),
        }
    }
}

/// A previously trained run to compare against in the noise summary table.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConditionRef {
    pub nsr: f64,
    pub tau: f64,
    /// Directory holding that condition's `member_*.checkpoint.json` files.
    pub checkpoint_dir: PathBuf,
}

/// Settings for `predict` and `sweep`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    /// Sweep grid, first parameter axis.
    pub alphas: Vec<f64>,
    /// Sweep grid, second parameter axis.
    pub betas: Vec<f64>,
    /// Initial-condition energy for sweep and predict trajectories.
    pub energy: f64,
    pub trajectories_per_cell: usize,
    pub horizon: usize,
    /// Parameter point for `predict` and the noise summary; defaults to the
    /// first training parameter vector.
    pub lambda: Option<Vec<f64>>,
    pub n_predict: usize,
    /// Extra trained conditions to tabulate alongside this run's ensemble.
    pub noise_conditions: Vec<NoiseConditionRef>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            alphas: linspace(0.2, 0.8, 9),
            betas: linspace(0.2, 0.8, 9),
            energy: 0.125,
            trajectories_per_cell: 10,
            horizon: 500,
            lambda: None,
            n_predict: 10,
            noise_conditions: Vec::new(),
        }
    }
}

/// Settings for symbolic recovery.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SymregSection {
    /// Coefficient threshold for the equation-of-motion fits.
    pub threshold: f64,
    /// Parameter point to recover at; defaults to the first training vector.
    pub lambda: Option<Vec<f64>>,
    pub energy: f64,
    pub n_traj: usize,
    pub horizon: usize,
    /// Run the recovery on the analytic force field first and require an
    /// exact answer before trusting the learned-model results.
    pub oracle_precheck: bool,
    /// Direct polynomial fit of the learned energies (the Morse path).
    pub hamiltonian: HamiltonianFitOptions,
}

impl Default for SymregSection {
    fn default() -> Self {
        SymregSection {
            threshold: 0.05,
            lambda: None,
            energy: 0.125,
            n_traj: 10,
            horizon: 500,
            oracle_precheck: true,
            hamiltonian: HamiltonianFitOptions::default(),
        }
    }
}

/// Monte-Carlo noise-diagnostic settings. The defaults reproduce the full
/// verification tables; they are sized so the whole command finishes in a few
/// minutes on one core.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySection {
    pub fd: FdVarianceSection,
    pub bias: BiasSection,
    pub correlation: CorrelationSection,
    pub baseline: BaselineSection,
}

/// Finite-difference noise-variance table.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FdVarianceSection {
    pub sigma_inf: f64,
    pub tau: f64,
    /// Sampling intervals as multiples of tau.
    pub ds_factors: Vec<f64>,
    pub trials: u64,
}

impl Default for FdVarianceSection {
    fn default() -> Self {
        FdVarianceSection {
            sigma_inf: 0.3,
            tau: 0.05,
            ds_factors: vec![0.001, 0.1, 0.31623, 1.0, 3.1623, 10.0],
            trials: 100_000,
        }
    }
}

/// Expected-gradient bias versus noise amplitude (log-log slope).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasSection {
    pub sigmas: Vec<f64>,
    pub tau: f64,
    pub n_steps: usize,
    pub trials: u64,
}

impl Default for BiasSection {
    fn default() -> Self {
        BiasSection {
            sigmas: vec![2.0e-3, 6.3246e-3, 2.0e-2],
            tau: 0.2,
            n_steps: 3,
            trials: 4_000_000,
        }
    }
}

/// Decay of the correlated-noise gap with rollout length.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelationSection {
    pub sigma: f64,
    pub tau: f64,
    pub n_list: Vec<usize>,
    pub trials: u64,
}

impl Default for CorrelationSection {
    fn default() -> Self {
        CorrelationSection {
            sigma: 0.1,
            tau: 0.025,
            n_list: vec![3, 4, 5],
            trials: 1_000_000,
        }
    }
}

/// Interval dependence of the derivative-matching baseline's gradient gap.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub sigma: f64,
    pub tau: f64,
    pub ds_list: Vec<f64>,
    pub trials: u64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            sigma: 0.15,
            tau: 0.002,
            ds_list: vec![0.02, 0.04, 0.08],
            trials: 400_000,
        }
    }
}

/// Evenly spaced grid including both endpoints.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

impl RunConfig {
    /// Parse and validate a config file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let cfg: RunConfig = io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Check every section, whether or not the current command uses it, so a
    /// bad config fails before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::Config("out_dir must not be empty".into()));
        }
        self.datagen_config(self.seed).validate()?;
        self.arch_spec()?;

        let t = &self.train;
        if t.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&t.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must be in [0, 1), got {}",
                t.validation_fraction
            )));
        }

        let e = &self.evaluate;
        if e.alphas.is_empty() || e.betas.is_empty() {
            return Err(Error::Config("sweep grid must be non-empty".into()));
        }
        if e.trajectories_per_cell == 0 || e.horizon == 0 || e.n_predict == 0 {
            return Err(Error::Config(
                "evaluate counts and horizon must be >= 1".into(),
            ));
        }
        if let Some(lambda) = &e.lambda {
            self.system.family.spec(lambda)?;
        }
        for cond in &e.noise_conditions {
            if cond.checkpoint_dir.as_os_str().is_empty() {
                return Err(Error::Config(
                    "noise condition checkpoint_dir must not be empty".into(),
                ));
            }
        }

        let s = &self.symreg;
        if !(s.threshold > 0.0) {
            return Err(Error::Config(format!(
                "symreg threshold must be positive, got {}",
                s.threshold
            )));
        }
        if s.n_traj == 0 || s.horizon == 0 {
            return Err(Error::Config(
                "symreg trajectory count and horizon must be >= 1".into(),
            ));
        }
        if let Some(lambda) = &s.lambda {
            self.system.family.spec(lambda)?;
        }

        let th = &self.theory;
        for (name, v) in [
            ("theory.fd.sigma_inf", th.fd.sigma_inf),
            ("theory.fd.tau", th.fd.tau),
            ("theory.bias.tau", th.bias.tau),
            ("theory.correlation.sigma", th.correlation.sigma),
            ("theory.correlation.tau", th.correlation.tau),
            ("theory.baseline.sigma", th.baseline.sigma),
            ("theory.baseline.tau", th.baseline.tau),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if th.fd.ds_factors.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::Config(
                "theory.fd.ds_factors must be positive".into(),
            ));
        }
        if th.bias.n_steps == 0 {
            return Err(Error::Config("theory.bias.n_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Hash of the effective config (after any seed override), stamped onto
    /// every output file.
    pub fn canonical_hash(&self) -> String {
        let body = serde_json::to_string(self).expect("config serializes");
        io::sha256_hex(body.as_bytes())
    }

    /// Assemble the corpus-generation settings with an explicit seed.
    pub fn datagen_config(&self, seed: u64) -> DatagenConfig {
        DatagenConfig {
            family: self.system.family,
            lambdas: self.data.lambdas.clone(),
            windows_per_lambda: self.data.windows_per_lambda,
            window_len: self.data.window_len,
            obs_dt: self.data.obs_dt,
            fine_substeps: self.data.fine_substeps,
            e_max: self.data.e_max,
            target_energy: self.data.target_energy,
            noise: self.data.noise,
            noise_initial: self.data.noise_initial,
            seed,
        }
    }

    /// Build the network shapes for this family: K maps momenta to a scalar,
    /// V maps configuration plus parameters to a scalar.
    pub fn arch_spec(&self) -> Result<ArchSpec> {
        let d = self.system.family.dim();
        let lam = self.system.family.lambda_dim();
        let mut k_layers = vec![d];
        k_layers.extend_from_slice(&self.model.k_hidden);
        k_layers.push(1);
        let mut v_layers = vec![d + lam];
        v_layers.extend_from_slice(&self.model.v_hidden);
        v_layers.push(1);
        Ok(ArchSpec {
            k: MlpSpec::new(k_layers)?,
            v: MlpSpec::new(v_layers)?,
        })
    }

    /// Assemble the training settings with an explicit master seed.
    pub fn train_config(&self, master_seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            optimizer: self.train.optimizer,
            batch: self.train.batch,
            ensemble_size: self.train.ensemble_size,
            master_seed,
            validation_fraction: self.train.validation_fraction,
            loss: self.train.loss,
        }
    }

    /// Parameter point used by `predict`, the noise table, and `symreg` when
    /// the section does not pin one.
    pub fn eval_lambda(&self) -> Vec<f64> {
        self.evaluate
            .lambda
            .clone()
            .unwrap_or_else(|| self.data.lambdas[0].clone())
    }

    /// Parameter point for symbolic recovery.
    pub fn symreg_lambda(&self) -> Vec<f64> {
        self.symreg
            .lambda
            .clone()
            .unwrap_or_else(|| self.data.lambdas[0].clone())
    }
}
