//! Training-corpus generation: bounded-energy initial conditions, ground-truth
//! windows, Ornstein-Uhlenbeck observation noise, and sparse-pair slicing.
//!
//! A corpus is built in two stages. [`generate_windows`] integrates short
//! observation windows (15 instants by default) and attaches one fixed OU noise
//! sequence to each, playing the role of the measured data. [`WindowSet::slice`]
//! then draws, per ensemble member, which single later instant of each window
//! becomes the training observation. Ensemble members therefore share the same
//! noisy measurements but differ in their step offsets, initializations, and
//! train/validation splits.
//!
//! The discrete OU update is exact: with a = e^{−Δt/τ},
//! η_{n+1} = a η_n + √(1−a²) σ∞ ξ_n, started from the stationary law N(0, σ∞²).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::integrate::{fine_then_coarsen, Trajectory};
use crate::io;
use crate::par;
use crate::rng::{self, tag, Stream};
use crate::systems::{PhaseState, SystemFamily, SystemSpec};

/// Correlated-noise settings: correlation time plus either an explicit
/// stationary amplitude or a noise-to-signal ratio resolved against data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuNoiseConfig {
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_inf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nsr: Option<f64>,
}

impl OuNoiseConfig {
    pub fn with_sigma(tau: f64, sigma_inf: f64) -> Self {
        Self {
            tau,
            sigma_inf: Some(sigma_inf),
            nsr: None,
        }
    }

    pub fn with_nsr(tau: f64, nsr: f64) -> Self {
        Self {
            tau,
            sigma_inf: None,
            nsr: Some(nsr),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!(
                "noise tau must be positive, got {}",
                self.tau
            )));
        }
        match (self.sigma_inf, self.nsr) {
            (Some(s), None) => {
                if !(s >= 0.0) || !s.is_finite() {
                    return Err(Error::Config(format!("sigma_inf must be >= 0, got {s}")));
                }
            }
            (None, Some(r)) => {
                if !(0.0..1.0).contains(&r) {
                    return Err(Error::Config(format!(
                        "nsr must be 0 or in (0, 1), got {r}"
                    )));
                }
            }
            _ => {
                return Err(Error::Config(
                    "exactly one of sigma_inf / nsr must be set".into(),
                ))
            }
        }
        Ok(())
    }

    /// True when the configured amplitude is exactly zero.
    pub fn is_zero(&self) -> bool {
        self.sigma_inf == Some(0.0) || self.nsr == Some(0.0)
    }

    /// Fix the amplitude in state units; `signal_std` is only consulted for
    /// the NSR form.
    pub fn resolve(&self, signal_std: f64) -> Result<ResolvedNoise> {
        self.validate()?;
        let sigma_inf = match (self.sigma_inf, self.nsr) {
            (Some(s), None) => s,
            (None, Some(r)) => {
                if r > 0.0 && !(signal_std > 0.0) {
                    return Err(Error::DegenerateData(format!(
                        "cannot resolve nsr {r} against signal std {signal_std}"
                    )));
                }
                r * signal_std
            }
            _ => unreachable!("validated above"),
        };
        Ok(ResolvedNoise {
            tau: self.tau,
            sigma_inf,
        })
    }
}

/// Noise with the amplitude fixed in state units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolvedNoise {
    pub tau: f64,
    pub sigma_inf: f64,
}

/// One-step OU decay factor a = e^{−Δt/τ}.
pub fn ou_decay(tau: f64, dt: f64) -> f64 {
    (-dt / tau).exp()
}

/// Stationary OU sequence of `n` noise vectors of length `dim`.
///
/// Coordinates are independent; draws are made instant by instant, coordinate
/// by coordinate, so the output is a pure function of the stream state.
pub fn ou_sequence(
    noise: &ResolvedNoise,
    dt: f64,
    n: usize,
    dim: usize,
    rng: &mut Stream,
) -> Vec<Vec<f64>> {
    let a = ou_decay(noise.tau, dt);
    let b = (1.0 - a * a).sqrt() * noise.sigma_inf;
    let mut out = Vec::with_capacity(n);
    let mut cur = vec![0.0; dim];
    for j in 0..dim {
        let xi: f64 = rng.sample(StandardNormal);
        cur[j] = noise.sigma_inf * xi;
    }
    out.push(cur.clone());
    for _ in 1..n {
        for c in cur.iter_mut() {
            let xi: f64 = rng.sample(StandardNormal);
            *c = a * *c + b * xi;
        }
        out.push(cur.clone());
    }
    out
}

/// Pooled within-trajectory standard deviation: per trajectory and coordinate,
/// the population variance about that trajectory's temporal mean; variances
/// averaged over coordinates and trajectories; square root taken.
pub fn pooled_signal_std(trajectories: &[Trajectory]) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::DegenerateData("no trajectories to pool".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for tr in trajectories {
        let n = tr.states.len();
        if n == 0 {
            return Err(Error::DegenerateData("empty trajectory".into()));
        }
        let d = tr.dim();
        for coord in 0..2 * d {
            let pick = |s: &PhaseState| {
                if coord < d {
                    s.q[coord]
                } else {
                    s.p[coord - d]
                }
            };
            let mean: f64 = tr.states.iter().map(|s| pick(s)).sum::<f64>() / n as f64;
            let var: f64 = tr
                .states
                .iter()
                .map(|s| (pick(s) - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            total += var;
            count += 1;
        }
    }
    Ok((total / count as f64).sqrt())
}

/// σ∞ for a given NSR against the pooled signal std of clean trajectories.
pub fn resolve_nsr(clean: &[Trajectory], nsr: f64) -> Result<f64> {
    let std = pooled_signal_std(clean)?;
    if !(std > 0.0) {
        return Err(Error::DegenerateData(
            "pooled signal variance is zero".into(),
        ));
    }
    Ok(nsr * std)
}

/// Rejection-sampling boxes (q range, p range) per system family.
pub fn sampling_box(family: SystemFamily) -> ([f64; 2], [f64; 2]) {
    match family {
        SystemFamily::HenonHeiles => ([-0.5, 0.5], [-0.5, 0.5]),
        SystemFamily::Morse => ([0.2, 3.0], [-1.0, 1.0]),
        SystemFamily::DoubleWell => ([-2.0, 2.0], [-1.0, 1.0]),
    }
}

const MAX_PROPOSALS: usize = 1_000_000;

/// Draw one initial condition.
///
/// Without `target_energy`: uniform (q, p) in the family's box, accepted when
/// H ≤ e_max. With `target_energy` E: uniform q in {V < E}, |p| = √(2(E − V)),
/// uniformly random momentum direction, so H equals E to roundoff.
pub fn sample_initial_condition(
    spec: &SystemSpec,
    e_max: f64,
    target_energy: Option<f64>,
    rng: &mut Stream,
) -> Result<PhaseState> {
    if let Some(e) = target_energy {
        if e > e_max {
            return Err(Error::Config(format!(
                "target energy {e} exceeds e_max {e_max}"
            )));
        }
    }
    let d = spec.dim();
    let (q_range, p_range) = sampling_box(spec.family());
    for proposed in 1..=MAX_PROPOSALS {
        let q: Vec<f64> = (0..d)
            .map(|_| rng.gen_range(q_range[0]..q_range[1]))
            .collect();
        match target_energy {
            None => {
                let p: Vec<f64> = (0..d)
                    .map(|_| rng.gen_range(p_range[0]..p_range[1]))
                    .collect();
                let s = PhaseState { q, p };
                if spec.hamiltonian(&s)? <= e_max {
                    return Ok(s);
                }
            }
            Some(e) => {
                let v = spec.potential(&q)?;
                if v < e {
                    let speed = (2.0 * (e - v)).sqrt();
                    let p = match d {
                        1 => {
                            let sign = if rng.gen_range(0.0..1.0) < 0.5 {
                                -1.0
                            } else {
                                1.0
                            };
                            vec![sign * speed]
                        }
                        _ => {
                            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
                            vec![speed * phi.cos(), speed * phi.sin()]
                        }
                    };
                    return Ok(PhaseState { q, p });
                }
            }
        }
        let _ = proposed;
    }
    Err(Error::SamplingRegion {
        accepted: 0,
        proposed: MAX_PROPOSALS,
    })
}

/// Corpus-generation settings.
#[derive(Clone, Debug)]
pub struct DatagenConfig {
    pub family: SystemFamily,
    /// Parameter vectors to generate windows for, in order.
    pub lambdas: Vec<Vec<f64>>,
    pub windows_per_lambda: usize,
    /// Observation instants per window (k then runs in [1, window_len − 1]).
    pub window_len: usize,
    pub obs_dt: f64,
    /// Ground truth integrates at obs_dt / fine_substeps.
    pub fine_substeps: usize,
    pub e_max: f64,
    pub target_energy: Option<f64>,
    pub noise: OuNoiseConfig,
    /// Also corrupt each window's initial instant (off by default: the theory
    /// being verified assumes a clean starting observation).
    pub noise_initial: bool,
    pub seed: u64,
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(Error::Config("no parameter vectors given".into()));
        }
        for l in &self.lambdas {
            if l.len() != self.family.lambda_dim() {
                return Err(Error::Config(format!(
                    "parameter vector {l:?} does not match family dimension {}",
                    self.family.lambda_dim()
                )));
            }
        }
        if self.windows_per_lambda == 0 {
            return Err(Error::Config("windows_per_lambda must be positive".into()));
        }
        if self.window_len < 2 {
            return Err(Error::Config(format!(
                "window_len must be at least 2, got {}",
                self.window_len
            )));
        }
        if !(self.obs_dt > 0.0) {
            return Err(Error::Config(format!(
                "obs_dt must be positive, got {}",
                self.obs_dt
            )));
        }
        if self.fine_substeps == 0 {
            return Err(Error::Config("fine_substeps must be positive".into()));
        }
        self.noise.validate()
    }

    pub fn fine_dt(&self) -> f64 {
        self.obs_dt / self.fine_substeps as f64
    }
}

/// One generated window: clean states plus its fixed noise sequence
/// (`eta[i]` is flat (q, p)-shaped noise for instant i).
#[derive(Clone, Debug)]
pub struct Window {
    pub lambda: Vec<f64>,
    pub clean: Vec<PhaseState>,
    pub eta: Vec<Vec<f64>>,
}

impl Window {
    /// Instant i with its noise applied.
    pub fn noisy(&self, i: usize) -> PhaseState {
        let s = &self.clean[i];
        let d = s.dim();
        let e = &self.eta[i];
        PhaseState {
            q: (0..d).map(|j| s.q[j] + e[j]).collect(),
            p: (0..d).map(|j| s.p[j] + e[d + j]).collect(),
        }
    }
}

/// A generated corpus before sparse-pair slicing.
#[derive(Clone, Debug)]
pub struct WindowSet {
    pub family: SystemFamily,
    pub dt: f64,
    pub window_len: usize,
    pub noise: OuNoiseConfig,
    pub noise_initial: bool,
    pub seed: u64,
    pub signal_std: f64,
    pub windows: Vec<Window>,
}

/// Integrate all windows and attach their noise sequences.
///
/// Work is parallel across windows; every random draw comes from a stream
/// derived from (seed, λ index, window index, purpose), so the result is
/// independent of scheduling.
pub fn generate_windows(cfg: &DatagenConfig) -> Result<WindowSet> {
    cfg.validate()?;
    let n_lambda = cfg.lambdas.len();
    let per = cfg.windows_per_lambda;
    let n_obs = cfg.window_len - 1;

    let clean: Vec<Result<(Vec<f64>, Trajectory)>> = par::map_range(n_lambda * per, |idx| {
        let (li, wi) = (idx / per, idx % per);
        let lambda = &cfg.lambdas[li];
        let spec = cfg.family.spec(lambda)?;
        let mut ic_rng = rng::stream(cfg.seed, &[li as u64, wi as u64, tag::INIT_COND]);
        let s0 = sample_initial_condition(&spec, cfg.e_max, cfg.target_energy, &mut ic_rng)?;
        let tr = fine_then_coarsen(&spec, &s0, cfg.fine_dt(), cfg.obs_dt, n_obs)?;
        Ok((lambda.clone(), tr))
    });
    let mut trajectories = Vec::with_capacity(n_lambda * per);
    for item in clean {
        trajectories.push(item?);
    }

    let signal_std = pooled_signal_std(
        &trajectories
            .iter()
            .map(|(_, tr)| tr.clone())
            .collect::<Vec<_>>(),
    )?;
    let resolved = cfg.noise.resolve(signal_std)?;

    let windows: Vec<Window> = par::map_range(trajectories.len(), |idx| {
        let (li, wi) = (idx / per, idx % per);
        let (lambda, tr) = &trajectories[idx];
        let dim = 2 * tr.dim();
        let mut noise_rng = rng::stream(cfg.seed, &[li as u64, wi as u64, tag::NOISE]);
        let eta = ou_sequence(&resolved, cfg.obs_dt, cfg.window_len, dim, &mut noise_rng);
        Window {
            lambda: lambda.clone(),
            clean: tr.states.clone(),
            eta,
        }
    });

    Ok(WindowSet {
        family: cfg.family,
        dt: cfg.obs_dt,
        window_len: cfg.window_len,
        noise: cfg.noise,
        noise_initial: cfg.noise_initial,
        seed: cfg.seed,
        signal_std,
        windows,
    })
}

/// One training record: window start, one later noisy observation k steps on,
/// and the window's parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSample {
    pub z0: PhaseState,
    pub z_obs: PhaseState,
    pub k: usize,
    pub lambda: Vec<f64>,
}

/// A sliced corpus ready for training.
#[derive(Clone, Debug)]
pub struct SparseDataset {
    pub family: SystemFamily,
    pub dt: f64,
    pub window_len: usize,
    pub noise: OuNoiseConfig,
    pub seed: u64,
    pub signal_std: f64,
    pub samples: Vec<SparseSample>,
}

impl WindowSet {
    /// Slice into sparse pairs for one ensemble member: k is drawn per window
    /// from a member-specific stream; the windows and their noise stay fixed.
    pub fn slice(&self, member: u64) -> SparseDataset {
        let samples: Vec<SparseSample> = self
            .windows
            .iter()
            .enumerate()
            .map(|(idx, w)| {
                let mut k_rng = rng::stream(self.seed, &[member, idx as u64, tag::OFFSET]);
                let k = k_rng.gen_range(1..self.window_len);
                let z0 = if self.noise_initial {
                    w.noisy(0)
                } else {
                    w.clean[0].clone()
                };
                SparseSample {
                    z0,
                    z_obs: w.noisy(k),
                    k,
                    lambda: w.lambda.clone(),
                }
            })
            .collect();
        SparseDataset {
            family: self.family,
            dt: self.dt,
            window_len: self.window_len,
            noise: self.noise,
            seed: self.seed,
            signal_std: self.signal_std,
            samples,
        }
    }
}

/// Generate windows and slice them once (the member-0 view).
pub fn make_sparse_dataset(cfg: &DatagenConfig) -> Result<SparseDataset> {
    Ok(generate_windows(cfg)?.slice(0))
}

#[derive(Deserialize)]
struct DatasetFile {
    system: SystemFamily,
    window_len: usize,
    dt: f64,
    noise: OuNoiseConfig,
    seed: u64,
    signal_std: f64,
    samples: Vec<RecordFile>,
}

#[derive(Deserialize)]
struct RecordFile {
    lambda: Vec<f64>,
    k: usize,
    z0: Vec<f64>,
    zobs: Vec<f64>,
}

fn json_floats(values: &[f64]) -> String {
    let cells: Vec<String> = values.iter().map(|&v| io::fmt_f64(v)).collect();
    format!("[{}]", cells.join(","))
}

impl SparseDataset {
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::DegenerateData("dataset has no samples".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!(
                "dataset dt must be positive, got {}",
                self.dt
            )));
        }
        self.noise.validate()?;
        if self.noise.nsr.map_or(false, |r| r > 0.0) && !(self.signal_std > 0.0) {
            return Err(Error::DegenerateData(
                "signal_std must be positive when nsr > 0".into(),
            ));
        }
        let d = self.family.dim();
        for s in &self.samples {
            if s.k < 1 || s.k >= self.window_len {
                return Err(Error::BadSpec(format!(
                    "offset k = {} outside [1, {}]",
                    s.k,
                    self.window_len - 1
                )));
            }
            if s.z0.dim() != d || s.z_obs.dim() != d || s.lambda.len() != self.family.lambda_dim() {
                return Err(Error::BadSpec("sample dimensions inconsistent".into()));
            }
        }
        Ok(())
    }

    /// Serialize with exact-round-trip floats. The output is byte-stable for a
    /// given dataset.
    pub fn to_json_string(&self) -> String {
        let mut out = String::new();
        out.push_str("{\n");
        out.push_str(&format!(
            "  \"system\": {},\n",
            serde_json::to_string(&self.family).expect("family serializes")
        ));
        out.push_str(&format!("  \"window_len\": {},\n", self.window_len));
        out.push_str(&format!("  \"dt\": {},\n", io::fmt_f64(self.dt)));
        let mut noise = format!("{{\"tau\": {}", io::fmt_f64(self.noise.tau));
        if let Some(s) = self.noise.sigma_inf {
            noise.push_str(&format!(", \"sigma_inf\": {}", io::fmt_f64(s)));
        }
        if let Some(r) = self.noise.nsr {
            noise.push_str(&format!(", \"nsr\": {}", io::fmt_f64(r)));
        }
        noise.push('}');
        out.push_str(&format!("  \"noise\": {noise},\n"));
        out.push_str(&format!("  \"seed\": {},\n", self.seed));
        out.push_str(&format!(
            "  \"signal_std\": {},\n",
            io::fmt_f64(self.signal_std)
        ));
        out.push_str("  \"samples\": [\n");
        for (i, s) in self.samples.iter().enumerate() {
            let sep = if i + 1 == self.samples.len() { "" } else { "," };
            out.push_str(&format!(
                "    {{\"lambda\": {}, \"k\": {}, \"z0\": {}, \"zobs\": {}}}{sep}\n",
                json_floats(&s.lambda),
                s.k,
                json_floats(&s.z0.to_flat()),
                json_floats(&s.z_obs.to_flat()),
            ));
        }
        out.push_str("  ]\n}\n");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_text(path, &self.to_json_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: DatasetFile = io::read_json(path)?;
        let samples = file
            .samples
            .into_iter()
            .map(|r| {
                Ok(SparseSample {
                    z0: PhaseState::from_flat(&r.z0)?,
                    z_obs: PhaseState::from_flat(&r.zobs)?,
                    k: r.k,
                    lambda: r.lambda,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Self {
            family: file.system,
            dt: file.dt,
            window_len: file.window_len,
            noise: file.noise,
            seed: file.seed,
            signal_std: file.signal_std,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }
}
