//! Posterior samplers and chain diagnostics.
//!
//! The Hamiltonian here is `H(x, v) = log f(x) + log Q(v)` with
//! `Q(v) = N(0, σ_v² I)`, a log-probability rather than an energy. Leapfrog
//! half-kicks subtract `∂log f/∂x`, the drift adds `Δt · ∂log Q/∂v =
//! −Δt·v/σ_v²`, and proposals are accepted with `min(1, exp(H_T − H_0))`.
//! The dynamics conserve `H`.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::format_float;
use crate::error::{ensure, Error, Result};
use crate::model::{is_impossible, LogTarget};
use crate::rng::{self, Rng};

/// Symmetric random-walk proposal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Proposal {
    /// `x′ = x + σ ⊙ N(0, I)`.
    Gaussian { scales: Vec<f64> },
    /// `x′ = x + ε ⊙ U(−1, 1)`.
    UniformWindow { scales: Vec<f64> },
}

impl Proposal {
    pub fn gaussian(scale: f64) -> Self {
        Proposal::Gaussian { scales: vec![scale] }
    }

    pub fn uniform_window(scale: f64) -> Self {
        Proposal::UniformWindow { scales: vec![scale] }
    }

    fn scales(&self) -> &[f64] {
        match self {
            Proposal::Gaussian { scales } | Proposal::UniformWindow { scales } => scales,
        }
    }

    /// Scales must be positive, and there must be one or `dim` of them.
    pub fn validate(&self, dim: usize) -> Result<()> {
        let s = self.scales();
        ensure!(
            s.len() == 1 || s.len() == dim,
            "proposal needs 1 or {dim} scales, got {}",
            s.len()
        );
        ensure!(
            s.iter().all(|v| *v > 0.0 && v.is_finite()),
            "proposal scales must be positive"
        );
        Ok(())
    }

    fn scale(&self, i: usize) -> f64 {
        let s = self.scales();
        if s.len() == 1 {
            s[0]
        } else {
            s[i]
        }
    }

    pub fn propose(&self, x: &[f64], rng: &mut Rng) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, xi)| match self {
                Proposal::Gaussian { .. } => xi + self.scale(i) * rng::standard_normal(rng),
                Proposal::UniformWindow { .. } => xi + self.scale(i) * (2.0 * rng::uniform(rng) - 1.0),
            })
            .collect()
    }
}

/// Accept with probability `min(1, exp(log_ratio))`.
pub fn metropolis_accept(log_ratio: f64, rng: &mut Rng) -> bool {
    if log_ratio >= 0.0 {
        return true;
    }
    let u = rng::uniform(rng);
    u.ln() < log_ratio
}

/// Chain position with its cached log density.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub x: Vec<f64>,
    pub log_density: f64,
}

/// Result of one Metropolis-Hastings transition.
#[derive(Clone, Debug, PartialEq)]
pub struct MhOutcome {
    pub state: State,
    pub accepted: bool,
}

/// One Metropolis-Hastings transition from `current`. The proposals are
/// symmetric, so the proposal-density ratio is 1; impossible proposals are
/// always rejected.
pub fn mh_step<T: LogTarget + ?Sized>(target: &T, current: &State, proposal: &Proposal, rng: &mut Rng) -> Result<MhOutcome> {
    ensure!(
        current.log_density.is_finite() && !is_impossible(current.log_density),
        "current log density must be finite"
    );
    let candidate = proposal.propose(&current.x, rng);
    let lf = target.log_density(&candidate)?;
    let accepted = !is_impossible(lf) && metropolis_accept(lf - current.log_density, rng);
    Ok(MhOutcome {
        state: if accepted {
            State {
                x: candidate,
                log_density: lf,
            }
        } else {
            current.clone()
        },
        accepted,
    })
}

/// Hamiltonian sampler settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmcConfig {
    pub step_size: f64,
    pub n_leapfrog: usize,
    #[serde(default = "one")]
    pub momentum_scale: f64,
    /// Tune `step_size` during burn-in towards `target_accept`.
    #[serde(default = "yes")]
    pub adapt_step_size: bool,
    #[serde(default = "default_target_accept")]
    pub target_accept: f64,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_target_accept() -> f64 {
    0.8
}

impl HmcConfig {
    pub fn new(step_size: f64, n_leapfrog: usize) -> Self {
        HmcConfig {
            step_size,
            n_leapfrog,
            momentum_scale: 1.0,
            adapt_step_size: true,
            target_accept: default_target_accept(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.step_size > 0.0 && self.step_size.is_finite(), "step size must be positive");
        ensure!(self.n_leapfrog >= 1, "need at least one leapfrog step");
        ensure!(self.momentum_scale > 0.0, "momentum scale must be positive");
        ensure!(
            self.target_accept > 0.0 && self.target_accept < 1.0,
            "target acceptance must be in (0,1)"
        );
        Ok(())
    }
}

/// `log Q(v)` up to its normalizer.
pub fn log_momentum_density(v: &[f64], sigma_v: f64) -> f64 {
    -v.iter().map(|x| x * x).sum::<f64>() / (2.0 * sigma_v * sigma_v)
}

/// Phase-space point with the gradient of `log f` at `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhasePoint {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub log_density: f64,
    pub grad: Vec<f64>,
}

impl PhasePoint {
    pub fn new<T: LogTarget + ?Sized>(target: &T, x: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let (log_density, grad) = target.grad_log_density(&x)?;
        Ok(PhasePoint {
            x,
            v,
            log_density,
            grad,
        })
    }

    /// `H = log f(x) + log Q(v)`.
    pub fn hamiltonian(&self, sigma_v: f64) -> f64 {
        self.log_density + log_momentum_density(&self.v, sigma_v)
    }
}

/// `n_steps` leapfrog steps. Fails with a numeric error when the state
/// stops being finite.
pub fn leapfrog<T: LogTarget + ?Sized>(
    target: &T,
    start: &PhasePoint,
    step_size: f64,
    n_steps: usize,
    sigma_v: f64,
) -> Result<PhasePoint> {
    let mut p = start.clone();
    let half = 0.5 * step_size;
    let inv_var = 1.0 / (sigma_v * sigma_v);
    for _ in 0..n_steps {
        for (v, g) in p.v.iter_mut().zip(&p.grad) {
            *v -= half * g;
        }
        for (x, v) in p.x.iter_mut().zip(&p.v) {
            *x -= step_size * v * inv_var;
        }
        if p.x.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("leapfrog", "position left the finite range"));
        }
        let (lf, g) = target.grad_log_density(&p.x)?;
        if is_impossible(lf) || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("leapfrog", "log density or gradient not finite"));
        }
        p.log_density = lf;
        p.grad = g;
        for (v, g) in p.v.iter_mut().zip(&p.grad) {
            *v -= half * g;
        }
        if p.v.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("leapfrog", "momentum left the finite range"));
        }
    }
    Ok(p)
}

/// Result of one HMC transition.
#[derive(Clone, Debug, PartialEq)]
pub struct HmcOutcome {
    pub point: PhasePoint,
    pub accepted: bool,
    /// `H_T − H_0`; NaN for divergent trajectories.
    pub delta_h: f64,
    pub accept_prob: f64,
    pub divergent: bool,
}

/// One HMC transition from `current` (whose momentum is ignored).
pub fn hmc_step<T: LogTarget + ?Sized>(
    target: &T,
    current: &PhasePoint,
    cfg: &HmcConfig,
    step_size: f64,
    rng: &mut Rng,
) -> Result<HmcOutcome> {
    let sigma_v = cfg.momentum_scale;
    let mut start = current.clone();
    start.v = rng::standard_normal_vec(rng, current.x.len())
        .into_iter()
        .map(|z| sigma_v * z)
        .collect();
    let h0 = start.hamiltonian(sigma_v);
    match leapfrog(target, &start, step_size, cfg.n_leapfrog, sigma_v) {
        Ok(end) => {
            let delta_h = end.hamiltonian(sigma_v) - h0;
            let accept_prob = if delta_h.is_nan() { 0.0 } else { delta_h.min(0.0).exp() };
            let accepted = !delta_h.is_nan() && metropolis_accept(delta_h, rng);
            Ok(HmcOutcome {
                point: if accepted { end } else { current.clone() },
                accepted,
                delta_h,
                accept_prob,
                divergent: false,
            })
        }
        Err(e) if e.is_numeric() => Ok(HmcOutcome {
            point: current.clone(),
            accepted: false,
            delta_h: f64::NAN,
            accept_prob: 0.0,
            divergent: true,
        }),
        Err(e) => Err(e),
    }
}

/// Learning-rate schedule `ε_t = max(ε_min, a·(b + t)^−γ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    pub a: f64,
    #[serde(default = "one")]
    pub b: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub min: f64,
}

fn default_gamma() -> f64 {
    0.55
}

impl StepSchedule {
    /// `ε_t = ε` for all `t`.
    pub fn constant(epsilon: f64) -> Self {
        StepSchedule {
            a: epsilon,
            b: 1.0,
            gamma: 0.0,
            min: 0.0,
        }
    }

    pub fn at(&self, t: usize) -> f64 {
        (self.a * (self.b + t as f64).powf(-self.gamma)).max(self.min)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.a > 0.0 && self.a.is_finite(), "schedule scale must be positive");
        ensure!(self.b > 0.0, "schedule offset must be positive");
        ensure!(self.gamma >= 0.0, "schedule decay must be nonnegative");
        ensure!(self.min >= 0.0, "schedule floor must be nonnegative");
        Ok(())
    }
}

/// Stochastic gradient Langevin dynamics settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgldConfig {
    pub schedule: StepSchedule,
    /// Rows per minibatch; `None` or at least the dataset size means full batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Inject the Langevin noise; off gives plain stochastic gradient ascent.
    #[serde(default = "yes")]
    pub noise: bool,
}

impl SgldConfig {
    pub fn constant(epsilon: f64) -> Self {
        SgldConfig {
            schedule: StepSchedule::constant(epsilon),
            batch_size: None,
            noise: true,
        }
    }
}

/// `θ + (ε/2)·g + η` with `η ~ N(0, ε I)`, where `g` is the minibatch
/// estimate of `∇log p(D, θ)` from rows `batch`.
pub fn sgld_step<T: LogTarget + ?Sized>(
    target: &T,
    theta: &[f64],
    epsilon: f64,
    batch: &[usize],
    noise: bool,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    ensure!(epsilon > 0.0, "step size must be positive, got {epsilon}");
    let g = if target.data_len() == 0 || batch.len() >= target.data_len() {
        target.grad_log_density(theta)?.1
    } else {
        target.minibatch_grad(theta, batch)?
    };
    let sd = epsilon.sqrt();
    Ok(theta
        .iter()
        .zip(&g)
        .map(|(t, g)| {
            let eta = if noise { sd * rng::standard_normal(rng) } else { 0.0 };
            t + 0.5 * epsilon * g + eta
        })
        .collect())
}

/// Transition kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "kebab-case")]
pub enum Kernel {
    Mh { proposal: Proposal },
    Hmc(HmcConfig),
    Sgld(SgldConfig),
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Mh { .. } => "mh",
            Kernel::Hmc(_) => "hmc",
            Kernel::Sgld(_) => "sgld",
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Kernel::Mh { proposal } => proposal.validate(dim),
            Kernel::Hmc(c) => c.validate(),
            Kernel::Sgld(c) => c.schedule.validate(),
        }
    }
}

/// Chain length, burn-in and thinning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    /// Total transitions, burn-in included.
    pub n_samples: usize,
    pub burn_in: usize,
    #[serde(default = "one_usize")]
    pub thinning: usize,
    pub seed: u64,
}

fn one_usize() -> usize {
    1
}

impl ChainConfig {
    /// Burn-in defaults to a fifth of the chain, thinning to 1.
    pub fn new(n_samples: usize, seed: u64) -> Self {
        ChainConfig {
            n_samples,
            burn_in: n_samples / 5,
            thinning: 1,
            seed,
        }
    }

    /// `floor((n_samples − burn_in) / thinning)`.
    pub fn n_stored(&self) -> usize {
        if self.thinning == 0 {
            return 0;
        }
        self.n_samples.saturating_sub(self.burn_in) / self.thinning
    }

    pub fn validate(&self) -> Result<()> {
        if self.thinning == 0 {
            return Err(Error::config("thinning must be at least 1"));
        }
        if self.n_stored() == 0 {
            return Err(Error::config(format!(
                "chain of {} transitions with burn-in {} and thinning {} stores no samples",
                self.n_samples, self.burn_in, self.thinning
            )));
        }
        Ok(())
    }
}

/// Stored posterior draws with their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleStore {
    pub kernel: Kernel,
    pub config: ChainConfig,
    pub samples: Vec<Vec<f64>>,
    /// Log density at each stored sample.
    pub log_joint: Vec<f64>,
    /// Accepted over proposed after burn-in; 1 for SGLD, which has no
    /// accept step.
    pub acceptance_rate: f64,
    pub divergences: usize,
    /// HMC step size after burn-in adaptation.
    pub final_step_size: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    kernel: Kernel,
    config: ChainConfig,
    acceptance_rate: f64,
    divergences: usize,
    final_step_size: Option<f64>,
    dim: usize,
    n_stored: usize,
}

impl SampleStore {
    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-coordinate sample mean.
    pub fn mean(&self) -> Vec<f64> {
        column_means(&self.samples)
    }

    /// Per-coordinate sample variance with an `n − 1` divisor.
    pub fn variance(&self) -> Vec<f64> {
        column_variances(&self.samples)
    }

    pub fn header_json(&self) -> String {
        let h = StoreHeader {
            kernel: self.kernel.clone(),
            config: self.config.clone(),
            acceptance_rate: self.acceptance_rate,
            divergences: self.divergences,
            final_step_size: self.final_step_size,
            dim: self.dim(),
            n_stored: self.len(),
        };
        serde_json::to_string_pretty(&h).expect("header serializes")
    }

    /// One row per stored sample: `log_joint, theta0, theta1, ...`.
    pub fn write_samples_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["log_joint".to_string()];
        header.extend((0..self.dim()).map(|i| format!("theta{i}")));
        out.write_record(&header)?;
        for (s, lj) in self.samples.iter().zip(&self.log_joint) {
            let mut row = vec![format_float(*lj)];
            row.extend(s.iter().map(|v| format_float(*v)));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `header` (JSON) and `samples` (CSV).
    pub fn save(&self, header: &Path, samples: &Path) -> Result<()> {
        std::fs::write(header, self.header_json())?;
        let f = std::fs::File::create(samples)?;
        self.write_samples_csv(std::io::BufWriter::new(f))
    }

    pub fn from_parts<R: Read>(header_json: &str, samples_csv: R) -> Result<SampleStore> {
        let h: StoreHeader = serde_json::from_str(header_json)?;
        let mut reader = csv::Reader::from_reader(samples_csv);
        let mut samples = Vec::new();
        let mut log_joint = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|v| v.parse::<f64>().map_err(|e| Error::config(format!("sample value `{v}`: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            ensure!(vals.len() == h.dim + 1, "sample row has {} values, expected {}", vals.len(), h.dim + 1);
            log_joint.push(vals[0]);
            samples.push(vals[1..].to_vec());
        }
        ensure!(samples.len() == h.n_stored, "header promises {} samples, found {}", h.n_stored, samples.len());
        Ok(SampleStore {
            kernel: h.kernel,
            config: h.config,
            samples,
            log_joint,
            acceptance_rate: h.acceptance_rate,
            divergences: h.divergences,
            final_step_size: h.final_step_size,
        })
    }

    pub fn load(header: &Path, samples: &Path) -> Result<SampleStore> {
        let h = std::fs::read_to_string(header)?;
        SampleStore::from_parts(&h, std::fs::File::open(samples)?)
    }
}

pub(crate) fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

pub(crate) fn column_variances(rows: &[Vec<f64>]) -> Vec<f64> {
    let m = column_means(rows);
    let n = rows.len();
    if n < 2 {
        return vec![0.0; m.len()];
    }
    (0..m.len())
        .map(|j| rows.iter().map(|r| (r[j] - m[j]).powi(2)).sum::<f64>() / (n - 1) as f64)
        .collect()
}

fn chain_rng(seed: u64, index: u64) -> Rng {
    rng::substream(seed, "chain", index)
}

/// Generator used for the initial point of restart `index`.
pub fn restart_init_rng(seed: u64, index: u64) -> Rng {
    rng::substream(seed, "restart-init", index)
}

/// Runs `kernel` from `init`, discarding burn-in and thinning the rest.
pub fn run_chain<T: LogTarget + ?Sized>(kernel: &Kernel, target: &T, cfg: &ChainConfig, init: &[f64]) -> Result<SampleStore> {
    run_chain_with(kernel, target, cfg, init, chain_rng(cfg.seed, 0))
}

fn run_chain_with<T: LogTarget + ?Sized>(
    kernel: &Kernel,
    target: &T,
    cfg: &ChainConfig,
    init: &[f64],
    mut rng: Rng,
) -> Result<SampleStore> {
    cfg.validate()?;
    kernel.validate(target.dim())?;
    ensure!(
        init.len() == target.dim(),
        "initial point has {} values, target has dimension {}",
        init.len(),
        target.dim()
    );
    ensure!(init.iter().all(|v| v.is_finite()), "initial point must be finite");

    let mut samples = Vec::with_capacity(cfg.n_stored());
    let mut log_joint = Vec::with_capacity(cfg.n_stored());
    let (mut accepted, mut proposed, mut divergences) = (0usize, 0usize, 0usize);
    let mut store = |i: usize, x: &[f64], lf: f64, samples: &mut Vec<Vec<f64>>| {
        if i >= cfg.burn_in && (i - cfg.burn_in + 1) % cfg.thinning == 0 {
            samples.push(x.to_vec());
            log_joint.push(lf);
        }
    };

    let mut final_step_size = None;
    match kernel {
        Kernel::Mh { proposal } => {
            let lf = target.log_density(init)?;
            ensure!(!is_impossible(lf), "initial point has zero density");
            let mut state = State {
                x: init.to_vec(),
                log_density: lf,
            };
            for i in 0..cfg.n_samples {
                let out = mh_step(target, &state, proposal, &mut rng)?;
                if i >= cfg.burn_in {
                    proposed += 1;
                    accepted += usize::from(out.accepted);
                }
                state = out.state;
                store(i, &state.x, state.log_density, &mut samples);
            }
        }
        Kernel::Hmc(hc) => {
            let mut point = PhasePoint::new(target, init.to_vec(), vec![0.0; init.len()])?;
            let mut step = hc.step_size;
            for i in 0..cfg.n_samples {
                let out = hmc_step(target, &point, hc, step, &mut rng)?;
                if i < cfg.burn_in && hc.adapt_step_size {
                    step *= (0.1 * (out.accept_prob - hc.target_accept)).exp();
                }
                if i >= cfg.burn_in {
                    proposed += 1;
                    accepted += usize::from(out.accepted);
                }
                divergences += usize::from(out.divergent);
                point = out.point;
                store(i, &point.x, point.log_density, &mut samples);
            }
            final_step_size = Some(step);
        }
        Kernel::Sgld(sc) => {
            let mut theta = init.to_vec();
            let n = target.data_len();
            let batch_size = sc.batch_size.unwrap_or(n).min(n);
            for i in 0..cfg.n_samples {
                let batch = if n == 0 || batch_size >= n {
                    (0..n).collect()
                } else {
                    rng::sample_indices(&mut rng, n, batch_size.max(1))
                };
                theta = sgld_step(target, &theta, sc.schedule.at(i), &batch, sc.noise, &mut rng)?;
                if theta.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence {
                        iteration: i,
                        detail: "SGLD iterate is not finite".into(),
                        trace: log_joint.clone(),
                    });
                }
                if i >= cfg.burn_in && (i - cfg.burn_in + 1) % cfg.thinning == 0 {
                    let lf = target.log_density(&theta)?;
                    store(i, &theta, lf, &mut samples);
                }
            }
            accepted = 1;
            proposed = 1;
        }
    }
    if divergences > 0 {
        log::warn!("{divergences} divergent HMC trajectories");
    }
    Ok(SampleStore {
        kernel: kernel.clone(),
        config: cfg.clone(),
        samples,
        log_joint,
        acceptance_rate: accepted as f64 / proposed.max(1) as f64,
        divergences,
        final_step_size,
    })
}

/// `n_restarts` independent chains, each from a fresh initial point and
/// with the kernel's schedule reset. Restart 0 reproduces [`run_chain`]
/// started from `init(&mut restart_init_rng(cfg.seed, 0))`.
pub fn warm_restart_schedule<T, F>(kernel: &Kernel, target: &T, n_restarts: usize, init: F, cfg: &ChainConfig) -> Result<Vec<SampleStore>>
where
    T: LogTarget + ?Sized,
    F: Fn(&mut Rng) -> Vec<f64> + Sync,
{
    ensure!(n_restarts >= 1, "need at least one restart");
    (0..n_restarts as u64)
        .into_par_iter()
        .map(|r| {
            let theta0 = init(&mut restart_init_rng(cfg.seed, r));
            run_chain_with(kernel, target, cfg, &theta0, chain_rng(cfg.seed, r))
        })
        .collect()
}

/// Chain summary statistics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostics {
    pub acceptance_rate: f64,
    /// `autocorrelation[j][k]` is the lag-`k` autocorrelation of coordinate
    /// `j`, for `k = 0..=min(50, n−1)`.
    pub autocorrelation: Vec<Vec<f64>>,
    pub effective_sample_size: Vec<f64>,
    /// Some coordinate never moved; its ESS is reported as 1.
    pub degenerate: bool,
}

pub const MAX_LAG: usize = 50;

/// Sample autocorrelations `ρ_0..=ρ_max_lag`; `None` for a constant series.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Option<Vec<f64>> {
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let c0: f64 = series.iter().map(|v| (v - mean).powi(2)).sum();
    if c0 <= 0.0 || !c0.is_finite() {
        return None;
    }
    Some(
        (0..=max_lag.min(n.saturating_sub(1)))
            .map(|k| (0..n - k).map(|i| (series[i] - mean) * (series[i + k] - mean)).sum::<f64>() / c0)
            .collect(),
    )
}

/// `n / (1 + 2 Σ_k ρ_k)` summed over lags up to the first negative `ρ_k`.
pub fn effective_sample_size(series: &[f64]) -> Option<f64> {
    let rho = autocorrelation(series, MAX_LAG)?;
    let tail: f64 = rho.iter().skip(1).take_while(|r| **r >= 0.0).sum();
    Some(series.len() as f64 / (1.0 + 2.0 * tail))
}

pub fn diagnostics(store: &SampleStore) -> Result<Diagnostics> {
    ensure!(store.len() >= 2, "diagnostics need at least two samples, got {}", store.len());
    let mut degenerate = false;
    let mut acf = Vec::with_capacity(store.dim());
    let mut ess = Vec::with_capacity(store.dim());
    for j in 0..store.dim() {
        let series: Vec<f64> = store.samples.iter().map(|s| s[j]).collect();
        match autocorrelation(&series, MAX_LAG) {
            Some(r) => {
                ess.push(effective_sample_size(&series).unwrap_or(1.0));
                acf.push(r);
            }
            None => {
                degenerate = true;
                ess.push(1.0);
                acf.push(vec![1.0]);
            }
        }
    }
    Ok(Diagnostics {
        acceptance_rate: store.acceptance_rate,
        autocorrelation: acf,
        effective_sample_size: ess,
        degenerate,
    })
}
