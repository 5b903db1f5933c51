//! Mean-field variational inference.
//!
//! The family is `q(θ) = Π N(θᵢ; μᵢ, σᵢ²)` with `σ = softplus(ρ)`, sampled
//! through `θ = μ + σ ⊙ ε`, `ε ~ N(0, I)`. Training minimizes the per-draw
//! objective `f = log q(θ) − log p(D, θ)`; the gradient combines the explicit
//! dependence of `log q` on `(μ, ρ)` with the pathwise term through `θ`.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::Write;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::format_float;
use crate::error::{ensure, Error, Result};
use crate::model::{is_impossible, LogJointModel, LogTarget, Prior, IMPOSSIBLE_LOG_DENSITY};
use crate::network::{Activation, MlpSpec};
use crate::optim::OptimizerConfig;
use crate::rng::{self, Rng};
use crate::tensor::{sigmoid, softplus, softplus_inverse};

/// Initial posterior scale for freshly initialized families.
pub const INITIAL_SIGMA: f64 = 0.05;

/// Divergence threshold on `|μ|` and `σ`.
pub const DIVERGENCE_BOUND: f64 = 1e6;

/// Diagonal Gaussian over the parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanFieldGaussian {
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<Arc<MlpSpec>>,
}

impl MeanFieldGaussian {
    pub fn new(mu: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        ensure!(mu.len() == rho.len(), "mu has {} entries, rho {}", mu.len(), rho.len());
        Ok(MeanFieldGaussian { mu, rho, spec: None })
    }

    /// From locations and positive scales.
    pub fn from_sigma(mu: Vec<f64>, sigma: &[f64]) -> Result<Self> {
        ensure!(sigma.iter().all(|s| *s > 0.0), "scales must be positive");
        MeanFieldGaussian::new(mu, sigma.iter().map(|s| softplus_inverse(*s)).collect())
    }

    /// `μ` from the fan-in normal initialisation, `σ = 0.05` everywhere.
    pub fn init(spec: Arc<MlpSpec>, rng: &mut Rng) -> Self {
        let mu = spec.init_fan_in(rng);
        let rho = vec![softplus_inverse(INITIAL_SIGMA); mu.len()];
        MeanFieldGaussian {
            mu,
            rho,
            spec: Some(spec),
        }
    }

    pub fn with_spec(mut self, spec: Arc<MlpSpec>) -> Result<Self> {
        ensure!(
            spec.n_params() == self.dim(),
            "architecture has {} parameters, q has {}",
            spec.n_params(),
            self.dim()
        );
        self.spec = Some(spec);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|r| softplus(*r)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("q serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let q: MeanFieldGaussian = serde_json::from_str(s)?;
        ensure!(q.mu.len() == q.rho.len(), "mu and rho lengths differ");
        if let Some(spec) = &q.spec {
            ensure!(spec.n_params() == q.dim(), "spec does not match q's dimension");
        }
        Ok(q)
    }

    /// One draw of `θ`.
    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        reparam_sample(self, &sample_noise(self.dim(), rng)).expect("dimensions agree")
    }
}

/// `ε ~ N(0, I_dim)`.
pub fn sample_noise(dim: usize, rng: &mut Rng) -> Vec<f64> {
    rng::standard_normal_vec(rng, dim)
}

/// `θ = μ + softplus(ρ) ⊙ ε`.
pub fn reparam_sample(q: &MeanFieldGaussian, eps: &[f64]) -> Result<Vec<f64>> {
    ensure!(eps.len() == q.dim(), "noise has {} entries, q has {}", eps.len(), q.dim());
    Ok(q.mu
        .iter()
        .zip(&q.rho)
        .zip(eps)
        .map(|((m, r), e)| m + softplus(*r) * e)
        .collect())
}

/// `Σᵢ log N(θᵢ; μᵢ, σᵢ²)`.
pub fn log_q(q: &MeanFieldGaussian, theta: &[f64]) -> Result<f64> {
    ensure!(theta.len() == q.dim(), "θ has {} entries, q has {}", theta.len(), q.dim());
    Ok(q.mu
        .iter()
        .zip(&q.rho)
        .zip(theta)
        .map(|((m, r), t)| {
            let s = softplus(*r);
            -0.5 * (2.0 * PI).ln() - s.ln() - (t - m).powi(2) / (2.0 * s * s)
        })
        .sum())
}

/// Per-draw `log p(D, θ) − log q(θ)` for `n_mc` draws.
pub fn elbo_draws<T: LogTarget + ?Sized>(target: &T, q: &MeanFieldGaussian, n_mc: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    ensure!(n_mc >= 1, "need at least one Monte Carlo draw");
    ensure!(q.dim() == target.dim(), "q has {} dimensions, target {}", q.dim(), target.dim());
    (0..n_mc)
        .map(|_| {
            let theta = q.sample(rng);
            let lp = target.log_density(&theta)?;
            if is_impossible(lp) {
                return Ok(IMPOSSIBLE_LOG_DENSITY);
            }
            Ok(lp - log_q(q, &theta)?)
        })
        .collect()
}

/// Monte Carlo ELBO. An impossible draw makes the estimate the sentinel.
pub fn elbo_estimate<T: LogTarget + ?Sized>(target: &T, q: &MeanFieldGaussian, n_mc: usize, rng: &mut Rng) -> Result<f64> {
    let draws = elbo_draws(target, q, n_mc, rng)?;
    if draws.iter().any(|d| is_impossible(*d)) {
        log::warn!("ELBO estimate hit an impossible observation");
        return Ok(IMPOSSIBLE_LOG_DENSITY);
    }
    Ok(draws.iter().sum::<f64>() / n_mc as f64)
}

/// `KL(q ‖ N(0, σ_p² I))` in closed form.
pub fn kl_to_isotropic(q: &MeanFieldGaussian, prior_sigma: f64) -> f64 {
    let p2 = prior_sigma * prior_sigma;
    q.mu.iter()
        .zip(q.sigma())
        .map(|(m, s)| (prior_sigma / s).ln() + (s * s + m * m) / (2.0 * p2) - 0.5)
        .sum()
}

/// Gradient of a per-draw objective split into its two routes.
#[derive(Clone, Debug, PartialEq)]
pub struct ReparamGradient {
    /// `∂f/∂μ` and `∂f/∂ρ` holding `θ` fixed.
    pub explicit_mu: Vec<f64>,
    pub explicit_rho: Vec<f64>,
    /// `∂f/∂θ · ∂θ/∂μ` and `∂f/∂θ · ∂θ/∂ρ`.
    pub pathwise_mu: Vec<f64>,
    pub pathwise_rho: Vec<f64>,
}

impl ReparamGradient {
    /// Combines `∂f/∂θ` with the explicit partials `∂f/∂μ`, `∂f/∂σ` at the
    /// draw `θ = μ + σ ⊙ ε`.
    pub fn new(q: &MeanFieldGaussian, eps: &[f64], df_dtheta: &[f64], df_dmu: &[f64], df_dsigma: &[f64]) -> Self {
        let dsigma_drho: Vec<f64> = q.rho.iter().map(|r| sigmoid(*r)).collect();
        ReparamGradient {
            explicit_mu: df_dmu.to_vec(),
            explicit_rho: df_dsigma.iter().zip(&dsigma_drho).map(|(g, d)| g * d).collect(),
            pathwise_mu: df_dtheta.to_vec(),
            pathwise_rho: df_dtheta
                .iter()
                .zip(eps)
                .zip(&dsigma_drho)
                .map(|((g, e), d)| g * e * d)
                .collect(),
        }
    }

    pub fn mu(&self) -> Vec<f64> {
        self.explicit_mu.iter().zip(&self.pathwise_mu).map(|(a, b)| a + b).collect()
    }

    pub fn rho(&self) -> Vec<f64> {
        self.explicit_rho.iter().zip(&self.pathwise_rho).map(|(a, b)| a + b).collect()
    }
}

/// Gradient of `f = β·log q(θ) − [log p(D|θ) + β·log p(θ)]` at one draw,
/// given `∇log p(D|θ)` and `∇log p(θ)` at that draw.
pub fn objective_gradient(q: &MeanFieldGaussian, eps: &[f64], grad_lik: &[f64], grad_prior: &[f64], beta: f64) -> ReparamGradient {
    let sigma = q.sigma();
    // log q = Σ −½log2π − log σ − (θ−μ)²/(2σ²), with (θ−μ)/σ = ε.
    let dlogq_dtheta: Vec<f64> = eps.iter().zip(&sigma).map(|(e, s)| -e / s).collect();
    let df_dtheta: Vec<f64> = (0..q.dim())
        .map(|i| beta * dlogq_dtheta[i] - grad_lik[i] - beta * grad_prior[i])
        .collect();
    let df_dmu: Vec<f64> = eps.iter().zip(&sigma).map(|(e, s)| beta * e / s).collect();
    let df_dsigma: Vec<f64> = eps.iter().zip(&sigma).map(|(e, s)| beta * (e * e - 1.0) / s).collect();
    ReparamGradient::new(q, eps, &df_dtheta, &df_dmu, &df_dsigma)
}

/// How the likelihood and KL parts are weighted per step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ElboScaling {
    /// Likelihood scaled by `N/n`, prior and entropy at full weight.
    #[default]
    PerBatch,
    /// As `PerBatch`, with prior and entropy weighted by `β_t` rising
    /// linearly from 0 to 1 over the first `warmup` iterations.
    KlAnnealed { warmup: usize },
}

impl ElboScaling {
    fn beta(&self, t: usize) -> f64 {
        match *self {
            ElboScaling::PerBatch => 1.0,
            ElboScaling::KlAnnealed { warmup } if warmup > 0 => ((t + 1) as f64 / warmup as f64).min(1.0),
            ElboScaling::KlAnnealed { .. } => 1.0,
        }
    }
}

/// Variational training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViConfig {
    pub iterations: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    /// Rows per minibatch; `None` uses the full dataset.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "one")]
    pub mc_samples: usize,
    #[serde(default)]
    pub elbo_scaling: ElboScaling,
    /// Learning rate decays geometrically to this fraction of its start.
    #[serde(default = "default_final_lr")]
    pub final_lr_fraction: f64,
    pub seed: u64,
}

fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::adam(0.01)
}

fn one() -> usize {
    1
}

fn default_final_lr() -> f64 {
    0.1
}

impl ViConfig {
    pub fn new(iterations: usize, seed: u64) -> Self {
        ViConfig {
            iterations,
            optimizer: default_optimizer(),
            batch_size: None,
            mc_samples: 1,
            elbo_scaling: ElboScaling::PerBatch,
            final_lr_fraction: default_final_lr(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.iterations >= 1, "need at least one iteration");
        ensure!(self.mc_samples >= 1, "need at least one Monte Carlo sample per step");
        ensure!(
            self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0,
            "final learning-rate fraction must be in (0,1]"
        );
        if let Some(b) = self.batch_size {
            ensure!(b >= 1, "batch size must be positive");
        }
        self.optimizer.validate()
    }

    fn lr_factor(&self, t: usize) -> f64 {
        if self.iterations <= 1 {
            return 1.0;
        }
        self.final_lr_fraction.powf(t as f64 / (self.iterations - 1) as f64)
    }
}

/// One row of the training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// `−f` averaged over the step's draws: the per-step ELBO estimate.
    pub neg_f: f64,
    /// Mean of `neg_f` over the trailing [`TRACE_WINDOW`] iterations.
    pub elbo_running_mean: f64,
}

pub const TRACE_WINDOW: usize = 100;

/// Writes `iteration,neg_f,elbo_running_mean`.
pub fn write_trace_csv<W: Write>(trace: &[TraceRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iteration", "neg_f", "elbo_running_mean"])?;
    for r in trace {
        out.write_record([
            r.iteration.to_string(),
            format_float(r.neg_f),
            format_float(r.elbo_running_mean),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Outcome of variational training.
#[derive(Clone, Debug, PartialEq)]
pub struct ViResult {
    pub q: MeanFieldGaussian,
    pub trace: Vec<TraceRow>,
    /// Learned hyperparameters, when the prior was learnable.
    pub xi: Option<Vec<f64>>,
    /// Point-estimated leading parameters of a last-layer model.
    pub deterministic: Option<Vec<f64>>,
}

/// Learnable scales `ξ = (log σ_prior?, log σ_y...?)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnablePrior {
    /// Initial `log σ` of an isotropic prior; `None` keeps it fixed.
    #[serde(default)]
    pub log_prior_sigma: Option<f64>,
    /// Initial `log σ_y` per output; `None` keeps it fixed.
    #[serde(default)]
    pub log_noise: Option<Vec<f64>>,
}

impl LearnablePrior {
    pub fn xi(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.log_prior_sigma.into_iter().collect();
        v.extend(self.log_noise.iter().flatten().copied());
        v
    }

    fn with_xi(&self, xi: &[f64]) -> LearnablePrior {
        let mut it = xi.iter().copied();
        LearnablePrior {
            log_prior_sigma: self.log_prior_sigma.map(|_| it.next().expect("ξ length")),
            log_noise: self.log_noise.as_ref().map(|n| n.iter().map(|_| it.next().expect("ξ length")).collect()),
        }
    }

    /// The model with this `ξ` applied.
    pub fn apply(&self, model: &LogJointModel) -> Result<LogJointModel> {
        ensure!(
            self.xi().iter().all(|v| v.is_finite()),
            "hyperparameters must be finite"
        );
        let mut m = model.clone();
        if let Some(ls) = self.log_prior_sigma {
            m = m.with_prior_sigma(ls.exp())?;
        }
        if let Some(ln) = &self.log_noise {
            m = m.with_noise(ln.iter().map(|v| v.exp()).collect())?;
        }
        Ok(m)
    }

    /// `∂ log p_ξ(D, θ) / ∂ξ` in `ξ` order.
    fn gradient(&self, model: &LogJointModel, theta: &[f64]) -> Result<Vec<f64>> {
        let (dp, dn) = model.hyper_gradient(theta)?;
        let mut g = Vec::new();
        if self.log_prior_sigma.is_some() {
            g.push(dp.ok_or_else(|| Error::contract("prior has no learnable scale"))?);
        }
        if self.log_noise.is_some() {
            g.extend(dn.ok_or_else(|| Error::contract("likelihood has no learnable noise"))?);
        }
        Ok(g)
    }
}

/// Split of the parameter vector into a point-estimated prefix and a
/// variational suffix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LastLayerPartition {
    pub deterministic: Range<usize>,
    pub variational: Range<usize>,
}

impl LastLayerPartition {
    pub fn variational_dim(&self) -> usize {
        self.variational.len()
    }
}

/// The trailing `n_bayes_layers` layers are variational.
pub fn last_layer_partition(spec: &MlpSpec, n_bayes_layers: usize) -> Result<LastLayerPartition> {
    ensure!(
        (1..=spec.n_layers()).contains(&n_bayes_layers),
        "number of Bayesian layers must be in 1..={}, got {n_bayes_layers}",
        spec.n_layers()
    );
    let split = spec.offsets(spec.n_layers() - n_bayes_layers).weights;
    Ok(LastLayerPartition {
        deterministic: 0..split,
        variational: split..spec.n_params(),
    })
}

struct TrainSetup<'a> {
    model: &'a LogJointModel,
    hyper: Option<(LearnablePrior, OptimizerConfig)>,
    /// Point-estimated prefix and its optimizer (`None` freezes it).
    deterministic: Option<(Vec<f64>, Option<OptimizerConfig>)>,
}

fn train(setup: TrainSetup<'_>, q0: &MeanFieldGaussian, cfg: &ViConfig) -> Result<ViResult> {
    cfg.validate()?;
    let model = setup.model;
    let split = setup.deterministic.as_ref().map_or(0, |(psi, _)| psi.len());
    ensure!(
        split + q0.dim() == model.dim(),
        "q has {} dimensions, model needs {}",
        q0.dim(),
        model.dim() - split
    );
    let n = model.data().len();
    let batch_size = cfg.batch_size.unwrap_or(n).min(n);
    let mut rng = rng::stream(cfg.seed, "vi");

    let mut q = q0.clone();
    let mut opt = cfg.optimizer.build(2 * q.dim())?;
    let mut params: Vec<f64> = q.mu.iter().chain(&q.rho).copied().collect();

    let (mut hyper, mut xi, mut hyper_opt) = match &setup.hyper {
        Some((lp, oc)) => (Some(lp.clone()), lp.xi(), Some(oc.build(lp.xi().len())?)),
        None => (None, vec![], None),
    };
    let (mut psi, mut psi_opt) = match &setup.deterministic {
        Some((p, oc)) => (
            p.clone(),
            match oc {
                Some(c) => Some(c.build(p.len())?),
                None => None,
            },
        ),
        None => (vec![], None),
    };

    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut window: VecDeque<f64> = VecDeque::with_capacity(TRACE_WINDOW);
    let mut window_sum = 0.0;
    let neg_f_trace = |trace: &Vec<TraceRow>| trace.iter().map(|r: &TraceRow| r.neg_f).collect::<Vec<_>>();

    for t in 0..cfg.iterations {
        let beta = cfg.elbo_scaling.beta(t);
        let current = match &hyper {
            Some(h) => h.with_xi(&xi).apply(model)?,
            None => model.clone(),
        };
        let batch: Vec<usize> = if n == 0 || batch_size >= n {
            (0..n).collect()
        } else {
            rng::sample_indices(&mut rng, n, batch_size)
        };
        let mut g_params = vec![0.0; params.len()];
        let mut g_xi = vec![0.0; xi.len()];
        let mut g_psi = vec![0.0; psi.len()];
        let mut neg_f = 0.0;
        for _ in 0..cfg.mc_samples {
            let eps = sample_noise(q.dim(), &mut rng);
            let theta_v = reparam_sample(&q, &eps)?;
            let theta: Vec<f64> = psi.iter().chain(&theta_v).copied().collect();
            let (joint_v, joint_g) = if batch.is_empty() {
                current.grad_log_prior(&theta)?
            } else {
                current.grad_minibatch_log_joint(&theta, &batch, n, None)?
            };
            let (prior_v, prior_g) = current.grad_log_prior(&theta)?;
            let lik_v = joint_v - prior_v;
            let lik_g: Vec<f64> = joint_g.iter().zip(&prior_g).map(|(a, b)| a - b).collect();
            let lq = log_q(&q, &theta_v)?;
            neg_f += lik_v + beta * (prior_v - lq);

            let g = objective_gradient(&q, &eps, &lik_g[split..], &prior_g[split..], beta);
            for (acc, v) in g_params.iter_mut().zip(g.mu().into_iter().chain(g.rho())) {
                *acc += v;
            }
            if let Some(h) = &hyper {
                let hg = h.with_xi(&xi).gradient(&current, &theta)?;
                for (acc, v) in g_xi.iter_mut().zip(hg) {
                    *acc -= v;
                }
            }
            // Leading parameters carry no prior: ascend the likelihood only.
            for (acc, v) in g_psi.iter_mut().zip(&lik_g[..split]) {
                *acc -= v;
            }
        }
        let inv = 1.0 / cfg.mc_samples as f64;
        neg_f *= inv;
        let lr = cfg.lr_factor(t);
        g_params.iter_mut().for_each(|v| *v *= inv);
        opt.step(&mut params, &g_params, lr);
        if let Some(o) = hyper_opt.as_mut() {
            g_xi.iter_mut().for_each(|v| *v *= inv);
            o.step(&mut xi, &g_xi, lr);
        }
        if let Some(o) = psi_opt.as_mut() {
            g_psi.iter_mut().for_each(|v| *v *= inv);
            o.step(&mut psi, &g_psi, lr);
        }
        let d = q.dim();
        q.mu.copy_from_slice(&params[..d]);
        q.rho.copy_from_slice(&params[d..]);

        window.push_back(neg_f);
        window_sum += neg_f;
        if window.len() > TRACE_WINDOW {
            window_sum -= window.pop_front().unwrap_or(0.0);
        }
        trace.push(TraceRow {
            iteration: t,
            neg_f,
            elbo_running_mean: window_sum / window.len() as f64,
        });

        let diverged = !neg_f.is_finite()
            || params.iter().any(|v| !v.is_finite())
            || q.mu.iter().any(|m| m.abs() > DIVERGENCE_BOUND)
            || q.rho.iter().any(|r| softplus(*r) > DIVERGENCE_BOUND)
            || xi.iter().chain(&psi).any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND);
        if diverged {
            return Err(Error::Divergence {
                iteration: t,
                detail: "variational parameters left the admissible region".into(),
                trace: neg_f_trace(&trace),
            });
        }
    }
    if let Some(h) = &hyper {
        hyper = Some(h.with_xi(&xi));
    }
    Ok(ViResult {
        q,
        trace,
        xi: hyper.map(|h| h.xi()),
        deterministic: setup.deterministic.map(|_| psi),
    })
}

/// Bayes-by-backprop: stochastic gradient descent on `f` over `(μ, ρ)`.
pub fn bayes_by_backprop(model: &LogJointModel, q0: &MeanFieldGaussian, cfg: &ViConfig) -> Result<ViResult> {
    train(
        TrainSetup {
            model,
            hyper: None,
            deterministic: None,
        },
        q0,
        cfg,
    )
}

/// Bayes-by-backprop with jointly learned prior/likelihood scales `ξ`,
/// updated by their own optimizer. With `hyper_optimizer = None` the scales
/// stay at their initial values and the run is identical to
/// [`bayes_by_backprop`] on the model with those scales applied.
pub fn learn_prior_bbb(
    model: &LogJointModel,
    prior: &LearnablePrior,
    q0: &MeanFieldGaussian,
    hyper_optimizer: Option<OptimizerConfig>,
    cfg: &ViConfig,
) -> Result<ViResult> {
    match hyper_optimizer {
        Some(oc) => train(
            TrainSetup {
                model,
                hyper: Some((prior.clone(), oc)),
                deterministic: None,
            },
            q0,
            cfg,
        ),
        None => {
            let fixed = prior.apply(model)?;
            let mut r = bayes_by_backprop(&fixed, q0, cfg)?;
            r.xi = Some(prior.xi());
            Ok(r)
        }
    }
}

/// Variational last layers over point-estimated leading layers.
///
/// `psi0` initializes the leading parameters; `feature_optimizer = None`
/// keeps them frozen. `q0` covers only the trailing parameters.
pub fn last_layer_bbb(
    model: &LogJointModel,
    partition: &LastLayerPartition,
    psi0: &[f64],
    q0: &MeanFieldGaussian,
    feature_optimizer: Option<OptimizerConfig>,
    cfg: &ViConfig,
) -> Result<ViResult> {
    ensure!(
        psi0.len() == partition.deterministic.len(),
        "leading parameters have {} values, partition needs {}",
        psi0.len(),
        partition.deterministic.len()
    );
    ensure!(
        q0.dim() == partition.variational_dim(),
        "q has {} dimensions, partition needs {}",
        q0.dim(),
        partition.variational_dim()
    );
    if partition.deterministic.is_empty() {
        return bayes_by_backprop(model, q0, cfg).map(|mut r| {
            r.deterministic = Some(vec![]);
            r
        });
    }
    train(
        TrainSetup {
            model,
            hyper: None,
            deterministic: Some((psi0.to_vec(), feature_optimizer)),
        },
        q0,
        cfg,
    )
}

/// `E_q[log p(D, θ)]` in closed form for a single identity layer with a
/// gaussian likelihood and isotropic prior.
pub fn expected_log_joint_linear_gaussian(model: &LogJointModel, q: &MeanFieldGaussian) -> Result<f64> {
    use crate::data::Targets;
    use crate::model::Likelihood;
    let spec = model.spec();
    ensure!(
        spec.n_layers() == 1 && spec.layers()[0].activation == Activation::Identity,
        "closed form needs a single identity layer"
    );
    let Prior::IsotropicGaussian { sigma: sp } = *model.prior() else {
        return Err(Error::contract("closed form needs an isotropic gaussian prior"));
    };
    let Likelihood::GaussianRegression { sigma_y } = model.likelihood() else {
        return Err(Error::contract("closed form needs a gaussian likelihood"));
    };
    ensure!(q.dim() == model.dim(), "q does not match the model");
    let sigma = q.sigma();
    let d = q.dim() as f64;
    let second_moment: f64 = q.mu.iter().zip(&sigma).map(|(m, s)| m * m + s * s).sum();
    let mut total = -0.5 * d * (2.0 * PI * sp * sp).ln() - second_moment / (2.0 * sp * sp);
    let off = spec.offsets(0);
    let (n_in, n_out) = (spec.input_width(), spec.output_width());
    let Targets::Real(ys) = &model.data().targets else {
        return Err(Error::contract("closed form needs real-valued labels"));
    };
    for (x, y) in model.data().inputs.iter().zip(ys) {
        for r in 0..n_out {
            let mut mean = 0.0;
            let mut var = 0.0;
            for c in 0..n_in {
                let i = off.weights + r * n_in + c;
                mean += q.mu[i] * x[c];
                var += sigma[i] * sigma[i] * x[c] * x[c];
            }
            if let Some(b) = off.bias {
                mean += q.mu[b + r];
                var += sigma[b + r] * sigma[b + r];
            }
            let s = sigma_y[r];
            total += -((y[r] - mean).powi(2) + var) / (2.0 * s * s) - (s * (2.0 * PI).sqrt()).ln();
        }
    }
    Ok(total)
}

/// `E_q[f] = E_q[log q] − E_q[log p(D, θ)]` in closed form.
pub fn expected_objective_linear_gaussian(model: &LogJointModel, q: &MeanFieldGaussian) -> Result<f64> {
    let neg_entropy: f64 = q.sigma().iter().map(|s| -0.5 * (2.0 * PI).ln() - s.ln() - 0.5).sum();
    Ok(neg_entropy - expected_log_joint_linear_gaussian(model, q)?)
}

/// Comparison of the pathwise estimator against finite differences of the
/// closed-form expected objective.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathwiseReport {
    /// Estimated `∂E_q[f]/∂(μ, ρ)`, `μ` block first.
    pub estimate: Vec<f64>,
    /// Central-difference reference in the same layout.
    pub reference: Vec<f64>,
    /// Standard error of each estimate.
    pub standard_error: Vec<f64>,
    /// `max |estimate − reference| / max(|reference|, 1)`.
    pub max_relative_deviation: f64,
}

/// Averages the reparametrized gradient of `f` over `n_draws` draws and
/// compares it with central differences (step `1e-5`) of the closed-form
/// `E_q[f]` for a linear-gaussian model.
pub fn pathwise_gradient_check(model: &LogJointModel, q: &MeanFieldGaussian, n_draws: usize, rng: &mut Rng) -> Result<PathwiseReport> {
    ensure!(n_draws >= 2, "need at least two draws");
    let d = q.dim();
    let mut sum = vec![0.0; 2 * d];
    let mut sum_sq = vec![0.0; 2 * d];
    for _ in 0..n_draws {
        let eps = sample_noise(d, rng);
        let theta = reparam_sample(q, &eps)?;
        let (_, gj) = model.grad_log_joint(&theta, None)?;
        let (_, gp) = model.grad_log_prior(&theta)?;
        let gl: Vec<f64> = gj.iter().zip(&gp).map(|(a, b)| a - b).collect();
        let g = objective_gradient(q, &eps, &gl, &gp, 1.0);
        for (i, v) in g.mu().into_iter().chain(g.rho()).enumerate() {
            sum[i] += v;
            sum_sq[i] += v * v;
        }
    }
    let n = n_draws as f64;
    let estimate: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let standard_error: Vec<f64> = (0..2 * d)
        .map(|i| ((sum_sq[i] / n - estimate[i].powi(2)).max(0.0) / (n - 1.0)).sqrt())
        .collect();
    let h = 1e-5;
    let mut reference = Vec::with_capacity(2 * d);
    for block in 0..2 {
        for i in 0..d {
            let shifted = |delta: f64| -> Result<f64> {
                let mut p = q.clone();
                if block == 0 {
                    p.mu[i] += delta;
                } else {
                    p.rho[i] += delta;
                }
                expected_objective_linear_gaussian(model, &p)
            };
            reference.push((shifted(h)? - shifted(-h)?) / (2.0 * h));
        }
    }
    let max_relative_deviation = estimate
        .iter()
        .zip(&reference)
        .map(|(e, r)| (e - r).abs() / r.abs().max(1.0))
        .fold(0.0, f64::max);
    Ok(PathwiseReport {
        estimate,
        reference,
        standard_error,
        max_relative_deviation,
    })
}

/// Quadrature evaluation of the ELBO decomposition for a scalar parameter.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ElboIdentity {
    pub elbo: f64,
    pub kl: f64,
    pub log_evidence: f64,
}

/// Evaluates ELBO, `KL(q ‖ posterior)` and the log evidence of a scalar
/// log joint on an `n_points` Simpson grid over `range`, with
/// `q = N(mean, sd²)`.
pub fn grid_elbo_identity(
    log_joint: impl Fn(f64) -> f64,
    mean: f64,
    sd: f64,
    range: (f64, f64),
    n_points: usize,
) -> Result<ElboIdentity> {
    ensure!(n_points >= 3 && n_points % 2 == 1, "Simpson's rule needs an odd number of points >= 3");
    ensure!(range.0 < range.1, "grid range must be increasing");
    ensure!(sd > 0.0, "q scale must be positive");
    let h = (range.1 - range.0) / (n_points - 1) as f64;
    let w = |k: usize| {
        h / 3.0
            * if k == 0 || k == n_points - 1 {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            }
    };
    let grid: Vec<f64> = (0..n_points).map(|k| range.0 + k as f64 * h).collect();
    let lj: Vec<f64> = grid.iter().map(|&t| log_joint(t)).collect();
    let lq: Vec<f64> = grid
        .iter()
        .map(|&t| -0.5 * (2.0 * PI).ln() - sd.ln() - (t - mean).powi(2) / (2.0 * sd * sd))
        .collect();
    let shift = lj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = (0..n_points).map(|k| w(k) * (lj[k] - shift).exp()).sum();
    let log_evidence = shift + z.ln();
    let elbo: f64 = (0..n_points).map(|k| w(k) * lq[k].exp() * (lj[k] - lq[k])).sum();
    let kl: f64 = (0..n_points)
        .map(|k| w(k) * lq[k].exp() * (lq[k] - (lj[k] - log_evidence)))
        .sum();
    Ok(ElboIdentity { elbo, kl, log_evidence })
}
