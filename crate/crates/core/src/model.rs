//! Priors, likelihoods and the unnormalized log posterior.
//!
//! A [`LogJointModel`] ties an architecture, a prior, a likelihood and a
//! dataset together. Values are computed with plain floating point; gradients
//! come from the reverse-mode tape. Observations the model deems impossible
//! map to [`IMPOSSIBLE_LOG_DENSITY`] rather than `-inf`, and never reach a
//! gradient: the gradient path reports a numeric failure instead.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::data::{Dataset, Targets};
use crate::error::{ensure, Error, Result};
use crate::network::{LayerMasks, MlpSpec};
use crate::rng::{self, Rng};
use crate::tensor::{logsumexp, Tape, Tensor, Var};

/// Stand-in for `log 0`.
pub const IMPOSSIBLE_LOG_DENSITY: f64 = -1e300;

/// True when `v` is the impossible-observation sentinel (or below it).
pub fn is_impossible(v: f64) -> bool {
    v <= IMPOSSIBLE_LOG_DENSITY
}

fn guard_log_density(v: f64, what: &str) -> Result<f64> {
    if v.is_nan() {
        return Err(Error::numeric(what, "log density is NaN"));
    }
    if v == f64::INFINITY {
        return Err(Error::numeric(what, "log density is +inf"));
    }
    if v < IMPOSSIBLE_LOG_DENSITY {
        log::debug!("{what}: observation has zero probability");
        return Ok(IMPOSSIBLE_LOG_DENSITY);
    }
    Ok(v)
}

/// Regularizer recorded on the tape: `reg(θ)` as a scalar node.
pub type RegularizerFn = Arc<dyn Fn(&mut Tape, Var) -> Var + Send + Sync>;

/// Consistency condition: given the architecture, `θ` and the anchor inputs
/// as an `[n, d]` matrix, returns the `[n]` vector of `C(θ, x)`.
pub type ConsistencyFn = Arc<dyn Fn(&mut Tape, &MlpSpec, Var, Var) -> Var + Send + Sync>;

/// Prior over the parameter vector.
#[derive(Clone)]
pub enum Prior {
    /// `θ ~ N(0, σ² I)`.
    IsotropicGaussian { sigma: f64 },
    /// Unnormalized `p(θ) ∝ exp(−reg(θ))`.
    FromRegularizer { name: String, reg: RegularizerFn },
    /// `p(θ) · exp(−mean_x C(θ, x))` over a stored anchor set.
    WithConsistency {
        base: Box<Prior>,
        condition: ConsistencyFn,
        anchors: Vec<Vec<f64>>,
    },
}

impl fmt::Debug for Prior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prior::IsotropicGaussian { sigma } => write!(f, "IsotropicGaussian {{ sigma: {sigma} }}"),
            Prior::FromRegularizer { name, .. } => write!(f, "FromRegularizer({name})"),
            Prior::WithConsistency { base, anchors, .. } => {
                write!(f, "WithConsistency {{ base: {base:?}, anchors: {} }}", anchors.len())
            }
        }
    }
}

impl Prior {
    pub fn isotropic(sigma: f64) -> Result<Prior> {
        ensure!(sigma > 0.0 && sigma.is_finite(), "prior scale must be positive, got {sigma}");
        Ok(Prior::IsotropicGaussian { sigma })
    }

    pub fn from_regularizer(name: impl Into<String>, reg: RegularizerFn) -> Prior {
        Prior::FromRegularizer { name: name.into(), reg }
    }

    /// `reg(θ) = λ‖θ‖²`.
    pub fn l2(lambda: f64) -> Prior {
        Prior::from_regularizer(
            format!("l2({lambda})"),
            Arc::new(move |tape: &mut Tape, theta: Var| {
                let sq = tape.square(theta);
                let s = tape.sum(sq);
                tape.scale(s, lambda)
            }),
        )
    }

    /// `reg ≡ 0`: the improper flat prior.
    pub fn flat() -> Prior {
        Prior::from_regularizer(
            "flat",
            Arc::new(|tape: &mut Tape, theta: Var| {
                let s = tape.sum(theta);
                tape.scale(s, 0.0)
            }),
        )
    }

    pub fn with_consistency(base: Prior, condition: ConsistencyFn, anchors: Vec<Vec<f64>>) -> Result<Prior> {
        ensure!(!anchors.is_empty(), "consistency prior needs at least one anchor input");
        let d = anchors[0].len();
        ensure!(anchors.iter().all(|a| a.len() == d), "anchor inputs do not share one dimension");
        Ok(Prior::WithConsistency {
            base: Box::new(base),
            condition,
            anchors,
        })
    }

    /// Consistency condition `C(θ, x) = w · ‖NN_θ(x)‖²`, favouring small outputs.
    pub fn output_energy_condition(weight: f64) -> ConsistencyFn {
        Arc::new(move |tape: &mut Tape, spec: &MlpSpec, theta: Var, anchors: Var| {
            let out = spec.graph(tape, theta, anchors, None, false);
            let sq = tape.square(out);
            let rows = tape.sum_rows(sq);
            tape.scale(rows, weight)
        })
    }

    /// Records `log p(θ)` on the tape.
    pub fn graph(&self, tape: &mut Tape, spec: &MlpSpec, theta: Var) -> Var {
        match self {
            Prior::IsotropicGaussian { sigma } => {
                let d = tape.value(theta).len() as f64;
                let sq = tape.square(theta);
                let s = tape.sum(sq);
                let s = tape.scale(s, -0.5 / (sigma * sigma));
                tape.offset(s, -0.5 * d * (2.0 * PI * sigma * sigma).ln())
            }
            Prior::FromRegularizer { reg, .. } => {
                let r = reg(tape, theta);
                tape.neg(r)
            }
            Prior::WithConsistency {
                base,
                condition,
                anchors,
            } => {
                let lp = base.graph(tape, spec, theta);
                let x = tape.constant(rows_tensor(anchors));
                let c = condition(tape, spec, theta, x);
                let total = tape.sum(c);
                let mean = tape.scale(total, -1.0 / anchors.len() as f64);
                tape.add(lp, mean)
            }
        }
    }

    /// `log p(θ)`.
    pub fn log_density(&self, spec: &MlpSpec, theta: &[f64]) -> Result<f64> {
        if let Prior::IsotropicGaussian { sigma } = self {
            ensure_finite(theta)?;
            let d = theta.len() as f64;
            let sq: f64 = theta.iter().map(|t| t * t).sum();
            return Ok(-0.5 * d * (2.0 * PI * sigma * sigma).ln() - sq / (2.0 * sigma * sigma));
        }
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::vector(theta.to_vec()));
        let out = self.graph(&mut tape, spec, t);
        tape.scalar(out)
    }
}

fn ensure_finite(theta: &[f64]) -> Result<()> {
    if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
        return Err(Error::contract(format!("parameter {i} is not finite")));
    }
    Ok(())
}

/// `[n, d]` matrix from rows.
pub fn rows_tensor(rows: &[Vec<f64>]) -> Tensor {
    let d = rows.first().map_or(0, Vec::len);
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Tensor::new(vec![rows.len(), d], data).expect("rows share one width")
}

/// Observation model `p(y | x, θ)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Likelihood {
    /// `y ~ N(NN_θ(x), diag(σ_y²))`, one scale per output.
    GaussianRegression { sigma_y: Vec<f64> },
    /// `y ~ Cat(softmax(logits))`.
    Categorical { classes: usize },
}

impl Likelihood {
    pub fn gaussian(sigma_y: Vec<f64>) -> Result<Likelihood> {
        ensure!(!sigma_y.is_empty(), "need at least one noise scale");
        ensure!(
            sigma_y.iter().all(|s| *s > 0.0 && s.is_finite()),
            "noise scales must be positive, got {sigma_y:?}"
        );
        Ok(Likelihood::GaussianRegression { sigma_y })
    }

    pub fn categorical(classes: usize) -> Result<Likelihood> {
        ensure!(classes >= 2, "categorical likelihood needs at least two classes");
        Ok(Likelihood::Categorical { classes })
    }

    fn check(&self, spec: &MlpSpec, data: &Dataset) -> Result<()> {
        match self {
            Likelihood::GaussianRegression { sigma_y } => {
                ensure!(!spec.is_classifier(), "gaussian likelihood needs a regression head");
                ensure!(
                    sigma_y.len() == spec.output_width(),
                    "{} noise scales for {} outputs",
                    sigma_y.len(),
                    spec.output_width()
                );
                if let Targets::Real(ys) = &data.targets {
                    ensure!(
                        ys.iter().all(|y| y.len() == sigma_y.len()),
                        "label width does not match the network output"
                    );
                } else if !data.is_empty() {
                    return Err(Error::contract("gaussian likelihood needs real-valued labels"));
                }
            }
            Likelihood::Categorical { classes } => {
                ensure!(
                    spec.is_classifier() && spec.output_width() == *classes,
                    "categorical likelihood with {classes} classes needs a final softmax of that width"
                );
                match &data.targets {
                    Targets::Class(c) => ensure!(
                        c.iter().all(|k| k < classes),
                        "class index out of range [0,{classes})"
                    ),
                    Targets::Soft(p) => ensure!(
                        p.iter().all(|r| r.len() == *classes),
                        "soft label width does not match the class count"
                    ),
                    Targets::Real(_) => ensure!(data.is_empty(), "categorical likelihood needs class labels"),
                }
            }
        }
        Ok(())
    }

    /// `log p(y | ·)` from network output (logits for classifiers).
    fn point_log_density(&self, out: &[f64], targets: &Targets, i: usize) -> f64 {
        match (self, targets) {
            (Likelihood::GaussianRegression { sigma_y }, Targets::Real(ys)) => gaussian_log_density(out, &ys[i], sigma_y),
            (Likelihood::Categorical { .. }, Targets::Class(c)) => out[c[i]] - logsumexp(out),
            (Likelihood::Categorical { .. }, Targets::Soft(p)) => {
                let lse = logsumexp(out);
                p[i].iter()
                    .zip(out)
                    .filter(|(pk, _)| **pk > 0.0)
                    .map(|(pk, o)| pk * (o - lse))
                    .sum()
            }
            _ => f64::NAN,
        }
    }

    /// `[N]` per-row log densities on the tape. `out` holds `[N, m]` network
    /// outputs (logits for classifiers) and `targets` the matching labels.
    fn graph(&self, tape: &mut Tape, out: Var, targets: &Tensor) -> Var {
        match self {
            Likelihood::GaussianRegression { sigma_y } => {
                let n = targets.shape()[0];
                let y = tape.constant(targets.clone());
                let r = tape.sub(out, y);
                let sq = tape.square(r);
                let w: Vec<f64> = (0..n).flat_map(|_| sigma_y.iter().map(|s| -0.5 / (s * s))).collect();
                let w = tape.constant(Tensor::new(targets.shape().to_vec(), w).expect("shape"));
                let sq = tape.mul(sq, w);
                let rows = tape.sum_rows(sq);
                let c: f64 = sigma_y.iter().map(|s| (s * (2.0 * PI).sqrt()).ln()).sum();
                tape.offset(rows, -c)
            }
            Likelihood::Categorical { .. } => {
                let lp = tape.log_softmax_rows(out);
                let weights = tape.constant(targets.clone());
                let picked = tape.mul(lp, weights);
                tape.sum_rows(picked)
            }
        }
    }

    /// Label tensor for rows `idx` (one-hot or soft rows for classifiers).
    fn target_tensor(&self, targets: &Targets, idx: &[usize]) -> Tensor {
        let rows: Vec<Vec<f64>> = match (self, targets) {
            (_, Targets::Real(ys)) | (_, Targets::Soft(ys)) => idx.iter().map(|&i| ys[i].clone()).collect(),
            (Likelihood::Categorical { classes }, Targets::Class(c)) => idx
                .iter()
                .map(|&i| {
                    let mut v = vec![0.0; *classes];
                    v[c[i]] = 1.0;
                    v
                })
                .collect(),
            (Likelihood::GaussianRegression { .. }, Targets::Class(_)) => unreachable!("checked at construction"),
        };
        rows_tensor(&rows)
    }
}

/// `−Σⱼ[(yⱼ−ŷⱼ)²/(2σⱼ²) + log(σⱼ√(2π))]`.
pub fn gaussian_log_density(mean: &[f64], y: &[f64], sigma: &[f64]) -> f64 {
    mean.iter()
        .zip(y)
        .zip(sigma)
        .map(|((m, y), s)| -(y - m).powi(2) / (2.0 * s * s) - (s * (2.0 * PI).sqrt()).ln())
        .sum()
}

/// Sampler `x → x′` used by the augmented likelihood.
#[derive(Clone)]
pub enum Augmenter {
    /// `x′ = x`.
    Identity,
    /// `x′ = x + N(0, scale² I)`.
    Jitter { scale: f64 },
    /// Deterministic `{x − δ, x + δ}`, alternating by draw index.
    TwoPoint { delta: f64 },
    Custom(Arc<dyn Fn(&[f64], &mut Rng) -> Vec<f64> + Send + Sync>),
}

impl fmt::Debug for Augmenter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Augmenter::Identity => write!(f, "Identity"),
            Augmenter::Jitter { scale } => write!(f, "Jitter {{ scale: {scale} }}"),
            Augmenter::TwoPoint { delta } => write!(f, "TwoPoint {{ delta: {delta} }}"),
            Augmenter::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// Augmentation distribution with a fixed number of draws per point.
#[derive(Clone, Debug)]
pub struct AugmentationModel {
    pub sampler: Augmenter,
    pub samples_per_point: usize,
}

impl AugmentationModel {
    pub fn new(sampler: Augmenter, samples_per_point: usize) -> Result<Self> {
        ensure!(samples_per_point >= 1, "need at least one augmentation per point");
        if let Augmenter::Jitter { scale } = sampler {
            ensure!(scale >= 0.0, "jitter scale must be nonnegative");
        }
        Ok(AugmentationModel {
            sampler,
            samples_per_point,
        })
    }

    /// The `k`-th augmentation of `x`.
    pub fn sample(&self, x: &[f64], k: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        let out = match &self.sampler {
            Augmenter::Identity => x.to_vec(),
            Augmenter::Jitter { scale } => x.iter().map(|v| v + scale * rng::standard_normal(rng)).collect(),
            Augmenter::TwoPoint { delta } => {
                let s = if k % 2 == 0 { -delta } else { *delta };
                x.iter().map(|v| v + s).collect()
            }
            Augmenter::Custom(f) => f(x, rng),
        };
        ensure!(
            out.len() == x.len(),
            "augmentation changed the input dimension from {} to {}",
            x.len(),
            out.len()
        );
        Ok(out)
    }

    /// `A_x` for every input, drawn from `seed`: row `i·k + j` is the `j`-th
    /// augmentation of input `i`.
    pub fn augment(&self, inputs: &[Vec<f64>], seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng = rng::stream(seed, "augment");
        let mut out = Vec::with_capacity(inputs.len() * self.samples_per_point);
        for x in inputs {
            for k in 0..self.samples_per_point {
                out.push(self.sample(x, k, &mut rng)?);
            }
        }
        Ok(out)
    }
}

/// Unnormalized log posterior `log p(D_y | D_x, θ) + log p(θ)`.
#[derive(Clone, Debug)]
pub struct LogJointModel {
    spec: Arc<MlpSpec>,
    prior: Prior,
    likelihood: Likelihood,
    data: Dataset,
    augmentation: Option<AugmentationModel>,
}

/// Seed for the augmentation set when the caller supplies none.
const DEFAULT_AUGMENT_SEED: u64 = 0;

impl LogJointModel {
    pub fn new(spec: Arc<MlpSpec>, prior: Prior, likelihood: Likelihood, data: Dataset) -> Result<Self> {
        likelihood.check(&spec, &data)?;
        if let Some(d) = data.input_dim() {
            ensure!(
                d == spec.input_width(),
                "inputs have {d} features, network takes {}",
                spec.input_width()
            );
        }
        if let Prior::WithConsistency { anchors, .. } = &prior {
            ensure!(
                anchors[0].len() == spec.input_width(),
                "anchor inputs do not match the network input width"
            );
        }
        Ok(LogJointModel {
            spec,
            prior,
            likelihood,
            data,
            augmentation: None,
        })
    }

    pub fn with_augmentation(mut self, aug: AugmentationModel) -> Self {
        self.augmentation = Some(aug);
        self
    }

    /// Same model with the isotropic prior scale replaced.
    pub fn with_prior_sigma(&self, sigma: f64) -> Result<Self> {
        let mut m = self.clone();
        m.prior = match &self.prior {
            Prior::IsotropicGaussian { .. } => Prior::isotropic(sigma)?,
            Prior::WithConsistency {
                base,
                condition,
                anchors,
            } if matches!(**base, Prior::IsotropicGaussian { .. }) => {
                Prior::with_consistency(Prior::isotropic(sigma)?, condition.clone(), anchors.clone())?
            }
            _ => return Err(Error::contract("prior has no isotropic gaussian scale")),
        };
        Ok(m)
    }

    /// Same model with the observation noise replaced.
    pub fn with_noise(&self, sigma_y: Vec<f64>) -> Result<Self> {
        ensure!(
            matches!(self.likelihood, Likelihood::GaussianRegression { .. }),
            "only the gaussian likelihood has a noise scale"
        );
        let lik = Likelihood::gaussian(sigma_y)?;
        LogJointModel::new(self.spec.clone(), self.prior.clone(), lik, self.data.clone()).map(|mut m| {
            m.augmentation = self.augmentation.clone();
            m
        })
    }

    /// Same architecture, prior and likelihood on another dataset.
    pub fn with_data(&self, data: Dataset) -> Result<Self> {
        let mut m = LogJointModel::new(self.spec.clone(), self.prior.clone(), self.likelihood.clone(), data)?;
        m.augmentation = self.augmentation.clone();
        Ok(m)
    }

    pub fn spec(&self) -> &Arc<MlpSpec> {
        &self.spec
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    pub fn likelihood(&self) -> &Likelihood {
        &self.likelihood
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn augmentation(&self) -> Option<&AugmentationModel> {
        self.augmentation.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.spec.n_params()
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        ensure!(
            theta.len() == self.dim(),
            "parameter vector has {} values, model needs {}",
            theta.len(),
            self.dim()
        );
        ensure_finite(theta)
    }

    pub fn log_prior(&self, theta: &[f64]) -> Result<f64> {
        self.check_theta(theta)?;
        self.prior.log_density(&self.spec, theta)
    }

    /// Per-point log likelihood of rows `idx`, optionally under dropout masks.
    pub fn pointwise_log_likelihood(&self, theta: &[f64], idx: &[usize], masks: Option<&LayerMasks>) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        idx.iter()
            .map(|&i| {
                let out = self.spec.forward_logits(theta, &self.data.inputs[i], masks)?;
                Ok(self.likelihood.point_log_density(&out, &self.data.targets, i))
            })
            .collect()
    }

    /// `Σ log p(y | x, θ)`; the sentinel when some observation is impossible.
    pub fn log_likelihood(&self, theta: &[f64]) -> Result<f64> {
        ensure!(!self.data.is_empty(), "log likelihood needs a nonempty dataset");
        let all: Vec<usize> = (0..self.data.len()).collect();
        let s: f64 = self.pointwise_log_likelihood(theta, &all, None)?.iter().sum();
        guard_log_density(s, "log_likelihood")
    }

    /// `Σ_(x,y) log((1/|A_x|) Σ_{x′∈A_x} p(y | x′, θ))` with `A_x` drawn from `seed`.
    pub fn augmented_log_likelihood(&self, theta: &[f64], seed: u64) -> Result<f64> {
        let aug = self
            .augmentation
            .as_ref()
            .ok_or_else(|| Error::contract("model has no augmentation"))?;
        ensure!(!self.data.is_empty(), "log likelihood needs a nonempty dataset");
        self.check_theta(theta)?;
        let k = aug.samples_per_point;
        let xs = aug.augment(&self.data.inputs, seed)?;
        let mut total = 0.0;
        for i in 0..self.data.len() {
            let terms = (0..k)
                .map(|j| {
                    let out = self.spec.forward_logits(theta, &xs[i * k + j], None)?;
                    Ok(self.likelihood.point_log_density(&out, &self.data.targets, i))
                })
                .collect::<Result<Vec<f64>>>()?;
            total += logsumexp(&terms) - (k as f64).ln();
        }
        guard_log_density(total, "augmented_log_likelihood")
    }

    fn data_term(&self, theta: &[f64], seed: Option<u64>) -> Result<f64> {
        if self.data.is_empty() {
            return Ok(0.0);
        }
        match &self.augmentation {
            Some(_) => self.augmented_log_likelihood(theta, seed.unwrap_or(DEFAULT_AUGMENT_SEED)),
            None => self.log_likelihood(theta),
        }
    }

    /// `log p(D_y | D_x, θ) + log p(θ)`. The likelihood term is augmented when
    /// the model carries an augmentation, with `A_x` drawn from `seed` (a fixed
    /// default when `None`). An empty dataset contributes zero.
    pub fn log_joint(&self, theta: &[f64], seed: Option<u64>) -> Result<f64> {
        let ll = self.data_term(theta, seed)?;
        if is_impossible(ll) {
            return Ok(IMPOSSIBLE_LOG_DENSITY);
        }
        Ok(ll + self.log_prior(theta)?)
    }

    /// Records the summed log likelihood of rows `idx` on the tape, scaled by `weight`.
    fn likelihood_graph(
        &self,
        tape: &mut Tape,
        theta: Var,
        idx: &[usize],
        masks: Option<&LayerMasks>,
        seed: Option<u64>,
        weight: f64,
    ) -> Result<Var> {
        let inputs: Vec<Vec<f64>> = idx.iter().map(|&i| self.data.inputs[i].clone()).collect();
        let targets = self.likelihood.target_tensor(&self.data.targets, idx);
        let total = match &self.augmentation {
            None => {
                let x = tape.constant(rows_tensor(&inputs));
                let out = self.spec.graph(tape, theta, x, masks, true);
                let rows = self.likelihood.graph(tape, out, &targets);
                tape.sum(rows)
            }
            Some(aug) => {
                let k = aug.samples_per_point;
                let xs = aug.augment(&inputs, seed.unwrap_or(DEFAULT_AUGMENT_SEED))?;
                let m = targets.shape()[1];
                let rep: Vec<f64> = (0..idx.len())
                    .flat_map(|i| {
                        let row = &targets.data()[i * m..(i + 1) * m];
                        (0..k).flat_map(move |_| row.iter().copied())
                    })
                    .collect();
                let rep = Tensor::new(vec![idx.len() * k, m], rep)?;
                let x = tape.constant(rows_tensor(&xs));
                let out = self.spec.graph(tape, theta, x, masks, true);
                let rows = self.likelihood.graph(tape, out, &rep);
                let grid = tape.reshape(rows, &[idx.len(), k]);
                let lse = tape.logsumexp_rows(grid);
                let s = tape.sum(lse);
                tape.offset(s, -(idx.len() as f64) * (k as f64).ln())
            }
        };
        Ok(tape.scale(total, weight))
    }

    fn joint_gradient(&self, theta: &[f64], idx: &[usize], weight: f64, seed: Option<u64>) -> Result<(f64, Vec<f64>)> {
        self.check_theta(theta)?;
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::vector(theta.to_vec()));
        let lp = self.prior.graph(&mut tape, &self.spec, t);
        let total = if idx.is_empty() {
            lp
        } else {
            let ll = self.likelihood_graph(&mut tape, t, idx, None, seed, weight)?;
            tape.add(ll, lp)
        };
        let value = tape.scalar(total)?;
        let grad = tape.gradient(total, &[t])?.remove(0).into_data();
        Ok((value, grad))
    }

    /// `log p(θ)` and its gradient.
    pub fn grad_log_prior(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.joint_gradient(theta, &[], 1.0, None)
    }

    /// `log_joint` and its gradient by reverse mode.
    pub fn grad_log_joint(&self, theta: &[f64], seed: Option<u64>) -> Result<(f64, Vec<f64>)> {
        let all: Vec<usize> = (0..self.data.len()).collect();
        self.joint_gradient(theta, &all, 1.0, seed)
    }

    fn check_batch(&self, batch: &[usize], full_size: usize) -> Result<()> {
        ensure!(!batch.is_empty(), "minibatch is empty");
        ensure!(full_size >= 1, "full dataset size must be positive");
        if let Some(&bad) = batch.iter().find(|&&i| i >= self.data.len()) {
            return Err(Error::contract(format!(
                "batch index {bad} out of range for {} points",
                self.data.len()
            )));
        }
        Ok(())
    }

    /// `(N/n) Σ_batch log p(y | x, θ) + log p(θ)`.
    pub fn minibatch_log_joint(&self, theta: &[f64], batch: &[usize], full_size: usize) -> Result<f64> {
        self.check_batch(batch, full_size)?;
        let ll: f64 = self.pointwise_log_likelihood(theta, batch, None)?.iter().sum();
        let ll = guard_log_density(ll, "minibatch_log_joint")?;
        if is_impossible(ll) {
            return Ok(IMPOSSIBLE_LOG_DENSITY);
        }
        Ok(full_size as f64 / batch.len() as f64 * ll + self.log_prior(theta)?)
    }

    /// Gradient of [`LogJointModel::minibatch_log_joint`].
    pub fn grad_minibatch_log_joint(
        &self,
        theta: &[f64],
        batch: &[usize],
        full_size: usize,
        seed: Option<u64>,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_batch(batch, full_size)?;
        self.joint_gradient(theta, batch, full_size as f64 / batch.len() as f64, seed)
    }

    /// Negative log likelihood of rows `idx` under dropout masks, and its gradient.
    pub fn masked_neg_log_likelihood(
        &self,
        theta: &[f64],
        idx: &[usize],
        masks: Option<&LayerMasks>,
        weight: f64,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_theta(theta)?;
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::vector(theta.to_vec()));
        let ll = self.likelihood_graph(&mut tape, t, idx, masks, None, -weight)?;
        let value = tape.scalar(ll)?;
        let grad = tape.gradient(ll, &[t])?.remove(0).into_data();
        Ok((value, grad))
    }

    /// Derivatives of `log_joint` with respect to `log σ` of an isotropic
    /// prior and `log σ_y` of each gaussian output.
    ///
    /// Returns `(d/d log σ, d/d log σ_y)`; either part is `None` when the
    /// model lacks that scale.
    pub fn hyper_gradient(&self, theta: &[f64]) -> Result<(Option<f64>, Option<Vec<f64>>)> {
        self.check_theta(theta)?;
        let prior_sigma = match &self.prior {
            Prior::IsotropicGaussian { sigma } => Some(*sigma),
            Prior::WithConsistency { base, .. } => match **base {
                Prior::IsotropicGaussian { sigma } => Some(sigma),
                _ => None,
            },
            _ => None,
        };
        let d_prior = prior_sigma.map(|s| {
            let sq: f64 = theta.iter().map(|t| t * t).sum();
            -(theta.len() as f64) + sq / (s * s)
        });
        let d_noise = match (&self.likelihood, &self.data.targets) {
            (Likelihood::GaussianRegression { sigma_y }, Targets::Real(ys)) => {
                let mut g = vec![0.0; sigma_y.len()];
                for (x, y) in self.data.inputs.iter().zip(ys) {
                    let out = self.spec.forward(theta, x)?;
                    for j in 0..g.len() {
                        let r = y[j] - out[j];
                        g[j] += r * r / (sigma_y[j] * sigma_y[j]) - 1.0;
                    }
                }
                Some(g)
            }
            _ => None,
        };
        Ok((d_prior, d_noise))
    }
}

/// Unnormalized log density a sampler can target.
pub trait LogTarget: Sync {
    fn dim(&self) -> usize;

    fn log_density(&self, theta: &[f64]) -> Result<f64>;

    /// Value and gradient of the log density.
    fn grad_log_density(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Number of data points behind the density; zero when not data-backed.
    fn data_len(&self) -> usize {
        0
    }

    /// Unbiased estimate of the gradient from the rows in `batch`. Targets
    /// without data return the full gradient.
    fn minibatch_grad(&self, theta: &[f64], batch: &[usize]) -> Result<Vec<f64>> {
        let _ = batch;
        Ok(self.grad_log_density(theta)?.1)
    }
}

impl LogTarget for LogJointModel {
    fn dim(&self) -> usize {
        self.spec.n_params()
    }

    fn log_density(&self, theta: &[f64]) -> Result<f64> {
        self.log_joint(theta, None)
    }

    fn grad_log_density(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.grad_log_joint(theta, None)
    }

    fn data_len(&self) -> usize {
        self.data.len()
    }

    fn minibatch_grad(&self, theta: &[f64], batch: &[usize]) -> Result<Vec<f64>> {
        Ok(self.grad_minibatch_log_joint(theta, batch, self.data.len(), None)?.1)
    }
}

type DensityFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradientFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Closure-backed target, e.g. an analytic test density.
#[derive(Clone)]
pub struct FnTarget {
    dim: usize,
    log_density: DensityFn,
    gradient: GradientFn,
}

impl FnTarget {
    pub fn new(
        dim: usize,
        log_density: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        FnTarget {
            dim,
            log_density: Arc::new(log_density),
            gradient: Arc::new(gradient),
        }
    }

    /// `N(0, I_dim)` up to a constant.
    pub fn standard_normal(dim: usize) -> Self {
        FnTarget::new(
            dim,
            |x| -0.5 * x.iter().map(|v| v * v).sum::<f64>(),
            |x| x.iter().map(|v| -v).collect(),
        )
    }

    /// `N(mean, diag(sd²))` up to a constant.
    pub fn gaussian(mean: Vec<f64>, sd: Vec<f64>) -> Self {
        let (m2, s2) = (mean.clone(), sd.clone());
        FnTarget::new(
            mean.len(),
            move |x| {
                -0.5 * x
                    .iter()
                    .zip(&mean)
                    .zip(&sd)
                    .map(|((v, m), s)| ((v - m) / s).powi(2))
                    .sum::<f64>()
            },
            move |x| x.iter().zip(&m2).zip(&s2).map(|((v, m), s)| -(v - m) / (s * s)).collect(),
        )
    }
}

impl LogTarget for FnTarget {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, theta: &[f64]) -> Result<f64> {
        ensure!(theta.len() == self.dim, "expected {} coordinates, got {}", self.dim, theta.len());
        let v = (self.log_density)(theta);
        if v.is_nan() {
            return Err(Error::numeric("log_density", "target returned NaN"));
        }
        Ok(v.max(IMPOSSIBLE_LOG_DENSITY))
    }

    fn grad_log_density(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let v = self.log_density(theta)?;
        let g = (self.gradient)(theta);
        ensure!(g.len() == self.dim, "gradient has {} entries, expected {}", g.len(), self.dim);
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("gradient", "target gradient is not finite"));
        }
        Ok((v, g))
    }
}

/// The scalar conjugate model: a bias-free 1→1 identity network, prior
/// `N(0, prior_sigma²)`, observations `y` at `x = 1` with noise `sigma_y`.
/// The posterior over the single weight is Gaussian in closed form.
pub fn conjugate_scalar_model(prior_sigma: f64, sigma_y: f64, ys: &[f64]) -> Result<LogJointModel> {
    use crate::network::{Activation, LayerSpec};
    let spec = MlpSpec::new(vec![LayerSpec::new(1, 1, Activation::Identity).without_bias()])?;
    let data = Dataset::new(
        "conjugate-scalar",
        ys.iter().map(|_| vec![1.0]).collect(),
        Targets::Real(ys.iter().map(|&y| vec![y]).collect()),
    )?;
    LogJointModel::new(
        Arc::new(spec),
        Prior::isotropic(prior_sigma)?,
        Likelihood::gaussian(vec![sigma_y])?,
        data,
    )
}

/// Posterior `(mean, variance)` of [`conjugate_scalar_model`].
pub fn conjugate_scalar_posterior(prior_sigma: f64, sigma_y: f64, ys: &[f64]) -> (f64, f64) {
    let precision = 1.0 / (prior_sigma * prior_sigma) + ys.len() as f64 / (sigma_y * sigma_y);
    let mean = ys.iter().sum::<f64>() / (sigma_y * sigma_y) / precision;
    (mean, 1.0 / precision)
}

/// Log evidence of [`conjugate_scalar_model`]: `y ~ N(0, σ_p² 11ᵀ + σ_y² I)`.
pub fn conjugate_scalar_log_evidence(prior_sigma: f64, sigma_y: f64, ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let (sp2, sy2) = (prior_sigma * prior_sigma, sigma_y * sigma_y);
    let sum: f64 = ys.iter().sum();
    let sq: f64 = ys.iter().map(|y| y * y).sum();
    // Sherman-Morrison on σ_y² I + σ_p² 11ᵀ.
    let quad = sq / sy2 - sp2 * sum * sum / (sy2 * (sy2 + n * sp2));
    let logdet = (n - 1.0) * sy2.ln() + (sy2 + n * sp2).ln();
    -0.5 * (n * (2.0 * PI).ln() + logdet + quad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Generator;
    use crate::network::{Activation, LayerSpec};
    use crate::tensor::finite_difference_gradient;
    use rand::SeedableRng;

    fn sinusoid_model(seed: u64) -> (LogJointModel, Vec<f64>) {
        let spec = Arc::new(MlpSpec::from_widths(&[1, 4, 1], Activation::Tanh, Activation::Identity).unwrap());
        let data = Generator::Sinusoid1d {
            n: 8,
            noise: 0.1,
            x_range: [-1.0, 1.0],
        }
        .generate(seed)
        .unwrap();
        let m = LogJointModel::new(
            spec.clone(),
            Prior::isotropic(1.0).unwrap(),
            Likelihood::gaussian(vec![0.3]).unwrap(),
            data,
        )
        .unwrap();
        let theta = spec.init_fan_in(&mut Rng::seed_from_u64(seed));
        (m, theta)
    }

    fn classifier() -> (LogJointModel, Vec<f64>) {
        let spec = Arc::new(MlpSpec::from_widths(&[2, 5, 2], Activation::Relu, Activation::Softmax).unwrap());
        let data = Generator::TwoMoons { n: 12, noise: 0.1 }.generate(4).unwrap();
        let m = LogJointModel::new(
            spec.clone(),
            Prior::isotropic(1.0).unwrap(),
            Likelihood::categorical(2).unwrap(),
            data,
        )
        .unwrap();
        let theta = spec.init_fan_in(&mut Rng::seed_from_u64(9));
        (m, theta)
    }

    #[test]
    fn isotropic_prior_at_mode() {
        let (m, _) = sinusoid_model(0);
        let d = m.dim() as f64;
        let lp = m.log_prior(&vec![0.0; m.dim()]).unwrap();
        assert!((lp + 0.5 * d * (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn flat_regularizer_is_zero() {
        let spec = MlpSpec::from_widths(&[1, 2, 1], Activation::Relu, Activation::Identity).unwrap();
        let theta: Vec<f64> = (0..spec.n_params()).map(|i| i as f64 - 2.0).collect();
        assert_eq!(Prior::flat().log_density(&spec, &theta).unwrap(), 0.0);
    }

    #[test]
    fn null_consistency_matches_base() {
        let spec = MlpSpec::from_widths(&[1, 3, 1], Activation::Tanh, Activation::Identity).unwrap();
        let theta: Vec<f64> = (0..spec.n_params()).map(|i| 0.1 * i as f64).collect();
        let base = Prior::isotropic(0.7).unwrap();
        let null: ConsistencyFn = Arc::new(|tape: &mut Tape, spec: &MlpSpec, th: Var, x: Var| {
            let out = spec.graph(tape, th, x, None, false);
            let rows = tape.sum_rows(out);
            tape.scale(rows, 0.0)
        });
        let with = Prior::with_consistency(base.clone(), null, vec![vec![0.3], vec![-0.2]]).unwrap();
        assert_eq!(
            with.log_density(&spec, &theta).unwrap(),
            base.log_density(&spec, &theta).unwrap()
        );
    }

    #[test]
    fn consistency_subtracts_mean_condition() {
        let spec = MlpSpec::from_widths(&[1, 3, 1], Activation::Tanh, Activation::Identity).unwrap();
        let theta: Vec<f64> = (0..spec.n_params()).map(|i| 0.1 * i as f64 - 0.3).collect();
        let anchors = vec![vec![0.5], vec![-1.0], vec![2.0]];
        let base = Prior::isotropic(1.0).unwrap();
        let with = Prior::with_consistency(base.clone(), Prior::output_energy_condition(0.5), anchors.clone()).unwrap();
        let mean_c: f64 = anchors
            .iter()
            .map(|x| 0.5 * spec.forward(&theta, x).unwrap()[0].powi(2))
            .sum::<f64>()
            / 3.0;
        let want = base.log_density(&spec, &theta).unwrap() - mean_c;
        assert!((with.log_density(&spec, &theta).unwrap() - want).abs() < 1e-12);
        assert!(Prior::with_consistency(base, Prior::output_energy_condition(1.0), vec![]).is_err());
    }

    #[test]
    fn zero_residual_gaussian_likelihood() {
        let spec = Arc::new(MlpSpec::new(vec![LayerSpec::new(2, 2, Activation::Identity)]).unwrap());
        let theta = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let xs = vec![vec![0.1, 0.2], vec![-1.0, 3.0], vec![0.0, 0.5]];
        let data = Dataset::new("id", xs.clone(), Targets::Real(xs)).unwrap();
        let m = LogJointModel::new(
            spec,
            Prior::isotropic(1.0).unwrap(),
            Likelihood::gaussian(vec![1.0, 1.0]).unwrap(),
            data,
        )
        .unwrap();
        let want = -(3.0 * 2.0 / 2.0) * (2.0 * PI).ln();
        assert!((m.log_likelihood(&theta).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_one_over_k() {
        let spec = Arc::new(MlpSpec::from_widths(&[2, 3], Activation::Relu, Activation::Softmax).unwrap());
        let data = Dataset::new(
            "c",
            vec![vec![1.0, 2.0], vec![0.0, -1.0], vec![3.0, 3.0], vec![0.5, 0.5]],
            Targets::Class(vec![0, 2, 1, 1]),
        )
        .unwrap();
        let m = LogJointModel::new(
            spec.clone(),
            Prior::isotropic(1.0).unwrap(),
            Likelihood::categorical(3).unwrap(),
            data,
        )
        .unwrap();
        let ll = m.log_likelihood(&vec![0.0; spec.n_params()]).unwrap();
        assert!((ll - 4.0 * (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn likelihood_matches_straight_line_oracle() {
        let (m, theta) = sinusoid_model(0);
        let Targets::Real(ys) = &m.data().targets else { panic!() };
        // Hand-unrolled 1-4-1 tanh network.
        let oracle: f64 = m
            .data()
            .inputs
            .iter()
            .zip(ys)
            .map(|(x, y)| {
                let mut out = theta[12];
                for h in 0..4 {
                    out += theta[8 + h] * (theta[h] * x[0] + theta[4 + h]).tanh();
                }
                -(y[0] - out).powi(2) / (2.0 * 0.09) - (0.3 * (2.0 * PI).sqrt()).ln()
            })
            .sum();
        assert!((m.log_likelihood(&theta).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn incompatible_likelihood_is_rejected() {
        let (m, _) = sinusoid_model(0);
        let spec = m.spec().clone();
        assert!(LogJointModel::new(
            spec,
            Prior::isotropic(1.0).unwrap(),
            Likelihood::categorical(2).unwrap(),
            m.data().clone()
        )
        .is_err());
        assert!(Prior::isotropic(0.0).is_err());
        assert!(Likelihood::gaussian(vec![-1.0]).is_err());
    }

    fn augmented(sampler: Augmenter, k: usize) -> (LogJointModel, Vec<f64>) {
        let (m, theta) = sinusoid_model(2);
        (m.with_augmentation(AugmentationModel::new(sampler, k).unwrap()), theta)
    }

    #[test]
    fn identity_augmentation_is_plain_likelihood() {
        for k in [1, 3, 7] {
            let (m, theta) = augmented(Augmenter::Identity, k);
            let a = m.augmented_log_likelihood(&theta, 5).unwrap();
            let b = m.log_likelihood(&theta).unwrap();
            assert!((a - b).abs() < 1e-12, "k={k}: {a} vs {b}");
        }
    }

    #[test]
    fn single_draw_augmentation_uses_the_draw() {
        let (m, theta) = augmented(Augmenter::Jitter { scale: 0.2 }, 1);
        let aug = m.augmentation().unwrap();
        let xs = aug.augment(&m.data().inputs, 11).unwrap();
        let shifted = m.with_data(Dataset::new("s", xs, m.data().targets.clone()).unwrap()).unwrap();
        let want = LogJointModel::new(
            m.spec().clone(),
            m.prior().clone(),
            m.likelihood().clone(),
            shifted.data().clone(),
        )
        .unwrap()
        .log_likelihood(&theta)
        .unwrap();
        assert!((m.augmented_log_likelihood(&theta, 11).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn two_point_augmentation_by_enumeration() {
        let delta = 0.1;
        let (m, theta) = augmented(Augmenter::TwoPoint { delta }, 2);
        let Targets::Real(ys) = &m.data().targets else { panic!() };
        let density = |x: f64, y: f64| {
            let out = m.spec().forward(&theta, &[x]).unwrap()[0];
            (-(y - out).powi(2) / (2.0 * 0.09)).exp() / (0.3 * (2.0 * PI).sqrt())
        };
        let want: f64 = m
            .data()
            .inputs
            .iter()
            .zip(ys)
            .map(|(x, y)| ((density(x[0] - delta, y[0]) + density(x[0] + delta, y[0])) / 2.0).ln())
            .sum();
        assert!((m.augmented_log_likelihood(&theta, 0).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn augmentation_must_preserve_dimension() {
        let bad = Augmenter::Custom(Arc::new(|x: &[f64], _: &mut Rng| vec![x[0], 0.0]));
        let (m, theta) = augmented(bad, 2);
        assert!(m.augmented_log_likelihood(&theta, 0).is_err());
    }

    #[test]
    fn conjugate_log_joint() {
        let m = conjugate_scalar_model(1.0, 1.0, &[0.0]).unwrap();
        assert!((m.log_joint(&[0.0], None).unwrap() + (2.0 * PI).ln()).abs() < 1e-12);
        let (g0, g) = m.grad_log_joint(&[0.0], None).unwrap();
        assert!((g0 + (2.0 * PI).ln()).abs() < 1e-12);
        assert_eq!(g, vec![0.0]);
        // Ratios against the N(0, 1/2) posterior.
        let post = |t: f64| -t * t;
        for (a, b) in [(0.3, -1.2), (2.0, 0.5), (-0.7, 0.0)] {
            let d = m.log_joint(&[a], None).unwrap() - m.log_joint(&[b], None).unwrap();
            assert!((d - (post(a) - post(b))).abs() < 1e-12);
        }
    }

    #[test]
    fn conjugate_closed_forms() {
        let (mean, var) = conjugate_scalar_posterior(1.0, 1.0, &[0.0]);
        assert_eq!((mean, var), (0.0, 0.5));
        let le = conjugate_scalar_log_evidence(1.0, 1.0, &[0.0]);
        assert!((le + 0.5 * (4.0 * PI).ln()).abs() < 1e-12);
        // Two observations, checked against the chain rule p(y1) p(y2|y1).
        let ys = [0.4, -1.0];
        let (m1, v1) = conjugate_scalar_posterior(2.0, 0.5, &ys[..1]);
        let normal = |y: f64, m: f64, v: f64| -0.5 * ((2.0 * PI * v).ln() + (y - m).powi(2) / v);
        let want = normal(ys[0], 0.0, 4.0 + 0.25) + normal(ys[1], m1, v1 + 0.25);
        assert!((conjugate_scalar_log_evidence(2.0, 0.5, &ys) - want).abs() < 1e-12);
    }

    #[test]
    fn joint_is_prior_plus_likelihood() {
        let (m, theta) = classifier();
        let lj = m.log_joint(&theta, None).unwrap();
        let sum = m.log_likelihood(&theta).unwrap() + m.log_prior(&theta).unwrap();
        assert!((lj - sum).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (m, theta) in [sinusoid_model(1), classifier()] {
            let mut rng = Rng::seed_from_u64(17);
            for _ in 0..20 {
                let th: Vec<f64> = theta.iter().map(|t| t + 0.5 * rng::standard_normal(&mut rng)).collect();
                let (v, g) = m.grad_log_joint(&th, None).unwrap();
                assert!((v - m.log_joint(&th, None).unwrap()).abs() < 1e-9);
                let fd = finite_difference_gradient(|p| m.log_joint(p, None).unwrap(), &th, 1e-5).unwrap();
                for (a, b) in g.iter().zip(fd.data()) {
                    assert!((a - b).abs() / a.abs().max(1.0) < 1e-4, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn augmented_gradient_matches_finite_differences() {
        let (m, theta) = augmented(Augmenter::Jitter { scale: 0.1 }, 3);
        let (v, g) = m.grad_log_joint(&theta, Some(4)).unwrap();
        assert!((v - m.log_joint(&theta, Some(4)).unwrap()).abs() < 1e-9);
        let fd = finite_difference_gradient(|p| m.log_joint(p, Some(4)).unwrap(), &theta, 1e-5).unwrap();
        for (a, b) in g.iter().zip(fd.data()) {
            assert!((a - b).abs() / a.abs().max(1.0) < 1e-4);
        }
    }

    #[test]
    fn prior_only_gradient_is_negative_theta() {
        let (m, theta) = sinusoid_model(0);
        let prior_only = m.with_data(Dataset::new("empty", vec![], Targets::Real(vec![])).unwrap()).unwrap();
        let (_, g) = prior_only.grad_log_joint(&theta, None).unwrap();
        for (a, t) in g.iter().zip(&theta) {
            assert!((a + t).abs() < 1e-12);
        }
        assert!(prior_only.log_likelihood(&theta).is_err());
    }

    #[test]
    fn minibatch_scaling() {
        let (m, theta) = sinusoid_model(3);
        let n = m.data().len();
        let all: Vec<usize> = (0..n).collect();
        let full = m.minibatch_log_joint(&theta, &all, n).unwrap();
        assert!((full - m.log_joint(&theta, None).unwrap()).abs() < 1e-10);
        let single = m.minibatch_log_joint(&theta, &[2], 10).unwrap();
        let lp = m.pointwise_log_likelihood(&theta, &[2], None).unwrap()[0];
        assert!((single - (10.0 * lp + m.log_prior(&theta).unwrap())).abs() < 1e-10);
        assert!(m.minibatch_log_joint(&theta, &[], n).is_err());
        assert!(m.minibatch_log_joint(&theta, &[n], n).is_err());
    }

    #[test]
    fn minibatch_gradient_matches_finite_differences() {
        let (m, theta) = classifier();
        let batch = [1, 5, 7];
        let (_, g) = m.grad_minibatch_log_joint(&theta, &batch, 12, None).unwrap();
        let fd = finite_difference_gradient(|p| m.minibatch_log_joint(p, &batch, 12).unwrap(), &theta, 1e-5).unwrap();
        for (a, b) in g.iter().zip(fd.data()) {
            assert!((a - b).abs() / a.abs().max(1.0) < 1e-4);
        }
    }

    #[test]
    fn regularizer_bridge_matches_gaussian_differences() {
        let spec = MlpSpec::from_widths(&[1, 3, 1], Activation::Relu, Activation::Identity).unwrap();
        let sigma = 0.8;
        let reg = Prior::l2(1.0 / (2.0 * sigma * sigma));
        let gauss = Prior::isotropic(sigma).unwrap();
        let mut rng = Rng::seed_from_u64(0);
        for _ in 0..10 {
            let a = rng::standard_normal_vec(&mut rng, spec.n_params());
            let b = rng::standard_normal_vec(&mut rng, spec.n_params());
            let dr = reg.log_density(&spec, &a).unwrap() - reg.log_density(&spec, &b).unwrap();
            let dg = gauss.log_density(&spec, &a).unwrap() - gauss.log_density(&spec, &b).unwrap();
            assert!((dr - dg).abs() < 1e-12);
        }
    }

    #[test]
    fn overflowing_logits_are_flagged_not_propagated() {
        let spec = Arc::new(MlpSpec::from_widths(&[1, 2], Activation::Relu, Activation::Softmax).unwrap());
        let data = Dataset::new("c", vec![vec![1.0]], Targets::Class(vec![0])).unwrap();
        let m = LogJointModel::new(spec, Prior::flat(), Likelihood::categorical(2).unwrap(), data).unwrap();
        let theta = [-1e308, 1e308, 0.0, 0.0];
        let ll = m.log_likelihood(&theta).unwrap();
        assert!(is_impossible(ll));
        assert!(is_impossible(m.log_joint(&theta, None).unwrap()));
        assert!(m.grad_log_joint(&theta, None).unwrap_err().is_numeric());
    }

    #[test]
    fn hyper_gradient_matches_finite_differences() {
        let (m, theta) = sinusoid_model(5);
        let (dp, dn) = m.hyper_gradient(&theta).unwrap();
        let at = |ls: f64, ly: f64| {
            m.with_prior_sigma(ls.exp())
                .unwrap()
                .with_noise(vec![ly.exp()])
                .unwrap()
                .log_joint(&theta, None)
                .unwrap()
        };
        let (ls, ly) = (0.0, 0.3f64.ln());
        let h = 1e-5;
        let fp = (at(ls + h, ly) - at(ls - h, ly)) / (2.0 * h);
        let fy = (at(ls, ly + h) - at(ls, ly - h)) / (2.0 * h);
        assert!((dp.unwrap() - fp).abs() < 1e-5);
        assert!((dn.unwrap()[0] - fy).abs() < 1e-5 * fy.abs().max(1.0));
    }
}
