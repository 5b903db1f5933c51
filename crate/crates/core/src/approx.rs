//! Approximately Bayesian posteriors: MC dropout, deep ensembles as Dirac
//! mixtures and diagonal SWAG.
//!
//! Every fitted posterior is wrapped in [`Posterior`], whose
//! [`Posterior::draw_theta`] returns a dense parameter vector regardless of
//! how the posterior is represented.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::mcmc::SampleStore;
use crate::model::{LogJointModel, LogTarget};
use crate::network::{LayerMasks, MlpSpec};
use crate::optim::OptimizerConfig;
use crate::rng::{self, Rng};
use crate::tensor::logsumexp;
use crate::vi::{MeanFieldGaussian, DIVERGENCE_BOUND};

/// Floor applied to SWAG's diagonal variance.
pub const SWAG_VARIANCE_FLOOR: f64 = 1e-12;

/// Per-layer keep probabilities and the weight-decay coefficient.
///
/// Masks act on each layer's input units and are not rescaled by `1/p`, so
/// predictive means shrink by `p` relative to the dense network unless every
/// rate is 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutConfig {
    /// Probability of keeping a unit, one entry per layer.
    pub keep: Vec<f64>,
    #[serde(default)]
    pub weight_decay: f64,
}

impl DropoutConfig {
    pub fn new(keep: Vec<f64>, weight_decay: f64) -> Self {
        DropoutConfig { keep, weight_decay }
    }

    /// Same keep rate on every layer.
    pub fn uniform(spec: &MlpSpec, keep: f64, weight_decay: f64) -> Self {
        DropoutConfig::new(vec![keep; spec.n_layers()], weight_decay)
    }

    pub fn validate(&self, spec: &MlpSpec) -> Result<()> {
        ensure!(
            self.keep.len() == spec.n_layers(),
            "{} keep rates for {} layers",
            self.keep.len(),
            spec.n_layers()
        );
        ensure!(
            self.keep.iter().all(|&p| p > 0.0 && p <= 1.0),
            "keep rates must lie in (0, 1]"
        );
        ensure!(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            "weight decay must be nonnegative"
        );
        Ok(())
    }

    pub fn sample_masks(&self, spec: &MlpSpec, rng: &mut Rng) -> Vec<Option<Vec<f64>>> {
        spec.sample_masks(&self.keep, rng)
    }
}

/// Forward pass under a freshly drawn dropout mask.
pub fn mc_dropout_forward(spec: &MlpSpec, theta: &[f64], cfg: &DropoutConfig, x: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    cfg.validate(spec)?;
    let masks = cfg.sample_masks(spec, rng);
    spec.forward_masked(theta, x, Some(&masks))
}

/// Multiplies each layer's weight columns by its mask, giving the dense
/// vector whose plain forward pass equals the masked one.
pub fn fold_masks(spec: &MlpSpec, theta: &[f64], masks: &LayerMasks) -> Result<Vec<f64>> {
    ensure!(theta.len() == spec.n_params(), "theta has {} entries, spec needs {}", theta.len(), spec.n_params());
    ensure!(masks.len() == spec.n_layers(), "need one mask slot per layer");
    let mut out = theta.to_vec();
    for (i, layer) in spec.layers().iter().enumerate() {
        let Some(z) = masks[i].as_deref() else { continue };
        ensure!(z.len() == layer.input_width, "mask for layer {i} has wrong width");
        let off = spec.offsets(i).weights;
        for r in 0..layer.output_width {
            for (c, zc) in z.iter().enumerate() {
                out[off + r * layer.input_width + c] *= zc;
            }
        }
    }
    Ok(out)
}

/// `(1/N)·NLL(rows) + λ‖θ‖²` under the given masks, with its gradient.
///
/// `N` is the full dataset size, so a minibatch value is the batch's share of
/// the full objective up to the `N/n` factor applied by the caller.
pub fn dropout_objective(
    model: &LogJointModel,
    theta: &[f64],
    rows: &[usize],
    masks: Option<&LayerMasks>,
    weight_decay: f64,
) -> Result<(f64, Vec<f64>)> {
    let n = model.data().len();
    ensure!(n > 0, "dropout training needs data");
    let (nll, mut grad) = model.masked_neg_log_likelihood(theta, rows, masks, 1.0 / n as f64)?;
    let scale = n as f64 / rows.len() as f64;
    let mut penalty = 0.0;
    for (g, t) in grad.iter_mut().zip(theta) {
        *g = *g * scale + 2.0 * weight_decay * t;
        penalty += t * t;
    }
    Ok((nll * scale + weight_decay * penalty, grad))
}

/// Optimization settings shared by the point-estimate fitters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointFitConfig {
    pub iterations: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    /// Rows per step; `None` uses the full dataset.
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub seed: u64,
}

fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::adam(0.01)
}

impl PointFitConfig {
    pub fn new(iterations: usize, seed: u64) -> Self {
        PointFitConfig {
            iterations,
            optimizer: default_optimizer(),
            batch_size: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.iterations > 0, "need at least one iteration");
        if let Some(b) = self.batch_size {
            ensure!(b > 0, "batch size must be positive");
        }
        self.optimizer.validate()
    }
}

/// Dense weights from dropout training and the per-step objective.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutFit {
    pub theta: Vec<f64>,
    pub trace: Vec<f64>,
}

/// Minimizes [`dropout_objective`] with masks resampled every step.
pub fn dropout_train(model: &LogJointModel, dropout: &DropoutConfig, cfg: &PointFitConfig, init: &[f64]) -> Result<DropoutFit> {
    dropout.validate(model.spec())?;
    cfg.validate()?;
    ensure!(init.len() == model.dim(), "init has {} entries, model needs {}", init.len(), model.dim());
    let n = model.data().len();
    ensure!(n > 0, "dropout training needs data");
    let batch_size = cfg.batch_size.unwrap_or(n).min(n);
    let mut rng = rng::stream(cfg.seed, "dropout");
    let mut opt = cfg.optimizer.build(init.len())?;
    let mut theta = init.to_vec();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let rows: Vec<usize> = if batch_size >= n {
            (0..n).collect()
        } else {
            rng::sample_indices(&mut rng, n, batch_size)
        };
        let masks = dropout.sample_masks(model.spec(), &mut rng);
        let (value, grad) = dropout_objective(model, &theta, &rows, Some(&masks), dropout.weight_decay)?;
        trace.push(value);
        opt.step(&mut theta, &grad, 1.0);
        check_point(&theta, value, t, &trace)?;
    }
    Ok(DropoutFit { theta, trace })
}

fn check_point(theta: &[f64], value: f64, t: usize, trace: &[f64]) -> Result<()> {
    if !value.is_finite() || theta.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
        return Err(Error::Divergence {
            iteration: t,
            detail: "parameters or objective left the finite region".into(),
            trace: trace.to_vec(),
        });
    }
    Ok(())
}

/// Weighted set of point masses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiracMixture {
    members: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl DiracMixture {
    pub fn new(members: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        ensure!(!members.is_empty(), "a mixture needs at least one member");
        ensure!(weights.len() == members.len(), "{} weights for {} members", weights.len(), members.len());
        let d = members[0].len();
        ensure!(members.iter().all(|m| m.len() == d), "members differ in dimension");
        ensure!(weights.iter().all(|w| *w > 0.0 && w.is_finite()), "weights must be positive");
        let total: f64 = weights.iter().sum();
        ensure!((total - 1.0).abs() <= 1e-12, "weights sum to {total}, not 1");
        Ok(DiracMixture { members, weights })
    }

    pub fn uniform(members: Vec<Vec<f64>>) -> Result<Self> {
        let k = members.len().max(1);
        DiracMixture::new(members, vec![1.0 / k as f64; k])
    }

    /// Weights `∝ exp(log_joint)`, normalized by a stable softmax.
    pub fn posterior_weighted(members: Vec<Vec<f64>>, log_joints: &[f64]) -> Result<Self> {
        ensure!(log_joints.len() == members.len(), "one log joint per member");
        let lse = logsumexp(log_joints);
        ensure!(lse.is_finite(), "member log joints are not finite");
        let mut w: Vec<f64> = log_joints.iter().map(|l| (l - lse).exp()).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        // Members with vanishing weight stay representable.
        w.iter_mut().for_each(|v| *v = v.max(f64::MIN_POSITIVE));
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        DiracMixture::new(members, w)
    }

    pub fn members(&self) -> &[Vec<f64>] {
        &self.members
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.members[0].len()
    }

    /// Index of a member drawn with probability `αᵢ`.
    pub fn pick(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.random::<f64>();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.members.len() - 1
    }

    /// Writes `weights.json` and one `member_XXX.json` per member.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, m) in self.members.iter().enumerate() {
            fs::write(dir.join(member_file(i)), serde_json::to_string(m)?)?;
        }
        fs::write(dir.join("weights.json"), serde_json::to_string_pretty(&self.weights)?)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let weights: Vec<f64> = serde_json::from_str(&fs::read_to_string(dir.join("weights.json"))?)?;
        let members = (0..weights.len())
            .map(|i| Ok(serde_json::from_str(&fs::read_to_string(dir.join(member_file(i)))?)?))
            .collect::<Result<Vec<Vec<f64>>>>()?;
        DiracMixture::new(members, weights)
    }
}

fn member_file(i: usize) -> String {
    format!("member_{i:03}.json")
}

/// How ensemble members are weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemberWeighting {
    #[default]
    Uniform,
    /// Softmax over each member's log joint.
    Posterior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: usize,
    #[serde(flatten)]
    pub fit: PointFitConfig,
    #[serde(default)]
    pub weighting: MemberWeighting,
}

/// The fitted mixture and the number of members dropped for failing to
/// converge.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleFit {
    pub mixture: DiracMixture,
    pub excluded: usize,
}

/// Maximizes `log target` from `start` with the configured optimizer.
///
/// Rows are subsampled when the target is data-backed and a batch size is
/// set; `rng` drives the subsampling.
pub fn fit_map<T: LogTarget + ?Sized>(target: &T, start: &[f64], cfg: &PointFitConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    cfg.validate()?;
    ensure!(start.len() == target.dim(), "start has {} entries, target needs {}", start.len(), target.dim());
    let n = target.data_len();
    let batch = cfg.batch_size.filter(|&b| n > 0 && b < n);
    let mut opt = cfg.optimizer.build(start.len())?;
    let mut theta = start.to_vec();
    let mut trace = Vec::new();
    for t in 0..cfg.iterations {
        let (value, grad) = match batch {
            Some(b) => {
                let rows = rng::sample_indices(rng, n, b);
                (f64::NAN, target.minibatch_grad(&theta, &rows)?)
            }
            None => target.grad_log_density(&theta)?,
        };
        if !value.is_nan() {
            trace.push(-value);
        }
        let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
        opt.step(&mut theta, &descent, 1.0);
        check_point(&theta, if value.is_nan() { 0.0 } else { value }, t, &trace)?;
    }
    Ok(theta)
}

/// `K` MAP fits from independent initializations, run in parallel.
///
/// Member `i` draws its start from `init` with the `"member"` substream `i`
/// and optimizes with its own `"member-fit"` substream. Members whose fit
/// errors or ends at a non-finite log density are excluded with a warning.
pub fn fit_deep_ensemble<T, F>(target: &T, init: F, cfg: &EnsembleConfig) -> Result<EnsembleFit>
where
    T: LogTarget + ?Sized,
    F: Fn(&mut Rng) -> Vec<f64> + Sync,
{
    ensure!(cfg.members >= 1, "an ensemble needs at least one member");
    cfg.fit.validate()?;
    let fits: Vec<Option<(Vec<f64>, f64)>> = (0..cfg.members)
        .into_par_iter()
        .map(|i| {
            let start = init(&mut rng::substream(cfg.fit.seed, "member", i as u64));
            let mut rng = rng::substream(cfg.fit.seed, "member-fit", i as u64);
            let fitted = fit_map(target, &start, &cfg.fit, &mut rng)
                .and_then(|theta| target.log_density(&theta).map(|l| (theta, l)));
            match fitted {
                Ok((theta, l)) if l.is_finite() && !crate::model::is_impossible(l) => Some((theta, l)),
                Ok(_) => {
                    log::warn!("ensemble member {i} ended at an impossible log density; excluded");
                    None
                }
                Err(e) => {
                    log::warn!("ensemble member {i} failed: {e}; excluded");
                    None
                }
            }
        })
        .collect();
    let excluded = fits.iter().filter(|f| f.is_none()).count();
    let (members, log_joints): (Vec<_>, Vec<_>) = fits.into_iter().flatten().unzip();
    if members.is_empty() {
        return Err(Error::config("no ensemble member converged"));
    }
    let mixture = match cfg.weighting {
        MemberWeighting::Uniform => DiracMixture::uniform(members)?,
        MemberWeighting::Posterior => DiracMixture::posterior_weighted(members, &log_joints)?,
    };
    Ok(EnsembleFit { mixture, excluded })
}

/// Running first and second moments of collected iterates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwagMoments {
    pub mean: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub count: usize,
}

impl SwagMoments {
    pub fn new(dim: usize) -> Self {
        SwagMoments {
            mean: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            count: 0,
        }
    }

    pub fn from_iterates(iterates: &[Vec<f64>]) -> Result<Self> {
        ensure!(iterates.len() >= 2, "need at least two iterates, got {}", iterates.len());
        let mut m = SwagMoments::new(iterates[0].len());
        for it in iterates {
            m.push(it)?;
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn push(&mut self, theta: &[f64]) -> Result<()> {
        ensure!(theta.len() == self.dim(), "iterate has wrong dimension");
        self.count += 1;
        let w = 1.0 / self.count as f64;
        for ((m, s), t) in self.mean.iter_mut().zip(&mut self.second_moment).zip(theta) {
            *m += w * (t - *m);
            *s += w * (t * t - *s);
        }
        Ok(())
    }

    /// `E[θ²] − θ̄²`, floored elementwise.
    pub fn variance(&self) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.second_moment)
            .map(|(m, s)| (s - m * m).max(SWAG_VARIANCE_FLOOR))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: SwagMoments = serde_json::from_str(s)?;
        ensure!(m.mean.len() == m.second_moment.len(), "moment vectors differ in length");
        ensure!(m.count >= 2, "moments need at least two iterates");
        Ok(m)
    }
}

/// Constant-rate SGD trajectory with iterate collection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwagConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Leading fraction of steps run before collection starts.
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_collect_every")]
    pub collect_every: usize,
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub seed: u64,
}

fn default_warmup() -> f64 {
    0.5
}

fn default_collect_every() -> usize {
    10
}

impl SwagConfig {
    pub fn new(iterations: usize, learning_rate: f64, seed: u64) -> Self {
        SwagConfig {
            iterations,
            learning_rate,
            warmup_fraction: default_warmup(),
            collect_every: default_collect_every(),
            batch_size: None,
            seed,
        }
    }

    /// Number of iterates the trajectory collects.
    pub fn n_collected(&self) -> usize {
        let start = self.warmup_steps();
        (start..self.iterations).filter(|t| (t - start) % self.collect_every.max(1) == 0).count()
    }

    fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.iterations as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("SWAG learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("warmup fraction must lie in [0, 1)"));
        }
        if self.collect_every == 0 {
            return Err(Error::config("collection interval must be positive"));
        }
        if self.n_collected() < 2 {
            return Err(Error::config(format!(
                "trajectory collects {} iterates; SWAG needs at least 2",
                self.n_collected()
            )));
        }
        Ok(())
    }
}

/// Diagonal SWAG: `θ ← θ + lr·∇log p` at a constant rate, collecting every
/// `collect_every` steps once warmup ends.
pub fn fit_swag_diagonal<T: LogTarget + ?Sized>(target: &T, init: &[f64], cfg: &SwagConfig) -> Result<SwagMoments> {
    cfg.validate()?;
    ensure!(init.len() == target.dim(), "init has {} entries, target needs {}", init.len(), target.dim());
    let n = target.data_len();
    let batch = cfg.batch_size.filter(|&b| n > 0 && b < n);
    let mut rng = rng::stream(cfg.seed, "swag");
    let start = cfg.warmup_steps();
    let mut theta = init.to_vec();
    let mut moments = SwagMoments::new(theta.len());
    for t in 0..cfg.iterations {
        let grad = match batch {
            Some(b) => target.minibatch_grad(&theta, &rng::sample_indices(&mut rng, n, b))?,
            None => target.grad_log_density(&theta)?.1,
        };
        for (x, g) in theta.iter_mut().zip(&grad) {
            *x += cfg.learning_rate * g;
        }
        check_point(&theta, 0.0, t, &[])?;
        if t >= start && (t - start) % cfg.collect_every == 0 {
            moments.push(&theta)?;
        }
    }
    Ok(moments)
}

/// Any fitted posterior over the parameter vector.
#[derive(Clone, Debug)]
pub enum Posterior {
    Samples(SampleStore),
    MeanField(MeanFieldGaussian),
    Dropout {
        spec: Arc<MlpSpec>,
        config: DropoutConfig,
        theta: Vec<f64>,
    },
    Ensemble(DiracMixture),
    Swag(SwagMoments),
}

impl Posterior {
    pub fn kind(&self) -> &'static str {
        match self {
            Posterior::Samples(_) => "samples",
            Posterior::MeanField(_) => "mean-field",
            Posterior::Dropout { .. } => "dropout",
            Posterior::Ensemble(_) => "ensemble",
            Posterior::Swag(_) => "swag",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Posterior::Samples(s) => s.dim(),
            Posterior::MeanField(q) => q.dim(),
            Posterior::Dropout { theta, .. } => theta.len(),
            Posterior::Ensemble(m) => m.dim(),
            Posterior::Swag(s) => s.dim(),
        }
    }

    /// Checks the posterior can be drawn from.
    pub fn validate(&self) -> Result<()> {
        match self {
            Posterior::Samples(s) => ensure!(!s.is_empty(), "sample store is empty"),
            Posterior::Dropout { spec, config, theta } => {
                config.validate(spec)?;
                ensure!(theta.len() == spec.n_params(), "dropout weights do not match the spec");
            }
            Posterior::Swag(s) => ensure!(s.count >= 2, "SWAG moments need at least two iterates"),
            Posterior::MeanField(_) | Posterior::Ensemble(_) => {}
        }
        Ok(())
    }

    /// One dense parameter vector.
    ///
    /// Stored samples are picked uniformly; dropout folds a fresh mask into
    /// the weights; SWAG returns `θ̄ + √diag ⊙ ε`.
    pub fn draw_theta(&self, rng: &mut Rng) -> Vec<f64> {
        match self {
            Posterior::Samples(s) => s.samples[rng.random_range(0..s.len())].clone(),
            Posterior::MeanField(q) => q.sample(rng),
            Posterior::Dropout { spec, config, theta } => {
                let masks = config.sample_masks(spec, rng);
                fold_masks(spec, theta, &masks).expect("validated dropout posterior")
            }
            Posterior::Ensemble(m) => m.members[m.pick(rng)].clone(),
            Posterior::Swag(s) => s
                .mean
                .iter()
                .zip(s.variance())
                .map(|(m, v)| m + v.sqrt() * rng::standard_normal(rng))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Generator;
    use crate::mcmc::{ChainConfig, Kernel, Proposal};
    use crate::model::{FnTarget, Likelihood, Prior};
    use crate::network::Activation;
    use rand::SeedableRng;

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    fn sinusoid_model(n: usize) -> LogJointModel {
        let spec = Arc::new(MlpSpec::from_widths(&[1, 16, 1], Activation::Tanh, Activation::Identity).unwrap());
        let data = Generator::Sinusoid1d {
            n,
            noise: 0.1,
            x_range: [-1.0, 1.0],
        }
        .generate(5)
        .unwrap();
        LogJointModel::new(spec, Prior::isotropic(1.0).unwrap(), Likelihood::gaussian(vec![0.1]).unwrap(), data).unwrap()
    }

    #[test]
    fn all_keep_masks_match_dense_forward() {
        let m = sinusoid_model(4);
        let theta = m.spec().init_fan_in(&mut rng(1));
        let cfg = DropoutConfig::uniform(m.spec(), 1.0, 0.0);
        for x in [-0.7, 0.1, 0.9] {
            let a = mc_dropout_forward(m.spec(), &theta, &cfg, &[x], &mut rng(2)).unwrap();
            assert_eq!(a, m.spec().forward(&theta, &[x]).unwrap());
        }
    }

    #[test]
    fn dropout_mean_matches_halved_weights() {
        let spec = MlpSpec::from_widths(&[3, 5, 1], Activation::Identity, Activation::Identity).unwrap();
        let theta = spec.init_fan_in(&mut rng(3));
        let cfg = DropoutConfig::new(vec![1.0, 0.5], 0.0);
        let x = [0.4, -1.2, 0.8];
        let mut r = rng(4);
        let n = 100_000;
        let mean = (0..n).map(|_| mc_dropout_forward(&spec, &theta, &cfg, &x, &mut r).unwrap()[0]).sum::<f64>() / n as f64;
        let mut halved = theta.clone();
        let off = spec.offsets(1).weights;
        halved[off..off + 5].iter_mut().for_each(|w| *w *= 0.5);
        let want = spec.forward(&halved, &x).unwrap()[0];
        // Linear network: the expectation equals the halved-weight pass exactly.
        let scale = want.abs().max(theta[off..off + 5].iter().map(|w| w.abs()).sum::<f64>());
        assert!((mean - want).abs() < 0.01 * scale, "mean {mean} want {want}");
    }

    #[test]
    fn keep_frequency_matches_rate() {
        let spec = MlpSpec::from_widths(&[2, 6, 1], Activation::Tanh, Activation::Identity).unwrap();
        let cfg = DropoutConfig::new(vec![0.8, 0.3], 0.0);
        let mut r = rng(5);
        let n = 100_000;
        let mut kept = [vec![0.0; 2], vec![0.0; 6]];
        for _ in 0..n {
            let masks = cfg.sample_masks(&spec, &mut r);
            for (k, m) in kept.iter_mut().zip(&masks) {
                for (a, z) in k.iter_mut().zip(m.as_ref().unwrap()) {
                    *a += z;
                }
            }
        }
        for (k, p) in kept.iter().zip(&cfg.keep) {
            for a in k {
                assert!((a / n as f64 - p).abs() < 0.005);
            }
        }
    }

    #[test]
    fn folded_masks_reproduce_masked_forward() {
        let m = sinusoid_model(4);
        let theta = m.spec().init_fan_in(&mut rng(6));
        let cfg = DropoutConfig::uniform(m.spec(), 0.5, 0.0);
        let masks = cfg.sample_masks(m.spec(), &mut rng(7));
        let folded = fold_masks(m.spec(), &theta, &masks).unwrap();
        for x in [-0.5, 0.3] {
            let a = m.spec().forward_masked(&theta, &[x], Some(&masks)).unwrap();
            let b = m.spec().forward(&folded, &[x]).unwrap();
            assert!((a[0] - b[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_objective_matches_independent_formula() {
        let m = sinusoid_model(12);
        let theta = m.spec().init_fan_in(&mut rng(8));
        let lambda = 0.003;
        let all: Vec<usize> = (0..12).collect();
        let (v, _) = dropout_objective(&m, &theta, &all, None, lambda).unwrap();
        let want = -m.log_likelihood(&theta).unwrap() / 12.0 + lambda * theta.iter().map(|t| t * t).sum::<f64>();
        assert!((v - want).abs() < 1e-10);
        let (v0, _) = dropout_objective(&m, &theta, &all, None, 0.0).unwrap();
        assert!(v >= v0);
    }

    #[test]
    fn dropout_objective_gradient_matches_finite_differences() {
        let m = sinusoid_model(6);
        let theta = m.spec().init_fan_in(&mut rng(9));
        let cfg = DropoutConfig::uniform(m.spec(), 0.7, 0.01);
        let masks = cfg.sample_masks(m.spec(), &mut rng(10));
        let rows = [0, 2, 5];
        let (_, g) = dropout_objective(&m, &theta, &rows, Some(&masks), 0.01).unwrap();
        let fd = crate::tensor::finite_difference_gradient(
            |t| dropout_objective(&m, t, &rows, Some(&masks), 0.01).unwrap().0,
            &theta,
            1e-6,
        )
        .unwrap();
        for (a, b) in g.iter().zip(fd.data()) {
            assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn dropout_uncertainty_grows_outside_training_range() {
        let m = sinusoid_model(60);
        let dcfg = DropoutConfig::uniform(m.spec(), 0.9, 1e-4);
        let fit_cfg = PointFitConfig {
            optimizer: OptimizerConfig::adam(0.01),
            ..PointFitConfig::new(3_000, 11)
        };
        let init = m.spec().init_fan_in(&mut rng(12));
        let fit = dropout_train(&m, &dcfg, &fit_cfg, &init).unwrap();
        let mut r = rng(13);
        let stdev = |x: f64, r: &mut Rng| {
            let ys: Vec<f64> = (0..2_000)
                .map(|_| mc_dropout_forward(m.spec(), &fit.theta, &dcfg, &[x], r).unwrap()[0])
                .collect();
            let mean = ys.iter().sum::<f64>() / ys.len() as f64;
            (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (ys.len() - 1) as f64).sqrt()
        };
        let inside: Vec<f64> = [-0.8, -0.4, 0.0, 0.4, 0.8].iter().map(|&x| stdev(x, &mut r)).collect();
        let outside: Vec<f64> = [-3.0, -2.5, 2.5, 3.0].iter().map(|&x| stdev(x, &mut r)).collect();
        assert!(inside.iter().all(|s| *s > 0.0));
        let mi = inside.iter().sum::<f64>() / inside.len() as f64;
        let mo = outside.iter().sum::<f64>() / outside.len() as f64;
        assert!(mo > mi, "outside {mo} inside {mi}");
    }

    #[test]
    fn dropout_rejects_bad_rates() {
        let m = sinusoid_model(4);
        assert!(DropoutConfig::uniform(m.spec(), 0.0, 0.0).validate(m.spec()).is_err());
        assert!(DropoutConfig::uniform(m.spec(), 1.2, 0.0).validate(m.spec()).is_err());
        assert!(DropoutConfig::uniform(m.spec(), 0.5, -1.0).validate(m.spec()).is_err());
        assert!(DropoutConfig::new(vec![0.5], 0.0).validate(m.spec()).is_err());
    }

    fn bimodal() -> FnTarget {
        FnTarget::new(
            1,
            |t| -(t[0] * t[0] - 1.0).powi(2) / 0.02,
            |t| vec![-4.0 * t[0] * (t[0] * t[0] - 1.0) / 0.02],
        )
    }

    #[test]
    fn ensemble_covers_both_modes() {
        let cfg = EnsembleConfig {
            members: 20,
            fit: PointFitConfig {
                optimizer: OptimizerConfig::adam(0.05),
                ..PointFitConfig::new(500, 14)
            },
            weighting: MemberWeighting::Uniform,
        };
        let fit = fit_deep_ensemble(&bimodal(), |r| vec![rng::standard_normal(r)], &cfg).unwrap();
        assert_eq!(fit.excluded, 0);
        let pos = fit.mixture.members().iter().filter(|m| (m[0] - 1.0).abs() < 0.05).count();
        let neg = fit.mixture.members().iter().filter(|m| (m[0] + 1.0).abs() < 0.05).count();
        assert_eq!(pos + neg, 20);
        assert!(pos >= 5 && neg >= 5, "pos {pos} neg {neg}");
    }

    #[test]
    fn single_member_ensemble_is_map_point() {
        let cfg = EnsembleConfig {
            members: 1,
            fit: PointFitConfig::new(2_000, 15),
            weighting: MemberWeighting::Posterior,
        };
        let t = FnTarget::gaussian(vec![0.7], vec![0.2]);
        let fit = fit_deep_ensemble(&t, |_| vec![0.0], &cfg).unwrap();
        assert_eq!(fit.mixture.weights(), &[1.0]);
        assert!((fit.mixture.members()[0][0] - 0.7).abs() < 1e-3);
    }

    #[test]
    fn diverging_members_are_excluded() {
        let t = FnTarget::new(1, |x| x[0], |_| vec![1e9]);
        let cfg = EnsembleConfig {
            members: 3,
            fit: PointFitConfig {
                optimizer: OptimizerConfig::sgd(1.0),
                ..PointFitConfig::new(10, 1)
            },
            weighting: MemberWeighting::Uniform,
        };
        assert!(fit_deep_ensemble(&t, |_| vec![0.0], &cfg).is_err());
    }

    #[test]
    fn equal_log_joints_give_uniform_weights() {
        let m = DiracMixture::posterior_weighted(vec![vec![0.0], vec![1.0], vec![2.0]], &[-3.5; 3]).unwrap();
        for w in m.weights() {
            assert!((w - 1.0 / 3.0).abs() < 1e-10);
        }
        let skew = DiracMixture::posterior_weighted(vec![vec![0.0], vec![1.0]], &[0.0, 2f64.ln()]).unwrap();
        assert!((skew.weights()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mixture_invariants() {
        assert!(DiracMixture::new(vec![], vec![]).is_err());
        assert!(DiracMixture::new(vec![vec![0.0]], vec![0.9]).is_err());
        assert!(DiracMixture::new(vec![vec![0.0], vec![1.0]], vec![1.0, 0.0]).is_err());
        assert!(DiracMixture::new(vec![vec![0.0], vec![1.0, 2.0]], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn mixture_pick_frequencies() {
        let m = DiracMixture::new(vec![vec![0.0], vec![1.0]], vec![0.25, 0.75]).unwrap();
        let p = Posterior::Ensemble(m);
        let mut r = rng(16);
        let n = 100_000;
        let ones = (0..n).filter(|_| p.draw_theta(&mut r)[0] == 1.0).count();
        assert!((ones as f64 / n as f64 - 0.75).abs() < 0.005);
        let single = Posterior::Ensemble(DiracMixture::uniform(vec![vec![4.0, 2.0]]).unwrap());
        assert!((0..100).all(|_| single.draw_theta(&mut r) == vec![4.0, 2.0]));
    }

    #[test]
    fn mixture_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DiracMixture::new(vec![vec![0.1, -2.0], vec![3.0, 1e-7]], vec![0.4, 0.6]).unwrap();
        m.save_dir(dir.path()).unwrap();
        assert_eq!(DiracMixture::load_dir(dir.path()).unwrap(), m);
    }

    #[test]
    fn swag_constant_trajectory_floors_variance() {
        let m = SwagMoments::from_iterates(&vec![vec![1.5, -2.0]; 10]).unwrap();
        assert_eq!(m.mean, vec![1.5, -2.0]);
        assert!(m.variance().iter().all(|v| *v == SWAG_VARIANCE_FLOOR));
        assert!(SwagMoments::from_iterates(&[vec![1.0]]).is_err());
    }

    #[test]
    fn swag_recovers_injected_moments() {
        let (mean, sd, n) = (2.0, 0.5, 4_000);
        let mut r = rng(17);
        let its: Vec<Vec<f64>> = (0..n).map(|_| vec![mean + sd * rng::standard_normal(&mut r)]).collect();
        let m = SwagMoments::from_iterates(&its).unwrap();
        let se_mean = sd / (n as f64).sqrt();
        let se_var = sd * sd * (2.0 / (n - 1) as f64).sqrt();
        assert!((m.mean[0] - mean).abs() < 3.0 * se_mean);
        assert!((m.variance()[0] - sd * sd).abs() < 3.0 * se_var);
    }

    #[test]
    fn swag_mean_finds_quadratic_mode() {
        let t = FnTarget::gaussian(vec![0.3, -1.2], vec![1.0, 0.5]);
        let cfg = SwagConfig::new(2_000, 0.01, 18);
        let m = fit_swag_diagonal(&t, &[3.0, 3.0], &cfg).unwrap();
        assert!((m.mean[0] - 0.3).abs() < 0.05 && (m.mean[1] + 1.2).abs() < 0.05);
        assert_eq!(m.count, cfg.n_collected());
    }

    #[test]
    fn swag_needs_two_iterates() {
        let t = FnTarget::standard_normal(1);
        let mut cfg = SwagConfig::new(20, 0.01, 1);
        cfg.collect_every = 15;
        assert!(matches!(fit_swag_diagonal(&t, &[0.0], &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn swag_json_round_trip() {
        let m = SwagMoments::from_iterates(&[vec![0.1, 0.2], vec![0.3, 0.7]]).unwrap();
        assert_eq!(SwagMoments::from_json(&m.to_json().unwrap()).unwrap(), m);
    }

    #[test]
    fn sample_store_draws_uniformly() {
        let t = FnTarget::standard_normal(1);
        let store = crate::mcmc::run_chain(
            &Kernel::Mh {
                proposal: Proposal::gaussian(1.0),
            },
            &t,
            &ChainConfig {
                burn_in: 0,
                ..ChainConfig::new(4, 1)
            },
            &[0.0],
        )
        .unwrap();
        let p = Posterior::Samples(store.clone());
        let mut r = rng(19);
        let n = 100_000;
        let mut counts = vec![0usize; store.len()];
        for _ in 0..n {
            let th = p.draw_theta(&mut r);
            // Repeated MH states share the slot of their first occurrence.
            let k = store.samples.iter().position(|s| *s == th).unwrap();
            counts[k] += 1;
        }
        let mut expected = vec![0.0; store.len()];
        for s in &store.samples {
            let k = store.samples.iter().position(|x| x == s).unwrap();
            expected[k] += 1.0 / store.len() as f64;
        }
        for (c, e) in counts.iter().zip(&expected) {
            assert!((*c as f64 / n as f64 - e).abs() < 0.005);
        }
    }

    #[test]
    fn every_posterior_kind_draws_finite_vectors() {
        let m = sinusoid_model(8);
        let spec = m.spec().clone();
        let d = spec.n_params();
        let theta = spec.init_fan_in(&mut rng(20));
        let store = crate::mcmc::run_chain(
            &Kernel::Mh {
                proposal: Proposal::gaussian(0.01),
            },
            &m,
            &ChainConfig::new(20, 2),
            &theta,
        )
        .unwrap();
        let kinds = vec![
            Posterior::Samples(store),
            Posterior::MeanField(MeanFieldGaussian::init(spec.clone(), &mut rng(21))),
            Posterior::Dropout {
                spec: spec.clone(),
                config: DropoutConfig::uniform(&spec, 0.5, 0.0),
                theta: theta.clone(),
            },
            Posterior::Ensemble(DiracMixture::uniform(vec![theta.clone(), vec![0.0; d]]).unwrap()),
            Posterior::Swag(SwagMoments::from_iterates(&[theta.clone(), vec![0.0; d]]).unwrap()),
        ];
        let mut r = rng(22);
        for p in &kinds {
            p.validate().unwrap();
            assert_eq!(p.dim(), d);
            for _ in 0..10_000 {
                let th = p.draw_theta(&mut r);
                assert_eq!(th.len(), d);
                assert!(th.iter().all(|v| v.is_finite()), "{}", p.kind());
            }
        }
    }
}
