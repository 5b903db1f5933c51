//! Experiment configuration.
//!
//! One JSON document names the model, exactly one inference method with its
//! hyperparameters, the data source, the evaluation and the seed. Unknown
//! keys are rejected everywhere. Seeds inside the core configs are not part
//! of the schema; they are derived from the single top-level seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use bnn_core::approx::MemberWeighting;
use bnn_core::calibration::{EventScheme, DEFAULT_ECE_BINS};
use bnn_core::data::{Dataset, Generator};
use bnn_core::distill::DEFAULT_TEACHER_DRAWS;
use bnn_core::mcmc::{HmcConfig, Proposal, StepSchedule};
use bnn_core::model::{Likelihood, Prior};
use bnn_core::network::MlpSpec;
use bnn_core::optim::OptimizerConfig;
use bnn_core::vi::{ElboScaling, LearnablePrior, INITIAL_SIGMA};

use crate::error::{AtStage, StageError, StageResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub method: Method,
    pub data: DataSource,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub network: MlpSpec,
    pub prior: PriorConfig,
    pub likelihood: LikelihoodConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PriorConfig {
    /// `θ ~ N(0, σ² I)`.
    Isotropic { sigma: f64 },
    /// `p(θ) ∝ exp(−λ‖θ‖²)`.
    L2 { lambda: f64 },
    Flat,
}

impl PriorConfig {
    pub fn build(&self) -> bnn_core::Result<Prior> {
        match *self {
            PriorConfig::Isotropic { sigma } => Prior::isotropic(sigma),
            PriorConfig::L2 { lambda } => {
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(bnn_core::Error::Config(format!("l2 weight must be nonnegative, got {lambda}")));
                }
                Ok(Prior::l2(lambda))
            }
            PriorConfig::Flat => Ok(Prior::flat()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LikelihoodConfig {
    Gaussian { sigma_y: Vec<f64> },
    /// Class count taken from the network's softmax width.
    Categorical,
}

impl LikelihoodConfig {
    pub fn build(&self, spec: &MlpSpec) -> bnn_core::Result<Likelihood> {
        match self {
            LikelihoodConfig::Gaussian { sigma_y } => Likelihood::gaussian(sigma_y.clone()),
            LikelihoodConfig::Categorical => Likelihood::categorical(spec.output_width()),
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, LikelihoodConfig::Categorical)
    }
}

/// How the chain is started and how long it runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSection {
    /// Total transitions per chain, burn-in included.
    pub n_samples: usize,
    /// Defaults to a fifth of `n_samples`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    #[serde(default = "one")]
    pub thinning: usize,
    /// Independent chains, pooled; run in parallel.
    #[serde(default = "one")]
    pub chains: usize,
    #[serde(default)]
    pub init: InitScheme,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// `N(0, 1/fan_in)` weights, zero biases.
    #[default]
    FanIn,
    Zeros,
}

/// Variational training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViSection {
    pub iterations: usize,
    #[serde(default = "default_adam")]
    pub optimizer: OptimizerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default = "one")]
    pub mc_samples: usize,
    #[serde(default)]
    pub elbo_scaling: ElboScaling,
    #[serde(default = "default_final_lr")]
    pub final_lr_fraction: f64,
    /// Initial standard deviation of every variational factor.
    #[serde(default = "default_init_sigma")]
    pub init_sigma: f64,
}

/// Point-estimate optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub iterations: usize,
    #[serde(default = "default_adam")]
    pub optimizer: OptimizerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

/// The inference method; exactly one per experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Method {
    Mh {
        proposal: Proposal,
        chain: ChainSection,
    },
    Hmc {
        hmc: HmcConfig,
        chain: ChainSection,
    },
    Sgld {
        schedule: StepSchedule,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        batch_size: Option<usize>,
        chain: ChainSection,
    },
    Bbb {
        vi: ViSection,
    },
    /// Bayes-by-backprop with learned prior and noise scales.
    BbbPrior {
        vi: ViSection,
        learnable: LearnablePrior,
        #[serde(default = "default_hyper_optimizer")]
        hyper_optimizer: OptimizerConfig,
    },
    Dropout {
        /// Keep probability of every layer's inputs.
        keep: f64,
        #[serde(default)]
        weight_decay: f64,
        fit: FitSection,
    },
    Ensemble {
        members: usize,
        fit: FitSection,
        #[serde(default)]
        weighting: MemberWeighting,
    },
    Swag {
        iterations: usize,
        learning_rate: f64,
        #[serde(default = "default_warmup")]
        warmup_fraction: f64,
        #[serde(default = "default_collect_every")]
        collect_every: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        batch_size: Option<usize>,
        /// MAP steps before the constant-rate trajectory starts.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pretrain: Option<FitSection>,
    },
    /// Variational trailing layers over point-estimated leading layers.
    LastLayer {
        vi: ViSection,
        #[serde(default = "one")]
        bayes_layers: usize,
        /// MAP fit of the whole network that initializes the leading layers.
        pretrain: FitSection,
        /// Keep training the leading layers during VI; `None` freezes them.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        feature_optimizer: Option<OptimizerConfig>,
    },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Mh { .. } => "mh",
            Method::Hmc { .. } => "hmc",
            Method::Sgld { .. } => "sgld",
            Method::Bbb { .. } => "bbb",
            Method::BbbPrior { .. } => "bbb-prior",
            Method::Dropout { .. } => "dropout",
            Method::Ensemble { .. } => "ensemble",
            Method::Swag { .. } => "swag",
            Method::LastLayer { .. } => "last-layer",
        }
    }
}

/// Where the labeled data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// Dataset CSV; relative paths resolve against the config file.
    Csv { path: PathBuf },
    Generator(Generator),
}

impl DataSource {
    /// Loads or generates the dataset. Generators draw from `seed`.
    pub fn load(&self, base: &Path, seed: u64) -> bnn_core::Result<Dataset> {
        match self {
            DataSource::Csv { path } => Dataset::read_csv_file(&base.join(path)),
            DataSource::Generator(g) => g.generate(seed),
        }
    }

    fn resolve(&mut self, base: &Path) {
        if let DataSource::Csv { path } = self {
            let joined = base.join(&*path);
            *path = std::path::absolute(&joined).unwrap_or(joined);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    /// Separate test data; when absent, `test_fraction` of the data is held out.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<DataSource>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Posterior draws per test input.
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default)]
    pub scheme: EventScheme,
    #[serde(default = "default_ece_bins")]
    pub ece_bins: usize,
    /// Optional metrics beyond the always-reported set.
    #[serde(default)]
    pub metrics: Vec<ExtraMetric>,
    /// Input intervals for the in-range versus out-of-range stdev check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stdev_probe: Option<StdevProbe>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            test: None,
            test_fraction: default_test_fraction(),
            draws: default_draws(),
            scheme: EventScheme::default(),
            ece_bins: default_ece_bins(),
            metrics: Vec::new(),
            stdev_probe: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtraMetric {
    /// Posterior mean and variance of a one-parameter model.
    PosteriorMoments,
    /// KS statistic of the regression chi-square probabilities.
    Ks,
    Overconfidence,
    Accuracy,
    /// Acceptance rate and divergences of sampling methods.
    SamplerDiagnostics,
}

/// Grids over 1-D inputs on which mean predictive stdev is compared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StdevProbe {
    pub in_range: [f64; 2],
    pub out_of_range: Vec<[f64; 2]>,
    #[serde(default = "default_probe_points")]
    pub points: usize,
}

/// Distillation of the fitted posterior into a student network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub student: MlpSpec,
    pub fit: FitSection,
    #[serde(default = "default_teacher_draws")]
    pub teacher_draws: usize,
    #[serde(default)]
    pub weight_decay: f64,
    /// Unlabeled inputs; defaults to the training inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<DataSource>,
}

fn one() -> usize {
    1
}

fn default_adam() -> OptimizerConfig {
    OptimizerConfig::adam(0.01)
}

fn default_hyper_optimizer() -> OptimizerConfig {
    OptimizerConfig::adam(0.01)
}

fn default_final_lr() -> f64 {
    0.1
}

fn default_init_sigma() -> f64 {
    INITIAL_SIGMA
}

fn default_warmup() -> f64 {
    0.5
}

fn default_collect_every() -> usize {
    10
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_draws() -> usize {
    100
}

fn default_ece_bins() -> usize {
    DEFAULT_ECE_BINS
}

fn default_probe_points() -> usize {
    50
}

fn default_teacher_draws() -> usize {
    DEFAULT_TEACHER_DRAWS
}

impl ExperimentConfig {
    /// Copy with every CSV path made absolute against `base`.
    pub fn resolved(&self, base: &Path) -> Self {
        let mut cfg = self.clone();
        cfg.data.resolve(base);
        if let Some(t) = cfg.evaluation.test.as_mut() {
            t.resolve(base);
        }
        if let Some(i) = cfg.distill.as_mut().and_then(|d| d.inputs.as_mut()) {
            i.resolve(base);
        }
        cfg
    }

    pub fn from_json(s: &str) -> StageResult<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s).at("config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> StageResult<Self> {
        let text = std::fs::read_to_string(path).at("config")?;
        ExperimentConfig::from_json(&text)
    }

    /// Canonical echo written next to the run's artifacts.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Checks the cross-section constraints serde cannot express.
    pub fn validate(&self) -> StageResult<()> {
        let bad = |msg: String| Err(StageError::config("config", msg));
        let spec = &self.model.network;
        let classification = self.model.likelihood.is_classification();
        if classification != spec.is_classifier() {
            return bad("categorical likelihood and a softmax output layer go together".into());
        }
        self.model.prior.build().at("config")?;
        self.model.likelihood.build(spec).at("config")?;
        let ev = &self.evaluation;
        if !(0.0..1.0).contains(&ev.test_fraction) {
            return bad(format!("test_fraction must lie in [0, 1), got {}", ev.test_fraction));
        }
        if ev.draws < 2 {
            return bad("evaluation needs at least 2 posterior draws per input".into());
        }
        if ev.ece_bins == 0 {
            return bad("ece_bins must be positive".into());
        }
        ev.scheme.validate().at("config")?;
        if classification && ev.scheme == EventScheme::ChiSquare {
            return bad("the chi-square scheme applies to regression".into());
        }
        if let Some(p) = &ev.stdev_probe {
            if spec.input_width() != 1 {
                return bad("stdev_probe needs a one-dimensional input".into());
            }
            if p.points < 1 || p.out_of_range.is_empty() {
                return bad("stdev_probe needs points and at least one out-of-range interval".into());
            }
        }
        match &self.method {
            Method::Mh { chain, .. } | Method::Hmc { chain, .. } | Method::Sgld { chain, .. } => {
                if chain.chains == 0 {
                    return bad("chains must be at least 1".into());
                }
            }
            Method::BbbPrior { learnable, .. } => {
                if learnable.log_prior_sigma.is_some() && !matches!(self.model.prior, PriorConfig::Isotropic { .. }) {
                    return bad("a learnable prior scale needs an isotropic prior".into());
                }
                if learnable.log_noise.is_some() && classification {
                    return bad("learnable noise needs a gaussian likelihood".into());
                }
            }
            Method::Dropout { keep, .. } => {
                if !(*keep > 0.0 && *keep <= 1.0) {
                    return bad(format!("keep probability must lie in (0, 1], got {keep}"));
                }
            }
            Method::Ensemble { members, .. } => {
                if *members == 0 {
                    return bad("an ensemble needs at least one member".into());
                }
            }
            _ => {}
        }
        if let Some(d) = &self.distill {
            if d.teacher_draws == 0 {
                return bad("teacher_draws must be positive".into());
            }
        }
        Ok(())
    }
}

/// Dataset generation request for the `generate` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub seed: u64,
    pub generator: Generator,
}
