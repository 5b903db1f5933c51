//! The end-to-end pipeline: data, model, fit, evaluate, distill, write.
//!
//! Randomness flows from the config seed through the named streams `data`,
//! `init`, `sampler` and `eval`; each stage draws only from its own stream,
//! so changing one stage's settings leaves the others' draws untouched.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::RngCore;
use rayon::prelude::*;

use bnn_core::approx::{
    dropout_train, fit_deep_ensemble, fit_map, fit_swag_diagonal, DropoutConfig, EnsembleConfig, PointFitConfig, Posterior,
    SwagConfig,
};
use bnn_core::data::{format_float, Dataset};
use bnn_core::distill::{mean_kl, student_loss, train_student, DistillConfig, Teacher, TeacherTask};
use bnn_core::mcmc::{run_chain, ChainConfig, Kernel, SampleStore, SgldConfig};
use bnn_core::model::{LogJointModel, LogTarget};
use bnn_core::network::{MlpSpec, ParamVector};
use bnn_core::rng::{self, Rng};
use bnn_core::vi::{
    bayes_by_backprop, last_layer_bbb, last_layer_partition, learn_prior_bbb, write_trace_csv, MeanFieldGaussian, ViConfig,
};

use crate::artifacts::{self, csv_bytes, Metrics, RunArtifacts, RunInfo};
use crate::config::{ChainSection, DistillSection, ExperimentConfig, FitSection, InitScheme, Method, ViSection};
use crate::error::{AtStage, StageError, StageResult};
use crate::evaluate::{evaluate, Task};

/// Softplus argument giving a numerically zero standard deviation; marks
/// point-estimated coordinates inside a mean-field posterior.
const POINT_RHO: f64 = -100.0;

/// Seeds of the named streams for one run.
#[derive(Clone, Copy, Debug)]
struct Streams {
    seed: u64,
}

impl Streams {
    fn data(&self, index: u64) -> Rng {
        rng::substream(self.seed, "data", index)
    }

    fn init(&self, index: u64) -> Rng {
        rng::substream(self.seed, "init", index)
    }

    /// Seed handed to a core fitter, one per use.
    fn sampler_seed(&self, index: u64) -> u64 {
        rng::substream(self.seed, "sampler", index).next_u64()
    }

    fn eval(&self) -> Rng {
        rng::stream(self.seed, "eval")
    }
}

/// Stream indices within `sampler` and `init`.
const FIT: u64 = 0;
const PRETRAIN: u64 = 1;
const DISTILL: u64 = 2;
const CHAIN_BASE: u64 = 100;

/// What a completed run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub artifacts: RunArtifacts,
    pub info: RunInfo,
    pub metrics: Metrics,
    pub posterior: Posterior,
}

/// The fitted posterior with its trace table.
struct Fitted {
    posterior: Posterior,
    trace: Vec<u8>,
    /// Noise scales learned during fitting, replacing the configured ones.
    sigma_y: Option<Vec<f64>>,
    metrics: Metrics,
    /// Per-chain stores, written separately.
    chains: Vec<SampleStore>,
}

/// Runs the configured pipeline, writing artifacts under `out`.
///
/// `base` resolves relative data paths. On a stage failure the artifacts
/// written so far are kept and the error names the stage.
pub fn run(cfg: &ExperimentConfig, base: &Path, out: &Path) -> StageResult<RunOutcome> {
    cfg.validate()?;
    let streams = Streams { seed: cfg.seed };
    let arts = RunArtifacts::create(out).at("write")?;
    // The echo reruns from any directory.
    arts.write(artifacts::CONFIG_FILE, cfg.resolved(base).to_json().as_bytes()).at("write")?;

    let data = cfg.data.load(base, cfg.seed).at("data")?;
    let (train, test) = match &cfg.evaluation.test {
        Some(src) => (data, src.load(base, streams.data(2).next_u64()).at("data")?),
        None if cfg.evaluation.test_fraction > 0.0 => data.split(cfg.evaluation.test_fraction, &mut streams.data(1)).at("data")?,
        None => (data.clone(), data),
    };
    arts.write(artifacts::TRAIN_FILE, train.to_csv_string().as_bytes()).at("write")?;
    arts.write(artifacts::TEST_FILE, test.to_csv_string().as_bytes()).at("write")?;
    let mut info = RunInfo {
        method: cfg.method.name().into(),
        posterior: String::new(),
        dataset: train.name.clone(),
        dataset_hash: data_hash(&train, &test),
        n_train: train.len(),
        n_test: test.len(),
        failures: Default::default(),
    };

    let spec = Arc::new(cfg.model.network.clone());
    let model = LogJointModel::new(
        spec.clone(),
        cfg.model.prior.build().at("model")?,
        cfg.model.likelihood.build(&spec).at("model")?,
        train.clone(),
    )
    .at("model")?;

    let fitted = fit(cfg, &model, &streams);
    let fitted = match fitted {
        Ok(f) => f,
        Err(e) => {
            info.failures.insert(e.stage.into(), e.source.to_string());
            let _ = arts.write_json(artifacts::RUN_FILE, &info);
            if let bnn_core::Error::Divergence { trace, .. } = &e.source {
                let _ = arts.write(artifacts::TRACE_FILE, &table(&["iteration", "objective"], trace.iter().enumerate().map(|(i, v)| vec![i as f64, *v])));
            }
            return Err(e);
        }
    };
    info.posterior = fitted.posterior.kind().into();
    arts.write(artifacts::TRACE_FILE, &fitted.trace).at("write")?;
    write_posterior(&arts, &fitted, &spec).at("write")?;

    let task = match &cfg.model.likelihood {
        crate::config::LikelihoodConfig::Gaussian { sigma_y } => Task::Regression {
            sigma_y: fitted.sigma_y.clone().unwrap_or_else(|| sigma_y.clone()),
        },
        crate::config::LikelihoodConfig::Categorical => Task::Classification,
    };
    let mut eval_rng = streams.eval();
    let mut metrics = fitted.metrics.clone();
    let evaluation = evaluate(&fitted.posterior, &spec, &task, &test, &cfg.evaluation, &mut eval_rng);
    let evaluation = match evaluation {
        Ok(ev) => ev,
        Err(e) => {
            info.failures.insert("evaluate".into(), e.to_string());
            arts.write_json(artifacts::METRICS_FILE, &metrics).at("write")?;
            arts.write_json(artifacts::RUN_FILE, &info).at("write")?;
            return Err(StageError::new("evaluate", e));
        }
    };
    metrics.extend(evaluation.metrics.clone());
    for (k, v) in &evaluation.failures {
        log::warn!("metric `{k}` unavailable: {v}");
        info.failures.insert(format!("metric:{k}"), v.clone());
    }
    if let Some(curve) = &evaluation.curve {
        let bytes = csv_bytes(|b| curve.write_csv(b)).at("write")?;
        arts.write(artifacts::CURVE_FILE, &bytes).at("write")?;
    }
    arts.write_json(artifacts::PREDICTIONS_FILE, &evaluation.predictions).at("write")?;

    let distilled = match &cfg.distill {
        Some(d) => distill(cfg, d, &fitted.posterior, &spec, &task, (&train, &test, base), &streams, &mut eval_rng, &arts),
        None => Ok(Metrics::new()),
    };
    let result = match distilled {
        Ok(m) => {
            metrics.extend(m);
            Ok(())
        }
        Err(e) => {
            info.failures.insert(e.stage.into(), e.source.to_string());
            Err(e)
        }
    };
    arts.write_json(artifacts::METRICS_FILE, &metrics).at("write")?;
    arts.write_json(artifacts::RUN_FILE, &info).at("write")?;
    result?;
    Ok(RunOutcome {
        artifacts: arts,
        info,
        metrics,
        posterior: fitted.posterior,
    })
}

/// Hash of the training and test CSVs together.
fn data_hash(train: &Dataset, test: &Dataset) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(train.content_hash().as_bytes());
    h.update(test.content_hash().as_bytes());
    hex::encode(h.finalize())
}

/// CSV with a header and numeric rows.
fn table(header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for row in rows {
        w.write_record(row.iter().map(|v| format_float(*v))).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

fn initial_theta(spec: &MlpSpec, scheme: InitScheme, rng: &mut Rng) -> Vec<f64> {
    match scheme {
        InitScheme::FanIn => spec.init_fan_in(rng),
        InitScheme::Zeros => vec![0.0; spec.n_params()],
    }
}

fn point_fit(f: &FitSection, seed: u64) -> PointFitConfig {
    PointFitConfig {
        iterations: f.iterations,
        optimizer: f.optimizer.clone(),
        batch_size: f.batch_size,
        seed,
    }
}

fn vi_config(v: &ViSection, seed: u64) -> ViConfig {
    ViConfig {
        iterations: v.iterations,
        optimizer: v.optimizer.clone(),
        batch_size: v.batch_size,
        mc_samples: v.mc_samples,
        elbo_scaling: v.elbo_scaling.clone(),
        final_lr_fraction: v.final_lr_fraction,
        seed,
    }
}

fn fit(cfg: &ExperimentConfig, model: &LogJointModel, streams: &Streams) -> StageResult<Fitted> {
    let spec = model.spec().clone();
    let fitted = |posterior, trace| Fitted {
        posterior,
        trace,
        sigma_y: None,
        metrics: Metrics::new(),
        chains: Vec::new(),
    };
    match &cfg.method {
        Method::Mh { proposal, chain } => sample(&Kernel::Mh { proposal: proposal.clone() }, chain, model, streams),
        Method::Hmc { hmc, chain } => sample(&Kernel::Hmc(hmc.clone()), chain, model, streams),
        Method::Sgld { schedule, batch_size, chain } => {
            let kernel = Kernel::Sgld(SgldConfig {
                schedule: schedule.clone(),
                batch_size: *batch_size,
                noise: true,
            });
            sample(&kernel, chain, model, streams)
        }
        Method::Bbb { vi } => {
            let q0 = initial_q(&spec, vi, streams).at("train")?;
            let r = bayes_by_backprop(model, &q0, &vi_config(vi, streams.sampler_seed(FIT))).at("train")?;
            let trace = csv_bytes(|b| write_trace_csv(&r.trace, b)).at("train")?;
            Ok(fitted(Posterior::MeanField(r.q), trace))
        }
        Method::BbbPrior {
            vi,
            learnable,
            hyper_optimizer,
        } => {
            let q0 = initial_q(&spec, vi, streams).at("train")?;
            let r = learn_prior_bbb(model, learnable, &q0, Some(hyper_optimizer.clone()), &vi_config(vi, streams.sampler_seed(FIT)))
                .at("train")?;
            let trace = csv_bytes(|b| write_trace_csv(&r.trace, b)).at("train")?;
            let xi = r.xi.clone().unwrap_or_default();
            let mut it = xi.iter();
            let mut out = fitted(Posterior::MeanField(r.q), trace);
            if learnable.log_prior_sigma.is_some() {
                let v = it.next().expect("prior scale in xi");
                out.metrics.insert("learned_prior_sigma".into(), v.exp());
            }
            if let Some(noise) = &learnable.log_noise {
                let s: Vec<f64> = noise.iter().map(|_| it.next().expect("noise in xi").exp()).collect();
                for (j, v) in s.iter().enumerate() {
                    out.metrics.insert(format!("learned_sigma_y_{j}"), *v);
                }
                out.sigma_y = Some(s);
            }
            Ok(out)
        }
        Method::Dropout { keep, weight_decay, fit: f } => {
            let dropout = DropoutConfig::uniform(&spec, *keep, *weight_decay);
            let init = spec.init_fan_in(&mut streams.init(FIT));
            let r = dropout_train(model, &dropout, &point_fit(f, streams.sampler_seed(FIT)), &init).at("train")?;
            let trace = table(&["iteration", "objective"], r.trace.iter().enumerate().map(|(i, v)| vec![i as f64, *v]));
            Ok(fitted(
                Posterior::Dropout {
                    spec: spec.clone(),
                    config: dropout,
                    theta: r.theta,
                },
                trace,
            ))
        }
        Method::Ensemble { members, fit: f, weighting } => {
            let ec = EnsembleConfig {
                members: *members,
                fit: point_fit(f, streams.sampler_seed(FIT)),
                weighting: *weighting,
            };
            let init_seed = streams.init(FIT).next_u64();
            let r = fit_deep_ensemble(model, |r: &mut Rng| spec.init_fan_in(&mut rng::substream(init_seed, "member", r.next_u64())), &ec)
                .at("train")?;
            let rows = r
                .mixture
                .members()
                .iter()
                .zip(r.mixture.weights())
                .enumerate()
                .map(|(i, (m, w))| Ok(vec![i as f64, *w, model.log_density(m)?]))
                .collect::<bnn_core::Result<Vec<_>>>()
                .at("train")?;
            let mut out = fitted(Posterior::Ensemble(r.mixture), table(&["member", "weight", "log_joint"], rows));
            out.metrics.insert("excluded_members".into(), r.excluded as f64);
            Ok(out)
        }
        Method::Swag {
            iterations,
            learning_rate,
            warmup_fraction,
            collect_every,
            batch_size,
            pretrain,
        } => {
            let mut init = spec.init_fan_in(&mut streams.init(FIT));
            if let Some(p) = pretrain {
                let pc = point_fit(p, streams.sampler_seed(PRETRAIN));
                init = fit_map(model, &init, &pc, &mut rng::stream(pc.seed, "pretrain")).at("train")?;
            }
            let sc = SwagConfig {
                iterations: *iterations,
                learning_rate: *learning_rate,
                warmup_fraction: *warmup_fraction,
                collect_every: *collect_every,
                batch_size: *batch_size,
                seed: streams.sampler_seed(FIT),
            };
            let moments = fit_swag_diagonal(model, &init, &sc).at("train")?;
            let at_mean = model.log_density(&moments.mean).at("train")?;
            let trace = table(&["collected", "log_joint_at_mean"], [vec![moments.count as f64, at_mean]]);
            Ok(fitted(Posterior::Swag(moments), trace))
        }
        Method::LastLayer {
            vi,
            bayes_layers,
            pretrain,
            feature_optimizer,
        } => {
            let partition = last_layer_partition(&spec, *bayes_layers).at("train")?;
            let pc = point_fit(pretrain, streams.sampler_seed(PRETRAIN));
            let start = spec.init_fan_in(&mut streams.init(FIT));
            let map = fit_map(model, &start, &pc, &mut rng::stream(pc.seed, "pretrain")).at("train")?;
            let psi0 = &map[partition.deterministic.clone()];
            let tail = map[partition.variational.clone()].to_vec();
            let q0 = MeanFieldGaussian::from_sigma(tail.clone(), &vec![vi.init_sigma; tail.len()]).at("train")?;
            let r = last_layer_bbb(model, &partition, psi0, &q0, feature_optimizer.clone(), &vi_config(vi, streams.sampler_seed(FIT)))
                .at("train")?;
            let psi = r.deterministic.clone().unwrap_or_else(|| psi0.to_vec());
            let mut mu = psi.clone();
            mu.extend_from_slice(&r.q.mu);
            let mut rho = vec![POINT_RHO; psi.len()];
            rho.extend_from_slice(&r.q.rho);
            let q = MeanFieldGaussian::new(mu, rho).at("train")?;
            let trace = csv_bytes(|b| write_trace_csv(&r.trace, b)).at("train")?;
            Ok(fitted(Posterior::MeanField(q), trace))
        }
    }
}

fn initial_q(spec: &Arc<MlpSpec>, vi: &ViSection, streams: &Streams) -> bnn_core::Result<MeanFieldGaussian> {
    let mu = spec.init_fan_in(&mut streams.init(FIT));
    let sigma = vec![vi.init_sigma; mu.len()];
    MeanFieldGaussian::from_sigma(mu, &sigma)
}

/// Runs `chains` independent chains in parallel and pools their samples.
fn sample(kernel: &Kernel, chain: &ChainSection, model: &LogJointModel, streams: &Streams) -> StageResult<Fitted> {
    kernel.validate(model.dim()).at("train")?;
    let stores = (0..chain.chains as u64)
        .into_par_iter()
        .map(|c| {
            let cc = ChainConfig {
                n_samples: chain.n_samples,
                burn_in: chain.burn_in.unwrap_or(chain.n_samples / 5),
                thinning: chain.thinning,
                seed: streams.sampler_seed(CHAIN_BASE + c),
            };
            cc.validate()?;
            let init = initial_theta(model.spec(), chain.init, &mut streams.init(CHAIN_BASE + c));
            run_chain(kernel, model, &cc, &init)
        })
        .collect::<bnn_core::Result<Vec<_>>>()
        .at("train")?;
    let mut pooled = stores[0].clone();
    for s in &stores[1..] {
        pooled.samples.extend_from_slice(&s.samples);
        pooled.log_joint.extend_from_slice(&s.log_joint);
        pooled.divergences += s.divergences;
    }
    pooled.acceptance_rate = stores.iter().map(|s| s.acceptance_rate).sum::<f64>() / stores.len() as f64;
    let trace = table(
        &["chain", "sample", "log_joint"],
        stores
            .iter()
            .enumerate()
            .flat_map(|(c, s)| s.log_joint.iter().enumerate().map(move |(i, l)| vec![c as f64, i as f64, *l])),
    );
    Ok(Fitted {
        posterior: Posterior::Samples(pooled),
        trace,
        sigma_y: None,
        metrics: Metrics::new(),
        chains: stores,
    })
}

fn write_posterior(arts: &RunArtifacts, fitted: &Fitted, spec: &Arc<MlpSpec>) -> bnn_core::Result<()> {
    arts.write_dir(artifacts::POSTERIOR_DIR, |dir| {
        match &fitted.posterior {
            Posterior::Samples(_) => {
                for (c, s) in fitted.chains.iter().enumerate() {
                    s.save(&dir.join(format!("chain_{c:02}.json")), &dir.join(format!("chain_{c:02}.csv")))?;
                }
            }
            Posterior::MeanField(q) => fs::write(dir.join("mean_field.json"), q.to_json())?,
            Posterior::Dropout { config, theta, .. } => {
                fs::write(dir.join("network.json"), ParamVector::new(spec.clone(), theta.clone())?.to_json())?;
                fs::write(dir.join("dropout.json"), serde_json::to_string_pretty(config)?)?;
            }
            Posterior::Ensemble(m) => m.save_dir(dir)?,
            Posterior::Swag(s) => fs::write(dir.join("swag.json"), s.to_json()?)?,
        }
        Ok(())
    })
}

#[allow(clippy::too_many_arguments)]
fn distill(
    cfg: &ExperimentConfig,
    d: &DistillSection,
    posterior: &Posterior,
    spec: &Arc<MlpSpec>,
    task: &Task,
    (train, test, base): (&Dataset, &Dataset, &Path),
    streams: &Streams,
    eval_rng: &mut Rng,
    arts: &RunArtifacts,
) -> StageResult<Metrics> {
    let teacher_task = match task {
        Task::Classification => TeacherTask::Classification,
        Task::Regression { sigma_y } => TeacherTask::Regression { sigma_y: sigma_y.clone() },
    };
    let teacher = Teacher::new(posterior.clone(), spec.clone(), teacher_task, d.teacher_draws).at("distill")?;
    let inputs = match &d.inputs {
        Some(src) => src.load(base, streams.data(3).next_u64()).at("distill")?.inputs,
        None => train.inputs.clone(),
    };
    let student = &d.student;
    let dc = DistillConfig {
        fit: point_fit(&d.fit, streams.sampler_seed(DISTILL)),
        weight_decay: d.weight_decay,
    };
    let init = student.init_fan_in(&mut streams.init(DISTILL));
    let fit = train_student(&teacher, student, &inputs, &dc, &init).at("distill")?;
    let pv = ParamVector::new(Arc::new(student.clone()), fit.theta.clone()).at("distill")?;
    arts.write(artifacts::STUDENT_FILE, pv.to_json().as_bytes()).at("write")?;

    let mut exact = teacher.clone();
    exact.draws = cfg.evaluation.draws;
    let targets = exact.query(&test.inputs, eval_rng).at("distill")?;
    let held_out = student_loss(student, &fit.theta, &test.inputs, &targets).at("distill")?;
    let mut m = Metrics::new();
    m.insert("distill_test_loss".into(), held_out.value);
    m.insert("distill_teacher_entropy".into(), targets.entropy());
    if matches!(task, Task::Classification) {
        m.insert("distill_kl".into(), mean_kl(&targets, student, &fit.theta, &test.inputs).at("distill")?);
    }
    Ok(m)
}

/// Generates a dataset and writes it as CSV.
pub fn generate(cfg: &crate::config::GenerateConfig, out: &Path) -> StageResult<std::path::PathBuf> {
    let data = cfg.generator.generate(cfg.seed).at("data")?;
    let path = if out.extension().is_some_and(|e| e == "csv") {
        out.to_path_buf()
    } else {
        out.join(format!("{}.csv", cfg.generator.name()))
    };
    artifacts::write_atomic(&path, data.to_csv_string().as_bytes()).at("write")?;
    Ok(path)
}
