//! Distillation of a Bayesian teacher into a deterministic student.
//!
//! The student `q_ω(y|x)` is fitted by minimizing
//! `−(1/m) Σᵢ E_{p(y|x,θᵢ)}[log q_ω(y|x)]` averaged over unlabeled inputs,
//! with `θᵢ` drawn afresh from the teacher's posterior at every step. For
//! classification the expectation is the exact sum over classes, so the loss
//! is the cross-entropy from the teacher's mean predictive. For regression
//! the student head emits a mean and a log-variance per output and the
//! expectation is taken in closed form against each draw's Gaussian.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::approx::{Posterior, PointFitConfig};
use crate::data::{Dataset, Targets};
use crate::error::{ensure, Error, Result};
use crate::model::rows_tensor;
use crate::network::{Activation, MlpSpec};
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor};
use crate::vi::DIVERGENCE_BOUND;

/// Default teacher draws per query.
pub const DEFAULT_TEACHER_DRAWS: usize = 32;

/// Log-probabilities below this count as a zero student probability.
const ZERO_LOG_PROBABILITY: f64 = -700.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case")]
pub enum TeacherTask {
    Classification,
    /// Each draw predicts `N(NN_θ(x), diag(σ_y²))`.
    Regression { sigma_y: Vec<f64> },
}

/// A posterior together with the network it parameterizes.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub posterior: Posterior,
    pub spec: Arc<MlpSpec>,
    pub task: TeacherTask,
    /// Posterior draws per query.
    pub draws: usize,
}

impl Teacher {
    pub fn new(posterior: Posterior, spec: Arc<MlpSpec>, task: TeacherTask, draws: usize) -> Result<Self> {
        ensure!(draws >= 1, "a teacher needs at least one draw per query");
        posterior.validate()?;
        ensure!(
            posterior.dim() == spec.n_params(),
            "posterior has {} coordinates, network needs {}",
            posterior.dim(),
            spec.n_params()
        );
        match &task {
            TeacherTask::Classification => ensure!(spec.is_classifier(), "classification teacher needs a softmax head"),
            TeacherTask::Regression { sigma_y } => {
                ensure!(!spec.is_classifier(), "regression teacher cannot have a softmax head");
                ensure!(sigma_y.len() == spec.output_width(), "one noise scale per output");
                ensure!(sigma_y.iter().all(|s| *s > 0.0), "noise scales must be positive");
            }
        }
        Ok(Teacher {
            posterior,
            spec,
            task,
            draws,
        })
    }

    /// Width of the label space: classes or regression outputs.
    pub fn label_width(&self) -> usize {
        self.spec.output_width()
    }

    /// Summaries of `draws` posterior draws at every input.
    pub fn query(&self, xs: &[Vec<f64>], rng: &mut Rng) -> Result<TeacherTargets> {
        ensure!(!xs.is_empty(), "empty input batch");
        let k = self.label_width();
        let mut sum = vec![vec![0.0; k]; xs.len()];
        let mut sum_sq = vec![vec![0.0; k]; xs.len()];
        for _ in 0..self.draws {
            let theta = self.posterior.draw_theta(rng);
            for (i, x) in xs.iter().enumerate() {
                let out = self.spec.forward(&theta, x)?;
                for j in 0..k {
                    sum[i][j] += out[j];
                    sum_sq[i][j] += out[j] * out[j];
                }
            }
        }
        let m = self.draws as f64;
        Ok(match &self.task {
            TeacherTask::Classification => TeacherTargets::Classification {
                probs: sum
                    .into_iter()
                    .map(|s| {
                        let t: f64 = s.iter().sum();
                        s.into_iter().map(|v| v / t).collect()
                    })
                    .collect(),
            },
            TeacherTask::Regression { sigma_y } => {
                let mean: Vec<Vec<f64>> = sum.iter().map(|s| s.iter().map(|v| v / m).collect()).collect();
                let var = sum_sq
                    .iter()
                    .zip(&mean)
                    .map(|(sq, mu)| {
                        sq.iter()
                            .zip(mu)
                            .zip(sigma_y)
                            .map(|((q, u), s)| (q / m - u * u).max(0.0) + s * s)
                            .collect()
                    })
                    .collect();
                TeacherTargets::Regression { mean, var }
            }
        })
    }
}

/// What the student is fitted to on one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum TeacherTargets {
    /// Mean predictive probabilities per input.
    Classification { probs: Vec<Vec<f64>> },
    /// Per input and output: mean over draws of the predicted mean, and the
    /// spread of those means plus `σ_y²`.
    Regression { mean: Vec<Vec<f64>>, var: Vec<Vec<f64>> },
}

impl TeacherTargets {
    pub fn len(&self) -> usize {
        match self {
            TeacherTargets::Classification { probs } => probs.len(),
            TeacherTargets::Regression { mean, .. } => mean.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Smallest attainable loss: the mean entropy of the teacher's predictive
    /// for classification, of the moment-matched Gaussian for regression.
    pub fn entropy(&self) -> f64 {
        let n = self.len() as f64;
        match self {
            TeacherTargets::Classification { probs } => {
                probs
                    .iter()
                    .map(|p| -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>())
                    .sum::<f64>()
                    / n
            }
            TeacherTargets::Regression { var, .. } => {
                var.iter()
                    .map(|v| v.iter().map(|c| 0.5 * (2.0 * PI * std::f64::consts::E * c).ln()).sum::<f64>())
                    .sum::<f64>()
                    / n
            }
        }
    }
}

/// Loss value, its gradient in the student parameters and the number of
/// classes with teacher mass that the student gives zero probability.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    pub zero_mass: usize,
}

/// Checks that `student` has the head the teacher's task calls for.
pub fn check_student(teacher: &Teacher, student: &MlpSpec) -> Result<()> {
    ensure!(
        student.input_width() == teacher.spec.input_width(),
        "student takes {} inputs, teacher {}",
        student.input_width(),
        teacher.spec.input_width()
    );
    match teacher.task {
        TeacherTask::Classification => ensure!(
            student.is_classifier() && student.output_width() == teacher.label_width(),
            "student needs a {}-way softmax head",
            teacher.label_width()
        ),
        TeacherTask::Regression { .. } => {
            let last = student.layers().last().map(|l| l.activation);
            ensure!(
                last == Some(Activation::Identity) && student.output_width() == 2 * teacher.label_width(),
                "student needs an identity head of width {} (mean, log-variance per output)",
                2 * teacher.label_width()
            )
        }
    }
    Ok(())
}

/// Distillation loss of `theta` against fixed teacher targets at `xs`.
pub fn student_loss(student: &MlpSpec, theta: &[f64], xs: &[Vec<f64>], targets: &TeacherTargets) -> Result<DistillLoss> {
    ensure!(!xs.is_empty(), "empty input batch");
    ensure!(xs.len() == targets.len(), "{} inputs for {} targets", xs.len(), targets.len());
    ensure!(theta.len() == student.n_params(), "theta has {} entries, student needs {}", theta.len(), student.n_params());
    let n = xs.len();
    let mut tape = Tape::new();
    let t = tape.leaf(Tensor::vector(theta.to_vec()));
    let x = tape.constant(rows_tensor(xs));
    let mut zero_mass = 0;
    let loss = match targets {
        TeacherTargets::Classification { probs } => {
            let logits = student.graph(&mut tape, t, x, None, true);
            let log_q = tape.log_softmax_rows(logits);
            let lq = tape.value(log_q).data().to_vec();
            zero_mass = lq
                .iter()
                .zip(probs.iter().flatten())
                .filter(|(l, p)| **p > 0.0 && **l < ZERO_LOG_PROBABILITY)
                .count();
            let p = tape.constant(rows_tensor(probs));
            let weighted = tape.mul(log_q, p);
            let total = tape.sum(weighted);
            tape.scale(total, -1.0 / n as f64)
        }
        TeacherTargets::Regression { mean, var } => {
            let m = mean[0].len();
            let out = student.graph(&mut tape, t, x, None, false);
            let mut pick_mean = vec![0.0; 2 * m * m];
            let mut pick_logvar = vec![0.0; 2 * m * m];
            for j in 0..m {
                pick_mean[2 * j * m + j] = 1.0;
                pick_logvar[(2 * j + 1) * m + j] = 1.0;
            }
            let sm = tape.constant(Tensor::matrix(2 * m, m, pick_mean)?);
            let sv = tape.constant(Tensor::matrix(2 * m, m, pick_logvar)?);
            let mu = tape.matmul(out, sm);
            let log_var = tape.matmul(out, sv);
            let target = tape.constant(rows_tensor(mean));
            let spread = tape.constant(rows_tensor(var));
            let d = tape.sub(mu, target);
            let d2 = tape.square(d);
            let num = tape.add(d2, spread);
            let neg = tape.neg(log_var);
            let prec = tape.exp(neg);
            let quad = tape.mul(num, prec);
            let a = tape.sum(log_var);
            let b = tape.sum(quad);
            let both = tape.add(a, b);
            let per_point = tape.scale(both, 0.5 / n as f64);
            tape.offset(per_point, 0.5 * m as f64 * (2.0 * PI).ln())
        }
    };
    let value = tape.scalar(loss)?;
    let grad = tape.gradient(loss, &[t])?.remove(0).into_data();
    Ok(DistillLoss { value, grad, zero_mass })
}

/// Queries the teacher at `xs` and evaluates the student against it.
pub fn distillation_loss(teacher: &Teacher, student: &MlpSpec, theta: &[f64], xs: &[Vec<f64>], rng: &mut Rng) -> Result<DistillLoss> {
    check_student(teacher, student)?;
    let targets = teacher.query(xs, rng)?;
    let loss = student_loss(student, theta, xs, &targets)?;
    if loss.zero_mass > 0 {
        log::warn!("student assigns zero probability to {} teacher-supported classes", loss.zero_mass);
    }
    Ok(loss)
}

/// Student predictive at one input: class probabilities, or per-output
/// `(mean, variance)` pairs.
pub fn student_predict(student: &MlpSpec, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let out = student.forward(theta, x)?;
    if student.is_classifier() {
        return Ok(out);
    }
    Ok(out.chunks(2).flat_map(|c| [c[0], c[1].exp()]).collect())
}

/// Mean `KL(teacher ‖ student)` of the class distributions at `xs`.
pub fn mean_kl(targets: &TeacherTargets, student: &MlpSpec, theta: &[f64], xs: &[Vec<f64>]) -> Result<f64> {
    let TeacherTargets::Classification { probs } = targets else {
        return Err(Error::contract("KL evaluation is defined for classification"));
    };
    ensure!(xs.len() == probs.len() && !xs.is_empty(), "one target per input");
    let mut total = 0.0;
    for (x, p) in xs.iter().zip(probs) {
        let q = student.forward(theta, x)?;
        total += p
            .iter()
            .zip(&q)
            .filter(|(pv, _)| **pv > 0.0)
            .map(|(pv, qv)| pv * (pv.ln() - qv.max(f64::MIN_POSITIVE).ln()))
            .sum::<f64>();
    }
    Ok(total / xs.len() as f64)
}

/// Student training settings. `weight_decay` adds `λ‖ω‖²`; it is off by
/// default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(flatten)]
    pub fit: PointFitConfig,
    #[serde(default)]
    pub weight_decay: f64,
}

impl DistillConfig {
    pub fn new(iterations: usize, seed: u64) -> Self {
        DistillConfig {
            fit: PointFitConfig::new(iterations, seed),
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentFit {
    pub theta: Vec<f64>,
    pub trace: Vec<f64>,
}

/// Fits the student on unlabeled inputs, re-querying the teacher on every
/// minibatch.
pub fn train_student(teacher: &Teacher, student: &MlpSpec, inputs: &[Vec<f64>], cfg: &DistillConfig, init: &[f64]) -> Result<StudentFit> {
    check_student(teacher, student)?;
    cfg.fit.validate()?;
    ensure!(!inputs.is_empty(), "distillation needs inputs");
    ensure!(cfg.weight_decay >= 0.0, "weight decay must be nonnegative");
    ensure!(init.len() == student.n_params(), "init has {} entries, student needs {}", init.len(), student.n_params());
    let n = inputs.len();
    let batch_size = cfg.fit.batch_size.unwrap_or(n).min(n);
    let mut rng = rng::stream(cfg.fit.seed, "distill");
    let mut opt = cfg.fit.optimizer.build(init.len())?;
    let mut theta = init.to_vec();
    let mut trace = Vec::with_capacity(cfg.fit.iterations);
    for t in 0..cfg.fit.iterations {
        let batch: Vec<Vec<f64>> = if batch_size >= n {
            inputs.to_vec()
        } else {
            rng::sample_indices(&mut rng, n, batch_size).into_iter().map(|i| inputs[i].clone()).collect()
        };
        let targets = teacher.query(&batch, &mut rng)?;
        let mut loss = student_loss(student, &theta, &batch, &targets)?;
        if cfg.weight_decay > 0.0 {
            for (g, w) in loss.grad.iter_mut().zip(&theta) {
                *g += 2.0 * cfg.weight_decay * w;
            }
            loss.value += cfg.weight_decay * theta.iter().map(|w| w * w).sum::<f64>();
        }
        trace.push(loss.value);
        opt.step(&mut theta, &loss.grad, 1.0);
        if !loss.value.is_finite() || theta.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
            return Err(Error::Divergence {
                iteration: t,
                detail: "student parameters or loss left the finite region".into(),
                trace,
            });
        }
    }
    Ok(StudentFit { theta, trace })
}

/// Inputs labeled with the teacher's mean predictive probabilities.
pub fn soft_label_dataset(teacher: &Teacher, inputs: &[Vec<f64>], rng: &mut Rng) -> Result<Dataset> {
    ensure!(teacher.task == TeacherTask::Classification, "soft labels need a classification teacher");
    let TeacherTargets::Classification { probs } = teacher.query(inputs, rng)? else {
        unreachable!("classification teacher yields class targets")
    };
    Dataset::new("soft-labels", inputs.to_vec(), Targets::Soft(probs))
}
