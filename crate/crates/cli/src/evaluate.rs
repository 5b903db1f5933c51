//! Predictive evaluation of a fitted posterior on held-out data.
//!
//! Always reports `auc`, `curve_distance`, `ece` and `log_score`, plus
//! `brier` for classification or `mse` for regression. A metric that cannot
//! be computed is left out and its cause recorded; the calibration curve is
//! kept whenever it exists.

use std::collections::BTreeMap;

use serde::Serialize;

use bnn_core::approx::Posterior;
use bnn_core::calibration::{
    auc, binary_reliability, curve_distance, gaussian_log_score, ks_uniform, mse, regression_calibration, scoring_rules,
    top_label_ece, CalibrationCurve,
};
use bnn_core::data::{Dataset, Targets};
use bnn_core::network::MlpSpec;
use bnn_core::predictive::{sample_predictive_batch, summarize_classification, summarize_regression, Prediction};
use bnn_core::rng::Rng;
use bnn_core::{Error, Result};

use crate::artifacts::Metrics;
use crate::config::{EvaluationSection, ExtraMetric, StdevProbe};

/// Posterior draws used for moments without a closed form.
const MOMENT_DRAWS: usize = 10_000;

/// One line of `predictions.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictionRow {
    pub x: Vec<f64>,
    #[serde(flatten)]
    pub prediction: Prediction,
    pub y: Observed,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Observed {
    Real(Vec<f64>),
    Class(usize),
}

#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<PredictionRow>,
    pub curve: Option<CalibrationCurve>,
    /// Metric name to the reason it is missing.
    pub failures: BTreeMap<String, String>,
}

impl Evaluation {
    fn record(&mut self, name: &str, value: Result<f64>) {
        match value {
            Ok(v) if v.is_finite() => {
                self.metrics.insert(name.to_string(), v);
            }
            Ok(v) => {
                self.failures.insert(name.to_string(), format!("non-finite value {v}"));
            }
            Err(e) => {
                self.failures.insert(name.to_string(), e.to_string());
            }
        }
    }
}

/// What the evaluator needs to know about the observation model.
#[derive(Clone, Debug, PartialEq)]
pub enum Task {
    Regression { sigma_y: Vec<f64> },
    Classification,
}

/// Predictive metrics on `test`; errors only when no prediction can be made.
pub fn evaluate(
    posterior: &Posterior,
    spec: &MlpSpec,
    task: &Task,
    test: &Dataset,
    cfg: &EvaluationSection,
    rng: &mut Rng,
) -> Result<Evaluation> {
    let mut ev = Evaluation::default();
    if test.is_empty() {
        return Err(Error::Evaluation("the test set is empty".into()));
    }
    let samples = sample_predictive_batch(posterior, spec, &test.inputs, cfg.draws, rng)?;
    match (task, &test.targets) {
        (Task::Regression { sigma_y }, Targets::Real(ys)) => {
            let summaries = samples
                .iter()
                .map(|s| summarize_regression(s, Some(sigma_y)))
                .collect::<Result<Vec<_>>>()?;
            ev.predictions = summaries
                .iter()
                .zip(&test.inputs)
                .zip(ys)
                .map(|((s, x), y)| PredictionRow {
                    x: x.clone(),
                    prediction: s.into(),
                    y: Observed::Real(y.clone()),
                })
                .collect();
            ev.record("mse", mse(&summaries, ys));
            ev.record("log_score", gaussian_log_score(&summaries, ys));
            match regression_calibration(&summaries, ys) {
                Ok(rc) => {
                    let c = &rc.curve;
                    ev.record("auc", auc(c));
                    ev.record("curve_distance", curve_distance(c));
                    ev.record("ece", Ok(curve_deviation(c)));
                    if cfg.metrics.contains(&ExtraMetric::Ks) {
                        ev.record("ks", Ok(ks_uniform(&rc.p_hat)));
                    }
                    if cfg.metrics.contains(&ExtraMetric::Overconfidence) {
                        ev.record("overconfidence", Ok(c.overconfidence()));
                    }
                    ev.curve = Some(rc.curve);
                }
                Err(e) => {
                    for name in ["auc", "curve_distance", "ece"] {
                        ev.failures.insert(name.into(), e.to_string());
                    }
                }
            }
        }
        (Task::Classification, Targets::Class(labels)) => {
            let summaries = samples
                .iter()
                .map(|s| summarize_classification(s, None))
                .collect::<Result<Vec<_>>>()?;
            ev.predictions = summaries
                .iter()
                .zip(&test.inputs)
                .zip(labels)
                .map(|((s, x), y)| PredictionRow {
                    x: x.clone(),
                    prediction: s.into(),
                    y: Observed::Class(*y),
                })
                .collect();
            let probs: Vec<Vec<f64>> = summaries.iter().map(|s| s.p.clone()).collect();
            match scoring_rules(&probs, labels) {
                Ok(r) => {
                    ev.record("log_score", Ok(r.log_score));
                    ev.record("brier", Ok(r.brier));
                }
                Err(e) => {
                    ev.failures.insert("log_score".into(), e.to_string());
                    ev.failures.insert("brier".into(), e.to_string());
                }
            }
            ev.record("ece", top_label_ece(&probs, labels, cfg.ece_bins));
            if cfg.metrics.contains(&ExtraMetric::Accuracy) {
                let hits = summaries.iter().zip(labels).filter(|(s, y)| s.class == **y).count();
                ev.record("accuracy", Ok(hits as f64 / labels.len() as f64));
            }
            let (predicted, observed) = reliability_events(&probs, labels);
            match binary_reliability(&predicted, &observed, cfg.scheme) {
                Ok(c) => {
                    ev.record("auc", auc(&c));
                    ev.record("curve_distance", curve_distance(&c));
                    if cfg.metrics.contains(&ExtraMetric::Overconfidence) {
                        ev.record("overconfidence", Ok(c.overconfidence()));
                    }
                    ev.curve = Some(c);
                }
                Err(e) => {
                    ev.failures.insert("auc".into(), e.to_string());
                    ev.failures.insert("curve_distance".into(), e.to_string());
                }
            }
        }
        _ => return Err(Error::Config("test labels do not match the likelihood".into())),
    }
    if cfg.metrics.contains(&ExtraMetric::PosteriorMoments) {
        match posterior_moments(posterior, rng) {
            Ok((m, v)) => {
                ev.record("posterior_mean", Ok(m));
                ev.record("posterior_variance", Ok(v));
            }
            Err(e) => {
                ev.failures.insert("posterior_moments".into(), e.to_string());
            }
        }
    }
    if cfg.metrics.contains(&ExtraMetric::SamplerDiagnostics) {
        if let Posterior::Samples(s) = posterior {
            ev.record("acceptance_rate", Ok(s.acceptance_rate));
            ev.record("divergences", Ok(s.divergences as f64));
        }
    }
    if let Some(probe) = &cfg.stdev_probe {
        match (task, stdev_probe(posterior, spec, task, probe, cfg.draws, rng)) {
            (Task::Regression { .. }, Ok((inside, outside))) => {
                ev.record("stdev_in_range", Ok(inside));
                ev.record("stdev_out_of_range", Ok(outside));
            }
            (_, Err(e)) => {
                ev.failures.insert("stdev_probe".into(), e.to_string());
            }
            (Task::Classification, Ok(_)) => unreachable!("probe rejects classification"),
        }
    }
    Ok(ev)
}

/// Binary events for the reliability curve: the probability of class 1
/// with two classes, otherwise the top-label confidence against whether the
/// top label was right. Pooling every class would make the curve symmetric
/// about `(½, ½)` and its area trivially one half.
fn reliability_events(probs: &[Vec<f64>], labels: &[usize]) -> (Vec<f64>, Vec<f64>) {
    probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            if p.len() == 2 {
                (p[1], if y == 1 { 1.0 } else { 0.0 })
            } else {
                let k = bnn_core::predictive::argmax(p);
                (p[k], if k == y { 1.0 } else { 0.0 })
            }
        })
        .unzip()
}

/// Count-weighted mean `|p̂ − p̌|` over curve points.
fn curve_deviation(c: &CalibrationCurve) -> f64 {
    let total: usize = c.points.iter().map(|p| p.n).sum();
    c.points.iter().map(|p| p.n as f64 * (p.p_hat - p.p_check).abs()).sum::<f64>() / total.max(1) as f64
}

/// Mean and variance of a one-parameter posterior.
pub fn posterior_moments(posterior: &Posterior, rng: &mut Rng) -> Result<(f64, f64)> {
    if posterior.dim() != 1 {
        return Err(Error::Evaluation(format!(
            "posterior moments are reported for one-parameter models; this one has {}",
            posterior.dim()
        )));
    }
    Ok(match posterior {
        Posterior::Samples(s) => (s.mean()[0], s.variance()[0]),
        Posterior::MeanField(q) => (q.mu[0], q.sigma()[0].powi(2)),
        other => {
            let draws: Vec<f64> = (0..MOMENT_DRAWS).map(|_| other.draw_theta(rng)[0]).collect();
            let mean = draws.iter().sum::<f64>() / MOMENT_DRAWS as f64;
            let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (MOMENT_DRAWS - 1) as f64;
            (mean, var)
        }
    })
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<Vec<f64>> {
    if n == 1 {
        return vec![vec![0.5 * (lo + hi)]];
    }
    (0..n).map(|i| vec![lo + (hi - lo) * i as f64 / (n - 1) as f64]).collect()
}

/// Mean predictive stdev over the in-range grid and over the pooled
/// out-of-range grids.
fn stdev_probe(posterior: &Posterior, spec: &MlpSpec, task: &Task, probe: &StdevProbe, draws: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    let Task::Regression { sigma_y } = task else {
        return Err(Error::Config("the stdev probe needs a regression model".into()));
    };
    let inside = grid(probe.in_range[0], probe.in_range[1], probe.points);
    let outside: Vec<Vec<f64>> = probe.out_of_range.iter().flat_map(|r| grid(r[0], r[1], probe.points)).collect();
    let mut mean_sd = |xs: &[Vec<f64>]| -> Result<f64> {
        let samples = sample_predictive_batch(posterior, spec, xs, draws, rng)?;
        let mut total = 0.0;
        for s in &samples {
            total += summarize_regression(s, Some(sigma_y))?.stdev().iter().sum::<f64>() / sigma_y.len() as f64;
        }
        Ok(total / xs.len() as f64)
    };
    Ok((mean_sd(&inside)?, mean_sd(&outside)?))
}
