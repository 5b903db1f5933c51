//! Posterior-predictive marginalization.
//!
//! A posterior is pushed through the network by Monte Carlo: draw `θ`, run
//! the forward pass, repeat. Regression summaries average outputs and take
//! their sample covariance (the epistemic part; observation noise is added
//! only on request). Classification summaries average probability vectors
//! and decide by argmax or by minimum expected cost.

use serde::{Deserialize, Serialize};

use crate::approx::Posterior;
use crate::error::{ensure, Result};
use crate::network::MlpSpec;
use crate::rng::Rng;

/// Tolerance on `Σ p = 1` for sampled probability vectors.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// Network outputs at one input, one row per posterior draw.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSamples {
    pub outputs: Vec<Vec<f64>>,
    pub source: String,
    pub x: Vec<f64>,
}

impl PredictiveSamples {
    pub fn new(outputs: Vec<Vec<f64>>, source: impl Into<String>, x: Vec<f64>) -> Result<Self> {
        ensure!(!outputs.is_empty(), "no predictive samples");
        let k = outputs[0].len();
        ensure!(outputs.iter().all(|o| o.len() == k), "samples differ in width");
        ensure!(
            outputs.iter().flatten().all(|v| v.is_finite()),
            "predictive samples must be finite"
        );
        Ok(PredictiveSamples {
            outputs,
            source: source.into(),
            x,
        })
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn width(&self) -> usize {
        self.outputs[0].len()
    }
}

/// `n_draws` forward passes at `x`, each under a fresh posterior draw.
pub fn sample_predictive(posterior: &Posterior, spec: &MlpSpec, x: &[f64], n_draws: usize, rng: &mut Rng) -> Result<PredictiveSamples> {
    Ok(sample_predictive_batch(posterior, spec, &[x.to_vec()], n_draws, rng)?.remove(0))
}

/// Predictive samples at several inputs sharing the same `θ` draws.
pub fn sample_predictive_batch(
    posterior: &Posterior,
    spec: &MlpSpec,
    xs: &[Vec<f64>],
    n_draws: usize,
    rng: &mut Rng,
) -> Result<Vec<PredictiveSamples>> {
    ensure!(n_draws >= 1, "need at least one draw");
    posterior.validate()?;
    ensure!(
        posterior.dim() == spec.n_params(),
        "posterior has {} coordinates, network needs {}",
        posterior.dim(),
        spec.n_params()
    );
    let mut per_input: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n_draws); xs.len()];
    for _ in 0..n_draws {
        let theta = posterior.draw_theta(rng);
        for (acc, x) in per_input.iter_mut().zip(xs) {
            acc.push(spec.forward(&theta, x)?);
        }
    }
    per_input
        .into_iter()
        .zip(xs)
        .map(|(outputs, x)| PredictiveSamples::new(outputs, posterior.kind(), x.clone()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionSummary {
    pub mean: Vec<f64>,
    /// Epistemic covariance of the network output.
    pub cov: Vec<Vec<f64>>,
    /// `cov + diag(σ_y²)` when observation noise was supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_cov: Option<Vec<Vec<f64>>>,
}

impl RegressionSummary {
    /// Total covariance when present, else the epistemic one.
    pub fn predictive_cov(&self) -> &[Vec<f64>] {
        self.total_cov.as_deref().unwrap_or(&self.cov)
    }

    /// Per-output predictive standard deviation.
    pub fn stdev(&self) -> Vec<f64> {
        let c = self.predictive_cov();
        (0..c.len()).map(|i| c[i][i].max(0.0).sqrt()).collect()
    }
}

/// Mean and `|Θ| − 1`-normalized covariance of the sampled outputs.
pub fn summarize_regression(samples: &PredictiveSamples, sigma_y: Option<&[f64]>) -> Result<RegressionSummary> {
    let n = samples.len();
    ensure!(n >= 2, "a covariance needs at least two samples, got {n}");
    let m = samples.width();
    let mut mean = vec![0.0; m];
    for o in &samples.outputs {
        for (a, v) in mean.iter_mut().zip(o) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let mut cov = vec![vec![0.0; m]; m];
    for o in &samples.outputs {
        let d: Vec<f64> = o.iter().zip(&mean).map(|(a, b)| a - b).collect();
        for i in 0..m {
            for j in i..m {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    for i in 0..m {
        for j in i..m {
            cov[i][j] /= (n - 1) as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let total_cov = match sigma_y {
        Some(s) => {
            ensure!(s.len() == m, "{} noise scales for {m} outputs", s.len());
            ensure!(s.iter().all(|v| *v > 0.0), "noise scales must be positive");
            let mut t = cov.clone();
            for (i, si) in s.iter().enumerate() {
                t[i][i] += si * si;
            }
            Some(t)
        }
        None => None,
    };
    Ok(RegressionSummary { mean, cov, total_cov })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSummary {
    pub p: Vec<f64>,
    pub class: usize,
    /// Expected cost of predicting each class, when a cost matrix was given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk: Option<Vec<f64>>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Index of the smallest entry; ties go to the lowest index.
pub fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

/// `risk[k] = Σⱼ cost[k][j]·p[j]`, the expected cost of predicting `k`.
pub fn expected_risk(p: &[f64], cost: &[Vec<f64>]) -> Result<Vec<f64>> {
    let k = p.len();
    ensure!(
        cost.len() == k && cost.iter().all(|r| r.len() == k),
        "cost matrix must be {k}×{k}"
    );
    Ok(cost.iter().map(|row| row.iter().zip(p).map(|(c, q)| c * q).sum()).collect())
}

/// Mean probability vector and the decision it implies.
///
/// Without costs the class is the argmax of `p̂`; with a cost matrix `C`
/// (`C[k][j]` = cost of predicting `k` when the truth is `j`) it is the
/// minimizer of expected cost.
pub fn summarize_classification(samples: &PredictiveSamples, cost: Option<&[Vec<f64>]>) -> Result<ClassificationSummary> {
    for o in &samples.outputs {
        let s: f64 = o.iter().sum();
        ensure!(
            (s - 1.0).abs() <= NORMALIZATION_TOLERANCE && o.iter().all(|v| *v >= 0.0),
            "sampled output is not a probability vector (sums to {s})"
        );
    }
    let k = samples.width();
    let mut p = vec![0.0; k];
    for o in &samples.outputs {
        for (a, v) in p.iter_mut().zip(o) {
            *a += v;
        }
    }
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    let (class, risk) = match cost {
        Some(c) => {
            let r = expected_risk(&p, c)?;
            (argmin(&r), Some(r))
        }
        None => (argmax(&p), None),
    };
    Ok(ClassificationSummary { p, class, risk })
}

/// One line of a predictions file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
}

impl From<&RegressionSummary> for Prediction {
    fn from(s: &RegressionSummary) -> Self {
        Prediction {
            mean: Some(s.mean.clone()),
            cov: Some(s.predictive_cov().to_vec()),
            ..Prediction::default()
        }
    }
}

impl From<&ClassificationSummary> for Prediction {
    fn from(s: &ClassificationSummary) -> Self {
        Prediction {
            p: Some(s.p.clone()),
            class: Some(s.class),
            ..Prediction::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::DiracMixture;
    use crate::model::conjugate_scalar_posterior;
    use crate::network::Activation;
    use crate::rng;
    use crate::vi::MeanFieldGaussian;
    use rand::SeedableRng;
    use std::sync::Arc;

    fn samples(outputs: Vec<Vec<f64>>) -> PredictiveSamples {
        PredictiveSamples::new(outputs, "test", vec![]).unwrap()
    }

    fn eigenvalues(c: &[Vec<f64>]) -> Vec<f64> {
        let m = nalgebra::DMatrix::from_fn(c.len(), c.len(), |i, j| c[i][j]);
        m.symmetric_eigenvalues().iter().copied().collect()
    }

    #[test]
    fn point_mass_gives_identical_outputs() {
        let spec = MlpSpec::from_widths(&[2, 3, 1], Activation::Tanh, Activation::Identity).unwrap();
        let theta = spec.init_fan_in(&mut Rng::seed_from_u64(1));
        let p = Posterior::Ensemble(DiracMixture::uniform(vec![theta.clone()]).unwrap());
        let s = sample_predictive(&p, &spec, &[0.3, -0.1], 7, &mut Rng::seed_from_u64(2)).unwrap();
        assert!(s.outputs.iter().all(|o| *o == s.outputs[0]));
        let one = sample_predictive(&p, &spec, &[0.3, -0.1], 1, &mut Rng::seed_from_u64(2)).unwrap();
        assert_eq!(one.outputs, vec![spec.forward(&theta, &[0.3, -0.1]).unwrap()]);
        let r = summarize_regression(&s, None).unwrap();
        assert!(r.cov[0][0] == 0.0);
    }

    #[test]
    fn two_sample_arithmetic() {
        let r = summarize_regression(&samples(vec![vec![0.0], vec![2.0]]), Some(&[0.5])).unwrap();
        assert_eq!(r.mean, vec![1.0]);
        assert_eq!(r.cov, vec![vec![2.0]]);
        assert_eq!(r.total_cov, Some(vec![vec![2.25]]));
        assert!(summarize_regression(&samples(vec![vec![1.0]]), None).is_err());
    }

    #[test]
    fn gaussian_moments_recovered() {
        // y = m + L z with a full-rank L.
        let m = [1.0, -2.0];
        let l = [[0.8, 0.0], [0.3, 0.5]];
        let s_true = [[0.64, 0.24], [0.24, 0.34]];
        let mut r = Rng::seed_from_u64(3);
        let out: Vec<Vec<f64>> = (0..100_000)
            .map(|_| {
                let z = rng::standard_normal_vec(&mut r, 2);
                vec![m[0] + l[0][0] * z[0], m[1] + l[1][0] * z[0] + l[1][1] * z[1]]
            })
            .collect();
        let s = summarize_regression(&samples(out), None).unwrap();
        for i in 0..2 {
            assert!((s.mean[i] - m[i]).abs() < 0.02 * m[i].abs());
            for j in 0..2 {
                assert!((s.cov[i][j] - s_true[i][j]).abs() < 0.02 * s_true[i][j], "{i}{j}");
            }
        }
    }

    #[test]
    fn conjugate_predictive_mean_within_three_se() {
        let ys = [0.4, 0.9, 0.1];
        let (mean, var) = conjugate_scalar_posterior(1.0, 0.5, &ys);
        let spec = Arc::new(MlpSpec::new(vec![crate::network::LayerSpec::new(1, 1, Activation::Identity).without_bias()]).unwrap());
        let q = MeanFieldGaussian::from_sigma(vec![mean], &[var.sqrt()]).unwrap().with_spec(spec.clone()).unwrap();
        let x = 1.7;
        let n = 20_000;
        let s = sample_predictive(&Posterior::MeanField(q), &spec, &[x], n, &mut Rng::seed_from_u64(4)).unwrap();
        let r = summarize_regression(&s, None).unwrap();
        let se = (var * x * x / n as f64).sqrt();
        assert!((r.mean[0] - mean * x).abs() < 3.0 * se);
    }

    #[test]
    fn classification_decisions() {
        let s = summarize_classification(&samples(vec![vec![0.2, 0.5, 0.3]]), None).unwrap();
        assert_eq!(s.class, 1);
        let zero_one: Vec<Vec<f64>> = (0..3).map(|k| (0..3).map(|j| f64::from(u8::from(k != j))).collect()).collect();
        let u = summarize_classification(&samples(vec![vec![1.0 / 3.0; 3]]), Some(&zero_one)).unwrap();
        assert_eq!(u.class, 0);
        let cost = vec![vec![0.0, 10.0], vec![1.0, 0.0]];
        let c = summarize_classification(&samples(vec![vec![0.6, 0.4]]), Some(&cost)).unwrap();
        let risk = c.risk.unwrap();
        assert!((risk[0] - 4.0).abs() < 1e-12 && (risk[1] - 0.6).abs() < 1e-12);
        assert_eq!(c.class, 1);
        let zero = vec![vec![0.0; 2]; 2];
        assert_eq!(summarize_classification(&samples(vec![vec![0.1, 0.9]]), Some(&zero)).unwrap().class, 0);
    }

    #[test]
    fn unnormalized_outputs_rejected() {
        assert!(summarize_classification(&samples(vec![vec![0.5, 0.6]]), None).is_err());
    }

    #[test]
    fn prediction_json_shape() {
        let r = summarize_regression(&samples(vec![vec![0.0], vec![2.0]]), None).unwrap();
        assert_eq!(serde_json::to_string(&Prediction::from(&r)).unwrap(), r#"{"mean":[1.0],"cov":[[2.0]]}"#);
        let c = summarize_classification(&samples(vec![vec![0.25, 0.75]]), None).unwrap();
        assert_eq!(serde_json::to_string(&Prediction::from(&c)).unwrap(), r#"{"p":[0.25,0.75],"class":1}"#);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn prob_rows() -> impl Strategy<Value = Vec<Vec<f64>>> {
            (2usize..5).prop_flat_map(|k| prop::collection::vec(prop::collection::vec(0.01f64..1.0, k), 1..8))
        }

        proptest! {
            #[test]
            fn argmax_ignores_common_scale(rows in prob_rows(), c in 0.1f64..10.0) {
                let norm = |r: &Vec<f64>, c: f64| {
                    let s: f64 = r.iter().map(|v| v * c).sum();
                    r.iter().map(|v| v * c / s).collect::<Vec<_>>()
                };
                let a = summarize_classification(&samples(rows.iter().map(|r| norm(r, 1.0)).collect()), None).unwrap();
                let b = summarize_classification(&samples(rows.iter().map(|r| norm(r, c)).collect()), None).unwrap();
                prop_assert_eq!(a.class, b.class);
            }

            #[test]
            fn covariance_is_psd_and_order_free(
                rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..30),
                shift in 0usize..30,
            ) {
                let s = summarize_regression(&samples(rows.clone()), None).unwrap();
                let mut rotated = rows.clone();
                rotated.rotate_left(shift % rows.len());
                let t = summarize_regression(&samples(rotated), None).unwrap();
                for i in 0..3 {
                    for j in 0..3 {
                        prop_assert!((s.cov[i][j] - t.cov[i][j]).abs() < 1e-9);
                        prop_assert_eq!(s.cov[i][j], s.cov[j][i]);
                    }
                }
                prop_assert!(eigenvalues(&s.cov).iter().all(|e| *e >= -1e-10));
            }
        }
    }
}
