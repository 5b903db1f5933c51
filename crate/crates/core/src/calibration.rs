//! Calibration curves, summary metrics and proper scoring rules.
//!
//! A calibration curve pairs a predicted probability `p̂` with the observed
//! frequency `p̌` of the corresponding event. Points below the diagonal mean
//! the model is overconfident, points above mean it is underconfident.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::format_float;
use crate::error::{ensure, Error, Result};
use crate::predictive::RegressionSummary;
use crate::special;

/// Default half-width of reliability windows.
pub const DEFAULT_HALF_WIDTH: f64 = 0.05;

/// Default number of ECE bins.
pub const DEFAULT_ECE_BINS: usize = 10;

/// Ridge added to a predictive covariance that fails to factor.
pub const COVARIANCE_RIDGE: f64 = 1e-9;

/// Points whose `p̂` differ by less than this are merged.
const MERGE_TOLERANCE: f64 = 1e-12;

/// How reliability events are formed from predicted probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum EventScheme {
    /// Predictions in `[c − δ, c + δ]` for centers `c` on a grid of spacing `δ`.
    Centered { half_width: f64 },
    /// Predictions in `[0, p]` and in `[1 − p, 1]` for `p` on a grid of
    /// spacing `step` up to one half; suited to small test sets.
    Tails { step: f64 },
    /// Empirical CDF of chi-square probabilities (regression).
    ChiSquare,
}

impl Default for EventScheme {
    fn default() -> Self {
        EventScheme::Centered {
            half_width: DEFAULT_HALF_WIDTH,
        }
    }
}

impl EventScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EventScheme::Centered { half_width: w } | EventScheme::Tails { step: w } => {
                ensure!(w > 0.0 && w <= 0.5, "window width must lie in (0, 0.5], got {w}")
            }
            EventScheme::ChiSquare => {}
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub p_hat: f64,
    pub p_check: f64,
    /// Number of test points behind this curve point.
    pub n: usize,
}

/// Reliability curve with `p̂` strictly increasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub points: Vec<CurvePoint>,
    pub scheme: EventScheme,
    /// Fewer than two distinct points; area metrics are undefined.
    pub degenerate: bool,
    /// Test points dropped, e.g. for a singular predictive covariance.
    pub excluded: usize,
}

impl CalibrationCurve {
    fn from_points(points: Vec<CurvePoint>, scheme: EventScheme, excluded: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Evaluation("every calibration event is empty".into()));
        }
        Ok(CalibrationCurve {
            degenerate: points.len() < 2,
            points,
            scheme,
            excluded,
        })
    }

    /// Count-weighted mean of `|p̂ − ½| − |p̌ − ½|`: positive when
    /// predictions are more extreme than the frequencies they induce.
    pub fn overconfidence(&self) -> f64 {
        let total: usize = self.points.iter().map(|p| p.n).sum();
        self.points
            .iter()
            .map(|p| p.n as f64 * ((p.p_hat - 0.5).abs() - (p.p_check - 0.5).abs()))
            .sum::<f64>()
            / total.max(1) as f64
    }

    /// Writes `p_hat,p_check,n_bin` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["p_hat", "p_check", "n_bin"])?;
        for p in &self.points {
            out.write_record([format_float(p.p_hat), format_float(p.p_check), p.n.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Sorted predictions with prefix sums for window statistics.
struct SortedEvents {
    pred: Vec<f64>,
    cum_pred: Vec<f64>,
    cum_obs: Vec<f64>,
}

impl SortedEvents {
    fn new(predicted: &[f64], observed: &[f64]) -> Self {
        let mut idx: Vec<usize> = (0..predicted.len()).collect();
        idx.sort_by(|&a, &b| predicted[a].total_cmp(&predicted[b]));
        let pred: Vec<f64> = idx.iter().map(|&i| predicted[i]).collect();
        let mut cum_pred = vec![0.0; idx.len() + 1];
        let mut cum_obs = vec![0.0; idx.len() + 1];
        for (k, &i) in idx.iter().enumerate() {
            cum_pred[k + 1] = cum_pred[k] + predicted[i];
            cum_obs[k + 1] = cum_obs[k] + observed[i];
        }
        SortedEvents { pred, cum_pred, cum_obs }
    }

    /// Index range of predictions in the closed interval `[lo, hi]`.
    fn range(&self, lo: f64, hi: f64) -> (usize, usize) {
        (self.pred.partition_point(|p| *p < lo), self.pred.partition_point(|p| *p <= hi))
    }

    fn point(&self, (a, b): (usize, usize)) -> CurvePoint {
        let n = (b - a) as f64;
        CurvePoint {
            p_hat: (self.cum_pred[b] - self.cum_pred[a]) / n,
            p_check: (self.cum_obs[b] - self.cum_obs[a]) / n,
            n: b - a,
        }
    }
}

/// Sorts by `p̂` and merges points whose `p̂` coincide.
fn coalesce(mut points: Vec<CurvePoint>) -> Vec<CurvePoint> {
    points.sort_by(|a, b| a.p_hat.total_cmp(&b.p_hat));
    let mut out: Vec<CurvePoint> = Vec::with_capacity(points.len());
    for p in points {
        match out.last_mut() {
            Some(last) if p.p_hat - last.p_hat <= MERGE_TOLERANCE => {
                let n = (last.n + p.n) as f64;
                last.p_check = (last.p_check * last.n as f64 + p.p_check * p.n as f64) / n;
                last.p_hat = (last.p_hat * last.n as f64 + p.p_hat * p.n as f64) / n;
                last.n += p.n;
            }
            _ => out.push(p),
        }
    }
    out
}

fn check_binary_inputs(predicted: &[f64], observed: &[f64]) -> Result<()> {
    ensure!(!predicted.is_empty(), "no predictions");
    ensure!(
        predicted.len() == observed.len(),
        "{} predictions for {} outcomes",
        predicted.len(),
        observed.len()
    );
    ensure!(
        predicted.iter().all(|p| (0.0..=1.0).contains(p)),
        "predicted probabilities must lie in [0, 1]"
    );
    ensure!(
        observed.iter().all(|y| *y == 0.0 || *y == 1.0),
        "observed outcomes must be 0 or 1"
    );
    Ok(())
}

/// Reliability curve of a binary predictor.
///
/// Each event yields the point (mean prediction, event frequency); windows
/// are closed intervals and identical windows are reported once.
pub fn binary_reliability(predicted: &[f64], observed: &[f64], scheme: EventScheme) -> Result<CalibrationCurve> {
    check_binary_inputs(predicted, observed)?;
    scheme.validate()?;
    let ev = SortedEvents::new(predicted, observed);
    let mut ranges: Vec<(usize, usize)> = Vec::new();
    match scheme {
        EventScheme::Centered { half_width } => {
            let steps = (1.0 / half_width).round() as usize;
            for i in 0..=steps {
                let c = i as f64 * half_width;
                ranges.push(ev.range(c - half_width, c + half_width));
            }
        }
        EventScheme::Tails { step } => {
            let steps = (0.5 / step).round() as usize;
            for i in 1..=steps {
                let p = i as f64 * step;
                ranges.push(ev.range(0.0, p));
                ranges.push(ev.range(1.0 - p, 1.0));
            }
        }
        EventScheme::ChiSquare => return Err(Error::contract("chi-square events apply to regression")),
    }
    ranges.retain(|(a, b)| b > a);
    ranges.sort_unstable();
    ranges.dedup();
    let points = coalesce(ranges.into_iter().map(|r| ev.point(r)).collect());
    CalibrationCurve::from_points(points, scheme, 0)
}

/// One-vs-rest reliability curve per class.
pub fn multiclass_reliability(probs: &[Vec<f64>], labels: &[usize], scheme: EventScheme) -> Result<Vec<CalibrationCurve>> {
    ensure!(!probs.is_empty(), "no predictions");
    ensure!(probs.len() == labels.len(), "{} predictions for {} labels", probs.len(), labels.len());
    let k = probs[0].len();
    ensure!(k >= 2, "need at least two classes");
    ensure!(probs.iter().all(|p| p.len() == k), "probability vectors differ in length");
    ensure!(labels.iter().all(|&l| l < k), "label out of range");
    (0..k)
        .map(|c| {
            let pred: Vec<f64> = probs.iter().map(|p| p[c].clamp(0.0, 1.0)).collect();
            let obs: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l == c))).collect();
            binary_reliability(&pred, &obs, scheme)
        })
        .collect()
}

/// `P(X ≤ s)` for `X ~ χ²_k`.
pub fn chi_square_cdf(s: f64, k: usize) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    special::chi_square_cdf(s, k as f64)
}

/// Chi-square calibration of regression predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionCalibration {
    pub curve: CalibrationCurve,
    /// `p̂` per retained test point, in input order.
    pub p_hat: Vec<f64>,
}

/// `(ŷ − y)ᵀ Σ⁻¹ (ŷ − y)`, retrying once with a ridge; `None` when the
/// covariance stays singular.
pub fn mahalanobis_squared(mean: &[f64], cov: &[Vec<f64>], y: &[f64]) -> Option<f64> {
    let m = mean.len();
    let base = DMatrix::from_fn(m, m, |i, j| cov[i][j]);
    let r = DVector::from_iterator(m, mean.iter().zip(y).map(|(a, b)| a - b));
    [0.0, COVARIANCE_RIDGE].iter().find_map(|&ridge| {
        let chol = (base.clone() + DMatrix::identity(m, m) * ridge).cholesky()?;
        let v = r.dot(&chol.solve(&r));
        v.is_finite().then_some(v)
    })
}

/// Predicted probability `p̂ᵢ = F_{χ²_m}((ŷᵢ − yᵢ)ᵀ Σᵢ⁻¹ (ŷᵢ − yᵢ))` and
/// observed probability `p̌ᵢ = #{j : p̂ⱼ ≤ p̂ᵢ} / |T|`.
///
/// Uses each summary's total covariance when present. Points with singular
/// covariance are excluded and counted.
pub fn regression_calibration(summaries: &[RegressionSummary], truths: &[Vec<f64>]) -> Result<RegressionCalibration> {
    ensure!(
        summaries.len() == truths.len(),
        "{} summaries for {} truths",
        summaries.len(),
        truths.len()
    );
    let mut p_hat = Vec::with_capacity(summaries.len());
    let mut excluded = 0;
    for (s, y) in summaries.iter().zip(truths) {
        ensure!(y.len() == s.mean.len(), "truth has {} outputs, prediction {}", y.len(), s.mean.len());
        match mahalanobis_squared(&s.mean, s.predictive_cov(), y) {
            Some(d) => p_hat.push(chi_square_cdf(d, y.len())),
            None => excluded += 1,
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} test points excluded for singular predictive covariance");
    }
    let n = p_hat.len();
    if n < 2 {
        return Err(Error::Evaluation(format!("{n} usable test points; need at least 2")));
    }
    let mut sorted = p_hat.clone();
    sorted.sort_by(f64::total_cmp);
    let mut points: Vec<CurvePoint> = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && sorted[j] == sorted[i] {
            j += 1;
        }
        points.push(CurvePoint {
            p_hat: sorted[i],
            p_check: j as f64 / n as f64,
            n: j - i,
        });
        i = j;
    }
    Ok(RegressionCalibration {
        curve: CalibrationCurve::from_points(coalesce(points), EventScheme::ChiSquare, excluded)?,
        p_hat,
    })
}

/// Kolmogorov–Smirnov distance between a sample and `Uniform(0, 1)`.
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, u)| ((i + 1) as f64 / n - u).max(u - i as f64 / n))
        .fold(0.0, f64::max)
}

fn check_area_curve(curve: &CalibrationCurve) -> Result<()> {
    if curve.points.len() < 2 {
        return Err(Error::Evaluation("area metrics need at least two curve points".into()));
    }
    Ok(())
}

/// `∫₀¹ p̌ dp̂` by trapezoids, holding `p̌` constant beyond the end nodes.
pub fn auc(curve: &CalibrationCurve) -> Result<f64> {
    check_area_curve(curve)?;
    let pts = &curve.points;
    let (first, last) = (pts[0], pts[pts.len() - 1]);
    let mut area = first.p_hat.max(0.0) * first.p_check + (1.0 - last.p_hat).max(0.0) * last.p_check;
    for w in pts.windows(2) {
        area += (w[1].p_hat - w[0].p_hat) * 0.5 * (w[0].p_check + w[1].p_check);
    }
    Ok(area.clamp(0.0, 1.0))
}

/// `√∫ (p̌ − p̂)² dp̂` over the span of the nodes, integrating the squared
/// piecewise-linear gap exactly.
pub fn curve_distance(curve: &CalibrationCurve) -> Result<f64> {
    check_area_curve(curve)?;
    let mut acc = 0.0;
    for w in curve.points.windows(2) {
        let h = w[1].p_hat - w[0].p_hat;
        let (d0, d1) = (w[0].p_check - w[0].p_hat, w[1].p_check - w[1].p_hat);
        acc += h * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0;
    }
    Ok(acc.max(0.0).sqrt())
}

/// Expected calibration error over equal-width bins on `[0, 1]`.
pub fn ece(predicted: &[f64], observed: &[f64], n_bins: usize) -> Result<f64> {
    check_binary_inputs(predicted, observed)?;
    ensure!(n_bins >= 1, "need at least one bin");
    let mut sums = vec![(0usize, 0.0, 0.0); n_bins];
    for (p, y) in predicted.iter().zip(observed) {
        let b = ((p * n_bins as f64) as usize).min(n_bins - 1);
        sums[b].0 += 1;
        sums[b].1 += p;
        sums[b].2 += y;
    }
    let n = predicted.len() as f64;
    Ok(sums
        .iter()
        .filter(|s| s.0 > 0)
        .map(|&(c, sp, sy)| (c as f64 / n) * ((sp - sy) / c as f64).abs())
        .sum())
}

/// ECE of the top-label confidence against correctness.
pub fn top_label_ece(probs: &[Vec<f64>], labels: &[usize], n_bins: usize) -> Result<f64> {
    ensure!(probs.len() == labels.len(), "{} predictions for {} labels", probs.len(), labels.len());
    let mut conf = Vec::with_capacity(probs.len());
    let mut hit = Vec::with_capacity(probs.len());
    for (p, &l) in probs.iter().zip(labels) {
        let k = crate::predictive::argmax(p);
        conf.push(p[k].clamp(0.0, 1.0));
        hit.push(f64::from(u8::from(k == l)));
    }
    ece(&conf, &hit, n_bins)
}

/// Mean log score and Brier score of categorical forecasts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Mean `log p(outcome)`; higher is better, `-inf` when an outcome had
    /// zero predicted probability.
    pub log_score: f64,
    /// Mean `Σₖ (pₖ − 𝕀[k = outcome])²` in `[0, 2]`; lower is better.
    pub brier: f64,
    pub n: usize,
    /// Outcomes that were assigned probability zero.
    pub zero_probability_events: usize,
}

impl ScoreReport {
    /// Brier score negated so that, like the log score, higher is better.
    pub fn oriented_brier(&self) -> f64 {
        -self.brier
    }
}

pub fn scoring_rules(probs: &[Vec<f64>], outcomes: &[usize]) -> Result<ScoreReport> {
    ensure!(!probs.is_empty(), "no forecasts");
    ensure!(probs.len() == outcomes.len(), "{} forecasts for {} outcomes", probs.len(), outcomes.len());
    let mut log_sum = 0.0;
    let mut brier = 0.0;
    let mut zero = 0;
    for (p, &o) in probs.iter().zip(outcomes) {
        ensure!(o < p.len(), "outcome {o} outside {} classes", p.len());
        let s: f64 = p.iter().sum();
        ensure!(
            (s - 1.0).abs() <= 1e-6 && p.iter().all(|v| *v >= 0.0),
            "forecast is not a probability vector"
        );
        if p[o] > 0.0 {
            log_sum += p[o].ln();
        } else {
            zero += 1;
        }
        brier += p
            .iter()
            .enumerate()
            .map(|(k, v)| (v - f64::from(u8::from(k == o))).powi(2))
            .sum::<f64>();
    }
    let n = probs.len();
    if zero > 0 {
        log::warn!("{zero} outcomes had zero predicted probability");
    }
    Ok(ScoreReport {
        log_score: if zero > 0 { f64::NEG_INFINITY } else { log_sum / n as f64 },
        brier: brier / n as f64,
        n,
        zero_probability_events: zero,
    })
}

/// Mean Gaussian log predictive density of regression truths.
pub fn gaussian_log_score(summaries: &[RegressionSummary], truths: &[Vec<f64>]) -> Result<f64> {
    ensure!(!summaries.is_empty(), "no predictions");
    ensure!(summaries.len() == truths.len(), "{} summaries for {} truths", summaries.len(), truths.len());
    let mut total = 0.0;
    for (s, y) in summaries.iter().zip(truths) {
        let m = s.mean.len();
        let c = s.predictive_cov();
        let mat = DMatrix::from_fn(m, m, |i, j| c[i][j]);
        let chol = mat
            .clone()
            .cholesky()
            .or_else(|| (mat + DMatrix::identity(m, m) * COVARIANCE_RIDGE).cholesky())
            .ok_or_else(|| Error::Evaluation("predictive covariance is singular".into()))?;
        let r = DVector::from_iterator(m, s.mean.iter().zip(y).map(|(a, b)| a - b));
        let quad = r.dot(&chol.solve(&r));
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        total += -0.5 * (quad + log_det + m as f64 * (2.0 * std::f64::consts::PI).ln());
    }
    Ok(total / summaries.len() as f64)
}

/// Mean squared error of the predictive means.
pub fn mse(summaries: &[RegressionSummary], truths: &[Vec<f64>]) -> Result<f64> {
    ensure!(!summaries.is_empty(), "no predictions");
    ensure!(summaries.len() == truths.len(), "{} summaries for {} truths", summaries.len(), truths.len());
    let mut acc = 0.0;
    let mut count = 0usize;
    for (s, y) in summaries.iter().zip(truths) {
        for (a, b) in s.mean.iter().zip(y) {
            acc += (a - b).powi(2);
            count += 1;
        }
    }
    Ok(acc / count as f64)
}
