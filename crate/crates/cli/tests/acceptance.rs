//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Pipelines run through the same `run` entry point as the `bnn` binary,
//! on the configs shipped in `configs/`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;

use bnn_cli::config::ExperimentConfig;
use bnn_cli::{run, RunOutcome};
use bnn_core::approx::{dropout_objective, fit_deep_ensemble, DropoutConfig, EnsembleConfig, MemberWeighting, PointFitConfig};
use bnn_core::calibration::{
    auc, curve_distance, ks_uniform, regression_calibration, CalibrationCurve, CurvePoint, EventScheme,
};
use bnn_core::data::{Dataset, Targets};
use bnn_core::distill::{student_loss, Teacher, TeacherTask};
use bnn_core::mcmc::{leapfrog, sgld_step, PhasePoint};
use bnn_core::model::{conjugate_scalar_log_evidence, conjugate_scalar_model, FnTarget, Likelihood, LogJointModel, Prior};
use bnn_core::network::{Activation, LayerSpec, MlpSpec, ParamVector};
use bnn_core::optim::OptimizerConfig;
use bnn_core::predictive::RegressionSummary;
use bnn_core::rng::{self, Rng};
use bnn_core::vi::{grid_elbo_identity, pathwise_gradient_check, MeanFieldGaussian};

type Verdict = Result<String, String>;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::from_file(&configs().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn run_in(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome, String> {
    run(cfg, &configs(), out).map_err(|e| e.to_string())
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

fn conjugate_correctness() -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for method in ["mh", "hmc", "sgld", "bbb"] {
        let dir = tempfile::tempdir().unwrap();
        let start = Instant::now();
        let outcome = run_in(&load(&format!("conjugate_{method}.json")), dir.path())?;
        let secs = start.elapsed().as_secs_f64();
        let (m, v) = (outcome.metrics["posterior_mean"], outcome.metrics["posterior_variance"]);
        let pass = m.abs() <= 0.03 && (v - 0.5).abs() <= 0.05 && secs < 60.0;
        ok &= pass;
        parts.push(format!("{method}: mean {m:+.4} var {v:.4} in {secs:.1}s"));
    }
    check(ok, parts.join("; "))
}

fn elbo_identity() -> Verdict {
    let ys = [0.0];
    let model = conjugate_scalar_model(1.0, 1.0, &ys).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let exact = conjugate_scalar_log_evidence(1.0, 1.0, &ys);
    let mut evidence_gap: f64 = 0.0;
    for (mean, sd) in [(0.0, 0.5f64.sqrt()), (0.3, 0.6), (-0.5, 1.0), (0.2, 0.4), (1.0, 0.3)] {
        let id = grid_elbo_identity(|t| model.log_joint(&[t], None).unwrap(), mean, sd, (-5.0, 5.0), 41)
            .map_err(|e| e.to_string())?;
        worst = worst.max((id.elbo + id.kl - id.log_evidence).abs());
        evidence_gap = evidence_gap.max((id.log_evidence - exact).abs());
    }
    check(
        worst < 1e-3 && evidence_gap < 1e-3,
        format!("max |ELBO + KL − log evidence| = {worst:.2e}; quadrature log evidence off closed form by {evidence_gap:.2e}"),
    )
}

fn reparametrization_gradient() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut r = seeded(32);
    for (ys, mu, sigma) in [(vec![0.0], 0.3, 0.5), (vec![0.4, -0.2, 0.1], -0.2, 0.8), (vec![1.5], 1.0, 0.2)] {
        let model = conjugate_scalar_model(1.0, 1.0, &ys).map_err(|e| e.to_string())?;
        let q = MeanFieldGaussian::from_sigma(vec![mu], &[sigma]).unwrap();
        let rep = pathwise_gradient_check(&model, &q, 100_000, &mut r).map_err(|e| e.to_string())?;
        worst = worst.max(rep.max_relative_deviation);
    }
    check(
        worst < 1e-2,
        format!("max relative deviation {worst:.2e} over three conjugate models at 1e5 draws"),
    )
}

fn leapfrog_order() -> Verdict {
    let dim = 10;
    let target = FnTarget::standard_normal(dim);
    let mut r = seeded(41);
    let (mut coarse, mut fine, mut reversal): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let n = 1000;
    for _ in 0..n {
        let x = rng::standard_normal_vec(&mut r, dim);
        let v = rng::standard_normal_vec(&mut r, dim);
        let start = PhasePoint::new(&target, x, v).map_err(|e| e.to_string())?;
        let h0 = start.hamiltonian(1.0);
        let a = leapfrog(&target, &start, 0.1, 10, 1.0).map_err(|e| e.to_string())?;
        let b = leapfrog(&target, &start, 0.05, 20, 1.0).map_err(|e| e.to_string())?;
        coarse += (a.hamiltonian(1.0) - h0).abs();
        fine += (b.hamiltonian(1.0) - h0).abs();
        let mut back = a.clone();
        back.v.iter_mut().for_each(|v| *v = -*v);
        let home = leapfrog(&target, &back, 0.1, 10, 1.0).map_err(|e| e.to_string())?;
        for (p, q) in home.x.iter().zip(&start.x).chain(home.v.iter().map(|v| -v).collect::<Vec<_>>().iter().zip(&start.v)) {
            reversal = reversal.max((p - q).abs());
        }
    }
    let ratio = coarse / fine;
    check(
        (3.0..=5.0).contains(&ratio) && reversal < 1e-10,
        format!("mean |ΔH| ratio {ratio:.3} (Δt 0.1 vs 0.05); reversal error {reversal:.1e}"),
    )
}

fn sgld_noise_law() -> Verdict {
    let dim = 4;
    let flat = FnTarget::new(dim, |_| 0.0, move |_| vec![0.0; dim]);
    let mut r = seeded(51);
    let mut theta = vec![0.0; dim];
    let mut worst: f64 = 0.0;
    for eps in [1e-2, 1e-4] {
        let steps = 100_000;
        let mut sum = vec![0.0; dim];
        let mut sum_sq = vec![0.0; dim];
        for _ in 0..steps {
            let next = sgld_step(&flat, &theta, eps, &[], true, &mut r).map_err(|e| e.to_string())?;
            for j in 0..dim {
                let d = next[j] - theta[j];
                sum[j] += d;
                sum_sq[j] += d * d;
            }
            theta = next;
        }
        for j in 0..dim {
            let mean = sum[j] / steps as f64;
            let var = (sum_sq[j] / steps as f64 - mean * mean) * steps as f64 / (steps - 1) as f64;
            worst = worst.max((var / eps - 1.0).abs());
        }
    }
    check(worst <= 0.05, format!("max relative deviation of injected variance from ε: {:.2}%", 100.0 * worst))
}

fn symmetries() -> Verdict {
    let mut r = seeded(61);
    let spec = Arc::new(MlpSpec::from_widths(&[3, 8, 6, 2], Activation::Tanh, Activation::Identity).unwrap());
    let p = ParamVector::init_fan_in(spec.clone(), &mut r);
    let xs: Vec<Vec<f64>> = (0..100).map(|_| rng::standard_normal_vec(&mut r, 3)).collect();
    let perm0: Vec<usize> = vec![3, 0, 7, 1, 6, 2, 5, 4];
    let perm1: Vec<usize> = vec![5, 4, 0, 2, 1, 3];
    let permuted = p
        .permute_hidden_units(0, &perm0)
        .and_then(|q| q.permute_hidden_units(1, &perm1))
        .map_err(|e| e.to_string())?;
    let mut perm_err: f64 = 0.0;
    for x in &xs {
        for (a, b) in p.forward(x).unwrap().iter().zip(permuted.forward(x).unwrap()) {
            perm_err = perm_err.max((a - b).abs());
        }
    }
    let relu = Arc::new(
        MlpSpec::new(vec![
            LayerSpec::new(3, 8, Activation::Relu).without_bias(),
            LayerSpec::new(8, 2, Activation::Identity).without_bias(),
        ])
        .unwrap(),
    );
    let rp = ParamVector::init_fan_in(relu, &mut r);
    let scaled = rp.scale_layers(0, 3.7).map_err(|e| e.to_string())?;
    let mut scale_err: f64 = 0.0;
    for x in &xs {
        for (a, b) in rp.forward(x).unwrap().iter().zip(scaled.forward(x).unwrap()) {
            scale_err = scale_err.max((a - b).abs());
        }
    }
    let canon = p.canonicalize();
    let idempotent = canon.canonicalize() == canon;
    let collapses = permuted.canonicalize().values() == canon.values();
    check(
        perm_err < 1e-12 && scale_err < 1e-10 && idempotent && collapses,
        format!(
            "permutation {perm_err:.1e}; relu scaling {scale_err:.1e}; canonicalize idempotent {idempotent}, collapses permutations {collapses}"
        ),
    )
}

fn calibration_suite() -> Verdict {
    let diagonal = CalibrationCurve {
        points: (0..=20)
            .map(|i| {
                let p = i as f64 / 20.0;
                CurvePoint { p_hat: p, p_check: p, n: 10 }
            })
            .collect(),
        scheme: EventScheme::default(),
        degenerate: false,
        excluded: 0,
    };
    let a = auc(&diagonal).map_err(|e| e.to_string())?;
    let d = curve_distance(&diagonal).map_err(|e| e.to_string())?;

    // Two-output gaussian predictions with correlated covariance; truths from the same law.
    let mut r = seeded(71);
    let n = 10_000;
    let mut summaries = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    for _ in 0..n {
        let mean = rng::standard_normal_vec(&mut r, 2);
        let (s1, s2, rho) = (0.5 + rng::uniform(&mut r), 0.2 + rng::uniform(&mut r), 1.6 * rng::uniform(&mut r) - 0.8);
        let cov = vec![vec![s1 * s1, rho * s1 * s2], vec![rho * s1 * s2, s2 * s2]];
        let (z1, z2) = (rng::standard_normal(&mut r), rng::standard_normal(&mut r));
        let y = vec![mean[0] + s1 * z1, mean[1] + s2 * (rho * z1 + (1.0 - rho * rho).sqrt() * z2)];
        summaries.push(RegressionSummary { mean, cov, total_cov: None });
        truths.push(y);
    }
    let rc = regression_calibration(&summaries, &truths).map_err(|e| e.to_string())?;
    let ks = ks_uniform(&rc.p_hat);

    // Log score: truthful forecast beats every distortion by more than 3 standard errors.
    let p = [0.2, 0.5, 0.3];
    let rivals = [[0.25, 0.45, 0.3], [0.2, 0.4, 0.4], [1.0 / 3.0; 3], [0.1, 0.6, 0.3]];
    let draws = 200_000;
    let mut worst_z = f64::INFINITY;
    for q in rivals {
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            let u = rng::uniform(&mut r);
            let k = if u < p[0] { 0 } else if u < p[0] + p[1] { 1 } else { 2 };
            let diff = p[k].ln() - f64::ln(q[k]);
            s += diff;
            s2 += diff * diff;
        }
        let mean = s / draws as f64;
        let se = ((s2 / draws as f64 - mean * mean) / (draws - 1) as f64).sqrt();
        worst_z = worst_z.min(mean / se);
    }
    check(
        (a - 0.5).abs() < 1e-12 && d.abs() < 1e-12 && ks < 0.02 && worst_z > 3.0,
        format!("diagonal AUC {a} distance {d}; chi-square PIT KS {ks:.4} at n=1e4; log-score margin ≥ {worst_z:.1} SE"),
    )
}

fn dropout_criteria() -> Verdict {
    let mut r = seeded(81);
    let spec = Arc::new(MlpSpec::from_widths(&[3, 16, 16, 1], Activation::Relu, Activation::Identity).unwrap());
    let keep = 0.8;
    let cfg = DropoutConfig::uniform(&spec, keep, 1e-3);
    let (mut kept, mut total) = (0usize, 0usize);
    for _ in 0..100_000 {
        for m in cfg.sample_masks(&spec, &mut r).into_iter().flatten() {
            kept += m.iter().filter(|v| **v != 0.0).count();
            total += m.len();
        }
    }
    let freq = kept as f64 / total as f64;

    let theta = spec.init_fan_in(&mut r);
    let xs: Vec<Vec<f64>> = (0..50).map(|_| rng::standard_normal_vec(&mut r, 3)).collect();
    let ones = DropoutConfig::uniform(&spec, 1.0, 0.0);
    let exact = xs.iter().all(|x| {
        let masks = ones.sample_masks(&spec, &mut r);
        spec.forward_masked(&theta, x, Some(&masks)).unwrap() == spec.forward(&theta, x).unwrap()
    });

    let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0] - 0.5 * x[2]]).collect();
    let sigma = 0.3;
    let data = Dataset::new("d", xs.clone(), Targets::Real(ys.clone())).unwrap();
    let model = LogJointModel::new(spec.clone(), Prior::flat(), Likelihood::gaussian(vec![sigma]).unwrap(), data).unwrap();
    let masks = cfg.sample_masks(&spec, &mut r);
    let rows: Vec<usize> = (0..xs.len()).collect();
    let lambda = 1e-3;
    let (value, _) = dropout_objective(&model, &theta, &rows, Some(&masks), lambda).map_err(|e| e.to_string())?;
    // Independent NLL: masked forward passes and the gaussian density by hand.
    let nll: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let f = spec.forward_masked(&theta, x, Some(&masks)).unwrap()[0];
            0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln() + (f - y[0]).powi(2) / (2.0 * sigma * sigma)
        })
        .sum();
    let expected = nll / xs.len() as f64 + lambda * theta.iter().map(|t| t * t).sum::<f64>();
    let gap = (value - expected).abs();
    check(
        (freq - keep).abs() <= 0.005 && exact && gap < 1e-10,
        format!("keep frequency {freq:.5} vs {keep}; p=1 equals dense {exact}; objective gap {gap:.1e}"),
    )
}

fn ensemble_modes() -> Verdict {
    // Equal-height modes at ±1.
    let target = FnTarget::new(
        1,
        |t| -(t[0] * t[0] - 1.0).powi(2) / 0.02,
        |t| vec![-4.0 * t[0] * (t[0] * t[0] - 1.0) / 0.02],
    );
    let cfg = EnsembleConfig {
        members: 20,
        fit: PointFitConfig {
            optimizer: OptimizerConfig::adam(0.05),
            ..PointFitConfig::new(500, 91)
        },
        weighting: MemberWeighting::Uniform,
    };
    let fit = fit_deep_ensemble(&target, |r| vec![rng::standard_normal(r)], &cfg).map_err(|e| e.to_string())?;
    let pos = fit.mixture.members().iter().filter(|m| (m[0] - 1.0).abs() < 0.05).count();
    let neg = fit.mixture.members().iter().filter(|m| (m[0] + 1.0).abs() < 0.05).count();
    check(pos >= 5 && neg >= 5, format!("{pos} members at +1, {neg} at −1 of 20"))
}

fn distillation(moons: &RunOutcome) -> Verdict {
    let kl = moons.metrics["distill_kl"];
    let loss = moons.metrics["distill_test_loss"];
    let entropy = moons.metrics["distill_teacher_entropy"];
    // Gibbs bound for arbitrary students against the same teacher.
    let cfg = load("moons_ensemble.json");
    let student = cfg.distill.as_ref().unwrap().student.clone();
    let teacher = Teacher::new(
        moons.posterior.clone(),
        Arc::new(cfg.model.network.clone()),
        TeacherTask::Classification,
        32,
    )
    .map_err(|e| e.to_string())?;
    let test = Dataset::read_csv_file(&moons.artifacts.path("test.csv")).map_err(|e| e.to_string())?;
    let mut r = seeded(101);
    let targets = teacher.query(&test.inputs, &mut r).map_err(|e| e.to_string())?;
    let mut bound_holds = loss >= entropy;
    for _ in 0..50 {
        let theta: Vec<f64> = rng::standard_normal_vec(&mut r, student.n_params());
        let l = student_loss(&student, &theta, &test.inputs, &targets).map_err(|e| e.to_string())?;
        bound_holds &= l.value >= targets.entropy() - 1e-12;
    }
    check(
        kl < 0.01 && bound_holds,
        format!("held-out mean KL {kl:.2e}; loss {loss:.5} ≥ teacher entropy {entropy:.5}, bound held for 50 random students {bound_holds}"),
    )
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn reproducibility(moons: &RunOutcome) -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    let again = tempfile::tempdir().unwrap();
    run_in(&load("moons_ensemble.json"), again.path())?;
    let (a, b) = (files(&moons.artifacts.dir), files(again.path()));
    ok &= a == b;
    notes.push(format!("moons ensemble+distill: {} files identical {}", a.len(), a == b));
    for name in ["sinusoid_bbb.json", "sinusoid_hmc.json", "conjugate_sgld.json"] {
        let (x, y) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = load(name);
        run_in(&cfg, x.path())?;
        run_in(&cfg, y.path())?;
        let same = files(x.path()) == files(y.path());
        ok &= same;
        notes.push(format!("{name}: identical {same}"));
    }
    check(ok, notes.join("; "))
}

fn epistemic_check() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for method in ["bbb", "dropout", "ensemble"] {
        let mut wins = 0;
        for seed in 1..=5 {
            let mut cfg = load(&format!("sinusoid_{method}.json"));
            cfg.seed = seed;
            let dir = tempfile::tempdir().unwrap();
            let o = run_in(&cfg, dir.path())?;
            if o.metrics["stdev_out_of_range"] > o.metrics["stdev_in_range"] {
                wins += 1;
            }
        }
        ok &= wins >= 3;
        notes.push(format!("{method} {wins}/5"));
    }
    check(ok, format!("out-of-range stdev above in-range: {}", notes.join(", ")))
}

fn main() {
    let moons_dir = tempfile::tempdir().unwrap();
    let moons = run_in(&load("moons_ensemble.json"), moons_dir.path());
    let with_moons = |f: fn(&RunOutcome) -> Verdict| -> Verdict {
        match &moons {
            Ok(m) => f(m),
            Err(e) => Err(format!("moons pipeline failed: {e}")),
        }
    };
    let results: Vec<(&str, Verdict)> = vec![
        ("conjugate correctness", conjugate_correctness()),
        ("ELBO identity", elbo_identity()),
        ("reparametrization gradient", reparametrization_gradient()),
        ("leapfrog order and reversibility", leapfrog_order()),
        ("SGLD noise law", sgld_noise_law()),
        ("weight-space symmetries", symmetries()),
        ("calibration suite", calibration_suite()),
        ("dropout", dropout_criteria()),
        ("deep ensembles", ensemble_modes()),
        ("distillation", with_moons(distillation)),
        ("end-to-end reproducibility", with_moons(reproducibility)),
        ("epistemic uncertainty check", epistemic_check()),
    ];
    let mut failed = 0;
    for (i, (name, verdict)) in results.iter().enumerate() {
        match verdict {
            Ok(d) => println!("PASS {:>2} {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {d}", i + 1);
            }
        }
    }
    println!("{} of {} criteria pass", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
