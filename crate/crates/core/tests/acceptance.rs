//! Acceptance criteria AC-1 through AC-7.
//!
//! Runs without the libtest harness and prints one PASS/FAIL line per
//! criterion. The process exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use fpf_gain::fpf::{exact_run, run_fpf, synthesize_observations, FilterModel, GainMethod, ParticleRunConfig, PosteriorForm};
use fpf_gain::galerkin::{galerkin_gain, l2_error_vs_oracle, BasisSet};
use fpf_gain::kernel::{build_markov, contraction_check, extend, kernel_gain, solve_on, GradientVariant, KernelConfig};
use fpf_gain::{
    exact_scalar_solution, poisson_residual, DensityModel, GridSpec, ObservationFunction, ParticleEnsemble,
};
use rand::Rng;
use rand_distr::StandardNormal;

const KALMAN_GALERKIN_TOL: f64 = 0.05;
const GAIN_REL_TOL: f64 = 0.15;
const ORACLE_RESIDUAL_TOL: f64 = 1e-3;
const REFINEMENT_RATIO: (f64, f64) = (3.5, 4.5);
const GIBBS_MIN_FRACTION: f64 = 0.5;
const FILTER_GAP_TOL: f64 = 0.15;
const FILTER_PROB_SLACK: f64 = 0.1;
const FILTER_PROB_MIN_FRACTION: f64 = 0.8;
const FILTER_COMPLETE_MIN_FRACTION: f64 = 0.95;
const ROW_SUM_TOL: f64 = 1e-12;
const PHI_MEAN_TOL: f64 = 1e-12;
const PERMUTATION_T_TOL: f64 = 1e-12;
const PERMUTATION_SOLUTION_TOL: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

fn non_increasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] <= w[0])
}

fn fmt_list(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn gaussian() -> DensityModel {
    DensityModel::gaussian_1d(0.0, 1.0).unwrap()
}

fn bimodal() -> DensityModel {
    DensityModel::symmetric_bimodal(1.0, 0.4).unwrap()
}

/// Median over particles with `|x| < 2` of `|gain - 1|`.
fn interior_unit_gain_error(ensemble: &ParticleEnsemble, gains: &[f64]) -> f64 {
    let errs: Vec<f64> = ensemble
        .as_slice()
        .iter()
        .zip(gains)
        .filter(|(x, _)| x.abs() < 2.0)
        .map(|(_, g)| (g - 1.0).abs())
        .collect();
    median(&errs)
}

fn ac1() -> Outcome {
    let h = ObservationFunction::identity();
    let basis = BasisSet::monomial(1, 1).unwrap();
    let coef_errs: Vec<f64> = (1..=10)
        .map(|seed| {
            let e = gaussian().sample(10_000, seed).unwrap();
            let sol = galerkin_gain(&e, &basis, &h).unwrap();
            (sol.coefficients[0] - 1.0).abs()
        })
        .collect();
    let kernel_errs: Vec<f64> = (1..=10)
        .map(|seed| {
            let e = gaussian().sample(1000, seed).unwrap();
            let (_, sol) = kernel_gain(&e, &h, &KernelConfig::new(0.1), None).unwrap();
            interior_unit_gain_error(&e, &sol.gains)
        })
        .collect();
    let (c, k) = (median(&coef_errs), median(&kernel_errs));
    Outcome {
        pass: c < KALMAN_GALERKIN_TOL && k < GAIN_REL_TOL,
        detail: format!(
            "galerkin median |c1-1| = {c:.4} (< {KALMAN_GALERKIN_TOL}); kernel median |K-1| on |x|<2 = {k:.4} (< {GAIN_REL_TOL})"
        ),
    }
}

fn ac2() -> Outcome {
    let model = bimodal();
    let h = ObservationFunction::identity().with_mean(0.0);
    let coarse = exact_scalar_solution(&model, &h, GridSpec::new(-4.0, 4.0, 4001)).unwrap();
    let fine = exact_scalar_solution(&model, &h, GridSpec::new(-4.0, 4.0, 8001)).unwrap();
    let r1 = poisson_residual(&model, &coarse, &h).unwrap();
    let r2 = poisson_residual(&model, &fine, &h).unwrap();
    let ratio = r1 / r2;
    Outcome {
        pass: r1 < ORACLE_RESIDUAL_TOL && ratio > REFINEMENT_RATIO.0 && ratio < REFINEMENT_RATIO.1,
        detail: format!("residual at 4001 points = {r1:.3e}; refinement ratio = {ratio:.3}"),
    }
}

fn ac3() -> Outcome {
    let h = ObservationFunction::identity();
    let variants = [GradientVariant::PaperVerbatim, GradientVariant::Differentiated];
    let mut errs = [Vec::new(), Vec::new()];
    let mut verbatim_scale = Vec::new();
    for eps in [0.1, 0.2] {
        for seed in 1..=10 {
            let e = gaussian().sample(1000, seed).unwrap();
            let cfg = KernelConfig::new(eps);
            let m = build_markov(&e, eps).unwrap();
            let sol = solve_on(&m, &h.values(&e), &cfg, None).unwrap();
            for (slot, variant) in variants.iter().enumerate() {
                let g = m.gains(&sol.phi, &sol.forcing, *variant).unwrap();
                if eps == 0.1 {
                    errs[slot].push(interior_unit_gain_error(&e, &g));
                } else if *variant == GradientVariant::PaperVerbatim {
                    let inner: Vec<f64> =
                        e.as_slice().iter().zip(&g).filter(|(x, _)| x.abs() < 2.0).map(|(_, g)| *g).collect();
                    verbatim_scale.push(median(&inner));
                }
            }
        }
    }
    let med = [median(&errs[0]), median(&errs[1])];
    let passing: Vec<GradientVariant> =
        variants.iter().zip(med).filter(|(_, m)| *m < GAIN_REL_TOL).map(|(v, _)| *v).collect();
    let pass = passing.len() == 1 && passing[0] == GradientVariant::default();
    Outcome {
        pass,
        detail: format!(
            "median |K-1| paper_verbatim = {:.4}, differentiated = {:.4}; passing = {:?}; default = {:?}; verbatim median gain at eps=0.2 = {:.4}",
            med[0],
            med[1],
            passing,
            GradientVariant::default(),
            median(&verbatim_scale)
        ),
    }
}

fn ac4() -> Outcome {
    let h = ObservationFunction::identity();
    let basis = BasisSet::monomial(1, 5).unwrap();
    let seeds: Vec<u64> = (1..=20).collect();
    let mut sign_changes = 0;
    let mut solve_failures = 0;
    let mut kernel_positive = [0usize; 4];
    let eps_list = [0.1, 0.2, 0.4, 0.8];
    let mut min_kernel_gain = f64::INFINITY;
    for &seed in &seeds {
        let e = bimodal().sample(200, seed).unwrap();
        match galerkin_gain(&e, &basis, &h) {
            Ok(sol) => {
                if sol.gains(&e).iter().any(|g| *g < 0.0) {
                    sign_changes += 1;
                }
            }
            Err(_) => solve_failures += 1,
        }
        for (slot, eps) in eps_list.iter().enumerate() {
            if let Ok((_, sol)) = kernel_gain(&e, &h, &KernelConfig::new(*eps), None) {
                let lo = sol.gains.iter().cloned().fold(f64::INFINITY, f64::min);
                min_kernel_gain = min_kernel_gain.min(lo);
                if lo > 0.0 {
                    kernel_positive[slot] += 1;
                }
            }
        }
    }
    let fraction = sign_changes as f64 / seeds.len() as f64;
    let all_positive = kernel_positive.iter().all(|c| *c == seeds.len());
    Outcome {
        pass: fraction >= GIBBS_MIN_FRACTION && all_positive,
        detail: format!(
            "galerkin M=5 sign change in {sign_changes}/20 seeds ({solve_failures} solve failures); kernel all-positive seeds per eps {:?} = {:?}/20; min kernel gain {min_kernel_gain:.4}",
            eps_list, kernel_positive
        ),
    }
}

fn ac5() -> Outcome {
    let model = FilterModel::bimodal_benchmark(0.1, 0.3, 1.0).unwrap();
    let cfg = ParticleRunConfig {
        n_particles: 100,
        method: GainMethod::Kernel(KernelConfig::new(0.15)),
        record_particles: false,
    };
    let grid = GridSpec::new(-4.0, 4.0, 2001);
    let mut gaps = Vec::new();
    let mut prob_ok = 0;
    let mut completed = 0;
    let mut diverged = 0;
    for seed in 1..=20u64 {
        let path = synthesize_observations(&model, 0.8, 0.02, seed).unwrap();
        let run = run_fpf(&model, &path, &cfg, seed).unwrap();
        let (exact, _) = exact_run(&model, &path, grid, PosteriorForm::Printed, seed).unwrap();
        // A run that stopped early has no curve past the failure; its gap is unbounded.
        let gap = run
            .mean_series
            .iter()
            .zip(&exact.mean_series)
            .map(|(a, b)| if a.is_finite() { (a - b).abs() } else { f64::INFINITY })
            .fold(0.0, f64::max);
        gaps.push(gap);
        let p_run = *run.prob_series.last().unwrap();
        let p_exact = *exact.prob_series.last().unwrap();
        if p_run.is_finite() && p_run > p_exact - FILTER_PROB_SLACK {
            prob_ok += 1;
        }
        match &run.failure {
            None => completed += 1,
            Some(f) if f.message.contains("divergence") => diverged += 1,
            Some(_) => {}
        }
    }
    let med = median(&gaps);
    let prob_fraction = prob_ok as f64 / 20.0;
    let complete_fraction = completed as f64 / 20.0;
    Outcome {
        pass: med < FILTER_GAP_TOL
            && prob_fraction >= FILTER_PROB_MIN_FRACTION
            && complete_fraction >= FILTER_COMPLETE_MIN_FRACTION,
        detail: format!(
            "median mean sup-gap = {med:.4} (< {FILTER_GAP_TOL}); prob_gt_half ok in {prob_ok}/20 (>= {:.0}); runs completed {completed}/20 (>= {:.0}), particle divergence in {diverged}, solver stops in {}",
            FILTER_PROB_MIN_FRACTION * 20.0,
            FILTER_COMPLETE_MIN_FRACTION * 20.0,
            20 - completed - diverged
        ),
    }
}

/// `min_c sup |a - b - c|` over the grid.
fn gap_modulo_constant(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
    0.5 * (hi - lo)
}

fn ac6() -> Outcome {
    let model = bimodal();
    let h = ObservationFunction::identity();
    let oracle = exact_scalar_solution(&model, &h.clone().with_mean(0.0), GridSpec::new(-4.0, 4.0, 4001)).unwrap();
    let basis = BasisSet::monomial(1, 1).unwrap();
    let galerkin_medians: Vec<f64> = [100usize, 1000, 10_000]
        .iter()
        .map(|&n| {
            let errs: Vec<f64> = (1..=20)
                .map(|seed| {
                    let e = model.sample(n, seed).unwrap();
                    l2_error_vs_oracle(&galerkin_gain(&e, &basis, &h).unwrap(), &oracle).unwrap()
                })
                .collect();
            median(&errs)
        })
        .collect();

    let eps = 0.2;
    let cfg = KernelConfig::new(eps);
    let omega: Vec<f64> = GridSpec::new(-3.0, 3.0, 301).nodes();
    let reference_phi: Vec<f64> = {
        let e = model.sample(10_000, 10_000).unwrap();
        let (m, sol) = kernel_gain(&e, &h, &cfg, None).unwrap();
        omega.iter().map(|x| extend(&[*x], &m, &sol).unwrap()).collect()
    };
    let mut kernel_medians = Vec::new();
    let mut kernel_iqr = Vec::new();
    for n in [100usize, 200, 400, 800, 1600] {
        let gaps: Vec<f64> = (1..=10)
            .map(|seed| {
                let e = model.sample(n, seed).unwrap();
                let (m, sol) = kernel_gain(&e, &h, &cfg, None).unwrap();
                let phi: Vec<f64> = omega.iter().map(|x| extend(&[*x], &m, &sol).unwrap()).collect();
                gap_modulo_constant(&phi, &reference_phi)
            })
            .collect();
        kernel_medians.push(median(&gaps));
        kernel_iqr.push(quantile(&gaps, 0.75) - quantile(&gaps, 0.25));
    }
    Outcome {
        pass: non_increasing(&galerkin_medians) && non_increasing(&kernel_medians),
        detail: format!(
            "galerkin M=1 median L2 error over N=[100,1e3,1e4]: {}; kernel median sup-gap over N=[100..1600]: {} (IQR {})",
            fmt_list(&galerkin_medians),
            fmt_list(&kernel_medians),
            fmt_list(&kernel_iqr)
        ),
    }
}

fn ac7() -> Outcome {
    let mut rng = fpf_gain::density::seeded_rng(7);
    let h = ObservationFunction::new(|x: &[f64]| x[0] + 0.5 * x[0] * x[0]);
    let mut failures = Vec::new();
    let mut worst_ratio: f64 = 0.0;
    for case in 0..50 {
        let n = rng.random_range(2..=500usize);
        let d = rng.random_range(1..=2usize);
        let eps: f64 = rng.random_range(0.05..=1.0);
        let pts: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        let e = ParticleEnsemble::from_points(d, pts).unwrap();
        let cfg = KernelConfig::new(eps);
        let (m, sol) = match kernel_gain(&e, &h, &cfg, None) {
            Ok(v) => v,
            Err(err) => {
                failures.push(format!("case {case} (N={n}, d={d}, eps={eps:.3}): {err}"));
                continue;
            }
        };
        let t = m.matrix();
        let rows_ok = (0..n).all(|i| (t.row(i).sum() - 1.0).abs() <= ROW_SUM_TOL);
        let positive = t.iter().all(|v| *v > 0.0);
        let ratio = contraction_check(&m, 20, case).unwrap();
        worst_ratio = worst_ratio.max(ratio);
        let t_phi = m.apply(&sol.phi);
        let scale = 1.0 + sol.forcing.iter().fold(0.0f64, |a, f| a.max((eps * f).abs()));
        let residual = (0..n).map(|i| (t_phi[i] + eps * sol.forcing[i] - sol.phi[i]).abs()).fold(0.0, f64::max);
        let mean_phi = sol.phi.iter().sum::<f64>() / n as f64;

        let order: Vec<usize> = (0..n).rev().collect();
        let (mp, sp) = kernel_gain(&e.permuted(&order).unwrap(), &h, &cfg, None).unwrap();
        let tp = mp.matrix();
        let mut t_equivariant = true;
        for (a, &ia) in order.iter().enumerate() {
            for (b, &ib) in order.iter().enumerate() {
                if (tp[(a, b)] - t[(ia, ib)]).abs() > PERMUTATION_T_TOL * t[(ia, ib)].max(1e-300) {
                    t_equivariant = false;
                }
            }
        }
        let phi_scale = 1.0 + sol.phi.iter().fold(0.0f64, |a, p| a.max(p.abs()));
        let gain_scale = 1.0 + sol.gains.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        let solution_equivariant = order.iter().enumerate().all(|(a, &ia)| {
            (sp.phi[a] - sol.phi[ia]).abs() <= PERMUTATION_SOLUTION_TOL * phi_scale
                && (0..d).all(|l| (sp.gains[a * d + l] - sol.gains[ia * d + l]).abs() <= PERMUTATION_SOLUTION_TOL * gain_scale)
        });

        let checks = [
            ("row sums", rows_ok),
            ("positivity", positive),
            ("contraction", ratio < 1.0),
            ("residual", residual <= cfg.tol * scale),
            ("mean", mean_phi.abs() <= PHI_MEAN_TOL),
            ("permutation of T", t_equivariant),
            ("permutation of solution", solution_equivariant),
        ];
        for (name, ok) in checks {
            if !ok {
                failures.push(format!("case {case} (N={n}, d={d}, eps={eps:.3}): {name}"));
            }
        }
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("50/50 ensembles satisfy all invariants; worst contraction ratio {worst_ratio:.4}")
        } else {
            format!("{} violations: {}", failures.len(), failures.join("; "))
        },
    }
}

fn main() {
    let criteria: [(&str, &str, Duration, fn() -> Outcome); 7] = [
        ("AC-1", "Kalman-gain recovery", Duration::from_secs(30), ac1),
        ("AC-2", "oracle self-consistency", Duration::from_secs(1), ac2),
        ("AC-3", "gradient-formula arbitration", Duration::from_secs(10), ac3),
        ("AC-4", "Gibbs vs positivity", Duration::from_secs(60), ac4),
        ("AC-5", "filtering benchmark", Duration::from_secs(300), ac5),
        ("AC-6", "convergence trends", Duration::from_secs(600), ac6),
        ("AC-7", "operator invariants", Duration::from_secs(120), ac7),
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| a.starts_with("AC-"));
    let mut failed = 0;
    for (id, name, limit, run) in criteria {
        if filter.as_deref().is_some_and(|f| f != id) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= limit;
        let pass = outcome.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "{id} {} {name}: {} [{:.2}s, limit {}s{}]",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", over time" }
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
