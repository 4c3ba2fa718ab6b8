use fpf_gain::fpf::{
    exact_posterior, fpf_step, grid_metrics, kalman_bucy, run_experiment, stream_rng,
    synthesize_observations, ExperimentConfig, FilterMethod, FilterModel, LinearScalarModel,
    PosteriorForm,
};
use fpf_gain::{DensityModel, GridSpec, ObservationFunction};
use rand::Rng;
use rand_distr::StandardNormal;

#[test]
fn constant_kalman_gain_fpf_tracks_kalman_bucy() {
    let (a, sigma_w, n) = (-0.5, 0.5, 10_000);
    let model = FilterModel::static_model(
        DensityModel::gaussian_1d(0.0, 1.0).unwrap(),
        ObservationFunction::identity(),
        sigma_w,
        vec![0.8],
    )
    .unwrap()
    .with_drift(move |x: &[f64]| vec![a * x[0]], 1.0);
    let path = synthesize_observations(&model, 1.0, 0.01, 21).unwrap();
    let lin = LinearScalarModel { a, c: 1.0, q: 1.0, sigma_w };
    let kb = kalman_bucy(&lin, &path, 0.0, 1.0).unwrap();

    let mut particles = model.prior.sample(n, 5).unwrap();
    let mut rng = stream_rng(5, 2);
    let drift = model.drift.clone().unwrap();
    for (k, dz) in path.increments.iter().enumerate() {
        let gain = kb.variances[k] / (sigma_w * sigma_w);
        let h = particles.as_slice().to_vec();
        let draws: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        particles = fpf_step(&particles, &vec![gain; n], &h, *dz, path.dt, Some(&*drift), 1.0, Some(&draws), k + 1)
            .unwrap();
        let xs = particles.as_slice();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (kb.variances[k + 1] / n as f64).sqrt();
        assert!((mean - kb.means[k + 1]).abs() < 3.0 * se, "step {k}: {mean} vs {}", kb.means[k + 1]);
        let var_se = kb.variances[k + 1] * (2.0 / n as f64).sqrt();
        assert!((var - kb.variances[k + 1]).abs() < 4.0 * var_se + 2e-3, "step {k}: var {var}");
    }
}

#[test]
fn observation_noise_has_expected_variance() {
    let (sigma_w, dt) = (0.3, 0.02);
    let model = FilterModel::bimodal_benchmark(0.1, sigma_w, 1.0).unwrap();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut count = 0.0;
    for seed in 0..1000 {
        let path = synthesize_observations(&model, 0.8, dt, seed).unwrap();
        assert_eq!(path.increments.len(), 40);
        for dz in &path.increments {
            let r = dz - dt;
            sum += r;
            sum_sq += r * r;
            count += 1.0;
        }
    }
    let mean = sum / count;
    let var = sum_sq / count - mean * mean;
    let expected = sigma_w * sigma_w * dt;
    // Relative standard error of a sample variance is sqrt(2 / count).
    assert!((var / expected - 1.0).abs() < 4.0 * (2.0 / count).sqrt());
    assert!(mean.abs() < 4.0 * (expected / count).sqrt());
}

#[test]
fn posterior_concentrates_on_true_mode() {
    let model = FilterModel::bimodal_benchmark(0.1, 0.3, 1.0).unwrap();
    let grid = GridSpec::new(-4.0, 4.0, 2001);
    let mut majority = 0;
    for seed in 0..100 {
        let path = synthesize_observations(&model, 0.8, 0.02, seed).unwrap();
        let post = exact_posterior(&model.prior, &path, &model.h, 0.3, grid, PosteriorForm::Printed).unwrap();
        let last = post.weights.last().unwrap();
        let positive: f64 = post.grid.iter().zip(last).filter(|(x, _)| **x > 0.0).map(|(_, p)| p).sum::<f64>() * post.step();
        if positive > 0.9 {
            majority += 1;
        }
        let m = grid_metrics(&post.grid, last, 1.0);
        assert!(m.prob_gt_half <= 1.0 + 1e-10 && m.prob_gt_half >= 0.0);
    }
    assert!(majority >= 95, "{majority} of 100 seeds put 0.9 mass on x > 0");
}

#[test]
fn experiment_is_deterministic_and_records_failures() {
    let cfg = ExperimentConfig::benchmark(vec![3], "unused");
    let a = run_experiment(&cfg, 3).unwrap();
    let b = run_experiment(&cfg, 3).unwrap();
    for (ra, rb) in a.iter().zip(&b) {
        assert_eq!(ra.method, rb.method);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ra.mean_series), bits(&rb.mean_series));
        assert_eq!(bits(&ra.prob_series), bits(&rb.prob_series));
        if let Some(f) = &ra.failure {
            assert!(ra.mean_series[f.step].is_nan());
            assert!(ra.mean_series[f.step - 1].is_finite());
        } else {
            assert!(ra.mean_series.iter().all(|m| m.is_finite()));
        }
    }
    let methods: Vec<_> = a.iter().map(|r| r.method).collect();
    assert_eq!(
        methods,
        [FilterMethod::Kalman, FilterMethod::FpfGalerkin, FilterMethod::FpfKernel, FilterMethod::Exact]
    );
}
