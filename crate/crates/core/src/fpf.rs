//! Feedback particle filter simulation.
//!
//! Each particle follows the controlled update
//!
//! ```text
//! X^i <- X^i + a(X^i) dt + dB^i + K(X^i) (dZ - (h(X^i) + h_hat) / 2 dt)
//! ```
//!
//! with `h_hat` the particle mean of `h` and `K = grad phi` where `phi` solves
//! the weighted Poisson equation with right-hand side `(h - h_hat) / sigma_w^2`
//! for the current particle cloud. The gain is rebuilt from scratch every
//! step; the kernel solver warm-starts from the previous step's `Phi`.
//!
//! Alongside the particle filters this module runs the Kalman-Bucy filter
//! and, for the static model, the exact grid posterior.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::density::{seeded_rng, DensityModel, GridSpec, ObservationFunction, ParticleEnsemble};
use crate::error::{GainError, Result};
use crate::galerkin::{galerkin_gain, BasisKind, BasisSet};
use crate::kernel::{build_markov, solve_on, GradientVariant, KernelConfig};

/// RNG stream for the observation noise of a seed.
pub const OBSERVATION_STREAM: u64 = 0;
/// RNG stream for the initial particle draw of a seed.
pub const PARTICLE_STREAM: u64 = 1;
/// RNG stream for particle process noise of a seed.
pub const PROCESS_STREAM: u64 = 2;

/// Generator for one `(seed, stream)` pair.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = seeded_rng(seed);
    rng.set_stream(stream);
    rng
}

type Drift = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Signal and observation model.
///
/// `dX = a(X) dt + process_noise dB`, `dZ = h(X) dt + sigma_w dW`.
#[derive(Clone)]
pub struct FilterModel {
    pub drift: Option<Drift>,
    pub process_noise: f64,
    pub h: ObservationFunction,
    pub sigma_w: f64,
    pub prior: DensityModel,
    pub x0: Vec<f64>,
}

impl std::fmt::Debug for FilterModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FilterModel")
            .field("static", &self.drift.is_none())
            .field("process_noise", &self.process_noise)
            .field("sigma_w", &self.sigma_w)
            .field("prior", &self.prior)
            .field("x0", &self.x0)
            .finish()
    }
}

impl FilterModel {
    /// Static state `dX = 0` observed through `h`.
    pub fn static_model(prior: DensityModel, h: ObservationFunction, sigma_w: f64, x0: Vec<f64>) -> Result<Self> {
        let model = Self {
            drift: None,
            process_noise: 0.0,
            h,
            sigma_w,
            prior,
            x0,
        };
        model.validate()?;
        Ok(model)
    }

    /// Bimodal benchmark: prior `N(-1, s^2)/2 + N(1, s^2)/2`, `h(x) = x`.
    pub fn bimodal_benchmark(prior_sigma: f64, sigma_w: f64, x0: f64) -> Result<Self> {
        Self::static_model(
            DensityModel::symmetric_bimodal(1.0, prior_sigma)?,
            ObservationFunction::identity(),
            sigma_w,
            vec![x0],
        )
    }

    pub fn with_drift<F>(mut self, drift: F, process_noise: f64) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        self.drift = Some(Arc::new(drift));
        self.process_noise = process_noise;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_w > 0.0) || !self.sigma_w.is_finite() {
            return Err(GainError::InvalidArgument(format!(
                "sigma_w must be positive, got {}",
                self.sigma_w
            )));
        }
        if self.x0.len() != self.prior.dim() {
            return Err(GainError::DimensionMismatch {
                expected: self.prior.dim(),
                actual: self.x0.len(),
            });
        }
        if !(self.process_noise >= 0.0) {
            return Err(GainError::InvalidArgument("process noise must be non-negative".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    /// Poisson right-hand side `h / sigma_w^2`, centered empirically.
    fn gain_observation(&self) -> ObservationFunction {
        let s2 = self.sigma_w * self.sigma_w;
        let inner = self.h.clone();
        ObservationFunction::new(move |x| inner.eval(x) / s2)
    }
}

/// Sampled observation path on a uniform time grid; `Z_0 = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationPath {
    pub dt: f64,
    pub times: Vec<f64>,
    pub z_values: Vec<f64>,
    pub increments: Vec<f64>,
    /// Hidden state at each grid time.
    pub states: Vec<Vec<f64>>,
}

impl ObservationPath {
    pub fn steps(&self) -> usize {
        self.increments.len()
    }
}

fn step_count(t_end: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(t_end >= dt) || !t_end.is_finite() {
        return Err(GainError::InvalidArgument(format!(
            "need 0 < dt <= T, got dt = {dt}, T = {t_end}"
        )));
    }
    Ok((t_end / dt).round() as usize)
}

/// Simulate the signal from `x0` and the observation increments
/// `dZ_k = h(X_k) dt + sigma_w sqrt(dt) xi_k`.
pub fn synthesize_observations(model: &FilterModel, t_end: f64, dt: f64, seed: u64) -> Result<ObservationPath> {
    model.validate()?;
    let steps = step_count(t_end, dt)?;
    let mut rng = stream_rng(seed, OBSERVATION_STREAM);
    let sq = dt.sqrt();
    let mut x = model.x0.clone();
    let mut times = Vec::with_capacity(steps + 1);
    let mut z_values = Vec::with_capacity(steps + 1);
    let mut increments = Vec::with_capacity(steps);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(0.0);
    z_values.push(0.0);
    states.push(x.clone());
    let mut z = 0.0;
    for k in 0..steps {
        let xi: f64 = rng.sample(StandardNormal);
        let dz = model.h.eval(&x) * dt + model.sigma_w * sq * xi;
        if let Some(drift) = &model.drift {
            let a = drift(&x);
            for (xl, al) in x.iter_mut().zip(a) {
                let db: f64 = rng.sample(StandardNormal);
                *xl += al * dt + model.process_noise * sq * db;
            }
        }
        z += dz;
        increments.push(dz);
        z_values.push(z);
        times.push((k + 1) as f64 * dt);
        states.push(x.clone());
    }
    Ok(ObservationPath {
        dt,
        times,
        z_values,
        increments,
        states,
    })
}

/// One Euler step of the controlled particle system.
///
/// `gains` is `N x d` row-major, `h_values` holds `h(X^i)`, and
/// `process_draws` (when present) holds `N x d` standard normal draws scaled
/// by `process_noise sqrt(dt)` inside.
#[allow(clippy::too_many_arguments)]
pub fn fpf_step(
    particles: &ParticleEnsemble,
    gains: &[f64],
    h_values: &[f64],
    dz: f64,
    dt: f64,
    drift: Option<&(dyn Fn(&[f64]) -> Vec<f64> + Send + Sync)>,
    process_noise: f64,
    process_draws: Option<&[f64]>,
    step: usize,
) -> Result<ParticleEnsemble> {
    let n = particles.len();
    let d = particles.dim();
    if gains.len() != n * d {
        return Err(GainError::DimensionMismatch {
            expected: n * d,
            actual: gains.len(),
        });
    }
    if h_values.len() != n {
        return Err(GainError::DimensionMismatch {
            expected: n,
            actual: h_values.len(),
        });
    }
    let h_hat = h_values.iter().sum::<f64>() / n as f64;
    let sq = dt.sqrt();
    let mut out = Vec::with_capacity(n * d);
    for (i, x) in particles.iter().enumerate() {
        let innovation = dz - 0.5 * (h_values[i] + h_hat) * dt;
        let a = drift.map(|f| f(x));
        for l in 0..d {
            let mut v = x[l] + gains[i * d + l] * innovation;
            if let Some(a) = &a {
                v += a[l] * dt;
            }
            if let Some(draws) = process_draws {
                v += process_noise * sq * draws[i * d + l];
            }
            if !v.is_finite() {
                return Err(GainError::ParticleDivergence { index: i, step });
            }
            out.push(v);
        }
    }
    Ok(particles.with_points(out))
}

/// Gain approximation used by a particle filter run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GainMethod {
    Galerkin { basis_size: usize, basis: BasisKind },
    Kernel(KernelConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMethod {
    Kalman,
    FpfGalerkin,
    FpfKernel,
    Exact,
}

impl FilterMethod {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Kalman => "kalman",
            Self::FpfGalerkin => "fpf_galerkin",
            Self::FpfKernel => "fpf_kernel",
            Self::Exact => "exact",
        }
    }
}

/// Why a particle filter run stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub step: usize,
    pub t: f64,
    pub message: String,
}

/// Metric series of one filter over the time grid. Entries after a failure are NaN.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterRun {
    pub method: FilterMethod,
    pub seed: u64,
    pub times: Vec<f64>,
    pub mean_series: Vec<f64>,
    /// `P[X_t > 1/2 | Z_t]`.
    pub prob_series: Vec<f64>,
    /// `P[|X_t - X_0| < 1/2 | Z_t]`.
    pub prob_near_x0_series: Vec<f64>,
    /// Particle snapshots per grid time (particle filters, when recorded).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub particle_history: Option<Vec<Vec<f64>>>,
    pub failure: Option<RunFailure>,
    pub config: serde_json::Value,
}

impl FilterRun {
    fn new(method: FilterMethod, seed: u64, times: &[f64], config: serde_json::Value) -> Self {
        let n = times.len();
        Self {
            method,
            seed,
            times: times.to_vec(),
            mean_series: vec![f64::NAN; n],
            prob_series: vec![f64::NAN; n],
            prob_near_x0_series: vec![f64::NAN; n],
            particle_history: None,
            failure: None,
            config,
        }
    }

    fn record(&mut self, k: usize, m: Metrics) {
        self.mean_series[k] = m.mean;
        self.prob_series[k] = m.prob_gt_half;
        self.prob_near_x0_series[k] = m.prob_near_x0;
    }

    pub fn diverged_at_t(&self) -> Option<f64> {
        self.failure.as_ref().map(|f| f.t)
    }

    /// Write `t,mean,prob_gt_half,prob_near_x0` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "mean", "prob_gt_half", "prob_near_x0"])?;
        for k in 0..self.times.len() {
            w.serialize((
                self.times[k],
                self.mean_series[k],
                self.prob_series[k],
                self.prob_near_x0_series[k],
            ))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Write particle snapshots as `t,i,x` rows (scalar state).
    pub fn write_particles_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "i", "x"])?;
        if let Some(history) = &self.particle_history {
            for (t, snapshot) in self.times.iter().zip(history) {
                for (i, x) in snapshot.iter().enumerate() {
                    w.serialize((t, i, x))?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Filter mean and the two probability metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mean: f64,
    pub prob_gt_half: f64,
    pub prob_near_x0: f64,
}

/// Empirical metrics of scalar particles.
pub fn particle_metrics(particles: &[f64], x0: f64) -> Metrics {
    let n = particles.len() as f64;
    Metrics {
        mean: particles.iter().sum::<f64>() / n,
        prob_gt_half: particles.iter().filter(|x| **x > 0.5).count() as f64 / n,
        prob_near_x0: particles.iter().filter(|x| (**x - x0).abs() < 0.5).count() as f64 / n,
    }
}

/// Metrics of a normalized grid density (`sum p dx = 1`).
pub fn grid_metrics(grid: &[f64], density: &[f64], x0: f64) -> Metrics {
    let dx = grid[1] - grid[0];
    let mut m = Metrics {
        mean: 0.0,
        prob_gt_half: 0.0,
        prob_near_x0: 0.0,
    };
    for (x, p) in grid.iter().zip(density) {
        m.mean += x * p * dx;
        if *x > 0.5 {
            m.prob_gt_half += p * dx;
        }
        if (x - x0).abs() < 0.5 {
            m.prob_near_x0 += p * dx;
        }
    }
    m
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Metrics of `N(mean, var)`.
pub fn gaussian_metrics(mean: f64, var: f64, x0: f64) -> Metrics {
    let s = var.sqrt();
    Metrics {
        mean,
        prob_gt_half: 1.0 - normal_cdf((0.5 - mean) / s),
        prob_near_x0: normal_cdf((x0 + 0.5 - mean) / s) - normal_cdf((x0 - 0.5 - mean) / s),
    }
}

/// Scalar linear-Gaussian model `dX = a X dt + sqrt(q) dB`, `dZ = c X dt + sigma_w dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearScalarModel {
    pub a: f64,
    pub c: f64,
    pub q: f64,
    pub sigma_w: f64,
}

impl LinearScalarModel {
    pub fn static_identity(sigma_w: f64) -> Self {
        Self {
            a: 0.0,
            c: 1.0,
            q: 0.0,
            sigma_w,
        }
    }
}

/// Kalman-Bucy mean and variance series.
#[derive(Debug, Clone)]
pub struct KalmanSeries {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

/// Euler-discretized Kalman-Bucy filter:
/// `K = Sigma c / sigma_w^2`, `m <- m + a m dt + K (dZ - c m dt)`,
/// `Sigma <- Sigma + (2 a Sigma + q - Sigma^2 c^2 / sigma_w^2) dt`.
pub fn kalman_bucy(model: &LinearScalarModel, path: &ObservationPath, init_mean: f64, init_var: f64) -> Result<KalmanSeries> {
    if !(model.sigma_w > 0.0) || !(init_var >= 0.0) {
        return Err(GainError::InvalidArgument(
            "Kalman-Bucy needs sigma_w > 0 and a non-negative initial variance".into(),
        ));
    }
    let dt = path.dt;
    let s2 = model.sigma_w * model.sigma_w;
    let mut m = init_mean;
    let mut v = init_var;
    let mut means = vec![m];
    let mut variances = vec![v];
    for (k, dz) in path.increments.iter().enumerate() {
        let gain = v * model.c / s2;
        m += model.a * m * dt + gain * (dz - model.c * m * dt);
        v += (2.0 * model.a * v + model.q - v * v * model.c * model.c / s2) * dt;
        if v < 0.0 {
            return Err(GainError::NegativeVariance { step: k + 1 });
        }
        means.push(m);
        variances.push(v);
    }
    Ok(KalmanSeries { means, variances })
}

/// Kalman-Bucy run packaged with the filter metrics.
pub fn kalman_bucy_run(
    model: &LinearScalarModel,
    path: &ObservationPath,
    init_mean: f64,
    init_var: f64,
    x0: f64,
    seed: u64,
) -> Result<FilterRun> {
    let series = kalman_bucy(model, path, init_mean, init_var)?;
    let config = serde_json::json!({ "model": model, "init_mean": init_mean, "init_var": init_var });
    let mut run = FilterRun::new(FilterMethod::Kalman, seed, &path.times, config);
    for k in 0..path.times.len() {
        run.record(k, gaussian_metrics(series.means[k], series.variances[k], x0));
    }
    Ok(run)
}

/// Exact posterior of a static model on a grid, one density per grid time.
#[derive(Debug, Clone)]
pub struct PosteriorGrid {
    pub grid: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
}

impl PosteriorGrid {
    pub fn step(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }
}

/// Exponent scaling of the closed-form static posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorForm {
    /// `exp(h Z_t / (2 sigma_w^2) - h^2 t / (4 sigma_w^2))`.
    #[default]
    Printed,
    /// `exp(h Z_t / sigma_w^2 - h^2 t / (2 sigma_w^2))`, the likelihood of
    /// `dZ = h dt + sigma_w dW`.
    Bayes,
}

impl PosteriorForm {
    fn divisor(self) -> f64 {
        match self {
            Self::Printed => 2.0,
            Self::Bayes => 1.0,
        }
    }
}

/// Closed-form posterior of a static scalar model on a grid,
/// `p(x, t) ~ exp(h(x) Z_t / (c sigma_w^2) - h(x)^2 t / (2 c sigma_w^2)) p_0(x)`
/// with `c` set by `form`, normalized so that `sum p dx = 1`.
pub fn exact_posterior(
    prior: &DensityModel,
    path: &ObservationPath,
    h: &ObservationFunction,
    sigma_w: f64,
    grid_spec: GridSpec,
    form: PosteriorForm,
) -> Result<PosteriorGrid> {
    if prior.dim() != 1 {
        return Err(GainError::DimensionMismatch {
            expected: 1,
            actual: prior.dim(),
        });
    }
    if grid_spec.n_points < 2 || !(grid_spec.hi > grid_spec.lo) {
        return Err(GainError::InvalidArgument("posterior grid needs hi > lo and 2+ points".into()));
    }
    let grid = grid_spec.nodes();
    let dx = grid_spec.step();
    let log_prior: Vec<f64> = grid.iter().map(|x| prior.pdf(&[*x]).ln()).collect();
    let hv: Vec<f64> = grid.iter().map(|x| h.eval(&[*x])).collect();
    let s2 = form.divisor() * sigma_w * sigma_w;
    let weights = path
        .times
        .iter()
        .zip(&path.z_values)
        .map(|(t, z)| {
            let logw: Vec<f64> = hv
                .iter()
                .zip(&log_prior)
                .map(|(h, lp)| h * z / s2 - h * h * t / (2.0 * s2) + lp)
                .collect();
            let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
            let total = w.iter().sum::<f64>() * dx;
            w.iter_mut().for_each(|v| *v /= total);
            w
        })
        .collect();
    Ok(PosteriorGrid { grid, weights })
}

/// Options for a particle filter run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleRunConfig {
    pub n_particles: usize,
    pub method: GainMethod,
    #[serde(default)]
    pub record_particles: bool,
}

/// Run a feedback particle filter along an observation path.
///
/// Solver failures and particle divergence end the run and are recorded in
/// [`FilterRun::failure`]; the remaining series entries stay NaN.
pub fn run_fpf(model: &FilterModel, path: &ObservationPath, cfg: &ParticleRunConfig, seed: u64) -> Result<FilterRun> {
    model.validate()?;
    if model.dim() != 1 {
        return Err(GainError::DimensionMismatch {
            expected: 1,
            actual: model.dim(),
        });
    }
    let method = match cfg.method {
        GainMethod::Galerkin { .. } => FilterMethod::FpfGalerkin,
        GainMethod::Kernel(k) => {
            k.validate()?;
            if cfg.n_particles < 2 {
                return Err(GainError::InvalidArgument(format!(
                    "kernel gain needs at least 2 particles, got {}",
                    cfg.n_particles
                )));
            }
            FilterMethod::FpfKernel
        }
    };
    let mut particles = sample_with_stream(&model.prior, cfg.n_particles, seed)?;
    let mut process_rng = stream_rng(seed, PROCESS_STREAM);
    let h_gain = model.gain_observation();
    let x0 = model.x0[0];
    let mut run = FilterRun::new(method, seed, &path.times, serde_json::to_value(cfg)?);
    let mut history = cfg.record_particles.then(Vec::new);
    run.record(0, particle_metrics(particles.as_slice(), x0));
    if let Some(h) = history.as_mut() {
        h.push(particles.as_slice().to_vec());
    }
    let mut warm: Option<Vec<f64>> = None;
    for (k, dz) in path.increments.iter().enumerate() {
        let gains = match &cfg.method {
            GainMethod::Galerkin { basis_size, basis } => {
                let set = match basis {
                    BasisKind::Monomial => BasisSet::monomial(1, *basis_size),
                    BasisKind::Hermite => BasisSet::hermite(&particles, *basis_size),
                }?;
                galerkin_gain(&particles, &set, &h_gain).map(|sol| sol.gains(&particles))
            }
            GainMethod::Kernel(kcfg) => build_markov(&particles, kcfg.epsilon).and_then(|markov| {
                let sol = solve_on(&markov, &h_gain.values(&particles), kcfg, warm.as_deref())?;
                warm = Some(sol.phi.clone());
                Ok(sol.gains)
            }),
        };
        let t = path.times[k + 1];
        let draws: Option<Vec<f64>> = (model.process_noise > 0.0).then(|| {
            (0..particles.as_slice().len())
                .map(|_| process_rng.sample(StandardNormal))
                .collect()
        });
        let next = gains.and_then(|g| {
            fpf_step(
                &particles,
                &g,
                &model.h.values(&particles),
                *dz,
                path.dt,
                model.drift.as_deref(),
                model.process_noise,
                draws.as_deref(),
                k + 1,
            )
        });
        match next {
            Ok(p) => particles = p,
            Err(e) => {
                run.failure = Some(RunFailure {
                    step: k + 1,
                    t,
                    message: e.to_string(),
                });
                break;
            }
        }
        run.record(k + 1, particle_metrics(particles.as_slice(), x0));
        if let Some(h) = history.as_mut() {
            h.push(particles.as_slice().to_vec());
        }
    }
    run.particle_history = history;
    Ok(run)
}

/// Initial particles for a seed, drawn from the prior on the particle stream.
pub fn sample_with_stream(prior: &DensityModel, n: usize, seed: u64) -> Result<ParticleEnsemble> {
    prior.sample_from(n, &mut stream_rng(seed, PARTICLE_STREAM), Some(seed))
}

/// Exact posterior packaged as a run.
pub fn exact_run(
    model: &FilterModel,
    path: &ObservationPath,
    grid_spec: GridSpec,
    form: PosteriorForm,
    seed: u64,
) -> Result<(FilterRun, PosteriorGrid)> {
    if model.drift.is_some() {
        return Err(GainError::InvalidArgument("exact posterior requires a static model".into()));
    }
    let post = exact_posterior(&model.prior, path, &model.h, model.sigma_w, grid_spec, form)?;
    let config = serde_json::json!({ "grid": grid_spec, "form": form });
    let mut run = FilterRun::new(FilterMethod::Exact, seed, &path.times, config);
    for (k, w) in post.weights.iter().enumerate() {
        run.record(k, grid_metrics(&post.grid, w, model.x0[0]));
    }
    Ok((run, post))
}

/// One filter entry of an experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum FilterSpec {
    Kalman(KalmanParams),
    FpfGalerkin(GalerkinParams),
    FpfKernel(KernelParams),
    Exact(ExactParams),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KalmanParams {
    /// Defaults to the prior mean.
    pub init_mean: Option<f64>,
    /// Defaults to the prior variance.
    pub init_var: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalerkinParams {
    pub n: usize,
    #[serde(rename = "M")]
    pub basis_size: usize,
    #[serde(default = "default_basis")]
    pub basis: BasisKind,
    #[serde(default)]
    pub record_particles: bool,
}

fn default_basis() -> BasisKind {
    BasisKind::Monomial
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelParams {
    pub n: usize,
    pub epsilon: f64,
    #[serde(default = "crate::fpf::default_kernel_tol")]
    pub tol: f64,
    #[serde(default = "crate::fpf::default_kernel_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub gradient_variant: GradientVariant,
    #[serde(default)]
    pub record_particles: bool,
}

pub(crate) fn default_kernel_tol() -> f64 {
    crate::kernel::DEFAULT_TOL
}

pub(crate) fn default_kernel_max_iter() -> usize {
    crate::kernel::DEFAULT_MAX_ITER
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExactParams {
    pub grid_points: usize,
    pub lo: f64,
    pub hi: f64,
    pub form: PosteriorForm,
}

impl Default for ExactParams {
    fn default() -> Self {
        Self {
            grid_points: 2001,
            lo: -4.0,
            hi: 4.0,
            form: PosteriorForm::Printed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub prior: DensityModel,
    pub sigma_w: f64,
    pub x0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    #[serde(rename = "T")]
    pub t_end: f64,
    pub dt: f64,
}

/// Filtering experiment configuration (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub time: TimeSpec,
    pub filters: Vec<FilterSpec>,
    pub seeds: Vec<u64>,
    pub output_dir: String,
}

/// Benchmark defaults.
pub mod benchmark {
    pub const X0: f64 = 1.0;
    pub const SIGMA_W: f64 = 0.3;
    pub const T_END: f64 = 0.8;
    pub const DT: f64 = 0.02;
    pub const N_PARTICLES: usize = 100;
    pub const EPSILON: f64 = 0.15;
    pub const PRIOR_SIGMA: f64 = 0.1;
    pub const GALERKIN_BASIS: usize = 5;
}

impl ExperimentConfig {
    /// The bimodal filtering benchmark with all four filters.
    pub fn benchmark(seeds: Vec<u64>, output_dir: &str) -> Self {
        use benchmark::*;
        Self {
            model: ModelSpec {
                prior: DensityModel::symmetric_bimodal(1.0, PRIOR_SIGMA).expect("valid benchmark prior"),
                sigma_w: SIGMA_W,
                x0: X0,
            },
            time: TimeSpec { t_end: T_END, dt: DT },
            filters: vec![
                FilterSpec::Kalman(KalmanParams::default()),
                FilterSpec::FpfGalerkin(GalerkinParams {
                    n: N_PARTICLES,
                    basis_size: GALERKIN_BASIS,
                    basis: BasisKind::Monomial,
                    record_particles: false,
                }),
                FilterSpec::FpfKernel(KernelParams {
                    n: N_PARTICLES,
                    epsilon: EPSILON,
                    tol: crate::kernel::DEFAULT_TOL,
                    max_iter: crate::kernel::DEFAULT_MAX_ITER,
                    gradient_variant: GradientVariant::default(),
                    record_particles: false,
                }),
                FilterSpec::Exact(ExactParams::default()),
            ],
            seeds,
            output_dir: output_dir.to_string(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.prior.dim() != 1 {
            return Err(GainError::InvalidArgument("experiments use a scalar state".into()));
        }
        step_count(self.time.t_end, self.time.dt)?;
        if !(self.model.sigma_w > 0.0) {
            return Err(GainError::InvalidArgument("sigma_w must be positive".into()));
        }
        if self.filters.is_empty() {
            return Err(GainError::InvalidArgument("no filters configured".into()));
        }
        Ok(())
    }

    pub fn filter_model(&self) -> Result<FilterModel> {
        FilterModel::static_model(
            self.model.prior.clone(),
            ObservationFunction::identity(),
            self.model.sigma_w,
            vec![self.model.x0],
        )
    }
}

/// Run every configured filter for one seed on a shared observation path.
///
/// Configuration and path errors are returned; solver failures inside a
/// particle filter are recorded in that run.
pub fn run_experiment(config: &ExperimentConfig, seed: u64) -> Result<Vec<FilterRun>> {
    config.validate()?;
    let model = config.filter_model()?;
    let path = synthesize_observations(&model, config.time.t_end, config.time.dt, seed)?;
    let x0 = config.model.x0;
    let mut runs = Vec::with_capacity(config.filters.len());
    for spec in &config.filters {
        let run = match spec {
            FilterSpec::Kalman(p) => {
                let cov = model.prior.covariance()[0][0];
                kalman_bucy_run(
                    &LinearScalarModel::static_identity(model.sigma_w),
                    &path,
                    p.init_mean.unwrap_or(model.prior.mean()[0]),
                    p.init_var.unwrap_or(cov),
                    x0,
                    seed,
                )?
            }
            FilterSpec::FpfGalerkin(p) => run_fpf(
                &model,
                &path,
                &ParticleRunConfig {
                    n_particles: p.n,
                    method: GainMethod::Galerkin {
                        basis_size: p.basis_size,
                        basis: p.basis,
                    },
                    record_particles: p.record_particles,
                },
                seed,
            )?,
            FilterSpec::FpfKernel(p) => run_fpf(
                &model,
                &path,
                &ParticleRunConfig {
                    n_particles: p.n,
                    method: GainMethod::Kernel(KernelConfig {
                        epsilon: p.epsilon,
                        tol: p.tol,
                        max_iter: p.max_iter,
                        gradient_variant: p.gradient_variant,
                    }),
                    record_particles: p.record_particles,
                },
                seed,
            )?,
            FilterSpec::Exact(p) => exact_run(&model, &path, GridSpec::new(p.lo, p.hi, p.grid_points), p.form, seed)?.0,
        };
        runs.push(run);
    }
    Ok(runs)
}
