//! Mixture-of-Gaussians densities, seeded particle ensembles and the exact
//! one-dimensional Poisson-equation oracle.
//!
//! The oracle solves `-(1/rho) d/dx(rho dphi/dx) = h - h_hat` on a uniform
//! grid. Integrating once gives the gain
//!
//! ```text
//! gain(x) = -(1/rho(x)) * integral_{lo}^{x} rho(z) (h(z) - h_hat) dz
//! ```
//!
//! and integrating the gain gives `phi`, which is then shifted to have zero
//! `rho`-weighted mean. Both integrals are cumulative trapezoid sums with the
//! Euler-Maclaurin endpoint correction, so the oracle error is far below the
//! second-order differencing error that [`poisson_residual`] measures.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GainError, Result};

/// Tolerance on the mixture weights summing to one.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Minimum probability mass the oracle grid must hold.
pub const MIN_GRID_MASS: f64 = 1.0 - 1e-8;

/// Densities below this value inside the oracle grid are treated as underflow.
pub const DENSITY_FLOOR: f64 = 1e-280;

/// Half-width of the default oracle grid in units of the largest component
/// standard deviation.
pub const DEFAULT_TRUNCATION_SIGMAS: f64 = 8.0;

/// Build a seeded instance of the generator used for every random draw in the
/// crate (ChaCha8, portable and bit-reproducible across platforms).
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One weighted Gaussian component of a [`DensityModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct Factored {
    chol: DMatrix<f64>,
    inv: DMatrix<f64>,
    log_norm: f64,
}

/// A finite Gaussian mixture on `R^d`.
#[derive(Clone, Serialize, Deserialize)]
#[serde(try_from = "RawDensityModel", into = "RawDensityModel")]
pub struct DensityModel {
    components: Vec<Component>,
    dim: usize,
    factored: Vec<Factored>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDensityModel {
    components: Vec<Component>,
}

impl TryFrom<RawDensityModel> for DensityModel {
    type Error = GainError;

    fn try_from(raw: RawDensityModel) -> Result<Self> {
        DensityModel::new(raw.components)
    }
}

impl From<DensityModel> for RawDensityModel {
    fn from(model: DensityModel) -> Self {
        RawDensityModel {
            components: model.components,
        }
    }
}

impl fmt::Debug for DensityModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DensityModel")
            .field("dim", &self.dim)
            .field("components", &self.components)
            .finish()
    }
}

impl PartialEq for DensityModel {
    fn eq(&self, other: &Self) -> bool {
        self.components == other.components
    }
}

impl DensityModel {
    /// Validate and factor the components.
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| GainError::InvalidModel("mixture has no components".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(GainError::InvalidModel("dimension must be positive".into()));
        }
        let mut total = 0.0;
        let mut factored = Vec::with_capacity(components.len());
        for (idx, c) in components.iter().enumerate() {
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(GainError::InvalidModel(format!(
                    "component {idx}: weight {} is not positive",
                    c.weight
                )));
            }
            total += c.weight;
            if c.mean.len() != dim || c.cov.len() != dim || c.cov.iter().any(|r| r.len() != dim) {
                return Err(GainError::InvalidModel(format!(
                    "component {idx}: mean/covariance shape does not match dimension {dim}"
                )));
            }
            if c.mean.iter().any(|v| !v.is_finite()) {
                return Err(GainError::InvalidModel(format!("component {idx}: non-finite mean")));
            }
            let cov = DMatrix::from_fn(dim, dim, |i, j| c.cov[i][j]);
            let asym = (0..dim)
                .flat_map(|i| (0..dim).map(move |j| (i, j)))
                .map(|(i, j)| (cov[(i, j)] - cov[(j, i)]).abs())
                .fold(0.0, f64::max);
            let scale = cov.amax().max(f64::MIN_POSITIVE);
            if asym > 1e-12 * scale {
                return Err(GainError::InvalidModel(format!(
                    "component {idx}: covariance is not symmetric"
                )));
            }
            let eig = cov.clone().symmetric_eigenvalues();
            if eig.iter().any(|&l| !(l > 0.0)) {
                return Err(GainError::InvalidModel(format!(
                    "component {idx}: covariance is not positive-definite"
                )));
            }
            let chol = cov
                .clone()
                .cholesky()
                .ok_or_else(|| {
                    GainError::InvalidModel(format!(
                        "component {idx}: covariance is not positive-definite"
                    ))
                })?;
            let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let inv = chol.inverse();
            let log_norm = -0.5 * (dim as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
            factored.push(Factored {
                chol: chol.l(),
                inv,
                log_norm,
            });
        }
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(GainError::InvalidModel(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            components,
            dim,
            factored,
        })
    }

    /// `N(mean, variance)` on the real line.
    pub fn gaussian_1d(mean: f64, variance: f64) -> Result<Self> {
        Self::new(vec![Component {
            weight: 1.0,
            mean: vec![mean],
            cov: vec![vec![variance]],
        }])
    }

    /// Equal-weight mixture `N(-separation, sigma^2)/2 + N(+separation, sigma^2)/2`.
    pub fn symmetric_bimodal(separation: f64, sigma: f64) -> Result<Self> {
        let var = sigma * sigma;
        Self::new(vec![
            Component {
                weight: 0.5,
                mean: vec![-separation],
                cov: vec![vec![var]],
            },
            Component {
                weight: 0.5,
                mean: vec![separation],
                cov: vec![vec![var]],
            },
        ])
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// Density value at `x`.
    pub fn pdf(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        self.components
            .iter()
            .zip(&self.factored)
            .map(|(c, f)| {
                let diff = DVector::from_iterator(
                    self.dim,
                    x.iter().zip(&c.mean).map(|(a, b)| a - b),
                );
                let quad = (&f.inv * &diff).dot(&diff);
                c.weight * (f.log_norm - 0.5 * quad).exp()
            })
            .sum()
    }

    /// Mixture mean vector.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for c in &self.components {
            for (acc, v) in m.iter_mut().zip(&c.mean) {
                *acc += c.weight * v;
            }
        }
        m
    }

    /// Mixture covariance matrix (row-major nested vectors).
    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let mu = self.mean();
        let d = self.dim;
        let mut out = vec![vec![0.0; d]; d];
        for c in &self.components {
            for i in 0..d {
                for j in 0..d {
                    out[i][j] += c.weight
                        * (c.cov[i][j] + (c.mean[i] - mu[i]) * (c.mean[j] - mu[j]));
                }
            }
        }
        out
    }

    /// Largest component standard deviation along any axis.
    pub fn max_component_std(&self) -> f64 {
        self.components
            .iter()
            .flat_map(|c| (0..self.dim).map(move |i| c.cov[i][i].sqrt()))
            .fold(0.0, f64::max)
    }

    /// Default oracle interval for a one-dimensional model.
    pub fn default_bounds(&self) -> (f64, f64) {
        let s = DEFAULT_TRUNCATION_SIGMAS * self.max_component_std();
        let lo = self
            .components
            .iter()
            .map(|c| c.mean[0])
            .fold(f64::INFINITY, f64::min);
        let hi = self
            .components
            .iter()
            .map(|c| c.mean[0])
            .fold(f64::NEG_INFINITY, f64::max);
        (lo - s, hi + s)
    }

    /// Draw `n` i.i.d. points: the component is picked by weight, then a
    /// Gaussian draw `mean + L z` with `L` the Cholesky factor.
    pub fn sample(&self, n: usize, seed: u64) -> Result<ParticleEnsemble> {
        if n == 0 {
            return Err(GainError::InvalidArgument("sample count must be at least 1".into()));
        }
        self.sample_from(n, &mut seeded_rng(seed), Some(seed))
    }

    /// Draw `n` i.i.d. points from an existing generator.
    pub fn sample_from<R: Rng + ?Sized>(&self, n: usize, rng: &mut R, seed: Option<u64>) -> Result<ParticleEnsemble> {
        if n == 0 {
            return Err(GainError::InvalidArgument("sample count must be at least 1".into()));
        }
        let d = self.dim;
        let mut points = Vec::with_capacity(n * d);
        let mut z = vec![0.0; d];
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = self.components.len() - 1;
            for (k, c) in self.components.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            let c = &self.components[pick];
            let l = &self.factored[pick].chol;
            for i in 0..d {
                let mut v = c.mean[i];
                for (j, zj) in z.iter().enumerate().take(i + 1) {
                    v += l[(i, j)] * zj;
                }
                points.push(v);
            }
        }
        Ok(ParticleEnsemble {
            points,
            dim: d,
            seed,
            source: Some(Arc::new(self.clone())),
        })
    }
}

/// Convenience wrapper for [`DensityModel::sample`].
pub fn sample(model: &DensityModel, n: usize, seed: u64) -> Result<ParticleEnsemble> {
    model.sample(n, seed)
}

type Evaluator = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Observation function `h` together with the value `h_hat` to subtract.
///
/// When no analytic mean is supplied, centering falls back to the empirical
/// mean over the ensemble (or quadrature mean on an oracle grid).
#[derive(Clone)]
pub struct ObservationFunction {
    eval: Evaluator,
    centered_mean: Option<f64>,
}

impl fmt::Debug for ObservationFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObservationFunction")
            .field("centered_mean", &self.centered_mean)
            .finish_non_exhaustive()
    }
}

impl ObservationFunction {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            eval: Arc::new(f),
            centered_mean: None,
        }
    }

    /// `h(x) = x_0`, the first coordinate.
    pub fn identity() -> Self {
        Self::new(|x| x[0])
    }

    /// `h(x) = coeffs . x`
    pub fn linear(coeffs: Vec<f64>) -> Self {
        Self::new(move |x| coeffs.iter().zip(x).map(|(c, v)| c * v).sum())
    }

    /// `h(x) = value`; its analytic mean is `value`.
    pub fn constant(value: f64) -> Self {
        Self::new(move |_| value).with_mean(value)
    }

    /// Attach the analytic mean `h_hat`.
    pub fn with_mean(mut self, mean: f64) -> Self {
        self.centered_mean = Some(mean);
        self
    }

    /// Return `factor * h` (the mean, if known, scales with it).
    pub fn scaled(&self, factor: f64) -> Self {
        let inner = Arc::clone(&self.eval);
        Self {
            eval: Arc::new(move |x| factor * inner(x)),
            centered_mean: self.centered_mean.map(|m| factor * m),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    pub fn centered_mean(&self) -> Option<f64> {
        self.centered_mean
    }

    /// Raw values `h(X^i)` over an ensemble.
    pub fn values(&self, ensemble: &ParticleEnsemble) -> Vec<f64> {
        ensemble.iter().map(|p| self.eval(p)).collect()
    }

    /// Values `h(X^i) - h_hat`, using the analytic mean when present and the
    /// empirical mean otherwise.
    pub fn centered_values(&self, ensemble: &ParticleEnsemble) -> Vec<f64> {
        let mut vals = self.values(ensemble);
        let mean = self
            .centered_mean
            .unwrap_or_else(|| vals.iter().sum::<f64>() / vals.len() as f64);
        vals.iter_mut().for_each(|v| *v -= mean);
        vals
    }
}

/// `N` points in `R^d`, row-major.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    points: Vec<f64>,
    dim: usize,
    seed: Option<u64>,
    source: Option<Arc<DensityModel>>,
}

impl ParticleEnsemble {
    /// Wrap explicit row-major points.
    pub fn from_points(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(GainError::InvalidArgument("dimension must be positive".into()));
        }
        if points.is_empty() || points.len() % dim != 0 {
            return Err(GainError::InvalidArgument(format!(
                "{} coordinates do not form a non-empty set of {dim}-dimensional points",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(GainError::InvalidArgument(format!(
                "point {} is not finite",
                i / dim
            )));
        }
        Ok(Self {
            points,
            dim,
            seed: None,
            source: None,
        })
    }

    /// One-dimensional ensemble from scalars.
    pub fn from_scalars(values: Vec<f64>) -> Result<Self> {
        Self::from_points(1, values)
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn source(&self) -> Option<&DensityModel> {
        self.source.as_deref()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Flat row-major coordinates.
    pub fn as_slice(&self) -> &[f64] {
        &self.points
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.dim)
    }

    /// Coordinate `l` of every point.
    pub fn coordinate(&self, l: usize) -> Vec<f64> {
        self.iter().map(|p| p[l]).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut m = vec![0.0; self.dim];
        for p in self.iter() {
            for (acc, v) in m.iter_mut().zip(p) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Reorder points: the new point `i` is the old point `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(GainError::DimensionMismatch {
                expected: self.len(),
                actual: order.len(),
            });
        }
        let mut points = Vec::with_capacity(self.points.len());
        for &i in order {
            points.extend_from_slice(self.point(i));
        }
        Ok(Self {
            points,
            dim: self.dim,
            seed: self.seed,
            source: self.source.clone(),
        })
    }

    pub(crate) fn with_points(&self, points: Vec<f64>) -> Self {
        Self {
            points,
            dim: self.dim,
            seed: self.seed,
            source: None,
        }
    }
}

/// Uniform oracle grid `[lo, hi]` with `n_points` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub n_points: usize,
}

impl GridSpec {
    pub fn new(lo: f64, hi: f64, n_points: usize) -> Self {
        Self { lo, hi, n_points }
    }

    /// Default truncation of [`DensityModel::default_bounds`].
    pub fn for_model(model: &DensityModel, n_points: usize) -> Self {
        let (lo, hi) = model.default_bounds();
        Self { lo, hi, n_points }
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n_points - 1) as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        let h = self.step();
        (0..self.n_points)
            .map(|k| {
                if k + 1 == self.n_points {
                    self.hi
                } else {
                    self.lo + k as f64 * h
                }
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.n_points < 3 || !(self.hi > self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(GainError::InvalidArgument(format!(
                "grid [{}, {}] with {} points is not a valid uniform grid",
                self.lo, self.hi, self.n_points
            )));
        }
        Ok(())
    }
}

/// Exact scalar solution of the weighted Poisson equation sampled on a grid.
#[derive(Debug, Clone)]
pub struct ScalarExactSolution {
    pub grid: Vec<f64>,
    pub phi: Vec<f64>,
    pub gain: Vec<f64>,
    pub rho: Vec<f64>,
    /// The value `h_hat` that was subtracted from `h`.
    pub h_mean: f64,
    pub truncation_bounds: (f64, f64),
}

impl ScalarExactSolution {
    /// Write `x,phi,gain,rho` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x", "phi", "gain", "rho"])?;
        for k in 0..self.grid.len() {
            w.serialize((self.grid[k], self.phi[k], self.gain[k], self.rho[k]))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Gain at `x` by linear interpolation on the grid (clamped at the ends).
    pub fn gain_at(&self, x: f64) -> f64 {
        interpolate(&self.grid, &self.gain, x)
    }

    /// `phi` at `x` by linear interpolation on the grid (clamped at the ends).
    pub fn phi_at(&self, x: f64) -> f64 {
        interpolate(&self.grid, &self.phi, x)
    }
}

fn interpolate(grid: &[f64], values: &[f64], x: f64) -> f64 {
    let n = grid.len();
    if x <= grid[0] {
        return values[0];
    }
    if x >= grid[n - 1] {
        return values[n - 1];
    }
    let h = (grid[n - 1] - grid[0]) / (n - 1) as f64;
    let k = (((x - grid[0]) / h).floor() as usize).min(n - 2);
    let t = (x - grid[k]) / (grid[k + 1] - grid[k]);
    values[k] * (1.0 - t) + values[k + 1] * t
}

/// Composite trapezoid rule on a uniform grid.
pub fn trapezoid(values: &[f64], step: f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    step * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1]))
}

/// Second-order finite-difference derivative on a uniform grid.
fn grid_derivative(values: &[f64], step: f64) -> Vec<f64> {
    let n = values.len();
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        d[k] = (values[k + 1] - values[k - 1]) / (2.0 * step);
    }
    d[0] = (-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * step);
    d[n - 1] = (3.0 * values[n - 1] - 4.0 * values[n - 2] + values[n - 3]) / (2.0 * step);
    d
}

/// Cumulative integral from the left end, with endpoint correction.
fn cumulative_from_left(values: &[f64], step: f64) -> Vec<f64> {
    let deriv = grid_derivative(values, step);
    let c = step * step / 12.0;
    let mut out = vec![0.0; values.len()];
    let mut acc = 0.0;
    for k in 1..values.len() {
        acc += 0.5 * step * (values[k - 1] + values[k]);
        out[k] = acc - c * (deriv[k] - deriv[0]);
    }
    out
}

/// Cumulative integral to the right end, `integral_{x_k}^{hi}`, with endpoint correction.
fn cumulative_from_right(values: &[f64], step: f64) -> Vec<f64> {
    let n = values.len();
    let deriv = grid_derivative(values, step);
    let c = step * step / 12.0;
    let mut out = vec![0.0; n];
    let mut acc = 0.0;
    for k in (0..n - 1).rev() {
        acc += 0.5 * step * (values[k] + values[k + 1]);
        out[k] = acc - c * (deriv[n - 1] - deriv[k]);
    }
    out
}

/// Integral of an exponentially decaying tail from its boundary value and the
/// inward slope; zero when the integrand is not decaying outward.
fn tail_estimate(value: f64, inward_slope: f64) -> f64 {
    if value * inward_slope > 0.0 {
        value * value / inward_slope
    } else {
        0.0
    }
}

/// `h_hat` for the oracle: the analytic mean if present, else the quadrature mean.
fn oracle_mean(h: &ObservationFunction, grid: &[f64], rho: &[f64], step: f64) -> f64 {
    h.centered_mean().unwrap_or_else(|| {
        let weighted: Vec<f64> = grid.iter().zip(rho).map(|(x, r)| r * h.eval(&[*x])).collect();
        trapezoid(&weighted, step) / trapezoid(rho, step)
    })
}

/// Exact solution of the scalar weighted Poisson equation on a uniform grid.
pub fn exact_scalar_solution(
    model: &DensityModel,
    h: &ObservationFunction,
    grid_spec: GridSpec,
) -> Result<ScalarExactSolution> {
    if model.dim() != 1 {
        return Err(GainError::DimensionMismatch {
            expected: 1,
            actual: model.dim(),
        });
    }
    grid_spec.validate()?;
    let grid = grid_spec.nodes();
    let step = grid_spec.step();
    let rho: Vec<f64> = grid.iter().map(|x| model.pdf(&[*x])).collect();
    if let Some(k) = rho.iter().position(|r| !(*r >= DENSITY_FLOOR)) {
        return Err(GainError::DensityUnderflow { x: grid[k] });
    }
    let mass = trapezoid(&rho, step);
    if mass < MIN_GRID_MASS {
        return Err(GainError::TruncationTooTight {
            mass,
            required: MIN_GRID_MASS,
        });
    }

    let h_mean = oracle_mean(h, &grid, &rho, step);
    let forcing: Vec<f64> = grid
        .iter()
        .zip(&rho)
        .map(|(x, r)| r * (h.eval(&[*x]) - h_mean))
        .collect();

    // The left integral is accurate where little mass lies to the left; the
    // right integral is used past the median so both tails avoid cancellation.
    // The tails beyond the grid are added with the exponential-decay estimate
    // integral_{-inf}^{lo} f ~ f(lo)^2 / f'(lo), which keeps the end gains
    // strictly inside the maximum principle instead of pinning them to zero.
    let slope = grid_derivative(&forcing, step);
    let n = forcing.len();
    let left_tail = tail_estimate(forcing[0], slope[0]);
    let right_tail = tail_estimate(forcing[n - 1], -slope[n - 1]);
    let left: Vec<f64> = cumulative_from_left(&forcing, step)
        .into_iter()
        .map(|v| v + left_tail)
        .collect();
    let right: Vec<f64> = cumulative_from_right(&forcing, step)
        .into_iter()
        .map(|v| v + right_tail)
        .collect();
    let cdf = cumulative_from_left(&rho, step);
    let gain: Vec<f64> = (0..grid.len())
        .map(|k| {
            let inner = if cdf[k] <= 0.5 * mass { left[k] } else { -right[k] };
            -inner / rho[k]
        })
        .collect();

    let mut phi = cumulative_from_left(&gain, step);
    let weighted: Vec<f64> = phi.iter().zip(&rho).map(|(p, r)| p * r).collect();
    let shift = trapezoid(&weighted, step) / mass;
    phi.iter_mut().for_each(|p| *p -= shift);

    Ok(ScalarExactSolution {
        grid,
        phi,
        gain,
        rho,
        h_mean,
        truncation_bounds: (grid_spec.lo, grid_spec.hi),
    })
}

/// Max over interior nodes of `|(1/rho) d/dx(rho dphi/dx) + h - h_hat|`, with
/// the flux differenced at half-grid points.
pub fn poisson_residual(
    model: &DensityModel,
    solution: &ScalarExactSolution,
    h: &ObservationFunction,
) -> Result<f64> {
    let grid = &solution.grid;
    let n = grid.len();
    if n < 3 {
        return Err(GainError::InvalidArgument("residual needs at least 3 grid points".into()));
    }
    let step = (grid[n - 1] - grid[0]) / (n - 1) as f64;
    let uniform = grid
        .windows(2)
        .all(|w| ((w[1] - w[0]) - step).abs() <= 1e-9 * step.abs().max(1.0));
    if !uniform {
        return Err(GainError::InvalidArgument("residual requires a uniform grid".into()));
    }
    let h_mean = h.centered_mean().unwrap_or(solution.h_mean);
    let phi = &solution.phi;
    let mut worst: f64 = 0.0;
    for k in 1..n - 1 {
        let rho_plus = model.pdf(&[grid[k] + 0.5 * step]);
        let rho_minus = model.pdf(&[grid[k] - 0.5 * step]);
        let flux = rho_plus * (phi[k + 1] - phi[k]) - rho_minus * (phi[k] - phi[k - 1]);
        let lap = flux / (step * step * solution.rho[k]);
        worst = worst.max((lap + h.eval(&[grid[k]]) - h_mean).abs());
    }
    Ok(worst)
}
