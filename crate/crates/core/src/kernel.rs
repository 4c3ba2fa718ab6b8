//! Diffusion-kernel gain approximation.
//!
//! Particles are joined by a Gaussian kernel `g_ij = exp(-|X^i - X^j|^2 / 4 eps)`
//! which is normalized twice:
//!
//! ```text
//! k_ij = g_ij / (sqrt(sum_l g_il) sqrt(sum_l g_jl))
//! T_ij = k_ij / sum_l k_il
//! ```
//!
//! `T` is a strictly positive stochastic matrix, reversible with respect to
//! `pi_i ~ sum_l k_il`. The potential `phi` at the particles solves
//! `Phi = T Phi + eps H_c` by successive approximation, pinned to zero mean.
//!
//! The forcing `H_c` is centered against `pi`, which is the solvability
//! condition of `(I - T) Phi = eps H_c`: `pi^T (I - T) = 0`, so any other
//! centering leaves a constant residual of order `eps / sqrt(N)`.
//!
//! Off the particles, `phi` is extended by kernel interpolation of
//! `Phi_i + eps H_c,i`, i.e. the forcing integral at an arbitrary point is
//! taken as `eps (T h_c)(x)`. The `Differentiated` gradient is the exact
//! x-derivative of that extension at the particles.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::density::{seeded_rng, ObservationFunction, ParticleEnsemble};
use crate::error::{GainError, Result};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 100_000;

/// How the per-particle gradient is read off the fixed-point solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientVariant {
    /// `sum_j T_ij Phi_j (X^j - sum_k T_ik X^k)`, with no bandwidth scaling.
    PaperVerbatim,
    /// `(1/2eps) sum_j T_ij (Phi_j + eps H_c,j) (X^j - sum_k T_ik X^k)`, the
    /// analytic gradient of the kernel extension. Recovers the Kalman gain in
    /// the linear-Gaussian case; the default.
    Differentiated,
}

impl Default for GradientVariant {
    fn default() -> Self {
        Self::Differentiated
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub epsilon: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub gradient_variant: GradientVariant,
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}

impl KernelConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            gradient_variant: GradientVariant::default(),
        }
    }

    pub fn with_variant(mut self, variant: GradientVariant) -> Self {
        self.gradient_variant = variant;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(GainError::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.tol > 0.0) {
            return Err(GainError::InvalidArgument(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(GainError::InvalidArgument("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelWarning {
    /// Every off-diagonal kernel weight of this particle underflowed to zero.
    KernelStarvation { particle: usize },
}

/// Row-stochastic kernel matrix on an ensemble.
#[derive(Debug, Clone)]
pub struct MarkovMatrix {
    t: DMatrix<f64>,
    g_row_sums: Vec<f64>,
    k_row_sums: Vec<f64>,
    epsilon: f64,
    ensemble: ParticleEnsemble,
    warnings: Vec<KernelWarning>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Build the Markov matrix of the doubly normalized Gaussian kernel.
///
/// The `(4 pi eps)^{-d/2}` kernel prefactor cancels in both normalizations
/// and is omitted.
pub fn build_markov(ensemble: &ParticleEnsemble, epsilon: f64) -> Result<MarkovMatrix> {
    let n = ensemble.len();
    if n < 2 {
        return Err(GainError::InvalidArgument(format!(
            "kernel gain needs at least 2 particles, got {n}"
        )));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(GainError::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let scale = 1.0 / (4.0 * epsilon);
    let mut t = DMatrix::<f64>::zeros(n, n);
    // g is symmetric; fill column j from row j's distances.
    for j in 0..n {
        let xj = ensemble.point(j);
        t[(j, j)] = 1.0;
        for i in 0..j {
            let g = (-squared_distance(ensemble.point(i), xj) * scale).exp();
            t[(i, j)] = g;
            t[(j, i)] = g;
        }
    }
    let mut warnings = Vec::new();
    let g_row_sums: Vec<f64> = (0..n).map(|j| t.column(j).sum()).collect();
    for (i, s) in g_row_sums.iter().enumerate() {
        if *s == 1.0 {
            warnings.push(KernelWarning::KernelStarvation { particle: i });
        }
    }
    let inv_sqrt: Vec<f64> = g_row_sums.iter().map(|s| 1.0 / s.sqrt()).collect();
    for j in 0..n {
        let cj = inv_sqrt[j];
        for (i, v) in t.column_mut(j).iter_mut().enumerate() {
            *v *= inv_sqrt[i] * cj;
        }
    }
    // k is symmetric, so its row sums are its column sums.
    let k_row_sums: Vec<f64> = (0..n).map(|j| t.column(j).sum()).collect();
    for j in 0..n {
        for (i, v) in t.column_mut(j).iter_mut().enumerate() {
            *v /= k_row_sums[i];
        }
    }
    Ok(MarkovMatrix {
        t,
        g_row_sums,
        k_row_sums,
        epsilon,
        ensemble: ensemble.clone(),
        warnings,
    })
}

impl MarkovMatrix {
    pub fn len(&self) -> usize {
        self.t.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.t.nrows() == 0
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn ensemble(&self) -> &ParticleEnsemble {
        &self.ensemble
    }

    /// Denominators `sum_l k(X^i, X^l)`.
    pub fn k_row_sums(&self) -> &[f64] {
        &self.k_row_sums
    }

    pub fn warnings(&self) -> &[KernelWarning] {
        &self.warnings
    }

    /// Invariant distribution `pi` of `T` (`pi^T T = pi^T`), normalized to sum 1.
    pub fn invariant_distribution(&self) -> Vec<f64> {
        let total: f64 = self.k_row_sums.iter().sum();
        self.k_row_sums.iter().map(|r| r / total).collect()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(v);
        (&self.t * x).as_slice().to_vec()
    }

    /// Center `values` against the invariant distribution.
    pub fn center(&self, values: &[f64]) -> Vec<f64> {
        let pi = self.invariant_distribution();
        let mean: f64 = pi.iter().zip(values).map(|(p, v)| p * v).sum();
        values.iter().map(|v| v - mean).collect()
    }

    /// Weighted-covariance stencil `sum_j T_ij v_j (X^j_l - sum_k T_ik X^k_l)`,
    /// returned `N x d` row-major.
    fn covariance_stencil(&self, v: &[f64]) -> Vec<f64> {
        let n = self.len();
        let d = self.ensemble.dim();
        let tv = &self.t * DVector::from_column_slice(v);
        let mut out = vec![0.0; n * d];
        for l in 0..d {
            let xl = DVector::from_vec(self.ensemble.coordinate(l));
            let xbar = &self.t * &xl;
            let vx = DVector::from_iterator(n, v.iter().zip(xl.iter()).map(|(a, b)| a * b));
            let tvx = &self.t * vx;
            for i in 0..n {
                out[i * d + l] = tvx[i] - xbar[i] * tv[i];
            }
        }
        out
    }

    /// Per-particle gradients of `phi`, `N x d` row-major.
    ///
    /// `forcing` is the centered forcing `H_c` used in the fixed point; only
    /// the `Differentiated` variant reads it.
    pub fn gains(&self, phi: &[f64], forcing: &[f64], variant: GradientVariant) -> Result<Vec<f64>> {
        let n = self.len();
        for len in [phi.len(), forcing.len()] {
            if len != n {
                return Err(GainError::DimensionMismatch {
                    expected: n,
                    actual: len,
                });
            }
        }
        Ok(match variant {
            GradientVariant::PaperVerbatim => self.covariance_stencil(phi),
            GradientVariant::Differentiated => {
                let eps = self.epsilon;
                let v: Vec<f64> = phi.iter().zip(forcing).map(|(p, f)| p + eps * f).collect();
                let mut g = self.covariance_stencil(&v);
                g.iter_mut().for_each(|x| *x /= 2.0 * eps);
                g
            }
        })
    }
}

/// Fixed-point solution and gains on one ensemble.
#[derive(Debug, Clone)]
pub struct KernelGainSolution {
    pub config: KernelConfig,
    /// `Phi`, zero unweighted mean.
    pub phi: Vec<f64>,
    /// `N x d` row-major gradients at the particles.
    pub gains: Vec<f64>,
    /// Observation values centered against the invariant distribution.
    pub forcing: Vec<f64>,
    pub iterations_used: usize,
    /// Sup-norm fixed-point residual at the returned `phi`.
    pub final_update_norm: f64,
}

/// Solve `Phi = T Phi + eps H_c` by successive approximation.
///
/// Each sweep computes `y = T Phi + eps H_c`; the sup-norm of `y - Phi` is the
/// fixed-point residual at `Phi`, and the iteration stops as soon as it drops
/// below `tol (1 + |eps H_c|_inf)`. Otherwise `Phi <- y - mean(y)`.
///
/// `h_values` are the raw observations at the particles; they are centered
/// here. `init` warm-starts the iteration (it is mean-shifted first).
/// Returns `(phi, forcing, iterations_used, final_update_norm)`.
pub fn solve_fixed_point(
    markov: &MarkovMatrix,
    h_values: &[f64],
    config: &KernelConfig,
    init: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>, usize, f64)> {
    config.validate()?;
    let n = markov.len();
    if h_values.len() != n {
        return Err(GainError::DimensionMismatch {
            expected: n,
            actual: h_values.len(),
        });
    }
    let forcing = markov.center(h_values);
    let eps = config.epsilon;
    let eps_forcing = DVector::from_iterator(n, forcing.iter().map(|f| eps * f));
    let mut phi = match init {
        Some(v) if v.len() != n => {
            return Err(GainError::DimensionMismatch {
                expected: n,
                actual: v.len(),
            })
        }
        Some(v) if v.iter().all(|x| x.is_finite()) => DVector::from_column_slice(v),
        _ => DVector::zeros(n),
    };
    let m = phi.mean();
    phi.add_scalar_mut(-m);

    let threshold = config.tol * (1.0 + eps_forcing.amax());
    let mut y = DVector::zeros(n);
    let mut update = f64::INFINITY;
    for iter in 0..config.max_iter {
        y.gemv(1.0, &markov.t, &phi, 0.0);
        y += &eps_forcing;
        update = phi
            .iter()
            .zip(y.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if update < threshold {
            return Ok((phi.as_slice().to_vec(), forcing, iter, update));
        }
        if !update.is_finite() {
            break;
        }
        let m = y.mean();
        std::mem::swap(&mut phi, &mut y);
        phi.add_scalar_mut(-m);
    }
    Err(GainError::NotContracted {
        iterations: config.max_iter,
        final_update_norm: update,
    })
}

/// Build the Markov matrix, solve the fixed point and read off the gains.
pub fn kernel_gain(
    ensemble: &ParticleEnsemble,
    h: &ObservationFunction,
    config: &KernelConfig,
    init: Option<&[f64]>,
) -> Result<(MarkovMatrix, KernelGainSolution)> {
    config.validate()?;
    let markov = build_markov(ensemble, config.epsilon)?;
    let solution = solve_on(&markov, &h.values(ensemble), config, init)?;
    Ok((markov, solution))
}

/// Solve and compute gains on an existing Markov matrix.
pub fn solve_on(
    markov: &MarkovMatrix,
    h_values: &[f64],
    config: &KernelConfig,
    init: Option<&[f64]>,
) -> Result<KernelGainSolution> {
    if (markov.epsilon - config.epsilon).abs() > 0.0 {
        return Err(GainError::InvalidArgument(format!(
            "Markov matrix built with epsilon {} but config has {}",
            markov.epsilon, config.epsilon
        )));
    }
    let (phi, forcing, iterations_used, final_update_norm) =
        solve_fixed_point(markov, h_values, config, init)?;
    let gains = markov.gains(&phi, &forcing, config.gradient_variant)?;
    Ok(KernelGainSolution {
        config: *config,
        phi,
        gains,
        forcing,
        iterations_used,
        final_update_norm,
    })
}

/// Kernel interpolation weights of `x` against the ensemble, normalized to sum 1.
fn extension_weights(markov: &MarkovMatrix, x: &[f64]) -> Result<Vec<f64>> {
    let ens = &markov.ensemble;
    if x.len() != ens.dim() {
        return Err(GainError::DimensionMismatch {
            expected: ens.dim(),
            actual: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(GainError::InvalidArgument("extension point is not finite".into()));
    }
    let scale = 1.0 / (4.0 * markov.epsilon);
    let mut w: Vec<f64> = ens
        .iter()
        .zip(&markov.g_row_sums)
        .map(|(p, s)| (-squared_distance(p, x) * scale).exp() / s.sqrt())
        .collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(GainError::OutOfSupport { x: x.to_vec() });
    }
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// `phi` at an arbitrary point:
/// `sum_i k(x, X^i) (Phi_i + eps H_c,i) / sum_i k(x, X^i)`.
pub fn extend(x: &[f64], markov: &MarkovMatrix, solution: &KernelGainSolution) -> Result<f64> {
    let w = extension_weights(markov, x)?;
    let eps = markov.epsilon;
    Ok(w
        .iter()
        .zip(solution.phi.iter().zip(&solution.forcing))
        .map(|(wi, (p, f))| wi * (p + eps * f))
        .sum())
}

/// Analytic gradient of [`extend`] at an arbitrary point.
pub fn extend_gradient(x: &[f64], markov: &MarkovMatrix, solution: &KernelGainSolution) -> Result<Vec<f64>> {
    let w = extension_weights(markov, x)?;
    let eps = markov.epsilon;
    let d = x.len();
    let ens = &markov.ensemble;
    let mut xbar = vec![0.0; d];
    for (wi, p) in w.iter().zip(ens.iter()) {
        for l in 0..d {
            xbar[l] += wi * p[l];
        }
    }
    let mut grad = vec![0.0; d];
    for (i, (wi, p)) in w.iter().zip(ens.iter()).enumerate() {
        let v = solution.phi[i] + eps * solution.forcing[i];
        for l in 0..d {
            grad[l] += wi * v * (p[l] - xbar[l]);
        }
    }
    grad.iter_mut().for_each(|g| *g /= 2.0 * eps);
    Ok(grad)
}

/// Largest observed `|Tf|_pi / |f|_pi` over random `pi`-zero-mean vectors.
pub fn contraction_check(markov: &MarkovMatrix, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(GainError::InvalidArgument("contraction check needs at least one trial".into()));
    }
    let pi = markov.invariant_distribution();
    let n = markov.len();
    let norm = |v: &[f64]| -> f64 { pi.iter().zip(v).map(|(p, x)| p * x * x).sum::<f64>().sqrt() };
    let mut rng = seeded_rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let raw: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let f = markov.center(&raw);
        let denom = norm(&f);
        if denom == 0.0 {
            continue;
        }
        worst = worst.max(norm(&markov.apply(&f)) / denom);
    }
    Ok(worst)
}

impl KernelGainSolution {
    /// Write `i,x_1..x_d,phi,gain_1..gain_d` rows.
    pub fn write_csv<W: Write>(&self, ensemble: &ParticleEnsemble, writer: W) -> Result<()> {
        let d = ensemble.dim();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["i".to_string()];
        header.extend((1..=d).map(|l| format!("x_{l}")));
        header.push("phi".into());
        header.extend((1..=d).map(|l| format!("gain_{l}")));
        w.write_record(&header)?;
        for (i, p) in ensemble.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(p.iter().map(|v| v.to_string()));
            row.push(self.phi[i].to_string());
            row.extend(self.gains[i * d..(i + 1) * d].iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, ensemble: &ParticleEnsemble, path: &Path) -> Result<()> {
        self.write_csv(ensemble, std::fs::File::create(path)?)
    }
}

impl MarkovMatrix {
    /// Dump the dense matrix as CSV (one row per particle). Debugging only.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for i in 0..self.len() {
            w.write_record(self.t.row(i).iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::DensityModel;

    #[test]
    fn coincident_particles_give_uniform_matrix() {
        let e = ParticleEnsemble::from_scalars(vec![0.7, 0.7]).unwrap();
        for eps in [0.01, 1.0] {
            let m = build_markov(&e, eps).unwrap();
            for v in m.matrix().iter() {
                assert_eq!(*v, 0.5);
            }
        }
    }

    #[test]
    fn two_point_matrix_by_hand() {
        let e = ParticleEnsemble::from_scalars(vec![0.0, 1.0]).unwrap();
        let m = build_markov(&e, 0.25).unwrap();
        // g = [[1, e^-1], [e^-1, 1]]; both row sums equal, so k = g / (1 + e^-1)
        // and T = g / (1 + e^-1).
        let g = (-1.0f64).exp();
        let off = g / (1.0 + g);
        let diag = 1.0 / (1.0 + g);
        assert!((m.matrix()[(0, 1)] - off).abs() < 1e-15);
        assert!((m.matrix()[(1, 0)] - off).abs() < 1e-15);
        assert!((m.matrix()[(0, 0)] - diag).abs() < 1e-15);
        assert!((off - 0.268_941_421_369_995_1).abs() < 1e-15);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let one = ParticleEnsemble::from_scalars(vec![1.0]).unwrap();
        assert!(build_markov(&one, 0.1).is_err());
        let two = ParticleEnsemble::from_scalars(vec![1.0, 2.0]).unwrap();
        assert!(build_markov(&two, 0.0).is_err());
        assert!(build_markov(&two, -1.0).is_err());
        assert!(KernelConfig::new(0.1).with_tol(0.0).validate().is_err());
        assert!(KernelConfig::new(0.1).with_max_iter(0).validate().is_err());
    }

    #[test]
    fn starvation_is_flagged() {
        let e = ParticleEnsemble::from_scalars(vec![0.0, 100.0, 100.1]).unwrap();
        let m = build_markov(&e, 0.01).unwrap();
        assert_eq!(m.warnings(), &[KernelWarning::KernelStarvation { particle: 0 }]);
    }

    #[test]
    fn uniform_matrix_converges_in_one_step() {
        let e = ParticleEnsemble::from_scalars(vec![0.3; 4]).unwrap();
        let m = build_markov(&e, 0.2).unwrap();
        let h = [1.0, -2.0, 0.5, 0.5];
        let cfg = KernelConfig::new(0.2);
        let (phi, forcing, iters, _) = solve_fixed_point(&m, &h, &cfg, None).unwrap();
        assert_eq!(iters, 1);
        for (p, f) in phi.iter().zip(&forcing) {
            assert!((p - 0.2 * f).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_forcing_gives_zero() {
        let e = DensityModel::gaussian_1d(0.0, 1.0).unwrap().sample(30, 2).unwrap();
        let m = build_markov(&e, 0.3).unwrap();
        let (phi, _, _, _) = solve_fixed_point(&m, &[2.5; 30], &KernelConfig::new(0.3), None).unwrap();
        assert!(phi.iter().all(|p| p.abs() < 1e-12));
        let sol = solve_on(&m, &[2.5; 30], &KernelConfig::new(0.3), None).unwrap();
        assert!(sol.gains.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn zero_phi_gives_zero_verbatim_gain() {
        let e = DensityModel::gaussian_1d(0.0, 1.0).unwrap().sample(20, 5).unwrap();
        let m = build_markov(&e, 0.3).unwrap();
        let g = m.gains(&[0.0; 20], &[1.0; 20], GradientVariant::PaperVerbatim).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(m.gains(&[0.0; 19], &[0.0; 20], GradientVariant::PaperVerbatim).is_err());
    }

    #[test]
    fn not_contracted_reports_norm() {
        let e = DensityModel::gaussian_1d(0.0, 1.0).unwrap().sample(50, 4).unwrap();
        let m = build_markov(&e, 0.1).unwrap();
        let h: Vec<f64> = e.coordinate(0);
        let cfg = KernelConfig::new(0.1).with_max_iter(2);
        match solve_fixed_point(&m, &h, &cfg, None) {
            Err(GainError::NotContracted { iterations, final_update_norm }) => {
                assert_eq!(iterations, 2);
                assert!(final_update_norm > 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn extension_of_constant_is_constant() {
        let e = DensityModel::gaussian_1d(0.0, 1.0).unwrap().sample(40, 9).unwrap();
        let m = build_markov(&e, 0.2).unwrap();
        let sol = KernelGainSolution {
            config: KernelConfig::new(0.2),
            phi: vec![1.75; 40],
            gains: vec![0.0; 40],
            forcing: vec![0.0; 40],
            iterations_used: 0,
            final_update_norm: 0.0,
        };
        for x in [-2.0, 0.0, 0.3, 1.9] {
            assert!((extend(&[x], &m, &sol).unwrap() - 1.75).abs() < 1e-14);
        }
        assert!(matches!(extend(&[1e4], &m, &sol), Err(GainError::OutOfSupport { .. })));
    }

    #[test]
    fn extension_at_particles_matches_fixed_point() {
        let e = DensityModel::symmetric_bimodal(1.0, 0.4).unwrap().sample(80, 3).unwrap();
        let cfg = KernelConfig::new(0.2);
        let (m, sol) = kernel_gain(&e, &ObservationFunction::identity(), &cfg, None).unwrap();
        let t_phi = m.apply(&sol.phi);
        let t_forcing = m.apply(&sol.forcing);
        for i in 0..e.len() {
            let ext = extend(e.point(i), &m, &sol).unwrap();
            assert!((ext - t_phi[i] - 0.2 * t_forcing[i]).abs() < 1e-12);
            // Phi_i = (T Phi)_i + eps H_c,i, so the gap to Phi is eps (T H_c - H_c)_i.
            let gap = 0.2 * (t_forcing[i] - sol.forcing[i]);
            assert!((ext - sol.phi[i] - gap).abs() <= sol.final_update_norm + 1e-12);
        }
    }

    #[test]
    fn differentiated_gain_is_extension_gradient() {
        let e = DensityModel::symmetric_bimodal(1.0, 0.4).unwrap().sample(100, 11).unwrap();
        let cfg = KernelConfig::new(0.2);
        let (m, sol) = kernel_gain(&e, &ObservationFunction::identity(), &cfg, None).unwrap();
        let step = 1e-5;
        for i in 0..e.len() {
            let x = e.point(i)[0];
            if x.abs() > 1.5 {
                continue;
            }
            let fd = (extend(&[x + step], &m, &sol).unwrap() - extend(&[x - step], &m, &sol).unwrap())
                / (2.0 * step);
            let g = sol.gains[i];
            assert!((fd - g).abs() < 1e-3 * g.abs(), "particle {i}: fd {fd} vs {g}");
            let analytic = extend_gradient(&[x], &m, &sol).unwrap()[0];
            assert!((analytic - g).abs() < 1e-10 * g.abs().max(1.0));
        }
    }

    #[test]
    fn csv_layout() {
        let e = ParticleEnsemble::from_points(2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let sol = KernelGainSolution {
            config: KernelConfig::new(0.5),
            phi: vec![0.5, -0.5],
            gains: vec![1.0, 2.0, 3.0, 4.0],
            forcing: vec![0.0, 0.0],
            iterations_used: 3,
            final_update_norm: 0.0,
        };
        let mut buf = Vec::new();
        sol.write_csv(&e, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "i,x_1,x_2,phi,gain_1,gain_2\n0,0,1,0.5,1,2\n1,2,3,-0.5,3,4\n"
        );
    }
}
