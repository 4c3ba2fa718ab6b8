//! Empirical Galerkin approximation of the weighted Poisson equation.
//!
//! With `phi ~ sum_m c_m psi_m`, the weak form tested against every `psi_m`
//! becomes `A c = b` where
//!
//! ```text
//! A_ml = (1/N) sum_i grad psi_l(X^i) . grad psi_m(X^i)
//! b_m  = (1/N) sum_i (h(X^i) - h_hat) psi_m(X^i)
//! ```
//!
//! The constant function is never part of the basis: it lies in the null
//! space of the gradient and would make `A` singular.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::density::{trapezoid, ObservationFunction, ParticleEnsemble, ScalarExactSolution};
use crate::error::{GainError, Result};

/// Condition numbers above this are treated as numerically singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Relative residual `|Ac - b| / |b|` every accepted solution must meet.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Monomial,
    Hermite,
}

/// Polynomial basis without the constant term.
///
/// Multi-indices are graded by total degree (degree 1 first) and ordered
/// lexicographically within a degree, so in one dimension the monomial basis
/// is `{x, x^2, ..., x^M}`. The Hermite variant uses probabilists' Hermite
/// polynomials of the standardized coordinates `(x_l - center_l) / scale_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    kind: BasisKind,
    dim: usize,
    exponents: Vec<Vec<u32>>,
    center: Vec<f64>,
    scale: Vec<f64>,
}

/// First `count` non-constant multi-indices in graded order.
fn graded_exponents(dim: usize, count: usize) -> Vec<Vec<u32>> {
    fn fill(dim: usize, degree: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() + 1 == dim {
            prefix.push(degree);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in (0..=degree).rev() {
            prefix.push(k);
            fill(dim, degree - k, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::with_capacity(count);
    let mut degree = 1;
    while out.len() < count {
        let mut level = Vec::new();
        fill(dim, degree, &mut Vec::with_capacity(dim), &mut level);
        out.extend(level);
        degree += 1;
    }
    out.truncate(count);
    out
}

/// Probabilists' Hermite polynomial `He_n(u)` and its derivative `n He_{n-1}(u)`.
fn hermite(n: u32, u: f64) -> (f64, f64) {
    let (mut prev, mut cur) = (0.0, 1.0);
    for k in 0..n {
        let next = u * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    (cur, n as f64 * prev)
}

impl BasisSet {
    /// Raw monomials `x^alpha`, `1 <= |alpha|`, the first `count` in graded order.
    pub fn monomial(dim: usize, count: usize) -> Result<Self> {
        Self::build(BasisKind::Monomial, dim, count, vec![0.0; dim], vec![1.0; dim])
    }

    /// Hermite basis standardized by the ensemble's empirical mean and standard deviation.
    pub fn hermite(ensemble: &ParticleEnsemble, count: usize) -> Result<Self> {
        let dim = ensemble.dim();
        let center = ensemble.mean();
        let n = ensemble.len() as f64;
        let mut scale = vec![0.0; dim];
        for p in ensemble.iter() {
            for l in 0..dim {
                scale[l] += (p[l] - center[l]).powi(2);
            }
        }
        for s in scale.iter_mut() {
            *s = (*s / n).sqrt();
            if !(*s > 0.0) {
                *s = 1.0;
            }
        }
        Self::build(BasisKind::Hermite, dim, count, center, scale)
    }

    /// Hermite basis with explicit standardization.
    pub fn hermite_with(center: Vec<f64>, scale: Vec<f64>, count: usize) -> Result<Self> {
        let dim = center.len();
        if scale.len() != dim || scale.iter().any(|s| !(*s > 0.0)) {
            return Err(GainError::InvalidArgument(
                "Hermite scale must be positive and match the center dimension".into(),
            ));
        }
        Self::build(BasisKind::Hermite, dim, count, center, scale)
    }

    fn build(kind: BasisKind, dim: usize, count: usize, center: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if dim == 0 || count == 0 {
            return Err(GainError::InvalidArgument(
                "basis needs a positive dimension and at least one function".into(),
            ));
        }
        Ok(Self {
            kind,
            dim,
            exponents: graded_exponents(dim, count),
            center,
            scale,
        })
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    /// Univariate factor and its derivative along coordinate `l`.
    fn factor(&self, l: usize, power: u32, x: f64) -> (f64, f64) {
        match self.kind {
            BasisKind::Monomial => {
                let value = x.powi(power as i32);
                let deriv = if power == 0 {
                    0.0
                } else {
                    power as f64 * x.powi(power as i32 - 1)
                };
                (value, deriv)
            }
            BasisKind::Hermite => {
                let u = (x - self.center[l]) / self.scale[l];
                let (value, deriv) = hermite(power, u);
                (value, deriv / self.scale[l])
            }
        }
    }

    /// `psi_m(x)` and `grad psi_m(x)` (written into `grad`).
    pub fn eval_with_gradient(&self, m: usize, x: &[f64], grad: &mut [f64]) -> f64 {
        let alpha = &self.exponents[m];
        let factors: Vec<(f64, f64)> = (0..self.dim).map(|l| self.factor(l, alpha[l], x[l])).collect();
        let value = factors.iter().map(|f| f.0).product();
        for (l, g) in grad.iter_mut().enumerate() {
            *g = factors
                .iter()
                .enumerate()
                .map(|(j, f)| if j == l { f.1 } else { f.0 })
                .product();
        }
        value
    }

    pub fn eval(&self, m: usize, x: &[f64]) -> f64 {
        let alpha = &self.exponents[m];
        (0..self.dim).map(|l| self.factor(l, alpha[l], x[l]).0).product()
    }
}

/// Empirical Galerkin system `A c = b`.
#[derive(Debug, Clone)]
pub struct GalerkinSystem {
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

/// Assemble the empirical stiffness matrix and load vector.
pub fn assemble(
    ensemble: &ParticleEnsemble,
    basis: &BasisSet,
    h: &ObservationFunction,
) -> Result<GalerkinSystem> {
    let m = basis.len();
    let n = ensemble.len();
    if ensemble.dim() != basis.dim() {
        return Err(GainError::DimensionMismatch {
            expected: basis.dim(),
            actual: ensemble.dim(),
        });
    }
    if n < m {
        return Err(GainError::Underdetermined {
            particles: n,
            basis: m,
        });
    }
    let d = basis.dim();
    let hc = h.centered_values(ensemble);
    let mut a = DMatrix::zeros(m, m);
    let mut b = DVector::zeros(m);
    let mut values = vec![0.0; m];
    let mut grads = vec![0.0; m * d];
    for (i, x) in ensemble.iter().enumerate() {
        for k in 0..m {
            values[k] = basis.eval_with_gradient(k, x, &mut grads[k * d..(k + 1) * d]);
        }
        for k in 0..m {
            b[k] += hc[i] * values[k];
            for l in 0..=k {
                let dot: f64 = (0..d).map(|j| grads[k * d + j] * grads[l * d + j]).sum();
                a[(k, l)] += dot;
            }
        }
    }
    let scale = 1.0 / n as f64;
    for k in 0..m {
        b[k] *= scale;
        for l in 0..=k {
            a[(k, l)] *= scale;
            a[(l, k)] = a[(k, l)];
        }
    }
    Ok(GalerkinSystem { matrix: a, rhs: b })
}

/// Coefficients of the Galerkin approximation on a basis.
#[derive(Debug, Clone)]
pub struct GalerkinSolution {
    pub basis: BasisSet,
    pub coefficients: DVector<f64>,
    pub condition_estimate: f64,
}

/// Solve `A c = b` for a symmetric positive (semi)definite `A`.
///
/// Fails with [`GainError::SingularGalerkin`] instead of regularizing when the
/// matrix is singular to working precision.
pub fn solve(system: &GalerkinSystem, basis: &BasisSet) -> Result<GalerkinSolution> {
    let a = &system.matrix;
    let b = &system.rhs;
    let m = a.nrows();
    if a.ncols() != m || b.len() != m || basis.len() != m {
        return Err(GainError::DimensionMismatch {
            expected: m,
            actual: b.len(),
        });
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    if (a - a.transpose()).amax() > 1e-12 * scale {
        return Err(GainError::InvalidArgument("Galerkin matrix is not symmetric".into()));
    }
    let eig = a.clone().symmetric_eigenvalues();
    let lmax = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lmin = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    if !(condition <= SINGULAR_CONDITION) {
        return Err(GainError::SingularGalerkin { condition });
    }
    let chol = a
        .clone()
        .cholesky()
        .ok_or(GainError::SingularGalerkin { condition })?;
    let c = chol.solve(b);
    let resid = (a * &c - b).norm();
    let bn = b.norm();
    if c.iter().any(|v| !v.is_finite()) || resid > SOLVE_RESIDUAL_TOL * bn.max(f64::MIN_POSITIVE) && resid > 0.0 && bn > 0.0 {
        return Err(GainError::SingularGalerkin { condition });
    }
    Ok(GalerkinSolution {
        basis: basis.clone(),
        coefficients: c,
        condition_estimate: condition,
    })
}

/// Assemble and solve in one step.
pub fn galerkin_gain(
    ensemble: &ParticleEnsemble,
    basis: &BasisSet,
    h: &ObservationFunction,
) -> Result<GalerkinSolution> {
    solve(&assemble(ensemble, basis, h)?, basis)
}

impl GalerkinSolution {
    /// `sum_m c_m grad psi_m(x)`.
    pub fn gain_at(&self, x: &[f64]) -> Vec<f64> {
        let d = self.basis.dim();
        let mut out = vec![0.0; d];
        let mut grad = vec![0.0; d];
        for (m, c) in self.coefficients.iter().enumerate() {
            self.basis.eval_with_gradient(m, x, &mut grad);
            for (o, g) in out.iter_mut().zip(&grad) {
                *o += c * g;
            }
        }
        out
    }

    /// `sum_m c_m psi_m(x)`, not mean-shifted.
    pub fn phi_at(&self, x: &[f64]) -> f64 {
        self.coefficients
            .iter()
            .enumerate()
            .map(|(m, c)| c * self.basis.eval(m, x))
            .sum()
    }

    /// Gains at every particle of an ensemble, `N x d` row-major.
    pub fn gains(&self, ensemble: &ParticleEnsemble) -> Vec<f64> {
        ensemble.iter().flat_map(|x| self.gain_at(x)).collect()
    }

    /// Write `m,coefficient` rows (1-based index).
    pub fn write_coefficients_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["m", "coefficient"])?;
        for (m, c) in self.coefficients.iter().enumerate() {
            w.serialize((m + 1, c))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Write `x,gain` rows over one-dimensional sample points.
    pub fn write_gain_csv<W: Write>(&self, xs: &[f64], writer: W) -> Result<()> {
        if self.basis.dim() != 1 {
            return Err(GainError::DimensionMismatch {
                expected: 1,
                actual: self.basis.dim(),
            });
        }
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x", "gain"])?;
        for &x in xs {
            w.serialize((x, self.gain_at(&[x])[0]))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_gain_csv(&self, xs: &[f64], path: &Path) -> Result<()> {
        self.write_gain_csv(xs, std::fs::File::create(path)?)
    }
}

/// `L^2(rho)` distance between the Galerkin `phi` (shifted to zero
/// `rho`-mean) and the oracle `phi`, by trapezoid quadrature on the oracle grid.
pub fn l2_error_vs_oracle(solution: &GalerkinSolution, oracle: &ScalarExactSolution) -> Result<f64> {
    if solution.basis.dim() != 1 {
        return Err(GainError::DimensionMismatch {
            expected: 1,
            actual: solution.basis.dim(),
        });
    }
    let grid = &oracle.grid;
    let n = grid.len();
    let step = (grid[n - 1] - grid[0]) / (n - 1) as f64;
    let approx: Vec<f64> = grid.iter().map(|x| solution.phi_at(&[*x])).collect();
    let mass = trapezoid(&oracle.rho, step);
    let weighted: Vec<f64> = approx.iter().zip(&oracle.rho).map(|(p, r)| p * r).collect();
    let shift = trapezoid(&weighted, step) / mass;
    let sq: Vec<f64> = approx
        .iter()
        .zip(&oracle.phi)
        .zip(&oracle.rho)
        .map(|((a, e), r)| (a - shift - e).powi(2) * r)
        .collect();
    Ok(trapezoid(&sq, step).sqrt())
}
