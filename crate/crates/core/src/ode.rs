//! Mean-field analysis of the urn: the drift fields `h` and `h~`, the map
//! `F(y) = w(y) R / S_w(y)`, the Jacobian at the uniform vector, the slope
//! constant `b`, the exponent `rho`, and the stability, contraction and
//! fixed-point machinery.
//!
//! Vectors are row vectors, matching the urn recursion. The Jacobian is
//! returned in the same convention: entry `(i, j)` is `dh_j / dy_i`, so that
//! at the uniform point it equals `(b I - (b/k) J) R - I`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Result, UrnError};
use crate::linalg;
use crate::matrix::ReplacementMatrix;
use crate::weight::WeightFunction;

/// Eigenvalues whose real parts differ by less than this are merged when
/// selecting `lambda_s`.
pub const CLUSTER_TOL: f64 = 1e-8;

pub fn uniform(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

fn weights(y: &[f64], w: &WeightFunction) -> Result<(Vec<f64>, f64)> {
    let ws: Vec<f64> = y.iter().map(|&v| w.eval(v)).collect();
    let s: f64 = ws.iter().sum();
    if !(s > crate::dynamics::S_W_FLOOR) || !s.is_finite() {
        return Err(UrnError::DegenerateWeight(s));
    }
    Ok((ws, s))
}

/// `F(y) = w(y) R / S_w(y)`.
pub fn map_f(y: &[f64], w: &WeightFunction, r: &ReplacementMatrix) -> Result<Vec<f64>> {
    let (ws, s) = weights(y, w)?;
    let p: Vec<f64> = ws.iter().map(|v| v / s).collect();
    Ok(r.left_mul(&p))
}

/// Drift of the colour proportions, `h(y) = F(y) - y`.
pub fn drift_h(y: &[f64], w: &WeightFunction, r: &ReplacementMatrix) -> Result<Vec<f64>> {
    let f = map_f(y, w, r)?;
    Ok(f.iter().zip(y).map(|(a, b)| a - b).collect())
}

/// Drift of the colour-count proportions,
/// `h~(y~) = w(y~ R) / S_w(y~ R) - y~`.
pub fn drift_h_tilde(y_tilde: &[f64], w: &WeightFunction, r: &ReplacementMatrix) -> Result<Vec<f64>> {
    let z = r.left_mul(y_tilde);
    let (ws, s) = weights(&z, w)?;
    Ok(ws.iter().zip(y_tilde).map(|(a, b)| a / s - b).collect())
}

/// `b = w'(1/k) / (k w(1/k))`; non-positive for non-increasing `w`.
pub fn compute_b(w: &WeightFunction, k: usize) -> Result<f64> {
    let x = 1.0 / k as f64;
    let wx = w.eval(x);
    if wx == 0.0 {
        return Err(UrnError::ZeroDenominator);
    }
    Ok(w.deriv1(x) / (k as f64 * wx))
}

/// `rho = max(0, 1 - b Re(lambda_s))`.
pub fn rho_from(b: f64, re_lambda_s: f64) -> f64 {
    (1.0 - b * re_lambda_s).max(0.0)
}

/// Analytic Jacobian of `h` at `(1/k) 1`: `(b I - (b/k) J) R - I`, which is
/// `b R - (b/k) J - I` when `R` is doubly stochastic.
pub fn jacobian_at_uniform(w: &WeightFunction, r: &ReplacementMatrix) -> Result<DMatrix<f64>> {
    let k = r.k();
    let b = compute_b(w, k)?;
    let g = DMatrix::identity(k, k) * b - DMatrix::from_element(k, k, b / k as f64);
    Ok(g * r.entries() - DMatrix::identity(k, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComplexValue {
    pub re: f64,
    pub im: f64,
}

impl From<Complex64> for ComplexValue {
    fn from(z: Complex64) -> Self {
        ComplexValue { re: z.re, im: z.im }
    }
}

/// Spectrum of `R` and the quantities derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSummary {
    pub k: usize,
    /// All eigenvalues of `R`, by descending real part.
    pub eigenvalues: Vec<Complex64>,
    /// Index in `eigenvalues` of the copy of the maximal eigenvalue 1 that is
    /// excluded from the non-maximal set.
    pub perron_index: usize,
    pub lambda_s: Complex64,
    pub nu: usize,
    pub b: f64,
    pub rho: f64,
    /// `min -Re` over the Jacobian spectrum (includes the `-1` from the
    /// `1` direction).
    pub rho_jacobian: f64,
    /// `{-1} ∪ {b lambda_i - 1}`.
    pub jacobian_eigenvalues: Vec<Complex64>,
    pub derivative_approximate: bool,
}

impl SpectralSummary {
    /// Eigenvalues of `R` with one copy of the maximal eigenvalue removed.
    pub fn non_maximal(&self) -> impl Iterator<Item = Complex64> + '_ {
        self.eigenvalues
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != self.perron_index)
            .map(|(_, z)| *z)
    }
}

pub fn spectral_summary(w: &WeightFunction, r: &ReplacementMatrix) -> Result<SpectralSummary> {
    let k = r.k();
    let b = compute_b(w, k)?;
    let eigenvalues = linalg::eigenvalues(r.entries())?;
    let perron_index = eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| {
            (a.1 - Complex64::new(1.0, 0.0))
                .norm()
                .total_cmp(&(b.1 - Complex64::new(1.0, 0.0)).norm())
        })
        .map(|(i, _)| i)
        .ok_or_else(|| UrnError::Eigensolver("empty spectrum".into()))?;

    let rest: Vec<Complex64> = eigenvalues
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != perron_index)
        .map(|(_, z)| *z)
        .collect();
    let min_re = rest.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
    let cluster: Vec<Complex64> = rest
        .iter()
        .copied()
        .filter(|z| (z.re - min_re).abs() <= CLUSTER_TOL)
        .collect();
    let nu = cluster.len();
    let lambda_s = cluster
        .iter()
        .copied()
        .max_by(|a, b| a.im.total_cmp(&b.im))
        .expect("k >= 2 leaves a non-maximal eigenvalue");
    let lambda_s = Complex64::new(min_re, lambda_s.im);

    let mut jacobian_eigenvalues = vec![Complex64::new(-1.0, 0.0)];
    jacobian_eigenvalues.extend(rest.iter().map(|z| z * b - 1.0));
    let rho_jacobian = jacobian_eigenvalues
        .iter()
        .map(|z| -z.re)
        .fold(f64::INFINITY, f64::min);

    Ok(SpectralSummary {
        k,
        eigenvalues,
        perron_index,
        lambda_s,
        nu,
        b,
        rho: rho_from(b, min_re),
        rho_jacobian,
        jacobian_eigenvalues,
        derivative_approximate: w.derivative_is_approximate(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityCondition {
    /// `Re(lambda_i) > k w(1/k) / w'(1/k)` for every non-maximal eigenvalue.
    Eigenvalue,
    /// `k > -w'(1/k) / w(1/k)`, sufficient because `Re(lambda) >= -1`.
    ScalarBound,
}

/// Stability of the uniform equilibrium.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityVerdict {
    pub stable: bool,
    pub binding: StabilityCondition,
    pub eigenvalue_condition: bool,
    pub scalar_condition: bool,
    /// `min_i Re(lambda_i) - k w(1/k) / w'(1/k)`; infinite when `w'(1/k) = 0`.
    pub margin: f64,
    /// Largest real part of the Jacobian spectrum.
    pub max_jacobian_real: f64,
    /// Whether `(1/k) 1` is an equilibrium at all (R doubly stochastic).
    pub uniform_is_equilibrium: bool,
}

pub fn check_stability(w: &WeightFunction, r: &ReplacementMatrix) -> Result<StabilityVerdict> {
    let spec = spectral_summary(w, r)?;
    Ok(stability_from(&spec, w, r))
}

pub(crate) fn stability_from(
    spec: &SpectralSummary,
    w: &WeightFunction,
    r: &ReplacementMatrix,
) -> StabilityVerdict {
    let k = spec.k as f64;
    let b = spec.b;
    let max_jacobian_real = spec
        .non_maximal()
        .map(|z| b * z.re - 1.0)
        .fold(-1.0, f64::max);
    let eigenvalue_condition = max_jacobian_real < 0.0;
    let x = 1.0 / k;
    let scalar_condition = k * w.eval(x) + w.deriv1(x) > 0.0;
    let min_re = spec.non_maximal().map(|z| z.re).fold(f64::INFINITY, f64::min);
    let margin = if b == 0.0 {
        f64::INFINITY
    } else {
        min_re - 1.0 / b
    };
    StabilityVerdict {
        stable: eigenvalue_condition,
        binding: if scalar_condition {
            StabilityCondition::ScalarBound
        } else {
            StabilityCondition::Eigenvalue
        },
        eigenvalue_condition,
        scalar_condition,
        margin,
        max_jacobian_real,
        uniform_is_equilibrium: r.is_doubly_stochastic(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ContractionCase {
    /// `w(1) > 0` and `sqrt(k) > 2M / w(1)`.
    PositiveFloor,
    /// `w` convex and `sqrt(k) w(1/k) > 2M`.
    Convex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ContractionStatus {
    Contraction,
    /// Neither sufficient condition holds.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionVerdict {
    pub status: ContractionStatus,
    pub case: Option<ContractionCase>,
    pub lipschitz: f64,
    /// `w(1)` in the first case, `w(1/k)` in the second.
    pub w_floor: Option<f64>,
    /// `M (1 + sqrt(k)) / (k w_floor)`.
    pub factor: Option<f64>,
    /// `2M / (sqrt(k) w_floor)`, the weaker rate the conditions certify.
    pub rate_bound: Option<f64>,
}

impl ContractionVerdict {
    pub fn is_contraction(&self) -> bool {
        self.status == ContractionStatus::Contraction
    }
}

pub fn check_contraction(w: &WeightFunction, r: &ReplacementMatrix) -> ContractionVerdict {
    let k = r.k() as f64;
    let m = w.lipschitz();
    let sk = k.sqrt();
    let w1 = w.eval(1.0);
    let wk = w.eval(1.0 / k);
    let (case, floor) = if w1 > 0.0 && sk * w1 > 2.0 * m {
        (Some(ContractionCase::PositiveFloor), Some(w1))
    } else if w.is_convex() && sk * wk > 2.0 * m {
        (Some(ContractionCase::Convex), Some(wk))
    } else {
        (None, None)
    };
    ContractionVerdict {
        status: if case.is_some() {
            ContractionStatus::Contraction
        } else {
            ContractionStatus::Inconclusive
        },
        case,
        lipschitz: m,
        w_floor: floor,
        factor: floor.map(|f| m * (1.0 + sk) / (k * f)),
        rate_bound: floor.map(|f| 2.0 * m / (sk * f)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPoint {
    pub y: Vec<f64>,
    pub y_tilde: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// `||F(y) - y||_2` at the returned iterate.
    pub residual: f64,
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Picard iteration `y <- F(y)` from the uniform vector. Iterates that leave
/// the simplex are damped by one half. Non-convergence is reported in the
/// result, with the last iterate.
pub fn solve_fixed_point(
    w: &WeightFunction,
    r: &ReplacementMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPoint> {
    let k = r.k();
    let mut y = uniform(k);
    let mut iterations = 0;
    let mut converged = false;
    let mut residual;
    loop {
        let f = map_f(&y, w, r)?;
        let diff: Vec<f64> = f.iter().zip(&y).map(|(a, b)| a - b).collect();
        residual = norm2(&diff);
        if residual <= tol {
            converged = true;
            break;
        }
        if iterations >= max_iter {
            break;
        }
        let on_simplex = f.iter().all(|&v| v >= 0.0) && (f.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if on_simplex {
            y = f;
        } else {
            y.iter_mut().zip(&diff).for_each(|(v, d)| *v += 0.5 * d);
        }
        iterations += 1;
    }
    let (ws, s) = weights(&y, w)?;
    Ok(FixedPoint {
        y_tilde: ws.iter().map(|v| v / s).collect(),
        y,
        converged,
        iterations,
        residual,
    })
}
