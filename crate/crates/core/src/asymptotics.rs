//! Limiting covariances and scaling regimes around the uniform equilibrium.
//!
//! For `rho > 1/2` the covariance comes from the Lyapunov equation
//! `A L + L A^T = I`, `A = I/2 - b R^T`. For `rho = 1/2` it is the limit of a
//! normalized integral of `e^{-u} e^{b u R^T} e^{b u R}`, approximated by
//! quadrature on a grid of horizons and extrapolated.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Serialize, Serializer};

use crate::error::{Result, UrnError};
use crate::linalg::{self, LyapunovMethod, KRONECKER_MAX_K};
use crate::matrix::{MatrixFlags, ReplacementMatrix};
use crate::ode::{self, ComplexValue, ContractionVerdict, FixedPoint, SpectralSummary, StabilityVerdict};
use crate::weight::WeightFunction;

pub use crate::linalg::matrix_exponential;

/// Tolerance on `rho - 1/2` for exactly known derivatives.
pub const RHO_TOL: f64 = 1e-9;
/// Tolerance when `w'` is a finite-difference estimate.
pub const RHO_TOL_APPROX: f64 = 1e-5;
/// Required Lyapunov residual.
pub const LYAPUNOV_RESIDUAL_TOL: f64 = 1e-10;
/// Agreement between the normal-matrix closed form and the Lyapunov solve.
pub const NORMAL_FORM_TOL: f64 = 1e-8;
/// Successive-estimate tolerance for the `rho = 1/2` quadrature.
pub const LAMBDA2_DIAG_TOL: f64 = 1e-3;

/// Default horizons `log n` for `n` in `{1e4, 1e6, 1e8, 1e12}`.
pub fn default_t_grid() -> Vec<f64> {
    [1e4f64, 1e6, 1e8, 1e12].iter().map(|n| n.ln()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `rho > 1/2`, Gaussian limit at rate `sqrt(n)`.
    CltSqrtN,
    /// `rho = 1/2`, Gaussian limit at rate `sqrt(n) / (log n)^(nu - 1/2)`.
    CltSqrtNOverLog,
    /// `0 < rho < 1/2`, non-Gaussian fluctuations of order `n^-rho`.
    SlowRegime,
    /// `rho = 0`.
    Degenerate,
}

impl Regime {
    pub fn from_rho(rho: f64, tol: f64) -> Regime {
        if (rho - 0.5).abs() <= tol {
            Regime::CltSqrtNOverLog
        } else if rho > 0.5 {
            Regime::CltSqrtN
        } else if rho > tol {
            Regime::SlowRegime
        } else {
            Regime::Degenerate
        }
    }

    pub fn is_gaussian(self) -> bool {
        matches!(self, Regime::CltSqrtN | Regime::CltSqrtNOverLog)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::CltSqrtN => "clt_sqrt_n",
            Regime::CltSqrtNOverLog => "clt_sqrt_n_over_log",
            Regime::SlowRegime => "slow_regime",
            Regime::Degenerate => "degenerate",
        }
    }
}

/// Normalizing factor `s(n)` for deviations `Y_n - y_limit`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingLaw {
    pub regime: Regime,
    pub rho: f64,
    pub nu: usize,
}

impl ScalingLaw {
    /// `log n` is floored at 1 so that small horizons stay finite.
    pub fn factor(&self, n: u64) -> f64 {
        let nf = n as f64;
        let log = nf.ln().max(1.0);
        let nu = self.nu as f64;
        match self.regime {
            Regime::CltSqrtN => nf.sqrt(),
            Regime::CltSqrtNOverLog => nf.sqrt() / log.powf(nu - 0.5),
            Regime::SlowRegime => nf.powf(self.rho) / log.powf(nu - 1.0),
            Regime::Degenerate => 1.0,
        }
    }

    pub fn formula(&self) -> String {
        match self.regime {
            Regime::CltSqrtN => "sqrt(n)".into(),
            Regime::CltSqrtNOverLog => format!("sqrt(n) / (log n)^{}", self.nu as f64 - 0.5),
            Regime::SlowRegime => format!("n^{} / (log n)^{}", self.rho, self.nu as f64 - 1.0),
            Regime::Degenerate => "1".into(),
        }
    }
}

fn ser_mat<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    matrix_rows(m).serialize(s)
}

fn ser_opt_mat<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    m.as_ref().map(matrix_rows).serialize(s)
}

/// Row-major nested rows.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// `Gamma~_1 = (1/k) I - J/k^2`.
pub fn gamma1_tilde(k: usize) -> DMatrix<f64> {
    linalg::tangent_projector(k) / k as f64
}

/// `Gamma_1 = R^T Gamma~_1 R`.
pub fn gamma1(r: &ReplacementMatrix) -> DMatrix<f64> {
    r.entries().transpose() * gamma1_tilde(r.k()) * r.entries()
}

/// Solves `A L + L A^T = I`, requiring the spectrum of `A` in the open right
/// half-plane.
pub fn solve_lyapunov(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = a.nrows();
    let min_re = linalg::eigenvalues(a)?
        .iter()
        .map(|z| z.re)
        .fold(f64::INFINITY, f64::min);
    if min_re <= 0.0 {
        return Err(UrnError::LyapunovUnstable(min_re));
    }
    let method = if k <= KRONECKER_MAX_K {
        LyapunovMethod::Kronecker
    } else {
        LyapunovMethod::BartelsStewart
    };
    let id = DMatrix::identity(k, k);
    let x = linalg::lyapunov(a, &id, method)?;
    let res = linalg::lyapunov_residual(a, &x, &id);
    if res > LYAPUNOV_RESIDUAL_TOL {
        return Err(UrnError::Singular(format!(
            "Lyapunov residual {res:e} exceeds {LYAPUNOV_RESIDUAL_TOL:e}"
        )));
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sigma1 {
    pub sigma: DMatrix<f64>,
    pub sigma_tilde: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    /// `max |closed form - Lyapunov|` when `R` is normal.
    pub normal_form_gap: Option<f64>,
}

fn require_doubly_stochastic(r: &ReplacementMatrix) -> Result<()> {
    if r.is_doubly_stochastic() {
        Ok(())
    } else {
        Err(UrnError::RegimeMismatch(
            "limiting covariances require a doubly stochastic R".into(),
        ))
    }
}

fn sigma_from_lambda(lambda: &DMatrix<f64>, r: &ReplacementMatrix, b: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = r.k() as f64;
    let j = DMatrix::from_element(r.k(), r.k(), 1.0);
    let sigma_tilde = (lambda - j / (k * (1.0 - 2.0 * b))) / k;
    let sigma_tilde = (&sigma_tilde + sigma_tilde.transpose()) * 0.5;
    let sigma = r.entries().transpose() * &sigma_tilde * r.entries();
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    (sigma, sigma_tilde)
}

/// Covariances of the `sqrt(n)` limit, valid for `rho > 1/2`.
pub fn sigma1(w: &WeightFunction, r: &ReplacementMatrix) -> Result<Sigma1> {
    require_doubly_stochastic(r)?;
    let spec = ode::spectral_summary(w, r)?;
    let tol = rho_tolerance(&spec);
    if Regime::from_rho(spec.rho, tol) != Regime::CltSqrtN {
        return Err(UrnError::RegimeMismatch(format!(
            "sigma1 requires rho > 1/2, got rho = {}",
            spec.rho
        )));
    }
    sigma1_with_b(r, spec.b)
}

fn sigma1_with_b(r: &ReplacementMatrix, b: f64) -> Result<Sigma1> {
    let k = r.k();
    let id = DMatrix::<f64>::identity(k, k);
    let a = &id * 0.5 - r.entries().transpose() * b;
    let lyap = solve_lyapunov(&a)?;
    let (lambda, normal_form_gap) = if r.flags().normal {
        let m = &id - (r.entries() + r.entries().transpose()) * b;
        let closed = m
            .try_inverse()
            .ok_or_else(|| UrnError::Singular("I - b(R + R^T)".into()))?;
        let gap = (&closed - &lyap).amax();
        if gap > NORMAL_FORM_TOL {
            return Err(UrnError::Singular(format!(
                "normal-matrix closed form disagrees with the Lyapunov solve by {gap:e}"
            )));
        }
        (closed, Some(gap))
    } else {
        (lyap, None)
    };
    let (sigma, sigma_tilde) = sigma_from_lambda(&lambda, r, b);
    Ok(Sigma1 {
        sigma,
        sigma_tilde,
        lambda,
        normal_form_gap,
    })
}

/// Result of the `rho = 1/2` quadrature.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lambda2 {
    #[serde(serialize_with = "ser_mat")]
    pub lambda: DMatrix<f64>,
    #[serde(serialize_with = "ser_mat")]
    pub sigma: DMatrix<f64>,
    #[serde(serialize_with = "ser_mat")]
    pub sigma_tilde: DMatrix<f64>,
    pub diagnostics: Lambda2Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lambda2Diagnostics {
    pub t_grid: Vec<f64>,
    /// Normalized integral at each horizon, row-major.
    pub estimates: Vec<Vec<Vec<f64>>>,
    /// Change of the extrapolated limit between the last two grid pairs
    /// (or of the raw estimates when fewer than three horizons are given).
    pub convergence_gap: f64,
    /// No entry reverses direction by more than the diagnostics tolerance.
    pub monotone: bool,
    pub quadrature_converged: bool,
    pub evaluations: usize,
    /// Magnitude of negative eigenvalues removed from the extrapolated limit.
    pub psd_clip: f64,
}

struct Simpson<'a> {
    f: &'a dyn Fn(f64) -> Result<DMatrix<f64>>,
    evaluations: usize,
    converged: bool,
}

impl Simpson<'_> {
    const MAX_DEPTH: u32 = 40;

    fn eval(&mut self, u: f64) -> Result<DMatrix<f64>> {
        self.evaluations += 1;
        (self.f)(u)
    }

    fn integrate(&mut self, a: f64, b: f64, tol: f64) -> Result<DMatrix<f64>> {
        let fa = self.eval(a)?;
        let fb = self.eval(b)?;
        let m = 0.5 * (a + b);
        let fm = self.eval(m)?;
        let whole = (&fa + &fm * 4.0 + &fb) * ((b - a) / 6.0);
        self.refine(a, b, fa, fm, fb, whole, tol, 0)
    }

    #[allow(clippy::too_many_arguments)]
    fn refine(
        &mut self,
        a: f64,
        b: f64,
        fa: DMatrix<f64>,
        fm: DMatrix<f64>,
        fb: DMatrix<f64>,
        whole: DMatrix<f64>,
        tol: f64,
        depth: u32,
    ) -> Result<DMatrix<f64>> {
        let m = 0.5 * (a + b);
        let flm = self.eval(0.5 * (a + m))?;
        let frm = self.eval(0.5 * (m + b))?;
        let h = (b - a) / 12.0;
        let left = (&fa + &flm * 4.0 + &fm) * h;
        let right = (&fm + &frm * 4.0 + &fb) * h;
        let sum = &left + &right;
        let err = (&sum - &whole).amax();
        if err <= 15.0 * tol {
            return Ok(&sum + (&sum - &whole) / 15.0);
        }
        if depth >= Self::MAX_DEPTH {
            self.converged = false;
            return Ok(sum);
        }
        let l = self.refine(a, m, fa, flm, fm.clone(), left, tol * 0.5, depth + 1)?;
        let r = self.refine(m, b, fm, frm, fb, right, tol * 0.5, depth + 1)?;
        Ok(l + r)
    }
}

fn clip_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let clipped = eig.eigenvalues.iter().map(|&l| (-l).max(0.0)).fold(0.0, f64::max);
    if clipped == 0.0 {
        return ((m + m.transpose()) * 0.5, 0.0);
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0)));
    let out = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    (out, clipped)
}

/// Approximates `L2 = lim (1/T^(2 nu - 1)) int_0^T e^{-u} e^{b u R^T} e^{b u R} du`
/// at the horizons in `t_grid` (ascending), extrapolating linearly in `1/T`
/// from the two largest horizons.
pub fn lambda2_quadrature(w: &WeightFunction, r: &ReplacementMatrix, t_grid: &[f64]) -> Result<Lambda2> {
    require_doubly_stochastic(r)?;
    let spec = ode::spectral_summary(w, r)?;
    if Regime::from_rho(spec.rho, rho_tolerance(&spec)) != Regime::CltSqrtNOverLog {
        return Err(UrnError::RegimeMismatch(format!(
            "lambda2 requires rho = 1/2, got rho = {}",
            spec.rho
        )));
    }
    lambda2_with(r, spec.b, spec.nu, t_grid)
}

fn lambda2_with(r: &ReplacementMatrix, b: f64, nu: usize, t_grid: &[f64]) -> Result<Lambda2> {
    if t_grid.is_empty() || t_grid.iter().any(|t| !(*t > 0.0)) || t_grid.windows(2).any(|p| p[0] >= p[1]) {
        return Err(UrnError::config("t_grid", "T grid must be positive and strictly increasing"));
    }
    let rm = r.entries().clone();
    let integrand = move |u: f64| -> Result<DMatrix<f64>> {
        let e = matrix_exponential(&(&rm * (b * u)))?;
        Ok(e.transpose() * e * (-u).exp())
    };
    let mut quad = Simpson {
        f: &integrand,
        evaluations: 0,
        converged: true,
    };
    let k = r.k();
    let power = 2.0 * nu as f64 - 1.0;
    // cumulative integral over unit panels, sampled at each grid horizon
    let mut acc = DMatrix::<f64>::zeros(k, k);
    let mut lo = 0.0;
    let mut estimates = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        while lo < t {
            let hi = (lo + 1.0).min(t);
            acc += quad.integrate(lo, hi, 1e-13 * (hi - lo))?;
            lo = hi;
        }
        estimates.push(&acc / t.powf(power));
    }

    let extrapolate = |i: usize, j: usize| -> DMatrix<f64> {
        let (t1, t2) = (t_grid[i], t_grid[j]);
        (&estimates[j] * t2 - &estimates[i] * t1) / (t2 - t1)
    };
    let n = t_grid.len();
    let (limit, gap) = match n {
        1 => (estimates[0].clone(), f64::INFINITY),
        2 => (extrapolate(0, 1), (&estimates[1] - &estimates[0]).amax()),
        _ => {
            let last = extrapolate(n - 2, n - 1);
            let prev = extrapolate(n - 3, n - 2);
            let gap = (&last - &prev).amax();
            (last, gap)
        }
    };
    let (lambda, psd_clip) = clip_psd(&limit);

    let monotone = (0..k * k).all(|idx| {
        let diffs: Vec<f64> = estimates.windows(2).map(|p| p[1][idx] - p[0][idx]).collect();
        let up = diffs.iter().any(|d| *d > LAMBDA2_DIAG_TOL);
        let down = diffs.iter().any(|d| *d < -LAMBDA2_DIAG_TOL);
        !(up && down)
    });

    let sigma_tilde = &lambda / k as f64;
    let sigma = r.entries().transpose() * &sigma_tilde * r.entries();
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    Ok(Lambda2 {
        lambda,
        sigma,
        sigma_tilde,
        diagnostics: Lambda2Diagnostics {
            t_grid: t_grid.to_vec(),
            estimates: estimates.iter().map(matrix_rows).collect(),
            convergence_gap: gap,
            monotone,
            quadrature_converged: quad.converged,
            evaluations: quad.evaluations,
            psd_clip,
        },
    })
}

fn rho_tolerance(spec: &SpectralSummary) -> f64 {
    if spec.derivative_approximate {
        RHO_TOL_APPROX
    } else {
        RHO_TOL
    }
}

/// Full analytic report for a model `(w, R)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsymptoticReport {
    pub k: usize,
    pub family: String,
    pub matrix: MatrixFlags,
    pub b: f64,
    pub rho: f64,
    /// `min -Re` over the Jacobian spectrum.
    pub rho_jacobian: f64,
    pub nu: usize,
    pub lambda_s: ComplexValue,
    pub eigenvalues: Vec<ComplexValue>,
    pub jacobian_eigenvalues: Vec<ComplexValue>,
    pub stable: bool,
    pub stability: StabilityVerdict,
    pub contraction: bool,
    pub contraction_detail: ContractionVerdict,
    pub fixed_point: FixedPoint,
    pub regime: Regime,
    pub rho_tolerance: f64,
    pub derivative_approximate: bool,
    pub scaling: ScalingLaw,
    pub scaling_formula: String,
    /// Whether almost sure convergence to the uniform vector is guaranteed
    /// analytically (doubly stochastic R and a contraction).
    pub a2_verified: bool,
    pub gaussian_limit_computed: bool,
    pub notes: Vec<String>,
    #[serde(rename = "Gamma1", serialize_with = "ser_mat")]
    pub gamma1: DMatrix<f64>,
    #[serde(rename = "Gamma1_tilde", serialize_with = "ser_mat")]
    pub gamma1_tilde: DMatrix<f64>,
    #[serde(rename = "Lambda1", serialize_with = "ser_opt_mat", skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<DMatrix<f64>>,
    #[serde(rename = "Sigma1", serialize_with = "ser_opt_mat", skip_serializing_if = "Option::is_none")]
    pub sigma1: Option<DMatrix<f64>>,
    #[serde(rename = "Sigma1_tilde", serialize_with = "ser_opt_mat", skip_serializing_if = "Option::is_none")]
    pub sigma1_tilde: Option<DMatrix<f64>>,
    #[serde(rename = "Lambda2", skip_serializing_if = "Option::is_none")]
    pub lambda2: Option<Lambda2>,
}

impl AsymptoticReport {
    /// Predicted `(Sigma, Sigma~)` for the Gaussian regimes.
    pub fn predicted_covariances(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        match (&self.sigma1, &self.sigma1_tilde, &self.lambda2) {
            (Some(s), Some(st), _) => Some((s, st)),
            (_, _, Some(l2)) => Some((&l2.sigma, &l2.sigma_tilde)),
            _ => None,
        }
    }

    /// Limit of `Y_n`: the uniform vector for doubly stochastic R, otherwise
    /// the fixed point of `F`.
    pub fn y_limit(&self) -> Vec<f64> {
        if self.matrix.doubly_stochastic {
            ode::uniform(self.k)
        } else {
            self.fixed_point.y.clone()
        }
    }

    /// Limit of the count proportions.
    pub fn y_tilde_limit(&self) -> Vec<f64> {
        if self.matrix.doubly_stochastic {
            ode::uniform(self.k)
        } else {
            self.fixed_point.y_tilde.clone()
        }
    }
}

/// Computes the spectral data, stability and contraction verdicts, fixed
/// point and regime, and the limiting covariances when a Gaussian limit
/// applies.
pub fn classify_regime(w: &WeightFunction, r: &ReplacementMatrix) -> Result<AsymptoticReport> {
    classify_regime_with_grid(w, r, &default_t_grid())
}

pub fn classify_regime_with_grid(
    w: &WeightFunction,
    r: &ReplacementMatrix,
    t_grid: &[f64],
) -> Result<AsymptoticReport> {
    let spec = ode::spectral_summary(w, r)?;
    let stability = ode::stability_from(&spec, w, r);
    let contraction = ode::check_contraction(w, r);
    let fixed_point = ode::solve_fixed_point(w, r, 1e-12, 10_000)?;
    let tol = rho_tolerance(&spec);
    let regime = Regime::from_rho(spec.rho, tol);
    let ds = r.is_doubly_stochastic();
    let mut notes = Vec::new();

    let (mut lambda1, mut sigma1_m, mut sigma1_t, mut lambda2) = (None, None, None, None);
    if !ds {
        notes.push(
            "R is not doubly stochastic: the uniform vector is not an equilibrium and no Gaussian limit is computed"
                .to_string(),
        );
    } else {
        match regime {
            Regime::CltSqrtN => {
                let s = sigma1_with_b(r, spec.b)?;
                lambda1 = Some(s.lambda);
                sigma1_m = Some(s.sigma);
                sigma1_t = Some(s.sigma_tilde);
            }
            Regime::CltSqrtNOverLog => {
                let l2 = lambda2_with(r, spec.b, spec.nu, t_grid)?;
                if l2.diagnostics.convergence_gap > LAMBDA2_DIAG_TOL || !l2.diagnostics.quadrature_converged {
                    notes.push(format!(
                        "Lambda2 quadrature not converged (gap {:e})",
                        l2.diagnostics.convergence_gap
                    ));
                }
                if l2.lambda.amax() == 0.0 || linalg::symmetric_pinv(&l2.sigma, 1e-8).1 + 1 < r.k() {
                    notes.push("Sigma2 has reduced rank on the tangent space".to_string());
                }
                lambda2 = Some(l2);
            }
            Regime::SlowRegime | Regime::Degenerate => {
                notes.push("no Gaussian limit computed".to_string());
            }
        }
        if !stability.stable {
            notes.push("uniform equilibrium is linearly unstable".to_string());
        }
    }
    if spec.derivative_approximate {
        notes.push(format!(
            "w' estimated by finite differences; rho tolerance widened to {RHO_TOL_APPROX:e}"
        ));
    }
    let a2_verified = ds && contraction.is_contraction();
    if regime.is_gaussian() && !a2_verified {
        notes.push("A2 unverified".to_string());
    }

    let scaling = ScalingLaw {
        regime,
        rho: spec.rho,
        nu: spec.nu,
    };
    Ok(AsymptoticReport {
        k: spec.k,
        family: w.family_name().to_string(),
        matrix: r.flags(),
        b: spec.b,
        rho: spec.rho,
        rho_jacobian: spec.rho_jacobian,
        nu: spec.nu,
        lambda_s: spec.lambda_s.into(),
        eigenvalues: spec.eigenvalues.iter().map(|&z| z.into()).collect(),
        jacobian_eigenvalues: spec.jacobian_eigenvalues.iter().map(|&z| z.into()).collect(),
        stable: stability.stable,
        stability,
        contraction: contraction.is_contraction(),
        contraction_detail: contraction,
        fixed_point,
        regime,
        rho_tolerance: tol,
        derivative_approximate: spec.derivative_approximate,
        scaling_formula: scaling.formula(),
        scaling,
        a2_verified,
        gaussian_limit_computed: sigma1_m.is_some() || lambda2.is_some(),
        notes,
        gamma1: gamma1(r),
        gamma1_tilde: gamma1_tilde(r.k()),
        lambda1,
        sigma1: sigma1_m,
        sigma1_tilde: sigma1_t,
        lambda2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::validate_replacement_matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax()
    }

    fn swap() -> ReplacementMatrix {
        ReplacementMatrix::permutation(&[1, 0]).unwrap()
    }

    fn families() -> Vec<WeightFunction> {
        vec![
            WeightFunction::linear(1.0).unwrap(),
            WeightFunction::linear(2.5).unwrap(),
            WeightFunction::inverse_power(0.5, 1.5).unwrap(),
            WeightFunction::exponential(0.8).unwrap(),
            WeightFunction::constant(3.0).unwrap(),
        ]
    }

    fn assert_covariance_shape(m: &DMatrix<f64>) {
        assert!(max_diff(m, &m.transpose()) <= 1e-10);
        assert!(linalg::min_symmetric_eigenvalue(m) >= -1e-10);
        let ones = DMatrix::from_element(m.nrows(), 1, 1.0);
        assert!((m * ones).amax() <= 1e-8);
    }

    #[test]
    fn lyapunov_trivial() {
        let a = DMatrix::identity(3, 3) * 0.5;
        assert!(max_diff(&solve_lyapunov(&a).unwrap(), &DMatrix::identity(3, 3)) < 1e-14);
    }

    #[test]
    fn lyapunov_rejects_unstable_spectrum() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -0.1]);
        let err = solve_lyapunov(&a).unwrap_err();
        assert!(err.to_string().starts_with("Lyapunov unstable"), "{err}");
    }

    #[test]
    fn polya_sigma_closed_form() {
        for k in 2..=8 {
            let r = ReplacementMatrix::identity(k).unwrap();
            for w in families() {
                let b = ode::compute_b(&w, k).unwrap();
                let s = sigma1(&w, &r).unwrap();
                let expected = linalg::tangent_projector(k) / (k as f64 * (1.0 - 2.0 * b));
                assert!(max_diff(&s.sigma, &expected) <= 1e-10, "k {k} {}", w.family_name());
                assert_covariance_shape(&s.sigma);
                assert_covariance_shape(&s.sigma_tilde);
            }
        }
    }

    #[test]
    fn polya_two_colour_value() {
        let s = sigma1(&WeightFunction::linear(1.0).unwrap(), &ReplacementMatrix::identity(2).unwrap()).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]) / 12.0;
        assert!(max_diff(&s.sigma, &expected) < 1e-14);
    }

    #[test]
    fn constant_weight_gives_multinomial_covariance() {
        let r = validate_replacement_matrix(&[
            vec![0.2, 0.3, 0.5],
            vec![0.5, 0.2, 0.3],
            vec![0.3, 0.5, 0.2],
        ])
        .unwrap();
        let s = sigma1(&WeightFunction::constant(1.0).unwrap(), &r).unwrap();
        assert!(max_diff(&s.lambda, &DMatrix::identity(3, 3)) < 1e-12);
        assert!(max_diff(&s.sigma_tilde, &gamma1_tilde(3)) < 1e-12);
        assert!(max_diff(&s.sigma, &gamma1(&r)) < 1e-12);
    }

    #[test]
    fn non_normal_doubly_stochastic_uses_lyapunov_path() {
        // doubly stochastic but not normal
        let r = validate_replacement_matrix(&[
            vec![0.5, 0.5, 0.0],
            vec![0.0, 0.5, 0.5],
            vec![0.5, 0.0, 0.5],
        ])
        .unwrap();
        assert!(r.flags().normal, "circulant matrices are normal");
        let r = validate_replacement_matrix(&[
            vec![0.6, 0.4, 0.0],
            vec![0.0, 0.3, 0.7],
            vec![0.4, 0.3, 0.3],
        ])
        .unwrap();
        assert!(r.is_doubly_stochastic() && !r.flags().normal);
        let s = sigma1(&WeightFunction::exponential(1.0).unwrap(), &r).unwrap();
        assert!(s.normal_form_gap.is_none());
        assert_covariance_shape(&s.sigma);
        assert_covariance_shape(&s.sigma_tilde);
    }

    #[test]
    fn sigma1_rejects_wrong_regime() {
        let err = sigma1(&WeightFunction::linear(1.5).unwrap(), &swap()).unwrap_err();
        assert!(matches!(err, UrnError::RegimeMismatch(_)));
        let skew = validate_replacement_matrix(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        assert!(matches!(
            sigma1(&WeightFunction::linear(3.0).unwrap(), &skew),
            Err(UrnError::RegimeMismatch(_))
        ));
    }

    #[test]
    fn matrix_exponential_examples() {
        let z = matrix_exponential(&DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(z, DMatrix::identity(3, 3));
        let d = matrix_exponential(&DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0]))).unwrap();
        assert!((d[(0, 0)] - 1f64.exp()).abs() < 1e-14);
        assert!((d[(1, 1)] - 2f64.exp()).abs() < 1e-13);
        let n = matrix_exponential(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])).unwrap();
        assert!(max_diff(&n, &DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])) < 1e-15);
    }

    #[test]
    fn lambda2_swap_example() {
        let w = WeightFunction::linear(1.5).unwrap();
        let l2 = lambda2_quadrature(&w, &swap(), &default_t_grid()).unwrap();
        let proj = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        assert!(max_diff(&l2.lambda, &proj) < 1e-6, "{}", l2.lambda);
        assert!(max_diff(&l2.sigma_tilde, &(&proj * 0.5)) < 1e-6);
        assert!(max_diff(&l2.sigma, &l2.sigma_tilde) < 1e-12);
        assert!(l2.diagnostics.monotone);
        assert!(l2.diagnostics.quadrature_converged);
        assert!(l2.diagnostics.convergence_gap < LAMBDA2_DIAG_TOL);
        assert_covariance_shape(&l2.sigma);
    }

    #[test]
    fn lambda2_decaying_modes_vanish() {
        // symmetric R with every pair 1 - b(l_i + l_j) > 0 except the
        // critical one: the normalized integral keeps only the projector
        let r = validate_replacement_matrix(&[
            vec![0.0, 0.5, 0.5],
            vec![0.5, 0.0, 0.5],
            vec![0.5, 0.5, 0.0],
        ])
        .unwrap();
        // eigenvalues 1, -1/2, -1/2; b = -1 would give rho = 1/2
        let w = WeightFunction::linear(1.0).unwrap();
        let spec = ode::spectral_summary(&w, &r).unwrap();
        assert!((spec.b + 0.5).abs() < 1e-14);
        // rho = 1 - 0.5 * 0.5 = 0.75: not critical, so quadrature is refused
        assert!(lambda2_quadrature(&w, &r, &default_t_grid()).is_err());
        let l2 = lambda2_with(&r, -1.0, 2, &default_t_grid()).unwrap();
        // the critical eigenspace is 2-dimensional but nondefective, so the
        // T^3 normalization sends everything to zero
        assert!(l2.lambda.amax() < 1e-2, "{}", l2.lambda);
    }

    #[test]
    fn regime_examples() {
        let w = WeightFunction::linear(1.0).unwrap();
        let p = 0.125;
        let r = validate_replacement_matrix(&[vec![p, 1.0 - p], vec![1.0 - p, p]]).unwrap();
        let rep = classify_regime(&w, &r).unwrap();
        assert_eq!(rep.regime, Regime::SlowRegime);
        assert!((rep.rho - 0.25).abs() < 1e-12);
        assert_eq!(rep.nu, 1);
        assert!(!rep.gaussian_limit_computed);
        assert!(rep.notes.iter().any(|n| n == "no Gaussian limit computed"));
        assert!((rep.scaling.factor(10_000) - 10.0).abs() < 1e-9);

        let rep = classify_regime(&w, &ReplacementMatrix::identity(2).unwrap()).unwrap();
        assert_eq!(rep.regime, Regime::CltSqrtN);
        assert_eq!(rep.rho, 2.0);
        assert!(rep.sigma1.is_some());

        let rep = classify_regime(&WeightFunction::linear(1.5).unwrap(), &swap()).unwrap();
        assert_eq!(rep.regime, Regime::CltSqrtNOverLog);
        assert!(rep.lambda2.is_some());
        let n = 1_000_000u64;
        let expected = (n as f64).sqrt() / (n as f64).ln().sqrt();
        assert!((rep.scaling.factor(n) - expected).abs() < 1e-9);

        let rev = ReplacementMatrix::permutation(&[3, 2, 1, 0]).unwrap();
        let rep = classify_regime(&WeightFunction::inverse_power(0.25, 4.0).unwrap(), &rev).unwrap();
        assert_eq!(rep.regime, Regime::Degenerate);
        assert!(!rep.stable);
    }

    #[test]
    fn k2_linear_boundary_sweep() {
        for i in 0..=20 {
            let theta = 1.0 + 0.025 * i as f64;
            let w = WeightFunction::linear(theta).unwrap();
            // 2p - 1 = (1 - 2 theta)/2
            let p_star = (3.0 - 2.0 * theta) / 4.0;
            for (dp, expected) in [
                (1e-6, Regime::CltSqrtN),
                (0.0, Regime::CltSqrtNOverLog),
                (-1e-6, Regime::SlowRegime),
            ] {
                let p = p_star + dp;
                if !(0.0..=1.0).contains(&p) {
                    continue;
                }
                let r = validate_replacement_matrix(&[vec![p, 1.0 - p], vec![1.0 - p, p]]).unwrap();
                let spec = ode::spectral_summary(&w, &r).unwrap();
                assert_eq!(Regime::from_rho(spec.rho, RHO_TOL), expected, "theta {theta} p {p}");
            }
        }
    }

    #[test]
    fn k_at_least_three_linear_never_below_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let k = rng.random_range(3..8);
            let theta = rng.random_range(1.0..4.0);
            let perm: Vec<usize> = (0..k).rev().collect();
            let r = ReplacementMatrix::permutation(&perm).unwrap();
            let spec = ode::spectral_summary(&WeightFunction::linear(theta).unwrap(), &r).unwrap();
            assert!(spec.rho >= 0.5 - 1e-12);
        }
    }

    #[test]
    fn normal_closed_form_matches_on_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let k = rng.random_range(2..7);
            let p: f64 = rng.random_range(0.0..1.0);
            // p I + (1 - p) J/k is symmetric doubly stochastic
            let m = DMatrix::identity(k, k) * p + DMatrix::from_element(k, k, (1.0 - p) / k as f64);
            let r = ReplacementMatrix::new(m).unwrap();
            let s = sigma1(&WeightFunction::inverse_power(0.4, 1.2).unwrap(), &r).unwrap();
            assert!(s.normal_form_gap.unwrap() <= NORMAL_FORM_TOL);
        }
    }
}
