//! Dense linear algebra for small matrices: spectra, the matrix exponential
//! and the continuous Lyapunov equation `A X + X A^T = C`.

use nalgebra::{DMatrix, Schur, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Result, UrnError};

const SCHUR_EPS: f64 = 1e-15;
const SCHUR_MAX_ITER: usize = 10_000;

/// Eigenvalues of a real square matrix, sorted by descending real part then
/// descending imaginary part.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    let mut ev: Vec<Complex64> = if (m - m.transpose()).amax() == 0.0 {
        SymmetricEigen::new(m.clone())
            .eigenvalues
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect()
    } else {
        let schur = Schur::try_new(m.clone(), SCHUR_EPS, SCHUR_MAX_ITER)
            .ok_or_else(|| UrnError::Eigensolver("real Schur iteration did not converge".into()))?;
        schur.complex_eigenvalues().iter().copied().collect()
    };
    if ev.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(UrnError::Eigensolver("non-finite eigenvalue".into()));
    }
    ev.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    Ok(ev)
}

/// Greedy matching of two spectra; returns the largest pairwise distance,
/// or infinity when the sizes differ.
pub fn spectrum_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut used = vec![false; b.len()];
    let mut worst: f64 = 0.0;
    for x in a {
        let (j, d) = b
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, y)| (j, (x - y).norm()))
            .min_by(|p, q| p.1.total_cmp(&q.1))
            .expect("sizes match");
        used[j] = true;
        worst = worst.max(d);
    }
    worst
}

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Padé(6,6) coefficients of `exp`.
const PADE6: [f64; 7] = [
    1.0,
    0.5,
    5.0 / 44.0,
    1.0 / 66.0,
    1.0 / 792.0,
    1.0 / 15840.0,
    1.0 / 665280.0,
];

/// `exp(A)` by scaling and squaring with a diagonal Padé(6,6) approximant.
///
/// `A` is scaled by `2^-s` so that `||A 2^-s||_1 <= 1/2`, where the
/// approximant's relative backward error is below `1e-16`.
pub fn matrix_exponential(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix_exponential requires a square matrix");
    if a.iter().any(|v| !v.is_finite()) {
        return Err(UrnError::Overflow(f64::INFINITY));
    }
    let norm = one_norm(a);
    // e^norm overflows f64 beyond ~709.78
    if norm > 700.0 {
        return Err(UrnError::Overflow(norm));
    }
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let x = a * 2f64.powi(-s);
    let id = DMatrix::<f64>::identity(n, n);

    let x2 = &x * &x;
    let x4 = &x2 * &x2;
    let x6 = &x4 * &x2;
    let even = &id * PADE6[0] + &x2 * PADE6[2] + &x4 * PADE6[4] + &x6 * PADE6[6];
    let odd = &x * (&id * PADE6[1] + &x2 * PADE6[3] + &x4 * PADE6[5]);
    let p = &even + &odd;
    let q = &even - &odd;
    let mut e = q
        .lu()
        .solve(&p)
        .ok_or_else(|| UrnError::Singular("Padé denominator".into()))?;
    for _ in 0..s {
        e = &e * &e;
    }
    if e.iter().any(|v| !v.is_finite()) {
        return Err(UrnError::Overflow(norm));
    }
    Ok(e)
}

/// Method used for the Lyapunov equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LyapunovMethod {
    /// Dense solve of `(I ⊗ A + A ⊗ I) vec(X) = vec(C)`; `O(k^6)`.
    Kronecker,
    /// Complex Schur form of `A` followed by triangular back substitution.
    BartelsStewart,
}

/// Above this size the Kronecker system is replaced by Bartels–Stewart.
pub const KRONECKER_MAX_K: usize = 32;

/// Solves `A X + X A^T = C` for symmetric `C`.
pub fn lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>, method: LyapunovMethod) -> Result<DMatrix<f64>> {
    let x = match method {
        LyapunovMethod::Kronecker => lyapunov_kronecker(a, c)?,
        LyapunovMethod::BartelsStewart => lyapunov_bartels_stewart(a, c)?,
    };
    Ok((&x + x.transpose()) * 0.5)
}

/// `max |A X + X A^T - C|`.
pub fn lyapunov_residual(a: &DMatrix<f64>, x: &DMatrix<f64>, c: &DMatrix<f64>) -> f64 {
    (a * x + x * a.transpose() - c).amax()
}

fn lyapunov_kronecker(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = a.nrows();
    let kk = k * k;
    // column-major vec: vec(A X) = (I ⊗ A) vec X, vec(X A^T) = (A ⊗ I) vec X
    let mut big = DMatrix::<f64>::zeros(kk, kk);
    for j in 0..k {
        for i in 0..k {
            let row = j * k + i;
            for l in 0..k {
                big[(row, j * k + l)] += a[(i, l)];
                big[(row, l * k + i)] += a[(j, l)];
            }
        }
    }
    let rhs = nalgebra::DVector::from_iterator(kk, c.iter().copied());
    let sol = big
        .lu()
        .solve(&rhs)
        .ok_or_else(|| UrnError::Singular("Kronecker Lyapunov system".into()))?;
    Ok(DMatrix::from_column_slice(k, k, sol.as_slice()))
}

fn lyapunov_bartels_stewart(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = a.nrows();
    let ac: DMatrix<Complex64> = a.map(|v| Complex64::new(v, 0.0));
    let cc: DMatrix<Complex64> = c.map(|v| Complex64::new(v, 0.0));
    let schur = Schur::try_new(ac, SCHUR_EPS, SCHUR_MAX_ITER)
        .ok_or_else(|| UrnError::Eigensolver("complex Schur iteration did not converge".into()))?;
    let (q, t) = schur.unpack();
    // A real, so A^T = A^H = Q T^H Q^H and Y = Q^H X Q solves
    // T Y + Y T^H = Q^H C Q. T^H is lower triangular: column j couples only
    // to columns l >= j, so sweep j downwards.
    let f = q.adjoint() * cc * &q;
    let th = t.adjoint();
    let mut y = DMatrix::<Complex64>::zeros(k, k);
    for j in (0..k).rev() {
        let mut rhs = f.column(j).into_owned();
        for l in (j + 1)..k {
            let coef = th[(l, j)];
            if coef != Complex64::new(0.0, 0.0) {
                rhs -= y.column(l) * coef;
            }
        }
        let shift = th[(j, j)];
        // back substitution with (T + shift I)
        for i in (0..k).rev() {
            let mut acc = rhs[i];
            for m in (i + 1)..k {
                acc -= t[(i, m)] * y[(m, j)];
            }
            let d = t[(i, i)] + shift;
            if d.norm() < 1e-300 {
                return Err(UrnError::Singular(
                    "A and -A^T share an eigenvalue".into(),
                ));
            }
            y[(i, j)] = acc / d;
        }
    }
    let x = &q * y * q.adjoint();
    Ok(x.map(|z| z.re))
}

/// Moore–Penrose pseudo-inverse of a symmetric matrix, discarding
/// eigenvalues below `rel_tol * max |eigenvalue|`. Returns the inverse and
/// its rank.
pub fn symmetric_pinv(m: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, usize) {
    let n = m.nrows();
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let scale = eig.eigenvalues.amax();
    let mut out = DMatrix::zeros(n, n);
    let mut rank = 0;
    if scale == 0.0 {
        return (out, 0);
    }
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam.abs() > rel_tol * scale {
            rank += 1;
            let v = eig.eigenvectors.column(i);
            out += (v * v.transpose()) / lam;
        }
    }
    (out, rank)
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new((m + m.transpose()) * 0.5)
        .eigenvalues
        .min()
}

/// Orthogonal projector `I - J/k` onto the sum-zero subspace.
pub fn tangent_projector(k: usize) -> DMatrix<f64> {
    DMatrix::identity(k, k) - DMatrix::from_element(k, k, 1.0 / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Truncated Taylor series oracle.
    fn taylor_exp(a: &DMatrix<f64>, terms: usize) -> DMatrix<f64> {
        let n = a.nrows();
        let mut sum = DMatrix::identity(n, n);
        let mut term = DMatrix::identity(n, n);
        for l in 1..terms {
            term = &term * a / l as f64;
            sum += &term;
        }
        sum
    }

    fn random_matrix(rng: &mut ChaCha8Rng, k: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0) * scale)
    }

    #[test]
    fn exp_examples() {
        let z = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(matrix_exponential(&z).unwrap(), DMatrix::identity(3, 3));

        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0]));
        let e = matrix_exponential(&d).unwrap();
        assert!((e[(0, 0)] - 1f64.exp()).abs() < 1e-14);
        assert!((e[(1, 1)] - 2f64.exp()).abs() < 1e-13);
        assert_eq!(e[(0, 1)], 0.0);

        let nil = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = matrix_exponential(&nil).unwrap();
        assert!((e - DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])).amax() < 1e-15);
    }

    #[test]
    fn exp_matches_taylor_on_unit_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..200 {
            let k = 2 + trial % 6;
            let mut a = random_matrix(&mut rng, k, 1.0);
            let nrm = one_norm(&a);
            a /= nrm.max(1.0) / rng.random_range(0.05..1.0);
            let e = matrix_exponential(&a).unwrap();
            let t = taylor_exp(&a, 30);
            assert!((e - t).amax() < 1e-12, "trial {trial}");
        }
    }

    #[test]
    fn exp_of_larger_norm_uses_group_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 4, 3.0);
        let e = matrix_exponential(&a).unwrap();
        let half = matrix_exponential(&(&a * 0.5)).unwrap();
        assert!((&e - &half * &half).amax() < 1e-10 * e.amax());
        let inv = matrix_exponential(&(-&a)).unwrap();
        assert!((&e * inv - DMatrix::identity(4, 4)).amax() < 1e-9);
    }

    #[test]
    fn exp_overflow_is_an_error() {
        let a = DMatrix::from_element(2, 2, 1e6);
        assert!(matches!(matrix_exponential(&a), Err(UrnError::Overflow(_))));
    }

    /// Brute-force oracle: explicit Kronecker sum via nalgebra's `kronecker`
    /// and a full-pivot LU.
    fn kron_oracle(a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
        let k = a.nrows();
        let id = DMatrix::<f64>::identity(k, k);
        let big = id.kronecker(a) + a.kronecker(&id);
        let rhs = nalgebra::DVector::from_column_slice(c.as_slice());
        let sol = big.full_piv_lu().solve(&rhs).unwrap();
        DMatrix::from_column_slice(k, k, sol.as_slice())
    }

    fn random_stable(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
        // shift so the spectrum lies in the right half-plane
        let m = random_matrix(rng, k, 1.0);
        let shift = eigenvalues(&m).unwrap().iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
        m + DMatrix::identity(k, k) * (0.3 - shift.min(0.0))
    }

    #[test]
    fn lyapunov_methods_agree_with_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 2..=6 {
            for _ in 0..10 {
                let a = random_stable(&mut rng, k);
                let c = DMatrix::identity(k, k);
                let oracle = kron_oracle(&a, &c);
                for method in [LyapunovMethod::Kronecker, LyapunovMethod::BartelsStewart] {
                    let x = lyapunov(&a, &c, method).unwrap();
                    assert!(lyapunov_residual(&a, &x, &c) < 1e-10, "{method:?} k={k}");
                    assert!((&x - &oracle).amax() < 1e-10, "{method:?} k={k}");
                }
            }
        }
    }

    #[test]
    fn lyapunov_of_half_identity() {
        let a = DMatrix::identity(3, 3) * 0.5;
        let x = lyapunov(&a, &DMatrix::identity(3, 3), LyapunovMethod::Kronecker).unwrap();
        assert!((x - DMatrix::identity(3, 3)).amax() < 1e-15);
    }

    #[test]
    fn eigenvalues_of_permutations() {
        let rev = DMatrix::from_fn(4, 4, |i, j| if i + j == 3 { 1.0 } else { 0.0 });
        let ev = eigenvalues(&rev).unwrap();
        let expected: Vec<Complex64> = [1.0, 1.0, -1.0, -1.0]
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        assert!(spectrum_distance(&ev, &expected) < 1e-14);

        let cyc = DMatrix::from_fn(3, 3, |i, j| if (i + 1) % 3 == j { 1.0 } else { 0.0 });
        let ev = eigenvalues(&cyc).unwrap();
        let s = 3f64.sqrt() / 2.0;
        let expected = vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(-0.5, s),
            Complex64::new(-0.5, -s),
        ];
        assert!(spectrum_distance(&ev, &expected) < 1e-12, "{ev:?}");
    }

    #[test]
    fn pinv_of_projector() {
        let p = tangent_projector(3);
        let (pi, rank) = symmetric_pinv(&p, 1e-10);
        assert_eq!(rank, 2);
        assert!((pi - &p).amax() < 1e-12);
    }
}
