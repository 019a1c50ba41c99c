//! Balanced replacement matrices.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Result, UrnError};

/// Tolerance for row/column sums and the normality test.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Structural classification of a row-stochastic replacement matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct MatrixFlags {
    pub row_stochastic: bool,
    pub doubly_stochastic: bool,
    pub normal: bool,
    pub identity: bool,
    pub uniform_j_over_k: bool,
    pub permutation: bool,
}

/// A `k x k` row-stochastic replacement matrix. Row `i` holds the masses
/// added to the urn when colour `i` is drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementMatrix {
    entries: DMatrix<f64>,
    flags: MatrixFlags,
}

/// Validates a balanced replacement matrix given as rows, normalizing it to
/// unit row sums.
pub fn validate_replacement_matrix(rows: &[Vec<f64>]) -> Result<ReplacementMatrix> {
    let k = rows.len();
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != k) {
        return Err(UrnError::InvalidMatrix(format!(
            "matrix must be square: row {i} has {} entries, expected {k}",
            r.len()
        )));
    }
    ReplacementMatrix::new(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
}

impl ReplacementMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let k = entries.nrows();
        if k != entries.ncols() {
            return Err(UrnError::InvalidMatrix(format!(
                "matrix must be square, got {}x{}",
                k,
                entries.ncols()
            )));
        }
        if k < 2 {
            return Err(UrnError::InvalidMatrix(format!("k >= 2 required, got {k}")));
        }
        for (i, j) in (0..k).flat_map(|i| (0..k).map(move |j| (i, j))) {
            let v = entries[(i, j)];
            if !v.is_finite() {
                return Err(UrnError::InvalidMatrix(format!("entry ({i},{j}) is not finite")));
            }
            if v < 0.0 {
                return Err(UrnError::InvalidMatrix(format!(
                    "negative entry {v} at ({i},{j})"
                )));
            }
        }

        let sums: Vec<f64> = entries.row_iter().map(|r| r.sum()).collect();
        let common = sums[0];
        if common <= 0.0 {
            return Err(UrnError::InvalidMatrix("row 0 sums to zero".into()));
        }
        let offending: Vec<String> = sums
            .iter()
            .enumerate()
            .filter(|(_, s)| (**s - common).abs() > STOCHASTIC_TOL * common.max(1.0))
            .map(|(i, s)| format!("row {i} sums to {s}"))
            .collect();
        if !offending.is_empty() {
            return Err(UrnError::InvalidMatrix(format!(
                "non-balanced matrix (row 0 sums to {common}): {}",
                offending.join(", ")
            )));
        }

        let entries = if (common - 1.0).abs() > STOCHASTIC_TOL {
            entries / common
        } else {
            entries
        };
        let flags = classify(&entries);
        Ok(ReplacementMatrix { entries, flags })
    }

    pub fn identity(k: usize) -> Result<Self> {
        Self::new(DMatrix::identity(k, k))
    }

    /// `J / k`, every row uniform.
    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(DMatrix::from_element(k, k, 1.0 / k as f64))
    }

    /// Permutation matrix sending colour `i` to colour `perm[i]`.
    pub fn permutation(perm: &[usize]) -> Result<Self> {
        let k = perm.len();
        let mut m = DMatrix::zeros(k, k);
        for (i, &j) in perm.iter().enumerate() {
            if j >= k {
                return Err(UrnError::InvalidMatrix(format!("permutation target {j} >= {k}")));
            }
            m[(i, j)] = 1.0;
        }
        Self::new(m)
    }

    pub fn k(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn flags(&self) -> MatrixFlags {
        self.flags
    }

    pub fn is_doubly_stochastic(&self) -> bool {
        self.flags.doubly_stochastic
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }

    /// Row-vector product `x R`.
    pub fn left_mul(&self, x: &[f64]) -> Vec<f64> {
        let k = self.k();
        let mut out = vec![0.0; k];
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            for (j, o) in out.iter_mut().enumerate() {
                *o += xi * self.entries[(i, j)];
            }
        }
        out
    }
}

fn classify(m: &DMatrix<f64>) -> MatrixFlags {
    let k = m.nrows();
    let row_stochastic = m.row_iter().all(|r| (r.sum() - 1.0).abs() <= STOCHASTIC_TOL);
    let doubly_stochastic =
        row_stochastic && m.column_iter().all(|c| (c.sum() - 1.0).abs() <= STOCHASTIC_TOL);
    let commutator = m.transpose() * m - m * m.transpose();
    let normal = commutator.amax() <= STOCHASTIC_TOL;
    let identity = (m - DMatrix::<f64>::identity(k, k)).amax() == 0.0;
    let uniform_j_over_k = m.iter().all(|v| (v - 1.0 / k as f64).abs() <= STOCHASTIC_TOL);
    let permutation = doubly_stochastic && m.iter().all(|&v| v == 0.0 || v == 1.0);
    MatrixFlags {
        row_stochastic,
        doubly_stochastic,
        normal,
        identity,
        uniform_j_over_k,
        permutation,
    }
}
