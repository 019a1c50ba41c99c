//! Urn state and experiment configuration.

use crate::error::{Result, UrnError};
use crate::matrix::ReplacementMatrix;
use crate::weight::WeightFunction;

/// Tolerance for `U0` lying on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Composition of the urn at time `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct UrnState {
    pub n: u64,
    /// Colour masses `U_n`; they sum to `n + 1`.
    pub u: Vec<f64>,
    /// Colour counts `N_n`; they sum to `n`.
    pub counts: Vec<u64>,
    /// Colour drawn at the previous step.
    pub last_draw: Option<usize>,
}

impl UrnState {
    pub fn initial(u0: &[f64]) -> Self {
        UrnState {
            n: 0,
            u: u0.to_vec(),
            counts: vec![0; u0.len()],
            last_draw: None,
        }
    }

    pub fn k(&self) -> usize {
        self.u.len()
    }

    /// Colour proportions `Y_n = U_n / (n + 1)`.
    pub fn proportions(&self) -> Vec<f64> {
        let total = (self.n + 1) as f64;
        self.u.iter().map(|u| u / total).collect()
    }

    /// Colour-count proportions `N_n / n`, undefined at `n = 0`.
    pub fn count_proportions(&self) -> Option<Vec<f64>> {
        (self.n > 0).then(|| {
            let n = self.n as f64;
            self.counts.iter().map(|&c| c as f64 / n).collect()
        })
    }
}

/// Horizons at which trajectories are recorded.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum CheckpointSchedule {
    /// `{ceil(10^(j/8))}` for `j = 0, 1, ...` up to `n_max`, plus `0` and `n_max`.
    #[default]
    Geometric,
    /// Explicit horizons; `0` and `n_max` are always added.
    Explicit(Vec<u64>),
}

impl CheckpointSchedule {
    pub fn resolve(&self, n_max: u64) -> Vec<u64> {
        let mut points = vec![0, n_max];
        match self {
            CheckpointSchedule::Geometric => {
                for j in 0.. {
                    // guard against pow rounding up exact powers of ten
                    let x = 10f64.powf(j as f64 / 8.0);
                    let n = (x * (1.0 - 1e-12)).ceil();
                    if n > n_max as f64 {
                        break;
                    }
                    points.push(n as u64);
                }
            }
            CheckpointSchedule::Explicit(list) => {
                points.extend(list.iter().copied().filter(|&n| n <= n_max));
            }
        }
        points.sort_unstable();
        points.dedup();
        points
    }
}

/// A validated experiment: model, horizon and Monte Carlo settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub weight: WeightFunction,
    pub r: ReplacementMatrix,
    pub u0: Vec<f64>,
    pub n_max: u64,
    pub checkpoints: CheckpointSchedule,
    pub replicas: u64,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Builds a configuration with a uniform `U0`, geometric checkpoints,
    /// one replica and seed 0.
    pub fn new(weight: WeightFunction, r: ReplacementMatrix, n_max: u64) -> Result<Self> {
        let k = r.k();
        ExperimentConfig {
            weight,
            r,
            u0: vec![1.0 / k as f64; k],
            n_max,
            checkpoints: CheckpointSchedule::Geometric,
            replicas: 1,
            seed: 0,
        }
        .validated()
    }

    pub fn with_u0(mut self, u0: Vec<f64>) -> Result<Self> {
        self.u0 = u0;
        self.validated()
    }

    pub fn with_replicas(mut self, replicas: u64) -> Result<Self> {
        self.replicas = replicas;
        self.validated()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_checkpoints(mut self, checkpoints: CheckpointSchedule) -> Self {
        self.checkpoints = checkpoints;
        self
    }

    pub fn k(&self) -> usize {
        self.r.k()
    }

    pub fn checkpoint_horizons(&self) -> Vec<u64> {
        self.checkpoints.resolve(self.n_max)
    }

    /// Checks the invariants: `U0` strictly positive on the simplex,
    /// `replicas >= 1`.
    pub fn validated(self) -> Result<Self> {
        validate_u0(&self.u0, self.r.k())?;
        if self.replicas < 1 {
            return Err(UrnError::config("replicas", "replicas >= 1 required"));
        }
        Ok(self)
    }
}

pub(crate) fn validate_u0(u0: &[f64], k: usize) -> Result<()> {
    if u0.len() != k {
        return Err(UrnError::config(
            "U0",
            format!("U0 has {} entries, R is {k}x{k}", u0.len()),
        ));
    }
    if let Some((i, v)) = u0.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
        return Err(UrnError::config(
            format!("U0[{i}]"),
            format!("U0 entries must be strictly positive (got {v})"),
        ));
    }
    let s: f64 = u0.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(UrnError::config("U0", format!("U0 not on simplex (sums to {s})")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_schedule() {
        let pts = CheckpointSchedule::Geometric.resolve(100);
        assert_eq!(pts.first(), Some(&0));
        assert_eq!(pts.last(), Some(&100));
        assert!(pts.windows(2).all(|w| w[0] < w[1]));
        for n in [1, 2, 3, 4, 6, 8, 10, 14, 18, 24, 32, 43, 57, 75, 100] {
            assert!(pts.contains(&n), "missing {n} in {pts:?}");
        }
        assert_eq!(CheckpointSchedule::Geometric.resolve(0), vec![0]);
    }

    #[test]
    fn explicit_schedule_clips_and_adds_ends() {
        let pts = CheckpointSchedule::Explicit(vec![50, 10, 500]).resolve(100);
        assert_eq!(pts, vec![0, 10, 50, 100]);
    }

    #[test]
    fn state_proportions() {
        let mut s = UrnState::initial(&[0.5, 0.5]);
        assert_eq!(s.proportions(), vec![0.5, 0.5]);
        assert_eq!(s.count_proportions(), None);
        s.n = 1;
        s.u = vec![1.5, 0.5];
        s.counts = vec![1, 0];
        assert_eq!(s.proportions(), vec![0.75, 0.25]);
        assert_eq!(s.count_proportions(), Some(vec![1.0, 0.0]));
    }

    #[test]
    fn u0_validation() {
        assert!(validate_u0(&[0.5, 0.5], 2).is_ok());
        let err = validate_u0(&[0.5, 0.6], 2).unwrap_err().to_string();
        assert!(err.contains("U0 not on simplex"), "{err}");
        assert!(validate_u0(&[1.0, 0.0], 2).is_err());
        assert!(validate_u0(&[1.0], 2).is_err());
    }
}
