//! Ensembles of independent trajectories and the statistics used to check
//! almost sure convergence and the Gaussian limits.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Serialize, Serializer};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::asymptotics::{matrix_rows, AsymptoticReport, Regime, ScalingLaw};
use crate::dynamics::{replica_seed, run_trajectory, verify_accounting, IdentityCheck};
use crate::error::{Result, UrnError};
use crate::linalg;
use crate::model::ExperimentConfig;

/// Tail probabilities for the Mahalanobis check.
pub const MAHALANOBIS_TAILS: [f64; 3] = [0.10, 0.05, 0.01];

/// What the ensemble is compared against.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleTarget {
    pub y_limit: Vec<f64>,
    pub y_tilde_limit: Vec<f64>,
    pub scaling: ScalingLaw,
    pub sigma: Option<DMatrix<f64>>,
    pub sigma_tilde: Option<DMatrix<f64>>,
}

impl EnsembleTarget {
    pub fn from_report(report: &AsymptoticReport) -> Self {
        let cov = report.predicted_covariances();
        EnsembleTarget {
            y_limit: report.y_limit(),
            y_tilde_limit: report.y_tilde_limit(),
            scaling: report.scaling,
            sigma: cov.map(|c| c.0.clone()),
            sigma_tilde: cov.map(|c| c.1.clone()),
        }
    }
}

fn ser_mat<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    matrix_rows(m).serialize(s)
}

fn ser_opt_mat<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    m.as_ref().map(matrix_rows).serialize(s)
}

/// Cross-replica statistics at one horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointStats {
    pub n: u64,
    pub scale: f64,
    pub mean_y: Vec<f64>,
    pub mean_y_tilde: Option<Vec<f64>>,
    /// Mean of `||Y_n - y_limit||_2` over replicas.
    pub mean_distance: f64,
    pub mean_distance_tilde: Option<f64>,
    /// Mean of `s(n) (Y_n - y_limit)`.
    pub mean_scaled_deviation: Vec<f64>,
    /// Sample covariance of `s(n) (Y_n - y_limit)`.
    #[serde(serialize_with = "ser_mat")]
    pub covariance: DMatrix<f64>,
    #[serde(serialize_with = "ser_opt_mat")]
    pub covariance_tilde: Option<DMatrix<f64>>,
}

/// Normality statistics of the scaled deviations at the final horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalityStats {
    /// Kolmogorov–Smirnov distance of each standardized coordinate of
    /// `s(n)(Y_n - y_limit)` against the standard normal.
    pub ks: Vec<f64>,
    pub ks_tilde: Option<Vec<f64>>,
    pub mahalanobis: MahalanobisTails,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MahalanobisTails {
    /// Degrees of freedom (rank of the projected prediction).
    pub rank: usize,
    pub nominal: Vec<f64>,
    pub observed: Vec<f64>,
}

/// Worst result of one accounting identity over all replicas.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccountingSummary {
    pub failures: usize,
    pub checks: Vec<IdentityCheck>,
}

impl AccountingSummary {
    pub fn pass(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleSummary {
    pub k: usize,
    pub replicas: u64,
    pub base_seed: u64,
    pub seeds: Vec<u64>,
    pub n_max: u64,
    pub scaling: ScalingLaw,
    pub y_limit: Vec<f64>,
    pub y_tilde_limit: Vec<f64>,
    pub checkpoints: Vec<CheckpointStats>,
    pub accounting: AccountingSummary,
    pub normality: Option<NormalityStats>,
    /// Per-checkpoint, per-replica `Y_n`.
    #[serde(skip)]
    pub samples: Vec<Vec<Vec<f64>>>,
    /// Per-checkpoint, per-replica `Y~_n` (`None` at `n = 0`).
    #[serde(skip)]
    pub samples_tilde: Vec<Option<Vec<Vec<f64>>>>,
}

/// Pairwise summation, so the result does not depend on thread scheduling
/// and keeps rounding error at `O(log m)`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Sample mean and covariance (divisor `m - 1`, zero for one sample).
fn mean_cov(samples: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let m = samples.len();
    let k = samples[0].len();
    let mut col = vec![0.0; m];
    let mean: Vec<f64> = (0..k)
        .map(|i| {
            col.iter_mut().zip(samples).for_each(|(c, s)| *c = s[i]);
            pairwise_sum(&col) / m as f64
        })
        .collect();
    let mut cov = DMatrix::zeros(k, k);
    if m > 1 {
        for i in 0..k {
            for j in i..k {
                col.iter_mut()
                    .zip(samples)
                    .for_each(|(c, s)| *c = (s[i] - mean[i]) * (s[j] - mean[j]));
                let v = pairwise_sum(&col) / (m - 1) as f64;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
    }
    (mean, cov)
}

fn scaled(samples: &[Vec<f64>], limit: &[f64], s: f64) -> Vec<Vec<f64>> {
    samples
        .iter()
        .map(|y| y.iter().zip(limit).map(|(a, b)| s * (a - b)).collect())
        .collect()
}

fn mean_distance(samples: &[Vec<f64>], limit: &[f64]) -> f64 {
    let d: Vec<f64> = samples
        .iter()
        .map(|y| norm2(&y.iter().zip(limit).map(|(a, b)| a - b).collect::<Vec<_>>()))
        .collect();
    pairwise_sum(&d) / d.len() as f64
}

/// Kolmogorov–Smirnov distance of `xs` against the standard normal.
pub fn ks_standard_normal(xs: &[f64]) -> f64 {
    let normal = Normal::standard();
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            (f - i as f64 / m).max((i + 1) as f64 / m - f)
        })
        .fold(0.0, f64::max)
}

fn per_coordinate_ks(dev: &[Vec<f64>], sigma: &DMatrix<f64>) -> Result<Vec<f64>> {
    (0..sigma.nrows())
        .map(|i| {
            let var = sigma[(i, i)];
            if !(var > 0.0) {
                return Err(UrnError::Singular(format!(
                    "predicted variance of coordinate {i} is {var}"
                )));
            }
            let sd = var.sqrt();
            let xs: Vec<f64> = dev.iter().map(|d| d[i] / sd).collect();
            Ok(ks_standard_normal(&xs))
        })
        .collect()
}

/// Projects `sigma` onto the sum-zero subspace and checks that it has full
/// rank `k - 1` there.
fn tangent_prediction(sigma: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, usize)> {
    let k = sigma.nrows();
    let p = linalg::tangent_projector(k);
    let proj = &p * sigma * &p;
    let (pinv, rank) = linalg::symmetric_pinv(&proj, 1e-10);
    if rank + 1 < k {
        return Err(UrnError::Singular(format!(
            "predicted covariance has rank {rank} on the {}-dimensional tangent space",
            k - 1
        )));
    }
    Ok((proj, pinv, rank))
}

fn mahalanobis(dev: &[Vec<f64>], sigma: &DMatrix<f64>) -> Result<MahalanobisTails> {
    let (_, pinv, rank) = tangent_prediction(sigma)?;
    let chi = ChiSquared::new(rank as f64).map_err(|e| UrnError::Singular(e.to_string()))?;
    let d2: Vec<f64> = dev
        .iter()
        .map(|d| {
            let v = DVector::from_column_slice(d);
            (v.transpose() * &pinv * &v)[(0, 0)]
        })
        .collect();
    let observed = MAHALANOBIS_TAILS
        .iter()
        .map(|&a| {
            let q = chi.inverse_cdf(1.0 - a);
            d2.iter().filter(|&&x| x > q).count() as f64 / d2.len() as f64
        })
        .collect();
    Ok(MahalanobisTails {
        rank,
        nominal: MAHALANOBIS_TAILS.to_vec(),
        observed,
    })
}

/// Runs `config.replicas` independent trajectories in parallel and
/// aggregates them at every checkpoint. Replica `i` uses
/// `replica_seed(config.seed, i)`, so the result is independent of the
/// thread count.
pub fn run_ensemble(config: &ExperimentConfig, target: &EnsembleTarget) -> Result<EnsembleSummary> {
    let k = config.k();
    let seeds: Vec<u64> = (0..config.replicas).map(|i| replica_seed(config.seed, i)).collect();
    let horizons = config.checkpoint_horizons();

    struct ReplicaOut {
        ys: Vec<Vec<f64>>,
        yts: Vec<Option<Vec<f64>>>,
        checks: Vec<IdentityCheck>,
        pass: bool,
    }

    let outs: Vec<ReplicaOut> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let traj = run_trajectory(config, seed).map_err(|e| UrnError::Replica {
                replica: i as u64,
                seed,
                source: Box::new(e),
            })?;
            let acc = verify_accounting(&traj);
            Ok(ReplicaOut {
                ys: traj.checkpoints.iter().map(|c| c.y()).collect(),
                yts: traj.checkpoints.iter().map(|c| c.y_tilde()).collect(),
                pass: acc.pass(),
                checks: acc.checks,
            })
        })
        .collect::<Result<_>>()?;

    let failures = outs.iter().filter(|o| !o.pass).count();
    let mut checks = outs[0].checks.clone();
    for o in &outs[1..] {
        for (agg, c) in checks.iter_mut().zip(&o.checks) {
            agg.pass &= c.pass;
            if c.max_residual > agg.max_residual {
                agg.max_residual = c.max_residual;
                agg.worst_n = c.worst_n;
                agg.worst_colour = c.worst_colour;
            }
        }
    }

    let mut samples = Vec::with_capacity(horizons.len());
    let mut samples_tilde = Vec::with_capacity(horizons.len());
    let mut stats = Vec::with_capacity(horizons.len());
    for (c, &n) in horizons.iter().enumerate() {
        let ys: Vec<Vec<f64>> = outs.iter().map(|o| o.ys[c].clone()).collect();
        let yts: Option<Vec<Vec<f64>>> = outs.iter().map(|o| o.yts[c].clone()).collect();
        let s = target.scaling.factor(n);
        let (mean_y, _) = mean_cov(&ys);
        let (mean_dev, cov) = mean_cov(&scaled(&ys, &target.y_limit, s));
        let (mean_y_tilde, cov_tilde, dist_tilde) = match &yts {
            Some(t) => {
                let (m, _) = mean_cov(t);
                let (_, ct) = mean_cov(&scaled(t, &target.y_tilde_limit, s));
                (Some(m), Some(ct), Some(mean_distance(t, &target.y_tilde_limit)))
            }
            None => (None, None, None),
        };
        stats.push(CheckpointStats {
            n,
            scale: s,
            mean_y,
            mean_y_tilde,
            mean_distance: mean_distance(&ys, &target.y_limit),
            mean_distance_tilde: dist_tilde,
            mean_scaled_deviation: mean_dev,
            covariance: cov,
            covariance_tilde: cov_tilde,
        });
        samples.push(ys);
        samples_tilde.push(yts);
    }

    // a prediction singular on the tangent space (e.g. R = J/k) has no
    // standardized marginals to test
    let testable = |s: &DMatrix<f64>| tangent_prediction(s).is_ok();
    let normality = match (&target.sigma, config.replicas > 1) {
        (Some(sigma), true) if testable(sigma) => {
            let last = horizons.len() - 1;
            let s = target.scaling.factor(horizons[last]);
            let dev = scaled(&samples[last], &target.y_limit, s);
            let ks = per_coordinate_ks(&dev, sigma)?;
            let ks_tilde = match (&target.sigma_tilde, &samples_tilde[last]) {
                (Some(st), Some(t)) if testable(st) => Some(per_coordinate_ks(&scaled(t, &target.y_tilde_limit, s), st)?),
                _ => None,
            };
            Some(NormalityStats {
                ks,
                ks_tilde,
                mahalanobis: mahalanobis(&dev, sigma)?,
            })
        }
        _ => None,
    };

    Ok(EnsembleSummary {
        k,
        replicas: config.replicas,
        base_seed: config.seed,
        seeds,
        n_max: config.n_max,
        scaling: target.scaling,
        y_limit: target.y_limit.clone(),
        y_tilde_limit: target.y_tilde_limit.clone(),
        checkpoints: stats,
        accounting: AccountingSummary { failures, checks },
        normality,
        samples,
        samples_tilde,
    })
}

impl EnsembleSummary {
    pub fn final_stats(&self) -> &CheckpointStats {
        self.checkpoints.last().expect("at least one checkpoint")
    }

    /// Per-checkpoint CSV: `n, mean_Y_1..k, dist, cov_ij (row-major), ks_1..k`.
    /// KS columns are filled on the final row only.
    pub fn write_csv<W: Write>(&self, mut out: W, preamble: &[String]) -> Result<()> {
        for line in preamble {
            writeln!(out, "# {line}")?;
        }
        let k = self.k;
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["n".to_string()];
        header.extend((1..=k).map(|i| format!("mean_Y_{i}")));
        header.push("dist".into());
        for i in 1..=k {
            header.extend((1..=k).map(|j| format!("cov_{i}{j}")));
        }
        header.extend((1..=k).map(|i| format!("ks_{i}")));
        wtr.write_record(&header)?;
        let last = self.checkpoints.len() - 1;
        for (c, st) in self.checkpoints.iter().enumerate() {
            let mut rec = vec![st.n.to_string()];
            rec.extend(st.mean_y.iter().map(|v| v.to_string()));
            rec.push(st.mean_distance.to_string());
            rec.extend(st.covariance.transpose().iter().map(|v| v.to_string()));
            match (&self.normality, c == last) {
                (Some(nm), true) => rec.extend(nm.ks.iter().map(|v| v.to_string())),
                _ => rec.extend(std::iter::repeat_n(String::new(), k)),
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceDiagnostic {
    pub epsilon: f64,
    pub horizons: Vec<u64>,
    /// Mean `||Y_n - y_limit||` at each horizon.
    pub mean_distances: Vec<f64>,
    pub final_mean_distance: f64,
    /// Fraction of replicas within `epsilon` of the limit at the final horizon.
    pub fraction_within: f64,
    /// Fraction of consecutive checkpoint pairs with decreasing mean distance.
    pub monotonicity_score: f64,
    /// Mean distance at the final horizon is at least its value at the start
    /// of the last decade.
    pub non_decreasing_last_decade: bool,
}

pub fn convergence_diagnostic(summary: &EnsembleSummary, y_limit: &[f64], epsilon: f64) -> Result<ConvergenceDiagnostic> {
    if summary.samples.len() < 3 {
        return Err(UrnError::config(
            "checkpoints",
            "convergence diagnostics need at least 3 checkpoints",
        ));
    }
    let horizons: Vec<u64> = summary.checkpoints.iter().map(|c| c.n).collect();
    let mean_distances: Vec<f64> = summary.samples.iter().map(|s| mean_distance(s, y_limit)).collect();
    let last = summary.samples.last().unwrap();
    let within = last
        .iter()
        .filter(|y| norm2(&y.iter().zip(y_limit).map(|(a, b)| a - b).collect::<Vec<_>>()) < epsilon)
        .count();
    let pairs = mean_distances.len() - 1;
    let decreasing = mean_distances.windows(2).filter(|p| p[1] < p[0]).count();
    let n_final = *horizons.last().unwrap();
    let start = horizons
        .iter()
        .position(|&n| n > 0 && n * 10 >= n_final)
        .unwrap_or(horizons.len() - 1);
    let final_d = *mean_distances.last().unwrap();
    Ok(ConvergenceDiagnostic {
        epsilon,
        horizons,
        final_mean_distance: final_d,
        fraction_within: within as f64 / last.len() as f64,
        monotonicity_score: decreasing as f64 / pairs as f64,
        non_decreasing_last_decade: final_d >= mean_distances[start],
        mean_distances,
    })
}

/// Pass thresholds for the Gaussian comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CltThresholds {
    /// Relative Frobenius error on the tangent space.
    pub covariance: f64,
    /// Per-coordinate KS distance; not gated when `None`.
    pub ks: Option<f64>,
}

impl CltThresholds {
    pub fn for_regime(regime: Regime) -> Self {
        match regime {
            Regime::CltSqrtNOverLog => CltThresholds {
                covariance: 0.25,
                ks: None,
            },
            _ => CltThresholds {
                covariance: 0.15,
                ks: Some(0.05),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CltDiagnostic {
    pub n: u64,
    pub thresholds: CltThresholds,
    pub covariance_rel_error: f64,
    pub covariance_tilde_rel_error: Option<f64>,
    pub ks: Vec<f64>,
    pub ks_tilde: Option<Vec<f64>>,
    pub mahalanobis: MahalanobisTails,
    pub covariance_pass: bool,
    pub ks_pass: bool,
}

impl CltDiagnostic {
    pub fn pass(&self) -> bool {
        self.covariance_pass && self.ks_pass
    }
}

/// `||P (C - S) P||_F / ||P S P||_F` with `P = I - J/k`.
pub fn tangent_relative_error(empirical: &DMatrix<f64>, predicted: &DMatrix<f64>) -> Result<f64> {
    let (proj, _, _) = tangent_prediction(predicted)?;
    let p = linalg::tangent_projector(predicted.nrows());
    let emp = &p * empirical * &p;
    Ok((emp - &proj).norm() / proj.norm())
}

/// Compares the final-horizon scaled deviations with the predicted Gaussian
/// limit.
pub fn clt_diagnostic(
    summary: &EnsembleSummary,
    sigma: &DMatrix<f64>,
    sigma_tilde: Option<&DMatrix<f64>>,
    thresholds: CltThresholds,
) -> Result<CltDiagnostic> {
    let last = summary.samples.len() - 1;
    let st = summary.final_stats();
    let dev = scaled(&summary.samples[last], &summary.y_limit, st.scale);
    let covariance_rel_error = tangent_relative_error(&st.covariance, sigma)?;
    let covariance_tilde_rel_error = match (sigma_tilde, &st.covariance_tilde) {
        (Some(pred), Some(emp)) => Some(tangent_relative_error(emp, pred)?),
        _ => None,
    };
    let ks = per_coordinate_ks(&dev, sigma)?;
    let ks_tilde = match (sigma_tilde, &summary.samples_tilde[last]) {
        (Some(pred), Some(t)) => Some(per_coordinate_ks(&scaled(t, &summary.y_tilde_limit, st.scale), pred)?),
        _ => None,
    };
    let ks_pass = thresholds
        .ks
        .map_or(true, |t| ks.iter().all(|&d| d <= t));
    Ok(CltDiagnostic {
        n: st.n,
        thresholds,
        covariance_pass: covariance_rel_error <= thresholds.covariance,
        covariance_rel_error,
        covariance_tilde_rel_error,
        mahalanobis: mahalanobis(&dev, sigma)?,
        ks,
        ks_tilde,
        ks_pass,
    })
}
