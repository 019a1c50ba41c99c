//! Configuration files, result serialization, the rho region grids, and the
//! command implementations behind the `nrurn` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asymptotics::{classify_regime, matrix_rows, AsymptoticReport, Regime};
use crate::dynamics::{run_trajectory, verify_accounting};
use crate::error::{Result, UrnError};
use crate::matrix::validate_replacement_matrix;
use crate::model::{validate_u0, CheckpointSchedule, ExperimentConfig};
use crate::montecarlo::{
    clt_diagnostic, convergence_diagnostic, run_ensemble, CltThresholds, EnsembleTarget,
};
use crate::ode::{self, rho_from};
use crate::weight::{WeightFunction, WeightSpec};

/// Replica count used when a configuration does not set one.
pub const DEFAULT_REPLICAS: u64 = 1000;
/// Non-convergence proxy: distance and maximal fraction of replicas near an
/// unstable equilibrium.
pub const NON_CONVERGENCE_EPS: f64 = 0.05;
pub const NON_CONVERGENCE_FRACTION: f64 = 0.10;
/// Final mean distance allowed when no covariance prediction is available.
pub const CONVERGENCE_TOL: f64 = 0.01;

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawWeight {
    family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    c: Option<f64>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(untagged)]
enum RawCheckpoints {
    Named(String),
    List(Vec<u64>),
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    weight: RawWeight,
    #[serde(rename = "R")]
    r: Vec<Vec<f64>>,
    #[serde(rename = "U0", default, skip_serializing_if = "Option::is_none")]
    u0: Option<Vec<f64>>,
    n_max: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    checkpoints: Option<RawCheckpoints>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    replicas: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

fn weight_spec(raw: &RawWeight) -> Result<WeightSpec> {
    let need = |name: &str, v: Option<f64>| {
        v.ok_or_else(|| {
            UrnError::config(
                format!("weight.{name}"),
                format!("family `{}` requires `{name}`", raw.family),
            )
        })
    };
    let allowed: &[&str] = match raw.family.as_str() {
        "linear" | "exponential" => &["theta"],
        "inverse_power" => &["theta", "alpha"],
        "constant" => &["c"],
        other => {
            return Err(UrnError::config(
                "weight.family",
                format!("unknown weight family `{other}` (expected linear, inverse_power, exponential or constant)"),
            ))
        }
    };
    for (name, v) in [("theta", raw.theta), ("alpha", raw.alpha), ("c", raw.c)] {
        if v.is_some() && !allowed.contains(&name) {
            return Err(UrnError::config(
                format!("weight.{name}"),
                format!("`{name}` is not a parameter of family `{}`", raw.family),
            ));
        }
    }
    Ok(match raw.family.as_str() {
        "linear" => WeightSpec::Linear {
            theta: need("theta", raw.theta)?,
        },
        "exponential" => WeightSpec::Exponential {
            theta: need("theta", raw.theta)?,
        },
        "inverse_power" => WeightSpec::InversePower {
            theta: need("theta", raw.theta)?,
            alpha: need("alpha", raw.alpha)?,
        },
        _ => WeightSpec::Constant { c: need("c", raw.c)? },
    })
}

/// Parses and validates a JSON experiment configuration. Missing `U0`,
/// `checkpoints`, `replicas` and `seed` default to the uniform vector, the
/// geometric schedule, 1000 and 0.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        UrnError::config(path, e.into_inner().to_string())
    })?;

    let spec = weight_spec(&raw.weight)?;
    let weight = WeightFunction::from_spec(spec).map_err(|e| UrnError::config("weight", e.to_string()))?;
    let r = validate_replacement_matrix(&raw.r).map_err(|e| UrnError::config("R", e.to_string()))?;
    let k = r.k();
    let u0 = raw.u0.unwrap_or_else(|| ode::uniform(k));
    validate_u0(&u0, k)?;
    let checkpoints = match raw.checkpoints {
        None => CheckpointSchedule::Geometric,
        Some(RawCheckpoints::Named(s)) if s == "geometric" => CheckpointSchedule::Geometric,
        Some(RawCheckpoints::Named(s)) => {
            return Err(UrnError::config(
                "checkpoints",
                format!("expected \"geometric\" or a list of horizons, got \"{s}\""),
            ))
        }
        Some(RawCheckpoints::List(v)) => CheckpointSchedule::Explicit(v),
    };
    ExperimentConfig {
        weight,
        r,
        u0,
        n_max: raw.n_max,
        checkpoints,
        replicas: raw.replicas.unwrap_or(DEFAULT_REPLICAS),
        seed: raw.seed.unwrap_or(0),
    }
    .validated()
}

/// Reads and parses a configuration file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| UrnError::config(path.display().to_string(), e.to_string()))?;
    parse_config(&text)
}

/// Serializes a configuration to JSON that [`parse_config`] maps back to an
/// equal configuration. Custom weight functions have no JSON form.
pub fn serialize_config(config: &ExperimentConfig) -> Result<String> {
    let spec = config.weight.spec().ok_or_else(|| {
        UrnError::config("weight", "custom weight functions cannot be serialized")
    })?;
    let weight = match spec {
        WeightSpec::Linear { theta } => RawWeight {
            family: "linear".into(),
            theta: Some(theta),
            alpha: None,
            c: None,
        },
        WeightSpec::Exponential { theta } => RawWeight {
            family: "exponential".into(),
            theta: Some(theta),
            alpha: None,
            c: None,
        },
        WeightSpec::InversePower { theta, alpha } => RawWeight {
            family: "inverse_power".into(),
            theta: Some(theta),
            alpha: Some(alpha),
            c: None,
        },
        WeightSpec::Constant { c } => RawWeight {
            family: "constant".into(),
            theta: None,
            alpha: None,
            c: Some(c),
        },
    };
    let raw = RawConfig {
        weight,
        r: config.r.rows(),
        u0: Some(config.u0.clone()),
        n_max: config.n_max,
        checkpoints: Some(match &config.checkpoints {
            CheckpointSchedule::Geometric => RawCheckpoints::Named("geometric".into()),
            CheckpointSchedule::Explicit(v) => RawCheckpoints::List(v.clone()),
        }),
        replicas: Some(config.replicas),
        seed: Some(config.seed),
    };
    Ok(serde_json::to_string_pretty(&raw)?)
}

/// Reproducibility header attached to every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Header {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
}

impl Header {
    pub fn new(canonical: &str, seed: Option<u64>) -> Self {
        let digest = Sha256::digest(canonical.as_bytes());
        Header {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
            seed,
        }
    }

    pub fn for_config(config: &ExperimentConfig) -> Result<Self> {
        Ok(Header::new(&serialize_config(config)?, Some(config.seed)))
    }

    /// Comment lines for CSV outputs.
    pub fn lines(&self) -> Vec<String> {
        vec![
            format!("{} {}", self.tool, self.version),
            format!("config_sha256: {}", self.config_sha256),
            match self.seed {
                Some(s) => format!("seed: {s}"),
                None => "seed: none".to_string(),
            },
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Emit {
    #[default]
    Json,
    Csv,
    Both,
}

impl Emit {
    pub fn json(self) -> bool {
        matches!(self, Emit::Json | Emit::Both)
    }

    pub fn csv(self) -> bool {
        matches!(self, Emit::Csv | Emit::Both)
    }
}

#[derive(Serialize)]
struct Wrapped<'a, T: Serialize> {
    header: &'a Header,
    #[serde(flatten)]
    body: T,
}

fn to_json<T: Serialize>(header: &Header, body: T) -> Result<String> {
    Ok(serde_json::to_string_pretty(&Wrapped { header, body: &body })?)
}

/// Writes `name` under `out`, or to stdout when `out` is `None`.
fn emit_text(out: Option<&Path>, name: &str, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(name);
            fs::write(&path, text)?;
            written.push(path);
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                writeln!(stdout)?;
            }
        }
    }
    Ok(())
}

/// Analytic report for the configured model.
pub fn cmd_analyze(config: &ExperimentConfig) -> Result<AsymptoticReport> {
    classify_regime(&config.weight, &config.r)
}

/// One-row CSV of the scalar fields of a report, with matrices flattened to
/// `Name_ij` columns.
pub fn report_csv(report: &AsymptoticReport, header: &Header) -> Result<String> {
    let mut cols: Vec<(String, String)> = vec![
        ("k".into(), report.k.to_string()),
        ("family".into(), report.family.clone()),
        ("b".into(), report.b.to_string()),
        ("rho".into(), report.rho.to_string()),
        ("rho_jacobian".into(), report.rho_jacobian.to_string()),
        ("nu".into(), report.nu.to_string()),
        ("lambda_s_re".into(), report.lambda_s.re.to_string()),
        ("lambda_s_im".into(), report.lambda_s.im.to_string()),
        ("stable".into(), report.stable.to_string()),
        ("contraction".into(), report.contraction.to_string()),
        ("regime".into(), report.regime.as_str().into()),
        ("scaling".into(), report.scaling_formula.clone()),
    ];
    for (i, v) in report.fixed_point.y.iter().enumerate() {
        cols.push((format!("y_star_{}", i + 1), v.to_string()));
    }
    let mut mats = vec![("Gamma1", Some(&report.gamma1))];
    mats.push(("Sigma1", report.sigma1.as_ref()));
    mats.push(("Sigma1_tilde", report.sigma1_tilde.as_ref()));
    mats.push(("Lambda2", report.lambda2.as_ref().map(|l| &l.lambda)));
    mats.push(("Sigma2", report.lambda2.as_ref().map(|l| &l.sigma)));
    mats.push(("Sigma2_tilde", report.lambda2.as_ref().map(|l| &l.sigma_tilde)));
    for (name, m) in mats {
        if let Some(m) = m {
            for (i, row) in matrix_rows(m).iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    cols.push((format!("{name}_{}{}", i + 1, j + 1), v.to_string()));
                }
            }
        }
    }
    let mut buf = Vec::new();
    for line in header.lines() {
        writeln!(buf, "# {line}")?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(cols.iter().map(|c| &c.0))?;
        w.write_record(cols.iter().map(|c| &c.1))?;
        w.flush()?;
    }
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

/// Runs `analyze` and writes `report.json` / `report.csv`.
pub fn run_analyze(config: &ExperimentConfig, out: Option<&Path>, emit: Emit) -> Result<Vec<PathBuf>> {
    let header = Header::for_config(config)?;
    let report = cmd_analyze(config)?;
    let mut written = Vec::new();
    if emit.json() {
        emit_text(out, "report.json", &to_json(&header, &report)?, &mut written)?;
    }
    if emit.csv() {
        emit_text(out, "report.csv", &report_csv(&report, &header)?, &mut written)?;
    }
    Ok(written)
}

/// Simulates one trajectory with the configured seed and writes its
/// checkpoints (`trajectory.csv`) and accounting (`trajectory.json`).
pub fn cmd_simulate(config: &ExperimentConfig, out: Option<&Path>, emit: Emit) -> Result<Vec<PathBuf>> {
    let header = Header::for_config(config)?;
    let traj = run_trajectory(config, config.seed)?;
    let accounting = verify_accounting(&traj);
    let mut written = Vec::new();
    if emit.json() {
        #[derive(Serialize)]
        struct Body<'a> {
            seed: u64,
            checkpoints: Vec<serde_json::Value>,
            max_martingale_norm_sq: f64,
            accounting: &'a crate::dynamics::AccountingReport,
        }
        let checkpoints = traj
            .checkpoints
            .iter()
            .map(|c| serde_json::json!({"n": c.n, "Y": c.y(), "Ytilde": c.y_tilde(), "U": c.u, "N": c.counts}))
            .collect();
        let body = Body {
            seed: traj.seed,
            checkpoints,
            max_martingale_norm_sq: traj.max_martingale_norm_sq,
            accounting: &accounting,
        };
        emit_text(out, "trajectory.json", &to_json(&header, body)?, &mut written)?;
    }
    if emit.csv() {
        let mut buf = Vec::new();
        traj.write_csv(&mut buf, &header.lines())?;
        emit_text(out, "trajectory.csv", &String::from_utf8(buf).expect("utf-8"), &mut written)?;
    }
    Ok(written)
}

/// One verification criterion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl std::fmt::Display for CriterionLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyOutcome {
    pub lines: Vec<CriterionLine>,
    pub notes: Vec<String>,
    pub written: Vec<PathBuf>,
}

impl VerifyOutcome {
    pub fn pass(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }
}

/// Runs the ensemble, compares it with the analytic report and writes
/// `summary.json` / `summary.csv`. The criteria are: accounting;
/// convergence to the predicted limit (or, for an unstable uniform
/// equilibrium, non-convergence); and in the Gaussian regimes the tangent
/// covariance error and, for `rho > 1/2`, the per-coordinate KS distance.
pub fn cmd_verify(config: &ExperimentConfig, out: Option<&Path>, emit: Emit) -> Result<VerifyOutcome> {
    let header = Header::for_config(config)?;
    let report = cmd_analyze(config)?;
    let target = EnsembleTarget::from_report(&report);
    let summary = run_ensemble(config, &target)?;
    let mut lines = Vec::new();

    let acc = &summary.accounting;
    let worst = acc
        .checks
        .iter()
        .map(|c| format!("{} (worst {:.3e})", c.name, c.max_residual))
        .collect::<Vec<_>>()
        .join("; ");
    lines.push(CriterionLine {
        name: "accounting".into(),
        pass: acc.pass(),
        detail: format!("{} of {} replicas failed; {worst}", acc.failures, summary.replicas),
    });

    let unstable = report.matrix.doubly_stochastic && !report.stable;
    let conv = if summary.checkpoints.len() >= 3 {
        Some(convergence_diagnostic(&summary, &target.y_limit, NON_CONVERGENCE_EPS)?)
    } else {
        None
    };
    let final_stats = summary.final_stats();
    if unstable {
        let frac = conv.as_ref().map_or(f64::NAN, |c| c.fraction_within);
        lines.push(CriterionLine {
            name: "non-convergence".into(),
            pass: frac < NON_CONVERGENCE_FRACTION,
            detail: format!(
                "fraction within {NON_CONVERGENCE_EPS} of the unstable limit at n={} is {frac:.4} (threshold {NON_CONVERGENCE_FRACTION}, engineering choice)",
                final_stats.n
            ),
        });
    } else {
        let tol = match &target.sigma {
            Some(s) if final_stats.scale > 0.0 && report.regime.is_gaussian() => {
                3.0 * s.trace().max(0.0).sqrt() / final_stats.scale
            }
            _ => CONVERGENCE_TOL,
        };
        let tol = tol.max(f64::EPSILON);
        lines.push(CriterionLine {
            name: "convergence".into(),
            pass: final_stats.mean_distance <= tol,
            detail: format!(
                "mean |Y_n - y_limit| at n={} is {:.3e} (threshold {tol:.3e})",
                final_stats.n, final_stats.mean_distance
            ),
        });
    }

    let mut clt = None;
    if let (Some(sigma), true) = (&target.sigma, report.regime.is_gaussian()) {
        let thresholds = CltThresholds::for_regime(report.regime);
        match clt_diagnostic(&summary, sigma, target.sigma_tilde.as_ref(), thresholds) {
            Ok(d) => {
                lines.push(CriterionLine {
                    name: "covariance".into(),
                    pass: d.covariance_pass,
                    detail: format!(
                        "tangent relative error {:.4} (threshold {})",
                        d.covariance_rel_error, thresholds.covariance
                    ),
                });
                if let Some(t) = thresholds.ks {
                    let max = d.ks.iter().copied().fold(0.0, f64::max);
                    lines.push(CriterionLine {
                        name: "KS".into(),
                        pass: d.ks_pass,
                        detail: format!("max per-coordinate KS distance {max:.4} (threshold {t})"),
                    });
                }
                clt = Some(d);
            }
            Err(UrnError::Singular(msg)) => {
                // degenerate prediction: nothing Gaussian to compare
                lines.push(CriterionLine {
                    name: "covariance".into(),
                    pass: true,
                    detail: format!("skipped, {msg}"),
                });
            }
            Err(e) => return Err(e),
        }
    }
    let mut notes = Vec::new();
    if report.regime.is_gaussian() && !report.a2_verified {
        notes.push("A2 unverified: convergence to the limit is not guaranteed analytically".to_string());
    }

    let mut written = Vec::new();
    if emit.json() {
        #[derive(Serialize)]
        struct Body<'a> {
            report: &'a AsymptoticReport,
            summary: &'a crate::montecarlo::EnsembleSummary,
            convergence: &'a Option<crate::montecarlo::ConvergenceDiagnostic>,
            clt: &'a Option<crate::montecarlo::CltDiagnostic>,
            criteria: &'a [CriterionLine],
            notes: &'a [String],
        }
        let body = Body {
            report: &report,
            summary: &summary,
            convergence: &conv,
            clt: &clt,
            criteria: &lines,
            notes: &notes,
        };
        let text = to_json(&header, body)?;
        if let Some(dir) = out {
            emit_text(Some(dir), "summary.json", &text, &mut written)?;
        }
    }
    if emit.csv() {
        if let Some(dir) = out {
            let mut buf = Vec::new();
            summary.write_csv(&mut buf, &header.lines())?;
            emit_text(Some(dir), "summary.csv", &String::from_utf8(buf).expect("utf-8"), &mut written)?;
        }
    }
    Ok(VerifyOutcome {
        lines,
        notes,
        written,
    })
}

/// Weight family of a region grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum RegionFamily {
    Linear,
    InversePower { alpha: f64 },
    Exponential,
}

impl RegionFamily {
    pub fn parse(name: &str, alpha: Option<f64>) -> Result<Self> {
        match (name, alpha) {
            ("linear", None) => Ok(RegionFamily::Linear),
            ("exponential", None) => Ok(RegionFamily::Exponential),
            ("inverse_power", Some(alpha)) => Ok(RegionFamily::InversePower { alpha }),
            ("inverse_power", None) => Err(UrnError::config("alpha", "inverse_power requires alpha")),
            ("linear" | "exponential", Some(_)) => {
                Err(UrnError::config("alpha", format!("family `{name}` takes no alpha")))
            }
            _ => Err(UrnError::config(
                "family",
                format!("region grids need linear, inverse_power or exponential, got `{name}`"),
            )),
        }
    }

    fn weight(self, theta: f64) -> Result<WeightFunction> {
        match self {
            RegionFamily::Linear => WeightFunction::linear(theta),
            RegionFamily::InversePower { alpha } => WeightFunction::inverse_power(theta, alpha),
            RegionFamily::Exponential => WeightFunction::exponential(theta),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionSpec {
    pub family: RegionFamily,
    pub k: usize,
    pub theta_range: (f64, f64),
    /// Range of `Re(lambda_min)` of `R`, within `[-1, 1]`.
    pub lambda_range: (f64, f64),
    /// Number of nodes along the theta and lambda axes.
    pub resolution: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionCell {
    pub theta: f64,
    pub lambda: f64,
    /// Diagonal entry of the symmetric 2x2 matrix with eigenvalue `lambda`
    /// (`k = 2` only).
    pub p: Option<f64>,
    pub b: f64,
    pub rho: f64,
    pub regime: Regime,
    /// Node of its theta row with `|rho - 1/2|` minimal.
    pub boundary: bool,
}

/// Point of the `rho = 1/2` curve, `lambda = 1/(2b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundaryPoint {
    pub theta: f64,
    pub lambda: f64,
    pub p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionGrid {
    pub spec: RegionSpec,
    pub theta: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Row-major: theta outer, lambda inner.
    pub cells: Vec<RegionCell>,
    /// Boundary polyline, restricted to the lambda range.
    pub boundary: Vec<BoundaryPoint>,
}

fn axis(name: &str, (lo, hi): (f64, f64), n: usize) -> Result<Vec<f64>> {
    if !(lo.is_finite() && hi.is_finite()) || lo > hi || n == 0 || (n == 1 && lo != hi) || (n > 1 && lo == hi) {
        return Err(UrnError::config(
            name,
            format!("empty or inconsistent range {lo}..{hi} with {n} nodes"),
        ));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let step = (hi - lo) / (n - 1) as f64;
    Ok((0..n)
        .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
        .collect())
}

/// Tabulates `rho = max(0, 1 - b lambda)` over a grid of `theta` and
/// `Re(lambda_min)`, with `b` from [`ode::compute_b`].
pub fn region_grid(spec: &RegionSpec) -> Result<RegionGrid> {
    if spec.k < 2 {
        return Err(UrnError::config("k", "k >= 2 required"));
    }
    let thetas = axis("theta", spec.theta_range, spec.resolution.0)?;
    let lambdas = axis("lambda", spec.lambda_range, spec.resolution.1)?;
    if spec.lambda_range.0 < -1.0 || spec.lambda_range.1 > 1.0 {
        return Err(UrnError::config("lambda", "eigenvalues of a stochastic matrix lie in [-1, 1]"));
    }
    let p_of = |l: f64| (spec.k == 2).then(|| (1.0 + l) / 2.0);
    let mut cells = Vec::with_capacity(thetas.len() * lambdas.len());
    let mut boundary = Vec::new();
    for &theta in &thetas {
        let w = spec
            .family
            .weight(theta)
            .map_err(|e| UrnError::config("theta", e.to_string()))?;
        let b = ode::compute_b(&w, spec.k)?;
        let row_start = cells.len();
        for &lambda in &lambdas {
            let rho = rho_from(b, lambda);
            cells.push(RegionCell {
                theta,
                lambda,
                p: p_of(lambda),
                b,
                rho,
                regime: Regime::from_rho(rho, crate::asymptotics::RHO_TOL),
                boundary: false,
            });
        }
        let best = (row_start..cells.len())
            .min_by(|&a, &c| (cells[a].rho - 0.5).abs().total_cmp(&(cells[c].rho - 0.5).abs()))
            .expect("non-empty lambda axis");
        cells[best].boundary = true;
        if b < 0.0 {
            let lambda = 1.0 / (2.0 * b);
            if (spec.lambda_range.0..=spec.lambda_range.1).contains(&lambda) {
                boundary.push(BoundaryPoint {
                    theta,
                    lambda,
                    p: p_of(lambda),
                });
            }
        }
    }
    Ok(RegionGrid {
        spec: spec.clone(),
        theta: thetas,
        lambda: lambdas,
        cells,
        boundary,
    })
}

impl RegionGrid {
    pub fn write_csv<W: Write>(&self, mut out: W, preamble: &[String]) -> Result<()> {
        for line in preamble {
            writeln!(out, "# {line}")?;
        }
        let with_p = self.spec.k == 2;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["theta", "lambda"];
        if with_p {
            header.push("p");
        }
        header.extend(["b", "rho", "regime", "boundary"]);
        w.write_record(&header)?;
        for c in &self.cells {
            let mut rec = vec![c.theta.to_string(), c.lambda.to_string()];
            if let Some(p) = c.p {
                rec.push(p.to_string());
            }
            rec.extend([
                c.b.to_string(),
                c.rho.to_string(),
                c.regime.as_str().to_string(),
                c.boundary.to_string(),
            ]);
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Computes a region grid and writes `regions.json` / `regions.csv`.
pub fn cmd_regions(spec: &RegionSpec, out: Option<&Path>, emit: Emit) -> Result<Vec<PathBuf>> {
    let grid = region_grid(spec)?;
    let header = Header::new(&serde_json::to_string(spec)?, None);
    let mut written = Vec::new();
    if emit.json() {
        emit_text(out, "regions.json", &to_json(&header, &grid)?, &mut written)?;
    }
    if emit.csv() {
        let mut buf = Vec::new();
        grid.write_csv(&mut buf, &header.lines())?;
        emit_text(out, "regions.csv", &String::from_utf8(buf).expect("utf-8"), &mut written)?;
    }
    Ok(written)
}

/// Whether an error stems from user input (exit code 2) rather than a
/// runtime failure.
pub fn is_input_error(e: &UrnError) -> bool {
    matches!(
        e,
        UrnError::Config { .. } | UrnError::InvalidWeight(_) | UrnError::InvalidMatrix(_) | UrnError::Json(_)
    )
}
