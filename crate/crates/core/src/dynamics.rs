//! Exact simulation of the urn recursion `U_{n+1} = U_n + chi_{n+1} R`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Result, UrnError};
use crate::matrix::ReplacementMatrix;
use crate::model::{ExperimentConfig, UrnState};
use crate::weight::WeightFunction;

/// Floor below which the normalizer `S_w` is treated as degenerate.
pub const S_W_FLOOR: f64 = 1e-300;

/// Period (in steps) at which `U_n` is re-derived as `U_0 + N_n R`.
pub const REDERIVE_PERIOD: u64 = 1 << 20;

/// Relative residual threshold of the accounting identities, scaled by `n`.
pub const ACCOUNTING_TOL: f64 = 1e-9;

/// Selection probabilities `w(Y_j) / S_w(Y)`.
pub fn selection_distribution(y: &[f64], w: &WeightFunction) -> Result<Vec<f64>> {
    let mut p: Vec<f64> = y.iter().map(|&v| w.eval(v)).collect();
    let s = normalizer(&p)?;
    p.iter_mut().for_each(|v| *v /= s);
    Ok(p)
}

#[inline]
fn normalizer(weights: &[f64]) -> Result<f64> {
    let s: f64 = weights.iter().sum();
    if !(s > S_W_FLOOR) || !s.is_finite() {
        return Err(UrnError::DegenerateWeight(s));
    }
    Ok(s)
}

/// Inverse-CDF draw from unnormalized `weights` with total `total`, using a
/// single uniform variate.
#[inline]
pub fn draw_colour<G: Rng + ?Sized>(weights: &[f64], total: f64, rng: &mut G) -> usize {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (j, wj) in weights.iter().enumerate() {
        acc += wj;
        if target < acc {
            return j;
        }
    }
    // rounding in the cumulative sum; fall back to the last positive weight
    weights.iter().rposition(|&v| v > 0.0).unwrap_or(weights.len() - 1)
}

/// Adds row `colour` of `R` to the urn and advances time.
pub fn apply_draw(state: &mut UrnState, colour: usize, r: &ReplacementMatrix) {
    let row = r.entries().row(colour);
    for (u, add) in state.u.iter_mut().zip(row.iter()) {
        *u += add;
    }
    state.counts[colour] += 1;
    state.n += 1;
    state.last_draw = Some(colour);
}

/// One step of the urn: draws `Z_n` from the selection distribution at
/// `Y_n` and returns the updated state.
pub fn step<G: Rng + ?Sized>(
    state: &UrnState,
    w: &WeightFunction,
    r: &ReplacementMatrix,
    rng: &mut G,
) -> Result<UrnState> {
    let mut next = state.clone();
    Stepper::new(w, r).advance(&mut next, rng)?;
    Ok(next)
}

/// Reusable buffers for the hot simulation loop.
struct Stepper<'a> {
    w: &'a WeightFunction,
    r: &'a ReplacementMatrix,
    weights: Vec<f64>,
    mean_increment: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(w: &'a WeightFunction, r: &'a ReplacementMatrix) -> Self {
        let k = r.k();
        Stepper {
            w,
            r,
            weights: vec![0.0; k],
            mean_increment: vec![0.0; k],
        }
    }

    /// Advances `state` by one draw and returns `||M_{n+1} R||^2`.
    #[inline]
    fn advance<G: Rng + ?Sized>(&mut self, state: &mut UrnState, rng: &mut G) -> Result<f64> {
        let total = (state.n + 1) as f64;
        for (wj, u) in self.weights.iter_mut().zip(&state.u) {
            *wj = self.w.eval(u / total);
        }
        let s = normalizer(&self.weights)?;
        let colour = draw_colour(&self.weights, s, rng);

        // M_{n+1} R = row_Z(R) - p R with p the selection distribution
        let r = self.r.entries();
        self.mean_increment.iter_mut().for_each(|v| *v = 0.0);
        for (j, wj) in self.weights.iter().enumerate() {
            let pj = wj / s;
            for (i, m) in self.mean_increment.iter_mut().enumerate() {
                *m += pj * r[(j, i)];
            }
        }
        let norm_sq = self
            .mean_increment
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let d = r[(colour, i)] - m;
                d * d
            })
            .sum();

        apply_draw(state, colour, self.r);
        Ok(norm_sq)
    }
}

/// Recorded composition at a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Checkpoint {
    pub n: u64,
    pub u: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Checkpoint {
    fn of(state: &UrnState) -> Self {
        Checkpoint {
            n: state.n,
            u: state.u.clone(),
            counts: state.counts.clone(),
        }
    }

    /// `Y_n`.
    pub fn y(&self) -> Vec<f64> {
        let total = (self.n + 1) as f64;
        self.u.iter().map(|u| u / total).collect()
    }

    /// `Y~_n`, undefined at `n = 0`.
    pub fn y_tilde(&self) -> Option<Vec<f64>> {
        (self.n > 0).then(|| self.counts.iter().map(|&c| c as f64 / self.n as f64).collect())
    }
}

/// A simulated path of the urn, recorded at checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub u0: Vec<f64>,
    pub r: ReplacementMatrix,
    pub checkpoints: Vec<Checkpoint>,
    pub final_state: UrnState,
    /// `max_m ||M_m R||^2` over all steps (0 when no step was taken).
    pub max_martingale_norm_sq: f64,
}

/// Mixes a base seed and a replica index into an independent stream seed
/// (SplitMix64 finalizer).
pub fn replica_seed(base_seed: u64, replica: u64) -> u64 {
    let mut z = base_seed
        .wrapping_add(replica.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs one trajectory to `config.n_max`; fully determined by `seed`.
pub fn run_trajectory(config: &ExperimentConfig, seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizons = config.checkpoint_horizons();
    let mut state = UrnState::initial(&config.u0);
    let mut stepper = Stepper::new(&config.weight, &config.r);
    let mut checkpoints = Vec::with_capacity(horizons.len());
    let mut max_norm_sq: f64 = 0.0;
    let mut next = horizons.iter().peekable();

    loop {
        if next.peek() == Some(&&state.n) {
            checkpoints.push(Checkpoint::of(&state));
            next.next();
        }
        if state.n >= config.n_max {
            break;
        }
        let norm_sq = stepper.advance(&mut state, &mut rng)?;
        max_norm_sq = max_norm_sq.max(norm_sq);
        if state.n % REDERIVE_PERIOD == 0 {
            rederive(&mut state, &config.u0, &config.r);
        }
    }

    Ok(Trajectory {
        seed,
        u0: config.u0.clone(),
        r: config.r.clone(),
        checkpoints,
        final_state: state,
        max_martingale_norm_sq: max_norm_sq,
    })
}

/// Resets `U_n` to `U_0 + N_n R`, cancelling accumulated rounding.
fn rederive(state: &mut UrnState, u0: &[f64], r: &ReplacementMatrix) {
    let counts: Vec<f64> = state.counts.iter().map(|&c| c as f64).collect();
    let nr = r.left_mul(&counts);
    for ((u, a), b) in state.u.iter_mut().zip(u0).zip(nr) {
        *u = a + b;
    }
}

/// Outcome of one accounting identity over a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub name: &'static str,
    pub pass: bool,
    pub max_residual: f64,
    /// Horizon and colour of the largest residual.
    pub worst_n: u64,
    pub worst_colour: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccountingReport {
    pub checks: Vec<IdentityCheck>,
}

impl AccountingReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&IdentityCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Checks the mass, count and linear identities at every checkpoint and the
/// martingale increment bound `k(1+k)`.
pub fn verify_accounting(traj: &Trajectory) -> AccountingReport {
    let k = traj.r.k();
    let mut mass = Worst::new("mass: sum U_n = n + 1");
    let mut count = Worst::new("count: sum N_n = n");
    let mut linear = Worst::new("linear: U_n = U_0 + N_n R");

    let last = Checkpoint::of(&traj.final_state);
    for cp in traj.checkpoints.iter().chain(std::iter::once(&last)) {
        let tol = ACCOUNTING_TOL * (cp.n.max(1) as f64);
        let sum_u: f64 = cp.u.iter().sum();
        mass.record((sum_u - (cp.n + 1) as f64).abs(), tol, cp.n, None);
        let sum_n: u64 = cp.counts.iter().sum();
        count.record(sum_n.abs_diff(cp.n) as f64, 0.0, cp.n, None);
        let counts: Vec<f64> = cp.counts.iter().map(|&c| c as f64).collect();
        let nr = traj.r.left_mul(&counts);
        for j in 0..k {
            let res = (cp.u[j] - traj.u0[j] - nr[j]).abs();
            linear.record(res, tol, cp.n, Some(j));
        }
    }

    let bound = (k * (1 + k)) as f64;
    let martingale = IdentityCheck {
        name: "martingale: ||M_m R||^2 <= k(1+k)",
        pass: traj.max_martingale_norm_sq <= bound,
        max_residual: traj.max_martingale_norm_sq,
        worst_n: traj.final_state.n,
        worst_colour: None,
    };

    AccountingReport {
        checks: vec![mass.finish(), count.finish(), linear.finish(), martingale],
    }
}

struct Worst {
    check: IdentityCheck,
}

impl Worst {
    fn new(name: &'static str) -> Self {
        Worst {
            check: IdentityCheck {
                name,
                pass: true,
                max_residual: 0.0,
                worst_n: 0,
                worst_colour: None,
            },
        }
    }

    fn record(&mut self, residual: f64, tol: f64, n: u64, colour: Option<usize>) {
        if !(residual <= tol) {
            self.check.pass = false;
        }
        if !(residual <= self.check.max_residual) {
            self.check.max_residual = residual;
            self.check.worst_n = n;
            self.check.worst_colour = colour;
        }
    }

    fn finish(self) -> IdentityCheck {
        self.check
    }
}

impl Trajectory {
    pub fn k(&self) -> usize {
        self.u0.len()
    }

    /// Writes checkpoints as CSV with columns `n, Y_1..Y_k, Ytilde_1..Ytilde_k`.
    /// `preamble` lines are emitted first as `#` comments; undefined `Y~_0`
    /// values are left empty.
    pub fn write_csv<W: Write>(&self, mut out: W, preamble: &[String]) -> Result<()> {
        for line in preamble {
            writeln!(out, "# {line}")?;
        }
        let k = self.k();
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["n".to_string()];
        header.extend((1..=k).map(|j| format!("Y_{j}")));
        header.extend((1..=k).map(|j| format!("Ytilde_{j}")));
        wtr.write_record(&header)?;
        for cp in &self.checkpoints {
            let mut rec = vec![cp.n.to_string()];
            rec.extend(cp.y().iter().map(|v| v.to_string()));
            match cp.y_tilde() {
                Some(yt) => rec.extend(yt.iter().map(|v| v.to_string())),
                None => rec.extend(std::iter::repeat_n(String::new(), k)),
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}
