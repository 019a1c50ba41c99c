use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nrurn::asymptotics::{classify_regime, sigma1};
use nrurn::dynamics::{run_trajectory, verify_accounting};
use nrurn::matrix::ReplacementMatrix;
use nrurn::model::ExperimentConfig;
use nrurn::ode::{check_contraction, map_f};
use nrurn::weight::WeightFunction;

fn birkhoff(rng: &mut ChaCha8Rng, k: usize) -> ReplacementMatrix {
    let mut m = DMatrix::zeros(k, k);
    let weights: Vec<f64> = (0..k + 1).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    for wt in weights {
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        for (i, &j) in perm.iter().enumerate() {
            m[(i, j)] += wt / total;
        }
    }
    ReplacementMatrix::new(m).unwrap()
}

fn simplex_point(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..k).map(|_| -rng.random_range(1e-9f64..1.0).ln()).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn weight(family: u8, theta: f64, alpha: f64) -> WeightFunction {
    match family {
        0 => WeightFunction::linear(1.0 + theta).unwrap(),
        1 => WeightFunction::inverse_power(theta, alpha).unwrap(),
        _ => WeightFunction::exponential(theta).unwrap(),
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn certified_contraction_bounds_the_map(
        seed in any::<u64>(),
        k in 2usize..7,
        family in 0u8..3,
        theta in 0.5f64..20.0,
        alpha in 0.1f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = birkhoff(&mut rng, k);
        let w = weight(family, theta, alpha);
        let verdict = check_contraction(&w, &r);
        if let (true, Some(factor)) = (verdict.is_contraction(), verdict.factor) {
            prop_assert!(factor < 1.0);
            for _ in 0..100 {
                let y = simplex_point(&mut rng, k);
                let z = simplex_point(&mut rng, k);
                let d = dist(&y, &z);
                if d < 1e-9 {
                    continue;
                }
                let ratio = dist(&map_f(&y, &w, &r).unwrap(), &map_f(&z, &w, &r).unwrap()) / d;
                prop_assert!(ratio <= factor + 1e-9, "ratio {} factor {}", ratio, factor);
            }
        }
    }

    #[test]
    fn sigma1_is_symmetric_psd_with_ones_in_kernel(
        seed in any::<u64>(),
        k in 2usize..7,
        family in 0u8..3,
        theta in 0.1f64..5.0,
        alpha in 0.1f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = birkhoff(&mut rng, k);
        let w = weight(family, theta, alpha);
        let Ok(s) = sigma1(&w, &r) else { return Ok(()) };
        for m in [&s.sigma, &s.sigma_tilde] {
            let scale = m.amax().max(1.0);
            prop_assert!((m - m.transpose()).amax() <= 1e-10 * scale);
            let ones = DVector::from_element(k, 1.0);
            prop_assert!((m * &ones).amax() <= 1e-10 * scale);
            let min_eig = m.clone().symmetric_eigen().eigenvalues.min();
            prop_assert!(min_eig >= -1e-10 * scale, "min eigenvalue {}", min_eig);
        }
    }

    #[test]
    fn linear_rho_is_at_least_half_for_k_three_or_more(
        seed in any::<u64>(),
        k in 3usize..9,
        theta in 0.0f64..5.0,
    ) {
        // |b| <= 1/(k - 1) <= 1/2 and Re(lambda) >= -1
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = birkhoff(&mut rng, k);
        let report = classify_regime(&weight(0, theta, 1.0), &r).unwrap();
        prop_assert!(report.rho >= 0.5 - 1e-9, "rho {}", report.rho);
    }

    #[test]
    fn accounting_holds_for_random_models(
        seed in any::<u64>(),
        k in 2usize..6,
        family in 0u8..3,
        theta in 0.1f64..5.0,
        alpha in 0.1f64..5.0,
        n in 0u64..3000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = birkhoff(&mut rng, k);
        let u0 = simplex_point(&mut rng, k);
        let s: f64 = u0.iter().sum();
        let u0: Vec<f64> = u0.iter().map(|x| x / s).collect();
        let config = match ExperimentConfig::new(weight(family, theta, alpha), r, n).unwrap().with_u0(u0) {
            Ok(c) => c,
            Err(_) => return Ok(()),
        };
        let traj = run_trajectory(&config, seed).unwrap();
        let report = verify_accounting(&traj);
        prop_assert!(report.pass(), "{:?}", report.checks);
        prop_assert!(traj.max_martingale_norm_sq <= (k * (k + 1)) as f64 + 1e-9);
    }
}
