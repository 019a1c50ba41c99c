//! Non-increasing weight functions driving colour selection.
//!
//! A weight function is defined on `[0, 1]` and extended constantly outside
//! it: `w(x) = w(0)` for `x <= 0` and `w(x) = w(1)` for `x >= 1`, with a zero
//! derivative there.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UrnError};

/// Number of points of the validation grid on `[0, 1]`.
pub const VALIDATION_GRID: usize = 1024;

/// Step of the central finite-difference fallback for custom derivatives.
pub const FD_STEP: f64 = 1e-6;

/// Parameters of a built-in weight family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightSpec {
    /// `w(y) = theta - y`, `theta >= 1`.
    Linear { theta: f64 },
    /// `w(x) = (theta + x)^(-alpha)`, `theta, alpha > 0`.
    InversePower { theta: f64, alpha: f64 },
    /// `w(x) = exp(-x / theta)`, `theta > 0`.
    Exponential { theta: f64 },
    /// `w(x) = c`, `c > 0`.
    Constant { c: f64 },
}

impl WeightSpec {
    pub fn family_name(&self) -> &'static str {
        match self {
            WeightSpec::Linear { .. } => "linear",
            WeightSpec::InversePower { .. } => "inverse_power",
            WeightSpec::Exponential { .. } => "exponential",
            WeightSpec::Constant { .. } => "constant",
        }
    }
}

type ScalarFn = dyn Fn(f64) -> f64 + Send + Sync;

/// A user-supplied weight function.
///
/// An analytic first derivative should be supplied; without one a central
/// finite difference with step [`FD_STEP`] is used and reports flag the
/// derivative as approximate.
pub struct CustomWeight {
    eval: Box<ScalarFn>,
    deriv1: Option<Box<ScalarFn>>,
    deriv2: Option<Box<ScalarFn>>,
    lipschitz: Option<f64>,
    convex: bool,
}

impl CustomWeight {
    pub fn new(eval: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        CustomWeight {
            eval: Box::new(eval),
            deriv1: None,
            deriv2: None,
            lipschitz: None,
            convex: false,
        }
    }

    pub fn with_derivative(mut self, d: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.deriv1 = Some(Box::new(d));
        self
    }

    pub fn with_second_derivative(
        mut self,
        d: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.deriv2 = Some(Box::new(d));
        self
    }

    pub fn with_lipschitz(mut self, m: f64) -> Self {
        self.lipschitz = Some(m);
        self
    }

    pub fn convex(mut self, convex: bool) -> Self {
        self.convex = convex;
        self
    }
}

#[derive(Clone)]
enum Family {
    Builtin(WeightSpec),
    Custom(Arc<CustomWeight>),
}

/// A validated non-increasing weight function with derivatives.
#[derive(Clone)]
pub struct WeightFunction {
    family: Family,
    lipschitz: f64,
    convex: bool,
}

impl fmt::Debug for WeightFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.family {
            Family::Builtin(spec) => write!(f, "WeightFunction({spec:?})"),
            Family::Custom(_) => write!(f, "WeightFunction(custom, M={})", self.lipschitz),
        }
    }
}

impl PartialEq for WeightFunction {
    fn eq(&self, other: &Self) -> bool {
        match (&self.family, &other.family) {
            (Family::Builtin(a), Family::Builtin(b)) => a == b,
            (Family::Custom(a), Family::Custom(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

/// Builds a weight function from a built-in family specification.
pub fn make_weight_function(spec: &WeightSpec) -> Result<WeightFunction> {
    WeightFunction::from_spec(*spec)
}

impl WeightFunction {
    pub fn from_spec(spec: WeightSpec) -> Result<Self> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(UrnError::InvalidWeight(format!("{name} must be finite")))
            }
        };
        let (lipschitz, convex) = match spec {
            WeightSpec::Linear { theta } => {
                finite("theta", theta)?;
                if theta < 1.0 {
                    return Err(UrnError::InvalidWeight(format!(
                        "θ ≥ 1 required for the linear family (got {theta})"
                    )));
                }
                (1.0, true)
            }
            WeightSpec::InversePower { theta, alpha } => {
                finite("theta", theta)?;
                finite("alpha", alpha)?;
                if theta <= 0.0 || alpha <= 0.0 {
                    return Err(UrnError::InvalidWeight(format!(
                        "θ > 0 and α > 0 required for the inverse power family (got θ={theta}, α={alpha})"
                    )));
                }
                (alpha * theta.powf(-alpha - 1.0), true)
            }
            WeightSpec::Exponential { theta } => {
                finite("theta", theta)?;
                if theta <= 0.0 {
                    return Err(UrnError::InvalidWeight(format!(
                        "θ > 0 required for the exponential family (got {theta})"
                    )));
                }
                (1.0 / theta, true)
            }
            WeightSpec::Constant { c } => {
                finite("c", c)?;
                if c <= 0.0 {
                    return Err(UrnError::InvalidWeight(format!(
                        "c > 0 required for the constant family (got {c})"
                    )));
                }
                (0.0, true)
            }
        };
        Ok(WeightFunction {
            family: Family::Builtin(spec),
            lipschitz,
            convex,
        })
    }

    pub fn linear(theta: f64) -> Result<Self> {
        Self::from_spec(WeightSpec::Linear { theta })
    }

    pub fn inverse_power(theta: f64, alpha: f64) -> Result<Self> {
        Self::from_spec(WeightSpec::InversePower { theta, alpha })
    }

    pub fn exponential(theta: f64) -> Result<Self> {
        Self::from_spec(WeightSpec::Exponential { theta })
    }

    pub fn constant(c: f64) -> Result<Self> {
        Self::from_spec(WeightSpec::Constant { c })
    }

    /// Validates a custom weight on a 1024-point grid of `[0, 1]`: it must be
    /// finite, non-increasing, and strictly positive on `[0, 1)`.
    pub fn custom(custom: CustomWeight) -> Result<Self> {
        let grid: Vec<f64> = (0..VALIDATION_GRID)
            .map(|i| i as f64 / (VALIDATION_GRID - 1) as f64)
            .collect();
        let values: Vec<f64> = grid.iter().map(|&x| (custom.eval)(x)).collect();
        for (x, v) in grid.iter().zip(&values) {
            if !v.is_finite() {
                return Err(UrnError::InvalidWeight(format!("w({x}) is not finite")));
            }
            if *v < 0.0 || (*v <= 0.0 && *x < 1.0) {
                return Err(UrnError::InvalidWeight(format!(
                    "w must be positive on [0,1): w({x}) = {v}"
                )));
            }
        }
        for i in 1..grid.len() {
            let (a, b) = (values[i - 1], values[i]);
            if b > a + 1e-12 * a.abs().max(1.0) {
                return Err(UrnError::InvalidWeight(format!(
                    "w is increasing on [{}, {}]: {a} < {b}",
                    grid[i - 1],
                    grid[i]
                )));
            }
        }
        let lipschitz = match custom.lipschitz {
            Some(m) if m >= 0.0 && m.is_finite() => m,
            Some(m) => {
                return Err(UrnError::InvalidWeight(format!(
                    "Lipschitz bound must be a nonnegative real (got {m})"
                )))
            }
            None => {
                // Largest slope over the grid, from the derivative when
                // available and from grid differences otherwise.
                let slope_fd = values
                    .windows(2)
                    .map(|p| (p[0] - p[1]).abs() * (VALIDATION_GRID - 1) as f64)
                    .fold(0.0, f64::max);
                match &custom.deriv1 {
                    Some(d) => grid.iter().map(|&x| d(x).abs()).fold(slope_fd, f64::max),
                    None => slope_fd,
                }
            }
        };
        let convex = custom.convex;
        Ok(WeightFunction {
            family: Family::Custom(Arc::new(custom)),
            lipschitz,
            convex,
        })
    }

    /// The built-in specification, `None` for custom weights.
    pub fn spec(&self) -> Option<WeightSpec> {
        match &self.family {
            Family::Builtin(s) => Some(*s),
            Family::Custom(_) => None,
        }
    }

    pub fn family_name(&self) -> &'static str {
        match &self.family {
            Family::Builtin(s) => s.family_name(),
            Family::Custom(_) => "custom",
        }
    }

    /// Lipschitz bound `M` of `w` on `[0, 1]`.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn is_convex(&self) -> bool {
        self.convex
    }

    /// True when the first derivative comes from finite differences.
    pub fn derivative_is_approximate(&self) -> bool {
        matches!(&self.family, Family::Custom(c) if c.deriv1.is_none())
    }

    /// `w(x)` with the constant extension outside `[0, 1]`.
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        match &self.family {
            Family::Builtin(spec) => match *spec {
                WeightSpec::Linear { theta } => theta - x,
                WeightSpec::InversePower { theta, alpha } => (theta + x).powf(-alpha),
                WeightSpec::Exponential { theta } => (-x / theta).exp(),
                WeightSpec::Constant { c } => c,
            },
            Family::Custom(c) => (c.eval)(x),
        }
    }

    /// `w'(x)`; zero outside `[0, 1]`. At the endpoints the one-sided
    /// interior derivative is returned.
    pub fn deriv1(&self, x: f64) -> f64 {
        if !(0.0..=1.0).contains(&x) {
            return 0.0;
        }
        match &self.family {
            Family::Builtin(spec) => match *spec {
                WeightSpec::Linear { .. } => -1.0,
                WeightSpec::InversePower { theta, alpha } => -alpha * (theta + x).powf(-alpha - 1.0),
                WeightSpec::Exponential { theta } => -(-x / theta).exp() / theta,
                WeightSpec::Constant { .. } => 0.0,
            },
            Family::Custom(c) => match &c.deriv1 {
                Some(d) => d(x),
                None => {
                    let lo = (x - FD_STEP).max(0.0);
                    let hi = (x + FD_STEP).min(1.0);
                    ((c.eval)(hi) - (c.eval)(lo)) / (hi - lo)
                }
            },
        }
    }

    /// `w''(x)` when known; zero outside `[0, 1]`.
    pub fn deriv2(&self, x: f64) -> Option<f64> {
        if !(0.0..=1.0).contains(&x) {
            return Some(0.0);
        }
        match &self.family {
            Family::Builtin(spec) => Some(match *spec {
                WeightSpec::Linear { .. } | WeightSpec::Constant { .. } => 0.0,
                WeightSpec::InversePower { theta, alpha } => {
                    alpha * (alpha + 1.0) * (theta + x).powf(-alpha - 2.0)
                }
                WeightSpec::Exponential { theta } => (-x / theta).exp() / (theta * theta),
            }),
            Family::Custom(c) => c.deriv2.as_ref().map(|d| d(x)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> impl Iterator<Item = f64> {
        (0..VALIDATION_GRID).map(|i| i as f64 / (VALIDATION_GRID - 1) as f64)
    }

    #[test]
    fn linear_evaluation() {
        let w = WeightFunction::linear(1.0).unwrap();
        assert_eq!(w.eval(0.25), 0.75);
        assert_eq!(w.deriv1(0.25), -1.0);
        assert_eq!(w.lipschitz(), 1.0);
        assert_eq!(w.eval(-0.5), 1.0);
        assert_eq!(w.eval(1.0), 0.0);
    }

    #[test]
    fn inverse_power_endpoints() {
        let w = WeightFunction::inverse_power(1.0, 1.0).unwrap();
        assert_eq!(w.eval(0.0), 1.0);
        assert_eq!(w.eval(1.0), 0.5);
        assert_eq!(w.lipschitz(), 1.0);
        let w = WeightFunction::inverse_power(0.5, 2.0).unwrap();
        assert!((w.lipschitz() - 2.0 * 0.5f64.powi(-3)).abs() < 1e-12);
    }

    #[test]
    fn lipschitz_per_family() {
        assert_eq!(WeightFunction::exponential(4.0).unwrap().lipschitz(), 0.25);
        assert_eq!(WeightFunction::constant(2.0).unwrap().lipschitz(), 0.0);
    }

    #[test]
    fn rejects_out_of_range_parameters() {
        assert!(WeightFunction::linear(0.5).is_err());
        assert!(WeightFunction::inverse_power(0.0, 1.0).is_err());
        assert!(WeightFunction::inverse_power(1.0, -1.0).is_err());
        assert!(WeightFunction::exponential(0.0).is_err());
        assert!(WeightFunction::constant(0.0).is_err());
        assert!(WeightFunction::linear(f64::NAN).is_err());
        let err = WeightFunction::linear(0.5).unwrap_err().to_string();
        assert!(err.contains("θ ≥ 1 required"), "{err}");
    }

    #[test]
    fn derivatives_vanish_outside_unit_interval() {
        for w in [
            WeightFunction::linear(2.0).unwrap(),
            WeightFunction::inverse_power(1.0, 3.0).unwrap(),
            WeightFunction::exponential(0.5).unwrap(),
        ] {
            assert_eq!(w.deriv1(-0.1), 0.0);
            assert_eq!(w.deriv1(1.1), 0.0);
            assert_eq!(w.deriv2(1.5), Some(0.0));
        }
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let h = 1e-6;
        for w in [
            WeightFunction::linear(1.5).unwrap(),
            WeightFunction::inverse_power(0.3, 2.5).unwrap(),
            WeightFunction::exponential(0.7).unwrap(),
        ] {
            for x in [0.1, 0.33, 0.5, 0.9] {
                let fd = (w.eval(x + h) - w.eval(x - h)) / (2.0 * h);
                assert!((fd - w.deriv1(x)).abs() < 1e-6, "{w:?} at {x}");
                let fd2 = (w.deriv1(x + h) - w.deriv1(x - h)) / (2.0 * h);
                assert!((fd2 - w.deriv2(x).unwrap()).abs() < 1e-5, "{w:?} at {x}");
            }
        }
    }

    #[test]
    fn custom_weight_validation() {
        let ok = WeightFunction::custom(
            CustomWeight::new(|x| 2.0 - x * x).with_derivative(|x| -2.0 * x),
        )
        .unwrap();
        assert!(!ok.derivative_is_approximate());
        assert!((ok.lipschitz() - 2.0).abs() < 1e-9);

        let increasing = WeightFunction::custom(CustomWeight::new(|x| 1.0 + x));
        assert!(matches!(increasing, Err(UrnError::InvalidWeight(m)) if m.contains("increasing")));

        let vanishing = WeightFunction::custom(CustomWeight::new(|x| 0.5 - x));
        assert!(vanishing.is_err());

        // zero at 1 only is allowed, like the linear family with θ = 1
        assert!(WeightFunction::custom(CustomWeight::new(|x| 1.0 - x)).is_ok());
    }

    #[test]
    fn custom_finite_difference_fallback_is_flagged() {
        let w = WeightFunction::custom(CustomWeight::new(|x| (-2.0 * x).exp())).unwrap();
        assert!(w.derivative_is_approximate());
        assert!((w.deriv1(0.5) + 2.0 * (-1.0f64).exp()).abs() < 1e-6);
        assert_eq!(w.deriv2(0.5), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn builtin_families_are_non_increasing(
            theta in 1.0f64..20.0,
            alpha in 0.01f64..10.0,
            which in 0usize..3,
        ) {
            let w = match which {
                0 => WeightFunction::linear(theta).unwrap(),
                1 => WeightFunction::inverse_power(theta - 0.99, alpha).unwrap(),
                _ => WeightFunction::exponential(theta - 0.99).unwrap(),
            };
            let mut prev = f64::INFINITY;
            for x in grid() {
                let v = w.eval(x);
                prop_assert!(v <= prev);
                prev = v;
            }
        }

        #[test]
        fn extension_is_exact(x in -10.0f64..0.0, y in 1.0f64..10.0, theta in 1.0f64..5.0) {
            for w in [
                WeightFunction::linear(theta).unwrap(),
                WeightFunction::inverse_power(theta, 1.5).unwrap(),
                WeightFunction::exponential(theta).unwrap(),
            ] {
                prop_assert_eq!(w.eval(x), w.eval(0.0));
                prop_assert_eq!(w.eval(y), w.eval(1.0));
            }
        }
    }
}
