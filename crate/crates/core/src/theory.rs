//! Feasible bandwidth exponents and minimum kernel orders.
//!
//! With `h = N^{-δ_h}` and first-stage errors of order `N^{-δ_p}` and
//! `N^{-δ_m}`, the GATE and ATE asymptotics hold only for `δ_h` inside an open
//! interval that depends on the moderator dimension `λ_Z` and the kernel order
//! `r`. Write `S = δ_p + δ_m` and `δ_min = min(δ_p, δ_m)`.
//!
//! GATE: `1/(λ_Z + 2r) < δ_h < (2S − 1)/λ_Z`.
//! ATE: `max(1/(4r), 1/(λ_Z + 2r)) < δ_h < (S − 1/2)/λ_Z`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inequalities are evaluated with this margin, so a boundary value counts
/// as a violation of a strict inequality.
const STRICT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSpec {
    pub lambda_z: u32,
    pub r: u32,
    pub delta_p: f64,
    pub delta_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Gate,
    Ate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateRange {
    pub regime: Regime,
    pub lower: f64,
    pub upper: f64,
    pub feasible: bool,
    /// Kernel order must exceed this; infinite when `2S ≤ 1`.
    pub min_kernel_order: f64,
}

impl RateSpec {
    pub fn new(lambda_z: u32, r: u32, delta_p: f64, delta_m: f64) -> Result<Self> {
        let s = RateSpec { lambda_z, r, delta_p, delta_m };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_z == 0 {
            return Err(Error::Validation("lambda_z must be at least 1".into()));
        }
        if self.r == 0 || self.r % 2 == 1 {
            return Err(Error::Validation(format!("kernel order must be a positive even integer, got {}", self.r)));
        }
        for (name, v) in [("delta_p", self.delta_p), ("delta_m", self.delta_m)] {
            if !(v > 0.0 && v <= 0.5) {
                return Err(Error::Validation(format!("{name} must lie in (0, 0.5], got {v}")));
            }
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.delta_p + self.delta_m
    }

    pub fn delta_min(&self) -> f64 {
        self.delta_p.min(self.delta_m)
    }
}

fn min_order(lambda: f64, numerator: f64, s: f64) -> f64 {
    let den = 2.0 * s - 1.0;
    if den > 0.0 {
        lambda * numerator / den
    } else {
        f64::INFINITY
    }
}

pub fn gate_range(spec: &RateSpec) -> RateRange {
    let (l, r, s) = (f64::from(spec.lambda_z), f64::from(spec.r), spec.sum());
    let lower = 1.0 / (l + 2.0 * r);
    let upper = (2.0 * s - 1.0) / l;
    RateRange { regime: Regime::Gate, lower, upper, feasible: lower < upper, min_kernel_order: min_order(l, 1.0 - s, s) }
}

pub fn ate_range(spec: &RateSpec) -> RateRange {
    let (l, r, s) = (f64::from(spec.lambda_z), f64::from(spec.r), spec.sum());
    let lower = (1.0 / (4.0 * r)).max(1.0 / (l + 2.0 * r));
    let upper = (s - 0.5) / l;
    RateRange { regime: Regime::Ate, lower, upper, feasible: lower < upper, min_kernel_order: min_order(l, 1.5 - s, s) }
}

pub fn range(spec: &RateSpec, regime: Regime) -> RateRange {
    match regime {
        Regime::Gate => gate_range(spec),
        Regime::Ate => ate_range(spec),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckItem {
    pub item: &'static str,
    pub condition: &'static str,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub regime: Regime,
    pub delta_h: f64,
    pub items: Vec<CheckItem>,
    pub all_pass: bool,
}

fn neg(v: f64) -> bool {
    v < -STRICT
}

fn pos(v: f64) -> bool {
    v > STRICT
}

/// Evaluates each rate condition of the regime at bandwidth exponent `delta_h`.
pub fn check_config(spec: &RateSpec, delta_h: f64, regime: Regime) -> Diagnostic {
    let (l, r, s, dmin, d) = (f64::from(spec.lambda_z), f64::from(spec.r), spec.sum(), spec.delta_min(), delta_h);
    let items = match regime {
        Regime::Gate => vec![
            CheckItem { item: "i", condition: "δh > 0 and 1 − λZ·δh > 0", pass: pos(d) && pos(1.0 - l * d) },
            CheckItem { item: "ii", condition: "1/2 − λZ·δh/2 − r·δh < 0", pass: neg(0.5 - 0.5 * l * d - r * d) },
            CheckItem { item: "iii", condition: "λZ·δh/2 − δmin < 0", pass: neg(0.5 * l * d - dmin) },
            CheckItem { item: "iv", condition: "1/2 + λZ·δh/2 − (δp + δm) < 0", pass: neg(0.5 + 0.5 * l * d - s) },
        ],
        Regime::Ate => vec![
            CheckItem { item: "i", condition: "δh > 0 and λZ·δh < 1", pass: pos(d) && neg(l * d - 1.0) },
            CheckItem { item: "ii", condition: "1/2 − λZ·δh/2 − r·δh < 0", pass: neg(0.5 - 0.5 * l * d - r * d) },
            CheckItem {
                item: "iii",
                condition: "1 − 4r·δh < 0 and 1 − 2λZ·δh > 0",
                pass: neg(1.0 - 4.0 * r * d) && pos(1.0 - 2.0 * l * d),
            },
            CheckItem { item: "iv", condition: "λZ·δh − δmin < 0", pass: neg(l * d - dmin) },
            CheckItem { item: "v", condition: "1/2 + λZ·δh − (δp + δm) < 0", pass: neg(0.5 + l * d - s) },
        ],
    };
    let all_pass = items.iter().all(|i| i.pass);
    Diagnostic { regime, delta_h, items, all_pass }
}

/// Bandwidth exponent implied by `h = N^{-δ_h}`.
pub fn implied_exponent(h: f64, n: usize) -> f64 {
    -h.ln() / (n as f64).ln()
}

/// `s² log²(max(λ_X, N)) / (N h^{λ_Z})`, which should be small for a lasso
/// first stage with `s` active coefficients. Informational only.
pub fn lasso_condition(s: usize, lambda_x: usize, n: usize, h: f64, lambda_z: u32) -> f64 {
    let m = (lambda_x.max(n) as f64).ln();
    (s as f64).powi(2) * m * m / (n as f64 * h.powi(lambda_z as i32))
}
