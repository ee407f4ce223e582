//! Closed-form generalization errors, transferabilities, and the phase
//! boundaries between positive and negative transfer for the deep linear
//! model in the proportional limit `n, d → ∞`, `n/d = γ`.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Real value that may sit on the `γ = 1` double-descent pole.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Extended {
    Finite(f64),
    /// The quantity diverges; the sign records the side of the divergence.
    Infinite { positive: bool },
}

impl Extended {
    pub fn finite(self) -> Option<f64> {
        match self {
            Extended::Finite(v) => Some(v),
            Extended::Infinite { .. } => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Extended::Infinite { .. })
    }

    /// Lossy conversion for plotting and CSV output.
    pub fn to_f64(self) -> f64 {
        match self {
            Extended::Finite(v) => v,
            Extended::Infinite { positive: true } => f64::INFINITY,
            Extended::Infinite { positive: false } => f64::NEG_INFINITY,
        }
    }

    fn map(self, f: impl FnOnce(f64) -> f64) -> Extended {
        match self {
            Extended::Finite(v) => Extended::Finite(f(v)),
            inf => inf,
        }
    }
}

impl fmt::Display for Extended {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extended::Finite(v) => write!(f, "{v}"),
            Extended::Infinite { positive: true } => f.write_str("inf"),
            Extended::Infinite { positive: false } => f.write_str("-inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Linear,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
    Zero,
    Singular,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
            Label::Zero => "zero",
            Label::Singular => "singular",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionLabel {
    pub method: Method,
    pub label: Label,
}

/// Half-width of the band treated as exactly zero transferability.
pub const ZERO_BAND: f64 = 1e-12;

/// Expected test error of the minimum-norm (scratch) predictor:
/// `((1−γ)² + γσ²)/(1−γ)` below the interpolation threshold, `σ²/(γ−1)` above.
pub fn scratch_ge(gamma: f64, sigma: f64) -> Extended {
    assert!(gamma > 0.0, "gamma must be positive");
    let s2 = sigma * sigma;
    if gamma < 1.0 {
        Extended::Finite(((1.0 - gamma).powi(2) + gamma * s2) / (1.0 - gamma))
    } else if gamma > 1.0 {
        Extended::Finite(s2 / (gamma - 1.0))
    } else {
        Extended::Infinite { positive: true }
    }
}

/// Expected test error of linear transfer at finite `n`: `sin²θ + (σ² + sin²θ)/(n − 2)`.
pub fn linear_transfer_ge(theta: f64, sigma: f64, n: f64) -> f64 {
    assert!(n > 2.0, "linear transfer error needs n > 2");
    let s2 = theta.sin().powi(2);
    s2 + (sigma * sigma + s2) / (n - 2.0)
}

/// Linear-transfer transferability in the `n → ∞` limit: `scratch_ge − sin²θ`.
pub fn linear_transferability(gamma: f64, theta: f64, sigma: f64) -> Extended {
    let s2 = theta.sin().powi(2);
    scratch_ge(gamma, sigma).map(|v| v - s2)
}

/// Asymptotic ridge linear-transfer error `1 − (1+2λ)cos²θ/(1+λ)²`.
pub fn ridge_transfer_ge(theta: f64, lambda: f64) -> f64 {
    assert!(lambda >= 0.0, "ridge parameter must be >= 0");
    1.0 - (1.0 + 2.0 * lambda) * theta.cos().powi(2) / (1.0 + lambda).powi(2)
}

pub fn ridge_transferability(gamma: f64, theta: f64, sigma: f64, lambda: f64) -> Extended {
    scratch_ge(gamma, sigma).map(|v| v - ridge_transfer_ge(theta, lambda))
}

/// Expected fine-tuning error: scratch error plus `(1−γ)(1−2cosθ)` for `γ ≤ 1`.
pub fn finetune_ge(gamma: f64, theta: f64, sigma: f64) -> Extended {
    let base = scratch_ge(gamma, sigma);
    if gamma <= 1.0 {
        base.map(|v| v + (1.0 - gamma) * (1.0 - 2.0 * theta.cos()))
    } else {
        base
    }
}

/// `(γ−1)(1−2cosθ)` for `γ ≤ 1`, zero above. Finite even at `γ = 1`.
pub fn finetune_transferability(gamma: f64, theta: f64) -> f64 {
    if gamma <= 1.0 {
        (gamma - 1.0) * (1.0 - 2.0 * theta.cos())
    } else {
        0.0
    }
}

/// Open interval of `γ` values (the upper end may be infinite).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        x > self.lo && x < self.hi
    }
}

/// Roots of `γ² − (1 + cos²θ − σ²)γ + cos²θ = 0`, the zeros of the
/// overparameterized branch of [`linear_transferability`], sorted ascending.
/// `None` when the roots are complex.
pub fn overparameterized_roots(theta: f64, sigma: f64) -> Option<(f64, f64)> {
    let c2 = theta.cos().powi(2);
    let b = 1.0 + c2 - sigma * sigma;
    let disc = b * b - 4.0 * c2;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    // stable form: the product of the roots is cos²θ
    let big = 0.5 * (b + sq.copysign(b));
    if big == 0.0 {
        return Some((0.0, 0.0));
    }
    let small = c2 / big;
    Some((small.min(big), small.max(big)))
}

/// Values of `γ` where linear transfer is strictly negative, for `θ ∈ [0, π/2]`, `σ ≥ 0`.
///
/// Overparameterized side: the open interval between the two roots, clipped
/// to `(0, 1)`, present only for `σ < 1` and `θ > arccos(1 − σ)`.
/// Underparameterized side: `γ > 1 + σ²/sin²θ` whenever `sinθ > 0`.
pub fn negative_transfer_region(theta: f64, sigma: f64) -> Vec<Interval> {
    let mut out = Vec::new();
    if sigma < 1.0 && theta > (1.0 - sigma).acos() {
        if let Some((lo, hi)) = overparameterized_roots(theta, sigma) {
            let (lo, hi) = (lo.max(0.0), hi.min(1.0));
            if hi > lo {
                out.push(Interval { lo, hi });
            }
        }
    }
    let s2 = theta.sin().powi(2);
    if s2 > 0.0 {
        out.push(Interval {
            lo: 1.0 + sigma * sigma / s2,
            hi: f64::INFINITY,
        });
    }
    out
}

fn sign_label(value: Extended) -> Label {
    match value {
        Extended::Infinite { .. } => Label::Singular,
        Extended::Finite(v) if v > ZERO_BAND => Label::Positive,
        Extended::Finite(v) if v < -ZERO_BAND => Label::Negative,
        Extended::Finite(_) => Label::Zero,
    }
}

pub fn classify(gamma: f64, theta: f64, sigma: f64, method: Method) -> RegionLabel {
    let label = match method {
        Method::Linear => sign_label(linear_transferability(gamma, theta, sigma)),
        Method::Finetune if gamma > 1.0 => Label::Zero,
        Method::Finetune => sign_label(Extended::Finite(finetune_transferability(gamma, theta))),
    };
    RegionLabel { method, label }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn scratch_examples() {
        assert!(close(scratch_ge(0.5, 0.2).finite().unwrap(), 0.54, 1e-12));
        assert!(close(scratch_ge(2.0, 0.2).finite().unwrap(), 0.04, 1e-12));
        assert!(close(scratch_ge(1e-9, 0.7).finite().unwrap(), 1.0, 1e-8));
        assert!(scratch_ge(1.0, 0.2).is_infinite());
    }

    #[test]
    fn linear_transfer_examples() {
        assert!(close(linear_transfer_ge(0.0, 0.2, 100.0), 0.04 / 98.0, 1e-15));
        assert!(close(linear_transfer_ge(PI / 2.0, 0.0, 4.0), 1.5, 1e-12));
        assert!(close(linear_transfer_ge(PI / 3.0, 0.0, 1e12), 0.75, 1e-9));
        let t = linear_transferability(0.5, PI / 2.0, 0.0).finite().unwrap();
        assert!(close(t, -0.5, 1e-12));
        assert!(close(linear_transferability(0.5, 0.0, 0.2).finite().unwrap(), 0.54, 1e-12));
        assert!(close(linear_transferability(2.0, PI / 6.0, 0.2).finite().unwrap(), -0.21, 1e-12));
    }

    #[test]
    fn ridge_examples() {
        for theta in [0.0, 0.4, 1.0, PI / 2.0] {
            assert!(close(ridge_transfer_ge(theta, 0.0), theta.sin().powi(2), 1e-12));
            assert!(close(ridge_transfer_ge(theta, 1e9), 1.0, 1e-8));
        }
        assert!(close(ridge_transfer_ge(0.0, 1.0), 0.25, 1e-12));
    }

    #[test]
    fn finetune_examples() {
        assert!(close(finetune_transferability(0.5, 0.0), 0.5, 1e-12));
        assert!(finetune_transferability(0.5, PI / 3.0).abs() < 1e-15);
        assert_eq!(finetune_transferability(2.0, 0.3), 0.0);
        let ge = finetune_ge(0.5, 0.0, 0.2).finite().unwrap();
        assert!(close(ge, 0.54 - 0.5, 1e-12));
    }

    #[test]
    fn region_examples() {
        let r = negative_transfer_region(PI / 2.0, 0.2);
        assert_eq!(r.len(), 2);
        assert!(close(r[0].lo, 0.0, 1e-12) && close(r[0].hi, 0.96, 1e-12));
        assert!(close(r[1].lo, 1.04, 1e-12));

        let r = negative_transfer_region(PI / 4.0, 0.0);
        assert!(close(r[0].lo, 0.5, 1e-12) && close(r[0].hi, 1.0, 1e-12));

        let r = negative_transfer_region(PI / 6.0, 0.2);
        let ray = r.last().unwrap();
        assert!(close(ray.lo, 1.16, 1e-12) && ray.hi.is_infinite());

        assert!(negative_transfer_region(0.0, 0.2).is_empty());
        // noise above the signal: only the underparameterized ray survives
        assert_eq!(negative_transfer_region(PI / 2.0, 1.5).len(), 1);
    }

    #[test]
    fn classification_examples() {
        assert_eq!(classify(0.5, PI / 2.0, 0.0, Method::Linear).label, Label::Negative);
        assert_eq!(classify(2.0, 0.7, 0.3, Method::Finetune).label, Label::Zero);
        assert_eq!(classify(0.5, 0.0, 0.2, Method::Linear).label, Label::Positive);
        assert_eq!(classify(1.0, 0.3, 0.2, Method::Linear).label, Label::Singular);
    }

    #[test]
    fn boundary_exactness() {
        for gamma in [0.1, 0.5, 0.9] {
            assert!(finetune_transferability(gamma, PI / 3.0).abs() < 1e-15);
        }
        for theta in [0.2f64, 0.7, 1.2] {
            let gamma = theta.cos().powi(2);
            let t = linear_transferability(gamma, theta, 0.0).finite().unwrap();
            assert!(t.abs() < 1e-12, "{t}");
        }
    }
}
