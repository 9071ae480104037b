//! Periodic activations applied directly to accumulator outputs.
//!
//! Every function here has period `2^b`, so evaluating it on an exact
//! pre-activation or on the same value after it wrapped in a `b`-bit register
//! gives the same answer. The smooth-modulo kind is the identity near zero and
//! falls back to zero with slope `-k` towards the ends of the register range,
//! which keeps it continuous across the wrap point.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CyclicKind {
    SmoothModulo,
    ReluLike,
    Absolute,
    PureModulo,
}

impl CyclicKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CyclicKind::SmoothModulo => "smooth_modulo",
            CyclicKind::ReluLike => "relu_like",
            CyclicKind::Absolute => "absolute",
            CyclicKind::PureModulo => "pure_modulo",
        }
    }
}

impl FromStr for CyclicKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth_modulo" => Ok(CyclicKind::SmoothModulo),
            "relu_like" => Ok(CyclicKind::ReluLike),
            "absolute" => Ok(CyclicKind::Absolute),
            "pure_modulo" => Ok(CyclicKind::PureModulo),
            other => Err(Error::Format(format!("unknown cyclic kind `{other}`"))),
        }
    }
}

/// Transition slope `k`; `Infinite` degenerates to the plain modulo.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Slope {
    Finite(f64),
    Infinite,
}

impl Slope {
    pub fn finite(k: f64) -> Result<Self> {
        if !(k.is_finite() && k >= 1.0) {
            return Err(Error::Format(format!("slope must be finite and >= 1, got {k}")));
        }
        Ok(Slope::Finite(k))
    }
}

impl fmt::Display for Slope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slope::Finite(k) => write!(f, "{k}"),
            Slope::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Slope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinite" | "∞" => Ok(Slope::Infinite),
            t => {
                let k: f64 = t
                    .parse()
                    .map_err(|_| Error::Format(format!("bad slope `{s}`")))?;
                Slope::finite(k)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CyclicSpec {
    bits: u32,
    slope: Slope,
    kind: CyclicKind,
}

impl CyclicSpec {
    pub fn new(bits: u32, slope: Slope, kind: CyclicKind) -> Result<Self> {
        if !(2..=32).contains(&bits) {
            return Err(Error::InvalidMode(format!(
                "cyclic period bits must lie in [2, 32], got {bits}"
            )));
        }
        if let Slope::Finite(k) = slope {
            Slope::finite(k)?;
        }
        Ok(CyclicSpec { bits, slope, kind })
    }

    pub fn smooth(bits: u32, k: f64) -> Result<Self> {
        Self::new(bits, Slope::finite(k)?, CyclicKind::SmoothModulo)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn slope(&self) -> Slope {
        self.slope
    }

    pub fn kind(&self) -> CyclicKind {
        self.kind
    }

    /// Same function with a different period.
    pub fn with_bits(&self, bits: u32) -> Result<Self> {
        Self::new(bits, self.slope, self.kind)
    }

    pub fn period(&self) -> f64 {
        (1u64 << self.bits) as f64
    }

    /// `2^(b-1)`.
    pub fn half_range(&self) -> f64 {
        (1u64 << (self.bits - 1)) as f64
    }

    /// Boundary `M = k/(k+1) * 2^(b-1)` between the identity and transition
    /// branches; the full half range for an infinite slope.
    pub fn transition(&self) -> f64 {
        match self.slope {
            Slope::Finite(k) => k / (k + 1.0) * self.half_range(),
            Slope::Infinite => self.half_range(),
        }
    }

    /// Maps `z` into `[-2^(b-1), 2^(b-1))`.
    pub fn fold(&self, z: f64) -> f64 {
        let h = self.half_range();
        (z + h).rem_euclid(self.period()) - h
    }

    pub fn apply(&self, z: f64) -> f64 {
        let m = self.fold(z);
        let h = self.half_range();
        match (self.kind, self.slope) {
            (CyclicKind::PureModulo, _) | (CyclicKind::SmoothModulo, Slope::Infinite) => m,
            (CyclicKind::SmoothModulo, Slope::Finite(k)) => {
                let edge = self.transition();
                if m > edge {
                    k * h - k * m
                } else if m < -edge {
                    -k * h - k * m
                } else {
                    m
                }
            }
            (CyclicKind::ReluLike, Slope::Finite(k)) => {
                if m > self.transition() {
                    k * (h - m)
                } else {
                    m.max(0.0)
                }
            }
            (CyclicKind::ReluLike, Slope::Infinite) => m.max(0.0),
            (CyclicKind::Absolute, _) => m.abs(),
        }
    }

    /// Integer-input evaluation used at inference.
    pub fn apply_int(&self, z: i64) -> f64 {
        let wrapped = crate::fxp::wrap(z, self.bits);
        self.apply(wrapped as f64)
    }

    /// Derivative with respect to `z`; at a kink the slope of the branch to the
    /// left of it.
    pub fn derivative(&self, z: f64) -> f64 {
        let m = self.fold(z);
        let h = self.half_range();
        // m == -h is reached from the right end of the previous period.
        let at_wrap = m == -h;
        match (self.kind, self.slope) {
            (CyclicKind::PureModulo, _) | (CyclicKind::SmoothModulo, Slope::Infinite) => 1.0,
            (CyclicKind::SmoothModulo, Slope::Finite(k)) => {
                let edge = self.transition();
                if m > -edge && m <= edge {
                    1.0
                } else {
                    -k
                }
            }
            (CyclicKind::ReluLike, slope) => {
                let k = match slope {
                    Slope::Finite(k) => k,
                    Slope::Infinite => return if m > 0.0 { 1.0 } else { 0.0 },
                };
                if at_wrap || m > self.transition() {
                    -k
                } else if m > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            (CyclicKind::Absolute, _) => {
                if at_wrap || m > 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }

    /// Points in `[-2^(b-1), 2^(b-1))` where the derivative jumps.
    pub fn kinks(&self) -> Vec<f64> {
        let h = self.half_range();
        let edge = self.transition();
        match (self.kind, self.slope) {
            (CyclicKind::PureModulo, _) | (CyclicKind::SmoothModulo, Slope::Infinite) => vec![-h],
            (CyclicKind::SmoothModulo, Slope::Finite(_)) => vec![-h, -edge, edge],
            (CyclicKind::ReluLike, Slope::Finite(_)) => vec![-h, 0.0, edge],
            (CyclicKind::ReluLike, Slope::Infinite) => vec![-h, 0.0],
            (CyclicKind::Absolute, _) => vec![-h, 0.0],
        }
    }

    /// Distance from `z` to the nearest kink (taking periodicity into account).
    pub fn distance_to_kink(&self, z: f64) -> f64 {
        let m = self.fold(z);
        let p = self.period();
        self.kinks()
            .iter()
            .map(|&c| {
                let d = (m - c).rem_euclid(p);
                d.min(p - d)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth(b: u32, k: f64) -> CyclicSpec {
        CyclicSpec::smooth(b, k).unwrap()
    }

    #[test]
    fn smooth_modulo_examples() {
        let c = smooth(4, 1.0);
        assert_eq!(c.apply(0.0), 0.0);
        assert_eq!(c.apply(6.0), 2.0);
        assert_eq!(c.apply(8.0), 0.0);
        assert_eq!(c.apply(22.0), 2.0);
        assert_eq!(smooth(8, 2.0).apply(100.0), 56.0);
        assert_eq!(smooth(8, 2.0).apply_int(100), 56.0);
    }

    #[test]
    fn derivative_examples() {
        assert_eq!(smooth(8, 2.0).derivative(10.0), 1.0);
        assert_eq!(smooth(8, 2.0).derivative(100.0), -2.0);
        assert_eq!(smooth(4, 1.0).derivative(22.0), -1.0);
    }

    #[test]
    fn derivative_at_kinks_uses_left_branch() {
        let c = smooth(4, 1.0);
        // m = 4 is the identity/transition boundary: left branch is identity.
        assert_eq!(c.derivative(4.0), 1.0);
        // m = -4: left branch is the lower transition.
        assert_eq!(c.derivative(-4.0), -1.0);
        assert_eq!(c.derivative(8.0), -1.0);
        let abs = CyclicSpec::new(4, Slope::Infinite, CyclicKind::Absolute).unwrap();
        assert_eq!(abs.derivative(0.0), -1.0);
        assert_eq!(abs.derivative(-8.0), 1.0);
        assert_eq!(abs.derivative(3.0), 1.0);
        assert_eq!(abs.derivative(-3.0), -1.0);
    }

    #[test]
    fn infinite_slope_is_wrap() {
        let c = CyclicSpec::new(8, Slope::Infinite, CyclicKind::SmoothModulo).unwrap();
        let p = CyclicSpec::new(8, Slope::Infinite, CyclicKind::PureModulo).unwrap();
        for z in -1000..1000 {
            let w = crate::fxp::wrap(z, 8) as f64;
            assert_eq!(c.apply(z as f64), w);
            assert_eq!(p.apply(z as f64), w);
        }
    }

    #[test]
    fn relu_like_and_absolute_shapes() {
        let r = CyclicSpec::new(4, Slope::Finite(1.0), CyclicKind::ReluLike).unwrap();
        assert_eq!(r.apply(-3.0), 0.0);
        assert_eq!(r.apply(3.0), 3.0);
        assert_eq!(r.apply(4.0), 4.0);
        assert_eq!(r.apply(6.0), 2.0);
        assert_eq!(r.apply(8.0), 0.0);
        let a = CyclicSpec::new(4, Slope::Infinite, CyclicKind::Absolute).unwrap();
        assert_eq!(a.apply(-3.0), 3.0);
        assert_eq!(a.apply(7.0), 7.0);
        assert_eq!(a.apply(8.0), 8.0);
        assert_eq!(a.apply(9.0), 7.0);
    }

    #[test]
    fn slope_parsing() {
        assert_eq!("inf".parse::<Slope>().unwrap(), Slope::Infinite);
        assert_eq!("2".parse::<Slope>().unwrap(), Slope::Finite(2.0));
        assert!("0.5".parse::<Slope>().is_err());
        assert!("x".parse::<Slope>().is_err());
        assert_eq!(Slope::Infinite.to_string(), "inf");
        assert_eq!(Slope::Finite(2.0).to_string(), "2");
    }

    #[test]
    fn periodicity_small() {
        for kind in [
            CyclicKind::SmoothModulo,
            CyclicKind::ReluLike,
            CyclicKind::Absolute,
            CyclicKind::PureModulo,
        ] {
            let c = CyclicSpec::new(5, Slope::Finite(3.0), kind).unwrap();
            for z in -200..200 {
                assert_eq!(c.apply_int(z), c.apply_int(z + 32), "{kind:?} at {z}");
            }
        }
    }

    #[test]
    fn distance_to_kink_wraps() {
        let c = smooth(4, 1.0);
        assert_eq!(c.distance_to_kink(4.0), 0.0);
        assert!((c.distance_to_kink(7.5) - 0.5).abs() < 1e-12);
        assert!((c.distance_to_kink(1.0) - 3.0).abs() < 1e-12);
    }
}
