use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::KanError;

/// Fixed base activation `σ` added to every KAN edge's spline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseActivation {
    #[default]
    Silu,
    Elu,
    Tanh,
    Relu,
}

impl BaseActivation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Silu => x * sigmoid(x),
            Self::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Self::Tanh => x.tanh(),
            Self::Relu => x.max(0.0),
        }
    }

    /// Derivative; ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Self::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Self::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Self::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl fmt::Display for BaseActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Silu => "silu",
            Self::Elu => "elu",
            Self::Tanh => "tanh",
            Self::Relu => "relu",
        })
    }
}

impl FromStr for BaseActivation {
    type Err = KanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "silu" => Ok(Self::Silu),
            "elu" => Ok(Self::Elu),
            "tanh" => Ok(Self::Tanh),
            "relu" => Ok(Self::Relu),
            other => Err(KanError::InvalidConfig(format!("unknown activation `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-6;
        for act in [BaseActivation::Silu, BaseActivation::Elu, BaseActivation::Tanh, BaseActivation::Relu] {
            for x in [-2.3, -0.7, 0.4, 1.9] {
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8, "{act} at {x}");
            }
        }
        assert_eq!(BaseActivation::Relu.derivative(0.0), 0.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
    }

    #[test]
    fn parses_names() {
        assert_eq!("SiLU".parse::<BaseActivation>().unwrap(), BaseActivation::Silu);
        assert!("prelu".parse::<BaseActivation>().is_err());
    }
}
