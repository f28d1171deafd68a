use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{is_running_stat, NamedWeights};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ALPHA_FLOOR: f64 = 0.01;
pub const ALPHA_CEIL: f64 = 1.0;

/// A fusing coefficient: the unclamped value (when one is defined) and the
/// value actually used.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alpha {
    pub raw: Option<f64>,
    pub value: f64,
}

impl Alpha {
    pub fn fixed(value: f64) -> Self {
        Self {
            raw: Some(value),
            value,
        }
    }
}

/// `(P + 1) / (1/L + N)`, clamped to `[0.01, 1]`.
pub fn compute_alpha(p: f64, l: f64, n: usize) -> Result<Alpha> {
    if !(l > 0.0) || !l.is_finite() {
        return Err(Error::invalid("compute_alpha", format!("loss must be positive, got {l}")));
    }
    if n == 0 {
        return Err(Error::invalid("compute_alpha", "batch size must be ≥ 1"));
    }
    let raw = (p + 1.0) / (1.0 / l + n as f64);
    Ok(Alpha {
        raw: Some(raw),
        value: raw.clamp(ALPHA_FLOOR, ALPHA_CEIL),
    })
}

/// How the fusing coefficient evolves over a fuse run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlphaMode {
    /// Accuracy/loss-driven, from the previous fuse iteration.
    Dynamic,
    Constant(f64),
    /// `min(1, 0.01 + t/T)` over the `T` iterations of the run.
    Schedule,
}

impl AlphaMode {
    /// Coefficient for iteration `t` of `total`; `previous` is the fuse
    /// model's `(accuracy, loss)` on the preceding iteration.
    pub fn alpha(&self, t: usize, total: usize, previous: Option<(f64, f64)>, n: usize) -> Result<Alpha> {
        match *self {
            AlphaMode::Dynamic => match previous {
                None => Ok(Alpha {
                    raw: None,
                    value: ALPHA_FLOOR,
                }),
                Some((p, l)) => compute_alpha(p, l, n),
            },
            AlphaMode::Constant(v) => Ok(Alpha::fixed(v)),
            AlphaMode::Schedule => Ok(Alpha::fixed(
                (ALPHA_FLOOR + t as f64 / total.max(1) as f64).min(ALPHA_CEIL),
            )),
        }
    }
}

impl fmt::Display for AlphaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlphaMode::Dynamic => f.write_str("eq5"),
            AlphaMode::Constant(v) => write!(f, "constant:{v}"),
            AlphaMode::Schedule => f.write_str("schedule"),
        }
    }
}

impl FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "eq5" => Ok(AlphaMode::Dynamic),
            "schedule" => Ok(AlphaMode::Schedule),
            other => {
                let v = other
                    .strip_prefix("constant:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "alpha mode `{other}` is not eq5, schedule or constant:<v>"
                        ))
                    })?;
                if !(v > 0.0 && v <= 1.0) {
                    return Err(Error::Config(format!("constant alpha {v} outside (0, 1]")));
                }
                Ok(AlphaMode::Constant(v))
            }
        }
    }
}

/// Whether the teachers enter the blend as their sum or their mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FuseMode {
    #[default]
    Sum,
    Mean,
}

impl fmt::Display for FuseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FuseMode::Sum => "sum",
            FuseMode::Mean => "mean",
        })
    }
}

impl FromStr for FuseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sum" => Ok(FuseMode::Sum),
            "mean" => Ok(FuseMode::Mean),
            other => Err(Error::Config(format!("fuse mode `{other}` is not sum or mean"))),
        }
    }
}

/// `W' = α·W + (1−α)·(W1 + W2)` (sum) or `… ·(W1 + W2)/2` (mean).
///
/// Batch-norm running statistics are not blended: they become the
/// elementwise mean of the two teachers'.
pub fn fuse_weights<T: Scalar>(
    w: &NamedWeights<T>,
    w1: &NamedWeights<T>,
    w2: &NamedWeights<T>,
    alpha: f64,
    mode: FuseMode,
) -> Result<NamedWeights<T>> {
    w.check_compatible(w1)?;
    w.check_compatible(w2)?;
    let a = T::lit(alpha);
    let b = T::lit(1.0 - alpha);
    let half = T::lit(0.5);
    w.iter()
        .zip(w1.iter().zip(w2.iter()))
        .map(|((name, t), ((_, t1), (_, t2)))| {
            let data = if is_running_stat(name) {
                t1.data().iter().zip(t2.data()).map(|(&x1, &x2)| (x1 + x2) * half).collect()
            } else {
                let data = t.data().iter().zip(t1.data().iter().zip(t2.data()));
                match mode {
                    FuseMode::Sum => data.map(|(&x, (&x1, &x2))| a * x + b * (x1 + x2)).collect(),
                    FuseMode::Mean => data
                        .map(|(&x, (&x1, &x2))| a * x + b * ((x1 + x2) * half))
                        .collect(),
                }
            };
            Ok((name.to_string(), Tensor::new(t.shape(), data)?))
        })
        .collect()
}
