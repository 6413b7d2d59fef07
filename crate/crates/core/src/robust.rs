//! Robust losses applied to whitened residual norms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loss applied to the Mahalanobis norm `r` of one edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RobustLoss {
    /// Plain `r^2`.
    Quadratic,
    /// `2 delta^2 (sqrt(1 + r^2/delta^2) - 1)`.
    PseudoHuber { delta: f64 },
}

impl RobustLoss {
    pub fn pseudo_huber(delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "pseudo-Huber delta must be > 0, got {delta}"
            )));
        }
        Ok(RobustLoss::PseudoHuber { delta })
    }

    /// `(cost, weight)` where `weight = d cost / d r^2` is the IRLS weight.
    pub fn evaluate(&self, r: f64) -> (f64, f64) {
        match *self {
            RobustLoss::Quadratic => (r * r, 1.0),
            RobustLoss::PseudoHuber { delta } => pseudo_huber_weight(r, delta),
        }
    }
}

/// Cost and IRLS weight of the pseudo-Huber loss at residual norm `r`.
pub fn pseudo_huber_weight(r: f64, delta: f64) -> (f64, f64) {
    let d2 = delta * delta;
    let s = (1.0 + r * r / d2).sqrt();
    // s - 1 rewritten to avoid cancellation for small r
    let cost = 2.0 * d2 * (r * r / d2) / (s + 1.0);
    (cost, 1.0 / s)
}

/// Per-family losses. Defaults follow chi-square gating scales: 2.45 for
/// 3-dof points and 1.96 for line edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub point: RobustLoss,
    pub line: RobustLoss,
}

pub const DEFAULT_POINT_DELTA: f64 = 2.45;
pub const DEFAULT_LINE_DELTA: f64 = 1.96;

impl Default for Losses {
    fn default() -> Self {
        Self {
            point: RobustLoss::PseudoHuber {
                delta: DEFAULT_POINT_DELTA,
            },
            line: RobustLoss::PseudoHuber {
                delta: DEFAULT_LINE_DELTA,
            },
        }
    }
}

impl Losses {
    pub fn quadratic() -> Self {
        Self::uniform(RobustLoss::Quadratic)
    }

    pub fn uniform(loss: RobustLoss) -> Self {
        Self {
            point: loss,
            line: loss,
        }
    }
}
