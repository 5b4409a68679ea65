//! Minimal reverse-mode autodiff over dense matrices, plus the layers and
//! optimizer the forecasters and the quantile network are built from.
//!
//! Every value on the tape is a 2-D array. Sequences over nodes are stored
//! node-major: row `i * B + b` holds node `i` of batch sample `b`, so that
//! mixing across nodes is a single matrix product on an `[N x (B*h)]` view.

mod layers;
mod params;
mod tape;

use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};

pub use layers::{Gru, Linear, MessagePassing};
pub use params::{Adam, ParamId, ParamStore, StoredParams};
pub use tape::{Grads, Tape, Var};

/// Scalar type the engine runs on (`f32` for training, `f64` for checks).
pub trait Real:
    Float
    + FromPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Scalars compared.
    pub entries: usize,
    /// Largest relative error, `|a - n| / max(|a|, |n|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter entry with the largest error.
    pub worst: String,
}

impl GradCheck {
    pub(crate) fn new() -> Self {
        Self {
            entries: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: String::new(),
        }
    }

    pub(crate) fn record(
        &mut self,
        name: &str,
        r: usize,
        c: usize,
        analytic: f64,
        numeric: f64,
        abs_floor: f64,
    ) {
        self.entries += 1;
        let diff = (analytic - numeric).abs();
        self.max_abs_error = self.max_abs_error.max(diff);
        let rel = diff / analytic.abs().max(numeric.abs()).max(abs_floor);
        if rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = format!("{name}[{r},{c}]: analytic {analytic} vs numeric {numeric}");
        }
    }
}
