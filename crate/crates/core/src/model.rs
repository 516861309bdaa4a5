//! Model parameters for the two-threshold moisture/rain process.
//!
//! In the dry state moisture follows `dq = m dt + D0 dW`; once `q` reaches
//! `b` it rains and `dq = -(r/epsilon) dt + D1 dW` until `q` returns to 0.

use crate::error::{Error, Result};

/// The canonical epsilon sweep used by the convergence experiments.
pub const DEFAULT_SWEEP: [f64; 5] = [0.2, 0.1, 0.05, 0.025, 0.0125];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    /// Moistening rate.
    pub m: f64,
    /// Base rain rate; the effective rate while raining is `r / epsilon`.
    pub r: f64,
    /// Asymptotic scale in (0, 1].
    pub epsilon: f64,
    /// Noise amplitude in the dry state.
    pub d0: f64,
    /// Noise amplitude in the rain state.
    pub d1: f64,
    /// Rain-onset threshold.
    pub b: f64,
    /// Time horizon.
    pub t_end: f64,
    /// Initial moisture, below `b`.
    pub q0: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            m: 1.0,
            r: 1.0,
            epsilon: 0.1,
            d0: 1.0,
            d1: 1.0,
            b: 1.0,
            t_end: 10.0,
            q0: 0.0,
        }
    }
}

/// How strictly noise amplitudes are checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NoisePolicy {
    Positive,
    AllowZero,
}

impl ModelParams {
    /// Effective rain rate `r / epsilon`.
    pub fn rain_rate(&self) -> f64 {
        self.r / self.epsilon
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_horizon(mut self, t_end: f64) -> Self {
        self.t_end = t_end;
        self
    }

    /// Checks every invariant and returns the params unchanged, or names the
    /// first violated invariant.
    pub fn validate(self) -> Result<Self> {
        self.check(NoisePolicy::Positive)?;
        Ok(self)
    }

    /// Like [`validate`](Self::validate) but admits `D0 = D1 = 0`, the
    /// deterministic skeleton of the model.
    pub fn validate_degenerate(self) -> Result<Self> {
        self.check(NoisePolicy::AllowZero)?;
        Ok(self)
    }

    fn check(&self, noise: NoisePolicy) -> Result<()> {
        let fields = [
            ("m", self.m),
            ("r", self.r),
            ("epsilon", self.epsilon),
            ("D0", self.d0),
            ("D1", self.d1),
            ("b", self.b),
            ("T", self.t_end),
            ("q0", self.q0),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(violated(&format!("{name} finite")));
            }
        }
        if self.m <= 0.0 {
            return Err(violated("m > 0"));
        }
        if self.r <= 0.0 {
            return Err(violated("r > 0"));
        }
        if self.epsilon <= 0.0 {
            return Err(violated("epsilon > 0"));
        }
        if self.epsilon > 1.0 {
            return Err(violated("epsilon ≤ 1"));
        }
        match noise {
            NoisePolicy::Positive if self.d0 <= 0.0 => return Err(violated("D0 > 0")),
            NoisePolicy::AllowZero if self.d0 < 0.0 => return Err(violated("D0 ≥ 0")),
            _ => {}
        }
        if self.d0 > self.d1 {
            return Err(violated("D0 ≤ D1"));
        }
        if self.b <= 0.0 {
            return Err(violated("b > 0"));
        }
        if self.t_end <= 0.0 {
            return Err(violated("T > 0"));
        }
        if self.q0 >= self.b {
            return Err(violated("q0 < b"));
        }
        Ok(())
    }

    /// Larger of the two noise amplitudes.
    pub fn max_noise(&self) -> f64 {
        self.d0.max(self.d1)
    }
}

fn violated(invariant: &str) -> Error {
    Error::InvalidParam(format!("{invariant} violated"))
}
