//! Closed-form per-client resource estimates.
//!
//! ```text
//! energy      = alpha_E * params_active * (s * grad_accum) * b
//! comm (MB)   = sparsity * params_active * bytes_per_param(q) / 2^20
//! memory      = alpha_M * (0.2 + beta_M * params_active * b)
//! temperature = alpha_T * (0.35 + gamma_T * (s * grad_accum) + delta_T * b)
//! ```
//!
//! Energy and temperature charge every micro-step, so gradient accumulation
//! is not free. Energy and temperature are scaled by a per-client
//! heterogeneity multiplier.

use serde::{Deserialize, Serialize};

use crate::dual::UsageVector;
use crate::error::{Error, Result};
use crate::policy::Knobs;

pub const BYTES_PER_MB: f64 = 1_048_576.0;

/// Defaults are calibrated so the FedAvg baseline on the default model
/// (25 025 parameters, k=4, s=50, b=32, q=0) lands at about 2.7x the energy
/// budget, 48x the comm budget, 1.19x the memory budget and 0.63x the
/// temperature budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyCoeffs {
    pub alpha_e: f64,
    pub alpha_m: f64,
    pub beta_m: f64,
    pub alpha_t: f64,
    pub gamma_t: f64,
    pub delta_t: f64,
    pub sparsity: f64,
}

impl Default for ProxyCoeffs {
    fn default() -> Self {
        ProxyCoeffs {
            alpha_e: 8e-8,
            alpha_m: 0.1,
            beta_m: 3.6e-6,
            alpha_t: 1.0,
            gamma_t: 0.003,
            delta_t: 0.004,
            sparsity: 1.0,
        }
    }
}

impl ProxyCoeffs {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("proxy.alpha_e", self.alpha_e),
            ("proxy.alpha_m", self.alpha_m),
            ("proxy.beta_m", self.beta_m),
            ("proxy.alpha_t", self.alpha_t),
            ("proxy.gamma_t", self.gamma_t),
            ("proxy.delta_t", self.delta_t),
            ("proxy.sparsity", self.sparsity),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.sparsity > 1.0 {
            return Err(Error::Config(format!(
                "proxy.sparsity must be at most 1, got {}",
                self.sparsity
            )));
        }
        Ok(())
    }
}

/// Usage of one client for one round. `heterogeneity` multiplies energy and
/// temperature; pass 1.0 for a nominal device.
pub fn estimate_usage(
    knobs: &Knobs,
    n_active: usize,
    coeffs: &ProxyCoeffs,
    heterogeneity: f64,
) -> UsageVector {
    let p = n_active as f64;
    let steps = knobs.micro_steps() as f64;
    let b = knobs.b as f64;
    UsageVector {
        energy: heterogeneity * coeffs.alpha_e * p * steps * b,
        comm_mb: coeffs.sparsity * p * knobs.q.bytes_per_param() / BYTES_PER_MB,
        memory: coeffs.alpha_m * (0.2 + coeffs.beta_m * p * b),
        temperature: heterogeneity
            * coeffs.alpha_t
            * (0.35 + coeffs.gamma_t * steps + coeffs.delta_t * b),
    }
}
