//! Dual-to-knob policy and token-budget gradient accumulation.

use serde::{Deserialize, Serialize};

use crate::dual::DualState;
use crate::error::{Error, Result};

/// Compression level of a client update on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Compression {
    /// 32-bit floats.
    Full,
    /// 8-bit symmetric codes.
    Int8,
    /// 2-bit symmetric codes.
    Int2,
}

impl Compression {
    pub fn level(self) -> u8 {
        match self {
            Compression::Full => 0,
            Compression::Int8 => 1,
            Compression::Int2 => 2,
        }
    }

    pub fn from_level(q: u8) -> Result<Self> {
        match q {
            0 => Ok(Compression::Full),
            1 => Ok(Compression::Int8),
            2 => Ok(Compression::Int2),
            other => Err(Error::InvalidLevel(other)),
        }
    }

    pub fn bits(self) -> usize {
        match self {
            Compression::Full => 32,
            Compression::Int8 => 8,
            Compression::Int2 => 2,
        }
    }

    pub fn bytes_per_param(self) -> f64 {
        self.bits() as f64 / 8.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyBase {
    pub k_base: usize,
    pub s_base: usize,
    pub b_base: usize,
    pub alpha_k: f64,
    pub beta_s: f64,
    pub gamma_b: f64,
    /// `lambda_C` thresholds for 8-bit and 2-bit compression.
    pub q_thresholds: (f64, f64),
}

pub const MIN_STEPS: usize = 10;
pub const MIN_BATCH: usize = 8;

impl Default for PolicyBase {
    fn default() -> Self {
        PolicyBase {
            k_base: 4,
            s_base: 50,
            b_base: 32,
            alpha_k: 1.0,
            beta_s: 0.2,
            gamma_b: 0.5,
            q_thresholds: (0.5, 2.0),
        }
    }
}

impl PolicyBase {
    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.k_base < 1 || self.k_base > n_blocks {
            return err(format!(
                "policy.k_base must lie in 1..={n_blocks} (model.n_blocks), got {}",
                self.k_base
            ));
        }
        if self.s_base < MIN_STEPS {
            return err(format!("policy.s_base must be >= {MIN_STEPS}, got {}", self.s_base));
        }
        if self.b_base < MIN_BATCH {
            return err(format!("policy.b_base must be >= {MIN_BATCH}, got {}", self.b_base));
        }
        for (name, v) in [
            ("policy.alpha_k", self.alpha_k),
            ("policy.beta_s", self.beta_s),
            ("policy.gamma_b", self.gamma_b),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        let (t1, t2) = self.q_thresholds;
        if !(t1.is_finite() && t2.is_finite() && t1 < t2) {
            return err(format!(
                "policy.q_theta1 ({t1}) must be below policy.q_theta2 ({t2})"
            ));
        }
        Ok(())
    }

    pub fn token_target(&self) -> usize {
        self.s_base * self.b_base
    }

    /// The knobs used when no constraint pressure exists, and by the
    /// FedAvg baseline throughout.
    pub fn base_knobs(&self) -> Knobs {
        Knobs {
            k: self.k_base,
            s: self.s_base,
            b: self.b_base,
            q: Compression::Full,
            grad_accum: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Knobs {
    pub k: usize,
    pub s: usize,
    pub b: usize,
    pub q: Compression,
    pub grad_accum: usize,
}

impl Knobs {
    /// Micro-batches consumed per round: `s * grad_accum`.
    pub fn micro_steps(&self) -> usize {
        self.s * self.grad_accum
    }
}

/// `max(1, ceil(s_base * b_base / (s * b)))`.
pub fn token_budget_accum(s: usize, b: usize, base: &PolicyBase) -> usize {
    let per_pass = (s * b).max(1);
    base.token_target().div_ceil(per_pass).max(1)
}

/// Maps duals to `(k, s, b, q)` and the matching accumulation factor;
/// `k` is additionally capped at `n_blocks`.
pub fn compute_knobs(duals: &DualState, base: &PolicyBase, n_blocks: usize) -> Knobs {
    let DualState {
        lambda_e,
        lambda_c,
        lambda_m,
        lambda_t,
    } = *duals;

    let k_cut = (base.alpha_k * (lambda_c + lambda_m + 0.5 * lambda_t)).floor();
    let k = (base.k_base as f64 - k_cut).max(1.0) as usize;
    let k = k.min(n_blocks);

    let s = (base.s_base as f64 * (1.0 - base.beta_s * (lambda_e + lambda_t)))
        .floor()
        .max(MIN_STEPS as f64) as usize;

    let b = (base.b_base as f64 / (1.0 + base.gamma_b * (lambda_t + lambda_m)))
        .floor()
        .max(MIN_BATCH as f64) as usize;

    let (t1, t2) = base.q_thresholds;
    let q = if lambda_c < t1 {
        Compression::Full
    } else if lambda_c < t2 {
        Compression::Int8
    } else {
        Compression::Int2
    };

    Knobs {
        k,
        s,
        b,
        q,
        grad_accum: token_budget_accum(s, b, base),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn duals(e: f64, c: f64, m: f64, t: f64) -> DualState {
        DualState::from_array([e, c, m, t])
    }

    #[test]
    fn zero_duals_give_base_knobs() {
        let base = PolicyBase::default();
        assert_eq!(compute_knobs(&DualState::default(), &base, 4), base.base_knobs());
    }

    #[test]
    fn policy_examples() {
        let base = PolicyBase {
            k_base: 4,
            alpha_k: 1.0,
            ..Default::default()
        };
        assert_eq!(compute_knobs(&duals(0.0, 1.2, 0.5, 0.6), &base, 4).k, 2);

        let base = PolicyBase {
            s_base: 50,
            beta_s: 0.2,
            ..Default::default()
        };
        assert_eq!(compute_knobs(&duals(3.0, 0.0, 0.0, 2.0), &base, 4).s, 10);

        let base = PolicyBase {
            b_base: 32,
            gamma_b: 0.5,
            ..Default::default()
        };
        assert_eq!(compute_knobs(&duals(0.0, 0.0, 1.0, 1.0), &base, 4).b, 16);
    }

    #[test]
    fn compression_thresholds() {
        let base = PolicyBase::default();
        let q = |c| compute_knobs(&duals(0.0, c, 0.0, 0.0), &base, 4).q;
        assert_eq!(q(0.49), Compression::Full);
        assert_eq!(q(0.5), Compression::Int8);
        assert_eq!(q(1.99), Compression::Int8);
        assert_eq!(q(2.0), Compression::Int2);
    }

    #[test]
    fn k_capped_by_depth() {
        let base = PolicyBase {
            k_base: 6,
            ..Default::default()
        };
        assert_eq!(compute_knobs(&DualState::default(), &base, 4).k, 4);
    }

    #[test]
    fn accumulation_examples() {
        let base = PolicyBase::default();
        assert_eq!(token_budget_accum(50, 32, &base), 1);
        assert_eq!(token_budget_accum(25, 16, &base), 4);
        assert_eq!(token_budget_accum(30, 11, &base), 5);
        assert_eq!(token_budget_accum(100, 64, &base), 1);
    }

    #[test]
    fn level_roundtrip() {
        for q in 0..3 {
            assert_eq!(Compression::from_level(q).unwrap().level(), q);
        }
        assert!(Compression::from_level(3).is_err());
        assert_eq!(Compression::Int2.bytes_per_param(), 0.25);
    }

    fn dual_vec() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(0.0f64..8.0)
    }

    proptest! {
        #[test]
        fn floors_and_token_window(d in dual_vec()) {
            let base = PolicyBase::default();
            let kn = compute_knobs(&DualState::from_array(d), &base, 4);
            prop_assert!(kn.k >= 1 && kn.s >= 10 && kn.b >= 8);
            let target = base.token_target();
            let tokens = kn.grad_accum * kn.s * kn.b;
            prop_assert!(tokens >= target && tokens < target + kn.s * kn.b);
        }

        #[test]
        fn knobs_monotone_in_each_dual(d in dual_vec(), j in 0usize..4, bump in 0.0f64..3.0) {
            let base = PolicyBase::default();
            let lo = compute_knobs(&DualState::from_array(d), &base, 4);
            let mut up = d;
            up[j] += bump;
            let hi = compute_knobs(&DualState::from_array(up), &base, 4);
            // k falls with C, M, T; s with E, T; b with M, T; q rises with C
            if j != 0 { prop_assert!(hi.k <= lo.k); }
            if j == 0 || j == 3 { prop_assert!(hi.s <= lo.s); }
            if j == 2 || j == 3 { prop_assert!(hi.b <= lo.b); }
            if j == 1 { prop_assert!(hi.q >= lo.q); }
            prop_assert_eq!(compute_knobs(&DualState::from_array(d), &base, 4), lo);
        }
    }
}
