//! Dual variables for the four resource constraints and their dead-zone
//! projected update.

use serde::{Deserialize, Serialize};

/// Per-round limits: energy and memory in relative units, communication in
/// MB per client, temperature in relative units. `f64::INFINITY` disables a
/// constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    pub energy: f64,
    pub comm: f64,
    pub memory: f64,
    pub temperature: f64,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            energy: 1.20,
            // rescaled to the desk-size model; see README
            comm: 0.002,
            memory: 0.26,
            temperature: 1.00,
        }
    }
}

impl Budgets {
    pub fn as_array(&self) -> [f64; 4] {
        [self.energy, self.comm, self.memory, self.temperature]
    }
}

/// Measured or estimated usage, in the same units as [`Budgets`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageVector {
    pub energy: f64,
    pub comm_mb: f64,
    pub memory: f64,
    pub temperature: f64,
}

impl UsageVector {
    pub fn as_array(&self) -> [f64; 4] {
        [self.energy, self.comm_mb, self.memory, self.temperature]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        UsageVector {
            energy: a[0],
            comm_mb: a[1],
            memory: a[2],
            temperature: a[3],
        }
    }

    /// Componentwise `usage / budget`.
    pub fn ratios(&self, budgets: &Budgets) -> [f64; 4] {
        let u = self.as_array();
        let b = budgets.as_array();
        [u[0] / b[0], u[1] / b[1], u[2] / b[2], u[3] / b[3]]
    }

    /// Componentwise mean; the zero vector for an empty slice.
    pub fn mean(items: &[UsageVector]) -> UsageVector {
        if items.is_empty() {
            return UsageVector::default();
        }
        let mut acc = [0.0; 4];
        for u in items {
            for (a, x) in acc.iter_mut().zip(u.as_array()) {
                *a += x;
            }
        }
        let n = items.len() as f64;
        UsageVector::from_array(acc.map(|a| a / n))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub lambda_e: f64,
    pub lambda_c: f64,
    pub lambda_m: f64,
    pub lambda_t: f64,
}

impl DualState {
    pub fn as_array(&self) -> [f64; 4] {
        [self.lambda_e, self.lambda_c, self.lambda_m, self.lambda_t]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        DualState {
            lambda_e: a[0],
            lambda_c: a[1],
            lambda_m: a[2],
            lambda_t: a[3],
        }
    }
}

/// Dual step sizes per constraint plus the shared dead-zone half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualParams {
    pub eta: [f64; 4],
    pub delta: f64,
}

impl Default for DualParams {
    fn default() -> Self {
        DualParams {
            eta: [0.5, 0.1, 0.1, 0.1],
            delta: 0.05,
        }
    }
}

/// Zero inside `[1 - delta, 1 + delta]`, otherwise the signed excess
/// `ratio - 1`. Negative output lets duals decay under slack.
pub fn deadzone(ratio: f64, delta: f64) -> f64 {
    let excess = ratio - 1.0;
    if excess.abs() <= delta {
        0.0
    } else {
        excess
    }
}

/// `lambda_j <- max(0, lambda_j + eta_j * dz(u_j / b_j))` for each constraint.
pub fn update_duals(
    duals: &DualState,
    usage: &UsageVector,
    budgets: &Budgets,
    params: &DualParams,
) -> DualState {
    let ratios = usage.ratios(budgets);
    let mut next = duals.as_array();
    for j in 0..4 {
        next[j] = (next[j] + params.eta[j] * deadzone(ratios[j], params.delta)).max(0.0);
    }
    DualState::from_array(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_budgets() -> Budgets {
        Budgets {
            energy: 1.0,
            comm: 1.0,
            memory: 1.0,
            temperature: 1.0,
        }
    }

    fn flat(eta: f64) -> DualParams {
        DualParams {
            eta: [eta; 4],
            delta: 0.05,
        }
    }

    #[test]
    fn deadzone_examples() {
        assert_eq!(deadzone(1.0, 0.05), 0.0);
        assert_eq!(deadzone(1.04, 0.05), 0.0);
        assert_eq!(deadzone(2.0, 0.05), 1.0);
        assert_eq!(deadzone(0.5, 0.05), -0.5);
    }

    #[test]
    fn on_budget_keeps_zero_duals() {
        let b = Budgets::default();
        let u = UsageVector::from_array(b.as_array());
        assert_eq!(
            update_duals(&DualState::default(), &u, &b, &DualParams::default()),
            DualState::default()
        );
    }

    #[test]
    fn update_examples() {
        let b = unit_budgets();
        let u = UsageVector {
            comm_mb: 2.0,
            energy: 1.0,
            memory: 1.0,
            temperature: 1.0,
        };
        let d = update_duals(&DualState::default(), &u, &b, &flat(0.1));
        assert!((d.lambda_c - 0.1).abs() < 1e-15);

        let d0 = DualState {
            lambda_e: 0.05,
            ..Default::default()
        };
        let u = UsageVector {
            energy: 0.5,
            ..u
        };
        assert_eq!(update_duals(&d0, &u, &b, &flat(0.1)).lambda_e, 0.0);
    }

    #[test]
    fn infinite_budget_ratio_is_zero() {
        let b = Budgets {
            energy: f64::INFINITY,
            ..unit_budgets()
        };
        let u = UsageVector {
            energy: 5.0,
            ..Default::default()
        };
        assert_eq!(u.ratios(&b)[0], 0.0);
    }

    #[test]
    fn usage_mean() {
        let a = UsageVector {
            energy: 2.0,
            ..Default::default()
        };
        let b = UsageVector {
            energy: 4.0,
            ..Default::default()
        };
        assert_eq!(UsageVector::mean(&[a, b]).energy, 3.0);
        assert_eq!(UsageVector::mean(&[]), UsageVector::default());
    }

    fn ratios() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(0.0f64..5.0)
    }

    proptest! {
        #[test]
        fn duals_stay_nonnegative(stream in prop::collection::vec(ratios(), 1..60), eta in 0.01f64..2.0) {
            let b = unit_budgets();
            let mut d = DualState::default();
            for r in stream {
                d = update_duals(&d, &UsageVector::from_array(r), &b, &flat(eta));
                prop_assert!(d.as_array().iter().all(|&x| x >= 0.0));
            }
        }

        #[test]
        fn dead_zone_is_a_fixed_point(
            start in prop::array::uniform4(0.0f64..3.0),
            stream in prop::collection::vec(prop::array::uniform4(0.95f64..=1.05), 1..40),
        ) {
            let b = unit_budgets();
            let d0 = DualState::from_array(start);
            let mut d = d0;
            for r in stream {
                d = update_duals(&d, &UsageVector::from_array(r), &b, &flat(0.1));
            }
            prop_assert_eq!(d, d0);
        }

        #[test]
        fn larger_violation_gives_larger_dual(r1 in 1.06f64..5.0, gap in 1e-3f64..3.0, start in 0.0f64..2.0) {
            let b = unit_budgets();
            let d0 = DualState::from_array([start; 4]);
            let lo = update_duals(&d0, &UsageVector::from_array([r1; 4]), &b, &flat(0.1));
            let hi = update_duals(&d0, &UsageVector::from_array([r1 + gap; 4]), &b, &flat(0.1));
            for (a, z) in lo.as_array().iter().zip(hi.as_array()) {
                prop_assert!(z > *a);
            }
        }

        #[test]
        fn bounded_ratios_bound_duals(stream in prop::collection::vec(ratios(), 1..50)) {
            let big_r = 5.0;
            let eta = 0.1;
            let b = unit_budgets();
            let mut d = DualState::default();
            for (t, r) in stream.iter().enumerate() {
                d = update_duals(&d, &UsageVector::from_array(*r), &b, &flat(eta));
                let ceiling = eta * (big_r - 1.0) * (t + 1) as f64 + 1e-12;
                prop_assert!(d.as_array().iter().all(|&x| x <= ceiling));
            }
        }
    }
}
