//! Uncoordinated allocation: every stripe keeps its static share and splits
//! it evenly among the vehicles drawing from it, handing whatever a vehicle
//! does not need to the others.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scenario::StripeSpec;
use crate::types::{StripeId, VehicleId};

/// Power assignment for one control interval (or one tick, for the
/// benchmark).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub timestamp: f64,
    /// kW per vehicle.
    pub per_vehicle: BTreeMap<VehicleId, f64>,
    /// kW per stripe.
    pub per_stripe: BTreeMap<StripeId, f64>,
    /// Stripe each powered vehicle is expected to draw from.
    pub coupling: BTreeMap<VehicleId, StripeId>,
}

impl AllocationPlan {
    pub fn vehicle_power(&self, id: VehicleId) -> f64 {
        self.per_vehicle.get(&id).copied().unwrap_or(0.0)
    }

    pub fn total_vehicle_power(&self) -> f64 {
        self.per_vehicle.values().sum()
    }

    pub fn total_stripe_power(&self) -> f64 {
        self.per_stripe.values().sum()
    }
}

/// A vehicle as seen by the benchmark: where it is and what it asks for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkDemand {
    pub id: VehicleId,
    pub stripe: Option<StripeId>,
    /// Request from the uncoordinated draw law, kW.
    pub request: f64,
    /// `min(P_on, P_coil)`, kW.
    pub cap: f64,
}

/// Splits `budget` among `demands` so that every unsatisfied consumer gets
/// the same amount and no one gets more than it asks for.
///
/// This is the fixed point of repeated equal sharing with redistribution of
/// leftovers; it is computed directly from the sorted demands so that the
/// result depends only on the multiset of demands.
pub fn water_fill(budget: f64, demands: &[f64]) -> Vec<f64> {
    if demands.is_empty() {
        return Vec::new();
    }
    let total: f64 = demands.iter().map(|d| d.max(0.0)).sum();
    if total <= budget {
        return demands.iter().map(|d| d.max(0.0)).collect();
    }
    let mut sorted: Vec<f64> = demands.iter().map(|d| d.max(0.0)).collect();
    sorted.sort_by(f64::total_cmp);
    let mut remaining = budget.max(0.0);
    let mut level = 0.0;
    let n = sorted.len();
    for (i, d) in sorted.iter().enumerate() {
        let share = remaining / (n - i) as f64;
        if *d >= share {
            level = share;
            break;
        }
        remaining -= d;
    }
    demands.iter().map(|d| d.max(0.0).min(level)).collect()
}

/// Static per-stripe budgets, water-filled among the vehicles on each stripe.
pub fn allocate_benchmark(demands: &[BenchmarkDemand], stripes: &[StripeSpec], timestamp: f64) -> AllocationPlan {
    let mut plan = AllocationPlan { timestamp, ..Default::default() };
    let mut by_stripe: Vec<Vec<usize>> = vec![Vec::new(); stripes.len()];
    for (i, d) in demands.iter().enumerate() {
        plan.per_vehicle.insert(d.id, 0.0);
        if let Some(s) = d.stripe {
            by_stripe[s.0].push(i);
        }
    }
    for stripe in stripes {
        plan.per_stripe.insert(stripe.id, stripe.static_share);
        let members = &by_stripe[stripe.id.0];
        if members.is_empty() {
            continue;
        }
        let wants: Vec<f64> = members.iter().map(|&i| demands[i].request.min(demands[i].cap).max(0.0)).collect();
        for (&i, p) in members.iter().zip(water_fill(stripe.static_share, &wants)) {
            plan.per_vehicle.insert(demands[i].id, p);
            if p > 0.0 {
                plan.coupling.insert(demands[i].id, stripe.id);
            }
        }
    }
    plan
}
