//! Battery bookkeeping: driving consumption, SoC dynamics and the power a
//! vehicle draws when nobody coordinates it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mobility::VehicleState;
use crate::scenario::StripeSpec;
use crate::types::StripeId;

const SECONDS_PER_HOUR: f64 = 3600.0;

/// Driving power draw, affine in speed: `idle_kw + per_speed_kw * speed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsumptionModel {
    pub idle_kw: f64,
    /// kW per m/s
    pub per_speed_kw: f64,
}

impl Default for ConsumptionModel {
    fn default() -> Self {
        // About 10 kW at 40 km/h.
        ConsumptionModel { idle_kw: 2.0, per_speed_kw: 0.72 }
    }
}

impl ConsumptionModel {
    pub fn driving_power(&self, speed: f64) -> f64 {
        self.idle_kw + self.per_speed_kw * speed.max(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.idle_kw >= 0.0) || !(self.per_speed_kw >= 0.0) {
            return Err(Error::Config("consumption coefficients must be non-negative".into()));
        }
        Ok(())
    }
}

/// Energy used for driving over `dt` seconds at the vehicle's current speed,
/// in kWh, never more than what is left in the battery.
pub fn consumption(model: &ConsumptionModel, vehicle: &VehicleState, dt: f64) -> f64 {
    consumption_at(model, vehicle.speed, vehicle.soc, vehicle.capacity_kwh, dt)
}

pub fn consumption_at(model: &ConsumptionModel, speed: f64, soc: f64, capacity_kwh: f64, dt: f64) -> f64 {
    let wanted = model.driving_power(speed) * dt / SECONDS_PER_HOUR;
    wanted.min(soc.max(0.0) * capacity_kwh)
}

/// Result of one battery update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SocUpdate {
    pub soc: f64,
    /// Energy lost to the `[0, target]` clamp, kWh. Positive when the target
    /// cap cut off charge, negative when the floor added some.
    pub clamped_kwh: f64,
}

/// `soc' = clamp(soc + eta*P*dt/(3600 E) - C/E, 0, target)`.
pub fn apply_soc_dynamics(
    vehicle: &VehicleState,
    delivered_kw: f64,
    efficiency: f64,
    consumption_kwh: f64,
    dt: f64,
) -> SocUpdate {
    debug_assert!(delivered_kw >= 0.0);
    let e = vehicle.capacity_kwh;
    let unclamped = vehicle.soc + efficiency * delivered_kw * dt / (SECONDS_PER_HOUR * e) - consumption_kwh / e;
    let soc = unclamped.clamp(0.0, vehicle.soc_target);
    SocUpdate { soc, clamped_kwh: (unclamped - soc) * e }
}

/// Largest power the vehicle can take over `dt` without passing its target,
/// given the consumption it will have over the same period.
pub fn fill_limit(vehicle: &VehicleState, efficiency: f64, consumption_kwh: f64, dt: f64) -> f64 {
    let gap_kwh = (vehicle.soc_target - vehicle.soc).max(0.0) * vehicle.capacity_kwh + consumption_kwh;
    (gap_kwh * SECONDS_PER_HOUR / (efficiency * dt)).max(0.0)
}

/// Power a vehicle tries to draw when left alone:
/// `min(P_on, P_coil, gap*E*3600/T_c + P_drv)` on a stripe, zero elsewhere
/// and zero once the target is reached.
pub fn requested_power(
    vehicle: &VehicleState,
    on_stripe: bool,
    coil_power_nom: f64,
    charge_time_constant: f64,
    driving_power_kw: f64,
) -> f64 {
    if !on_stripe {
        return 0.0;
    }
    let gap = vehicle.soc_target - vehicle.soc;
    if gap <= 0.0 {
        return 0.0;
    }
    let wanted = gap * vehicle.capacity_kwh * SECONDS_PER_HOUR / charge_time_constant + driving_power_kw;
    vehicle.p_on.min(coil_power_nom).min(wanted).max(0.0)
}

/// Demand per stripe and in total, uncapped.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRequest {
    /// Indexed by stripe id.
    pub per_stripe: Vec<f64>,
    pub total: f64,
}

/// Sums per-vehicle requests over the stripe each vehicle is on.
pub fn aggregate_requests(
    requests: impl IntoIterator<Item = (Option<StripeId>, f64)>,
    stripes: &[StripeSpec],
) -> AggregateRequest {
    let mut per_stripe = vec![0.0; stripes.len()];
    for (stripe, kw) in requests {
        if let Some(s) = stripe {
            per_stripe[s.0] += kw;
        }
    }
    let total = per_stripe.iter().sum();
    AggregateRequest { per_stripe, total }
}
