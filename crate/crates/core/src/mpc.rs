//! Receding-horizon allocation.
//!
//! Each control interval a QP over the next `K` steps is built from the
//! vehicle snapshots and their predicted stripe occupancy; only the first
//! step of the solution is applied.
//!
//! Variables are laid out vehicle-major (`b_0..b_K`, then `P_0..P_{K-1}` for
//! every vehicle) followed by the stripe powers `P_{s,k}` and the unused
//! stripe power `w_{s,k} = P_{s,k} - sum_v g_{s,v,k} P_{v,k}`. Writing the
//! stripe-assignment penalty on `w` keeps the quadratic form diagonal, and
//! `w >= 0` is exactly the stripe capacity constraint.
//!
//! The QP is written in percent of SoC and hundreds of kW so that every
//! coefficient is of order one; a kW changes a fraction-valued SoC by about
//! 1e-5 per step, which first-order solvers handle poorly. The tracking term
//! measures both the urgency gap and the deviation in percent.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::benchmark::AllocationPlan;
use crate::error::{Error, Result};
use crate::mobility::OccupancyPrediction;
use crate::qp::{self, QpProblem, QpSolution, QpStatus, SolverSettings, WarmStart};
use crate::scenario::StripeSpec;
use crate::types::{StripeId, VehicleId};

/// QP unit of state of charge: the QP works in percent.
pub const SOC_UNIT: f64 = 0.01;
/// QP unit of power, kW.
pub const POWER_UNIT: f64 = 100.0;

const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    /// Number of steps `K`.
    pub horizon: usize,
    /// Step length, s.
    pub delta_t: f64,
    /// Revenue weight.
    pub lambda: f64,
    /// Stripe-assignment weight.
    pub xi: f64,
    /// A stripe may receive up to `rho` times its static share.
    pub rho: f64,
    /// Floor on the remaining time in the urgency weight, s.
    pub tau_min: f64,
    /// Price per kWh-equivalent, constant.
    pub price: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig { horizon: 6, delta_t: 5.0, lambda: 0.001, xi: 0.01, rho: 4.0, tau_min: 10.0, price: 1.0 }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::Config("mpc.horizon must be at least 1".into()));
        }
        if !(self.delta_t > 0.0) {
            return Err(Error::Config("mpc.delta_t must be positive".into()));
        }
        if !(self.rho > 1.0) {
            return Err(Error::Config("mpc.rho must exceed 1".into()));
        }
        if !(self.tau_min > 0.0) {
            return Err(Error::Config("mpc.tau_min must be positive".into()));
        }
        if !(self.xi >= 0.0) || !(self.lambda >= 0.0) || !self.price.is_finite() {
            return Err(Error::Config("mpc.xi and mpc.lambda must be non-negative".into()));
        }
        Ok(())
    }
}

/// `[target - soc]_+ / max(tau, tau_min)`
pub fn urgency(soc: f64, soc_target: f64, tau: f64, tau_min: f64) -> f64 {
    (soc_target - soc).max(0.0) / tau.max(tau_min)
}

/// Forecast of the driving energy per step, kWh: constant power until the
/// predicted exit, nothing afterwards, and never more than the battery holds.
pub fn consumption_forecast(
    driving_kw: f64,
    tau: f64,
    soc: f64,
    capacity_kwh: f64,
    horizon: usize,
    delta_t: f64,
) -> Vec<f64> {
    let mut left = soc.max(0.0) * capacity_kwh;
    (0..horizon)
        .map(|k| {
            let on_road = (tau - k as f64 * delta_t).clamp(0.0, delta_t);
            let c = (driving_kw * on_road / SECONDS_PER_HOUR).min(left);
            left -= c;
            c
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcVehicle {
    pub id: VehicleId,
    pub soc: f64,
    pub soc_target: f64,
    pub capacity_kwh: f64,
    pub p_on: f64,
    pub prediction: OccupancyPrediction,
    /// kWh per step.
    pub consumption: Vec<f64>,
}

impl MpcVehicle {
    fn coupled(&self) -> bool {
        self.prediction.steps.iter().any(Option::is_some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcInstance {
    pub time: f64,
    pub vehicles: Vec<MpcVehicle>,
    pub stripes: Vec<StripeSpec>,
    /// Power that must be spread over the stripes every step, kW.
    pub total_power: f64,
    pub config: MpcConfig,
}

impl MpcInstance {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let k = self.config.horizon;
        for v in &self.vehicles {
            if v.prediction.vehicle != v.id
                || v.prediction.steps.len() != k
                || v.prediction.coverage.len() != k
                || v.consumption.len() != k
            {
                return Err(Error::Problem(format!("vehicle {} has no prediction over the horizon", v.id)));
            }
            if v.prediction.coverage.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Problem(format!("vehicle {} has a coverage outside [0, 1]", v.id)));
            }
            if v.consumption.iter().any(|c| !(*c >= 0.0)) {
                return Err(Error::Problem(format!("vehicle {} has a negative consumption forecast", v.id)));
            }
            if !(v.capacity_kwh > 0.0) || !(v.p_on > 0.0) || !(0.0..=1.0).contains(&v.soc) {
                return Err(Error::Problem(format!("vehicle {} has invalid battery data", v.id)));
            }
            if v.prediction.steps.iter().flatten().any(|s| s.0 >= self.stripes.len()) {
                return Err(Error::Problem(format!("vehicle {} is predicted on an unknown stripe", v.id)));
            }
        }
        Ok(())
    }

    /// Upper bound on the vehicle's power at step `k`.
    pub fn power_cap(&self, vehicle: &MpcVehicle, k: usize) -> f64 {
        match vehicle.prediction.steps[k] {
            Some(s) => vehicle.p_on.min(self.stripes[s.0].coil_power_nom),
            None => 0.0,
        }
    }

    pub fn stripe_bounds(&self, s: &StripeSpec) -> (f64, f64) {
        (s.p_min, self.config.rho * s.static_share)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarKey {
    Soc(VehicleId, usize),
    Power(VehicleId, usize),
    Stripe(StripeId, usize),
    Unused(StripeId, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RowKey {
    Dynamics(VehicleId, usize),
    Budget(usize),
    Unused(StripeId, usize),
    SocBound(VehicleId, usize),
    PowerBound(VehicleId, usize),
    StripeBound(StripeId, usize),
    UnusedBound(StripeId, usize),
}

trait Shift {
    /// The same quantity one step later.
    fn next(self) -> Self;
}

impl Shift for VarKey {
    fn next(self) -> Self {
        match self {
            VarKey::Soc(v, k) => VarKey::Soc(v, k + 1),
            VarKey::Power(v, k) => VarKey::Power(v, k + 1),
            VarKey::Stripe(s, k) => VarKey::Stripe(s, k + 1),
            VarKey::Unused(s, k) => VarKey::Unused(s, k + 1),
        }
    }
}

impl Shift for RowKey {
    fn next(self) -> Self {
        match self {
            RowKey::Dynamics(v, k) => RowKey::Dynamics(v, k + 1),
            RowKey::Budget(k) => RowKey::Budget(k + 1),
            RowKey::Unused(s, k) => RowKey::Unused(s, k + 1),
            RowKey::SocBound(v, k) => RowKey::SocBound(v, k + 1),
            RowKey::PowerBound(v, k) => RowKey::PowerBound(v, k + 1),
            RowKey::StripeBound(s, k) => RowKey::StripeBound(s, k + 1),
            RowKey::UnusedBound(s, k) => RowKey::UnusedBound(s, k + 1),
        }
    }
}

/// Maps QP indices back to model quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct QpLayout {
    pub horizon: usize,
    pub vehicles: Vec<VehicleId>,
    pub n_stripes: usize,
    pub vars: Vec<VarKey>,
    pub eq_rows: Vec<RowKey>,
    pub ineq_rows: Vec<RowKey>,
}

impl QpLayout {
    fn per_vehicle(&self) -> usize {
        2 * self.horizon + 1
    }

    pub fn soc(&self, vehicle: usize, k: usize) -> usize {
        vehicle * self.per_vehicle() + k
    }

    pub fn power(&self, vehicle: usize, k: usize) -> usize {
        vehicle * self.per_vehicle() + self.horizon + 1 + k
    }

    pub fn stripe(&self, s: usize, k: usize) -> usize {
        self.vehicles.len() * self.per_vehicle() + k * self.n_stripes + s
    }

    pub fn unused(&self, s: usize, k: usize) -> usize {
        self.stripe(s, k) + self.horizon * self.n_stripes
    }

    /// Variables of the model proper, without the auxiliary unused-power ones.
    pub fn decision_variables(&self) -> usize {
        self.vars.len() - self.horizon * self.n_stripes
    }
}

pub struct MpcQp {
    pub problem: QpProblem,
    pub layout: QpLayout,
}

/// Builds the QP for the vehicles of `instance` (all of them, coupled or not).
pub fn build_qp(instance: &MpcInstance) -> Result<MpcQp> {
    instance.validate()?;
    let cfg = &instance.config;
    let kh = cfg.horizon;
    let ns = instance.stripes.len();
    let nv = instance.vehicles.len();

    let mut layout = QpLayout {
        horizon: kh,
        vehicles: instance.vehicles.iter().map(|v| v.id).collect(),
        n_stripes: ns,
        vars: Vec::new(),
        eq_rows: Vec::new(),
        ineq_rows: Vec::new(),
    };
    for v in &instance.vehicles {
        layout.vars.extend((0..=kh).map(|k| VarKey::Soc(v.id, k)));
        layout.vars.extend((0..kh).map(|k| VarKey::Power(v.id, k)));
    }
    for k in 0..kh {
        layout.vars.extend(instance.stripes.iter().map(|s| VarKey::Stripe(s.id, k)));
    }
    for k in 0..kh {
        layout.vars.extend(instance.stripes.iter().map(|s| VarKey::Unused(s.id, k)));
    }
    let n = layout.vars.len();
    debug_assert_eq!(n, nv * (2 * kh + 1) + 2 * ns * kh);

    let mut qp = QpProblem::new(n);
    qp.names = layout.vars.iter().map(|key| format!("{key:?}")).collect();

    let pct = |soc: f64| soc / SOC_UNIT;
    for (i, v) in instance.vehicles.iter().enumerate() {
        // u * (b - target)^2, everything in percent
        let weight = urgency(pct(v.soc), pct(v.soc_target), v.prediction.tau, cfg.tau_min);
        for k in 1..=kh {
            let b = layout.soc(i, k);
            qp.add_quadratic(b, b, 2.0 * weight);
            qp.linear[b] = -2.0 * weight * pct(v.soc_target);
        }
        for k in 0..kh {
            // Only the covered part of an interval turns assigned power into energy.
            qp.linear[layout.power(i, k)] =
                -cfg.lambda * cfg.price * cfg.delta_t * POWER_UNIT * v.prediction.coverage[k];
        }

        for k in 0..kh {
            let eta = v.prediction.steps[k].map_or(1.0, |s| instance.stripes[s.0].efficiency);
            let gain =
                pct(eta * cfg.delta_t * POWER_UNIT * v.prediction.coverage[k] / (SECONDS_PER_HOUR * v.capacity_kwh));
            qp.add_eq(
                &[(layout.soc(i, k + 1), 1.0), (layout.soc(i, k), -1.0), (layout.power(i, k), -gain)],
                -pct(v.consumption[k] / v.capacity_kwh),
            );
            layout.eq_rows.push(RowKey::Dynamics(v.id, k));
        }
        qp.add_ineq(&[(layout.soc(i, 0), 1.0)], pct(v.soc), pct(v.soc));
        layout.ineq_rows.push(RowKey::SocBound(v.id, 0));
        for k in 1..=kh {
            qp.add_ineq(&[(layout.soc(i, k), 1.0)], 0.0, pct(v.soc_target.max(v.soc)));
            layout.ineq_rows.push(RowKey::SocBound(v.id, k));
        }
        for k in 0..kh {
            qp.add_ineq(&[(layout.power(i, k), 1.0)], 0.0, instance.power_cap(v, k) / POWER_UNIT);
            layout.ineq_rows.push(RowKey::PowerBound(v.id, k));
        }
    }

    let mut members: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); ns]; kh];
    for (i, v) in instance.vehicles.iter().enumerate() {
        for (k, s) in v.prediction.steps.iter().enumerate() {
            if let Some(s) = s {
                members[k][s.0].push(i);
            }
        }
    }
    for k in 0..kh {
        let row: Vec<(usize, f64)> = (0..ns).map(|s| (layout.stripe(s, k), 1.0)).collect();
        qp.add_eq(&row, instance.total_power / POWER_UNIT);
        layout.eq_rows.push(RowKey::Budget(k));
    }
    for k in 0..kh {
        for s in &instance.stripes {
            let mut row = vec![(layout.unused(s.id.0, k), 1.0), (layout.stripe(s.id.0, k), -1.0)];
            row.extend(members[k][s.id.0].iter().map(|&i| (layout.power(i, k), 1.0)));
            qp.add_eq(&row, 0.0);
            layout.eq_rows.push(RowKey::Unused(s.id, k));
        }
    }
    for k in 0..kh {
        for s in &instance.stripes {
            let (lo, hi) = instance.stripe_bounds(s);
            qp.add_ineq(&[(layout.stripe(s.id.0, k), 1.0)], lo / POWER_UNIT, hi / POWER_UNIT);
            layout.ineq_rows.push(RowKey::StripeBound(s.id, k));
        }
    }
    for k in 0..kh {
        for s in &instance.stripes {
            let w = layout.unused(s.id.0, k);
            qp.add_quadratic(w, w, 2.0 * cfg.xi * POWER_UNIT * POWER_UNIT);
            qp.add_ineq(&[(w, 1.0)], 0.0, f64::INFINITY);
            layout.ineq_rows.push(RowKey::UnusedBound(s.id, k));
        }
    }
    Ok(MpcQp { problem: qp, layout })
}

/// Per-solve statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpStats {
    pub time: f64,
    pub variables: usize,
    pub constraints: usize,
    pub iterations: usize,
    pub objective: f64,
    pub polished: bool,
    /// Largest correction applied to the first-step plan, kW.
    pub max_clip: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcStep {
    pub plan: AllocationPlan,
    pub stats: QpStats,
}

/// Stateful receding-horizon controller; keeps the last solution to warm
/// start the next one.
#[derive(Debug, Clone)]
pub struct MpcController {
    settings: SolverSettings,
    previous: Option<(QpLayout, QpSolution)>,
}

impl MpcController {
    pub fn new(settings: SolverSettings) -> Self {
        MpcController { settings, previous: None }
    }

    pub fn reset(&mut self) {
        self.previous = None;
    }

    /// Solves one receding-horizon step. Vehicles not predicted on any stripe
    /// over the horizon cannot receive power and are left out of the QP.
    pub fn solve_step(&mut self, instance: &MpcInstance) -> Result<MpcStep> {
        instance.validate()?;
        let mut reduced = instance.clone();
        reduced.vehicles.retain(MpcVehicle::coupled);
        let MpcQp { problem, layout } = build_qp(&reduced)?;

        let warm = self.previous.as_ref().map(|(old, sol)| shifted_warm_start(old, sol, &layout));
        let sol = qp::solve(&problem, &self.settings, warm.as_ref())?;
        match sol.status {
            QpStatus::Optimal => {}
            QpStatus::Infeasible => return Err(Error::SolverInfeasible),
            QpStatus::MaxIter => {
                return Err(Error::SolverFailed {
                    iterations: sol.iterations,
                    primal: sol.primal_residual,
                    dual: sol.dual_residual,
                });
            }
        }

        let mut powers: Vec<f64> =
            (0..reduced.vehicles.len()).map(|i| sol.x[layout.power(i, 0)] * POWER_UNIT).collect();
        let mut stripe_power: Vec<f64> =
            (0..reduced.stripes.len()).map(|s| sol.x[layout.stripe(s, 0)] * POWER_UNIT).collect();
        let max_clip = clip_first_step(&reduced, &mut powers, &mut stripe_power);

        let mut plan = AllocationPlan { timestamp: instance.time, ..Default::default() };
        for v in &instance.vehicles {
            plan.per_vehicle.insert(v.id, 0.0);
        }
        for (v, p) in reduced.vehicles.iter().zip(&powers) {
            plan.per_vehicle.insert(v.id, *p);
            if let Some(s) = v.prediction.steps[0] {
                plan.coupling.insert(v.id, s);
            }
        }
        for (s, p) in reduced.stripes.iter().zip(&stripe_power) {
            plan.per_stripe.insert(s.id, *p);
        }
        let stats = QpStats {
            time: instance.time,
            variables: problem.n,
            constraints: problem.n_eq() + problem.n_ineq(),
            iterations: sol.iterations,
            objective: sol.objective,
            polished: sol.polished,
            max_clip,
        };
        self.previous = Some((layout, sol));
        Ok(MpcStep { plan, stats })
    }
}

fn shift_values<K: Copy + Eq + Hash + Shift>(old_keys: &[K], old: &[f64], new_keys: &[K]) -> Vec<f64> {
    let map: HashMap<K, f64> = old_keys.iter().copied().zip(old.iter().copied()).collect();
    new_keys.iter().map(|key| map.get(&key.next()).or_else(|| map.get(key)).copied().unwrap_or(0.0)).collect()
}

/// Previous solution moved one step forward in time, matched by key.
fn shifted_warm_start(old: &QpLayout, sol: &QpSolution, new: &QpLayout) -> WarmStart {
    WarmStart {
        x: shift_values(&old.vars, &sol.x, &new.vars),
        y_eq: shift_values(&old.eq_rows, &sol.y_eq, &new.eq_rows),
        y_ineq: shift_values(&old.ineq_rows, &sol.y_ineq, &new.ineq_rows),
    }
}

/// Moves `values` (each within `[lo, hi]`) so they sum to `target`, spreading
/// the change evenly over the entries that still have room.
fn rebalance(values: &mut [f64], lo: &[f64], hi: &[f64], target: f64) {
    for _ in 0..=values.len() {
        let diff = target - values.iter().sum::<f64>();
        // Stop at the rounding level of the sum.
        if diff.abs() <= values.len() as f64 * f64::EPSILON * target.abs().max(1.0) {
            return;
        }
        let free: Vec<usize> =
            (0..values.len()).filter(|&i| if diff > 0.0 { values[i] < hi[i] } else { values[i] > lo[i] }).collect();
        if free.is_empty() {
            return;
        }
        let share = diff / free.len() as f64;
        for i in free {
            values[i] = (values[i] + share).clamp(lo[i], hi[i]);
        }
    }
}

/// Repairs solver-tolerance violations of the first-step plan so that it
/// satisfies every bound, the budget and the stripe capacities exactly.
/// Returns the largest single correction.
pub fn clip_first_step(instance: &MpcInstance, powers: &mut [f64], stripe_power: &mut [f64]) -> f64 {
    let before_v = powers.to_vec();
    let before_s = stripe_power.to_vec();
    for (v, p) in instance.vehicles.iter().zip(powers.iter_mut()) {
        *p = p.clamp(0.0, instance.power_cap(v, 0));
    }
    let bounds: Vec<(f64, f64)> = instance.stripes.iter().map(|s| instance.stripe_bounds(s)).collect();
    let lo: Vec<f64> = bounds.iter().map(|b| b.0).collect();
    let hi: Vec<f64> = bounds.iter().map(|b| b.1).collect();
    for (p, (l, h)) in stripe_power.iter_mut().zip(&bounds) {
        *p = p.clamp(*l, *h);
    }
    let mut load = vec![0.0; instance.stripes.len()];
    for (v, p) in instance.vehicles.iter().zip(powers.iter()) {
        if let Some(s) = v.prediction.steps[0] {
            load[s.0] += p;
        }
    }
    // Prefer taking power from stripes with spare capacity.
    let soft_lo: Vec<f64> = (0..lo.len()).map(|s| load[s].clamp(lo[s], hi[s])).collect();
    let start: Vec<f64> = stripe_power.iter().zip(&soft_lo).map(|(p, l)| p.max(*l)).collect();
    stripe_power.copy_from_slice(&start);
    rebalance(stripe_power, &soft_lo, &hi, instance.total_power);
    rebalance(stripe_power, &lo, &hi, instance.total_power);

    for s in 0..load.len() {
        if load[s] > stripe_power[s] {
            let f = stripe_power[s] / load[s];
            for (v, p) in instance.vehicles.iter().zip(powers.iter_mut()) {
                if v.prediction.steps[0] == Some(StripeId(s)) {
                    *p *= f;
                }
            }
        }
    }
    let dv = before_v.iter().zip(powers.iter()).map(|(a, b)| (a - b).abs());
    let ds = before_s.iter().zip(stripe_power.iter()).map(|(a, b)| (a - b).abs());
    dv.chain(ds).fold(0.0, f64::max)
}

/// Largest violation of the first-step constraints by `plan`, kW: vehicle
/// bounds, stripe bounds, the budget, and stripe capacity.
pub fn plan_violation(instance: &MpcInstance, plan: &AllocationPlan) -> f64 {
    let mut worst = 0.0f64;
    let mut load: BTreeMap<StripeId, f64> = BTreeMap::new();
    for v in &instance.vehicles {
        let p = plan.vehicle_power(v.id);
        worst = worst.max(-p).max(p - instance.power_cap(v, 0));
        if let Some(s) = v.prediction.steps[0] {
            *load.entry(s).or_default() += p;
        }
    }
    let mut total = 0.0;
    for s in &instance.stripes {
        let p = plan.per_stripe.get(&s.id).copied().unwrap_or(0.0);
        let (lo, hi) = instance.stripe_bounds(s);
        worst = worst.max(lo - p).max(p - hi);
        worst = worst.max(load.get(&s.id).copied().unwrap_or(0.0) - p);
        total += p;
    }
    worst.max((total - instance.total_power).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::build_default_scenario;
    use proptest::prelude::*;

    fn vehicle(id: u64, soc: f64, target: f64, steps: Vec<Option<StripeId>>, tau: f64) -> MpcVehicle {
        let k = steps.len();
        MpcVehicle {
            id: VehicleId(id),
            soc,
            soc_target: target,
            capacity_kwh: 50.0,
            p_on: 150.0,
            prediction: OccupancyPrediction {
                vehicle: VehicleId(id),
                coverage: steps.iter().map(|s| if s.is_some() { 1.0 } else { 0.0 }).collect(),
                steps,
                tau,
            },
            consumption: vec![0.0; k],
        }
    }

    fn instance(vehicles: Vec<MpcVehicle>, config: MpcConfig) -> MpcInstance {
        let (_, stripes, _, sim) = build_default_scenario();
        MpcInstance { time: 0.0, vehicles, stripes, total_power: sim.total_power, config }
    }

    fn solve(inst: &MpcInstance) -> MpcStep {
        MpcController::new(SolverSettings::default()).solve_step(inst).unwrap()
    }

    #[test]
    fn urgency_values() {
        assert!((urgency(0.02, 1.0, 600.0, 10.0) - 0.98 / 600.0).abs() < 1e-15);
        assert_eq!(urgency(0.9, 0.8, 100.0, 10.0), 0.0);
        assert!((urgency(0.5, 0.8, 1.0, 10.0) - 0.3 / 10.0).abs() < 1e-15);
    }

    #[test]
    fn single_vehicle_single_step_dimensions() {
        let cfg = MpcConfig { horizon: 1, ..Default::default() };
        let inst = instance(vec![vehicle(1, 0.3, 0.8, vec![Some(StripeId(0))], 100.0)], cfg);
        let MpcQp { problem, layout } = build_qp(&inst).unwrap();
        let ns = inst.stripes.len();
        assert_eq!(layout.decision_variables(), 1 + ns + 2);
        assert_eq!(problem.n, 1 + 2 * ns + 2);
        assert_eq!(layout.vars[layout.power(0, 0)], VarKey::Power(VehicleId(1), 0));
        assert_eq!(layout.vars[layout.stripe(3, 0)], VarKey::Stripe(StripeId(3), 0));
        assert_eq!(layout.vars[layout.unused(3, 0)], VarKey::Unused(StripeId(3), 0));
    }

    #[test]
    fn off_stripe_steps_have_zero_power_bound() {
        let inst = instance(
            vec![vehicle(1, 0.3, 0.8, vec![Some(StripeId(0)), None, None, Some(StripeId(1)), None, None], 100.0)],
            MpcConfig::default(),
        );
        let MpcQp { problem, layout } = build_qp(&inst).unwrap();
        for k in 0..6 {
            let row = layout.ineq_rows.iter().position(|r| *r == RowKey::PowerBound(VehicleId(1), k)).unwrap();
            let expected = if [0, 3].contains(&k) { 100.0 } else { 0.0 };
            assert_eq!(problem.upper[row] * POWER_UNIT, expected);
            assert_eq!(problem.lower[row], 0.0);
        }
    }

    #[test]
    fn static_plan_is_feasible() {
        let inst = instance(
            vec![
                vehicle(1, 0.3, 0.8, vec![Some(StripeId(0)); 6], 100.0),
                vehicle(2, 0.1, 0.9, vec![None, None, Some(StripeId(2)), Some(StripeId(2)), None, None], 300.0),
            ],
            MpcConfig::default(),
        );
        let MpcQp { problem, layout } = build_qp(&inst).unwrap();
        let mut x = vec![0.0; problem.n];
        for (i, v) in inst.vehicles.iter().enumerate() {
            x[layout.soc(i, 0)] = v.soc / SOC_UNIT;
            for k in 0..6 {
                x[layout.soc(i, k + 1)] = x[layout.soc(i, k)] - v.consumption[k] / v.capacity_kwh / SOC_UNIT;
            }
        }
        for s in &inst.stripes {
            for k in 0..6 {
                x[layout.stripe(s.id.0, k)] = s.static_share / POWER_UNIT;
                x[layout.unused(s.id.0, k)] = s.static_share / POWER_UNIT;
            }
        }
        let r = qp::kkt_residuals(&problem, &x, &vec![0.0; problem.n_eq()], &vec![0.0; problem.n_ineq()]);
        assert!(r.primal < 1e-9, "{r:?}");
    }

    #[test]
    fn one_vehicle_with_abundant_power_gets_its_cap() {
        let inst = instance(vec![vehicle(1, 0.3, 0.8, vec![Some(StripeId(0)); 6], 600.0)], MpcConfig::default());
        let step = solve(&inst);
        assert!((step.plan.vehicle_power(VehicleId(1)) - 100.0).abs() < 1e-3);
        assert!(plan_violation(&inst, &step.plan) < 1e-9);
    }

    #[test]
    fn charge_stops_when_predicted_soc_reaches_target() {
        // A gap worth 2.5 steps at full power: 100, 100, 50, then nothing.
        // Without the unused-power term only tracking cares about timing.
        let step_gain = 0.95 * 5.0 * 100.0 / (3600.0 * 50.0);
        let inst = instance(
            vec![vehicle(1, 0.5, 0.5 + 2.5 * step_gain, vec![Some(StripeId(0)); 6], 100.0)],
            MpcConfig { xi: 0.0, ..Default::default() },
        );
        let MpcQp { problem, layout } = build_qp(&inst).unwrap();
        let sol = qp::solve(&problem, &SolverSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let p: Vec<f64> = (0..6).map(|k| sol.x[layout.power(0, k)] * POWER_UNIT).collect();
        for (got, want) in p.iter().zip([100.0, 100.0, 50.0, 0.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-3, "{p:?}");
        }
    }

    #[test]
    fn partial_coverage_scales_the_planned_charge() {
        let mut v = vehicle(1, 0.3, 0.8, vec![Some(StripeId(0)); 6], 600.0);
        v.prediction.coverage = vec![0.5, 1.0, 0.25, 1.0, 1.0, 1.0];
        let inst = instance(vec![v], MpcConfig::default());
        let MpcQp { problem, layout } = build_qp(&inst).unwrap();
        let sol = qp::solve(&problem, &SolverSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        for (k, cov) in inst.vehicles[0].prediction.coverage.iter().enumerate() {
            let p_kw = sol.x[layout.power(0, k)] * POWER_UNIT;
            let want = 100.0 * 0.95 * 5.0 * p_kw * cov / (3600.0 * 50.0);
            let got = sol.x[layout.soc(0, k + 1)] - sol.x[layout.soc(0, k)];
            assert!((got - want).abs() < 1e-6, "step {k}: {got} vs {want}");
        }
    }

    #[test]
    fn coverage_outside_unit_interval_is_rejected() {
        let mut v = vehicle(1, 0.3, 0.8, vec![Some(StripeId(0)); 6], 600.0);
        v.prediction.coverage[2] = 1.5;
        assert!(instance(vec![v], MpcConfig::default()).validate().is_err());
    }

    #[test]
    fn satisfied_vehicles_get_nothing_without_revenue() {
        let cfg = MpcConfig { lambda: 0.0, ..Default::default() };
        let inst = instance(
            vec![
                vehicle(1, 0.8, 0.8, vec![Some(StripeId(0)); 6], 600.0),
                vehicle(2, 0.5, 0.5, vec![Some(StripeId(1)); 6], 600.0),
            ],
            cfg,
        );
        let step = solve(&inst);
        assert!(step.plan.vehicle_power(VehicleId(1)).abs() < 1e-6);
        assert!(step.plan.vehicle_power(VehicleId(2)).abs() < 1e-6);
    }

    #[test]
    fn uncoupled_vehicles_are_left_out() {
        let inst = instance(
            vec![vehicle(1, 0.3, 0.8, vec![None; 6], 600.0), vehicle(2, 0.3, 0.8, vec![Some(StripeId(0)); 6], 600.0)],
            MpcConfig::default(),
        );
        let step = solve(&inst);
        assert_eq!(step.plan.vehicle_power(VehicleId(1)), 0.0);
        assert!(step.plan.per_vehicle.contains_key(&VehicleId(1)));
        assert!(!step.plan.coupling.contains_key(&VehicleId(1)));
        assert_eq!(step.plan.coupling[&VehicleId(2)], StripeId(0));
    }

    #[test]
    fn saturated_stripe_delivers_its_upper_bound() {
        let cfg = MpcConfig { lambda: 0.0, xi: 1e-7, ..Default::default() };
        let vehicles: Vec<MpcVehicle> =
            (0..60).map(|i| vehicle(i, 0.1, 0.9, vec![Some(StripeId(0)); 6], 600.0)).collect();
        let inst = instance(vehicles, cfg);
        let cap = inst.config.rho * inst.stripes[0].static_share;
        assert!(cap < 60.0 * 100.0);
        let step = solve(&inst);
        let total = step.plan.total_vehicle_power();
        assert!((total - cap).abs() < 1e-3 * cap, "{total} vs {cap}");
    }

    #[test]
    fn warm_start_reproduces_solution() {
        let inst = instance(
            (0..20)
                .map(|i| vehicle(i, 0.1 + 0.02 * i as f64, 0.9, vec![Some(StripeId((i % 3) as usize)); 6], 200.0))
                .collect(),
            MpcConfig::default(),
        );
        let mut ctl = MpcController::new(SolverSettings::default());
        let cold = ctl.solve_step(&inst).unwrap();
        let warm = ctl.solve_step(&inst).unwrap();
        for (a, b) in cold.plan.per_vehicle.values().zip(warm.plan.per_vehicle.values()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    fn two_vehicle_instance(soc_low: f64, delta: f64, stripe_cap_scale: f64) -> MpcInstance {
        let mut inst = instance(
            vec![
                vehicle(1, soc_low, 0.9, vec![Some(StripeId(0)); 6], 300.0),
                vehicle(2, soc_low + delta, 0.9, vec![Some(StripeId(0)); 6], 300.0),
            ],
            MpcConfig::default(),
        );
        // Make stripe 0 scarce so the two vehicles compete.
        inst.stripes[0].static_share = stripe_cap_scale;
        inst
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn lower_soc_is_served_first(soc in 0.05f64..0.6, delta in 0.01f64..0.3, share in 10.0f64..60.0) {
            let inst = two_vehicle_instance(soc, delta, share);
            let step = solve(&inst);
            let low = step.plan.vehicle_power(VehicleId(1));
            let high = step.plan.vehicle_power(VehicleId(2));
            prop_assert!(low >= high - 1e-4, "low {} high {}", low, high);
        }

        #[test]
        fn urgency_scale_does_not_move_the_argmin(factor in 0.1f64..10.0) {
            // Scaling every urgency weight is the same as scaling the
            // remaining times inversely.
            let cfg = MpcConfig { lambda: 0.0, xi: 0.0, tau_min: 1e-3, ..Default::default() };
            let make = |scale: f64| {
                let mut inst = instance(
                    vec![
                        vehicle(1, 0.2, 0.9, vec![Some(StripeId(0)); 6], 300.0 / scale),
                        vehicle(2, 0.4, 0.8, vec![Some(StripeId(0)); 6], 500.0 / scale),
                    ],
                    cfg.clone(),
                );
                inst.stripes[0].static_share = 30.0;
                inst
            };
            let a = solve(&make(1.0));
            let b = solve(&make(factor));
            for id in [VehicleId(1), VehicleId(2)] {
                prop_assert!((a.plan.vehicle_power(id) - b.plan.vehicle_power(id)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn rebalance_reaches_target() {
        let mut v = vec![10.0, 20.0, 30.0];
        rebalance(&mut v, &[0.0, 0.0, 25.0], &[12.0, 100.0, 100.0], 100.0);
        assert!((v.iter().sum::<f64>() - 100.0).abs() < 1e-9);
        assert_eq!(v[0], 12.0);
        rebalance(&mut v, &[0.0, 0.0, 25.0], &[12.0, 100.0, 100.0], 30.0);
        assert!((v.iter().sum::<f64>() - 30.0).abs() < 1e-9);
        assert!(v[2] >= 25.0);
    }

    #[test]
    fn forecast_stops_at_exit_and_empty_battery() {
        let c = consumption_forecast(36.0, 7.5, 0.5, 50.0, 3, 5.0);
        assert!((c[0] - 0.05).abs() < 1e-12);
        assert!((c[1] - 0.025).abs() < 1e-12);
        assert_eq!(c[2], 0.0);
        let c = consumption_forecast(3600.0, 100.0, 0.001, 50.0, 3, 5.0);
        assert!((c.iter().sum::<f64>() - 0.05).abs() < 1e-12);
    }
}
