//! Corridor kinematics and stripe occupancy.
//!
//! Vehicles move with a density-dependent speed (Greenshields with a 10 %
//! floor). Density is counted per direction in a window centred on the
//! vehicle, excluding the vehicle itself.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::scenario::{CorridorSpec, StripeSpec};
use crate::types::{Direction, StripeId, VehicleId};

/// Speed floor used whenever a mean speed divides a distance, m/s.
pub const MIN_SPEED: f64 = 0.1;

/// Fraction of free-flow speed kept at jam density.
const SPEED_FLOOR_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub id: VehicleId,
    pub direction: Direction,
    /// Absolute corridor coordinate, m.
    pub position: f64,
    /// m/s
    pub speed: f64,
    pub entry_node: usize,
    pub exit_node: usize,
    pub exit_pos: f64,
    pub entry_time: f64,
    pub soc: f64,
    pub soc_init: f64,
    pub soc_target: f64,
    pub capacity_kwh: f64,
    pub p_on: f64,
    pub is_vut: bool,
    /// Most recent per-tick speeds, newest last.
    pub recent_speeds: VecDeque<f64>,
}

impl VehicleState {
    /// Mean speed over the retained history, or the current speed when no
    /// history exists yet. Never below [`MIN_SPEED`].
    pub fn mean_speed(&self) -> f64 {
        let v = if self.recent_speeds.is_empty() {
            self.speed
        } else {
            self.recent_speeds.iter().sum::<f64>() / self.recent_speeds.len() as f64
        };
        v.max(MIN_SPEED)
    }

    pub fn distance_to_exit(&self) -> f64 {
        ((self.exit_pos - self.position) * self.direction.sign()).max(0.0)
    }

    fn has_exited(&self) -> bool {
        match self.direction {
            Direction::Forward => self.position >= self.exit_pos,
            Direction::Backward => self.position <= self.exit_pos,
        }
    }
}

/// Greenshields speed with a floor so that flow never stalls.
pub fn density_speed(corridor: &CorridorSpec, vehicles_per_meter_per_lane: f64) -> f64 {
    let jam_density = 1.0 / corridor.jam_spacing;
    corridor.free_flow_speed * (1.0 - vehicles_per_meter_per_lane / jam_density).max(SPEED_FLOOR_FRACTION)
}

/// Updates each vehicle's speed from the local density around it.
pub fn update_speeds(vehicles: &mut [VehicleState], corridor: &CorridorSpec) {
    let half = corridor.density_window / 2.0;
    let lanes = corridor.lanes_per_direction as f64;
    for direction in [Direction::Forward, Direction::Backward] {
        let mut order: Vec<(f64, usize)> = vehicles
            .iter()
            .enumerate()
            .filter(|(_, v)| v.direction == direction)
            .map(|(i, v)| (v.position, i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (mut lo, mut hi) = (0usize, 0usize);
        let mut speeds = Vec::with_capacity(order.len());
        for &(pos, _) in &order {
            while order[lo].0 < pos - half {
                lo += 1;
            }
            while hi < order.len() && order[hi].0 <= pos + half {
                hi += 1;
            }
            let others = (hi - lo - 1) as f64;
            speeds.push(density_speed(corridor, others / (corridor.density_window * lanes)));
        }
        for (&(_, idx), speed) in order.iter().zip(speeds) {
            vehicles[idx].speed = speed;
        }
    }
}

/// A vehicle that passed its exit point during a step.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitEvent {
    pub vehicle: VehicleState,
}

/// Advances every vehicle by one tick and removes those that reached their
/// exit point. Exited vehicles are returned in id order.
pub fn step(
    vehicles: &mut Vec<VehicleState>,
    corridor: &CorridorSpec,
    tick: f64,
    history_len: usize,
) -> Vec<ExitEvent> {
    debug_assert!(tick > 0.0);
    update_speeds(vehicles, corridor);
    for v in vehicles.iter_mut() {
        v.position += v.direction.sign() * v.speed * tick;
        if history_len > 0 {
            if v.recent_speeds.len() == history_len {
                v.recent_speeds.pop_front();
            }
            v.recent_speeds.push_back(v.speed);
        }
    }
    let mut exits = Vec::new();
    let mut i = 0;
    while i < vehicles.len() {
        if vehicles[i].has_exited() {
            exits.push(ExitEvent { vehicle: vehicles.remove(i) });
        } else {
            i += 1;
        }
    }
    exits.sort_by_key(|e| e.vehicle.id);
    exits
}

/// The stripe a vehicle at `position` is coupled with, if any.
pub fn occupancy(direction: Direction, position: f64, stripes: &[StripeSpec]) -> Option<StripeId> {
    stripes.iter().find(|s| s.contains(direction, position)).map(|s| s.id)
}

/// Kinematic view of a vehicle sufficient for prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub direction: Direction,
    pub position: f64,
    pub exit_pos: f64,
    /// Mean speed used for extrapolation, m/s.
    pub mean_speed: f64,
}

impl From<&VehicleState> for Kinematics {
    fn from(v: &VehicleState) -> Self {
        Kinematics { direction: v.direction, position: v.position, exit_pos: v.exit_pos, mean_speed: v.mean_speed() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyPrediction {
    pub vehicle: VehicleId,
    /// Stripe coupled during step `k` of the horizon, for `k = 0..K`.
    pub steps: Vec<Option<StripeId>>,
    /// Fraction of step `k` spent on that stripe; 0 when uncoupled.
    pub coverage: Vec<f64>,
    /// Remaining time before the vehicle exits, s.
    pub tau: f64,
}

/// Extrapolates the vehicle at constant mean speed over `horizon` steps of
/// `delta_t` seconds.
///
/// Step `k` covers the predicted path between `t + k*dt` and `t + (k+1)*dt`;
/// the stripe assigned to the step is the one overlapping that path the most,
/// so a vehicle reaching or leaving a stripe inside a control interval is
/// coupled for that interval. Nothing is coupled after the predicted exit.
pub fn predict(
    vehicle: VehicleId,
    kin: Kinematics,
    stripes: &[StripeSpec],
    horizon: usize,
    delta_t: f64,
) -> OccupancyPrediction {
    debug_assert!(horizon >= 1);
    let speed = kin.mean_speed.max(MIN_SPEED);
    let sign = kin.direction.sign();
    let remaining = ((kin.exit_pos - kin.position) * sign).max(0.0);
    let tau = remaining / speed;
    let step_len = delta_t * speed;
    let (steps, coverage) = (0..horizon)
        .map(|k| {
            let from = k as f64 * step_len;
            if from >= remaining {
                return (None, 0.0);
            }
            let to = ((k + 1) as f64 * delta_t * speed).min(remaining);
            let (a, b) = {
                let p0 = kin.position + sign * from;
                let p1 = kin.position + sign * to;
                (p0.min(p1), p0.max(p1))
            };
            match best_overlap(kin.direction, a, b, stripes) {
                Some((overlap, id)) if b > a => (Some(id), (overlap / step_len).clamp(0.0, 1.0)),
                Some((_, id)) => (Some(id), 1.0),
                None => (None, 0.0),
            }
        })
        .unzip();
    OccupancyPrediction { vehicle, steps, coverage, tau }
}

fn best_overlap(direction: Direction, a: f64, b: f64, stripes: &[StripeSpec]) -> Option<(f64, StripeId)> {
    let mut best: Option<(f64, StripeId)> = None;
    for s in stripes.iter().filter(|s| s.direction == direction) {
        let overlap = b.min(s.end_pos) - a.max(s.start_pos);
        let coupled = overlap > 0.0 || (overlap == 0.0 && a == b);
        if coupled && best.is_none_or(|(o, _)| overlap > o) {
            best = Some((overlap, s.id));
        }
    }
    best
}

#[cfg(test)]
pub(crate) fn test_vehicle(id: u64, position: f64) -> VehicleState {
    VehicleState {
        id: VehicleId(id),
        direction: Direction::Forward,
        position,
        speed: 11.0,
        entry_node: 1,
        exit_node: 5,
        exit_pos: 9650.0,
        entry_time: 0.0,
        soc: 0.3,
        soc_init: 0.3,
        soc_target: 0.8,
        capacity_kwh: 50.0,
        p_on: 150.0,
        is_vut: false,
        recent_speeds: VecDeque::new(),
    }
}
